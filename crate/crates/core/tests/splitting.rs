use amsfw::catalog;
use amsfw::splitting::{run_ams, run_fms};
use proptest::prelude::*;

/// Probability of the dt = 1e-3 Euler chain for the OU reference, from 10^6
/// crude paths.
const OU_CHAIN_P: f64 = 0.088926;

#[test]
fn fixed_seed_reproduces_the_run() {
    let m = catalog::two_channel().with_epsilon(0.3).unwrap();
    let a = run_ams(&m, 32, 2, m.l_b(), 5).unwrap();
    let b = run_ams(&m, 32, 2, m.l_b(), 5).unwrap();
    assert_eq!(a.p_hat, b.p_hat);
    assert_eq!(a.iterations, b.iterations);
    assert_eq!(a.ensemble.branching_levels, b.ensemble.branching_levels);
}

#[test]
fn single_level_at_the_start_keeps_everyone() {
    let m = catalog::ou_1d();
    let r = run_fms(&m, 16, &[m.xi(m.x0())], 3).unwrap();
    assert_eq!(r.p_hat, 1.0);
}

#[test]
fn ams_mean_matches_the_euler_chain() {
    let m = catalog::ou_1d();
    let runs = 300;
    let p: Vec<f64> = (0..runs).map(|s| run_ams(&m, 32, 1, m.l_b(), 1000 + s).unwrap().p_hat).collect();
    let mean = p.iter().sum::<f64>() / runs as f64;
    let var = p.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (runs - 1) as f64;
    let se = (var / runs as f64).sqrt();
    assert!((mean - OU_CHAIN_P).abs() < 4.0 * se, "{mean} +- {se}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn estimator_is_the_product_of_survival_fractions(seed in 0u64..10_000, n in 4usize..24, kf in 0.0f64..0.5) {
        let m = catalog::two_channel().with_epsilon(0.4).unwrap();
        let k = 1 + ((n / 2 - 1) as f64 * kf) as usize;
        let r = run_ams(&m, n, k, m.l_b(), seed).unwrap();
        prop_assert!((0.0..=1.0).contains(&r.p_hat));
        let weight: f64 = r.ensemble.killed_counts.iter().map(|&c| 1.0 - c as f64 / n as f64).product();
        prop_assert!((weight - r.weight).abs() <= 1e-12);
        prop_assert!(r.ensemble.killed_counts.iter().all(|&c| c >= k));
        prop_assert!(r.ensemble.branching_levels.windows(2).all(|w| w[0] < w[1]));
        if r.extinct_level.is_none() {
            let reached = r.ensemble.clones.iter().filter(|c| c.hit_target).count() as f64 / n as f64;
            prop_assert!((r.p_hat - r.weight * reached).abs() <= 1e-12);
        } else {
            prop_assert_eq!(r.p_hat, 0.0);
        }
    }

    #[test]
    fn fms_estimate_is_a_product_of_fractions(seed in 0u64..10_000, j in 1usize..6) {
        let m = catalog::ou_1d();
        let a = m.xi(m.x0());
        let levels: Vec<f64> = (1..=j).map(|i| a + (m.l_b() - a) * i as f64 / j as f64).collect();
        let r = run_fms(&m, 16, &levels, seed).unwrap();
        // every factor is a multiple of 1/16
        let scaled = r.p_hat * 16f64.powi(j as i32);
        prop_assert!((scaled - scaled.round()).abs() < 1e-6);
    }
}
