//! Adaptive (AMS) and fixed-level (FMS) multilevel splitting.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::rng::RngStream;
use crate::sde::{Simulator, Trajectory};

/// Stream reserved for the selection (parent picking) draws of a run.
const SELECTION_STREAM: u64 = u64::MAX;

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct Ancestry {
    pub iteration: usize,
    pub parent: usize,
    pub level: f64,
}

#[derive(Clone, Debug)]
pub struct EnsembleState {
    pub clones: Vec<Trajectory>,
    pub scores: Vec<f64>,
    pub iteration: usize,
    pub branching_levels: Vec<f64>,
    /// Per clone, from the root (iteration 0) to its latest branching.
    pub genealogy: Vec<Vec<Ancestry>>,
    pub killed_counts: Vec<usize>,
}

/// Empirical first-hit law of one level, taken when the run for that level
/// would have stopped.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LevelSnapshot {
    pub level: f64,
    pub iteration: usize,
    pub p_hat: f64,
    /// First-hit states of the clones that reached the level.
    pub states: Vec<Vec<f64>>,
    /// Clones in the ensemble at that time (reached or not).
    pub n: usize,
}

#[derive(Clone, Debug)]
pub struct SplitResult {
    pub p_hat: f64,
    pub iterations: usize,
    pub ensemble: EnsembleState,
    pub cost: usize,
    pub target: f64,
    /// Product of survival fractions, without the final reached fraction.
    pub weight: f64,
    pub snapshots: Vec<LevelSnapshot>,
    pub extinct_level: Option<f64>,
    pub tie_iterations: usize,
}

impl SplitResult {
    /// The final clones, i.e. the empirical path law η̂.
    pub fn eta_samples(&self) -> &[Trajectory] {
        &self.ensemble.clones
    }

    pub fn snapshot(&self, l: f64) -> Option<&LevelSnapshot> {
        self.snapshots.iter().find(|s| (s.level - l).abs() <= 1e-12 * (1.0 + l.abs()))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AmsConfig {
    pub n: usize,
    pub k: usize,
    pub target: f64,
    pub seed: u64,
    #[serde(default)]
    pub analysis_levels: Vec<f64>,
    /// Accept any number of tied clones at a kill level instead of failing.
    #[serde(default)]
    pub allow_ties: bool,
}

pub fn run_ams(model: &Model, n: usize, k: usize, target: f64, seed: u64) -> Result<SplitResult> {
    run_ams_with(model, &AmsConfig { n, k, target, seed, analysis_levels: Vec::new(), allow_ties: false })
}

fn initial_clones(sim: &Simulator, n: usize, target: f64, seed: u64) -> Result<Vec<Trajectory>> {
    let x0 = sim.model().x0().to_vec();
    (0..n as u64)
        .into_par_iter()
        .map(|i| sim.run(&x0, target, RngStream::new(seed, i)))
        .collect()
}

fn snapshot(clones: &[Trajectory], level: f64, iteration: usize, weight: f64) -> LevelSnapshot {
    let states: Vec<Vec<f64>> = clones
        .iter()
        .filter_map(|c| c.first_hit_index(level).map(|i| c.state(i).to_vec()))
        .collect();
    LevelSnapshot {
        level,
        iteration,
        p_hat: weight * states.len() as f64 / clones.len() as f64,
        states,
        n: clones.len(),
    }
}

/// AMS with k-th order statistic kill levels.
///
/// Every clone with score ≤ L_i is killed (K_i ≥ k under ties) and the run
/// stops once fewer than k clones remain below the target; the estimator is
/// ∏(1 − K_i/N) times the fraction of clones at the target, which reduces to
/// ((N − k)/N)^I when no ties occur and k = 1. Ties exactly at ξ(x0) are
/// the atom of clones that never rose above their start and are not
/// treated as a tie flood; if no clone rises, p̂ = 0.
pub fn run_ams_with(model: &Model, cfg: &AmsConfig) -> Result<SplitResult> {
    let (n, k, target) = (cfg.n, cfg.k, cfg.target);
    if n < 2 || k < 1 || k >= n {
        return Err(Error::InvalidArgument(format!("need N >= 2 and 1 <= k < N, got N={n}, k={k}")));
    }
    let mut levels: Vec<f64> = cfg.analysis_levels.iter().cloned().filter(|&l| l <= target).collect();
    levels.sort_by(|a, b| a.partial_cmp(b).unwrap());
    levels.dedup();
    if !levels.iter().any(|&l| l == target) {
        levels.push(target);
    }
    let sim = Simulator::new(model, &levels);
    let clones = initial_clones(&sim, n, target, cfg.seed)?;
    let mut cost: usize = clones.iter().map(|c| c.simulated_steps).sum();
    let mut ens = EnsembleState {
        scores: clones.iter().map(|c| c.score).collect(),
        genealogy: (0..n).map(|i| vec![Ancestry { iteration: 0, parent: i, level: f64::NEG_INFINITY }]).collect(),
        clones,
        iteration: 0,
        branching_levels: Vec::new(),
        killed_counts: Vec::new(),
    };
    let mut select = RngStream::new(cfg.seed, SELECTION_STREAM).rng();
    let mut next_stream = n as u64;
    let mut weight = 1.0;
    let mut pending = levels.into_iter().peekable();
    let mut snapshots = Vec::new();
    let mut tie_iterations = 0;
    let mut sorted = vec![0.0; n];
    let start_score = model.xi(model.x0());
    loop {
        sorted.copy_from_slice(&ens.scores);
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let kill_level = sorted[k - 1];
        while let Some(&l) = pending.peek() {
            if kill_level >= l {
                snapshots.push(snapshot(&ens.clones, l, ens.iteration, weight));
                pending.next();
            } else {
                break;
            }
        }
        if kill_level >= target {
            break;
        }
        let tied = ens.scores.iter().filter(|&&s| s == kill_level).count();
        if tied > n / 2 && kill_level != start_score && !cfg.allow_ties {
            return Err(Error::TieFlood { tied, n, level: kill_level });
        }
        let killed: Vec<usize> = (0..n).filter(|&i| ens.scores[i] <= kill_level).collect();
        let survivors: Vec<usize> = (0..n).filter(|&i| ens.scores[i] > kill_level).collect();
        if survivors.is_empty() {
            ens.killed_counts.push(killed.len());
            return Ok(SplitResult {
                p_hat: 0.0,
                iterations: ens.iteration,
                ensemble: ens,
                cost,
                target,
                weight: 0.0,
                snapshots,
                extinct_level: Some(kill_level),
                tie_iterations,
            });
        }
        if killed.len() > k {
            tie_iterations += 1;
        }
        ens.iteration += 1;
        let it = ens.iteration;
        let jobs: Vec<(usize, usize, u64)> = killed
            .iter()
            .map(|&slot| {
                let parent = survivors[select.random_range(0..survivors.len())];
                let s = next_stream;
                next_stream += 1;
                (slot, parent, s)
            })
            .collect();
        let children: Vec<Trajectory> = jobs
            .par_iter()
            .map(|&(_, parent, stream)| {
                let p = &ens.clones[parent];
                let idx = p.xi.iter().position(|&v| v > kill_level).expect("survivor exceeds kill level");
                sim.branch(p, idx, target, RngStream::new(cfg.seed, stream))
            })
            .collect::<Result<_>>()?;
        for ((slot, parent, _), child) in jobs.into_iter().zip(children) {
            cost += child.simulated_steps;
            let mut chain = ens.genealogy[parent].clone();
            chain.push(Ancestry { iteration: it, parent, level: kill_level });
            ens.genealogy[slot] = chain;
            ens.scores[slot] = child.score;
            ens.clones[slot] = child;
        }
        weight *= 1.0 - killed.len() as f64 / n as f64;
        ens.branching_levels.push(kill_level);
        ens.killed_counts.push(killed.len());
    }
    let reached = ens.scores.iter().filter(|&&s| s >= target).count();
    Ok(SplitResult {
        p_hat: weight * reached as f64 / n as f64,
        iterations: ens.iteration,
        ensemble: ens,
        cost,
        target,
        weight,
        snapshots,
        extinct_level: None,
        tie_iterations,
    })
}

/// FMS on a fixed ladder ℓ_1 < … < ℓ_J; the target is ℓ_J.
pub fn run_fms(model: &Model, n: usize, levels: &[f64], seed: u64) -> Result<SplitResult> {
    if n < 2 {
        return Err(Error::InvalidArgument("need N >= 2".into()));
    }
    if levels.is_empty() || levels.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::InvalidArgument("levels must be strictly increasing".into()));
    }
    let target = *levels.last().unwrap();
    let sim = Simulator::new(model, levels);
    let clones = initial_clones(&sim, n, target, seed)?;
    let mut cost: usize = clones.iter().map(|c| c.simulated_steps).sum();
    let mut ens = EnsembleState {
        scores: clones.iter().map(|c| c.score).collect(),
        genealogy: (0..n).map(|i| vec![Ancestry { iteration: 0, parent: i, level: f64::NEG_INFINITY }]).collect(),
        clones,
        iteration: 0,
        branching_levels: Vec::new(),
        killed_counts: Vec::new(),
    };
    let mut select = RngStream::new(seed, SELECTION_STREAM).rng();
    let mut next_stream = n as u64;
    let mut weight = 1.0;
    let mut snapshots = Vec::new();
    for &level in levels {
        let killed: Vec<usize> = (0..n).filter(|&i| ens.scores[i] < level).collect();
        let survivors: Vec<usize> = (0..n).filter(|&i| ens.scores[i] >= level).collect();
        ens.killed_counts.push(killed.len());
        ens.branching_levels.push(level);
        ens.iteration += 1;
        if survivors.is_empty() {
            return Ok(SplitResult {
                p_hat: 0.0,
                iterations: ens.iteration,
                ensemble: ens,
                cost,
                target,
                weight: 0.0,
                snapshots,
                extinct_level: Some(level),
                tie_iterations: 0,
            });
        }
        let it = ens.iteration;
        let jobs: Vec<(usize, usize, u64)> = killed
            .iter()
            .map(|&slot| {
                let parent = survivors[select.random_range(0..survivors.len())];
                let s = next_stream;
                next_stream += 1;
                (slot, parent, s)
            })
            .collect();
        let children: Vec<Trajectory> = jobs
            .par_iter()
            .map(|&(_, parent, stream)| {
                let p = &ens.clones[parent];
                let idx = p.first_hit_index(level).expect("survivor reached level");
                sim.branch(p, idx, target, RngStream::new(seed, stream))
            })
            .collect::<Result<_>>()?;
        for ((slot, parent, _), child) in jobs.into_iter().zip(children) {
            cost += child.simulated_steps;
            let mut chain = ens.genealogy[parent].clone();
            chain.push(Ancestry { iteration: it, parent, level });
            ens.genealogy[slot] = chain;
            ens.scores[slot] = child.score;
            ens.clones[slot] = child;
        }
        weight *= (n - killed.len()) as f64 / n as f64;
        snapshots.push(snapshot(&ens.clones, level, it, weight));
    }
    Ok(SplitResult {
        p_hat: weight,
        iterations: ens.iteration,
        ensemble: ens,
        cost,
        target,
        weight,
        snapshots,
        extinct_level: None,
        tie_iterations: 0,
    })
}

/// Unbiased estimate of E[ψ(X) 1{τ_target < τ_A}].
pub fn unnormalized_estimate(result: &SplitResult, psi: impl Fn(&Trajectory) -> f64) -> f64 {
    let clones = result.eta_samples();
    let sum: f64 = clones.iter().filter(|c| c.score >= result.target).map(&psi).sum();
    result.weight * sum / clones.len() as f64
}

/// η̂_l(φ): mean of φ over the clones' first-hit states of level l.
///
/// Only levels snapshotted during the run (analysis levels, FMS levels and the
/// target) are available.
pub fn eta_hat(result: &SplitResult, l: f64, phi: impl Fn(&[f64]) -> f64) -> Result<f64> {
    if l > result.target {
        return Err(Error::InvalidArgument(format!("level {l} is above the target {}", result.target)));
    }
    let snap = result
        .snapshot(l)
        .ok_or_else(|| Error::InvalidArgument(format!("level {l} was not on the analysis grid")))?;
    if snap.states.is_empty() {
        return Err(Error::LevelNotReached { level: l, score: f64::NAN });
    }
    Ok(snap.states.iter().map(|s| phi(s)).sum::<f64>() / snap.states.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog;
    use crate::scale::scale_probability;
    use proptest::prelude::*;

    #[test]
    fn trivial_target_needs_no_iteration() {
        let m = catalog::ou_1d();
        let r = run_ams(&m, 16, 1, 0.2, 1).unwrap();
        assert_eq!(r.iterations, 0);
        assert_eq!(r.p_hat, 1.0);
        assert!(r.ensemble.branching_levels.is_empty());
        let f = run_fms(&m, 16, &[0.2], 1).unwrap();
        assert_eq!(f.ensemble.killed_counts, vec![0]);
        assert_eq!(f.p_hat, 1.0);
    }

    #[test]
    fn closed_form_estimator() {
        // N = 100, k = 1, I = 230
        assert!((0.99f64.powi(230) - 0.099_104_815_518_874_66).abs() < 1e-15);
    }

    #[test]
    fn k1_estimator_is_power_of_iterations() {
        let m = catalog::ou_1d();
        for seed in 0..5 {
            let r = run_ams(&m, 20, 1, 1.0, seed).unwrap();
            let ties: usize = r.ensemble.killed_counts.iter().map(|&c| c - 1).sum();
            if ties == 0 {
                let closed = (1.0 - 1.0 / 20.0f64).powi(r.iterations as i32);
                assert!((r.p_hat - closed).abs() < 1e-12 * closed);
            }
            assert!(r.ensemble.scores.iter().all(|&s| s >= 1.0));
        }
    }

    #[test]
    fn ams_invariants() {
        let m = catalog::double_well_1d();
        let r = run_ams_with(
            &m,
            &AmsConfig { n: 32, k: 3, target: m.l_b(), seed: 9, analysis_levels: vec![-0.3, 0.0, 0.3], allow_ties: false },
        )
        .unwrap();
        let lv = &r.ensemble.branching_levels;
        assert!(lv.windows(2).all(|w| w[0] < w[1]));
        assert!(r.p_hat > 0.0 && r.p_hat <= 1.0);
        let mut p = 1.0;
        for &kc in &r.ensemble.killed_counts {
            let next = p * (1.0 - kc as f64 / 32.0);
            assert!(next < p);
            p = next;
        }
        for chain in &r.ensemble.genealogy {
            assert_eq!(chain[0].iteration, 0);
            assert!(chain.windows(2).all(|w| w[0].iteration < w[1].iteration && w[0].level < w[1].level));
        }
        for s in &r.snapshots {
            assert!(s.states.iter().all(|x| m.xi(x) >= s.level));
        }
        let last = *lv.last().unwrap();
        let below = r.ensemble.scores.iter().filter(|&&s| s < m.l_b()).count();
        assert!(below < 3);
        assert!(r.ensemble.scores.iter().all(|&s| s > last));
    }

    #[test]
    fn fms_extinction_returns_zero() {
        let m = catalog::ou_1d().with_epsilon(0.01).unwrap();
        let r = run_fms(&m, 4, &[0.6, 1.0], 3).unwrap();
        assert_eq!(r.p_hat, 0.0);
        assert_eq!(r.extinct_level, Some(0.6));
    }

    #[test]
    fn eta_hat_in_one_dimension_is_the_level_point() {
        let m = catalog::ou_1d();
        let r = run_ams_with(&m, &AmsConfig { n: 50, k: 1, target: 1.0, seed: 4, analysis_levels: vec![0.5], allow_ties: false })
            .unwrap();
        assert_eq!(eta_hat(&r, 0.5, |_| 1.0).unwrap(), 1.0);
        let v = eta_hat(&r, 0.5, |x| x[0]).unwrap();
        // discrete overshoot is at most a few increments of size sqrt(2 eps dt)
        assert!((v - 0.5).abs() < 0.05, "{v}");
        assert!(eta_hat(&r, 0.7, |x| x[0]).is_err());
        assert!(eta_hat(&r, 1.5, |x| x[0]).is_err());
        assert_eq!(unnormalized_estimate(&r, |_| 1.0), r.p_hat);
        assert_eq!(unnormalized_estimate(&r, |c| if c.score >= 1.0 { 1.0 } else { 0.0 }), r.p_hat);
    }

    #[test]
    fn deterministic_given_seed() {
        let m = catalog::two_channel();
        let a = run_ams(&m, 16, 2, 0.5, 77).unwrap();
        let b = run_ams(&m, 16, 2, 0.5, 77).unwrap();
        assert_eq!(a.p_hat, b.p_hat);
        assert_eq!(a.ensemble.clones, b.ensemble.clones);
        assert_eq!(a.cost, b.cost);
    }

    #[test]
    fn short_unbiasedness_check() {
        let m = catalog::ou_1d().with_spec(|s| s.dt = 1e-2).unwrap();
        let oracle = scale_probability(&m, 0.2, 0.0, 0.6).unwrap();
        let reps: Vec<f64> = (0..200).map(|s| run_ams(&m, 16, 1, 0.6, 1000 + s).unwrap().p_hat).collect();
        let mean = reps.iter().sum::<f64>() / reps.len() as f64;
        let var = reps.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / (reps.len() - 1) as f64;
        let se = (var / reps.len() as f64).sqrt();
        // dt = 1e-2 overshoot bias is well within 5 se at this sample size
        assert!((mean - oracle).abs() < 5.0 * se + 0.03 * oracle, "{mean} vs {oracle} (se {se})");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]
        #[test]
        fn ams_p_hat_bounds(seed in 0u64..10_000, k in 1usize..4) {
            let m = catalog::ou_1d().with_spec(|s| s.dt = 1e-2).unwrap();
            let r = run_ams(&m, 8, k, 0.7, seed).unwrap();
            prop_assert!(r.p_hat > 0.0 && r.p_hat <= 1.0);
            prop_assert!(r.ensemble.branching_levels.windows(2).all(|w| w[0] < w[1]));
        }

        #[test]
        fn fms_p_hat_is_product(seed in 0u64..10_000) {
            let m = catalog::ou_1d().with_spec(|s| s.dt = 1e-2).unwrap();
            let r = run_fms(&m, 8, &[0.3, 0.5, 0.7], seed).unwrap();
            let prod: f64 = r.ensemble.killed_counts.iter().map(|&k| (8 - k) as f64 / 8.0).product();
            prop_assert_eq!(r.p_hat, prod);
        }
    }
}
