use amsfw::action::path::{geometric_action, DiscretePath};
use amsfw::action::qp::{cost_to_level, minimize_qp, Constraints, QpOptions, Target};
use amsfw::catalog;

#[test]
fn uphill_costs_follow_the_potential() {
    let opts = QpOptions::default();
    let m = catalog::ou_1d();
    for (x, y) in [(0.2, 0.7), (0.5, 1.2), (0.3, 0.31)] {
        let r = minimize_qp(&m, &[x], &Target::Point(vec![y]), &Constraints::avoid_a(), &opts).unwrap();
        let exact = 0.5 * (y * y - x * x);
        assert!((r.value - exact).abs() < 1e-3 * exact.max(1e-3), "{x} -> {y}: {} vs {exact}", r.value);
    }
}

#[test]
fn descending_along_the_flow_is_free() {
    let m = catalog::two_channel();
    let pts: Vec<Vec<f64>> = {
        let mut x = vec![0.9, 0.4];
        let mut out = vec![x.clone()];
        let mut b = vec![0.0; 2];
        for _ in 0..400 {
            m.drift(&x, &mut b);
            x = vec![x[0] + 1e-3 * b[0], x[1] + 1e-3 * b[1]];
            out.push(x.clone());
        }
        out
    };
    let a = geometric_action(&DiscretePath::from_points(&pts), &m);
    assert!(a < 1e-6, "{a}");
}

#[test]
fn confined_level_cost_never_beats_the_free_one() {
    let opts = QpOptions::default();
    let m = catalog::two_channel();
    for l in [0.35, 0.75] {
        let c = cost_to_level(&m, m.x0(), l, &opts).unwrap();
        assert!(c.value >= c.free.value - 1e-4, "l = {l}: {} < {}", c.value, c.free.value);
    }
}
