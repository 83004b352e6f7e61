//! Built-in problem instances.

use crate::model::{Domain, Drift, Model, ModelSpec, Noise, Potential, RefSet, TwoChannel, Xi};

pub fn ou_1d_spec() -> ModelSpec {
    ModelSpec {
        name: "ou_1d".into(),
        drift: Drift::Gradient { potential: Potential::Quadratic { stiffness: vec![1.0] } },
        noise: Noise::Isotropic { scale: 2f64.sqrt() },
        epsilon: 0.25,
        xi: Xi::Coordinate { index: 0 },
        ref_set: RefSet::HalfSpace { normal: vec![1.0], offset: 0.0 },
        l_b: 1.0,
        l_0: 0.0,
        x0: vec![0.2],
        dt: 1e-3,
        max_steps: 10_000_000,
        domain: Some(Domain { lower: vec![-0.5], upper: vec![1.5] }),
        notes: "V = x^2/2, sigma = sqrt(2): U(x, y) = V(y) - V(x) uphill, so U(x0, B) = 0.48. \
                Hitting probabilities follow the scale function; Loss is identically zero."
            .into(),
    }
}

pub fn double_well_1d_spec() -> ModelSpec {
    ModelSpec {
        name: "double_well_1d".into(),
        drift: Drift::Gradient { potential: Potential::DoubleWell },
        noise: Noise::Isotropic { scale: 1.0 },
        epsilon: 0.1,
        xi: Xi::Coordinate { index: 0 },
        ref_set: RefSet::HalfSpace { normal: vec![1.0], offset: -0.9 },
        l_b: 0.5,
        l_0: -0.9,
        x0: vec![-0.5],
        dt: 1e-3,
        max_steps: 10_000_000,
        domain: Some(Domain { lower: vec![-1.5], upper: vec![1.5] }),
        notes: "V = (x^2 - 1)^2/4, sigma = 1: uphill cost is 2 dV, so U(-1, 0) = 1/2 and \
                U(x0, B) = 2 (V(0) - V(-0.5)) = 0.21875. Loss is identically zero."
            .into(),
    }
}

fn two_channel_base() -> ModelSpec {
    ModelSpec {
        name: "two_channel".into(),
        drift: Drift::Gradient { potential: Potential::TwoChannel(TwoChannel::default()) },
        noise: Noise::Isotropic { scale: 2f64.sqrt() },
        epsilon: 0.2,
        xi: Xi::Coordinate { index: 0 },
        ref_set: RefSet::HalfSpace { normal: vec![1.0, 0.0], offset: 0.0 },
        l_b: 1.0,
        l_0: 0.0,
        x0: vec![0.1, 0.0],
        dt: 5e-3,
        max_steps: 10_000_000,
        domain: Some(Domain { lower: vec![-0.2, -2.0], upper: vec![1.3, 2.0] }),
        notes: String::new(),
    }
}

pub fn two_channel_spec() -> ModelSpec {
    ModelSpec {
        notes: "Ridge start between two channels; xi = x is misleading. The upper channel is cheap \
                up to x = 0.5 and walled at x = 0.8, so the instanton climbs along the ridge and the \
                lower side (U(x0, B) ~ 0.90) while most clones reach mid levels through the upper \
                channel. Loss peaks near 0.26 around x = 0.6."
            .into(),
        ..two_channel_base()
    }
}

pub fn two_channel_aligned_spec() -> ModelSpec {
    ModelSpec {
        name: "two_channel_aligned".into(),
        xi: Xi::Potential,
        ref_set: RefSet::XiBelow { level: 0.0 },
        l_b: 1.7,
        l_0: 0.0,
        notes: "Same potential with xi = V, A = {V <= 0}, B = {V >= 1.7}. The uphill flow from x0 \
                crosses every level set at minimal cost, so Loss vanishes and U(x0, B) = 1.7 - V(x0)."
            .into(),
        ..two_channel_base()
    }
}

pub fn ou_1d() -> Model {
    Model::new(ou_1d_spec()).expect("catalog model is valid")
}

pub fn double_well_1d() -> Model {
    Model::new(double_well_1d_spec()).expect("catalog model is valid")
}

pub fn two_channel() -> Model {
    Model::new(two_channel_spec()).expect("catalog model is valid")
}

pub fn two_channel_aligned() -> Model {
    Model::new(two_channel_aligned_spec()).expect("catalog model is valid")
}

pub fn catalog() -> Vec<Model> {
    vec![ou_1d(), double_well_1d(), two_channel(), two_channel_aligned()]
}

pub fn by_name(name: &str) -> Option<Model> {
    catalog().into_iter().find(|m| m.name() == name)
}
