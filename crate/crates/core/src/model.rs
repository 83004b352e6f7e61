//! Problem instances: drift, diffusion, importance function and the two
//! level sets that define the rare event.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smooth softplus, stable for large arguments.
fn softplus(z: f64) -> f64 {
    if z > 30.0 {
        z
    } else if z < -30.0 {
        z.exp()
    } else {
        z.exp().ln_1p()
    }
}

fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Two parallel channels at y = +1 and y = -1 separated by a ridge at y = 0
/// whose height grows with x, so the ridge is never a shortcut.
///
/// The lower channel climbs with constant slope `slope_low`. The upper one is
/// cheap up to `plateau_start`, then climbs like the lower one, then meets a
/// steep wall at `wall_start`.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TwoChannel {
    pub barrier: f64,
    pub barrier_growth: f64,
    pub blend: f64,
    pub blend_shift: f64,
    pub slope_low: f64,
    pub slope_up: f64,
    pub plateau_start: f64,
    pub wall_start: f64,
    pub wall_slope: f64,
    pub softness: f64,
}

impl Default for TwoChannel {
    fn default() -> Self {
        TwoChannel {
            barrier: 4.0,
            barrier_growth: 0.0,
            blend: 0.25,
            blend_shift: 0.5,
            slope_low: 1.0,
            slope_up: 0.1,
            plateau_start: 0.5,
            wall_start: 0.8,
            wall_slope: 4.0,
            softness: 0.04,
        }
    }
}

impl TwoChannel {
    // (G+, G+', G+'')
    fn upper(&self, x: f64) -> (f64, f64, f64) {
        let s = self.softness;
        let c = self.slope_low;
        let a = self.slope_up;
        let k = self.wall_slope;
        let z1 = (x - self.plateau_start) / s;
        let z2 = (x - self.wall_start) / s;
        let (s1, s2) = (logistic(z1), logistic(z2));
        let g = a * x + (c - a) * s * softplus(z1) + (k - c) * s * softplus(z2);
        let g1 = a + (c - a) * s1 + (k - c) * s2;
        let g2 = ((c - a) * s1 * (1.0 - s1) + (k - c) * s2 * (1.0 - s2)) / s;
        (g, g1, g2)
    }

    // (ω, ω', ω'')
    fn weight(&self, y: f64) -> (f64, f64, f64) {
        let d = self.blend;
        let t = ((y - self.blend_shift) / d).tanh();
        let sech2 = 1.0 - t * t;
        (0.5 * (1.0 + t), sech2 / (2.0 * d), -t * sech2 / (d * d))
    }

    fn barrier_at(&self, x: f64) -> f64 {
        self.barrier + self.barrier_growth * x
    }

    fn value(&self, x: f64, y: f64) -> f64 {
        let w = self.barrier_at(x) * (y * y - 1.0).powi(2) / 4.0;
        let gl = self.slope_low * x;
        let (gu, _, _) = self.upper(x);
        let (om, _, _) = self.weight(y);
        w + gl + om * (gu - gl)
    }

    fn gradient(&self, x: f64, y: f64) -> [f64; 2] {
        let c = self.slope_low;
        let (gu, gu1, _) = self.upper(x);
        let (om, om1, _) = self.weight(y);
        let q = y * y - 1.0;
        let wx = self.barrier_growth * q * q / 4.0;
        let wy = self.barrier_at(x) * y * q;
        [wx + c + om * (gu1 - c), wy + om1 * (gu - c * x)]
    }

    fn hessian(&self, x: f64, y: f64) -> [f64; 4] {
        let c = self.slope_low;
        let (gu, gu1, gu2) = self.upper(x);
        let (om, om1, om2) = self.weight(y);
        let wyy = self.barrier_at(x) * (3.0 * y * y - 1.0);
        let xy = self.barrier_growth * y * (y * y - 1.0) + om1 * (gu1 - c);
        [om * gu2, xy, xy, wyy + om2 * (gu - c * x)]
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Potential {
    /// V = ½ Σ kᵢ xᵢ²
    Quadratic { stiffness: Vec<f64> },
    /// V = (x² − 1)²/4
    DoubleWell,
    TwoChannel(TwoChannel),
}

impl Potential {
    pub fn dim(&self) -> usize {
        match self {
            Potential::Quadratic { stiffness } => stiffness.len(),
            Potential::DoubleWell => 1,
            Potential::TwoChannel(_) => 2,
        }
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        match self {
            Potential::Quadratic { stiffness } => {
                0.5 * stiffness.iter().zip(x).map(|(k, v)| k * v * v).sum::<f64>()
            }
            Potential::DoubleWell => (x[0] * x[0] - 1.0).powi(2) / 4.0,
            Potential::TwoChannel(p) => p.value(x[0], x[1]),
        }
    }

    pub fn gradient(&self, x: &[f64], out: &mut [f64]) {
        match self {
            Potential::Quadratic { stiffness } => {
                for i in 0..x.len() {
                    out[i] = stiffness[i] * x[i];
                }
            }
            Potential::DoubleWell => out[0] = x[0] * (x[0] * x[0] - 1.0),
            Potential::TwoChannel(p) => out.copy_from_slice(&p.gradient(x[0], x[1])),
        }
    }

    /// Row-major Hessian.
    pub fn hessian(&self, x: &[f64], out: &mut [f64]) {
        let d = x.len();
        match self {
            Potential::Quadratic { stiffness } => {
                out.iter_mut().for_each(|v| *v = 0.0);
                for i in 0..d {
                    out[i * d + i] = stiffness[i];
                }
            }
            Potential::DoubleWell => out[0] = 3.0 * x[0] * x[0] - 1.0,
            Potential::TwoChannel(p) => out.copy_from_slice(&p.hessian(x[0], x[1])),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Drift {
    /// b = −∇V
    Gradient { potential: Potential },
    /// b = M x
    Linear { matrix: Vec<Vec<f64>> },
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Noise {
    /// σ = s·Id
    Isotropic { scale: f64 },
    /// Constant d×m matrix, rows are state components.
    Matrix { sigma: Vec<Vec<f64>> },
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Xi {
    Coordinate { index: usize },
    Linear { weights: Vec<f64>, offset: f64 },
    /// ξ = V, only for gradient drifts.
    Potential,
}

/// Reference set A = {g_A ≤ 0}.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RefSet {
    /// g_A = n·x − offset
    HalfSpace { normal: Vec<f64>, offset: f64 },
    /// g_A = |x − c| − r
    Ball { center: Vec<f64>, radius: f64 },
    /// g_A = ξ(x) − level
    XiBelow { level: f64 },
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Domain {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

fn default_max_steps() -> usize {
    10_000_000
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ModelSpec {
    pub name: String,
    pub drift: Drift,
    pub noise: Noise,
    pub epsilon: f64,
    pub xi: Xi,
    pub ref_set: RefSet,
    pub l_b: f64,
    pub l_0: f64,
    pub x0: Vec<f64>,
    pub dt: f64,
    #[serde(default = "default_max_steps")]
    pub max_steps: usize,
    #[serde(default)]
    pub domain: Option<Domain>,
    #[serde(default)]
    pub notes: String,
}

/// A validated problem instance.
#[derive(Clone, Debug)]
pub struct Model {
    spec: ModelSpec,
    dim: usize,
    sigma: DMatrix<f64>,
    metric: DMatrix<f64>,
    iso: Option<f64>,
    linear: Option<DMatrix<f64>>,
}

impl Model {
    pub fn new(spec: ModelSpec) -> Result<Model> {
        let dim = spec.x0.len();
        if dim == 0 {
            return Err(Error::InvalidModel("empty x0".into()));
        }
        let linear = match &spec.drift {
            Drift::Gradient { potential } => {
                if potential.dim() != dim {
                    return Err(Error::InvalidModel(format!(
                        "potential has dimension {}, x0 has {}",
                        potential.dim(),
                        dim
                    )));
                }
                None
            }
            Drift::Linear { matrix } => Some(square(matrix, dim, "drift matrix")?),
        };
        let (sigma, iso) = match &spec.noise {
            Noise::Isotropic { scale } => {
                if *scale <= 0.0 {
                    return Err(Error::InvalidModel("noise scale must be positive".into()));
                }
                (DMatrix::identity(dim, dim) * *scale, Some(*scale))
            }
            Noise::Matrix { sigma } => {
                if sigma.len() != dim || sigma.iter().any(|r| r.len() != sigma[0].len()) {
                    return Err(Error::InvalidModel("sigma must have one row per state component".into()));
                }
                let m = sigma[0].len();
                (DMatrix::from_fn(dim, m, |i, j| sigma[i][j]), None)
            }
        };
        let a = &sigma * sigma.transpose();
        let eig = a.clone().symmetric_eigen();
        let (lo, hi) = eig
            .eigenvalues
            .iter()
            .fold((f64::INFINITY, 0.0f64), |(lo, hi), &v| (lo.min(v), hi.max(v.abs())));
        if !(lo > 1e-12 * hi.max(1e-300)) {
            return Err(Error::SingularMetric);
        }
        let metric = a.try_inverse().ok_or(Error::SingularMetric)?;
        match &spec.xi {
            Xi::Coordinate { index } if *index >= dim => {
                return Err(Error::InvalidModel("xi coordinate out of range".into()))
            }
            Xi::Linear { weights, .. } if weights.len() != dim => {
                return Err(Error::InvalidModel("xi weights have wrong length".into()))
            }
            Xi::Potential if linear.is_some() => {
                return Err(Error::InvalidModel("xi = V needs a gradient drift".into()))
            }
            _ => {}
        }
        match &spec.ref_set {
            RefSet::HalfSpace { normal, .. } if normal.len() != dim => {
                return Err(Error::InvalidModel("half-space normal has wrong length".into()))
            }
            RefSet::Ball { center, .. } if center.len() != dim => {
                return Err(Error::InvalidModel("ball center has wrong length".into()))
            }
            _ => {}
        }
        if !(spec.epsilon >= 0.0) || !(spec.dt > 0.0) {
            return Err(Error::InvalidModel("need epsilon >= 0 and dt > 0".into()));
        }
        if let Some(d) = &spec.domain {
            if d.lower.len() != dim || d.upper.len() != dim || d.lower.iter().zip(&d.upper).any(|(l, u)| l >= u) {
                return Err(Error::InvalidModel("bad domain box".into()));
            }
        }
        let model = Model { dim, sigma, metric, iso, linear, spec };
        if model.in_a(&model.spec.x0) {
            return Err(Error::InvalidModel("x0 lies in A".into()));
        }
        let xi0 = model.xi(&model.spec.x0);
        if !(xi0 > model.spec.l_0) {
            return Err(Error::InvalidModel(format!("xi(x0) = {xi0} is not above l_0")));
        }
        if model.spec.l_b <= model.spec.l_0 {
            return Err(Error::InvalidModel("l_B must exceed l_0".into()));
        }
        model.check_disjoint()?;
        Ok(model)
    }

    /// Scans the domain box (when configured) for points in both A and B.
    fn check_disjoint(&self) -> Result<()> {
        let Some(dom) = &self.spec.domain else { return Ok(()) };
        let per_axis: usize = match self.dim {
            1 => 4001,
            2 => 201,
            3 => 41,
            _ => return Ok(()),
        };
        let total = per_axis.pow(self.dim as u32);
        let mut x = vec![0.0; self.dim];
        for flat in 0..total {
            let mut rest = flat;
            for i in 0..self.dim {
                let k = rest % per_axis;
                rest /= per_axis;
                x[i] = dom.lower[i] + (dom.upper[i] - dom.lower[i]) * k as f64 / (per_axis - 1) as f64;
            }
            if self.in_a(&x) && self.xi(&x) >= self.spec.l_b {
                return Err(Error::InvalidModel(format!("A and B intersect near {x:?}")));
            }
        }
        Ok(())
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn name(&self) -> &str {
        &self.spec.name
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn noise_dim(&self) -> usize {
        self.sigma.ncols()
    }

    pub fn epsilon(&self) -> f64 {
        self.spec.epsilon
    }

    pub fn dt(&self) -> f64 {
        self.spec.dt
    }

    pub fn max_steps(&self) -> usize {
        self.spec.max_steps
    }

    pub fn x0(&self) -> &[f64] {
        &self.spec.x0
    }

    pub fn l_b(&self) -> f64 {
        self.spec.l_b
    }

    pub fn l_0(&self) -> f64 {
        self.spec.l_0
    }

    pub fn domain(&self) -> Option<&Domain> {
        self.spec.domain.as_ref()
    }

    /// ξ(x0) ≥ l_B: the event is certain.
    pub fn is_trivial(&self) -> bool {
        self.xi(&self.spec.x0) >= self.spec.l_b
    }

    pub fn with_epsilon(&self, epsilon: f64) -> Result<Model> {
        let mut spec = self.spec.clone();
        spec.epsilon = epsilon;
        Model::new(spec)
    }

    pub fn with_spec(&self, f: impl FnOnce(&mut ModelSpec)) -> Result<Model> {
        let mut spec = self.spec.clone();
        f(&mut spec);
        Model::new(spec)
    }

    /// Noise scale s when b = −∇V and σ = s·Id.
    pub fn gradient_scale(&self) -> Option<f64> {
        match self.spec.drift {
            Drift::Gradient { .. } => self.iso,
            Drift::Linear { .. } => None,
        }
    }

    pub fn isotropic_scale(&self) -> Option<f64> {
        self.iso
    }

    pub fn potential(&self, x: &[f64]) -> Option<f64> {
        match &self.spec.drift {
            Drift::Gradient { potential } => Some(potential.value(x)),
            Drift::Linear { .. } => None,
        }
    }

    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    /// g = (σσᵀ)⁻¹
    pub fn metric(&self) -> &DMatrix<f64> {
        &self.metric
    }

    pub fn drift(&self, x: &[f64], out: &mut [f64]) {
        match &self.spec.drift {
            Drift::Gradient { potential } => {
                potential.gradient(x, out);
                out.iter_mut().for_each(|v| *v = -*v);
            }
            Drift::Linear { .. } => {
                let m = self.linear.as_ref().unwrap();
                for i in 0..self.dim {
                    out[i] = (0..self.dim).map(|j| m[(i, j)] * x[j]).sum();
                }
            }
        }
    }

    /// Row-major Jacobian of the drift.
    pub fn drift_jacobian(&self, x: &[f64], out: &mut [f64]) {
        match &self.spec.drift {
            Drift::Gradient { potential } => {
                potential.hessian(x, out);
                out.iter_mut().for_each(|v| *v = -*v);
            }
            Drift::Linear { .. } => {
                let m = self.linear.as_ref().unwrap();
                for i in 0..self.dim {
                    for j in 0..self.dim {
                        out[i * self.dim + j] = m[(i, j)];
                    }
                }
            }
        }
    }

    pub fn xi(&self, x: &[f64]) -> f64 {
        match &self.spec.xi {
            Xi::Coordinate { index } => x[*index],
            Xi::Linear { weights, offset } => weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + offset,
            Xi::Potential => self.potential(x).unwrap(),
        }
    }

    pub fn xi_gradient(&self, x: &[f64], out: &mut [f64]) {
        match &self.spec.xi {
            Xi::Coordinate { index } => {
                out.iter_mut().for_each(|v| *v = 0.0);
                out[*index] = 1.0;
            }
            Xi::Linear { weights, .. } => out.copy_from_slice(weights),
            Xi::Potential => match &self.spec.drift {
                Drift::Gradient { potential } => potential.gradient(x, out),
                Drift::Linear { .. } => unreachable!(),
            },
        }
    }

    /// Signed indicator: A = {g_A ≤ 0}.
    pub fn g_a(&self, x: &[f64]) -> f64 {
        match &self.spec.ref_set {
            RefSet::HalfSpace { normal, offset } => normal.iter().zip(x).map(|(n, v)| n * v).sum::<f64>() - offset,
            RefSet::Ball { center, radius } => {
                center.iter().zip(x).map(|(c, v)| (v - c).powi(2)).sum::<f64>().sqrt() - radius
            }
            RefSet::XiBelow { level } => self.xi(x) - level,
        }
    }

    pub fn g_a_gradient(&self, x: &[f64], out: &mut [f64]) {
        match &self.spec.ref_set {
            RefSet::HalfSpace { normal, .. } => out.copy_from_slice(normal),
            RefSet::Ball { center, .. } => {
                let r = center.iter().zip(x).map(|(c, v)| (v - c).powi(2)).sum::<f64>().sqrt();
                for i in 0..self.dim {
                    out[i] = if r > 0.0 { (x[i] - center[i]) / r } else { 0.0 };
                }
            }
            RefSet::XiBelow { .. } => self.xi_gradient(x, out),
        }
    }

    pub fn in_a(&self, x: &[f64]) -> bool {
        self.g_a(x) <= 0.0
    }

    pub fn in_b(&self, x: &[f64]) -> bool {
        self.xi(x) >= self.spec.l_b
    }

    /// ⟨u, v⟩_g
    pub fn inner(&self, u: &[f64], v: &[f64]) -> f64 {
        if let Some(s) = self.iso {
            return u.iter().zip(v).map(|(a, b)| a * b).sum::<f64>() / (s * s);
        }
        let mut acc = 0.0;
        for i in 0..self.dim {
            for j in 0..self.dim {
                acc += u[i] * self.metric[(i, j)] * v[j];
            }
        }
        acc
    }

    /// out = g v
    pub fn apply_metric(&self, v: &[f64], out: &mut [f64]) {
        if let Some(s) = self.iso {
            for i in 0..self.dim {
                out[i] = v[i] / (s * s);
            }
            return;
        }
        for i in 0..self.dim {
            out[i] = (0..self.dim).map(|j| self.metric[(i, j)] * v[j]).sum();
        }
    }
}

fn square(rows: &[Vec<f64>], dim: usize, what: &str) -> Result<DMatrix<f64>> {
    if rows.len() != dim || rows.iter().any(|r| r.len() != dim) {
        return Err(Error::InvalidModel(format!("{what} must be {dim}x{dim}")));
    }
    Ok(DMatrix::from_fn(dim, dim, |i, j| rows[i][j]))
}
