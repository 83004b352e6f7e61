//! Scale-function hitting probabilities for 1D gradient diffusions.

use crate::error::{Error, Result};
use crate::model::Model;

// Gauss–Kronrod 7/15 nodes and weights on [-1, 1].
const XGK: [f64; 8] = [
    0.991455371120812639206854697526329,
    0.949107912342758524526189684047851,
    0.864864423359769072789712788640926,
    0.741531185599394439863864773280788,
    0.586087235467691130294144845693013,
    0.405845151377397166906606412076961,
    0.207784955007898467600689403773245,
    0.000000000000000000000000000000000,
];
const WGK: [f64; 8] = [
    0.022935322010529224963732008058970,
    0.063092092629978553290700663189204,
    0.104790010322250183839876322541518,
    0.140653259715525918745189590510238,
    0.169004726639267902826583426598550,
    0.190350578064785409913256402421014,
    0.204432940075298892414161999234649,
    0.209482141084727828012999174891714,
];
const WG: [f64; 4] = [
    0.129484966168869693270611432679082,
    0.279705391489276667901467771423780,
    0.381830050505118944950369775488975,
    0.417959183673469387755102040816327,
];

fn gk15(f: &impl Fn(f64) -> f64, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut kron = fc * WGK[7];
    let mut gauss = fc * WG[3];
    for j in 0..7 {
        let dx = h * XGK[j];
        let s = f(c - dx) + f(c + dx);
        kron += WGK[j] * s;
        if j % 2 == 1 {
            gauss += WG[j / 2] * s;
        }
    }
    (kron * h, ((kron - gauss) * h).abs())
}

/// Adaptive Gauss–Kronrod integration to a relative tolerance.
pub fn integrate(f: impl Fn(f64) -> f64, a: f64, b: f64, rel_tol: f64) -> Result<f64> {
    if a == b {
        return Ok(0.0);
    }
    let mut pieces: Vec<(f64, f64, f64, f64)> = Vec::new();
    let n0 = 16;
    for i in 0..n0 {
        let lo = a + (b - a) * i as f64 / n0 as f64;
        let hi = a + (b - a) * (i + 1) as f64 / n0 as f64;
        let (v, e) = gk15(&f, lo, hi);
        pieces.push((lo, hi, v, e));
    }
    for _ in 0..20_000 {
        let total: f64 = pieces.iter().map(|p| p.2).sum();
        let err: f64 = pieces.iter().map(|p| p.3).sum();
        if !total.is_finite() {
            return Err(Error::Quadrature("non-finite integrand".into()));
        }
        if err <= rel_tol * total.abs() || err < 1e-300 {
            return Ok(total);
        }
        let (k, _) = pieces
            .iter()
            .enumerate()
            .max_by(|x, y| x.1 .3.partial_cmp(&y.1 .3).unwrap())
            .unwrap();
        let (lo, hi, _, _) = pieces.swap_remove(k);
        let mid = 0.5 * (lo + hi);
        if !(mid > lo && mid < hi) {
            return Err(Error::Quadrature("interval collapsed".into()));
        }
        let (v1, e1) = gk15(&f, lo, mid);
        let (v2, e2) = gk15(&f, mid, hi);
        pieces.push((lo, mid, v1, e1));
        pieces.push((mid, hi, v2, e2));
    }
    Err(Error::Quadrature("subdivision limit reached".into()))
}

/// P_x[τ_b < τ_a] = ∫_a^x e^{2V/(s²ε)} / ∫_a^b e^{2V/(s²ε)} for a 1D gradient model.
pub fn scale_probability(model: &Model, x: f64, a: f64, b: f64) -> Result<f64> {
    if model.dim() != 1 {
        return Err(Error::InvalidArgument("scale_probability needs a 1D model".into()));
    }
    let s = model
        .gradient_scale()
        .ok_or_else(|| Error::InvalidArgument("scale_probability needs a gradient model".into()))?;
    let eps = model.epsilon();
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument("epsilon must be positive".into()));
    }
    if !(a < b) || x < a || x > b {
        return Err(Error::InvalidArgument(format!("need a <= x <= b, got {a}, {x}, {b}")));
    }
    if x == a {
        return Ok(0.0);
    }
    if x == b {
        return Ok(1.0);
    }
    let v = |u: f64| model.potential(&[u]).unwrap();
    let vmax = (0..=1000).map(|i| v(a + (b - a) * i as f64 / 1000.0)).fold(f64::NEG_INFINITY, f64::max);
    let k = 2.0 / (s * s * eps);
    let f = |u: f64| (k * (v(u) - vmax)).exp();
    let num = integrate(f, a, x, 1e-13)?;
    let rest = integrate(f, x, b, 1e-13)?;
    Ok(num / (num + rest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog;
    use crate::model::{Drift, Potential};

    // Midpoint Riemann sum with a fine mesh.
    fn riemann(v: impl Fn(f64) -> f64, eps: f64, x: f64, a: f64, b: f64) -> f64 {
        let n = 2_000_000;
        let h = (b - a) / n as f64;
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..n {
            let u = a + (i as f64 + 0.5) * h;
            let w = (v(u) / eps).exp();
            den += w;
            if u < x {
                num += w;
            }
        }
        num / den
    }

    #[test]
    fn flat_potential_is_linear() {
        let m = catalog::ou_1d()
            .with_spec(|s| s.drift = Drift::Gradient { potential: Potential::Quadratic { stiffness: vec![0.0] } })
            .unwrap();
        assert!((scale_probability(&m, 0.5, 0.0, 1.0).unwrap() - 0.5).abs() < 1e-14);
        assert_eq!(scale_probability(&m, 0.0, 0.0, 1.0).unwrap(), 0.0);
        assert_eq!(scale_probability(&m, 1.0, 0.0, 1.0).unwrap(), 1.0);
    }

    #[test]
    fn ou_matches_riemann_oracle() {
        let m = catalog::ou_1d();
        let p = scale_probability(&m, 0.2, 0.0, 1.0).unwrap();
        let oracle = riemann(|u| u * u / 2.0, 0.25, 0.2, 0.0, 1.0);
        assert!((p - oracle).abs() < 1e-8, "{p} vs {oracle}");
        // high-precision value of the same ratio
        assert!((p - 0.086_896_940_761_604_55).abs() < 1e-12);
    }

    #[test]
    fn monotone_in_start() {
        let m = catalog::double_well_1d();
        let mut last = 0.0;
        for i in 1..40 {
            let x = -0.9 + 1.4 * i as f64 / 40.0;
            let p = scale_probability(&m, x, -0.9, 0.5).unwrap();
            assert!(p > last);
            last = p;
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(scale_probability(&catalog::two_channel(), 0.2, 0.0, 1.0).is_err());
        assert!(scale_probability(&catalog::ou_1d(), 2.0, 0.0, 1.0).is_err());
    }
}
