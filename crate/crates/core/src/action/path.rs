use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;

/// Polyline in state space with flat node storage.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct DiscretePath {
    pub dim: usize,
    pub nodes: Vec<f64>,
    /// Nodes are equally spaced in Euclidean arc length.
    pub arc_length: bool,
    pub endpoints_fixed: (bool, bool),
}

impl DiscretePath {
    pub fn new(dim: usize, nodes: Vec<f64>) -> Self {
        assert!(dim > 0 && nodes.len() % dim == 0);
        DiscretePath { dim, nodes, arc_length: false, endpoints_fixed: (true, true) }
    }

    pub fn from_points(points: &[Vec<f64>]) -> Self {
        let dim = points[0].len();
        DiscretePath::new(dim, points.iter().flatten().copied().collect())
    }

    /// `m` equally spaced nodes on the segment [a, b].
    pub fn straight(a: &[f64], b: &[f64], m: usize) -> Self {
        let m = m.max(2);
        let mut nodes = Vec::with_capacity(m * a.len());
        for i in 0..m {
            let t = i as f64 / (m - 1) as f64;
            nodes.extend(a.iter().zip(b).map(|(p, q)| p + t * (q - p)));
        }
        let mut p = DiscretePath::new(a.len(), nodes);
        p.arc_length = true;
        p
    }

    pub fn len(&self) -> usize {
        self.nodes.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, i: usize) -> &[f64] {
        &self.nodes[i * self.dim..(i + 1) * self.dim]
    }

    pub fn first(&self) -> &[f64] {
        self.node(0)
    }

    pub fn last(&self) -> &[f64] {
        self.node(self.len() - 1)
    }

    pub fn points(&self) -> Vec<Vec<f64>> {
        self.nodes.chunks(self.dim).map(|c| c.to_vec()).collect()
    }

    /// Cumulative Euclidean length at each node.
    pub fn arc_lengths(&self) -> Vec<f64> {
        cumulative_length(&self.nodes, self.dim)
    }

    pub fn length(&self) -> f64 {
        *self.arc_lengths().last().unwrap_or(&0.0)
    }

    /// Redistribute the nodes uniformly in arc length, keeping both endpoints.
    pub fn reparametrize(&mut self) {
        let m = self.len();
        self.nodes = resample(&self.nodes, self.dim, m);
        self.arc_length = true;
    }

    /// Same curve with `m` uniformly spaced nodes.
    pub fn resampled(&self, m: usize) -> Self {
        DiscretePath {
            dim: self.dim,
            nodes: resample(&self.nodes, self.dim, m.max(2)),
            arc_length: true,
            endpoints_fixed: self.endpoints_fixed,
        }
    }

    /// Drop consecutive duplicates.
    pub fn dedup(&mut self) {
        let d = self.dim;
        let mut out: Vec<f64> = Vec::with_capacity(self.nodes.len());
        for c in self.nodes.chunks(d) {
            let keep = match out.len() {
                0 => true,
                n => out[n - d..].iter().zip(c).any(|(a, b)| a != b),
            };
            if keep {
                out.extend_from_slice(c);
            }
        }
        self.nodes = out;
    }

    pub fn concat(&self, other: &DiscretePath) -> DiscretePath {
        let mut nodes = self.nodes.clone();
        nodes.extend_from_slice(&other.nodes[self.dim..]);
        DiscretePath::new(self.dim, nodes)
    }

    pub fn reversed(&self) -> DiscretePath {
        let nodes = self.nodes.chunks(self.dim).rev().flatten().copied().collect();
        DiscretePath::new(self.dim, nodes)
    }

    /// Point at fraction t of segment i.
    pub fn point_at(&self, seg: usize, t: f64) -> Vec<f64> {
        let (a, b) = (self.node(seg), self.node(seg + 1));
        a.iter().zip(b).map(|(p, q)| p + t * (q - p)).collect()
    }

    /// Up-crossings of {ξ = l} as (segment, fraction), in path order. A node
    /// exactly on the level counts once.
    pub fn crossings(&self, model: &Model, l: f64) -> Vec<(usize, f64)> {
        let xi: Vec<f64> = (0..self.len()).map(|i| model.xi(self.node(i))).collect();
        let mut out = Vec::new();
        for i in 0..xi.len().saturating_sub(1) {
            let (a, b) = (xi[i], xi[i + 1]);
            if a < l && b >= l {
                let t = if b > a { (l - a) / (b - a) } else { 1.0 };
                out.push((i, t));
            }
        }
        if out.is_empty() && xi.first().is_some_and(|&v| v >= l) {
            out.push((0, 0.0));
        }
        out
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let header: Vec<String> = (0..self.dim).map(|i| format!("x{i}")).collect();
        writeln!(w, "s,{}", header.join(","))?;
        for (c, s) in self.nodes.chunks(self.dim).zip(self.arc_lengths()) {
            let row: Vec<String> = c.iter().map(|v| v.to_string()).collect();
            writeln!(w, "{s},{}", row.join(","))?;
        }
        Ok(())
    }
}

fn cumulative_length(nodes: &[f64], d: usize) -> Vec<f64> {
    let m = nodes.len() / d;
    let mut s = vec![0.0; m];
    for i in 1..m {
        let seg: f64 = (0..d).map(|k| (nodes[i * d + k] - nodes[(i - 1) * d + k]).powi(2)).sum();
        s[i] = s[i - 1] + seg.sqrt();
    }
    s
}

pub(crate) fn resample(nodes: &[f64], d: usize, m: usize) -> Vec<f64> {
    let s = cumulative_length(nodes, d);
    let n = s.len();
    let total = s[n - 1];
    if total == 0.0 || n < 2 {
        return (0..m).flat_map(|_| nodes[..d].iter().copied()).collect();
    }
    let mut out = Vec::with_capacity(m * d);
    let mut j = 0;
    for i in 0..m {
        if i == m - 1 {
            out.extend_from_slice(&nodes[(n - 1) * d..]);
            break;
        }
        let target = total * i as f64 / (m - 1) as f64;
        while j + 1 < n - 1 && s[j + 1] < target {
            j += 1;
        }
        let len = s[j + 1] - s[j];
        let t = if len > 0.0 { ((target - s[j]) / len).clamp(0.0, 1.0) } else { 0.0 };
        for k in 0..d {
            out.push(nodes[j * d + k] + t * (nodes[(j + 1) * d + k] - nodes[j * d + k]));
        }
    }
    out
}

/// T = |Δ|_g |b(mid)|_g − ⟨Δ, b(mid)⟩_g for one segment.
pub fn segment_action(model: &Model, a: &[f64], b: &[f64]) -> f64 {
    let d = a.len();
    let mut mid = vec![0.0; d];
    let mut delta = vec![0.0; d];
    for k in 0..d {
        mid[k] = 0.5 * (a[k] + b[k]);
        delta[k] = b[k] - a[k];
    }
    let mut drift = vec![0.0; d];
    model.drift(&mid, &mut drift);
    let nd = model.inner(&delta, &delta).sqrt();
    let nb = model.inner(&drift, &drift).sqrt();
    let t = nd * nb - model.inner(&delta, &drift);
    debug_assert!(t >= -1e-12 * (nd * nb).max(1.0), "negative segment action {t}");
    t.max(0.0)
}

pub fn segment_actions(path: &DiscretePath, model: &Model) -> Vec<f64> {
    (0..path.len().saturating_sub(1)).map(|i| segment_action(model, path.node(i), path.node(i + 1))).collect()
}

/// Midpoint discretization of ∫ (|x'|_g |b|_g − ⟨x', b⟩_g) dθ.
pub fn geometric_action(path: &DiscretePath, model: &Model) -> f64 {
    segment_actions(path, model).iter().sum()
}

/// Smoothed action with norms sqrt(|·|² + δ²) and its gradient with respect to
/// every node, accumulated into `grad` with weight `w`. δ = 0 gives the exact
/// discrete action.
pub fn action_with_gradient(model: &Model, nodes: &[f64], w: f64, delta: f64, grad: &mut [f64]) -> f64 {
    let d = model.dim();
    let m = nodes.len() / d;
    let d2 = delta * delta;
    let mut mid = vec![0.0; d];
    let mut dx = vec![0.0; d];
    let mut b = vec![0.0; d];
    let mut gdx = vec![0.0; d];
    let mut gb = vec![0.0; d];
    let mut jac = vec![0.0; d * d];
    let mut tb = vec![0.0; d];
    let mut total = 0.0;
    for i in 0..m.saturating_sub(1) {
        let (p, q) = (&nodes[i * d..(i + 1) * d], &nodes[(i + 1) * d..(i + 2) * d]);
        for k in 0..d {
            mid[k] = 0.5 * (p[k] + q[k]);
            dx[k] = q[k] - p[k];
        }
        model.drift(&mid, &mut b);
        model.drift_jacobian(&mid, &mut jac);
        model.apply_metric(&dx, &mut gdx);
        model.apply_metric(&b, &mut gb);
        let dd: f64 = dx.iter().zip(&gdx).map(|(u, v)| u * v).sum();
        let bb: f64 = b.iter().zip(&gb).map(|(u, v)| u * v).sum();
        let db: f64 = dx.iter().zip(&gb).map(|(u, v)| u * v).sum();
        let nd = (dd + d2).sqrt();
        let nb = (bb + d2).sqrt();
        total += w * (nd * nb - db);
        // ∂T/∂b, then pulled back through the midpoint Jacobian
        for k in 0..d {
            tb[k] = if nb > 0.0 { gb[k] * nd / nb } else { 0.0 } - gdx[k];
        }
        for c in 0..d {
            let jt: f64 = (0..d).map(|r| jac[r * d + c] * tb[r]).sum();
            let td = if nd > 0.0 { gdx[c] * nb / nd } else { 0.0 } - gb[c];
            grad[i * d + c] += w * (0.5 * jt - td);
            grad[(i + 1) * d + c] += w * (0.5 * jt + td);
        }
    }
    total
}

/// Trapezoidal ½∫|ẋ − b|²_g dt with forward-difference velocities.
pub fn rate_function(path: &DiscretePath, times: &[f64], model: &Model) -> Result<f64> {
    let m = path.len();
    if times.len() != m || m < 2 {
        return Err(Error::InvalidArgument("times must match the path nodes (at least two)".into()));
    }
    if times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidArgument("times must be increasing".into()));
    }
    let d = path.dim;
    let mut b0 = vec![0.0; d];
    let mut b1 = vec![0.0; d];
    let mut r0 = vec![0.0; d];
    let mut r1 = vec![0.0; d];
    let mut total = 0.0;
    for i in 0..m - 1 {
        let h = times[i + 1] - times[i];
        let (p, q) = (path.node(i), path.node(i + 1));
        model.drift(p, &mut b0);
        model.drift(q, &mut b1);
        for k in 0..d {
            let v = (q[k] - p[k]) / h;
            r0[k] = v - b0[k];
            r1[k] = v - b1[k];
        }
        total += 0.25 * h * (model.inner(&r0, &r0) + model.inner(&r1, &r1));
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog;
    use proptest::prelude::*;

    fn uphill_dw(m: usize) -> DiscretePath {
        DiscretePath::straight(&[-1.0], &[0.0], m)
    }

    #[test]
    fn double_well_uphill_costs_twice_the_barrier() {
        let m = catalog::double_well_1d();
        let s = geometric_action(&uphill_dw(200), &m);
        assert!((s - 0.5).abs() < 0.005, "{s}");
    }

    #[test]
    fn downhill_and_flow_parallel_paths_are_free() {
        let m = catalog::double_well_1d();
        let down = DiscretePath::straight(&[0.0], &[-1.0], 50);
        assert!(geometric_action(&down, &m).abs() < 1e-14);
        let tc = catalog::two_channel();
        // Forward Euler flow from the ridge, each segment parallel to b at its start.
        let mut x = vec![0.3, 0.05];
        let mut pts = vec![x.clone()];
        let mut b = vec![0.0; 2];
        for _ in 0..200 {
            tc.drift(&x, &mut b);
            x = vec![x[0] + 1e-4 * b[0], x[1] + 1e-4 * b[1]];
            pts.push(x.clone());
        }
        let s = geometric_action(&DiscretePath::from_points(&pts), &tc);
        assert!(s < 1e-6, "{s}");
    }

    #[test]
    fn rate_function_examples() {
        let m = catalog::ou_1d();
        // constant path: (T/2)|b|²_g with g = 1/2
        let p = DiscretePath::new(1, vec![0.5; 11]);
        let t: Vec<f64> = (0..11).map(|i| i as f64 * 0.2).collect();
        let r = rate_function(&p, &t, &m).unwrap();
        assert!((r - 2.0 / 2.0 * 0.25 * 0.5).abs() < 1e-12, "{r}");
        // exact OU flow x(t) = x0 e^{-t}
        let t: Vec<f64> = (0..=2000).map(|i| i as f64 * 1e-3).collect();
        let x: Vec<f64> = t.iter().map(|s| 0.8 * (-s).exp()).collect();
        let r = rate_function(&DiscretePath::new(1, x), &t, &m).unwrap();
        assert!(r < 1e-6 * 2.0, "{r}");
        // reversed flow -1 -> 0 in the double well, x' = -b
        let dw = catalog::double_well_1d();
        let (mut x, h) = (-1.0 + 1e-6, 1e-3);
        let mut xs = vec![x];
        let mut ts = vec![0.0];
        while x < -1e-6 {
            x += h * x * (x * x - 1.0);
            xs.push(x);
            ts.push(ts.len() as f64 * h);
        }
        let r = rate_function(&DiscretePath::new(1, xs), &ts, &dw).unwrap();
        assert!((r - 0.5).abs() < 0.005, "{r}");
        assert!(rate_function(&p, &[0.0, 1.0], &m).is_err());
    }

    #[test]
    fn reparametrization_keeps_the_action() {
        let m = catalog::two_channel();
        let pts: Vec<Vec<f64>> = (0..400)
            .map(|i| {
                let s = i as f64 / 399.0;
                vec![0.1 + 0.8 * s, -(std::f64::consts::PI * s).sin()]
            })
            .collect();
        let fine = DiscretePath::from_points(&pts);
        let a = geometric_action(&fine.resampled(3000), &m);
        let b = geometric_action(&fine.resampled(4000), &m);
        assert!(((a - b) / a).abs() < 1e-4, "{a} {b}");
    }

    #[test]
    fn resample_keeps_endpoints_and_spacing() {
        let p = DiscretePath::from_points(&[vec![0.0, 0.0], vec![1.0, 0.0], vec![1.0, 3.0]]);
        let q = p.resampled(5);
        assert_eq!(q.first(), &[0.0, 0.0]);
        assert_eq!(q.last(), &[1.0, 3.0]);
        let s = q.arc_lengths();
        for w in s.windows(2) {
            assert!((w[1] - w[0] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn crossings_report_every_upcrossing() {
        let m = catalog::ou_1d();
        let p = DiscretePath::new(1, vec![0.1, 0.6, 0.4, 0.9]);
        let c = p.crossings(&m, 0.5);
        assert_eq!(c.len(), 2);
        assert_eq!(c[1].0, 2);
        assert!((c[1].1 - 0.2).abs() < 1e-12);
    }

    fn fd_check(model: &Model, nodes: &[f64]) -> f64 {
        let mut g = vec![0.0; nodes.len()];
        action_with_gradient(model, nodes, 1.0, 0.0, &mut g);
        let mut worst: f64 = 0.0;
        let scale = g.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1e-3);
        for i in 0..nodes.len() {
            let mut p = nodes.to_vec();
            let mut q = nodes.to_vec();
            p[i] += 1e-6;
            q[i] -= 1e-6;
            let mut dummy = vec![0.0; nodes.len()];
            let fp = action_with_gradient(model, &p, 1.0, 0.0, &mut dummy);
            let fq = action_with_gradient(model, &q, 1.0, 0.0, &mut dummy);
            let fd = (fp - fq) / 2e-6;
            worst = worst.max((fd - g[i]).abs() / scale);
        }
        worst
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn gradient_matches_central_differences(pts in proptest::collection::vec((-0.1f64..1.2, -1.5f64..1.5), 3..12)) {
            let m = catalog::two_channel();
            let nodes: Vec<f64> = pts.iter().flat_map(|&(x, y)| [x, y]).collect();
            prop_assert!(fd_check(&m, &nodes) < 1e-5);
        }

        #[test]
        fn action_is_nonnegative(pts in proptest::collection::vec((-0.2f64..1.3, -2.0f64..2.0), 2..20)) {
            let m = catalog::two_channel();
            let p = DiscretePath::from_points(&pts.iter().map(|&(x, y)| vec![x, y]).collect::<Vec<_>>());
            prop_assert!(segment_actions(&p, &m).iter().all(|&t| t >= 0.0));
        }
    }
}
