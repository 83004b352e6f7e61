//! Anisotropic Dijkstra on a regular grid, used to validate the path optimizer
//! and to seed it.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use super::path::{segment_action, DiscretePath};
use crate::error::{Error, Result};
use crate::model::Model;

const NONE: usize = usize::MAX;

#[derive(Clone, Debug)]
pub struct Grid {
    pub lower: Vec<f64>,
    pub h: f64,
    pub shape: Vec<usize>,
}

impl Grid {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn point(&self, idx: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.shape.len());
        let mut r = idx;
        for (k, &n) in self.shape.iter().enumerate() {
            out.push(self.lower[k] + (r % n) as f64 * self.h);
            r /= n;
        }
        out
    }

    fn coords(&self, idx: usize) -> Vec<i64> {
        let mut r = idx;
        self.shape
            .iter()
            .map(|&n| {
                let c = (r % n) as i64;
                r /= n;
                c
            })
            .collect()
    }

    fn index(&self, c: &[i64]) -> Option<usize> {
        let mut idx = 0;
        let mut stride = 1;
        for (k, &n) in self.shape.iter().enumerate() {
            if c[k] < 0 || c[k] >= n as i64 {
                return None;
            }
            idx += c[k] as usize * stride;
            stride *= n;
        }
        Some(idx)
    }

    /// Grid nodes within `r` cells (sup norm) of x.
    fn near(&self, x: &[f64], r: i64) -> Vec<usize> {
        let centre: Vec<i64> = x.iter().zip(&self.lower).map(|(v, lo)| ((v - lo) / self.h).round() as i64).collect();
        let mut out = Vec::new();
        match centre.len() {
            1 => {
                for i in -r..=r {
                    out.extend(self.index(&[centre[0] + i]));
                }
            }
            _ => {
                for i in -r..=r {
                    for j in -r..=r {
                        out.extend(self.index(&[centre[0] + i, centre[1] + j]));
                    }
                }
            }
        }
        out
    }
}

/// Primitive stencil directions with sup norm ≤ 3 (32 in 2D, 2 in 1D).
pub fn stencil(dim: usize) -> Vec<Vec<i64>> {
    fn gcd(a: i64, b: i64) -> i64 {
        if b == 0 {
            a.abs()
        } else {
            gcd(b, a % b)
        }
    }
    match dim {
        1 => vec![vec![1], vec![-1]],
        _ => {
            let mut out = Vec::new();
            for i in -3i64..=3 {
                for j in -3i64..=3 {
                    if (i, j) != (0, 0) && gcd(i, j) == 1 {
                        out.push(vec![i, j]);
                    }
                }
            }
            out
        }
    }
}

#[derive(PartialEq)]
struct Entry(f64, usize);

impl Eq for Entry {}

impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        other.0.total_cmp(&self.0).then(other.1.cmp(&self.1))
    }
}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Costs on every grid node, either from a source (forward) or to a target
/// (backward), with predecessors for path extraction.
#[derive(Clone, Debug)]
pub struct CostField {
    pub dist: Vec<f64>,
    pred: Vec<usize>,
    backward: bool,
    source: Option<Vec<f64>>,
}

pub struct GridOracle<'a> {
    model: &'a Model,
    pub grid: Grid,
    stencil: Vec<Vec<i64>>,
    xi: Vec<f64>,
    open: Vec<bool>,
}

impl<'a> GridOracle<'a> {
    /// Grid with spacing `h` over the model's domain; nodes in A are closed.
    pub fn new(model: &'a Model, h: f64) -> Result<Self> {
        let dom = model
            .domain()
            .ok_or_else(|| Error::InvalidArgument("grid oracle needs a bounded domain".into()))?;
        if model.dim() > 2 {
            return Err(Error::InvalidArgument("grid oracle supports dimension 1 and 2".into()));
        }
        if !(h > 0.0) {
            return Err(Error::InvalidArgument("grid spacing must be positive".into()));
        }
        let shape: Vec<usize> =
            dom.lower.iter().zip(&dom.upper).map(|(lo, hi)| ((hi - lo) / h).round() as usize + 1).collect();
        let grid = Grid { lower: dom.lower.clone(), h, shape };
        let n = grid.len();
        let mut xi = Vec::with_capacity(n);
        let mut open = Vec::with_capacity(n);
        for i in 0..n {
            let p = grid.point(i);
            xi.push(model.xi(&p));
            open.push(!model.in_a(&p));
        }
        Ok(GridOracle { model, grid, stencil: stencil(model.dim()), xi, open })
    }

    fn allowed(&self, i: usize, confine: Option<f64>) -> bool {
        self.open[i] && confine.is_none_or(|l| self.xi[i] <= l)
    }

    fn edge_ok(&self, a: &[f64], b: &[f64]) -> bool {
        let mid: Vec<f64> = a.iter().zip(b).map(|(p, q)| 0.5 * (p + q)).collect();
        !self.model.in_a(&mid)
    }

    fn run(&self, mut heap: BinaryHeap<Entry>, mut dist: Vec<f64>, confine: Option<f64>, backward: bool) -> (Vec<f64>, Vec<usize>) {
        let n = self.grid.len();
        let mut pred = vec![NONE; n];
        let mut done = vec![false; n];
        while let Some(Entry(d, u)) = heap.pop() {
            if done[u] || d > dist[u] {
                continue;
            }
            done[u] = true;
            let cu = self.grid.coords(u);
            let pu = self.grid.point(u);
            for s in &self.stencil {
                let cv: Vec<i64> = cu.iter().zip(s).map(|(a, b)| a + b).collect();
                let Some(v) = self.grid.index(&cv) else { continue };
                if done[v] || !self.allowed(v, confine) {
                    continue;
                }
                let pv = self.grid.point(v);
                if !self.edge_ok(&pu, &pv) {
                    continue;
                }
                let w = if backward { segment_action(self.model, &pv, &pu) } else { segment_action(self.model, &pu, &pv) };
                let nd = d + w;
                if nd < dist[v] {
                    dist[v] = nd;
                    pred[v] = u;
                    heap.push(Entry(nd, v));
                }
            }
        }
        (dist, pred)
    }

    /// U(x, node) for every node, optionally inside {ξ ≤ l}.
    pub fn forward(&self, x: &[f64], confine: Option<f64>) -> CostField {
        let n = self.grid.len();
        let mut dist = vec![f64::INFINITY; n];
        let mut heap = BinaryHeap::new();
        for i in self.grid.near(x, 3) {
            if !self.allowed(i, confine) {
                continue;
            }
            let p = self.grid.point(i);
            if !self.edge_ok(x, &p) {
                continue;
            }
            let d = segment_action(self.model, x, &p);
            if d < dist[i] {
                dist[i] = d;
                heap.push(Entry(d, i));
            }
        }
        let (dist, pred) = self.run(heap, dist, confine, false);
        CostField { dist, pred, backward: false, source: Some(x.to_vec()) }
    }

    /// U(node, {ξ ≥ l}) for every node.
    pub fn backward_to_level(&self, l: f64) -> CostField {
        let n = self.grid.len();
        let mut dist = vec![f64::INFINITY; n];
        let mut heap = BinaryHeap::new();
        for i in 0..n {
            if self.open[i] && self.xi[i] >= l {
                dist[i] = 0.0;
                heap.push(Entry(0.0, i));
            }
        }
        let (dist, pred) = self.run(heap, dist, None, true);
        CostField { dist, pred, backward: true, source: None }
    }

    /// U(node, y) for every node.
    pub fn backward_to_point(&self, y: &[f64]) -> CostField {
        let n = self.grid.len();
        let mut dist = vec![f64::INFINITY; n];
        let mut heap = BinaryHeap::new();
        for i in self.grid.near(y, 3) {
            if !self.open[i] {
                continue;
            }
            let p = self.grid.point(i);
            if !self.edge_ok(&p, y) {
                continue;
            }
            let d = segment_action(self.model, &p, y);
            if d < dist[i] {
                dist[i] = d;
                heap.push(Entry(d, i));
            }
        }
        let (dist, pred) = self.run(heap, dist, None, true);
        CostField { dist, pred, backward: true, source: None }
    }

    /// Forward cost from the field's source to an arbitrary point.
    pub fn cost_to_point(&self, field: &CostField, y: &[f64]) -> f64 {
        let mut best = f64::INFINITY;
        if let Some(x) = &field.source {
            if x.iter().zip(y).all(|(a, b)| ((a - b) / self.grid.h).abs() <= 3.0) {
                best = segment_action(self.model, x, y);
            }
        }
        for i in self.grid.near(y, 3) {
            if field.dist[i].is_finite() {
                let p = self.grid.point(i);
                if self.edge_ok(&p, y) {
                    best = best.min(field.dist[i] + segment_action(self.model, &p, y));
                }
            }
        }
        best
    }

    /// Edges (u, v) crossing {ξ = l} upward, with the crossing fraction.
    fn crossing_edges(&self, l: f64) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::new();
        for u in 0..self.grid.len() {
            if !self.open[u] || self.xi[u] >= l {
                continue;
            }
            let cu = self.grid.coords(u);
            for s in &self.stencil {
                let cv: Vec<i64> = cu.iter().zip(s).map(|(a, b)| a + b).collect();
                if let Some(v) = self.grid.index(&cv) {
                    if self.open[v] && self.xi[v] >= l {
                        out.push((u, v, (l - self.xi[u]) / (self.xi[v] - self.xi[u])));
                    }
                }
            }
        }
        out
    }

    fn crossing_point(&self, u: usize, v: usize, t: f64) -> Vec<f64> {
        let (a, b) = (self.grid.point(u), self.grid.point(v));
        a.iter().zip(&b).map(|(p, q)| p + t * (q - p)).collect()
    }

    /// min over {ξ = l} of a forward field, with the minimizing point.
    pub fn min_on_level(&self, field: &CostField, l: f64) -> (f64, Vec<f64>) {
        let mut best = (f64::INFINITY, vec![]);
        for (u, v, t) in self.crossing_edges(l) {
            if !field.dist[u].is_finite() {
                continue;
            }
            let (pu, y) = (self.grid.point(u), self.crossing_point(u, v, t));
            let c = field.dist[u] + segment_action(self.model, &pu, &y);
            if c < best.0 {
                best = (c, y);
            }
        }
        if let Some(x) = &field.source {
            if (self.model.xi(x) - l).abs() < 1e-12 {
                best = (0.0, x.clone());
            }
        }
        best
    }

    /// Backward cost from an arbitrary point.
    pub fn cost_from_point(&self, bwd: &CostField, x: &[f64]) -> f64 {
        let mut best = f64::INFINITY;
        for i in self.grid.near(x, 3) {
            if bwd.dist[i].is_finite() {
                let p = self.grid.point(i);
                if self.edge_ok(x, &p) {
                    best = best.min(segment_action(self.model, x, &p) + bwd.dist[i]);
                }
            }
        }
        best
    }

    /// min over y on {ξ = l} of forward(y) + w · backward(y).
    pub fn min_on_level_combined(&self, fwd: &CostField, bwd: &CostField, w: f64, l: f64) -> (f64, Vec<f64>) {
        let mut best = (f64::INFINITY, vec![]);
        if let Some(x) = &fwd.source {
            if (self.model.xi(x) - l).abs() < 1e-12 {
                best = (w * self.cost_from_point(bwd, x), x.clone());
            }
        }
        for (u, v, t) in self.crossing_edges(l) {
            if !fwd.dist[u].is_finite() || !bwd.dist[v].is_finite() {
                continue;
            }
            let (pu, pv, y) = (self.grid.point(u), self.grid.point(v), self.crossing_point(u, v, t));
            let c = fwd.dist[u] + segment_action(self.model, &pu, &y) + w * (segment_action(self.model, &y, &pv) + bwd.dist[v]);
            if c < best.0 {
                best = (c, y);
            }
        }
        best
    }

    /// Node path from the grid node nearest `y` back to the field's source
    /// (forward) or on to its target (backward), in travel order.
    pub fn path(&self, field: &CostField, y: &[f64]) -> Option<DiscretePath> {
        let start = self
            .grid
            .near(y, 3)
            .into_iter()
            .filter(|&i| field.dist[i].is_finite())
            .min_by(|&a, &b| {
                let da: f64 = self.grid.point(a).iter().zip(y).map(|(p, q)| (p - q).powi(2)).sum();
                let db: f64 = self.grid.point(b).iter().zip(y).map(|(p, q)| (p - q).powi(2)).sum();
                da.total_cmp(&db)
            })?;
        let mut pts = vec![y.to_vec()];
        let mut cur = start;
        while cur != NONE {
            pts.push(self.grid.point(cur));
            cur = field.pred[cur];
        }
        if field.backward {
            Some(DiscretePath::from_points(&pts))
        } else {
            pts.push(field.source.clone()?);
            pts.reverse();
            let mut p = DiscretePath::from_points(&pts);
            p.dedup();
            Some(p)
        }
    }
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct GridLossTerms {
    pub level: f64,
    pub u: f64,
    pub m: f64,
    pub loss: f64,
}

impl GridOracle<'_> {
    /// Every term of the loss at the given levels, from Dijkstra alone.
    pub fn loss_terms(&self, x0: &[f64], l_b: f64, levels: &[f64]) -> Vec<GridLossTerms> {
        let fwd = self.forward(x0, None);
        let bwd = self.backward_to_level(l_b);
        let (u_b, _) = self.min_on_level(&fwd, l_b);
        let xi0 = self.model.xi(x0);
        levels
            .iter()
            .map(|&l| {
                let u = if l <= xi0 { 0.0 } else { self.min_on_level(&fwd, l).0.min(u_b) };
                let conf = self.forward(x0, Some(l));
                let (m, _) = self.min_on_level_combined(&conf, &bwd, 2.0, l);
                GridLossTerms { level: l, u, m, loss: 2.0 * u_b - m - u }
            })
            .collect()
    }
}

/// Value at spacing h and h/2 with the first-order extrapolation 2 v_{h/2} − v_h.
#[derive(Clone, Debug, serde::Serialize)]
pub struct Richardson {
    pub coarse: f64,
    pub fine: f64,
    pub extrapolated: f64,
    /// |fine − coarse| / fine
    pub relative_change: f64,
}

pub fn richardson(model: &Model, h: f64, f: impl Fn(&GridOracle) -> f64) -> Result<Richardson> {
    let coarse = f(&GridOracle::new(model, h)?);
    let fine = f(&GridOracle::new(model, h / 2.0)?);
    Ok(Richardson {
        coarse,
        fine,
        extrapolated: 2.0 * fine - coarse,
        relative_change: (fine - coarse).abs() / fine.abs().max(1e-300),
    })
}
