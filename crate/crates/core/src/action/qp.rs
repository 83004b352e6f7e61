//! Penalized minimum-action paths: U(x, y), U^{(l)}(x, y) and set-valued
//! endpoints on level sets of ξ.

use serde::{Deserialize, Serialize};

use super::grid::GridOracle;
use super::lbfgs::{self, LbfgsOptions};
use super::path::{action_with_gradient, geometric_action, resample, DiscretePath};
use crate::error::{Error, Result};
use crate::model::Model;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum Target {
    Point(Vec<f64>),
    /// Free endpoint on {ξ = l}.
    Level(f64),
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct Constraints {
    pub avoid_a: bool,
    /// Stay in {ξ ≤ l}.
    pub confine: Option<f64>,
}

impl Constraints {
    pub fn avoid_a() -> Self {
        Constraints { avoid_a: true, confine: None }
    }

    pub fn confined(l: f64) -> Self {
        Constraints { avoid_a: true, confine: Some(l) }
    }
}

#[derive(Clone, Debug)]
pub struct QpOptions {
    pub nodes: usize,
    /// Acceptance bound on the largest penalty residual.
    pub tol: f64,
    /// A-avoidance margin; defaults to 1e-3 of the domain diagonal.
    pub margin: Option<f64>,
    pub smoothing: f64,
    pub max_outer: usize,
    pub penalty_start: f64,
    pub penalty_max: f64,
    pub lbfgs: LbfgsOptions,
    /// Candidate endpoints scanned on a target level set.
    pub level_seeds: usize,
    /// Cells along the longest domain side for the grid seed; 0 disables it.
    pub grid_cells: usize,
    /// Screened restarts carried on to full convergence.
    pub refine: usize,
}

impl Default for QpOptions {
    fn default() -> Self {
        QpOptions {
            nodes: 128,
            tol: 1e-6,
            margin: None,
            smoothing: 1e-7,
            max_outer: 12,
            penalty_start: 1e3,
            penalty_max: 1e10,
            lbfgs: LbfgsOptions { max_iter: 200, ftol: 1e-11, ..Default::default() },
            level_seeds: 32,
            grid_cells: 60,
            refine: 2,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct QPResult {
    /// Weighted sum of the leg actions.
    pub value: f64,
    pub path: DiscretePath,
    pub constraint_violation: f64,
    /// max − min over the screened restarts.
    pub multistart_spread: f64,
    pub restarts: usize,
    pub leg_values: Vec<f64>,
    /// Node index where each leg ends.
    pub leg_ends: Vec<usize>,
}

impl QPResult {
    fn trivial(x: &[f64], legs: usize) -> Self {
        let mut path = DiscretePath::straight(x, x, 2);
        path.endpoints_fixed = (true, true);
        QPResult {
            value: 0.0,
            path,
            constraint_violation: 0.0,
            multistart_spread: 0.0,
            restarts: 0,
            leg_values: vec![0.0; legs],
            leg_ends: vec![1; legs],
        }
    }

    /// Nodes of leg k.
    pub fn leg(&self, k: usize) -> DiscretePath {
        let start = if k == 0 { 0 } else { self.leg_ends[k - 1] };
        let d = self.path.dim;
        DiscretePath::new(d, self.path.nodes[start * d..(self.leg_ends[k] + 1) * d].to_vec())
    }
}

#[derive(Clone, Debug)]
pub struct Leg {
    pub nodes: usize,
    pub weight: f64,
    pub confine: Option<f64>,
    pub end: Target,
}

/// Chain of legs from a fixed start. Every leg but the last ends on a level.
pub struct PathProblem<'a> {
    pub model: &'a Model,
    pub start: Vec<f64>,
    pub legs: Vec<Leg>,
    pub avoid_a: bool,
}

struct Prepared {
    offsets: Vec<usize>,
    total: usize,
    margin: f64,
    fixed_end: bool,
}

impl<'a> PathProblem<'a> {
    fn prepare(&self, opts: &QpOptions) -> Result<Prepared> {
        let m = self.model;
        if self.start.len() != m.dim() {
            return Err(Error::InvalidArgument("start has the wrong dimension".into()));
        }
        if self.legs.is_empty() {
            return Err(Error::InvalidArgument("no legs".into()));
        }
        for (k, leg) in self.legs.iter().enumerate() {
            if leg.nodes < 2 {
                return Err(Error::InvalidArgument("a leg needs at least two nodes".into()));
            }
            match &leg.end {
                Target::Point(y) => {
                    if k + 1 != self.legs.len() {
                        return Err(Error::InvalidArgument("only the last leg may end at a point".into()));
                    }
                    if y.len() != m.dim() {
                        return Err(Error::InvalidArgument("target has the wrong dimension".into()));
                    }
                    if self.avoid_a && m.g_a(y) < 0.0 {
                        return Err(Error::Infeasible("target point lies inside A".into()));
                    }
                    if leg.confine.is_some_and(|l| m.xi(y) > l) {
                        return Err(Error::Infeasible("target point violates the confinement".into()));
                    }
                }
                Target::Level(l) => {
                    if leg.confine.is_some_and(|c| *l > c) {
                        return Err(Error::Infeasible(format!("level {l} above the confinement")));
                    }
                }
            }
        }
        if self.avoid_a && m.g_a(&self.start) < 0.0 {
            return Err(Error::Infeasible("start lies inside A".into()));
        }
        if self.legs[0].confine.is_some_and(|l| m.xi(&self.start) > l) {
            return Err(Error::Infeasible("start violates the confinement".into()));
        }
        let mut offsets = Vec::with_capacity(self.legs.len());
        let mut o = 0;
        for leg in &self.legs {
            offsets.push(o);
            o += leg.nodes - 1;
        }
        let base = opts.margin.unwrap_or_else(|| 1e-3 * domain_scale(m));
        let mut margin = base.min(0.5 * m.g_a(&self.start).max(0.0));
        let fixed_end = match &self.legs.last().unwrap().end {
            Target::Point(y) => {
                margin = margin.min(0.5 * m.g_a(y).max(0.0));
                true
            }
            Target::Level(_) => false,
        };
        Ok(Prepared { offsets, total: o + 1, margin, fixed_end })
    }

    fn assemble(&self, prep: &Prepared, seed: &[DiscretePath]) -> Vec<f64> {
        let d = self.model.dim();
        let mut z = vec![0.0; prep.total * d];
        for (k, leg) in self.legs.iter().enumerate() {
            let nodes = resample(&seed[k].nodes, d, leg.nodes);
            let o = prep.offsets[k];
            z[o * d..(o + leg.nodes) * d].copy_from_slice(&nodes);
        }
        z[..d].copy_from_slice(&self.start);
        for k in 1..self.legs.len() {
            // legs must join; keep the end of the previous leg
            let o = prep.offsets[k];
            let prev_end = seed[k - 1].last().to_vec();
            z[o * d..(o + 1) * d].copy_from_slice(&prev_end);
        }
        if let Target::Point(y) = &self.legs.last().unwrap().end {
            let e = prep.total - 1;
            z[e * d..(e + 1) * d].copy_from_slice(y);
        }
        z
    }

    fn is_fixed(&self, prep: &Prepared, i: usize) -> bool {
        i == 0 || (prep.fixed_end && i == prep.total - 1)
    }

    fn objective(&self, prep: &Prepared, z: &[f64], grad: &mut [f64], mu: f64, delta: f64) -> f64 {
        let m = self.model;
        let d = m.dim();
        grad.iter_mut().for_each(|v| *v = 0.0);
        let mut f = 0.0;
        for (k, leg) in self.legs.iter().enumerate() {
            let o = prep.offsets[k];
            let r = o * d..(o + leg.nodes) * d;
            f += action_with_gradient(m, &z[r.clone()], leg.weight, delta, &mut grad[r]);
        }
        let mut gx = vec![0.0; d];
        for (k, leg) in self.legs.iter().enumerate() {
            let o = prep.offsets[k];
            for i in o + 1..o + leg.nodes {
                if self.is_fixed(prep, i) {
                    continue;
                }
                let x = &z[i * d..(i + 1) * d];
                if let Some(l) = leg.confine {
                    let r = m.xi(x) - l;
                    if r > 0.0 {
                        f += mu * r * r;
                        m.xi_gradient(x, &mut gx);
                        for c in 0..d {
                            grad[i * d + c] += 2.0 * mu * r * gx[c];
                        }
                    }
                }
                if self.avoid_a {
                    let r = prep.margin - m.g_a(x);
                    if r > 0.0 {
                        f += mu * r * r;
                        m.g_a_gradient(x, &mut gx);
                        for c in 0..d {
                            grad[i * d + c] -= 2.0 * mu * r * gx[c];
                        }
                    }
                }
            }
            if let Target::Level(l) = leg.end {
                let i = o + leg.nodes - 1;
                let x = &z[i * d..(i + 1) * d];
                let r = m.xi(x) - l;
                f += mu * r * r;
                m.xi_gradient(x, &mut gx);
                for c in 0..d {
                    grad[i * d + c] += 2.0 * mu * r * gx[c];
                }
            }
        }
        grad[..d].iter_mut().for_each(|v| *v = 0.0);
        if prep.fixed_end {
            let e = prep.total - 1;
            grad[e * d..].iter_mut().for_each(|v| *v = 0.0);
        }
        f
    }

    /// (inequality residual, equality residual)
    fn violation(&self, prep: &Prepared, z: &[f64]) -> (f64, f64) {
        let m = self.model;
        let d = m.dim();
        let (mut ineq, mut eq) = (0.0f64, 0.0f64);
        for (k, leg) in self.legs.iter().enumerate() {
            let o = prep.offsets[k];
            for i in o + 1..o + leg.nodes {
                if self.is_fixed(prep, i) {
                    continue;
                }
                let x = &z[i * d..(i + 1) * d];
                if let Some(l) = leg.confine {
                    ineq = ineq.max(m.xi(x) - l);
                }
                if self.avoid_a {
                    ineq = ineq.max(prep.margin - m.g_a(x));
                }
            }
            if let Target::Level(l) = leg.end {
                let i = o + leg.nodes - 1;
                eq = eq.max((m.xi(&z[i * d..(i + 1) * d]) - l).abs());
            }
        }
        (ineq.max(0.0), eq)
    }

    fn reparametrize(&self, prep: &Prepared, z: &mut [f64]) {
        let d = self.model.dim();
        for (k, leg) in self.legs.iter().enumerate() {
            let o = prep.offsets[k];
            let r = o * d..(o + leg.nodes) * d;
            let nodes = resample(&z[r.clone()], d, leg.nodes);
            z[r].copy_from_slice(&nodes);
        }
    }

    fn snap(&self, prep: &Prepared, z: &mut [f64]) {
        let d = self.model.dim();
        for (k, leg) in self.legs.iter().enumerate() {
            if let Target::Level(l) = leg.end {
                let i = prep.offsets[k] + leg.nodes - 1;
                project_to_level(self.model, &mut z[i * d..(i + 1) * d], l);
            }
        }
    }

    fn leg_values(&self, prep: &Prepared, z: &[f64]) -> Vec<f64> {
        let d = self.model.dim();
        self.legs
            .iter()
            .enumerate()
            .map(|(k, leg)| {
                let o = prep.offsets[k];
                geometric_action(&DiscretePath::new(d, z[o * d..(o + leg.nodes) * d].to_vec()), self.model)
            })
            .collect()
    }

    /// Penalty continuation from `z`. A screening pass stops after the first
    /// penalty stage and a few outer rounds.
    fn descend(&self, prep: &Prepared, z: &mut [f64], mu0: f64, opts: &QpOptions, screen: bool) -> Option<f64> {
        let mut g = vec![0.0; z.len()];
        let mut mu = mu0;
        let rounds = if screen { 3 } else { opts.max_outer };
        loop {
            let mut prev = f64::INFINITY;
            for _ in 0..rounds {
                lbfgs::minimize(|x, gr| self.objective(prep, x, gr, mu, opts.smoothing), z, &opts.lbfgs);
                self.reparametrize(prep, z);
                let f = self.objective(prep, z, &mut g, mu, opts.smoothing);
                if !f.is_finite() {
                    return None;
                }
                if (prev - f).abs() <= 1e-8 * f.abs().max(1e-3) {
                    break;
                }
                prev = f;
            }
            let (ineq, eq) = self.violation(prep, z);
            if screen || (ineq <= opts.tol && eq <= opts.tol.sqrt()) || mu >= opts.penalty_max {
                return Some(mu);
            }
            mu *= 100.0;
        }
    }

    fn finish(&self, prep: &Prepared, z: &mut [f64]) -> (f64, f64) {
        self.snap(prep, z);
        let (ineq, eq) = self.violation(prep, z);
        let value: f64 = self.leg_values(prep, z).iter().zip(&self.legs).map(|(v, l)| l.weight * v).sum();
        (value, ineq.max(eq))
    }

    /// Best of the given restarts. Each seed holds one path per leg. Every
    /// seed is screened at the first penalty weight; the `refine` best are
    /// then driven to feasibility.
    pub fn solve(&self, seeds: &[Vec<DiscretePath>], opts: &QpOptions) -> Result<QPResult> {
        let prep = self.prepare(opts)?;
        let d = self.model.dim();
        let mut screened: Vec<(f64, Vec<f64>)> = Vec::new();
        for seed in seeds {
            if seed.len() != self.legs.len() || seed.iter().any(|p| p.dim != d || p.len() < 2) {
                continue;
            }
            let mut z = self.assemble(&prep, seed);
            if self.descend(&prep, &mut z, opts.penalty_start, opts, true).is_none() {
                continue;
            }
            let mut probe = z.clone();
            let (v, _) = self.finish(&prep, &mut probe);
            if v.is_finite() {
                screened.push((v, z));
            }
        }
        let tried = screened.len();
        let spread = screened.iter().fold(f64::NEG_INFINITY, |a, s| a.max(s.0)) - screened.iter().fold(f64::INFINITY, |a, s| a.min(s.0));
        screened.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut best: Option<(f64, Vec<f64>, f64)> = None;
        for (_, mut z) in screened.into_iter().take(opts.refine) {
            if self.descend(&prep, &mut z, opts.penalty_start, opts, false).is_none() {
                continue;
            }
            let (v, viol) = self.finish(&prep, &mut z);
            if viol <= opts.tol && v.is_finite() && best.as_ref().is_none_or(|b| v < b.0) {
                best = Some((v, z, viol));
            }
        }
        let (value, z, viol) = best.ok_or_else(|| Error::Optimizer(format!("none of {tried} restarts converged")))?;
        let leg_values = self.leg_values(&prep, &z);
        let leg_ends = prep.offsets.iter().zip(&self.legs).map(|(o, l)| o + l.nodes - 1).collect();
        let mut path = DiscretePath::new(d, z);
        path.arc_length = true;
        path.endpoints_fixed = (true, prep.fixed_end);
        Ok(QPResult {
            value,
            path,
            constraint_violation: viol,
            multistart_spread: spread.max(0.0),
            restarts: tried,
            leg_values,
            leg_ends,
        })
    }
}

pub(crate) fn domain_scale(model: &Model) -> f64 {
    match model.domain() {
        Some(dom) => dom.lower.iter().zip(&dom.upper).map(|(a, b)| (b - a).powi(2)).sum::<f64>().sqrt(),
        None => 1.0,
    }
}

/// Newton steps along ∇ξ onto {ξ = l}.
pub fn project_to_level(model: &Model, x: &mut [f64], l: f64) {
    let d = x.len();
    let mut g = vec![0.0; d];
    for _ in 0..50 {
        let r = model.xi(x) - l;
        if r.abs() < 1e-14 * l.abs().max(1.0) {
            return;
        }
        model.xi_gradient(x, &mut g);
        let n2: f64 = g.iter().map(|v| v * v).sum();
        if n2 < 1e-300 {
            return;
        }
        for k in 0..d {
            x[k] -= r * g[k] / n2;
        }
    }
}

/// Points of {ξ = l} found by scanning coordinate lines across the domain.
pub fn level_points(model: &Model, l: f64, count: usize) -> Vec<Vec<f64>> {
    let Some(dom) = model.domain() else { return vec![] };
    let d = model.dim();
    let mut out = Vec::new();
    let samples = 200;
    let lines = count.max(2) / d.max(1);
    for axis in 0..d {
        for j in 0..lines.max(1) {
            let mut base: Vec<f64> = dom.lower.clone();
            if d > 1 {
                let other = (axis + 1) % d;
                let t = (j as f64 + 0.5) / lines as f64;
                base[other] = dom.lower[other] + t * (dom.upper[other] - dom.lower[other]);
            }
            let at = |s: f64| {
                let mut p = base.clone();
                p[axis] = dom.lower[axis] + s * (dom.upper[axis] - dom.lower[axis]);
                p
            };
            let mut prev = model.xi(&at(0.0)) - l;
            for i in 1..=samples {
                let s = i as f64 / samples as f64;
                let cur = model.xi(&at(s)) - l;
                if prev.signum() != cur.signum() || cur == 0.0 {
                    let (mut a, mut b) = ((i - 1) as f64 / samples as f64, s);
                    for _ in 0..60 {
                        let c = 0.5 * (a + b);
                        if (model.xi(&at(c)) - l).signum() == prev.signum() {
                            a = c;
                        } else {
                            b = c;
                        }
                    }
                    let p = at(0.5 * (a + b));
                    if !model.in_a(&p) {
                        out.push(p);
                    }
                }
                prev = cur;
            }
        }
    }
    out
}

/// Reversed-flow climb from x, then a straight segment to the target.
pub fn uphill_seed(model: &Model, x: &[f64], target: &Target, nodes: usize) -> DiscretePath {
    let d = x.len();
    let scale = domain_scale(model);
    let step = scale / (4.0 * nodes as f64);
    let mut pts = vec![x.to_vec()];
    let mut cur = x.to_vec();
    let mut b = vec![0.0; d];
    let goal = |p: &[f64]| -> f64 {
        match target {
            Target::Point(y) => p.iter().zip(y).map(|(a, c)| (a - c).powi(2)).sum::<f64>().sqrt(),
            Target::Level(l) => l - model.xi(p),
        }
    };
    let (mut best_i, mut best) = (0, goal(x));
    for i in 1..=20 * nodes {
        model.drift(&cur, &mut b);
        let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        if nb < 1e-12 {
            break;
        }
        let next: Vec<f64> = cur.iter().zip(&b).map(|(c, v)| c - step * v / nb).collect();
        if model.in_a(&next) {
            break;
        }
        cur = next;
        pts.push(cur.clone());
        let g = goal(&cur);
        if g < best {
            best = g;
            best_i = i;
        }
        if g <= 0.0 || i > best_i + nodes {
            break;
        }
    }
    pts.truncate(best_i + 1);
    let mut end = pts.last().unwrap().clone();
    match target {
        Target::Point(y) => end = y.clone(),
        Target::Level(l) => project_to_level(model, &mut end, *l),
    }
    pts.push(end);
    let mut p = DiscretePath::from_points(&pts);
    p.dedup();
    if p.len() < 2 {
        p = DiscretePath::straight(x, p.last(), 2);
    }
    p
}

fn crosses_a(model: &Model, p: &DiscretePath) -> bool {
    (1..p.len().saturating_sub(1)).any(|i| model.in_a(p.node(i)))
}

/// Straight-line seeds to the most promising points of the target set.
fn endpoint_seeds(model: &Model, x: &[f64], target: &Target, confine: Option<f64>, opts: &QpOptions, keep: usize) -> Vec<DiscretePath> {
    match target {
        Target::Point(y) => vec![DiscretePath::straight(x, y, opts.nodes)],
        Target::Level(l) => {
            let mut proj = x.to_vec();
            project_to_level(model, &mut proj, *l);
            let mut cands = level_points(model, *l, opts.level_seeds);
            cands.push(proj);
            let mut scored: Vec<(f64, DiscretePath)> = cands
                .into_iter()
                .map(|y| DiscretePath::straight(x, &y, 32))
                .filter(|p| !crosses_a(model, p))
                .filter(|p| confine.is_none_or(|c| p.nodes.chunks(p.dim).all(|q| model.xi(q) <= c + 1e-9)))
                .map(|p| (geometric_action(&p, model), p))
                .collect();
            scored.sort_by(|a, b| a.0.total_cmp(&b.0));
            scored.into_iter().take(keep).map(|(_, p)| p).collect()
        }
    }
}

fn grid_oracle(model: &Model, cells: usize) -> Option<GridOracle<'_>> {
    if cells == 0 || model.dim() > 2 {
        return None;
    }
    let dom = model.domain()?;
    let side = dom.lower.iter().zip(&dom.upper).map(|(a, b)| b - a).fold(0.0, f64::max);
    GridOracle::new(model, side / cells as f64).ok()
}

fn grid_seed(model: &Model, x: &[f64], target: &Target, confine: Option<f64>, cells: usize) -> Option<DiscretePath> {
    let g = grid_oracle(model, cells)?;
    let f = g.forward(x, confine);
    let y = match target {
        Target::Point(y) => y.clone(),
        Target::Level(l) => {
            let (v, y) = g.min_on_level(&f, *l);
            if !v.is_finite() {
                return None;
            }
            y
        }
    };
    let mut p = g.path(&f, &y)?;
    if let Some(last) = p.nodes.len().checked_sub(p.dim) {
        p.nodes[last..].copy_from_slice(&y);
    }
    p.dedup();
    (p.len() >= 2).then_some(p)
}

fn single_leg_seeds(model: &Model, x: &[f64], target: &Target, cons: &Constraints, opts: &QpOptions) -> Vec<Vec<DiscretePath>> {
    let mut seeds: Vec<Vec<DiscretePath>> =
        endpoint_seeds(model, x, target, cons.confine, opts, 3).into_iter().map(|p| vec![p]).collect();
    if let Target::Point(y) = target {
        seeds.push(vec![DiscretePath::straight(x, y, opts.nodes)]);
    }
    seeds.push(vec![uphill_seed(model, x, target, opts.nodes)]);
    if let Some(p) = grid_seed(model, x, target, cons.confine, opts.grid_cells) {
        seeds.push(vec![p]);
    }
    seeds
}

fn already_there(model: &Model, x: &[f64], target: &Target) -> bool {
    match target {
        Target::Point(y) => x == y.as_slice(),
        Target::Level(l) => (model.xi(x) - l).abs() <= 1e-12 * l.abs().max(1.0),
    }
}

/// U(x, target) or U^{(l)}(x, target) under the given constraints.
pub fn minimize_qp(model: &Model, x: &[f64], target: &Target, cons: &Constraints, opts: &QpOptions) -> Result<QPResult> {
    minimize_qp_seeded(model, x, target, cons, opts, &[])
}

/// As [`minimize_qp`] with extra restart seeds.
pub fn minimize_qp_seeded(
    model: &Model,
    x: &[f64],
    target: &Target,
    cons: &Constraints,
    opts: &QpOptions,
    extra: &[DiscretePath],
) -> Result<QPResult> {
    if cons.avoid_a && model.g_a(x) < 0.0 {
        return Err(Error::Infeasible("start lies inside A".into()));
    }
    if already_there(model, x, target) {
        return Ok(QPResult::trivial(x, 1));
    }
    if let Target::Level(l) = target {
        if model.xi(x) > *l {
            return Err(Error::InvalidArgument(format!("start already above level {l}")));
        }
    }
    let problem = PathProblem {
        model,
        start: x.to_vec(),
        legs: vec![Leg { nodes: opts.nodes, weight: 1.0, confine: cons.confine, end: target.clone() }],
        avoid_a: cons.avoid_a,
    };
    let mut seeds = single_leg_seeds(model, x, target, cons, opts);
    seeds.extend(extra.iter().map(|p| vec![p.clone()]));
    problem.solve(&seeds, opts)
}

#[derive(Clone, Debug, Serialize)]
pub struct LevelCost {
    /// U(x, {ξ = l}) computed inside {ξ ≤ l}.
    pub value: f64,
    pub confined: QPResult,
    pub free: QPResult,
}

impl LevelCost {
    pub fn unconfined(&self) -> f64 {
        self.free.value
    }

    pub fn discrepancy(&self) -> f64 {
        (self.value - self.free.value).abs()
    }
}

/// U(x, {ξ = l}), computed confined to {ξ ≤ l} and verified unconfined.
pub fn cost_to_level(model: &Model, x: &[f64], l: f64, opts: &QpOptions) -> Result<LevelCost> {
    cost_to_level_seeded(model, x, l, opts, &[])
}

pub fn cost_to_level_seeded(model: &Model, x: &[f64], l: f64, opts: &QpOptions, extra: &[DiscretePath]) -> Result<LevelCost> {
    let target = Target::Level(l);
    let confined = minimize_qp_seeded(model, x, &target, &Constraints::confined(l), opts, extra)?;
    let mut seeds = extra.to_vec();
    seeds.push(confined.path.clone());
    let free = minimize_qp_seeded(model, x, &target, &Constraints::avoid_a(), opts, &seeds)?;
    Ok(LevelCost { value: confined.value, confined, free })
}

/// inf over y ∈ {ξ = l} of U^{(l)}(x, y) + w · U(y, {ξ = l_end}); the path has
/// two legs joined on {ξ = l}.
pub fn overshoot_cost(model: &Model, x: &[f64], l: f64, l_end: f64, w: f64, opts: &QpOptions, extra: &[Vec<DiscretePath>]) -> Result<QPResult> {
    if model.xi(x) > l || l > l_end {
        return Err(Error::InvalidArgument(format!("need xi(x) <= {l} <= {l_end}")));
    }
    let problem = PathProblem {
        model,
        start: x.to_vec(),
        legs: vec![
            Leg { nodes: opts.nodes, weight: 1.0, confine: Some(l), end: Target::Level(l) },
            Leg { nodes: opts.nodes, weight: w, confine: None, end: Target::Level(l_end) },
        ],
        avoid_a: true,
    };
    let mut seeds: Vec<Vec<DiscretePath>> = extra.to_vec();
    let to_end = Target::Level(l_end);
    let mut first_legs = endpoint_seeds(model, x, &Target::Level(l), Some(l), opts, 3);
    if let Some(p) = grid_seed(model, x, &Target::Level(l), Some(l), opts.grid_cells) {
        first_legs.push(p);
    }
    let mut scored: Vec<(f64, Vec<DiscretePath>)> = Vec::new();
    for a in first_legs {
        let j = a.last().to_vec();
        let mut seconds = endpoint_seeds(model, &j, &to_end, None, opts, 1);
        seconds.push(uphill_seed(model, &j, &to_end, opts.nodes));
        for b in seconds {
            let s = geometric_action(&a, model) + w * geometric_action(&b, model);
            scored.push((s, vec![a.clone(), b]));
        }
    }
    if let Some(g) = grid_oracle(model, opts.grid_cells) {
        let fwd = g.forward(x, Some(l));
        let bwd = g.backward_to_level(l_end);
        let (v, y) = g.min_on_level_combined(&fwd, &bwd, w, l);
        if v.is_finite() {
            if let (Some(mut a), Some(mut b)) = (g.path(&fwd, &y), g.path(&bwd, &y)) {
                let k = a.nodes.len() - a.dim;
                a.nodes[k..].copy_from_slice(&y);
                a.dedup();
                b.nodes[..b.dim].copy_from_slice(&y);
                b.dedup();
                if b.len() < 2 {
                    let mut e = y.clone();
                    project_to_level(model, &mut e, l_end);
                    b = DiscretePath::straight(&y, &e, 2);
                }
                if a.len() >= 2 {
                    seeds.push(vec![a, b]);
                }
            }
        }
    }
    scored.sort_by(|a, b| a.0.total_cmp(&b.0));
    seeds.extend(scored.into_iter().take(4).map(|(_, s)| s));
    problem.solve(&seeds, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog;

    fn dw_exact(a: f64, b: f64) -> f64 {
        let v = |x: f64| (x * x - 1.0).powi(2) / 4.0;
        2.0 * (v(b) - v(a)).max(0.0)
    }

    #[test]
    fn trivial_targets_cost_nothing() {
        let m = catalog::ou_1d();
        let r = minimize_qp(&m, &[0.3], &Target::Point(vec![0.3]), &Constraints::avoid_a(), &QpOptions::default()).unwrap();
        assert_eq!(r.value, 0.0);
        let c = cost_to_level(&m, &[0.3], 0.3, &QpOptions::default()).unwrap();
        assert_eq!(c.value, 0.0);
    }

    #[test]
    fn double_well_barrier() {
        let m = catalog::double_well_1d();
        let r = minimize_qp(&m, &[-0.85], &Target::Point(vec![0.0]), &Constraints::avoid_a(), &QpOptions::default()).unwrap();
        let exact = dw_exact(-0.85, 0.0);
        assert!(((r.value - exact) / exact).abs() < 0.01, "{} {exact}", r.value);
        // the barrier top from the well bottom, ignoring A
        let r = minimize_qp(&m, &[-1.0], &Target::Point(vec![0.0]), &Constraints::default(), &QpOptions::default()).unwrap();
        assert!((r.value - 0.5).abs() < 0.005, "{}", r.value);
        assert!(r.constraint_violation <= 1e-6);
    }

    #[test]
    fn one_dimensional_level_cost_is_point_cost() {
        let m = catalog::ou_1d();
        let c = cost_to_level(&m, m.x0(), 0.7, &QpOptions::default()).unwrap();
        let p = minimize_qp(&m, m.x0(), &Target::Point(vec![0.7]), &Constraints::avoid_a(), &QpOptions::default()).unwrap();
        assert!((c.value - p.value).abs() < 1e-6, "{} {}", c.value, p.value);
        assert!((c.value - (0.49 - 0.04) / 2.0).abs() < 1e-3, "{}", c.value);
        assert!(c.discrepancy() < 1e-6);
    }

    #[test]
    fn downhill_is_free_and_confinement_only_raises_costs() {
        let m = catalog::two_channel();
        let opts = QpOptions::default();
        let r = minimize_qp(&m, &[0.6, 1.0], &Target::Point(vec![0.3, 1.0]), &Constraints::avoid_a(), &opts).unwrap();
        assert!(r.value < 1e-3, "{}", r.value);
        let x = [0.3, -1.0];
        let y = vec![0.5, 1.0];
        let free = minimize_qp(&m, &x, &Target::Point(y.clone()), &Constraints::avoid_a(), &opts).unwrap();
        let conf = minimize_qp(&m, &x, &Target::Point(y), &Constraints::confined(0.55), &opts).unwrap();
        assert!(conf.value >= free.value - 1e-6, "{} {}", conf.value, free.value);
        assert!(conf.path.nodes.chunks(2).all(|p| p[0] <= 0.55 + 1e-6));
    }

    #[test]
    fn two_channel_level_costs_match_grid() {
        let m = catalog::two_channel();
        let opts = QpOptions::default();
        let g = GridOracle::new(&m, 0.01).unwrap();
        let f = g.forward(m.x0(), None);
        for l in [0.4, 0.7, 1.0] {
            let c = cost_to_level(&m, m.x0(), l, &opts).unwrap();
            let (gv, _) = g.min_on_level(&f, l);
            assert!(((c.value - gv) / gv).abs() < 0.05, "{l}: {} vs grid {gv}", c.value);
            assert!(c.value <= gv + 1e-3, "{l}: optimizer above grid {} {gv}", c.value);
            assert!(c.discrepancy() < 1e-3 * c.value.max(1.0), "{l}: {} {}", c.value, c.unconfined());
        }
    }

    #[test]
    fn overshoot_matches_grid() {
        let m = catalog::two_channel();
        let opts = QpOptions::default();
        let g = GridOracle::new(&m, 0.01).unwrap();
        let bwd = g.backward_to_level(1.0);
        for l in [0.3, 0.6] {
            let r = overshoot_cost(&m, m.x0(), l, 1.0, 2.0, &opts, &[]).unwrap();
            let fwd = g.forward(m.x0(), Some(l));
            let (gv, _) = g.min_on_level_combined(&fwd, &bwd, 2.0, l);
            assert!(((r.value - gv) / gv).abs() < 0.05, "{l}: {} vs grid {gv}", r.value);
            let a = r.leg(0);
            assert!((m.xi(a.last()) - l).abs() < 1e-9);
            assert!((m.xi(r.path.last()) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn infeasible_requests_are_rejected() {
        let m = catalog::two_channel();
        let opts = QpOptions::default();
        assert!(matches!(
            minimize_qp(&m, &[-0.1, 0.0], &Target::Point(vec![0.5, 0.0]), &Constraints::avoid_a(), &opts),
            Err(Error::Infeasible(_))
        ));
        assert!(matches!(
            minimize_qp(&m, &[0.2, 0.0], &Target::Point(vec![0.5, 0.0]), &Constraints::confined(0.4), &opts),
            Err(Error::Infeasible(_))
        ));
    }
}
