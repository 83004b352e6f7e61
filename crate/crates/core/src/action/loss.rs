//! The loss function l ↦ 2U(x0, {ξ = l_B}) − m(l) − u(l), its split into
//! under- and overestimation parts, and the fixed-level constants.

use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use super::path::{geometric_action, segment_action, segment_actions, DiscretePath};
use super::qp::{cost_to_level_seeded, overshoot_cost, QPResult, QpOptions};
use crate::error::{Error, Result};
use crate::model::Model;

/// Tolerance below which a loss value counts as zero.
pub const LOSS_TOL: f64 = 1e-6;

#[derive(Clone, Debug, Serialize)]
pub struct LevelTerms {
    pub level: f64,
    /// U(x0, {ξ = l})
    pub u: f64,
    /// inf over {ξ = l} of U^{(l)}(x0, ·) + 2 U(·, {ξ = l_B})
    pub m: f64,
    /// Instanton action up to x*(l), i.e. U(x0, x*(l)).
    pub prefix: f64,
    pub x_star: Vec<f64>,
    /// Every crossing of the instanton with {ξ = l}; x* is the last one.
    pub crossings: Vec<Vec<f64>>,
    /// |confined − unconfined| for u.
    pub confinement_gap: f64,
    /// Minimizing path behind `u`.
    #[serde(skip)]
    pub u_path: Option<DiscretePath>,
}

#[derive(Clone, Debug, Serialize)]
pub struct LossProfile {
    pub levels: Vec<f64>,
    pub u: Vec<f64>,
    pub m: Vec<f64>,
    pub loss: Vec<f64>,
    pub loss_u: Vec<f64>,
    pub loss_o: Vec<f64>,
    /// U(x0, {ξ = l_B})
    pub u_b: f64,
    pub l_star: Option<f64>,
    pub instanton: DiscretePath,
    pub terms: Vec<LevelTerms>,
    /// Levels whose subproblems failed, with the error.
    pub failures: Vec<(f64, String)>,
}

impl LossProfile {
    pub fn is_partial(&self) -> bool {
        !self.failures.is_empty()
    }

    pub fn x_star_of_l(&self) -> Vec<Vec<f64>> {
        self.terms.iter().map(|t| t.x_star.clone()).collect()
    }

    fn from_terms(mut terms: Vec<LevelTerms>, u_b: f64, instanton: DiscretePath, failures: Vec<(f64, String)>) -> Self {
        terms.sort_by(|a, b| a.level.total_cmp(&b.level));
        let levels = terms.iter().map(|t| t.level).collect();
        let u: Vec<f64> = terms.iter().map(|t| t.u).collect();
        let m: Vec<f64> = terms.iter().map(|t| t.m).collect();
        let loss: Vec<f64> = terms.iter().map(|t| 2.0 * u_b - t.m - t.u).collect();
        let loss_u = terms.iter().map(|t| t.prefix - t.u).collect();
        let loss_o = terms.iter().map(|t| t.prefix + 2.0 * (u_b - t.prefix) - t.m).collect();
        let mut p = LossProfile { levels, u, m, loss, loss_u, loss_o, u_b, l_star: None, instanton, terms, failures };
        p.l_star = sup_loss_values(&p.levels, &p.loss).l_star;
        p
    }

    /// Columns l, u, m, loss, loss_U, loss_O.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "l,u,m,loss,loss_U,loss_O")?;
        for i in 0..self.levels.len() {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                self.levels[i], self.u[i], self.m[i], self.loss[i], self.loss_u[i], self.loss_o[i]
            )?;
        }
        Ok(())
    }

    /// Values of u and m on a sub-grid of the profile's levels.
    fn lookup(&self, levels: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut u = Vec::with_capacity(levels.len());
        let mut m = Vec::with_capacity(levels.len());
        for &l in levels {
            let i = self
                .levels
                .iter()
                .position(|&v| (v - l).abs() <= 1e-12 * l.abs().max(1.0))
                .ok_or_else(|| Error::InvalidArgument(format!("level {l} is not in the profile")))?;
            u.push(self.u[i]);
            m.push(self.m[i]);
        }
        Ok((u, m))
    }

    /// FMS constants for levels ℓ_1 < … < ℓ_J = l_B taken from the profile.
    pub fn fms_constants(&self, levels: &[f64]) -> Result<FmsConstants> {
        let last = *levels.last().ok_or_else(|| Error::InvalidArgument("empty level sequence".into()))?;
        if (last - self.levels[self.levels.len() - 1]).abs() > 1e-12 {
            return Err(Error::InvalidArgument("profile constants need ℓ_J = l_B".into()));
        }
        let mut all = vec![self.levels[0]];
        all.extend_from_slice(levels);
        let (mut u, m) = self.lookup(&all)?;
        u[0] = 0.0;
        fms_constants_from(&u, &m)
    }

    /// Uniform sub-grid with J intervals, ℓ_1..ℓ_J.
    pub fn uniform_levels(&self, j: usize) -> Vec<f64> {
        let (a, b) = (self.levels[0], self.levels[self.levels.len() - 1]);
        (1..=j).map(|k| if k == j { b } else { a + (b - a) * k as f64 / j as f64 }).collect()
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SupLoss {
    /// None when the loss vanishes (critical level indeterminate).
    pub l_star: Option<f64>,
    pub value: f64,
    pub interior: bool,
}

fn sup_loss_values(levels: &[f64], loss: &[f64]) -> SupLoss {
    let Some((i, &v)) = loss.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)) else {
        return SupLoss { l_star: None, value: 0.0, interior: true };
    };
    if v <= LOSS_TOL {
        return SupLoss { l_star: None, value: v.max(0.0), interior: true };
    }
    SupLoss { l_star: Some(levels[i]), value: v, interior: i > 0 && i + 1 < levels.len() }
}

/// Maximum of the loss and its critical level.
pub fn sup_loss(profile: &LossProfile) -> Result<SupLoss> {
    if profile.is_partial() {
        return Err(Error::PartialProfile(profile.failures.len()));
    }
    let s = sup_loss_values(&profile.levels, &profile.loss);
    if !s.interior {
        return Err(Error::InvalidArgument(format!("critical level {:?} is not interior", s.l_star)));
    }
    Ok(s)
}

/// Instanton for U(x0, {ξ = l_B}): the better of the confined and free runs.
pub fn instanton(model: &Model, opts: &QpOptions) -> Result<QPResult> {
    let c = cost_to_level_seeded(model, model.x0(), model.l_b(), opts, &[])?;
    Ok(if c.free.value < c.confined.value { c.free } else { c.confined })
}

/// Last crossing of the path with {ξ = l}, all crossings, and the action
/// accumulated up to the last one.
fn crossing_data(model: &Model, path: &DiscretePath, seg_actions: &[f64], l: f64) -> (Vec<f64>, Vec<Vec<f64>>, f64, usize, f64) {
    let cr = path.crossings(model, l);
    let pts: Vec<Vec<f64>> = cr.iter().map(|&(s, t)| path.point_at(s, t)).collect();
    match cr.last() {
        Some(&(s, t)) => {
            let x = pts.last().unwrap().clone();
            let prefix = seg_actions[..s].iter().sum::<f64>() + segment_action(model, path.node(s), &x);
            (x, pts, prefix, s, t)
        }
        None => (path.last().to_vec(), pts, seg_actions.iter().sum(), path.len() - 2, 1.0),
    }
}

/// u, m and the instanton data at one level.
pub fn level_terms(model: &Model, l: f64, inst: &QPResult, opts: &QpOptions) -> Result<LevelTerms> {
    let x0 = model.x0();
    let xi0 = model.xi(x0);
    let u_b = inst.value;
    let path = &inst.path;
    let seg = segment_actions(path, model);
    let (x_star, crossings, mut prefix, s, t) = if l <= xi0 {
        (x0.to_vec(), vec![x0.to_vec()], 0.0, 0, 0.0)
    } else {
        crossing_data(model, path, &seg, l)
    };
    if l >= model.l_b() {
        prefix = u_b;
    }
    prefix = prefix.min(u_b);
    // instanton halves as extra seeds
    let d = path.dim;
    let mut head: Vec<f64> = path.nodes[..(s + 1) * d].to_vec();
    head.extend_from_slice(&x_star);
    let mut head = DiscretePath::new(d, head);
    head.dedup();
    let mut tail = x_star.clone();
    tail.extend_from_slice(&path.nodes[(s + 1) * d..]);
    let mut tail = DiscretePath::new(d, tail);
    tail.dedup();
    let _ = t;
    let (u, gap, u_path) = if l <= xi0 {
        (0.0, 0.0, None)
    } else {
        let hint: Vec<DiscretePath> = if head.len() >= 2 { vec![head.clone()] } else { vec![] };
        let c = cost_to_level_seeded(model, x0, l, opts, &hint)?;
        if prefix < c.value {
            (prefix, c.discrepancy(), Some(head.clone()))
        } else {
            (c.value, c.discrepancy(), Some(c.confined.path))
        }
    };
    let mut extra = Vec::new();
    if head.len() >= 2 && tail.len() >= 2 {
        extra.push(vec![head, tail]);
    }
    let over = overshoot_cost(model, x0, l, model.l_b(), 2.0, opts, &extra)?;
    let m = over.value.min(prefix + 2.0 * (u_b - prefix));
    Ok(LevelTerms { level: l, u, m, prefix, x_star, crossings, confinement_gap: gap, u_path })
}

fn evaluate(model: &Model, levels: &[f64], inst: &QPResult, opts: &QpOptions) -> (Vec<LevelTerms>, Vec<(f64, String)>) {
    let results: Vec<(f64, Result<LevelTerms>)> =
        levels.par_iter().map(|&l| (l, level_terms(model, l, inst, opts))).collect();
    let mut terms = Vec::new();
    let mut failures = Vec::new();
    for (l, r) in results {
        match r {
            Ok(t) => terms.push(t),
            Err(e) => failures.push((l, e.to_string())),
        }
    }
    (terms, failures)
}

/// Loss on `intervals + 1` uniform levels from ξ(x0) to l_B, refined by three
/// bisection rounds around the maximum.
pub fn loss_profile(model: &Model, intervals: usize, opts: &QpOptions) -> Result<LossProfile> {
    if model.is_trivial() {
        return Err(Error::InvalidArgument("x0 already lies in B".into()));
    }
    if intervals == 0 {
        return Err(Error::InvalidArgument("need at least one interval".into()));
    }
    let inst = instanton(model, opts)?;
    let (a, b) = (model.xi(model.x0()), model.l_b());
    let levels: Vec<f64> =
        (0..=intervals).map(|k| if k == intervals { b } else { a + (b - a) * k as f64 / intervals as f64 }).collect();
    let (mut terms, mut failures) = evaluate(model, &levels, &inst, opts);
    for _ in 0..3 {
        terms.sort_by(|x, y| x.level.total_cmp(&y.level));
        let loss: Vec<f64> = terms.iter().map(|t| 2.0 * inst.value - t.m - t.u).collect();
        let Some((i, &v)) = loss.iter().enumerate().max_by(|x, y| x.1.total_cmp(y.1)) else { break };
        if v <= LOSS_TOL {
            break;
        }
        let mut new = Vec::new();
        if i > 0 {
            new.push(0.5 * (terms[i - 1].level + terms[i].level));
        }
        if i + 1 < terms.len() {
            new.push(0.5 * (terms[i].level + terms[i + 1].level));
        }
        let (t, f) = evaluate(model, &new, &inst, opts);
        terms.extend(t);
        failures.extend(f);
    }
    failures.extend(enforce_monotone_u(model, &mut terms, opts));
    Ok(LossProfile::from_terms(terms, inst.value, inst.path.clone(), failures))
}

/// Part of a path before its first crossing of {ξ = l}, ending on the level.
fn head_before(model: &Model, path: &DiscretePath, l: f64) -> Option<DiscretePath> {
    let &(s, t) = path.crossings(model, l).first()?;
    let d = path.dim;
    let mut nodes = path.nodes[..(s + 1) * d].to_vec();
    nodes.extend(path.point_at(s, t));
    let mut head = DiscretePath::new(d, nodes);
    head.dedup();
    (head.len() >= 2).then_some(head)
}

/// Any path to a higher level crosses the lower ones first, so u is
/// nondecreasing. Levels where the optimizer missed that are re-solved from
/// the truncated path of the cheaper higher level.
fn enforce_monotone_u(model: &Model, terms: &mut [LevelTerms], opts: &QpOptions) -> Vec<(f64, String)> {
    terms.sort_by(|a, b| a.level.total_cmp(&b.level));
    let mut failures = Vec::new();
    let mut best: Option<usize> = None;
    for i in (0..terms.len()).rev() {
        if let Some(j) = best {
            if terms[i].u > terms[j].u + LOSS_TOL {
                let l = terms[i].level;
                let repaired = terms[j].u_path.as_ref().and_then(|p| head_before(model, p, l)).map(|head| {
                    let bound = geometric_action(&head, model);
                    match cost_to_level_seeded(model, model.x0(), l, opts, std::slice::from_ref(&head)) {
                        Ok(c) if c.value < bound => (c.value, c.confined.path),
                        _ => (bound, head),
                    }
                });
                match repaired {
                    Some((u, path)) => {
                        terms[i].u = u;
                        terms[i].u_path = Some(path);
                    }
                    None => failures.push((l, "u exceeds a higher level's u and could not be repaired".into())),
                }
            }
        }
        if best.is_none_or(|j| terms[i].u < terms[j].u) {
            best = Some(i);
        }
    }
    failures
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct FmsConstants {
    pub c1: f64,
    pub c2: f64,
    /// max(C1, C2), the log-variance limit of fixed-level splitting.
    pub limit: f64,
}

/// C1 and C2 from u(ℓ_0..ℓ_J) (u(ℓ_0) = 0) and m(ℓ_0..ℓ_J); only
/// m(ℓ_1..ℓ_{J−1}) is used.
pub fn fms_constants_from(u: &[f64], m: &[f64]) -> Result<FmsConstants> {
    let j = u.len().checked_sub(1).ok_or_else(|| Error::InvalidArgument("empty level sequence".into()))?;
    if j == 0 || m.len() != u.len() {
        return Err(Error::InvalidArgument("need u and m on ℓ_0..ℓ_J with J ≥ 1".into()));
    }
    let c2 = (1..=j).map(|k| u[k] - u[k - 1]).fold(f64::NEG_INFINITY, f64::max);
    let inner = (1..j).map(|k| m[k] + u[k - 1]).fold(f64::INFINITY, f64::min);
    // a single level leaves the inner minimum empty
    let c1 = if j > 1 { 2.0 * u[j] - inner } else { f64::NEG_INFINITY };
    Ok(FmsConstants { c1, c2, limit: c1.max(c2) })
}

/// C1 and C2 for an arbitrary level sequence ending at l_B.
pub fn fms_constants(model: &Model, levels: &[f64], opts: &QpOptions) -> Result<FmsConstants> {
    let last = *levels.last().ok_or_else(|| Error::InvalidArgument("empty level sequence".into()))?;
    if levels.windows(2).any(|w| w[1] <= w[0]) || levels[0] <= model.xi(model.x0()) {
        return Err(Error::InvalidArgument("levels must increase from above ξ(x0)".into()));
    }
    if (last - model.l_b()).abs() > 1e-12 {
        return Err(Error::InvalidArgument("the last level must be l_B".into()));
    }
    let inst = instanton(model, opts)?;
    let mut all = vec![model.xi(model.x0())];
    all.extend_from_slice(levels);
    let (terms, failures) = evaluate(model, &all, &inst, opts);
    if let Some((l, e)) = failures.first() {
        return Err(Error::Optimizer(format!("level {l}: {e}")));
    }
    let profile = LossProfile::from_terms(terms, inst.value, inst.path.clone(), vec![]);
    profile.fms_constants(levels)
}

/// Both sides of the bracket on C1 in terms of Δu_j = u(ℓ_j) − u(ℓ_{j−1}).
#[derive(Clone, Debug, Serialize)]
pub struct Sandwich {
    pub min_du: f64,
    pub max_du: f64,
    /// C1 − max_{j<J} Loss(ℓ_j); lies in [min Δu, max Δu].
    pub c1_minus_max_loss: f64,
    /// C1 − min_{j<J} Loss(ℓ_j), the variant with the minimum.
    pub c1_minus_min_loss: f64,
}

impl Sandwich {
    pub fn holds(&self, tol: f64) -> bool {
        self.min_du - tol <= self.c1_minus_max_loss && self.c1_minus_max_loss <= self.max_du + tol
    }

    pub fn min_variant_holds(&self, tol: f64) -> bool {
        self.min_du - tol <= self.c1_minus_min_loss && self.c1_minus_min_loss <= self.max_du + tol
    }
}

/// Bracket for C1 from u and m on ℓ_0..ℓ_J (same layout as
/// [`fms_constants_from`]).
pub fn sandwich(u: &[f64], m: &[f64]) -> Result<Sandwich> {
    let c = fms_constants_from(u, m)?;
    let j = u.len() - 1;
    let du: Vec<f64> = (1..=j).map(|k| u[k] - u[k - 1]).collect();
    let loss: Vec<f64> = (1..j).map(|k| 2.0 * u[j] - m[k] - u[k]).collect();
    let max_loss = loss.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min_loss = loss.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(Sandwich {
        min_du: du.iter().copied().fold(f64::INFINITY, f64::min),
        max_du: du.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        c1_minus_max_loss: c.c1 - max_loss,
        c1_minus_min_loss: c.c1 - min_loss,
    })
}
