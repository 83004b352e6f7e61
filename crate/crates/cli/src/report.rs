use amsfw::action::loss::{fms_constants_from, FmsConstants};
use amsfw::action::subsolution::SubsolutionReport;
use amsfw::fluctuation::{efficiency_log, empirical_variance, sigma2_fms_formula, slope_fit, N2Point, SlopeFit, VarianceTable};
use amsfw::scale::scale_probability;
use amsfw::{Model, ModelSpec};
use anyhow::Result;
use serde::{Deserialize, Serialize};

use crate::config::Scenario;
use crate::experiment::{eps_dir, CellData, Evidence, Method, ProfileRow, StageError};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub value: f64,
    pub reference: f64,
    pub tolerance: f64,
    pub detail: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct CellSummary {
    pub epsilon: f64,
    pub label: String,
    pub file: String,
    pub method: Method,
    pub n: usize,
    pub replicates: usize,
    pub mean: f64,
    pub stderr: f64,
    /// N × sample variance of p̂
    pub n_var: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub p_ref: f64,
    pub p_oracle: Option<f64>,
    /// N·Var / p_ref²
    pub rel_var: f64,
    /// −p_ref² ln p_ref
    pub ideal: f64,
    pub mean_iterations: f64,
    pub mean_cost: f64,
    pub efficiency_log: f64,
    pub extinct: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct NestedFms {
    pub j: usize,
    pub sigma2_fms: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct VarianceSummary {
    pub epsilon: f64,
    pub file: String,
    pub p: f64,
    pub sigma2_ams: f64,
    pub ideal: f64,
    pub nested: Vec<NestedFms>,
}

#[derive(Clone, Debug, Serialize)]
pub struct ConstantsEntry {
    pub j: usize,
    pub c1: f64,
    pub c2: f64,
    pub limit: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct LossSummary {
    pub file: String,
    pub instanton_file: String,
    pub levels: usize,
    pub sup_loss: f64,
    pub l_star: f64,
    pub interior: bool,
    pub u_b: f64,
    /// inf over levels of u + m
    pub inf_u_plus_m: f64,
    pub min_loss: f64,
    pub start_loss: f64,
    pub end_loss: f64,
    pub min_loss_u: f64,
    pub min_loss_o: f64,
    pub max_decomposition_error: f64,
    pub constants: Vec<ConstantsEntry>,
}

#[derive(Clone, Debug, Serialize)]
pub struct SlopeSummary {
    pub label: String,
    /// (ε, N·Var/p_ref²)
    pub pairs: Vec<(f64, f64)>,
    pub fit: Option<SlopeFit>,
}

#[derive(Clone, Debug, Serialize)]
pub struct N2Summary {
    pub file: String,
    pub points: Vec<N2Point>,
    /// Fit of ln P against 1/ε; the slope estimates lim ε ln P.
    pub fit: Option<SlopeFit>,
    pub target: Option<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct Report {
    pub scenario: Scenario,
    pub config_hash: String,
    pub version: String,
    pub model: ModelSpec,
    pub trivial: bool,
    pub cells: Vec<CellSummary>,
    pub variance: Vec<VarianceSummary>,
    pub loss: Option<LossSummary>,
    pub slopes: Vec<SlopeSummary>,
    pub n2: Option<N2Summary>,
    pub subsolution: Option<SubsolutionReport>,
    pub checks: Vec<Check>,
    pub errors: Vec<StageError>,
}

impl Report {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
}

/// Scenario without its output location, so reports do not depend on where
/// they were written.
pub fn portable(s: &Scenario) -> Scenario {
    let mut s = s.clone();
    s.output = Default::default();
    s
}

fn oracle(model: &Model) -> Option<f64> {
    let x0 = model.x0();
    if model.is_trivial() {
        return Some(1.0);
    }
    if model.dim() != 1 {
        return None;
    }
    scale_probability(model, x0[0], model.l_0(), model.l_b()).ok()
}

fn ideal(p: f64) -> f64 {
    if p > 0.0 && p < 1.0 {
        -p * p * p.ln()
    } else {
        0.0
    }
}

fn rel_gap(value: f64, reference: f64) -> f64 {
    (value - reference).abs() / reference.abs()
}

fn summarize_cell(c: &CellData, p_ref: f64, p_oracle: Option<f64>) -> Result<CellSummary> {
    let p: Vec<f64> = c.replicates.iter().map(|r| r.p_hat).collect();
    let m = p.len() as f64;
    let mean = p.iter().sum::<f64>() / m;
    let (n_var, ci_low, ci_high) = if p.len() >= 2 {
        let v = empirical_variance(&p, c.n)?;
        (v.n_var, v.ci_low, v.ci_high)
    } else {
        (0.0, 0.0, 0.0)
    };
    let stderr = (n_var / c.n as f64 / m).sqrt();
    let rel_var = if p_ref > 0.0 { n_var / (p_ref * p_ref) } else { f64::NAN };
    let mean_cost = c.replicates.iter().map(|r| r.cost as f64).sum::<f64>() / m;
    Ok(CellSummary {
        epsilon: c.epsilon,
        label: c.label(),
        file: c.file(),
        method: c.method,
        n: c.n,
        replicates: p.len(),
        mean,
        stderr,
        n_var,
        ci_low,
        ci_high,
        p_ref,
        p_oracle,
        rel_var,
        ideal: ideal(p_ref),
        mean_iterations: c.replicates.iter().map(|r| r.iterations as f64).sum::<f64>() / m,
        mean_cost,
        efficiency_log: efficiency_log(mean_cost, rel_var / c.n as f64, c.epsilon),
        extinct: c.replicates.iter().filter(|r| r.extinct).count(),
    })
}

fn summarize_table(eps: f64, t: &VarianceTable) -> Result<VarianceSummary> {
    let p = *t.p.last().unwrap_or(&1.0);
    let intervals = t.levels.len().saturating_sub(1);
    let mut nested = Vec::new();
    let mut j = 1;
    while j <= intervals {
        if intervals % j == 0 && j >= 2 {
            let stride = intervals / j;
            let ps: Vec<f64> = (0..=j).map(|i| t.p[i * stride]).collect();
            let vq: Vec<f64> = (1..j).map(|i| t.varq[i * stride]).collect();
            nested.push(NestedFms { j, sigma2_fms: sigma2_fms_formula(&ps, &vq)? });
        }
        j *= 2;
    }
    Ok(VarianceSummary {
        epsilon: eps,
        file: format!("{}/variance_table.csv", eps_dir(eps)),
        p,
        sigma2_ams: t.sigma2_ams()?,
        ideal: ideal(p),
        nested,
    })
}

fn summarize_profile(rows: &[ProfileRow]) -> Result<LossSummary> {
    let n = rows.len();
    let (mut best, mut at) = (f64::NEG_INFINITY, 0);
    for (i, r) in rows.iter().enumerate() {
        if r.loss > best {
            best = r.loss;
            at = i;
        }
    }
    let min = |f: fn(&ProfileRow) -> f64| rows.iter().map(f).fold(f64::INFINITY, f64::min);
    let levels: Vec<f64> = rows.iter().map(|r| r.l).collect();
    let (a, b) = (levels[0], levels[n - 1]);
    let mut constants = Vec::new();
    for j in [8usize, 16, 32, 64] {
        let grid: Option<Vec<usize>> = (0..=j)
            .map(|k| {
                let l = if k == j { b } else { a + (b - a) * k as f64 / j as f64 };
                levels.iter().position(|&v| (v - l).abs() <= 1e-12 * l.abs().max(1.0))
            })
            .collect();
        if let Some(idx) = grid {
            let mut u: Vec<f64> = idx.iter().map(|&i| rows[i].u).collect();
            u[0] = 0.0;
            let m: Vec<f64> = idx.iter().map(|&i| rows[i].m).collect();
            let FmsConstants { c1, c2, limit } = fms_constants_from(&u, &m)?;
            constants.push(ConstantsEntry { j, c1, c2, limit });
        }
    }
    Ok(LossSummary {
        file: "loss_profile.csv".into(),
        instanton_file: "instanton.csv".into(),
        levels: n,
        sup_loss: best.max(0.0),
        l_star: levels[at],
        interior: at > 0 && at + 1 < n,
        u_b: rows[n - 1].u,
        inf_u_plus_m: rows.iter().map(|r| r.u + r.m).fold(f64::INFINITY, f64::min),
        min_loss: min(|r| r.loss),
        start_loss: rows[0].loss,
        end_loss: rows[n - 1].loss,
        min_loss_u: min(|r| r.loss_u),
        min_loss_o: min(|r| r.loss_o),
        max_decomposition_error: rows.iter().map(|r| (r.loss_u + r.loss_o - r.loss).abs()).fold(0.0, f64::max),
        constants,
    })
}

fn check(name: impl Into<String>, pass: bool, value: f64, reference: f64, tolerance: f64, detail: impl Into<String>) -> Check {
    Check { name: name.into(), pass, value, reference, tolerance, detail: detail.into() }
}

/// Builds the report, including every check flag, from the evidence alone.
pub fn assemble(s: &Scenario, ev: &Evidence) -> Result<Report> {
    let base = s.base_model()?;
    let tol = &s.tolerances;
    let mut cells = Vec::new();
    for &eps in &s.epsilons {
        let model = base.with_epsilon(eps)?;
        let p_oracle = oracle(&model);
        let here: Vec<&CellData> = ev.cells.iter().filter(|c| c.epsilon == eps).collect();
        let first = here.iter().find(|c| matches!(c.method, Method::Ams { .. })).or(here.first());
        let p_ref = match (p_oracle, first) {
            (Some(p), _) => p,
            (None, Some(c)) => c.replicates.iter().map(|r| r.p_hat).sum::<f64>() / c.replicates.len().max(1) as f64,
            (None, None) => f64::NAN,
        };
        for c in here {
            cells.push(summarize_cell(c, p_ref, p_oracle)?);
        }
    }
    let variance: Vec<VarianceSummary> = ev.tables.iter().map(|(e, t)| summarize_table(*e, t)).collect::<Result<_>>()?;
    let loss = ev.profile.as_deref().filter(|r| !r.is_empty()).map(summarize_profile).transpose()?;

    let mut slopes = Vec::new();
    for a in &s.ams {
        let label = format!("ams_n{}_k{}", a.n, a.k);
        let pairs: Vec<(f64, f64)> = cells.iter().filter(|c| c.label == label).map(|c| (c.epsilon, c.rel_var)).collect();
        if pairs.len() >= 3 {
            slopes.push(SlopeSummary { label, fit: slope_fit(&pairs).ok(), pairs });
        }
    }

    let n2 = (!ev.n2.is_empty()).then(|| {
        let pairs: Vec<(f64, f64)> = ev.n2.iter().map(|p| (p.epsilon, p.probability)).collect();
        N2Summary {
            file: "n2_probe.csv".into(),
            points: ev.n2.clone(),
            fit: slope_fit(&pairs).ok(),
            target: loss.as_ref().map(|l| -l.inf_u_plus_m),
        }
    });

    let mut checks = Vec::new();
    let missing = |name: &str, what: &str| check(name, false, f64::NAN, f64::NAN, 0.0, format!("missing {what}"));
    if s.checks.unbiased {
        let with_oracle: Vec<&CellSummary> = cells.iter().filter(|c| c.p_oracle.is_some()).collect();
        if with_oracle.is_empty() {
            checks.push(missing("unbiased", "oracle or replicates"));
        }
        for c in with_oracle {
            let o = c.p_oracle.unwrap();
            let bound = tol.stderr_multiple * c.stderr;
            let gap = (c.mean - o).abs();
            checks.push(check(
                format!("unbiased {} eps={}", c.label, c.epsilon),
                gap < bound || (gap == 0.0 && bound == 0.0),
                c.mean,
                o,
                bound,
                format!("|mean - oracle| = {gap:.3e}, {} stderr = {bound:.3e}", tol.stderr_multiple),
            ));
        }
    }
    if s.checks.ideal_variance {
        for c in cells.iter().filter(|c| matches!(c.method, Method::Ams { .. })) {
            let g = rel_gap(c.n_var, c.ideal);
            checks.push(check(
                format!("ideal_variance {} eps={}", c.label, c.epsilon),
                g < tol.ideal_rel,
                c.n_var,
                c.ideal,
                tol.ideal_rel,
                format!("relative gap {g:.3}"),
            ));
        }
    }
    if s.checks.formula_match {
        if variance.is_empty() {
            checks.push(missing("formula_match", "variance tables"));
        }
        let label = s.ams.first().map(|a| format!("ams_n{}_k{}", a.n, a.k)).unwrap_or_default();
        for v in &variance {
            match cells.iter().find(|c| c.epsilon == v.epsilon && c.label == label) {
                Some(c) => {
                    let g = rel_gap(c.n_var, v.sigma2_ams);
                    checks.push(check(
                        format!("formula_match {label} eps={}", v.epsilon),
                        g < tol.formula_rel,
                        c.n_var,
                        v.sigma2_ams,
                        tol.formula_rel,
                        format!("relative gap {g:.3}"),
                    ));
                }
                None => checks.push(missing("formula_match", "replicates")),
            }
        }
    }
    if s.checks.loss_slope {
        match (slopes.first().and_then(|sl| sl.fit.map(|f| (sl, f))), &loss) {
            (Some((sl, fit)), Some(l)) => {
                let g = rel_gap(fit.slope, l.sup_loss);
                checks.push(check(
                    format!("loss_slope {}", sl.label),
                    fit.slope > 0.0 && g < tol.slope_rel,
                    fit.slope,
                    l.sup_loss,
                    tol.slope_rel,
                    format!("relative gap {g:.3}, slope stderr {:.3}", fit.residual),
                ));
            }
            _ => checks.push(missing("loss_slope", "slope fit or loss profile")),
        }
    }
    if s.checks.loss_properties || s.checks.loss_vanishes {
        if base.is_trivial() {
            checks.push(check("loss_properties", true, 0.0, 0.0, 0.0, "trivial scenario, profile skipped"));
        } else if let Some(l) = &loss {
            if s.checks.loss_properties {
                let ends = l.start_loss.abs().max(l.end_loss.abs());
                let floor = l.min_loss.min(l.min_loss_u).min(l.min_loss_o);
                checks.push(check("loss_nonnegative", floor >= -tol.loss_floor, floor, 0.0, tol.loss_floor, "min of Loss, Loss_U, Loss_O"));
                checks.push(check("loss_endpoints", ends <= tol.loss_endpoint, ends, 0.0, tol.loss_endpoint, "|Loss| at both end levels"));
                checks.push(check(
                    "loss_decomposition",
                    l.max_decomposition_error <= tol.decomposition,
                    l.max_decomposition_error,
                    0.0,
                    tol.decomposition,
                    "max |Loss_U + Loss_O - Loss|",
                ));
            }
            if s.checks.loss_vanishes {
                checks.push(check("loss_vanishes", l.sup_loss < tol.loss_vanish, l.sup_loss, 0.0, tol.loss_vanish, "sup Loss"));
            }
        } else {
            checks.push(missing("loss_properties", "loss profile"));
        }
        let failed = ev.errors.iter().filter(|e| e.stage.starts_with("loss profile")).count();
        if failed > 0 {
            checks.push(check("loss_profile_complete", false, failed as f64, 0.0, 0.0, "failed profile stages"));
        }
    }
    if s.checks.n2_limit {
        match n2.as_ref().and_then(|n| n.fit.zip(n.target)) {
            Some((fit, target)) => {
                let g = rel_gap(fit.slope, target);
                checks.push(check("n2_limit", g < tol.n2_rel, fit.slope, target, tol.n2_rel, format!("relative gap {g:.3}")));
            }
            None => checks.push(missing("n2_limit", "probe fit or loss profile")),
        }
    }

    Ok(Report {
        scenario: portable(s),
        config_hash: portable(s).hash(),
        version: env!("CARGO_PKG_VERSION").into(),
        model: base.spec().clone(),
        trivial: base.is_trivial(),
        cells,
        variance,
        loss,
        slopes,
        n2,
        subsolution: ev.subsolution.clone(),
        checks,
        errors: ev.errors.clone(),
    })
}
