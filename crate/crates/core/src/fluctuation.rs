//! Asymptotic variance formulas, empirical variances, committor estimates and
//! the two-clone probe.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::rng::{derive_seed, RngStream};
use crate::sde::Simulator;
use crate::splitting::{run_ams_with, AmsConfig, SplitResult};

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct Estimate {
    pub value: f64,
    pub stderr: f64,
    pub n: usize,
}

/// Fraction of `n` runs from `x` that reach {ξ ≥ l} before A.
pub fn committor_mc(model: &Model, x: &[f64], l: f64, n: usize, seed: u64) -> Result<Estimate> {
    if n == 0 {
        return Err(Error::InvalidArgument("need at least one sample".into()));
    }
    if model.xi(x) >= l {
        return Ok(Estimate { value: 1.0, stderr: 0.0, n });
    }
    if model.in_a(x) {
        return Ok(Estimate { value: 0.0, stderr: 0.0, n });
    }
    let sim = Simulator::new(model, &[]);
    let hits: usize = (0..n as u64)
        .into_par_iter()
        .map(|i| sim.run(x, l, RngStream::new(seed, i)).map(|t| t.hit_target as usize))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum();
    let q = hits as f64 / n as f64;
    Ok(Estimate { value: q, stderr: (q * (1.0 - q) / n as f64).sqrt(), n })
}

/// Committor estimated by an AMS run (k = 1) started from `x`; unbiased for
/// probabilities far below what crude sampling can see. Ties are accepted:
/// clones branched from one state near a steep wall often share its score.
pub fn committor_ams(model: &Model, x: &[f64], l: f64, n: usize, seed: u64) -> Result<f64> {
    if model.xi(x) >= l {
        return Ok(1.0);
    }
    if model.in_a(x) {
        return Ok(0.0);
    }
    let from_x = model.with_spec(|s| s.x0 = x.to_vec())?;
    let cfg = AmsConfig { n, k: 1, target: l, seed, analysis_levels: vec![], allow_ties: true };
    Ok(run_ams_with(&from_x, &cfg)?.p_hat)
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct CommittorTable {
    pub level: f64,
    pub states: Vec<Vec<f64>>,
    pub q: Vec<f64>,
    pub stderr: Vec<f64>,
    pub n: Vec<usize>,
}

pub fn committor_table(model: &Model, states: &[Vec<f64>], l: f64, n: usize, seed: u64) -> Result<CommittorTable> {
    let est: Vec<Estimate> = states
        .iter()
        .enumerate()
        .map(|(i, x)| committor_mc(model, x, l, n, derive_seed(seed, i as u64)))
        .collect::<Result<_>>()?;
    Ok(CommittorTable {
        level: l,
        states: states.to_vec(),
        q: est.iter().map(|e| e.value).collect(),
        stderr: est.iter().map(|e| e.stderr).collect(),
        n: est.iter().map(|e| e.n).collect(),
    })
}

impl CommittorTable {
    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "state,q,stderr,n")?;
        for i in 0..self.q.len() {
            let s: Vec<String> = self.states[i].iter().map(|v| v.to_string()).collect();
            writeln!(w, "\"{}\",{},{},{}", s.join(" "), self.q[i], self.stderr[i], self.n[i])?;
        }
        Ok(())
    }
}

/// Piecewise-linear table; `log_interp` interpolates ln y instead of y.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Tabulated {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    #[serde(default)]
    pub log_interp: bool,
}

impl Tabulated {
    pub fn new(x: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        if x.len() != y.len() || x.is_empty() {
            return Err(Error::InvalidArgument("table columns must be nonempty and equal length".into()));
        }
        if x.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::InvalidArgument("table abscissae must increase".into()));
        }
        Ok(Tabulated { x, y, log_interp: false })
    }

    pub fn log(mut self) -> Self {
        self.log_interp = true;
        self
    }

    pub fn eval(&self, t: f64) -> f64 {
        let n = self.x.len();
        if n == 1 || t <= self.x[0] {
            return self.y[0];
        }
        if t >= self.x[n - 1] {
            return self.y[n - 1];
        }
        let j = self.x.partition_point(|&v| v <= t) - 1;
        let w = (t - self.x[j]) / (self.x[j + 1] - self.x[j]);
        let (a, b) = (self.y[j], self.y[j + 1]);
        if self.log_interp && a > 0.0 && b > 0.0 {
            (a.ln() * (1.0 - w) + b.ln() * w).exp()
        } else {
            a * (1.0 - w) + b * w
        }
    }
}

fn ams_sum(mesh: &[f64], p: &Tabulated, varq: &Tabulated) -> f64 {
    let pv: Vec<f64> = mesh.iter().map(|&l| p.eval(l)).collect();
    let pl = *pv.last().unwrap();
    let mut acc = 0.0;
    for i in 0..mesh.len() - 1 {
        acc += varq.eval(mesh[i]) * pv[i] * (pv[i] - pv[i + 1]);
    }
    let ideal = if pl > 0.0 { -pl * pl * pl.ln() } else { 0.0 };
    ideal + 2.0 * acc
}

/// −p²ln p + 2∫ Var_{η_l}(q) p_l d(−p_l), left-point Stieltjes sums with mesh
/// doubling until the relative change is small.
pub fn sigma2_ams_formula(p: &Tabulated, varq: &Tabulated) -> Result<f64> {
    if let Some(i) = p.y.windows(2).position(|w| w[1] > w[0]) {
        return Err(Error::NonMonotone(i + 1));
    }
    if p.y.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::InvalidArgument("probabilities must lie in [0, 1]".into()));
    }
    let mut mesh = p.x.clone();
    let mut value = ams_sum(&mesh, p, varq);
    for _ in 0..24 {
        let mut finer = Vec::with_capacity(2 * mesh.len());
        for w in mesh.windows(2) {
            finer.push(w[0]);
            finer.push(0.5 * (w[0] + w[1]));
        }
        finer.push(*mesh.last().unwrap());
        let next = ams_sum(&finer, p, varq);
        let change = (next - value).abs();
        mesh = finer;
        value = next;
        if change <= 2e-5 * value.abs() || change < 1e-300 {
            return Ok(value);
        }
    }
    Ok(value)
}

/// Exact FMS variance: p at ℓ_0..ℓ_J (p_0 = 1), varq at ℓ_1..ℓ_{J−1}.
pub fn sigma2_fms_formula(p: &[f64], varq: &[f64]) -> Result<f64> {
    if p.len() < 2 {
        return Err(Error::InvalidArgument("need p at l_0 and at least one level".into()));
    }
    let j_max = p.len() - 1;
    if varq.len() != j_max - 1 {
        return Err(Error::InvalidArgument(format!("need {} variance entries, got {}", j_max - 1, varq.len())));
    }
    if let Some(i) = p.windows(2).position(|w| w[1] > w[0]) {
        return Err(Error::NonMonotone(i + 1));
    }
    if p.iter().any(|&v| !(v > 0.0 && v <= 1.0)) {
        return Err(Error::InvalidArgument("probabilities must lie in (0, 1]".into()));
    }
    let mut s = 0.0;
    for j in 1..j_max {
        s += p[j] / p[j - 1] * (p[j - 1] * p[j - 1] - p[j] * p[j]) * varq[j - 1];
    }
    let pj = p[j_max];
    let tail: f64 = (1..=j_max).map(|j| p[j - 1] / p[j] - 1.0).sum();
    Ok(s + pj * pj * tail)
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct EmpiricalVariance {
    pub n_var: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub mean: f64,
    pub replicates: usize,
}

/// N × unbiased sample variance, with a 95% percentile bootstrap interval.
pub fn empirical_variance(p_hats: &[f64], n: usize) -> Result<EmpiricalVariance> {
    let m = p_hats.len();
    if m < 2 {
        return Err(Error::InvalidArgument("need at least two replicates".into()));
    }
    let var = |xs: &mut dyn Iterator<Item = f64>| {
        // shifted by the first value so constant samples give exactly zero
        let mut v: Vec<f64> = xs.collect();
        let shift = v[0];
        v.iter_mut().for_each(|x| *x -= shift);
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64
    };
    let mean = p_hats.iter().sum::<f64>() / m as f64;
    let n_var = n as f64 * var(&mut p_hats.iter().cloned());
    let mut rng = RngStream::new(0x5eed, m as u64).rng();
    let mut boots: Vec<f64> = (0..1000)
        .map(|_| {
            let mut it = (0..m).map(|_| p_hats[rng.random_range(0..m)]);
            n as f64 * var(&mut it)
        })
        .collect();
    boots.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(EmpiricalVariance { n_var, ci_low: boots[24], ci_high: boots[974], mean, replicates: m })
}

/// ε·ln(cost × relative variance); −∞ when the variance vanishes.
pub fn efficiency_log(mean_cost: f64, rel_var: f64, epsilon: f64) -> f64 {
    if rel_var == 0.0 {
        return f64::NEG_INFINITY;
    }
    epsilon * (mean_cost * rel_var).ln()
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    /// Standard error of the slope.
    pub residual: f64,
    /// Residual above 20% of the slope.
    pub pre_asymptotic: bool,
}

/// Least-squares fit of ln v against 1/ε.
pub fn slope_fit(pairs: &[(f64, f64)]) -> Result<SlopeFit> {
    if pairs.len() < 3 {
        return Err(Error::InvalidArgument("need at least three epsilon values".into()));
    }
    if pairs.windows(2).any(|w| !(w[1].0 < w[0].0)) {
        return Err(Error::InvalidArgument("epsilon values must decrease".into()));
    }
    if pairs.iter().any(|&(e, v)| !(v > 0.0) || !(e > 0.0)) {
        return Err(Error::InvalidArgument("variances and epsilons must be positive".into()));
    }
    let n = pairs.len() as f64;
    let xs: Vec<f64> = pairs.iter().map(|p| 1.0 / p.0).collect();
    let ys: Vec<f64> = pairs.iter().map(|p| p.1.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = xs.iter().zip(&ys).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
    let residual = if pairs.len() > 2 { (sse / (n - 2.0) / sxx).sqrt() } else { 0.0 };
    Ok(SlopeFit { slope, intercept, residual, pre_asymptotic: residual > 0.2 * slope.abs() })
}

/// Variance table Var_{η_l}(q_{l_B}) built from AMS snapshots and crude
/// committor estimates at the snapshot states.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VarianceTable {
    pub levels: Vec<f64>,
    pub p: Vec<f64>,
    pub varq: Vec<f64>,
    pub mean_q: Vec<f64>,
    pub states_used: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TableOptions {
    pub states_per_level: usize,
    pub samples_per_state: usize,
    pub seed: u64,
}

impl Default for TableOptions {
    fn default() -> Self {
        TableOptions { states_per_level: 64, samples_per_state: 1000, seed: 0 }
    }
}

fn spread_pick<T: Clone>(items: &[T], count: usize) -> Vec<T> {
    if items.len() <= count {
        return items.to_vec();
    }
    (0..count).map(|i| items[i * items.len() / count].clone()).collect()
}

/// `runs` must have been produced with the same analysis levels. The first
/// table row is ξ(x0) with p = 1 and the last is the target.
pub fn variance_table(model: &Model, runs: &[SplitResult], opts: &TableOptions) -> Result<VarianceTable> {
    if runs.is_empty() {
        return Err(Error::InvalidArgument("need at least one run".into()));
    }
    let target = runs[0].target;
    let xi0 = model.xi(model.x0());
    let mut levels: Vec<f64> = runs[0].snapshots.iter().map(|s| s.level).filter(|&l| l > xi0).collect();
    levels.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut table = VarianceTable {
        levels: vec![xi0],
        p: vec![1.0],
        varq: vec![0.0],
        mean_q: vec![0.0],
        states_used: vec![0],
    };
    for (li, &l) in levels.iter().enumerate() {
        let mut p = 0.0;
        let mut pool: Vec<Vec<f64>> = Vec::new();
        for r in runs {
            let s = r.snapshot(l).ok_or_else(|| Error::InvalidArgument(format!("level {l} missing in a run")))?;
            p += s.p_hat;
            pool.extend(spread_pick(&s.states, opts.states_per_level.div_ceil(runs.len())));
        }
        p /= runs.len() as f64;
        let picked = spread_pick(&pool, opts.states_per_level);
        let (varq, mean_q) = if l >= target {
            (0.0, 1.0)
        } else {
            let n = opts.samples_per_state;
            let tab = committor_table(model, &picked, target, n, derive_seed(opts.seed, li as u64))?;
            let m = tab.q.len() as f64;
            let mean = tab.q.iter().sum::<f64>() / m;
            let raw = if tab.q.len() > 1 {
                tab.q.iter().map(|q| (q - mean).powi(2)).sum::<f64>() / (m - 1.0)
            } else {
                0.0
            };
            let noise = tab.q.iter().map(|q| q * (1.0 - q)).sum::<f64>() / m / (n as f64 - 1.0).max(1.0);
            ((raw - noise).max(0.0), mean)
        };
        table.levels.push(l);
        table.p.push(p);
        table.varq.push(varq);
        table.mean_q.push(mean_q);
        table.states_used.push(picked.len());
    }
    // keep the p column non-increasing despite sampling noise
    for i in 1..table.p.len() {
        if table.p[i] > table.p[i - 1] {
            table.p[i] = table.p[i - 1];
        }
    }
    Ok(table)
}

impl VarianceTable {
    pub fn sigma2_ams(&self) -> Result<f64> {
        let p = Tabulated::new(self.levels.clone(), self.p.clone())?.log();
        let v = Tabulated::new(self.levels.clone(), self.varq.clone())?;
        sigma2_ams_formula(&p, &v)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct N2Options {
    /// Clones of the outer AMS run that samples p_l and η_l.
    pub outer_n: usize,
    /// Interior levels of the integration grid.
    pub levels: usize,
    pub states_per_level: usize,
    /// Clones of the inner AMS runs estimating q at a state.
    pub inner_n: usize,
    pub repeats: usize,
}

impl Default for N2Options {
    fn default() -> Self {
        N2Options { outer_n: 100, levels: 24, states_per_level: 8, inner_n: 24, repeats: 8 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct N2Point {
    pub epsilon: f64,
    pub probability: f64,
    pub stderr: f64,
    pub eps_log: f64,
    /// Set when every repeat returned zero; then `probability` is an upper bound.
    pub one_sided: bool,
}

/// First states strictly above ξ(x0) from `n` short runs, and the fraction of
/// runs that get there before A.
fn start_exceedance(model: &Model, n: usize, seed: u64) -> Result<(f64, Vec<Vec<f64>>)> {
    let above = model.xi(model.x0()).next_up();
    let sim = Simulator::new(model, &[]);
    let runs: Vec<Option<Vec<f64>>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let t = sim.run(model.x0(), above, RngStream::new(seed, i as u64))?;
            Ok(t.hit_target.then(|| t.last_state().to_vec()))
        })
        .collect::<Result<_>>()?;
    let states: Vec<Vec<f64>> = runs.into_iter().flatten().collect();
    Ok((states.len() as f64 / n as f64, states))
}

fn n2_once(model: &Model, opts: &N2Options, seed: u64) -> Result<f64> {
    let lb = model.l_b();
    let xi0 = model.xi(model.x0());
    let grid: Vec<f64> = (1..=opts.levels).map(|i| xi0 + (lb - xi0) * i as f64 / (opts.levels + 1) as f64).collect();
    let outer = run_ams_with(
        model,
        &AmsConfig { n: opts.outer_n, k: 1, target: lb, seed, analysis_levels: grid.clone(), allow_ties: true },
    )?;
    let p_b = outer.p_hat;
    // In discrete time a clone may never rise above ξ(x0): that atom is killed
    // first and branches from the survivor's first state above ξ(x0).
    let (p0, first) = start_exceedance(model, opts.outer_n.max(64) * 16, derive_seed(seed, u64::MAX))?;
    let mut levels = vec![xi0];
    let mut p = vec![p0];
    let mut pools = vec![spread_pick(&first, opts.states_per_level)];
    for &l in &grid {
        let s = outer.snapshot(l).expect("analysis level was snapshotted");
        levels.push(l);
        p.push(s.p_hat.min(p0));
        pools.push(spread_pick(&s.states, opts.states_per_level));
    }
    let mut gamma = Vec::with_capacity(levels.len() + 1);
    for (li, states) in pools.iter().enumerate() {
        let q2: Vec<f64> = states
            .par_iter()
            .enumerate()
            .map(|(si, x)| {
                let base = derive_seed(seed, 1 + (li * 4096 + si) as u64);
                let a = committor_ams(model, x, lb, opts.inner_n, derive_seed(base, 0))?;
                let b = committor_ams(model, x, lb, opts.inner_n, derive_seed(base, 1))?;
                Ok(a * b)
            })
            .collect::<Result<_>>()?;
        let eta = if q2.is_empty() { 0.0 } else { q2.iter().sum::<f64>() / q2.len() as f64 };
        gamma.push(p[li] * eta);
    }
    levels.push(lb);
    p.push(p_b.min(*p.last().unwrap()));
    gamma.push(*p.last().unwrap());
    let mut integral = (1.0 - p0) * gamma[0];
    for i in 0..levels.len() - 1 {
        integral += 0.5 * (gamma[i] + gamma[i + 1]) * (p[i] - p[i + 1]);
    }
    Ok(p_b * p_b + 2.0 * integral)
}

/// P[I ≤ 1] for AMS with N = 2, k = 1, through P = p² + 2∫ γ_l(q²) d(−p_l),
/// with p_l, η_l from an outer AMS run and q² as a product of two
/// independent AMS committor estimates. The mass of clones whose score stays
/// at ξ(x0) enters as a separate term.
pub fn n2_probe(model: &Model, epsilons: &[f64], opts: &N2Options, seed: u64) -> Result<Vec<N2Point>> {
    if opts.repeats == 0 || opts.outer_n < 2 || opts.inner_n < 2 {
        return Err(Error::InvalidArgument("need repeats >= 1 and clone counts >= 2".into()));
    }
    let mut out = Vec::new();
    for (ei, &eps) in epsilons.iter().enumerate() {
        let m = model.with_epsilon(eps)?;
        if m.is_trivial() {
            out.push(N2Point { epsilon: eps, probability: 1.0, stderr: 0.0, eps_log: 0.0, one_sided: false });
            continue;
        }
        let vals: Vec<f64> = (0..opts.repeats)
            .map(|r| n2_once(&m, opts, derive_seed(derive_seed(seed, ei as u64), r as u64)))
            .collect::<Result<_>>()?;
        let k = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / k;
        let se = if vals.len() > 1 {
            (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0) / k).sqrt()
        } else {
            f64::NAN
        };
        if mean > 0.0 {
            out.push(N2Point { epsilon: eps, probability: mean, stderr: se, eps_log: eps * mean.ln(), one_sided: false });
        } else {
            let bound = 3.0 / k;
            out.push(N2Point { epsilon: eps, probability: bound, stderr: f64::NAN, eps_log: eps * bound.ln(), one_sided: true });
        }
    }
    Ok(out)
}
