//! Acceptance criteria AC1-AC9, one PASS/FAIL line each with its clauses
//! underneath.
//!
//! Every criterion is evaluated as stated; a FAIL line is a finding, not a
//! crash, so the binary exits 0 unless `AMSFW_STRICT` is set or something
//! errors out.

use std::path::{Path, PathBuf};
use std::time::Instant;

use amsfw::action::grid::{richardson, GridOracle};
use amsfw::action::loss::loss_profile;
use amsfw::action::path::{action_with_gradient, geometric_action, DiscretePath};
use amsfw::action::qp::{cost_to_level, minimize_qp, Constraints, QpOptions, Target};
use amsfw::fluctuation::{n2_probe, N2Options};
use amsfw::rng::derive_seed;
use amsfw::{catalog, Model, RngStream, Simulator};
use amsfw_cli::report::Report;
use amsfw_cli::{check_report, run_scenario, Scenario};
use anyhow::{ensure, Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

/// Crude Monte Carlo of the Euler chain itself (10^6 paths, dt = 1e-3, seed 11):
/// the probability the splitting estimators are unbiased for at this step size.
const OU_DISCRETE_P: f64 = 0.088926;
const OU_DISCRETE_SE: f64 = 0.000285;

struct Outcome {
    id: &'static str,
    pass: bool,
    lines: Vec<String>,
}

impl Outcome {
    fn new(id: &'static str) -> Self {
        Outcome { id, pass: true, lines: vec![] }
    }

    fn clause(&mut self, ok: bool, text: String) {
        self.pass &= ok;
        self.lines.push(format!("{} {text}", if ok { "ok  " } else { "FAIL" }));
    }

    fn note(&mut self, text: String) {
        self.lines.push(format!("     {text}"));
    }
}

fn scenario(name: &str, out: &Path) -> Result<Scenario> {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("scenarios").join(format!("{name}.toml"));
    let mut s = Scenario::load(&path)?;
    s.output = out.to_path_buf();
    Ok(s)
}

fn run(name: &str, out: &Path) -> Result<Report> {
    let t = Instant::now();
    let s = scenario(name, out)?;
    let r = run_scenario(&s).with_context(|| format!("scenario {name}"))?;
    let o = check_report(&s.dir().join("report.json"))?;
    ensure!(o.agree(), "checker disagrees with {name}: {:?}", o.mismatches);
    eprintln!("  [{name}: {:.0} s]", t.elapsed().as_secs_f64());
    Ok(r)
}

fn check_lines(o: &mut Outcome, r: &Report, prefix: &str) {
    let mut any = false;
    for c in r.checks.iter().filter(|c| c.name.starts_with(prefix)) {
        any = true;
        o.clause(c.pass, format!("{}: {}", c.name, c.detail));
    }
    if !any {
        o.clause(false, format!("no {prefix} check in {}", r.scenario.name));
    }
    for e in &r.errors {
        o.note(format!("stage error [{}]: {}", e.stage, e.message));
    }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

fn ac1(out: &Path) -> Result<(Outcome, Report)> {
    let mut o = Outcome::new("AC1 unbiasedness (OU, AMS k=1, k=5, FMS J=8)");
    let r = run("ou_unbiased", out)?;
    check_lines(&mut o, &r, "unbiased");
    for c in &r.cells {
        let bound = 3.0 * (c.stderr.powi(2) + OU_DISCRETE_SE.powi(2)).sqrt();
        o.note(format!(
            "{}: against the dt = 1e-3 chain ({OU_DISCRETE_P:.6}): gap {:.2e}, 3 sigma {:.2e}",
            c.label,
            (c.mean - OU_DISCRETE_P).abs(),
            bound
        ));
    }
    Ok((o, r))
}

fn ac2(out: &Path) -> Result<Outcome> {
    let mut o = Outcome::new("AC2 ideal-xi variance (OU, N=1024, M=400)");
    let r = run("ou_ideal_variance", out)?;
    check_lines(&mut o, &r, "ideal_variance");
    Ok(o)
}

fn ac3(out: &Path) -> Result<(Outcome, Report)> {
    let mut o = Outcome::new("AC3 variance formula vs empirical (two-channel, eps=0.3)");
    let r = run("channel_variance_formula", out)?;
    check_lines(&mut o, &r, "formula_match");
    Ok((o, r))
}

fn ac4(channel: &Report, ou: &Report) -> Outcome {
    let mut o = Outcome::new("AC4 loss slope");
    check_lines(&mut o, channel, "loss_slope");
    let sup = channel.loss.as_ref().map_or(f64::NAN, |l| l.sup_loss);
    match ou.slopes.first().and_then(|s| s.fit.as_ref()) {
        Some(fit) => o.clause(
            fit.slope.abs() < 0.1 * sup,
            format!("1D slope |{:.4}| < 0.1 * sup Loss = {:.4}", fit.slope, 0.1 * sup),
        ),
        None => o.clause(false, "1D slope missing".into()),
    }
    o
}

fn ac5(channel: &Report, aligned: &Report, opts: &QpOptions) -> Result<Outcome> {
    let mut o = Outcome::new("AC5 loss properties on every catalog model");
    let one = |o: &mut Outcome, name: &str, min: f64, ends: f64, dec: f64, sup: f64| {
        o.clause(
            min >= -1e-6 && ends <= 1e-6 && dec <= 1e-9,
            format!("{name}: min Loss {min:.2e}, endpoint |Loss| {ends:.2e}, decomposition error {dec:.2e}, sup {sup:.4}"),
        );
    };
    for m in [catalog::ou_1d(), catalog::double_well_1d()] {
        let p = loss_profile(&m, 16, opts)?;
        let min = p.loss.iter().chain(&p.loss_u).chain(&p.loss_o).fold(f64::INFINITY, |a, &v| a.min(v));
        let ends = p.loss[0].abs().max(p.loss.last().unwrap().abs());
        let dec = (0..p.loss.len()).map(|i| (p.loss_u[i] + p.loss_o[i] - p.loss[i]).abs()).fold(0.0, f64::max);
        one(&mut o, m.name(), min, ends, dec, p.loss.iter().cloned().fold(0.0, f64::max));
    }
    for r in [channel, aligned] {
        match &r.loss {
            Some(l) => one(
                &mut o,
                &r.model.name,
                l.min_loss.min(l.min_loss_u).min(l.min_loss_o),
                l.start_loss.abs().max(l.end_loss.abs()),
                l.max_decomposition_error,
                l.sup_loss,
            ),
            None => o.clause(false, format!("{}: no loss profile", r.model.name)),
        }
    }
    if let Some(sub) = &channel.subsolution {
        o.note(format!(
            "two_channel weak sub-solution with F = u: verbatim form worst {:.2e}, convention form worst {:.4} ({:?})",
            sub.max_verbatim,
            sub.max_convention,
            sub.worst_convention.as_ref().map(|p| p.inequality)
        ));
    }
    let vanish = aligned.loss.as_ref().map_or(f64::NAN, |l| l.sup_loss);
    o.clause(vanish < 1e-3, format!("aligned variant: max Loss {vanish:.2e} < 1e-3"));
    Ok(o)
}

fn ac6(opts: &QpOptions) -> Result<Outcome> {
    let mut o = Outcome::new("AC6 quasi-potential oracles");
    // gradient systems: U = (2/s^2) dV uphill
    let dw = catalog::double_well_1d();
    let cases = [
        (&dw, vec![-1.0], 0.0, 2.0 * 0.25),
        (&dw, vec![-0.5], 0.5, 2.0 * (0.25 - 0.75f64.powi(2) / 4.0)),
        (&catalog::ou_1d(), vec![0.2], 1.0, 0.5 - 0.02),
    ];
    for (m, x, l, exact) in cases {
        let cons = Constraints { avoid_a: false, confine: None };
        let v = minimize_qp(m, &x, &Target::Level(l), &cons, opts)?.value;
        o.clause(rel(v, exact) < 0.01, format!("{} U({:?}, {{xi = {l}}}) = {v:.5}, 2dV/s^2 = {exact:.5}", m.name(), x));
    }

    let m = catalog::two_channel();
    let x0 = m.x0().to_vec();
    let targets: Vec<(String, Target)> = vec![
        ("{x = l_B}".into(), Target::Level(m.l_b())),
        ("(0.6, 0.5)".into(), Target::Point(vec![0.6, 0.5])),
        ("(0.9, -0.6)".into(), Target::Point(vec![0.9, -0.6])),
    ];
    for (label, target) in &targets {
        let qp = minimize_qp(&m, &x0, target, &Constraints::avoid_a(), opts)?.value;
        let rich = richardson(&m, 0.02, |g: &GridOracle| {
            let f = g.forward(&x0, None);
            match target {
                Target::Level(l) => g.min_on_level(&f, *l).0,
                Target::Point(y) => g.cost_to_point(&f, y),
            }
        })?;
        o.clause(
            rel(qp, rich.fine) < 0.05 && rel(qp, rich.extrapolated) < 0.05,
            format!(
                "two_channel U(x0, {label}) = {qp:.4}; grid h=0.02 {:.4}, h=0.01 {:.4}, extrapolated {:.4}",
                rich.coarse, rich.fine, rich.extrapolated
            ),
        );
    }

    // triangle inequality on random triples outside A
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let triples: Vec<[Vec<f64>; 3]> = (0..100)
        .map(|_| std::array::from_fn(|_| vec![rng.random_range(0.05..1.2), rng.random_range(-1.2..1.2)]))
        .collect();
    let cost = |a: &[f64], b: &[f64]| minimize_qp(&m, a, &Target::Point(b.to_vec()), &Constraints::avoid_a(), opts).map(|r| r.value);
    let worst = triples
        .par_iter()
        .map(|[x, y, z]| -> Result<f64> {
            let (xy, yz, xz) = (cost(x, y)?, cost(y, z)?, cost(x, z)?);
            let slack = 2.0 * 0.05 * xy.max(yz).max(xz);
            Ok(xz - xy - yz - slack)
        })
        .collect::<Result<Vec<f64>>>()?
        .into_iter()
        .fold(f64::NEG_INFINITY, f64::max);
    o.clause(worst <= 0.0, format!("triangle inequality on 100 triples: worst excess over slack {worst:.2e}"));

    // confinement never lowers the cost
    let pairs: Vec<(Vec<f64>, Vec<f64>, f64)> = (0..20)
        .map(|_| {
            let a: Vec<f64> = vec![rng.random_range(0.05..0.7), rng.random_range(-1.0..1.0)];
            let b: Vec<f64> = vec![rng.random_range(0.05..0.7), rng.random_range(-1.0..1.0)];
            let l = a[0].max(b[0]) + rng.random_range(0.0..0.3);
            (a, b, l)
        })
        .collect();
    let gaps = pairs
        .par_iter()
        .map(|(a, b, l)| -> Result<f64> {
            let free = minimize_qp(&m, a, &Target::Point(b.clone()), &Constraints::avoid_a(), opts)?.value;
            let conf = minimize_qp(&m, a, &Target::Point(b.clone()), &Constraints::confined(*l), opts)?.value;
            Ok((free - conf) / free.max(1e-3))
        })
        .collect::<Result<Vec<f64>>>()?;
    let mut level_gaps = Vec::new();
    for l in [0.3, 0.6, 0.9] {
        let c = cost_to_level(&m, &x0, l, opts)?;
        level_gaps.push((c.free.value - c.value) / c.free.value.max(1e-3));
    }
    let worst = gaps.iter().chain(&level_gaps).cloned().fold(f64::NEG_INFINITY, f64::max);
    o.clause(worst <= 1e-3, format!("U^(l) >= U on 20 pairs and 3 levels: largest relative excess of U over U^(l) {worst:.2e}"));
    Ok(o)
}

fn ac7(variance: &Report, channel: &Report) -> Outcome {
    let mut o = Outcome::new("AC7 FMS -> AMS convergence");
    match variance.variance.first() {
        Some(v) => {
            let s: Vec<(usize, f64)> = v.nested.iter().filter(|n| n.j >= 8).map(|n| (n.j, n.sigma2_fms)).collect();
            let monotone = s.windows(2).all(|w| w[1].1 < w[0].1) && s.iter().all(|x| x.1 >= v.sigma2_ams);
            let last = s.last().map_or(f64::NAN, |x| rel(x.1, v.sigma2_ams));
            let seq: Vec<String> = s.iter().map(|(j, x)| format!("J={j}: {x:.4e}")).collect();
            o.clause(monotone, format!("sigma2_fms decreasing toward sigma2_ams = {:.4e}: {}", v.sigma2_ams, seq.join(", ")));
            o.clause(s.last().is_some_and(|x| x.0 == 64) && last < 0.05, format!("final relative gap {last:.4} < 0.05"));
        }
        None => o.clause(false, "no variance table".into()),
    }
    match &channel.loss {
        Some(l) => {
            let s: Vec<(usize, f64)> = l.constants.iter().map(|c| (c.j, c.c1.max(c.c2))).collect();
            let monotone = s.windows(2).all(|w| w[1].1 < w[0].1);
            let seq: Vec<String> = s.iter().map(|(j, x)| format!("J={j}: {x:.4}")).collect();
            o.clause(monotone, format!("max(C1, C2) decreasing: {}", seq.join(", ")));
            if let [.., (_, a), (64, b)] = s[..] {
                // gaps halve with J, so 2 C(64) - C(32) estimates the limit
                let limit = 2.0 * b - a;
                o.clause(
                    rel(limit, l.sup_loss) < 0.05,
                    format!("limit 2C(64) - C(32) = {limit:.4} vs sup Loss {:.4}: gap {:.4}", l.sup_loss, rel(limit, l.sup_loss)),
                );
                o.note(format!("unextrapolated J=64 gap {:.4}", rel(b, l.sup_loss)));
            } else {
                o.clause(false, "constants up to J=64 missing".into());
            }
        }
        None => o.clause(false, "no loss profile".into()),
    }
    o
}

/// P[I ≤ 1] by direct simulation of AMS with two clones and k = 1.
fn two_clone_oracle(m: &Model, pairs: u64, seed: u64) -> Result<(f64, f64)> {
    let sim = Simulator::new(m, &[]);
    let lb = m.l_b();
    let hits = (0..pairs)
        .into_par_iter()
        .map(|i| -> Result<u64> {
            let s = derive_seed(seed, i);
            let a = sim.run(m.x0(), lb, RngStream::new(s, 0))?;
            let b = sim.run(m.x0(), lb, RngStream::new(s, 1))?;
            let ok = match (a.hit_target, b.hit_target) {
                (true, true) => true,
                (false, false) => false,
                (a_won, _) => {
                    let (survivor, killed) = if a_won { (&a, &b) } else { (&b, &a) };
                    let idx = survivor.xi.iter().position(|&v| v > killed.score).expect("survivor is higher");
                    sim.branch(survivor, idx, lb, RngStream::new(s, 2))?.hit_target
                }
            };
            Ok(ok as u64)
        })
        .collect::<Result<Vec<u64>>>()?
        .into_iter()
        .sum::<u64>();
    let p = hits as f64 / pairs as f64;
    Ok((p, (p * (1.0 - p) / pairs as f64).sqrt()))
}

fn ac8(channel: &Report) -> Result<Outcome> {
    let mut o = Outcome::new("AC8 N=2 probe");
    match &channel.n2 {
        Some(n2) => {
            let pts: Vec<String> = n2.points.iter().map(|p| format!("eps={}: {:.3e}", p.epsilon, p.probability)).collect();
            o.note(pts.join(", "));
            match (&n2.fit, n2.target) {
                (Some(f), Some(t)) => o.clause(
                    rel(f.slope, t) < 0.2,
                    format!("lim eps ln P fit {:.4} vs -inf(u + m) = {t:.4}: gap {:.4}", f.slope, rel(f.slope, t)),
                ),
                _ => o.clause(false, "fit or target missing".into()),
            }
        }
        None => o.clause(false, "no probe in the sweep".into()),
    }
    let m = catalog::two_channel().with_epsilon(0.5)?;
    let opts = N2Options { repeats: 32, ..Default::default() };
    let probe = &n2_probe(&m, &[0.5], &opts, 8)?[0];
    let (p, se) = two_clone_oracle(&m, 200_000, 9)?;
    let bound = 3.0 * (probe.stderr.powi(2) + se * se).sqrt();
    o.clause(
        (probe.probability - p).abs() < bound,
        format!("eps=0.5: probe {:.5} +- {:.5}, two-clone simulation {p:.5} +- {se:.5}, 3 sigma {bound:.5}", probe.probability, probe.stderr),
    );
    Ok(o)
}

fn ac9(first: &Report, out: &Path) -> Result<Outcome> {
    let mut o = Outcome::new("AC9 numerical hygiene");
    let m = catalog::two_channel();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let nodes: Vec<f64> = (0..24).flat_map(|_| [rng.random_range(0.0..1.2), rng.random_range(-1.0..1.0)]).collect();
        let mut g = vec![0.0; nodes.len()];
        action_with_gradient(&m, &nodes, 1.0, 0.0, &mut g);
        let h = 1e-6;
        let mut err: f64 = 0.0;
        let mut scale: f64 = 0.0;
        for i in 0..nodes.len() {
            let (mut a, mut b) = (nodes.clone(), nodes.clone());
            a[i] += h;
            b[i] -= h;
            let mut scratch = vec![0.0; nodes.len()];
            let fa = action_with_gradient(&m, &a, 1.0, 0.0, &mut scratch);
            let fb = action_with_gradient(&m, &b, 1.0, 0.0, &mut scratch);
            let fd = (fa - fb) / (2.0 * h);
            err = err.max((fd - g[i]).abs());
            scale = scale.max(fd.abs());
        }
        worst = worst.max(err / scale);
    }
    o.clause(worst < 1e-5, format!("gradient vs central differences on 50 random paths: {worst:.2e} < 1e-5"));

    let curves: [fn(f64) -> [f64; 2]; 3] = [
        |t| [0.1 + 0.9 * t, 0.3 * (std::f64::consts::PI * t).sin()],
        |t| [0.1 + 1.1 * t * t, -0.5 * t],
        |t| [0.1 + 0.6 * t, 0.8 * t * (1.0 - t) - 0.2 * t],
    ];
    let speeds: [fn(f64) -> f64; 2] = [|s| s * s, |s| s + 0.2 * (2.0 * std::f64::consts::PI * s).sin() / (2.0 * std::f64::consts::PI)];
    let mut worst: f64 = 0.0;
    for c in curves {
        let path = |theta: &dyn Fn(f64) -> f64| {
            let pts: Vec<Vec<f64>> = (0..=4000).map(|i| c(theta(i as f64 / 4000.0)).to_vec()).collect();
            geometric_action(&DiscretePath::from_points(&pts), &m)
        };
        let base = path(&|s| s);
        for v in speeds {
            worst = worst.max(rel(path(&v), base));
        }
    }
    o.clause(worst < 1e-4, format!("geometric action under reparametrization: {worst:.2e} < 1e-4"));

    let again = run("ou_unbiased", out)?;
    let a = serde_json::to_vec_pretty(first)?;
    let b = serde_json::to_vec_pretty(&again)?;
    let on_disk = std::fs::read(out.join("ou_unbiased").join("report.json"))?;
    o.clause(a == b && b == on_disk, format!("rerun in a fresh directory gives a byte-identical report ({} bytes)", a.len()));
    Ok(o)
}

fn main() -> Result<()> {
    let root = tempfile::tempdir()?;
    let dir = |n: &str| -> Result<PathBuf> {
        let d = root.path().join(n);
        std::fs::create_dir_all(&d)?;
        Ok(d)
    };
    let opts = QpOptions::default();
    let mut results = Vec::new();

    let (o1, ou_first) = ac1(&dir("a")?)?;
    results.push(o1);
    results.push(ac2(&dir("a")?)?);
    let (o2b, variance) = ac3(&dir("a")?)?;
    results.push(o2b);
    let channel = run("channel_loss_slope", &dir("a")?)?;
    let ou_sweep = run("ou_loss_slope", &dir("a")?)?;
    results.push(ac4(&channel, &ou_sweep));
    let aligned = run("aligned_loss", &dir("a")?)?;
    results.push(ac5(&channel, &aligned, &opts)?);
    results.push(ac6(&opts)?);
    results.push(ac7(&variance, &channel));
    results.push(ac8(&channel)?);
    results.push(ac9(&ou_first, &dir("b")?)?);

    println!();
    for r in &results {
        println!("{} {}", if r.pass { "PASS" } else { "FAIL" }, r.id);
        for l in &r.lines {
            println!("    {l}");
        }
    }
    let failed = results.iter().filter(|r| !r.pass).count();
    println!("\nacceptance: {} of {} criteria pass", results.len() - failed, results.len());
    if failed > 0 && std::env::var_os("AMSFW_STRICT").is_some() {
        std::process::exit(1);
    }
    Ok(())
}
