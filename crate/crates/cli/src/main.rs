use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use amsfw::action::loss::{loss_profile, sup_loss};
use amsfw::action::qp::{cost_to_level, minimize_qp, Constraints, QpOptions, Target};
use amsfw::action::subsolution::check_weak_subsolution;
use amsfw::fluctuation::{empirical_variance, n2_probe, N2Options, Tabulated};
use amsfw::{catalog, Model, ModelSpec};
use amsfw_cli::experiment::{read_csv, Replicate};
use amsfw_cli::{check_report, run_scenario, Report, Scenario};
use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

#[derive(Parser)]
#[command(name = "amsfw", version, about = "Multilevel splitting and Freidlin-Wentzell loss experiments")]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true, env = "AMSFW_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Adaptive multilevel splitting replicates.
    Ams {
        #[command(subcommand)]
        cmd: RunCmd,
    },
    /// Fixed multilevel splitting replicates.
    Fms {
        #[command(subcommand)]
        cmd: RunCmd,
    },
    Analyze {
        #[command(subcommand)]
        cmd: AnalyzeCmd,
    },
    Action {
        #[command(subcommand)]
        cmd: ActionCmd,
    },
    Probe {
        #[command(subcommand)]
        cmd: ProbeCmd,
    },
    Experiment {
        #[command(subcommand)]
        cmd: ExperimentCmd,
    },
    /// List the built-in models.
    Catalog,
}

#[derive(Args)]
struct RunArgs {
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Output root; overrides the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum RunCmd {
    Run(RunArgs),
}

#[derive(Subcommand)]
enum AnalyzeCmd {
    /// Empirical N·Var from replicate CSVs.
    Variance {
        csv: Vec<PathBuf>,
        /// Clones per run.
        #[arg(long)]
        n: usize,
        /// Reference probability for the relative variance.
        #[arg(long)]
        p_ref: Option<f64>,
    },
}

#[derive(Args)]
struct ModelArgs {
    /// Catalog model name.
    #[arg(long, default_value = "two_channel")]
    model: String,
    /// TOML model spec; overrides --model.
    #[arg(long)]
    spec: Option<PathBuf>,
}

impl ModelArgs {
    fn load(&self) -> Result<Model> {
        match &self.spec {
            Some(p) => {
                let spec: ModelSpec = toml::from_str(&fs::read_to_string(p)?)?;
                Ok(Model::new(spec)?)
            }
            None => catalog::by_name(&self.model).with_context(|| format!("unknown model {}", self.model)),
        }
    }
}

#[derive(Subcommand)]
enum ActionCmd {
    /// U(x, y), U(x, {ξ = l}) or their {ξ ≤ l}-confined versions.
    Qp {
        #[command(flatten)]
        model: ModelArgs,
        /// Start state, comma separated; defaults to x0.
        #[arg(long, value_delimiter = ',')]
        from: Vec<f64>,
        /// End state, comma separated.
        #[arg(long, value_delimiter = ',')]
        to: Vec<f64>,
        /// Free endpoint on {ξ = level}.
        #[arg(long)]
        level: Option<f64>,
        #[arg(long)]
        confine: Option<f64>,
        /// CSV file for the minimizing path.
        #[arg(long)]
        path: Option<PathBuf>,
    },
    /// Loss profile, instanton and FMS constants.
    Loss {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 64)]
        intervals: usize,
        #[arg(long, default_value = "loss_out")]
        out: PathBuf,
    },
    /// Weak sub-solution test with F = u from a loss profile.
    Subsolution {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 16)]
        intervals: usize,
        #[arg(long, default_value_t = 6)]
        levels: usize,
    },
}

#[derive(Subcommand)]
enum ProbeCmd {
    /// P[I ≤ 1] for AMS with two clones.
    N2 {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, value_delimiter = ',', required = true)]
        epsilons: Vec<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        repeats: usize,
    },
}

#[derive(Subcommand)]
enum ExperimentCmd {
    Run(RunArgs),
    /// Recompute every flag of a report from its raw CSVs.
    Check { report: PathBuf },
}

fn load_scenario(a: &RunArgs) -> Result<Scenario> {
    let mut s = Scenario::load(&a.config)?;
    if let Some(seed) = a.seed {
        s.seed = seed;
    }
    if let Some(out) = &a.out {
        s.output = out.clone();
    }
    Ok(s)
}

fn print_report(r: &Report, dir: &Path) {
    for c in &r.checks {
        println!("{} {}: {} (value {:.6e}, reference {:.6e})", if c.pass { "PASS" } else { "FAIL" }, c.name, c.detail, c.value, c.reference);
    }
    for e in &r.errors {
        eprintln!("stage error [{}]: {}", e.stage, e.message);
    }
    println!("report: {}", dir.join("report.json").display());
}

fn splitting_only(mut s: Scenario, ams: bool) -> Scenario {
    if ams {
        s.fms.clear();
    } else {
        s.ams.clear();
    }
    s.analysis = Default::default();
    s.checks.formula_match = false;
    s.checks.loss_slope = false;
    s.checks.loss_properties = false;
    s.checks.loss_vanishes = false;
    s.checks.n2_limit = false;
    s.checks.ideal_variance &= ams;
    s
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Ams { cmd: RunCmd::Run(a) } => {
            let s = splitting_only(load_scenario(&a)?, true);
            let r = run_scenario(&s)?;
            print_report(&r, &s.dir());
            Ok(r.passed())
        }
        Command::Fms { cmd: RunCmd::Run(a) } => {
            let s = splitting_only(load_scenario(&a)?, false);
            let r = run_scenario(&s)?;
            print_report(&r, &s.dir());
            Ok(r.passed())
        }
        Command::Analyze { cmd: AnalyzeCmd::Variance { csv, n, p_ref } } => {
            let mut out = Vec::new();
            for path in &csv {
                let reps: Vec<Replicate> = read_csv(path)?;
                let p: Vec<f64> = reps.iter().map(|r| r.p_hat).collect();
                let v = empirical_variance(&p, n)?;
                let p_ref = p_ref.unwrap_or(v.mean);
                out.push(json!({
                    "file": path.display().to_string(),
                    "replicates": v.replicates,
                    "mean": v.mean,
                    "n_var": v.n_var,
                    "ci": [v.ci_low, v.ci_high],
                    "p_ref": p_ref,
                    "rel_var": v.n_var / (p_ref * p_ref),
                    "ideal": -p_ref * p_ref * p_ref.ln(),
                }));
            }
            println!("{}", serde_json::to_string_pretty(&out)?);
            Ok(true)
        }
        Command::Action { cmd } => action(cmd),
        Command::Probe { cmd: ProbeCmd::N2 { model, epsilons, seed, repeats } } => {
            let m = model.load()?;
            let opts = N2Options { repeats, ..Default::default() };
            let pts = n2_probe(&m, &epsilons, &opts, seed)?;
            let mut w = csv::Writer::from_writer(std::io::stdout());
            for p in &pts {
                w.serialize(p)?;
            }
            w.flush()?;
            Ok(true)
        }
        Command::Experiment { cmd: ExperimentCmd::Run(a) } => {
            let s = load_scenario(&a)?;
            let r = run_scenario(&s)?;
            print_report(&r, &s.dir());
            Ok(r.passed())
        }
        Command::Experiment { cmd: ExperimentCmd::Check { report } } => {
            let o = check_report(&report)?;
            for c in &o.recomputed {
                println!("{} {}: {}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            for m in &o.mismatches {
                println!("MISMATCH {m}: stored flag differs from the recomputed one");
            }
            Ok(o.passed())
        }
        Command::Catalog => {
            for m in catalog::catalog() {
                println!("{}\n  {}", m.name(), m.spec().notes);
            }
            Ok(true)
        }
    }
}

fn action(cmd: ActionCmd) -> Result<bool> {
    let opts = QpOptions::default();
    match cmd {
        ActionCmd::Qp { model, from, to, level, confine, path } => {
            let m = model.load()?;
            let x = if from.is_empty() { m.x0().to_vec() } else { from };
            let target = match (level, to.is_empty()) {
                (Some(l), true) => Target::Level(l),
                (None, false) => Target::Point(to),
                _ => bail!("give exactly one of --to and --level"),
            };
            let cons = Constraints { avoid_a: true, confine };
            let (r, gap) = match (&target, confine) {
                (Target::Level(l), None) => {
                    let c = cost_to_level(&m, &x, *l, &opts)?;
                    let gap = c.discrepancy();
                    (c.confined, Some(gap))
                }
                _ => (minimize_qp(&m, &x, &target, &cons, &opts)?, None),
            };
            if let Some(p) = path {
                r.path.write_csv(fs::File::create(p)?)?;
            }
            println!(
                "{}",
                serde_json::to_string_pretty(&json!({
                    "value": r.value,
                    "constraint_violation": r.constraint_violation,
                    "multistart_spread": r.multistart_spread,
                    "restarts": r.restarts,
                    "end": r.path.last(),
                    "confined_vs_free_gap": gap,
                }))?
            );
            Ok(true)
        }
        ActionCmd::Loss { model, intervals, out } => {
            let m = model.load()?;
            let p = loss_profile(&m, intervals, &opts)?;
            fs::create_dir_all(&out)?;
            p.write_csv(fs::File::create(out.join("loss_profile.csv"))?)?;
            p.instanton.write_csv(fs::File::create(out.join("instanton.csv"))?)?;
            let s = sup_loss(&p);
            let top = p.uniform_levels(intervals);
            let c = p.fms_constants(&top)?;
            let summary = json!({
                "l_star": s.as_ref().ok().and_then(|s| s.l_star),
                "sup_loss": s.as_ref().map(|s| s.value).unwrap_or(f64::NAN),
                "sup_loss_error": s.as_ref().err().map(|e| e.to_string()),
                "u_b": p.u_b,
                "c1": c.c1,
                "c2": c.c2,
                "fms_limit": c.limit,
                "failures": p.failures,
            });
            fs::write(out.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
            Ok(p.failures.is_empty())
        }
        ActionCmd::Subsolution { model, intervals, levels } => {
            let m = model.load()?;
            let p = loss_profile(&m, intervals, &opts)?;
            let table = Tabulated::new(p.levels.clone(), p.u.clone())?;
            let f = move |l: f64| table.eval(l);
            let r = check_weak_subsolution(&m, &f, levels, 2, &p.x_star_of_l(), &opts)?;
            println!("{}", serde_json::to_string_pretty(&r)?);
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(t) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t).build_global() {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    }
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
