use std::fs;
use std::path::Path;

use amsfw::action::loss::{loss_profile, LossProfile};
use amsfw::action::qp::QpOptions;
use amsfw::action::subsolution::{check_weak_subsolution, SubsolutionReport};
use amsfw::fluctuation::{n2_probe, variance_table, N2Point, Tabulated, VarianceTable};
use amsfw::rng::derive_seed;
use amsfw::splitting::{run_ams, run_ams_with, run_fms, AmsConfig, SplitResult};
use amsfw::Model;
use anyhow::{Context, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::Scenario;
use crate::report::{assemble, Report};

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Method {
    Ams { k: usize },
    Fms { levels: usize },
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Replicate {
    pub replicate: usize,
    pub seed: u64,
    pub p_hat: f64,
    pub iterations: usize,
    pub cost: usize,
    pub extinct: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellData {
    pub epsilon: f64,
    pub method: Method,
    pub n: usize,
    pub replicates: Vec<Replicate>,
}

impl CellData {
    pub fn label(&self) -> String {
        match self.method {
            Method::Ams { k } => format!("ams_n{}_k{k}", self.n),
            Method::Fms { levels } => format!("fms_n{}_j{levels}", self.n),
        }
    }

    pub fn file(&self) -> String {
        format!("{}/{}.csv", eps_dir(self.epsilon), self.label())
    }
}

pub fn eps_dir(eps: f64) -> String {
    format!("eps_{eps}")
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ProfileRow {
    pub l: f64,
    pub u: f64,
    pub m: f64,
    pub loss: f64,
    #[serde(rename = "loss_U")]
    pub loss_u: f64,
    #[serde(rename = "loss_O")]
    pub loss_o: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TableRow {
    pub level: f64,
    pub p: f64,
    pub varq: f64,
    pub mean_q: f64,
    pub states: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct StageError {
    pub stage: String,
    pub message: String,
}

/// Everything a report is computed from; each part is also on disk.
#[derive(Clone, Debug, Default)]
pub struct Evidence {
    pub cells: Vec<CellData>,
    pub tables: Vec<(f64, VarianceTable)>,
    pub profile: Option<Vec<ProfileRow>>,
    pub n2: Vec<N2Point>,
    pub subsolution: Option<SubsolutionReport>,
    pub errors: Vec<StageError>,
}

const AMS_TAG: u64 = 100;
const FMS_TAG: u64 = 200;
const TABLE_TAG: u64 = 300;
const N2_TAG: u64 = 400;

pub fn fms_levels(model: &Model, j: usize) -> Vec<f64> {
    let (a, b) = (model.xi(model.x0()), model.l_b());
    if model.is_trivial() {
        return vec![b];
    }
    (1..=j).map(|i| if i == j { b } else { a + (b - a) * i as f64 / j as f64 }).collect()
}

fn replicate_from(r: usize, seed: u64, res: Result<SplitResult, amsfw::Error>) -> Result<Replicate, amsfw::Error> {
    let res = res?;
    Ok(Replicate {
        replicate: r,
        seed,
        p_hat: res.p_hat,
        iterations: res.iterations,
        cost: res.cost,
        extinct: res.extinct_level.is_some(),
    })
}

fn run_cell(model: &Model, method: Method, n: usize, reps: usize, cell_seed: u64) -> Result<Vec<Replicate>, amsfw::Error> {
    let levels = match method {
        Method::Fms { levels } => fms_levels(model, levels),
        Method::Ams { .. } => vec![],
    };
    (0..reps)
        .into_par_iter()
        .map(|r| {
            let seed = derive_seed(cell_seed, r as u64);
            let res = match method {
                Method::Ams { k } => run_ams(model, n, k, model.l_b(), seed),
                Method::Fms { .. } => run_fms(model, n, &levels, seed),
            };
            replicate_from(r, seed, res)
        })
        .collect()
}

fn table_for(model: &Model, s: &Scenario, eps_index: usize) -> Result<VarianceTable, amsfw::Error> {
    let stage = &s.ams[0];
    let a = &s.analysis;
    let (x0, lb) = (model.xi(model.x0()), model.l_b());
    let intervals = a.table_levels + 1;
    let mut grid: Vec<f64> = (1..intervals).map(|i| x0 + (lb - x0) * i as f64 / intervals as f64).collect();
    grid.push(lb);
    let base = derive_seed(derive_seed(s.seed, TABLE_TAG), eps_index as u64);
    let runs: Vec<SplitResult> = (0..a.table_runs.max(1))
        .into_par_iter()
        .map(|r| {
            run_ams_with(
                model,
                &AmsConfig { n: stage.n, k: stage.k, target: lb, seed: derive_seed(base, r as u64), analysis_levels: grid.clone(), allow_ties: false },
            )
        })
        .collect::<Result<_, _>>()?;
    let mut opts = a.table.clone();
    opts.seed = derive_seed(base, u64::MAX);
    variance_table(model, &runs, &opts)
}

/// Simulates every stage of the scenario and writes the raw data under
/// `scenario.dir()`. Stage failures are recorded, not propagated.
pub fn gather(s: &Scenario) -> Result<Evidence> {
    let base = s.base_model()?;
    let dir = s.dir();
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut ev = Evidence::default();

    for (ei, &eps) in s.epsilons.iter().enumerate() {
        let model = match base.with_epsilon(eps) {
            Ok(m) => m,
            Err(e) => {
                ev.errors.push(StageError { stage: format!("model eps={eps}"), message: e.to_string() });
                continue;
            }
        };
        fs::create_dir_all(dir.join(eps_dir(eps)))?;
        let stages = s
            .ams
            .iter()
            .enumerate()
            .map(|(i, a)| (AMS_TAG + i as u64, Method::Ams { k: a.k }, a.n, a.replicates))
            .chain(s.fms.iter().enumerate().map(|(i, f)| (FMS_TAG + i as u64, Method::Fms { levels: f.levels }, f.n, f.replicates)));
        for (tag, method, n, reps) in stages {
            let cell_seed = derive_seed(derive_seed(s.seed, tag), ei as u64);
            let mut cell = CellData { epsilon: eps, method, n, replicates: vec![] };
            match run_cell(&model, method, n, reps, cell_seed) {
                Ok(r) => {
                    cell.replicates = r;
                    write_replicates(&dir.join(cell.file()), &cell.replicates)?;
                    ev.cells.push(cell);
                }
                Err(e) => ev.errors.push(StageError { stage: cell.label(), message: e.to_string() }),
            }
        }
        if s.analysis.variance_formula && !model.is_trivial() {
            match table_for(&model, s, ei) {
                Ok(t) => {
                    write_table(&dir.join(eps_dir(eps)).join("variance_table.csv"), &t)?;
                    ev.tables.push((eps, t));
                }
                Err(e) => ev.errors.push(StageError { stage: format!("variance table eps={eps}"), message: e.to_string() }),
            }
        }
    }

    let mut profile: Option<LossProfile> = None;
    if s.analysis.loss_profile && !base.is_trivial() {
        match loss_profile(&base, s.analysis.profile_intervals, &QpOptions::default()) {
            Ok(p) => {
                p.write_csv(fs::File::create(dir.join("loss_profile.csv"))?)?;
                p.instanton.write_csv(fs::File::create(dir.join("instanton.csv"))?)?;
                ev.profile = Some(read_profile(&dir.join("loss_profile.csv"))?);
                for (l, msg) in &p.failures {
                    ev.errors.push(StageError { stage: format!("loss profile level {l}"), message: msg.clone() });
                }
                profile = Some(p);
            }
            Err(e) => ev.errors.push(StageError { stage: "loss profile".into(), message: e.to_string() }),
        }
    }

    if s.analysis.subsolution {
        if let Some(p) = &profile {
            let res = Tabulated::new(p.levels.clone(), p.u.clone()).map_err(anyhow::Error::from).and_then(|table| {
                let f = move |l: f64| table.eval(l);
                Ok(check_weak_subsolution(&base, &f, s.analysis.subsolution_levels, 2, &p.x_star_of_l(), &QpOptions::default())?)
            });
            match res {
                Ok(r) => {
                    fs::write(dir.join("subsolution.json"), serde_json::to_string_pretty(&r)?)?;
                    ev.subsolution = Some(r);
                }
                Err(e) => ev.errors.push(StageError { stage: "subsolution".into(), message: e.to_string() }),
            }
        } else {
            ev.errors.push(StageError { stage: "subsolution".into(), message: "needs the loss profile".into() });
        }
    }

    if let Some(opts) = &s.analysis.n2_probe {
        match n2_probe(&base, &s.epsilons, opts, derive_seed(s.seed, N2_TAG)) {
            Ok(points) => {
                let mut w = csv::Writer::from_path(dir.join("n2_probe.csv"))?;
                for p in &points {
                    w.serialize(p)?;
                }
                w.flush()?;
                ev.n2 = points;
            }
            Err(e) => ev.errors.push(StageError { stage: "n2 probe".into(), message: e.to_string() }),
        }
    }
    Ok(ev)
}

/// Runs the scenario and writes `report.json` next to the raw data.
pub fn run_scenario(s: &Scenario) -> Result<Report> {
    let ev = gather(s)?;
    let report = assemble(s, &ev)?;
    fs::write(s.dir().join("report.json"), report.to_json()?)?;
    Ok(report)
}

fn write_replicates(path: &Path, reps: &[Replicate]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in reps {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn write_table(path: &Path, t: &VarianceTable) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for i in 0..t.levels.len() {
        w.serialize(TableRow { level: t.levels[i], p: t.p[i], varq: t.varq[i], mean_q: t.mean_q[i], states: t.states_used[i] })?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

pub fn read_profile(path: &Path) -> Result<Vec<ProfileRow>> {
    read_csv(path)
}

pub fn read_table(path: &Path) -> Result<VarianceTable> {
    let rows: Vec<TableRow> = read_csv(path)?;
    Ok(VarianceTable {
        levels: rows.iter().map(|r| r.level).collect(),
        p: rows.iter().map(|r| r.p).collect(),
        varq: rows.iter().map(|r| r.varq).collect(),
        mean_q: rows.iter().map(|r| r.mean_q).collect(),
        states_used: rows.iter().map(|r| r.states).collect(),
    })
}
