use std::path::Path;

use anyhow::{Context, Result};
use serde::Deserialize;

use crate::config::Scenario;
use crate::experiment::{eps_dir, read_csv, read_profile, read_table, CellData, Evidence, Method, StageError};
use crate::report::{assemble, Check};

#[derive(Deserialize)]
struct Flag {
    name: String,
    pass: bool,
}

#[derive(Deserialize)]
struct Stored {
    scenario: Scenario,
    checks: Vec<Flag>,
    errors: Vec<StageError>,
}

#[derive(Debug)]
pub struct CheckOutcome {
    pub recomputed: Vec<Check>,
    /// Names whose stored and recomputed flags differ, or that exist on one side only.
    pub mismatches: Vec<String>,
}

impl CheckOutcome {
    pub fn agree(&self) -> bool {
        self.mismatches.is_empty()
    }

    pub fn passed(&self) -> bool {
        self.agree() && self.recomputed.iter().all(|c| c.pass)
    }
}

/// Reloads the raw CSVs next to `report.json` and recomputes every flag.
pub fn check_report(path: &Path) -> Result<CheckOutcome> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let stored: Stored = serde_json::from_str(&text).context("parsing report")?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let s = &stored.scenario;
    let mut ev = Evidence { errors: stored.errors.clone(), ..Default::default() };
    for &eps in &s.epsilons {
        let methods = s
            .ams
            .iter()
            .map(|a| (Method::Ams { k: a.k }, a.n))
            .chain(s.fms.iter().map(|f| (Method::Fms { levels: f.levels }, f.n)));
        for (method, n) in methods {
            let mut cell = CellData { epsilon: eps, method, n, replicates: vec![] };
            let file = dir.join(cell.file());
            if file.exists() {
                cell.replicates = read_csv(&file)?;
                ev.cells.push(cell);
            }
        }
        let table = dir.join(eps_dir(eps)).join("variance_table.csv");
        if table.exists() {
            ev.tables.push((eps, read_table(&table)?));
        }
    }
    let profile = dir.join("loss_profile.csv");
    if profile.exists() {
        ev.profile = Some(read_profile(&profile)?);
    }
    let n2 = dir.join("n2_probe.csv");
    if n2.exists() {
        ev.n2 = read_csv(&n2)?;
    }
    let report = assemble(s, &ev)?;
    let mut mismatches = Vec::new();
    for c in &report.checks {
        match stored.checks.iter().find(|f| f.name == c.name) {
            Some(f) if f.pass == c.pass => {}
            _ => mismatches.push(c.name.clone()),
        }
    }
    for f in &stored.checks {
        if !report.checks.iter().any(|c| c.name == f.name) {
            mismatches.push(f.name.clone());
        }
    }
    Ok(CheckOutcome { recomputed: report.checks, mismatches })
}
