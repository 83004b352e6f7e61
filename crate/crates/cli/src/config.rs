use std::path::{Path, PathBuf};

use amsfw::fluctuation::{N2Options, TableOptions};
use amsfw::{catalog, Model, ModelSpec};
use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// One declarative experiment. Every tolerance used by a check lives here.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    /// Catalog entry; ignored when `spec` is given.
    #[serde(default)]
    pub model: Option<String>,
    #[serde(default)]
    pub spec: Option<ModelSpec>,
    /// Strictly decreasing.
    pub epsilons: Vec<f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    #[serde(default)]
    pub ams: Vec<AmsStage>,
    #[serde(default)]
    pub fms: Vec<FmsStage>,
    #[serde(default)]
    pub analysis: Analysis,
    #[serde(default)]
    pub checks: Checks,
    #[serde(default)]
    pub tolerances: Tolerances,
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct AmsStage {
    pub n: usize,
    #[serde(default = "one")]
    pub k: usize,
    pub replicates: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct FmsStage {
    pub n: usize,
    /// J equispaced levels on (ξ(x0), l_B].
    pub levels: usize,
    pub replicates: usize,
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct Analysis {
    /// Build Var_η(q) tables from genealogy and evaluate the variance formulas.
    pub variance_formula: bool,
    /// Interior analysis levels for the table.
    pub table_levels: usize,
    /// AMS runs (first AMS stage's N) used to collect first-hit states.
    pub table_runs: usize,
    pub table: TableOptions,
    pub loss_profile: bool,
    pub profile_intervals: usize,
    pub n2_probe: Option<N2Options>,
    pub subsolution: bool,
    pub subsolution_levels: usize,
}

impl Default for Analysis {
    fn default() -> Self {
        Analysis {
            variance_formula: false,
            table_levels: 15,
            table_runs: 4,
            table: TableOptions::default(),
            loss_profile: false,
            profile_intervals: 64,
            n2_probe: None,
            subsolution: false,
            subsolution_levels: 6,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct Checks {
    /// Replicate mean against the scale-function oracle (1D gradient models).
    pub unbiased: bool,
    /// N·Var against −p² ln p.
    pub ideal_variance: bool,
    /// N·Var against the genealogy-based variance formula.
    pub formula_match: bool,
    /// ε-slope of N·Var/p_ref² against sup Loss.
    pub loss_slope: bool,
    pub loss_properties: bool,
    /// Largest Loss allowed on every level (aligned importance function).
    pub loss_vanishes: bool,
    /// ε log P[I ≤ 1] against −inf(u + m).
    pub n2_limit: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct Tolerances {
    pub stderr_multiple: f64,
    pub ideal_rel: f64,
    pub formula_rel: f64,
    pub slope_rel: f64,
    pub loss_floor: f64,
    pub loss_endpoint: f64,
    pub decomposition: f64,
    pub loss_vanish: f64,
    pub n2_rel: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            stderr_multiple: 3.0,
            ideal_rel: 0.15,
            formula_rel: 0.20,
            slope_rel: 0.30,
            loss_floor: 1e-6,
            loss_endpoint: 1e-6,
            decomposition: 1e-9,
            loss_vanish: 1e-3,
            n2_rel: 0.20,
        }
    }
}

impl Scenario {
    pub fn load(path: &Path) -> Result<Scenario> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Scenario::parse(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Scenario> {
        let s: Scenario = toml::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.epsilons.is_empty() {
            bail!("epsilon list is empty");
        }
        if self.epsilons.windows(2).any(|w| !(w[1] < w[0])) {
            bail!("epsilon list must be strictly decreasing");
        }
        let wants_variance = self.checks.ideal_variance || self.checks.formula_match || self.checks.loss_slope;
        if wants_variance && self.ams.iter().any(|a| a.replicates < 2) {
            bail!("variance checks need at least two replicates");
        }
        if (self.checks.formula_match || self.analysis.variance_formula) && self.ams.is_empty() {
            bail!("the variance formula needs an AMS stage");
        }
        if self.checks.loss_slope && self.epsilons.len() < 3 {
            bail!("the slope check needs at least three epsilon values");
        }
        for a in &self.ams {
            if a.n < 2 || a.k == 0 || a.k >= a.n {
                bail!("AMS stage needs N >= 2 and 1 <= k < N");
            }
        }
        for f in &self.fms {
            if f.n < 2 || f.levels == 0 {
                bail!("FMS stage needs N >= 2 and J >= 1");
            }
        }
        self.base_model()?;
        Ok(())
    }

    pub fn base_model(&self) -> Result<Model> {
        match (&self.spec, &self.model) {
            (Some(spec), _) => Ok(Model::new(spec.clone())?),
            (None, Some(name)) => catalog::by_name(name).with_context(|| format!("unknown catalog model {name}")),
            (None, None) => bail!("scenario names neither a catalog model nor a spec"),
        }
    }

    /// SHA-256 of the canonical TOML serialization.
    pub fn hash(&self) -> String {
        let text = toml::to_string(self).expect("scenario serializes");
        let digest = Sha256::digest(text.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn dir(&self) -> PathBuf {
        self.output.join(&self.name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
name = "t"
model = "ou_1d"
epsilons = [0.3, 0.25]
[[ams]]
n = 16
replicates = 4
"#;

    #[test]
    fn parses_and_hashes_deterministically() {
        let s = Scenario::parse(MINIMAL).unwrap();
        assert_eq!(s.ams[0].k, 1);
        assert_eq!(s.hash(), Scenario::parse(MINIMAL).unwrap().hash());
        let mut t = s.clone();
        t.seed = 9;
        assert_ne!(s.hash(), t.hash());
    }

    #[test]
    fn round_trips_through_toml() {
        let s = Scenario::parse(MINIMAL).unwrap();
        let back = Scenario::parse(&toml::to_string(&s).unwrap()).unwrap();
        assert_eq!(s, back);
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(Scenario::parse(&MINIMAL.replace("[0.3, 0.25]", "[0.25, 0.3]")).is_err());
        assert!(Scenario::parse(&MINIMAL.replace("ou_1d", "nope")).is_err());
        assert!(Scenario::parse(&format!("{MINIMAL}\n[checks]\nideal_variance = true\n").replace("replicates = 4", "replicates = 1")).is_err());
        assert!(Scenario::parse(&format!("{MINIMAL}\nbogus = 1\n")).is_err());
    }

    #[test]
    fn every_catalog_spec_round_trips_as_a_scenario() {
        for m in catalog::catalog() {
            let s = Scenario {
                name: m.name().into(),
                model: None,
                spec: Some(m.spec().clone()),
                epsilons: vec![m.epsilon()],
                seed: 0,
                output: default_output(),
                ams: vec![],
                fms: vec![],
                analysis: Analysis::default(),
                checks: Checks::default(),
                tolerances: Tolerances::default(),
            };
            let back = Scenario::parse(&toml::to_string(&s).unwrap()).unwrap();
            assert_eq!(back.base_model().unwrap().spec(), m.spec());
        }
    }
}
