//! Experiment configuration: per-protocol defaults, JSON overlays, command
//! line overrides and validation.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::datagen::{FillMode, GeneratorConfig, ObservedRange, PropensitySpec, RepKind};
use crate::design::DesignSettings;
use crate::error::{Error, Result};
use crate::estimators::{FitSettings, ShotExperiment};
use crate::metalearn::{HeadClass, MetaConfig};
use crate::numerics::OptimizerKind;

/// The experiments the harness knows how to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// Variance ratios of ReM on raw covariates and learned representations.
    Table1,
    /// The same with heterogeneous, padded covariate sets.
    Table2Padding,
    /// CATE mean squared error against the number of target samples.
    CateFig,
    /// DR ATE error in randomized experiments with a fixed treated share.
    AteFixedP,
    /// DR ATE error with covariate-dependent propensities.
    AtePropensity,
    /// Asymptotic percent variance reduction against covariate dimension.
    RemCurves,
    /// Asymptotic variance ratio between balancing `s` and `d` covariates.
    TheoryRatio,
}

impl Protocol {
    pub const ALL: [Protocol; 7] = [
        Protocol::Table1,
        Protocol::Table2Padding,
        Protocol::CateFig,
        Protocol::AteFixedP,
        Protocol::AtePropensity,
        Protocol::RemCurves,
        Protocol::TheoryRatio,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Protocol::Table1 => "table1",
            Protocol::Table2Padding => "table2_padding",
            Protocol::CateFig => "cate_fig",
            Protocol::AteFixedP => "ate_fixed_p",
            Protocol::AtePropensity => "ate_propensity",
            Protocol::RemCurves => "rem_curves",
            Protocol::TheoryRatio => "theory_ratio",
        }
    }

    pub fn is_table(self) -> bool {
        matches!(self, Protocol::Table1 | Protocol::Table2Padding)
    }

    pub fn is_shot_experiment(self) -> bool {
        matches!(self, Protocol::CateFig | Protocol::AteFixedP | Protocol::AtePropensity)
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Protocol::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown protocol '{s}'")))
    }
}

/// How the table protocols hide covariates from individual tasks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PaddingSettings {
    pub observed: ObservedRange,
    pub fill: FillMode,
}

impl Default for PaddingSettings {
    fn default() -> Self {
        Self { observed: ObservedRange::default(), fill: FillMode::Zero }
    }
}

/// Head fitting and evaluation for the CATE/ATE protocols.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimationSettings {
    pub shots: ShotExperiment,
    /// Target-task head fits; the raw-covariate baseline uses the same head
    /// architecture as the meta-learned model.
    pub fit: FitSettings,
    pub propensity_fit: FitSettings,
    /// Start the target propensity head from the meta-learned head instead
    /// of a fresh one. The meta head tends to saturate, which stalls the
    /// sigmoid fit at extreme probabilities.
    pub propensity_from_meta: bool,
    /// Fresh covariate draws on which CATE error is measured.
    pub n_eval: usize,
    /// Monte Carlo draws for the population ATE.
    pub oracle_draws: usize,
}

impl Default for EstimationSettings {
    fn default() -> Self {
        Self {
            shots: ShotExperiment::default(),
            fit: FitSettings::default(),
            propensity_fit: FitSettings::default(),
            propensity_from_meta: false,
            n_eval: 2000,
            oracle_draws: 100_000,
        }
    }
}

/// One asymptotic variance-reduction curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurveSpec {
    pub r2: f64,
    pub p_a: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CurveSettings {
    pub curves: Vec<CurveSpec>,
    pub dim_min: u32,
    pub dim_max: u32,
}

impl Default for CurveSettings {
    fn default() -> Self {
        Self {
            curves: vec![
                CurveSpec { r2: 0.5, p_a: 0.01 },
                CurveSpec { r2: 0.5, p_a: 0.001 },
                CurveSpec { r2: 0.2, p_a: 0.001 },
            ],
            dim_min: 2,
            dim_max: 100,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TheorySettings {
    pub d: u32,
    pub s: u32,
    pub p: f64,
}

impl Default for TheorySettings {
    fn default() -> Self {
        Self { d: 500, s: 20, p: 0.001 }
    }
}

/// Everything a protocol run depends on. Each protocol ignores the sections
/// it has no use for, but all sections are validated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub protocol: Protocol,
    pub seed: u64,
    pub out: PathBuf,
    pub generator: GeneratorConfig,
    /// Ground-truth families swept by the table protocols (one row each).
    pub generators: Vec<RepKind>,
    /// Independent seeds per table cell; replicate `i` runs with `seed + i`.
    pub replicates: usize,
    /// Representation dimensions forming the table columns.
    pub rep_dims: Vec<usize>,
    pub padding: PaddingSettings,
    pub meta: MetaConfig,
    pub design: DesignSettings,
    pub estimation: EstimationSettings,
    pub curves: CurveSettings,
    pub theory: TheorySettings,
    /// Meta-training checkpoint period in outer iterations; 0 disables.
    pub checkpoint_every: usize,
    /// Persist each trained model next to the results.
    pub save_models: bool,
}

pub const DEFAULT_SEED: u64 = 0;

impl ExperimentConfig {
    /// Defaults of a protocol, mirroring the simulation it reproduces.
    pub fn defaults(protocol: Protocol) -> Self {
        let mut generator = GeneratorConfig::default();
        let mut meta = MetaConfig { optimizer: OptimizerKind::Adam, ..MetaConfig::default() };
        let mut rep_dims = vec![50, 30];
        match protocol {
            Protocol::Table1 => meta.head_class = HeadClass::Linear,
            Protocol::Table2Padding => {
                meta.head_class = HeadClass::Linear;
                generator.d = 400;
                rep_dims = vec![80, 40];
            }
            Protocol::AteFixedP => {
                generator.k = 40;
                generator.propensity = PropensitySpec::UniformFixed { lo: 0.2, hi: 0.8 };
            }
            Protocol::AtePropensity => {
                generator.k = 40;
                generator.propensity = PropensitySpec::Neural;
            }
            Protocol::CateFig | Protocol::RemCurves | Protocol::TheoryRatio => {}
        }
        if protocol.is_table() {
            // A linear encoder: deep ReLU encoders under first-order MAML with a
            // linear head either diverge or memorise the historical tasks.
            meta.encoder_hidden = Vec::new();
            meta.inner_shots = 256;
            meta.inner_rate = 0.001;
            meta.meta_iters = 2000;
            if let Some(&s) = rep_dims.first() {
                meta.s = s;
            }
        } else if protocol.is_shot_experiment() {
            meta.meta_iters = 1000;
        }
        Self {
            protocol,
            seed: DEFAULT_SEED,
            out: PathBuf::from("results").join(protocol.name()),
            generator,
            generators: RepKind::ALL.to_vec(),
            replicates: 5,
            rep_dims,
            padding: PaddingSettings::default(),
            meta,
            design: DesignSettings::default(),
            estimation: EstimationSettings::default(),
            curves: CurveSettings::default(),
            theory: TheorySettings::default(),
            checkpoint_every: 500,
            save_models: true,
        }
    }

    /// Checks every section, whether or not the protocol uses it.
    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.meta.validate()?;
        self.design.validate()?;
        self.estimation.shots.validate()?;
        self.estimation.fit.validate()?;
        self.estimation.propensity_fit.validate()?;
        if self.generators.is_empty() {
            return Err(Error::Config("generators must list at least one ground-truth family".into()));
        }
        if self.replicates == 0 {
            return Err(Error::Config("replicates must be at least 1".into()));
        }
        if self.rep_dims.is_empty() || self.rep_dims.contains(&0) {
            return Err(Error::Config("rep_dims must be a non-empty list of positive dimensions".into()));
        }
        if self.protocol.is_table() && self.generator.n_target < 4 {
            return Err(Error::Config("table protocols need at least 4 target units".into()));
        }
        let obs = self.padding.observed;
        if self.protocol == Protocol::Table2Padding && (obs.min == 0 || obs.min > obs.max || obs.max > self.generator.d) {
            return Err(Error::Config(format!(
                "observed range [{}, {}] must lie within [1, {}]",
                obs.min, obs.max, self.generator.d
            )));
        }
        if self.estimation.n_eval == 0 || self.estimation.oracle_draws == 0 {
            return Err(Error::Config("n_eval and oracle_draws must be positive".into()));
        }
        let c = &self.curves;
        if c.curves.is_empty() || c.dim_min == 0 || c.dim_min > c.dim_max {
            return Err(Error::Config("curves need at least one spec and 1 ≤ dim_min ≤ dim_max".into()));
        }
        for spec in &c.curves {
            if !(0.0..=1.0).contains(&spec.r2) || !(spec.p_a > 0.0 && spec.p_a < 1.0) {
                return Err(Error::Config(format!("curve needs R² in [0, 1] and p_a in (0, 1), got {spec:?}")));
            }
        }
        let t = self.theory;
        if t.s == 0 || t.s > t.d || !(t.p > 0.0 && t.p < 1.0) {
            return Err(Error::Config(format!("theory needs 1 ≤ s ≤ d and p in (0, 1), got {t:?}")));
        }
        if self.out.as_os_str().is_empty() {
            return Err(Error::Config("output directory must not be empty".into()));
        }
        Ok(())
    }
}

/// Recursively overlays `patch` onto `base`; objects merge key by key,
/// everything else is replaced.
pub fn merge_json(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge_json(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Sets a dotted path (`design.reps`) inside a JSON object, creating
/// intermediate objects as needed.
pub fn set_path(root: &mut Value, path: &str, value: Value) -> Result<()> {
    let mut node = root;
    let parts: Vec<&str> = path.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed key '{path}'")));
    }
    for part in &parts[..parts.len() - 1] {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("'{path}' does not address an object")))?;
        node = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    let obj = node
        .as_object_mut()
        .ok_or_else(|| Error::Config(format!("'{path}' does not address an object")))?;
    obj.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Reads a command-line value: JSON if it parses, otherwise a bare string.
pub fn parse_value(text: &str) -> Value {
    serde_json::from_str(text).unwrap_or_else(|_| Value::String(text.to_string()))
}

/// A shorthand command-line flag.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shorthand {
    D,
    S,
    P,
    Reps,
    Generator,
}

/// Where a shorthand flag lands for a given protocol.
pub fn shorthand_override(protocol: Protocol, flag: Shorthand, text: &str) -> Result<(String, Value)> {
    let value = parse_value(text);
    let unsupported = || Error::Config(format!("flag --{} does not apply to protocol {protocol}", flag_name(flag)));
    let key = match (flag, protocol) {
        (Shorthand::D, Protocol::TheoryRatio) => "theory.d",
        (Shorthand::S, Protocol::TheoryRatio) => "theory.s",
        (Shorthand::P, Protocol::TheoryRatio) => "theory.p",
        (Shorthand::D, Protocol::RemCurves) => "curves.dim_max",
        (Shorthand::D, _) => "generator.d",
        (Shorthand::S, Protocol::Table1 | Protocol::Table2Padding) => {
            return Ok(("rep_dims".into(), Value::Array(vec![value])));
        }
        (Shorthand::S, _) => "meta.s",
        (Shorthand::P, Protocol::Table1 | Protocol::Table2Padding) => "design.p_a",
        (Shorthand::P, Protocol::AteFixedP | Protocol::CateFig) => {
            let mut spec = serde_json::json!({ "kind": "fixed" });
            spec["p"] = value;
            return Ok(("generator.propensity".into(), spec));
        }
        (Shorthand::P, _) => return Err(unsupported()),
        (Shorthand::Reps, Protocol::Table1 | Protocol::Table2Padding) => "design.reps",
        (Shorthand::Reps, p) if p.is_shot_experiment() => "estimation.shots.repeats",
        (Shorthand::Reps, _) => return Err(unsupported()),
        (Shorthand::Generator, Protocol::Table1 | Protocol::Table2Padding) => {
            return Ok(("generators".into(), Value::Array(vec![value])));
        }
        (Shorthand::Generator, p) if p.is_shot_experiment() => "generator.kind",
        (Shorthand::Generator, _) => return Err(unsupported()),
    };
    Ok((key.to_string(), value))
}

fn flag_name(flag: Shorthand) -> &'static str {
    match flag {
        Shorthand::D => "d",
        Shorthand::S => "s",
        Shorthand::P => "p",
        Shorthand::Reps => "reps",
        Shorthand::Generator => "generator",
    }
}

/// Sources a configuration is assembled from, lowest precedence first:
/// protocol defaults, `COVREP_SEED`-style fallback seed, config file,
/// explicit overrides.
#[derive(Debug, Clone, Default)]
pub struct ConfigSources {
    pub file: Option<PathBuf>,
    pub fallback_seed: Option<u64>,
    /// Dotted-path overrides applied in order.
    pub overrides: Vec<(String, Value)>,
}

/// Builds and validates the configuration of `protocol`.
pub fn load_config(protocol: Protocol, sources: &ConfigSources) -> Result<ExperimentConfig> {
    let mut doc = serde_json::to_value(ExperimentConfig::defaults(protocol))?;
    if let Some(seed) = sources.fallback_seed {
        doc["seed"] = Value::from(seed);
    }
    if let Some(path) = &sources.file {
        let patch = read_config_file(path)?;
        if let Some(named) = patch.get("protocol") {
            if named != &Value::String(protocol.name().into()) {
                return Err(Error::Config(format!("config file is for protocol {named}, not {protocol}")));
            }
        }
        merge_json(&mut doc, patch);
    }
    for (key, value) in &sources.overrides {
        set_path(&mut doc, key, value.clone())?;
    }
    let cfg: ExperimentConfig =
        serde_json::from_value(doc).map_err(|e| Error::Config(format!("invalid configuration: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

fn read_config_file(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    let value: Value =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("config {} is not JSON: {e}", path.display())))?;
    if !value.is_object() {
        return Err(Error::Config("config must be a JSON object".into()));
    }
    Ok(value)
}
