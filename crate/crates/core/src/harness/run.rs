//! Protocol runners, the run manifest and `--verify` recomputation.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::datagen::{gen_native_taskset, gen_taskset, oracle_effects, pad_taskset, GeneratorConfig, RepKind, TaskSet};
use crate::design::experiment::CurvePoint;
use crate::design::{
    percent_variance_reduction, read_design_rows, theoretical_ratio, variance_ratio_experiment, write_curve,
    write_design_rows, Covariates, DesignExperimentReport, DesignRow,
};
use crate::error::{Error, Result};
use crate::estimators::{
    aggregate_rows, ate_mse_experiment, cate_mse_experiment, read_ate_rows, write_ate_rows, AteAggregate, AteMethod,
    AteRow, CateMethod, FitMode, HeadSpec, PropensityMode,
};
use crate::harness::config::{CurveSpec, ExperimentConfig, Protocol};
use crate::metalearn::{
    maml_train_propensity_report, maml_train_subtasks, split_taskset, Checkpoint, MetaConfig, MetaModel, SubTask,
    TrainReport,
};
use crate::numerics::Rng;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_FORMAT: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FileRole {
    /// Per-replicate raw results.
    Rows,
    /// Aggregates recomputable from `Rows`.
    Aggregate,
    /// Table in the paper's layout, recomputable from `Rows`.
    Table,
    Curve,
    Theory,
    Model,
    Checkpoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultFile {
    pub role: FileRole,
    /// Relative to the output directory.
    pub path: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Versions {
    pub covrep: String,
    pub manifest_format: u32,
}

impl Default for Versions {
    fn default() -> Self {
        Self { covrep: env!("CARGO_PKG_VERSION").to_string(), manifest_format: MANIFEST_FORMAT }
    }
}

/// Index of a finished run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub protocol: Protocol,
    pub versions: Versions,
    pub config: ExperimentConfig,
    pub wall_time_secs: f64,
    pub files: Vec<ResultFile>,
}

impl Manifest {
    pub fn file(&self, role: FileRole) -> Option<&ResultFile> {
        self.files.iter().find(|f| f.role == role)
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub manifest: Manifest,
    pub manifest_path: PathBuf,
    /// Human-readable result lines.
    pub summary: Vec<String>,
}

/// Output directory bookkeeping shared by the protocol runners.
struct Ctx<'a> {
    cfg: &'a ExperimentConfig,
    out: PathBuf,
    files: Vec<ResultFile>,
}

impl Ctx<'_> {
    fn path(&mut self, role: FileRole, rel: &str) -> Result<PathBuf> {
        let path = self.out.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        if !self.files.iter().any(|f| f.path == rel) {
            self.files.push(ResultFile { role, path: rel.to_string() });
        }
        Ok(path)
    }

    /// Meta-trains on `subtasks` (or on treatment indicators when
    /// `propensity` is set), checkpointing into `checkpoints/<cell>.json`.
    fn train(&mut self, cell: &str, subtasks: &[SubTask], set: &TaskSet, meta: &MetaConfig, rng: &Rng, propensity: bool) -> Result<MetaModel> {
        let every = self.cfg.checkpoint_every;
        let cp_path = if every > 0 && every <= meta.meta_iters {
            Some(self.path(FileRole::Checkpoint, &format!("checkpoints/{cell}.json"))?)
        } else {
            None
        };
        let mut save = |it: usize, model: &MetaModel| -> Result<()> {
            if let Some(p) = &cp_path {
                log::info!("{cell}: checkpoint after {it} meta iterations");
                model.save(p)?;
            }
            Ok(())
        };
        let checkpoint = cp_path.as_ref().map(|_| Checkpoint { every, callback: &mut save });
        let report: TrainReport = if propensity {
            maml_train_propensity_report(set, meta, rng, checkpoint)?
        } else {
            maml_train_subtasks(subtasks, meta, rng, checkpoint)?
        };
        if let (Some(first), Some(last)) = (report.batch_losses.first(), report.batch_losses.last()) {
            log::info!("{cell}: batch loss {first:.4} -> {last:.4} over {} iterations", report.batch_losses.len());
        }
        if self.cfg.save_models {
            let path = self.path(FileRole::Model, &format!("models/{cell}.json"))?;
            report.model.save(&path)?;
        }
        Ok(report.model)
    }
}

/// Runs a validated configuration, writing results and `manifest.json`
/// into `cfg.out`.
pub fn run(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let start = Instant::now();
    fs::create_dir_all(&cfg.out)?;
    let mut ctx = Ctx { cfg, out: cfg.out.clone(), files: Vec::new() };
    log::info!("running {} with seed {} into {}", cfg.protocol, cfg.seed, cfg.out.display());
    let summary = match cfg.protocol {
        Protocol::TheoryRatio => run_theory(&mut ctx)?,
        Protocol::RemCurves => run_curves(&mut ctx)?,
        Protocol::Table1 | Protocol::Table2Padding => run_table(&mut ctx)?,
        Protocol::CateFig => run_cate(&mut ctx)?,
        Protocol::AteFixedP | Protocol::AtePropensity => run_ate(&mut ctx)?,
    };
    let manifest = Manifest {
        protocol: cfg.protocol,
        versions: Versions::default(),
        config: cfg.clone(),
        wall_time_secs: start.elapsed().as_secs_f64(),
        files: ctx.files,
    };
    let manifest_path = cfg.out.join(MANIFEST_FILE);
    fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(RunOutcome { manifest, manifest_path, summary })
}

/// One line of `theory.csv`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TheoryRow {
    pub d: u32,
    pub s: u32,
    pub p: f64,
    pub ratio: f64,
}

fn run_theory(ctx: &mut Ctx<'_>) -> Result<Vec<String>> {
    let t = ctx.cfg.theory;
    let row = TheoryRow { d: t.d, s: t.s, p: t.p, ratio: theoretical_ratio(t.d, t.s, t.p)? };
    let path = ctx.path(FileRole::Theory, "theory.csv")?;
    fs::write(path, render_csv(std::slice::from_ref(&row))?)?;
    Ok(vec![format!("theoretical variance ratio (d = {}, s = {}, p = {}): {:.6}", t.d, t.s, t.p, row.ratio)])
}

/// File name of one curve: `curve_r2_0.5_pa_0.01.csv`.
pub fn curve_file(spec: &CurveSpec) -> String {
    format!("curve_r2_{}_pa_{}.csv", spec.r2, spec.p_a)
}

fn curve_points(cfg: &ExperimentConfig, spec: &CurveSpec) -> Result<Vec<(u32, f64)>> {
    let dims: Vec<u32> = (cfg.curves.dim_min..=cfg.curves.dim_max).collect();
    percent_variance_reduction(spec.r2, spec.p_a, &dims)
}

fn run_curves(ctx: &mut Ctx<'_>) -> Result<Vec<String>> {
    let mut summary = Vec::new();
    for spec in ctx.cfg.curves.curves.clone() {
        let points = curve_points(ctx.cfg, &spec)?;
        let path = ctx.path(FileRole::Curve, &curve_file(&spec))?;
        write_curve(&points, &path)?;
        let (first, last) = (points[0], points[points.len() - 1]);
        summary.push(format!(
            "R² = {}, p_a = {}: {:.3}% at dim {} → {:.3}% at dim {}",
            spec.r2, spec.p_a, first.1, first.0, last.1, last.0
        ));
    }
    Ok(summary)
}

/// Seed of table replicate `i`.
pub fn replicate_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_add(i as u64)
}

/// Task set of one table cell: plain for Table 1, padded heterogeneous
/// covariates for Table 2.
fn table_taskset(cfg: &ExperimentConfig, kind: RepKind, rng: &Rng) -> Result<TaskSet> {
    let gen = GeneratorConfig { kind, ..cfg.generator.clone() };
    match cfg.protocol {
        Protocol::Table2Padding => {
            let (tasks, target) = gen_native_taskset(&gen, cfg.padding.observed, rng)?;
            pad_taskset(&tasks, &target, gen.d, cfg.padding.fill)
        }
        _ => gen_taskset(&gen, rng),
    }
}

fn design_row(kind: RepKind, mode: &str, cfg: &ExperimentConfig, seed: u64, r: &DesignExperimentReport) -> DesignRow {
    DesignRow {
        generator: kind.label().to_string(),
        covariates_mode: mode.to_string(),
        s: r.q,
        p_a: cfg.design.p_a,
        reps: r.reps,
        var_rem: r.var_rem,
        var_cr: r.var_cr,
        ratio: r.ratio,
        accept_rate: r.accept_rate,
        seed,
    }
}

fn run_table(ctx: &mut Ctx<'_>) -> Result<Vec<String>> {
    let cfg = ctx.cfg;
    let mut rows = Vec::new();
    for &kind in &cfg.generators {
        for i in 0..cfg.replicates {
            let seed = replicate_seed(cfg.seed, i);
            let root = Rng::root(seed).derive(&format!("{}/{}", cfg.protocol, kind.label()));
            let set = table_taskset(cfg, kind, &root.derive("gen"))?;
            let design_rng = root.derive("design");
            let raw = variance_ratio_experiment(&set.target, Covariates::Raw, &cfg.design, &design_rng)?;
            log::info!("{} seed {seed}: original ratio {:.4}", kind.label(), raw.ratio);
            rows.push(design_row(kind, "original", cfg, seed, &raw));
            let subtasks = split_taskset(&set);
            for &s in &cfg.rep_dims {
                let meta = MetaConfig { s, ..cfg.meta.clone() };
                let cell = format!("{}_s{s}_seed{seed}", kind.label());
                let model = ctx.train(&cell, &subtasks, &set, &meta, &root.derive(&format!("meta/s{s}")), false)?;
                let rep = variance_ratio_experiment(&set.target, Covariates::Representation(&model), &cfg.design, &design_rng)?;
                log::info!("{} seed {seed}: s = {s} ratio {:.4}", kind.label(), rep.ratio);
                rows.push(design_row(kind, "representation", cfg, seed, &rep));
            }
        }
    }
    let rows_path = ctx.path(FileRole::Rows, "rows.csv")?;
    write_design_rows(&rows, &rows_path)?;
    let table = table_from_rows(&rows, &cfg.generators, &cfg.rep_dims);
    let table_path = ctx.path(FileRole::Table, "table.csv")?;
    fs::write(table_path, render_table(&table, &cfg.rep_dims)?)?;
    Ok(table
        .iter()
        .map(|t| {
            let reps: Vec<String> = t.representation.iter().map(|r| format!("{r:.4}")).collect();
            format!("{}: original {:.4}, representation [{}]", t.generator, t.original, reps.join(", "))
        })
        .collect())
}

/// One table row: mean ratios over replicates for each covariate mode.
#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub generator: String,
    pub original: f64,
    /// One entry per representation dimension, in column order.
    pub representation: Vec<f64>,
    pub seeds: usize,
    pub reps: usize,
}

/// Averages design rows into the table layout. Representation rows are
/// matched to columns by their dimension.
pub fn table_from_rows(rows: &[DesignRow], generators: &[RepKind], rep_dims: &[usize]) -> Vec<TableRow> {
    let mean = |it: Vec<f64>| if it.is_empty() { f64::NAN } else { it.iter().sum::<f64>() / it.len() as f64 };
    generators
        .iter()
        .map(|kind| {
            let mine: Vec<&DesignRow> = rows.iter().filter(|r| r.generator == kind.label()).collect();
            let original: Vec<f64> = mine.iter().filter(|r| r.covariates_mode == "original").map(|r| r.ratio).collect();
            let seeds = original.len();
            let representation = rep_dims
                .iter()
                .map(|&s| {
                    mean(mine
                        .iter()
                        .filter(|r| r.covariates_mode == "representation" && r.s == s)
                        .map(|r| r.ratio)
                        .collect())
                })
                .collect();
            TableRow {
                generator: kind.label().to_string(),
                original: mean(original),
                representation,
                seeds,
                reps: mine.first().map_or(0, |r| r.reps),
            }
        })
        .collect()
}

/// `generator,original,s50,s30,seeds,reps`.
pub fn render_table(table: &[TableRow], rep_dims: &[usize]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["generator".to_string(), "original".to_string()];
    header.extend(rep_dims.iter().map(|s| format!("s{s}")));
    header.extend(["seeds".to_string(), "reps".to_string()]);
    w.write_record(&header)?;
    for row in table {
        let mut record = vec![row.generator.clone(), row.original.to_string()];
        record.extend(row.representation.iter().map(|v| v.to_string()));
        record.extend([row.seeds.to_string(), row.reps.to_string()]);
        w.write_record(&record)?;
    }
    into_string(w)
}

fn render_csv<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row)?;
    }
    into_string(w)
}

fn into_string(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    String::from_utf8(bytes).map_err(|e| Error::Schema(e.to_string()))
}

/// Renders aggregates exactly as they are written to `aggregate.csv`.
pub fn render_aggregate(rows: &[AteAggregate]) -> Result<String> {
    render_csv(rows)
}

fn shot_summary(aggs: &[AteAggregate]) -> Vec<String> {
    aggs.iter()
        .map(|a| format!("{} {:>5} shots: MSE {:.6} ± {:.6}", a.method, a.shots, a.mse, a.ci95_halfwidth))
        .collect()
}

fn write_shot_results(ctx: &mut Ctx<'_>, rows: &[AteRow]) -> Result<Vec<String>> {
    let rows_path = ctx.path(FileRole::Rows, "rows.csv")?;
    write_ate_rows(rows, &rows_path)?;
    let aggs = aggregate_rows(rows);
    let agg_path = ctx.path(FileRole::Aggregate, "aggregate.csv")?;
    fs::write(agg_path, render_aggregate(&aggs)?)?;
    Ok(shot_summary(&aggs))
}

/// Method names used in the shot-count result files.
pub const REPRESENTATION_METHOD: &str = "representation";
pub const BASELINE_METHOD: &str = "baseline";

fn run_cate(ctx: &mut Ctx<'_>) -> Result<Vec<String>> {
    let cfg = ctx.cfg;
    let root = Rng::root(cfg.seed).derive(cfg.protocol.name());
    let set = gen_taskset(&cfg.generator, &root.derive("gen"))?;
    let subtasks = split_taskset(&set);
    let model = ctx.train("outcome", &subtasks, &set, &cfg.meta, &root.derive("meta"), false)?;
    let truth = set.target.truth.clone().ok_or_else(|| Error::Unsupported("target task has no ground truth".into()))?;
    let est = &cfg.estimation;
    let spec = |mode| HeadSpec { class: cfg.meta.head_class, hidden: cfg.meta.head_hidden.clone(), mode, settings: est.fit };
    let methods = [
        CateMethod { name: REPRESENTATION_METHOD.into(), encoder: Some(&model.encoder), spec: spec(FitMode::FromMeta(&model.head)) },
        CateMethod { name: BASELINE_METHOD.into(), encoder: None, spec: spec(FitMode::FromScratch) },
    ];
    let rows = cate_mse_experiment("cate", &truth, &methods, &est.shots, est.n_eval, cfg.seed, &root.derive("estimate"))?;
    write_shot_results(ctx, &rows)
}

fn run_ate(ctx: &mut Ctx<'_>) -> Result<Vec<String>> {
    let cfg = ctx.cfg;
    let root = Rng::root(cfg.seed).derive(cfg.protocol.name());
    let set = gen_taskset(&cfg.generator, &root.derive("gen"))?;
    let subtasks = split_taskset(&set);
    let model = ctx.train("outcome", &subtasks, &set, &cfg.meta, &root.derive("meta"), false)?;
    let observational = cfg.protocol == Protocol::AtePropensity;
    let prop_model = if observational {
        Some(ctx.train("propensity", &subtasks, &set, &cfg.meta, &root.derive("meta/propensity"), true)?)
    } else {
        None
    };
    let est = &cfg.estimation;
    let oracle = oracle_effects(&set.target, est.oracle_draws, &root.derive("oracle"))?;
    let spec = |mode| HeadSpec { class: cfg.meta.head_class, hidden: cfg.meta.head_hidden.clone(), mode, settings: est.fit };
    let (rep_prop, base_prop) = match &prop_model {
        Some(pm) => (
            PropensityMode::Learned { model: pm, settings: est.propensity_fit, from_meta: est.propensity_from_meta },
            PropensityMode::Direct { class: cfg.meta.head_class, hidden: &cfg.meta.head_hidden, settings: est.propensity_fit },
        ),
        None => (PropensityMode::Empirical, PropensityMode::Empirical),
    };
    let methods = [
        AteMethod {
            name: REPRESENTATION_METHOD.into(),
            encoder: Some(&model.encoder),
            spec: spec(FitMode::FromMeta(&model.head)),
            propensity: rep_prop,
        },
        AteMethod { name: BASELINE_METHOD.into(), encoder: None, spec: spec(FitMode::FromScratch), propensity: base_prop },
    ];
    let label = if observational { "neural_propensity" } else { "fixed_p" };
    let rows = ate_mse_experiment(label, &oracle.truth, oracle.population_ate, &methods, &est.shots, cfg.seed, &root.derive("estimate"))?;
    let mut summary = vec![format!("population ATE {:.6}", oracle.population_ate)];
    summary.extend(write_shot_results(ctx, &rows)?);
    Ok(summary)
}

/// What `verify` checked.
#[derive(Debug, Clone, PartialEq)]
pub struct VerifyReport {
    pub files_checked: usize,
    pub recomputed: Vec<String>,
}

fn mismatch(what: &str) -> Error {
    Error::Estimation(format!("verification failed: {what} does not match its recomputation"))
}

/// Re-reads a finished run: every manifest entry must exist, and aggregates,
/// tables and formula outputs must equal their recomputation from the raw
/// rows and the echoed configuration, byte for byte.
pub fn verify(out_dir: &Path) -> Result<VerifyReport> {
    let text = fs::read_to_string(out_dir.join(MANIFEST_FILE))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    for f in &manifest.files {
        if !out_dir.join(&f.path).is_file() {
            return Err(Error::Schema(format!("manifest lists missing file {}", f.path)));
        }
    }
    let cfg = &manifest.config;
    let read = |role: FileRole| -> Result<(String, PathBuf)> {
        let f = manifest
            .file(role)
            .ok_or_else(|| Error::Schema(format!("manifest has no {role:?} file")))?;
        let path = out_dir.join(&f.path);
        Ok((fs::read_to_string(&path)?, path))
    };
    let mut recomputed = Vec::new();
    match manifest.protocol {
        Protocol::TheoryRatio => {
            let t = cfg.theory;
            let row = TheoryRow { d: t.d, s: t.s, p: t.p, ratio: theoretical_ratio(t.d, t.s, t.p)? };
            if read(FileRole::Theory)?.0 != render_csv(&[row])? {
                return Err(mismatch("theory.csv"));
            }
            recomputed.push("theory.csv".into());
        }
        Protocol::RemCurves => {
            for spec in &cfg.curves.curves {
                let name = curve_file(spec);
                let f = manifest.files.iter().find(|f| f.path == name).ok_or_else(|| Error::Schema(format!("{name} missing")))?;
                let points: Vec<CurvePoint> = curve_points(cfg, spec)?
                    .into_iter()
                    .map(|(dim, percent_reduction)| CurvePoint { dim, percent_reduction })
                    .collect();
                if fs::read_to_string(out_dir.join(&f.path))? != render_csv(&points)? {
                    return Err(mismatch(&name));
                }
                recomputed.push(name);
            }
        }
        Protocol::Table1 | Protocol::Table2Padding => {
            let (_, rows_path) = read(FileRole::Rows)?;
            let rows = read_design_rows(&rows_path)?;
            let table = table_from_rows(&rows, &cfg.generators, &cfg.rep_dims);
            if read(FileRole::Table)?.0 != render_table(&table, &cfg.rep_dims)? {
                return Err(mismatch("table.csv"));
            }
            recomputed.push("table.csv".into());
        }
        Protocol::CateFig | Protocol::AteFixedP | Protocol::AtePropensity => {
            let (_, rows_path) = read(FileRole::Rows)?;
            let rows = read_ate_rows(&rows_path)?;
            if read(FileRole::Aggregate)?.0 != render_aggregate(&aggregate_rows(&rows))? {
                return Err(mismatch("aggregate.csv"));
            }
            recomputed.push("aggregate.csv".into());
        }
    }
    Ok(VerifyReport { files_checked: manifest.files.len(), recomputed })
}
