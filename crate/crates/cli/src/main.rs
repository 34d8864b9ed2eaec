//! `covrep`: run paper protocols, generate task sets and train meta-models
//! from the command line.
//!
//! Exit status is 0 on success, 2 for usage or configuration errors and 1
//! for failures while running.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use covrep_core::datagen::io::{read_taskset, write_taskset};
use covrep_core::datagen::{gen_native_taskset, gen_taskset, pad_taskset, FillMode, GeneratorConfig, ObservedRange, RepKind};
use covrep_core::harness::{self, ConfigSources, Protocol, Shorthand};
use covrep_core::metalearn::{maml_train_propensity_report, maml_train_subtasks, split_taskset, Checkpoint, MetaConfig, MetaModel};
use covrep_core::numerics::Rng;
use covrep_core::Error;

const SEED_ENV: &str = "COVREP_SEED";

#[derive(Parser, Debug)]
#[command(name = "covrep", version, about = "Meta-learned covariate representations for experimental design")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run a protocol and write its results and manifest.
    Run(RunArgs),
    /// Recompute aggregates of a finished run and compare them to its files.
    Verify {
        /// Output directory of the run.
        dir: PathBuf,
    },
    /// Simulate a task set and write it as CSV files plus a JSON manifest.
    Gen(GenArgs),
    /// Meta-train a model on a generated task set and write it as JSON.
    Train(TrainArgs),
}

#[derive(Args, Debug)]
struct RunArgs {
    /// One of table1, table2_padding, cate_fig, ate_fixed_p, ate_propensity,
    /// rem_curves, theory_ratio.
    protocol: String,
    /// JSON configuration overlaid on the protocol defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Root seed (falls back to the config file, then COVREP_SEED).
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// After running, recompute aggregates from the raw rows and compare.
    #[arg(long)]
    verify: bool,
    /// Covariate dimension (theory_ratio: d of the ratio).
    #[arg(long)]
    d: Option<String>,
    /// Representation dimension.
    #[arg(long)]
    s: Option<String>,
    /// Acceptance or treatment probability, depending on the protocol.
    #[arg(long)]
    p: Option<String>,
    /// Monte Carlo randomizations (tables) or repeats (shot experiments).
    #[arg(long)]
    reps: Option<String>,
    /// Ground-truth representation family.
    #[arg(long)]
    generator: Option<String>,
    /// Arbitrary override `dotted.key=value`, value parsed as JSON when possible.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args, Debug)]
struct GenArgs {
    /// JSON generator settings overlaid on the defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    generator: Option<RepKind>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    r: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    n_target: Option<usize>,
    /// Let each task observe a random subset of `--observed-min..=--observed-max`
    /// of the `d` features, padded back to `d`.
    #[arg(long)]
    padded: bool,
    #[arg(long, default_value_t = 100)]
    observed_min: usize,
    #[arg(long, default_value_t = 300)]
    observed_max: usize,
    #[arg(long)]
    feature_mean_fill: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// `taskset.json` written by `covrep gen`.
    #[arg(long)]
    data: PathBuf,
    /// JSON meta-training settings overlaid on the defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    s: Option<usize>,
    #[arg(long)]
    iters: Option<usize>,
    /// Learn a propensity representation from treatment indicators.
    #[arg(long)]
    propensity: bool,
    #[arg(long, default_value_t = 500)]
    checkpoint_every: usize,
    #[arg(long)]
    seed: Option<u64>,
    /// Model JSON to write.
    #[arg(long)]
    out: PathBuf,
}

/// A failure together with its exit status.
struct Failure {
    code: u8,
    error: Error,
}

fn usage(error: Error) -> Failure {
    Failure { code: 2, error }
}

fn runtime(error: Error) -> Failure {
    let code = if matches!(error, Error::Config(_)) { 2 } else { 1 };
    Failure { code, error }
}

fn env_seed() -> Result<Option<u64>, Failure> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| usage(Error::Config(format!("{SEED_ENV} must be an unsigned integer, got '{v}'")))),
        Err(_) => Ok(None),
    }
}

fn seed_or_env(flag: Option<u64>) -> Result<u64, Failure> {
    Ok(flag.or(env_seed()?).unwrap_or(harness::DEFAULT_SEED))
}

fn cmd_run(args: RunArgs) -> Result<(), Failure> {
    let protocol: Protocol = args.protocol.parse().map_err(usage)?;
    let mut sources = ConfigSources { file: args.config.clone(), fallback_seed: env_seed()?, overrides: Vec::new() };
    let shorthands = [
        (Shorthand::D, &args.d),
        (Shorthand::S, &args.s),
        (Shorthand::P, &args.p),
        (Shorthand::Reps, &args.reps),
        (Shorthand::Generator, &args.generator),
    ];
    for (flag, value) in shorthands {
        if let Some(v) = value {
            sources.overrides.push(harness::shorthand_override(protocol, flag, v).map_err(usage)?);
        }
    }
    for item in &args.set {
        let (key, value) = item
            .split_once('=')
            .ok_or_else(|| usage(Error::Config(format!("--set expects KEY=VALUE, got '{item}'"))))?;
        sources.overrides.push((key.to_string(), harness::parse_value(value)));
    }
    if let Some(seed) = args.seed {
        sources.overrides.push(("seed".into(), seed.into()));
    }
    if let Some(out) = &args.out {
        sources.overrides.push(("out".into(), out.to_string_lossy().into_owned().into()));
    }
    let cfg = harness::load_config(protocol, &sources).map_err(usage)?;
    let outcome = harness::run(&cfg).map_err(runtime)?;
    for line in &outcome.summary {
        println!("{line}");
    }
    println!("manifest: {}", outcome.manifest_path.display());
    if args.verify {
        verify_dir(&cfg.out)?;
    }
    Ok(())
}

fn verify_dir(dir: &Path) -> Result<(), Failure> {
    let report = harness::verify(dir).map_err(|e| Failure { code: 1, error: e })?;
    println!("verified {} files; recomputed {}", report.files_checked, report.recomputed.join(", "));
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned + serde::Serialize>(path: Option<&Path>, base: T) -> Result<T, Failure> {
    let Some(path) = path else { return Ok(base) };
    let text = std::fs::read_to_string(path)
        .map_err(|e| usage(Error::Config(format!("cannot read {}: {e}", path.display()))))?;
    let patch: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| usage(Error::Config(format!("{} is not JSON: {e}", path.display()))))?;
    let mut doc = serde_json::to_value(base).map_err(|e| runtime(e.into()))?;
    harness::merge_json(&mut doc, patch);
    serde_json::from_value(doc).map_err(|e| usage(Error::Config(format!("invalid settings in {}: {e}", path.display()))))
}

fn cmd_gen(args: GenArgs) -> Result<(), Failure> {
    let mut cfg: GeneratorConfig = read_json(args.config.as_deref(), GeneratorConfig::default())?;
    if let Some(kind) = args.generator {
        cfg.kind = kind;
    }
    for (slot, value) in [
        (&mut cfg.d, args.d),
        (&mut cfg.r, args.r),
        (&mut cfg.k, args.k),
        (&mut cfg.n, args.n),
        (&mut cfg.n_target, args.n_target),
    ] {
        if let Some(v) = value {
            *slot = v;
        }
    }
    cfg.validate().map_err(usage)?;
    let seed = seed_or_env(args.seed)?;
    let rng = Rng::root(seed).derive("gen");
    let set = if args.padded {
        let observed = ObservedRange { min: args.observed_min, max: args.observed_max };
        let fill = if args.feature_mean_fill { FillMode::FeatureMean } else { FillMode::Zero };
        let (tasks, target) = gen_native_taskset(&cfg, observed, &rng).map_err(runtime)?;
        pad_taskset(&tasks, &target, cfg.d, fill).map_err(runtime)?
    } else {
        gen_taskset(&cfg, &rng).map_err(runtime)?
    };
    let manifest = write_taskset(&set, &args.out, cfg.kind.label(), seed).map_err(runtime)?;
    println!("wrote {} tasks and a target task: {}", set.tasks.len(), manifest.display());
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<(), Failure> {
    let mut cfg: MetaConfig = read_json(args.config.as_deref(), MetaConfig::default())?;
    if let Some(s) = args.s {
        cfg.s = s;
    }
    if let Some(iters) = args.iters {
        cfg.meta_iters = iters;
    }
    cfg.validate().map_err(usage)?;
    let seed = seed_or_env(args.seed)?;
    let (set, _) = read_taskset(&args.data).map_err(runtime)?;
    let rng = Rng::root(seed).derive("meta");
    let cp_path = args.out.with_extension("checkpoint.json");
    let mut save = |it: usize, model: &MetaModel| {
        log::info!("checkpoint after {it} meta iterations");
        model.save(&cp_path)
    };
    let checkpoint = (args.checkpoint_every > 0).then(|| Checkpoint { every: args.checkpoint_every, callback: &mut save });
    let report = if args.propensity {
        maml_train_propensity_report(&set, &cfg, &rng, checkpoint)
    } else {
        maml_train_subtasks(&split_taskset(&set), &cfg, &rng, checkpoint)
    }
    .map_err(runtime)?;
    report.model.save(&args.out).map_err(runtime)?;
    if let (Some(first), Some(last)) = (report.batch_losses.first(), report.batch_losses.last()) {
        println!("batch loss {first:.4} -> {last:.4}");
    }
    println!("model: {}", args.out.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Verify { dir } => verify_dir(&dir),
        Command::Gen(args) => cmd_gen(args),
        Command::Train(args) => cmd_train(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure { code, error }) => {
            eprintln!("error: {error}");
            ExitCode::from(code)
        }
    }
}
