//! Batch experiment harness: configuration, protocol runners reproducing
//! the paper's tables and figures, and result manifests.

pub mod config;
pub mod run;

pub use config::{
    load_config, merge_json, parse_value, set_path, shorthand_override, ConfigSources, CurveSettings, CurveSpec,
    EstimationSettings, ExperimentConfig, PaddingSettings, Protocol, Shorthand, TheorySettings, DEFAULT_SEED,
};
pub use run::{
    curve_file, render_aggregate, render_table, replicate_seed, run, table_from_rows, verify, FileRole, Manifest,
    ResultFile, RunOutcome, TableRow, TheoryRow, VerifyReport, BASELINE_METHOD, MANIFEST_FILE, REPRESENTATION_METHOD,
};
