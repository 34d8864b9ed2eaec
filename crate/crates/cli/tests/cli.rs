//! Command-line behaviour: outputs, exit codes and reproducibility.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn covrep(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_covrep"))
        .args(args)
        .env_remove("COVREP_SEED")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn theory_ratio_prints_the_paper_value_and_verifies() {
    let dir = tempfile::tempdir().unwrap();
    let out = covrep(&["run", "theory_ratio", "--d", "500", "--s", "20", "--p", "0.001", "--out", path(dir.path()), "--verify"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(dir.path().join("theory.csv")).unwrap();
    let ratio: f64 = text.lines().nth(1).unwrap().rsplit(',').next().unwrap().parse().unwrap();
    assert!((ratio - 0.33).abs() <= 0.005, "ratio {ratio}");
    assert!(stdout(&out).contains("verified"));
}

#[test]
fn curves_run_writes_one_file_per_curve() {
    let dir = tempfile::tempdir().unwrap();
    let out = covrep(&["run", "rem_curves", "--d", "30", "--out", path(dir.path())]);
    assert_eq!(code(&out), 0);
    let file = dir.path().join("curve_r2_0.5_pa_0.01.csv");
    let lines = fs::read_to_string(file).unwrap().lines().count();
    assert_eq!(lines, 1 + 29);
    assert_eq!(code(&covrep(&["verify", path(dir.path())])), 0);
}

#[test]
fn usage_and_configuration_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = path(dir.path());
    for args in [
        vec!["run", "table3", "--out", out_dir],
        vec!["run", "table1", "--reps", "0", "--out", out_dir],
        vec!["run", "theory_ratio", "--set", "theory.bogus=1", "--out", out_dir],
        vec!["run", "theory_ratio", "--set", "no_equals_sign", "--out", out_dir],
        vec!["run", "theory_ratio", "--generator", "nn", "--out", out_dir],
        vec!["run", "theory_ratio", "--config", "/nonexistent/config.json", "--out", out_dir],
        vec!["frobnicate"],
    ] {
        let out = covrep(&args);
        assert_eq!(code(&out), 2, "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
    assert!(!dir.path().join("manifest.json").exists());
}

#[test]
fn a_protocol_mismatch_in_the_config_file_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"protocol": "table1"}"#).unwrap();
    let out = covrep(&["run", "theory_ratio", "--config", path(&cfg), "--out", path(&dir.path().join("o"))]);
    assert_eq!(code(&out), 2);
}

#[test]
fn failed_verification_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&covrep(&["run", "theory_ratio", "--out", path(dir.path())])), 0);
    let theory = dir.path().join("theory.csv");
    let text = fs::read_to_string(&theory).unwrap();
    fs::write(&theory, text.replace("0.3", "0.4")).unwrap();
    assert_eq!(code(&covrep(&["verify", path(dir.path())])), 1);
    assert_eq!(code(&covrep(&["verify", path(&dir.path().join("missing"))])), 1);
}

fn small_cate_config(dir: &Path) -> String {
    let cfg = dir.join("cate.json");
    fs::write(
        &cfg,
        r#"{
            "generator": {"d": 10, "r": 3, "k": 3, "n": 60, "n_target": 60},
            "meta": {"s": 3, "encoder_hidden": [6], "head_hidden": [4], "inner_shots": 8, "meta_iters": 15},
            "estimation": {"shots": {"shots": [20], "repeats": 2, "folds": 2}, "fit": {"steps": 30}, "n_eval": 50}
        }"#,
    )
    .unwrap();
    cfg.to_str().unwrap().to_string()
}

#[test]
fn runs_are_reproducible_and_seeds_come_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_cate_config(dir.path());
    let run = |name: &str, seed: Option<&str>, flag: Option<&str>| {
        let out_dir = dir.path().join(name);
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_covrep"));
        cmd.args(["run", "cate_fig", "--config", &cfg, "--out", path(&out_dir)]).env("RUST_LOG", "warn");
        if let Some(f) = flag {
            cmd.args(["--seed", f]);
        }
        match seed {
            Some(s) => cmd.env("COVREP_SEED", s),
            None => cmd.env_remove("COVREP_SEED"),
        };
        let out = cmd.output().unwrap();
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        fs::read(out_dir.join("rows.csv")).unwrap()
    };
    let a = run("a", None, Some("7"));
    let b = run("b", Some("7"), None);
    let c = run("c", None, Some("7"));
    let d = run("d", Some("8"), None);
    let e = run("e", Some("8"), Some("7"));
    assert_eq!(a, b, "COVREP_SEED should act as the seed");
    assert_eq!(a, c, "reruns should be byte-identical");
    assert_ne!(a, d, "different seeds should differ");
    assert_eq!(a, e, "--seed should take precedence over COVREP_SEED");
}

#[test]
fn generate_then_train_writes_loadable_models() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let out = covrep(&[
        "gen", "--generator", "linear", "--d", "8", "--r", "3", "--k", "3", "--n", "40", "--n-target", "30", "--seed", "3",
        "--out", path(&data),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let manifest = data.join("taskset.json");
    assert!(manifest.is_file());

    let meta = dir.path().join("meta.json");
    fs::write(&meta, r#"{"encoder_hidden": [6], "head_hidden": [4], "inner_shots": 8, "optimizer": "adam"}"#).unwrap();
    for (name, extra) in [("outcome.json", None), ("propensity.json", Some("--propensity"))] {
        let model = dir.path().join(name);
        let mut args = vec![
            "train", "--data", path(&manifest), "--config", path(&meta), "--s", "3", "--iters", "20",
            "--checkpoint-every", "10", "--out", path(&model),
        ];
        args.extend(extra);
        let out = covrep(&args);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        let loaded = covrep_core::metalearn::MetaModel::load(&model).unwrap();
        assert_eq!((loaded.input_dim(), loaded.s()), (8, 3));
        assert!(model.with_extension("checkpoint.json").is_file());
    }

    let padded = dir.path().join("padded");
    let out = covrep(&[
        "gen", "--d", "20", "--r", "3", "--k", "2", "--n", "20", "--n-target", "20", "--padded", "--observed-min", "5",
        "--observed-max", "10", "--out", path(&padded),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let (set, _) = covrep_core::datagen::io::read_taskset(&padded.join("taskset.json")).unwrap();
    assert!(set.tasks.iter().all(|t| t.d() == 20));
}

#[test]
fn training_on_missing_data_fails_at_runtime() {
    let dir = tempfile::tempdir().unwrap();
    let out = covrep(&["train", "--data", path(&dir.path().join("none.json")), "--out", path(&dir.path().join("m.json"))]);
    assert_eq!(code(&out), 1);
}
