//! End-to-end checks of the `dfkd` binary: every subcommand, the exit-code
//! contract, and override plumbing, all on second-scale configurations.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dfkd_core::config::ExperimentConfig;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_dfkd")
}

fn dfkd(out_root: &Path, args: &[&str]) -> Output {
    Command::new(bin())
        .arg("--out")
        .arg(out_root)
        .args(args)
        .output()
        .expect("spawn dfkd")
}

fn stdout_json(out: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&out.stdout);
    serde_json::from_str(text.trim()).unwrap_or_else(|e| {
        panic!(
            "bad report {text:?}: {e}; stderr: {}",
            String::from_utf8_lossy(&out.stderr)
        )
    })
}

fn tiny_config(dir: &Path) -> PathBuf {
    let mut cfg = ExperimentConfig::desk();
    cfg.seed = 7;
    cfg.data.classes = 4;
    cfg.data.per_class = 30;
    cfg.data.spread = 0.06;
    cfg.teacher.epochs = 12;
    cfg.teacher.hidden = 16;
    cfg.generator.noise_dim = 8;
    cfg.distill.epochs = 4;
    cfg.distill.iters_per_epoch = 2;
    cfg.distill.student_steps = 2;
    cfg.distill.noise_batch = 16;
    cfg.distill.memory_batch = 8;
    cfg.replay.push_every = 2;
    cfg.replay.subset = 8;
    cfg.diagnostics.align_every = 3;
    let path = dir.join("tiny.toml");
    cfg.save(&path).unwrap();
    path
}

fn pretrain(root: &Path, cfg: &Path) -> String {
    let out = dfkd(
        root,
        &["pretrain-teacher", "--config", cfg.to_str().unwrap()],
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    stdout_json(&out)["ckpt"].as_str().unwrap().to_string()
}

#[test]
fn make_data_writes_a_loadable_idx_quartet() {
    let tmp = tempfile::tempdir().unwrap();
    let data_dir = tmp.path().join("data");
    let out = dfkd(
        tmp.path(),
        &[
            "make-data",
            "--data-dir",
            data_dir.to_str().unwrap(),
            "--classes",
            "3",
            "--per-class",
            "10",
            "--seed",
            "5",
        ],
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let report = stdout_json(&out);
    assert_eq!(report["classes"], 3);
    assert_eq!(
        report["train"].as_u64().unwrap() + report["test"].as_u64().unwrap(),
        30
    );

    let (train, test) = dfkd_core::data::load_idx_pair(&data_dir).unwrap();
    assert_eq!(train.len() + test.len(), 30);
    assert_eq!(train.num_classes, 3);
    assert_eq!(test.num_classes, 3);
}

#[test]
fn pipeline_pretrain_distill_analyze_round_trips() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let ckpt = pretrain(tmp.path(), &cfg);

    let out = dfkd(
        tmp.path(),
        &[
            "distill",
            "--config",
            cfg.to_str().unwrap(),
            "--teacher",
            &ckpt,
        ],
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let report = stdout_json(&out);
    let run_dir = report["run_dir"].as_str().unwrap();
    let best = report["best_acc"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&best));
    for f in [
        "run.jsonl",
        "diag.jsonl",
        "config.toml",
        "student.ckpt",
        "run_meta.json",
    ] {
        assert!(Path::new(run_dir).join(f).exists(), "missing {f}");
    }

    let out = dfkd(
        tmp.path(),
        &["analyze", "--run", run_dir, "--percentiles", "0,50"],
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let report = stdout_json(&out);
    assert_eq!(report["epochs"], 4);
    assert_eq!(report["acc_tail_stats"]["0"]["n"], 4);
    assert_eq!(report["acc_tail_stats"]["50"]["n"], 2);
    assert_eq!(report["acc_max"].as_f64().unwrap(), best);
    // align_every = 3 with 4 student steps per epoch guarantees rows.
    assert!(report["align_cos"]["rows"].as_u64().unwrap() > 0);
}

#[test]
fn identical_config_and_seed_reproduce_the_run_log() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let ckpt = pretrain(tmp.path(), &cfg);

    let mut logs = Vec::new();
    for _ in 0..2 {
        let out = dfkd(
            tmp.path(),
            &[
                "distill",
                "--config",
                cfg.to_str().unwrap(),
                "--teacher",
                &ckpt,
            ],
        );
        assert!(out.status.success());
        let dir = stdout_json(&out)["run_dir"].as_str().unwrap().to_string();
        logs.push(std::fs::read(Path::new(&dir).join("run.jsonl")).unwrap());
    }
    assert_eq!(logs[0], logs[1]);
}

#[test]
fn distill_flags_override_the_stored_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let ckpt = pretrain(tmp.path(), &cfg);

    let out = dfkd(
        tmp.path(),
        &[
            "distill",
            "--config",
            cfg.to_str().unwrap(),
            "--teacher",
            &ckpt,
            "--mode",
            "naive_replay",
            "--replay",
            "generative",
            "--alpha",
            "0.5",
        ],
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let run_dir = stdout_json(&out)["run_dir"].as_str().unwrap().to_string();
    let effective = ExperimentConfig::load(&Path::new(&run_dir).join("config.toml")).unwrap();
    assert_eq!(
        effective.student.mode,
        dfkd_core::meta::StudentUpdateMode::NaiveReplay
    );
    assert_eq!(
        effective.replay.scheme,
        dfkd_core::config::ReplayScheme::Generative
    );
    assert_eq!(effective.student.alpha, 0.5);
}

#[test]
fn exit_codes_distinguish_failure_classes() {
    let tmp = tempfile::tempdir().unwrap();

    // Unknown verify suite is a usage error.
    let out = dfkd(tmp.path(), &["verify", "--suite", "bogus"]);
    assert_eq!(
        out.status.code(),
        Some(2),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );

    // Zero tolerance makes the finite-difference checks fail as verification.
    let out = dfkd(
        tmp.path(),
        &["verify", "--suite", "hvp", "--tolerance-scale", "0"],
    );
    assert_eq!(out.status.code(), Some(1));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("[FAIL]"), "expected failing checks:\n{text}");

    // Analyzing a directory without a run log is a data error.
    let out = dfkd(
        tmp.path(),
        &["analyze", "--run", tmp.path().to_str().unwrap()],
    );
    assert_eq!(out.status.code(), Some(3));

    // Rejected config values are usage errors.
    let out = dfkd(
        tmp.path(),
        &[
            "make-data",
            "--data-dir",
            tmp.path().to_str().unwrap(),
            "--classes",
            "1",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn verify_all_reports_every_suite_and_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = dfkd(tmp.path(), &["verify", "--suite", "all"]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stdout)
    );
    let text = String::from_utf8_lossy(&out.stdout);
    for suite in ["losses", "hvp", "metagrad", "taylor"] {
        assert!(
            text.contains(&format!("{suite}.")),
            "no checks from {suite}:\n{text}"
        );
    }
    assert!(!text.contains("[FAIL]"));
}
