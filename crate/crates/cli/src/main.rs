//! `dfkd`: train a teacher, distill a student from it without the training
//! data, inspect run logs, and verify the numerical kernels.
//!
//! Exit codes: 0 success, 1 numerical or verification failure, 2 bad
//! configuration or usage, 3 unreadable or inconsistent data.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use dfkd_core::config::{ExperimentConfig, ReplayScheme};
use dfkd_core::meta::StudentUpdateMode;
use dfkd_core::{data, engine, metrics, verify, Error, Result};

const OUT_ENV: &str = "DFKD_OUT";

#[derive(Parser)]
#[command(name = "dfkd", version, about, max_term_width = 100)]
struct Cli {
    /// Root directory for run outputs. Falls back to $DFKD_OUT, then "runs".
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic labeled dataset as an IDX quartet.
    MakeData(MakeDataArgs),
    /// Train a teacher with plain supervision and checkpoint it.
    PretrainTeacher(ConfigArgs),
    /// Distill a student from a teacher checkpoint, no training data needed.
    Distill(DistillArgs),
    /// Summarize the accuracy and alignment series of a finished run.
    Analyze(AnalyzeArgs),
    /// Check the gradients, Hessian products and expansions against
    /// independently derived ground truths.
    Verify(VerifyArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// Small problem sizes that finish on a desk machine.
    Desk,
    /// The full-size schedule; expect long runtimes.
    Paper,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML experiment configuration; omit to use the preset.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "desk")]
    preset: Preset,
    /// Overrides the configured RNG seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the configured dataset directory.
    #[arg(long)]
    data_dir: Option<PathBuf>,
}

#[derive(Args)]
struct DistillArgs {
    #[command(flatten)]
    base: ConfigArgs,
    /// Teacher checkpoint produced by pretrain-teacher.
    #[arg(long)]
    teacher: PathBuf,
    /// Student update rule: meta, naive_replay or no_replay.
    #[arg(long)]
    mode: Option<String>,
    /// Replay source: none, memory_bank or generative.
    #[arg(long)]
    replay: Option<String>,
    /// Inner step length for the meta update.
    #[arg(long)]
    alpha: Option<f64>,
}

#[derive(Args)]
struct MakeDataArgs {
    /// Directory receiving the four IDX files.
    #[arg(long)]
    data_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 8)]
    classes: usize,
    #[arg(long, default_value_t = 250)]
    per_class: usize,
    #[arg(long, default_value_t = 0.08)]
    spread: f64,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Run directory containing run.jsonl.
    #[arg(long)]
    run: PathBuf,
    /// Comma-separated percentile starts for tail statistics.
    #[arg(long, default_value = "60")]
    percentiles: String,
}

#[derive(Args)]
struct VerifyArgs {
    /// Suite to run: losses, hvp, metagrad, taylor, or all.
    #[arg(long, default_value = "all")]
    suite: String,
    /// Multiplies every tolerance; 1.0 is the shipped gate.
    #[arg(long, default_value_t = 1.0)]
    tolerance_scale: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        let code = match e {
            Error::Config(_) => 2,
            Error::Data(_) => 3,
            _ => 1,
        };
        std::process::exit(code);
    }
}

fn out_root(cli_out: Option<PathBuf>) -> PathBuf {
    cli_out
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn load_config(args: &ConfigArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => match args.preset {
            Preset::Desk => ExperimentConfig::desk(),
            Preset::Paper => ExperimentConfig::paper_scale(),
        },
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = &args.data_dir {
        cfg.data.dir = Some(dir.clone());
    }
    Ok(cfg)
}

fn parse_mode(s: &str) -> Result<StudentUpdateMode> {
    match s {
        "meta" => Ok(StudentUpdateMode::Meta),
        "naive_replay" => Ok(StudentUpdateMode::NaiveReplay),
        "no_replay" => Ok(StudentUpdateMode::NoReplay),
        other => Err(Error::Config(format!(
            "unknown student mode {other:?}; expected meta, naive_replay or no_replay"
        ))),
    }
}

fn parse_replay(s: &str) -> Result<ReplayScheme> {
    match s {
        "none" => Ok(ReplayScheme::None),
        "memory_bank" => Ok(ReplayScheme::MemoryBank),
        "generative" => Ok(ReplayScheme::Generative),
        other => Err(Error::Config(format!(
            "unknown replay scheme {other:?}; expected none, memory_bank or generative"
        ))),
    }
}

fn run(cli: Cli) -> Result<()> {
    let out = out_root(cli.out);
    match cli.cmd {
        Cmd::MakeData(a) => make_data(&a),
        Cmd::PretrainTeacher(a) => {
            let cfg = load_config(&a)?;
            let report = engine::pretrain_teacher(&cfg, &out)?;
            println!(
                "{}",
                serde_json::json!({
                    "run_dir": report.run_dir,
                    "ckpt": report.ckpt,
                    "test_acc": report.test_acc,
                })
            );
            Ok(())
        }
        Cmd::Distill(a) => {
            let mut cfg = load_config(&a.base)?;
            if let Some(mode) = &a.mode {
                cfg.student.mode = parse_mode(mode)?;
            }
            if let Some(replay) = &a.replay {
                cfg.replay.scheme = parse_replay(replay)?;
            }
            if let Some(alpha) = a.alpha {
                cfg.student.alpha = alpha;
            }
            let report = engine::run_distillation(&cfg, &a.teacher, &out)?;
            println!(
                "{}",
                serde_json::json!({
                    "run_dir": report.run_dir,
                    "best_acc": report.best_acc,
                    "final_acc": report.final_acc,
                    "counters": report.counters,
                })
            );
            Ok(())
        }
        Cmd::Analyze(a) => analyze(&a),
        Cmd::Verify(a) => run_verify(&a),
    }
}

fn make_data(a: &MakeDataArgs) -> Result<()> {
    if a.classes < 2 {
        return Err(Error::Config("need at least 2 classes".into()));
    }
    if a.per_class == 0 {
        return Err(Error::Config("need at least 1 sample per class".into()));
    }
    if !(a.spread.is_finite() && a.spread > 0.0) {
        return Err(Error::Config(format!(
            "spread must be positive and finite, got {}",
            a.spread
        )));
    }
    let (train, test) = data::make_synthetic_dataset(a.seed, a.classes, a.per_class, a.spread);
    std::fs::create_dir_all(&a.data_dir)?;
    data::write_idx_images(&a.data_dir.join(data::TRAIN_IMAGES), &train.images)?;
    data::write_idx_labels(&a.data_dir.join(data::TRAIN_LABELS), &train.labels)?;
    data::write_idx_images(&a.data_dir.join(data::TEST_IMAGES), &test.images)?;
    data::write_idx_labels(&a.data_dir.join(data::TEST_LABELS), &test.labels)?;
    println!(
        "{}",
        serde_json::json!({
            "data_dir": a.data_dir,
            "train": train.len(),
            "test": test.len(),
            "classes": train.num_classes,
        })
    );
    Ok(())
}

fn read_run_log(run: &Path) -> Result<Vec<serde_json::Value>> {
    let path = run.join(engine::RUN_LOG);
    let text = std::fs::read_to_string(&path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let row: serde_json::Value = serde_json::from_str(line)
            .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), i + 1)))?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Data(format!("{} holds no epochs", path.display())));
    }
    Ok(rows)
}

fn analyze(a: &AnalyzeArgs) -> Result<()> {
    let rows = read_run_log(&a.run)?;
    let acc: Vec<f64> = rows
        .iter()
        .enumerate()
        .map(|(i, r)| {
            r["acc"].as_f64().ok_or_else(|| {
                Error::Data(format!("epoch row {} lacks a numeric acc field", i + 1))
            })
        })
        .collect::<Result<_>>()?;
    let align: Vec<f64> = rows
        .iter()
        .filter_map(|r| r["align_cos_mean"].as_f64())
        .collect();

    let mut pcts = Vec::new();
    for part in a.percentiles.split(',') {
        let p: f64 = part
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("bad percentile {part:?}")))?;
        pcts.push(p);
    }

    let mut tails = serde_json::Map::new();
    for p in pcts {
        let s = metrics::percentile_stats(&acc, p)?;
        tails.insert(
            format!("{p}"),
            serde_json::json!({ "mean": s.mean, "var": s.var, "n": s.n }),
        );
    }
    let mut report = serde_json::json!({
        "epochs": acc.len(),
        "acc_final": acc[acc.len() - 1],
        "acc_max": metrics::acc_max(&acc)?,
        "acc_tail_stats": tails,
    });
    if !align.is_empty() {
        let s = metrics::percentile_stats(&align, 75.0)?;
        report["align_cos"] = serde_json::json!({
            "rows": align.len(),
            "mean_overall": align.iter().sum::<f64>() / align.len() as f64,
            "mean_final_quarter": s.mean,
        });
    }
    println!("{}", serde_json::to_string_pretty(&report).unwrap());
    Ok(())
}

fn run_verify(a: &VerifyArgs) -> Result<()> {
    let reports = verify::run_suites(&a.suite, a.tolerance_scale, a.seed)?;
    let mut failed = 0usize;
    let mut total = 0usize;
    for r in &reports {
        for c in &r.checks {
            total += 1;
            let tag = if c.ok { "pass" } else { "FAIL" };
            if !c.ok {
                failed += 1;
            }
            println!("[{tag}] {}.{}  {}", r.suite, c.name, c.detail);
        }
    }
    println!("{}/{} checks passed", total - failed, total);
    if failed > 0 {
        return Err(Error::Verify(format!("{failed} of {total} checks failed")));
    }
    Ok(())
}
