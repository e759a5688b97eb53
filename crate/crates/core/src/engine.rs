//! Training engines: supervised teacher pretraining and the adversarial
//! data-free distillation loop with optional replay.
//!
//! The distillation schedule, per epoch `E` (1-based), runs
//! `iters_per_epoch` iterations of `gen_steps` generator updates followed by
//! `student_steps` student updates. With the bank scheme, a subset of the
//! last student batch is pushed into the bank on epochs divisible by
//! `push_every`; retention terms switch on once the bank holds anything.
//! With the generative scheme there is no emptiness guard: the decoder
//! replays from the start (initially as noise) and the VAE trains inside the
//! student loop on eligible epochs until its per-epoch step budget is spent.
//!
//! Every run writes a line-per-epoch JSONL log whose bytes depend only on
//! (config, seed); wall-clock and environment facts go to `run_meta.json`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use ndarray::{ArrayD, IxDyn};
use serde::Serialize;

use crate::autodiff::{Graph, NodeId};
use crate::config::{ExperimentConfig, ReplayScheme};
use crate::data::{gather_rows, load_idx_pair, make_synthetic_dataset, minibatches, Dataset};
use crate::losses;
use crate::meta::{
    alignment_report, meta_student_loss_parts, total_gradient, InnerStepConfig, StudentUpdateMode,
};
use crate::nets::{sample_noise, ForwardMode, NetKind, NetSpec, Network};
use crate::optim::{cosine_lr, Adam, SgdMomentum};
use crate::param::grads_to_vector;
use crate::replay::{GenerativeReplay, MemoryBank};
use crate::rng::{derive_seed, SeededStream, Stream};
use crate::{ckpt, Error, Result};

pub const RUN_LOG: &str = "run.jsonl";
pub const DIAG_LOG: &str = "diag.jsonl";
pub const META_FILE: &str = "run_meta.json";
pub const CONFIG_FILE: &str = "config.toml";
pub const TEACHER_CKPT: &str = "teacher.ckpt";
pub const STUDENT_CKPT: &str = "student.ckpt";

#[derive(Debug, Clone, Default, Serialize)]
pub struct RunCounters {
    pub gen_steps: usize,
    pub student_steps: usize,
    pub vae_steps: usize,
    pub bank_pushes: usize,
    /// Student steps that ran without a retention term because the bank was
    /// still empty.
    pub retention_skipped_empty: usize,
}

/// One epoch of the distillation log. Optional fields serialize as `null`
/// when the quantity does not exist for the run's scheme.
#[derive(Debug, Clone, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub acc: f64,
    pub loss_g: f64,
    pub loss_acq: f64,
    pub loss_ret: Option<f64>,
    pub loss_meta: f64,
    pub align_cos_mean: Option<f64>,
    pub lr_s: f64,
}

#[derive(Debug, Clone, Serialize)]
struct TeacherEpochRecord {
    epoch: usize,
    acc: f64,
    loss: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct AlignRow {
    pub step: usize,
    pub dot: f64,
    pub cos: f64,
    pub norm_acq: f64,
    pub norm_ret: f64,
}

#[derive(Debug)]
pub struct TeacherReport {
    pub run_dir: PathBuf,
    pub ckpt: PathBuf,
    pub test_acc: f64,
}

#[derive(Debug)]
pub struct DistillReport {
    pub run_dir: PathBuf,
    pub acc_series: Vec<f64>,
    pub best_acc: f64,
    pub final_acc: f64,
    pub counters: RunCounters,
}

/// Creates a fresh, never-overwriting run directory
/// `<root>/<kind>-<unix-seconds>-<confighash8>[-<n>]`.
pub fn prepare_run_dir(root: &Path, kind: &str, hash8: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(root)?;
    let secs = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let base = format!("{kind}-{secs}-{hash8}");
    for suffix in 0..10_000u32 {
        let name = if suffix == 0 {
            base.clone()
        } else {
            format!("{base}-{suffix}")
        };
        let dir = root.join(&name);
        match std::fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(e.into()),
        }
    }
    Err(Error::Io(std::io::Error::other(
        "run directory space exhausted",
    )))
}

/// Loads the configured dataset (IDX directory or in-memory synthesis) and
/// flattens samples to the MLP shape `[d]`.
pub fn load_data(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let (train, test) = match &cfg.data.dir {
        Some(dir) => load_idx_pair(dir)?,
        None => make_synthetic_dataset(
            cfg.seed,
            cfg.data.classes,
            cfg.data.per_class,
            cfg.data.spread,
        ),
    };
    if train.num_classes < 2 {
        return Err(Error::Data(format!(
            "need at least 2 classes, found {}",
            train.num_classes
        )));
    }
    let d: usize = train.images.shape()[1..].iter().product();
    Ok((train.to_model_shape(&[d])?, test.to_model_shape(&[d])?))
}

fn teacher_spec(cfg: &ExperimentConfig, d: usize, classes: usize) -> NetSpec {
    NetSpec {
        kind: NetKind::ClassifierMlp,
        input_shape: vec![d],
        output_dim: classes,
        hidden: cfg.teacher.hidden,
        depth: cfg.teacher.depth,
        noise_dim: 1,
        base_channels: 128,
    }
}

fn student_spec(cfg: &ExperimentConfig, d: usize, classes: usize) -> NetSpec {
    NetSpec {
        kind: NetKind::ClassifierMlp,
        input_shape: vec![d],
        output_dim: classes,
        hidden: cfg.student.hidden,
        depth: cfg.student.depth,
        noise_dim: 1,
        base_channels: 128,
    }
}

fn generator_spec(cfg: &ExperimentConfig, d: usize) -> NetSpec {
    NetSpec {
        kind: NetKind::Generator,
        input_shape: vec![d],
        output_dim: 0,
        hidden: cfg.generator.hidden,
        depth: cfg.generator.depth,
        noise_dim: cfg.generator.noise_dim,
        base_channels: cfg.generator.base_channels,
    }
}

/// Mean test accuracy in evaluation mode, batched to bound graph sizes.
pub fn evaluate(net: &Network, data: &Dataset) -> Result<f64> {
    let n = data.len();
    let mut hits = 0.0;
    let mut seen = 0usize;
    for start in (0..n).step_by(256) {
        let end = (start + 256).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let x = data.gather(&idx);
        let logits = net.forward_values(&x, ForwardMode::Eval)?;
        let labels = &data.labels[start..end];
        hits += losses::accuracy(&logits, labels)? * labels.len() as f64;
        seen += labels.len();
    }
    Ok(hits / seen as f64)
}

fn write_json_line<T: Serialize>(w: &mut BufWriter<File>, row: &T) -> Result<()> {
    let line = serde_json::to_string(row).expect("log row serializes");
    w.write_all(line.as_bytes())?;
    w.write_all(b"\n")?;
    Ok(())
}

fn now_unix() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Supervised teacher training with a cosine schedule; saves a model
/// checkpoint and a per-epoch log into a fresh run directory.
pub fn pretrain_teacher(cfg: &ExperimentConfig, out_root: &Path) -> Result<TeacherReport> {
    cfg.validate()?;
    let started = now_unix();
    let (train, test) = load_data(cfg)?;
    let d = train.images.shape()[1];
    let classes = train.num_classes;
    let run_dir = prepare_run_dir(out_root, "teacher", &cfg.hash8())?;
    cfg.save(&run_dir.join(CONFIG_FILE))?;

    let mut teacher = Network::build(
        &teacher_spec(cfg, d, classes),
        derive_seed(cfg.seed, Stream::TeacherInit),
    )?;
    let mut opt = SgdMomentum::new(
        teacher.layout.clone(),
        cfg.teacher.lr,
        cfg.teacher.momentum,
        cfg.teacher.weight_decay,
    );
    let mut shuffle = SeededStream::new(cfg.seed, Stream::DataShuffle);
    let mut log = BufWriter::new(File::create(run_dir.join(RUN_LOG))?);

    let mut test_acc = 0.0;
    for epoch in 1..=cfg.teacher.epochs {
        opt.lr = cosine_lr(epoch - 1, cfg.teacher.epochs, cfg.teacher.lr);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for idx in minibatches(train.len(), cfg.teacher.batch, &mut shuffle.rng) {
            let x = train.gather(&idx);
            let labels: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
            let mut g = Graph::new();
            let p = teacher.inject_params(&mut g);
            let xn = g.leaf(x);
            let logits =
                teacher.forward_nodes(&mut g, &p, xn, ForwardMode::Train { update_state: true })?;
            let loss = losses::cross_entropy(&mut g, logits, &labels);
            let lv = g.scalar_value(loss);
            if !lv.is_finite() {
                return Err(Error::Numeric(format!(
                    "teacher loss diverged at epoch {epoch}: {lv}"
                )));
            }
            let grads = g.grad(loss, &p.nodes);
            let gv = grads_to_vector(&g, &teacher.layout, &grads);
            opt.step(&mut teacher.params, &gv);
            loss_sum += lv;
            batches += 1;
        }
        test_acc = evaluate(&teacher, &test)?;
        write_json_line(
            &mut log,
            &TeacherEpochRecord {
                epoch,
                acc: test_acc,
                loss: loss_sum / batches as f64,
            },
        )?;
    }
    log.flush()?;

    let ckpt_path = run_dir.join(TEACHER_CKPT);
    teacher.save_checkpoint(&ckpt_path)?;
    let meta = serde_json::json!({
        "kind": "pretrain-teacher",
        "seed": cfg.seed,
        "config_hash": cfg.hash(),
        "test_acc": test_acc,
        "classes": classes,
        "input_dim": d,
        "train_size": train.len(),
        "test_size": test.len(),
        "started_unix": started,
        "wall_seconds": now_unix().saturating_sub(started),
    });
    std::fs::write(
        run_dir.join(META_FILE),
        serde_json::to_string_pretty(&meta).unwrap(),
    )?;
    Ok(TeacherReport {
        run_dir,
        ckpt: ckpt_path,
        test_acc,
    })
}

struct ReplayDraw {
    samples: ArrayD<f64>,
    teacher_logits: ArrayD<f64>,
}

/// Random row subset (without replacement) of a batch.
fn random_subset(batch: &ArrayD<f64>, k: usize, rng: &mut rand_chacha::ChaCha8Rng) -> ArrayD<f64> {
    let n = batch.shape()[0];
    let idx = rand::seq::index::sample(rng, n, k.min(n)).into_vec();
    gather_rows(batch, &idx)
}

fn concat_rows(a: &ArrayD<f64>, b: &ArrayD<f64>) -> ArrayD<f64> {
    let d: usize = a.shape()[1..].iter().product();
    let mut data = Vec::with_capacity((a.shape()[0] + b.shape()[0]) * d);
    data.extend(a.iter().cloned());
    data.extend(b.iter().cloned());
    let mut shape = vec![a.shape()[0] + b.shape()[0]];
    shape.extend_from_slice(&a.shape()[1..]);
    ArrayD::from_shape_vec(IxDyn(&shape), data).unwrap()
}

/// The adversarial distillation loop. `teacher_ckpt` must hold a classifier
/// matching the configured data; the run never touches training labels or
/// images, only the teacher and the test split.
pub fn run_distillation(
    cfg: &ExperimentConfig,
    teacher_ckpt: &Path,
    out_root: &Path,
) -> Result<DistillReport> {
    cfg.validate()?;
    let started = now_unix();
    let (train, test) = load_data(cfg)?;
    let d = test.images.shape()[1];
    let classes = test.num_classes;
    drop(train);

    let teacher = Network::from_checkpoint(teacher_ckpt, None)?;
    if teacher.spec.input_shape != [d] || teacher.spec.output_dim != classes {
        return Err(Error::Checkpoint(format!(
            "teacher at {} was trained for input {:?} / {} classes; data has [{d}] / {classes}",
            teacher_ckpt.display(),
            teacher.spec.input_shape,
            teacher.spec.output_dim,
        )));
    }

    let mut student = Network::build(
        &student_spec(cfg, d, classes),
        derive_seed(cfg.seed, Stream::StudentInit),
    )?;
    let mut generator = Network::build(
        &generator_spec(cfg, d),
        derive_seed(cfg.seed, Stream::GeneratorInit),
    )?;
    let mut bank = MemoryBank::new(cfg.replay.capacity);
    let mut vae = match cfg.replay.scheme {
        ReplayScheme::Generative => {
            let enc_spec = NetSpec {
                kind: NetKind::VaeEncoder,
                input_shape: vec![d],
                output_dim: cfg.replay.vae.latent,
                hidden: cfg.replay.vae.hidden,
                depth: 2,
                noise_dim: 1,
                base_channels: 16,
            };
            let dec_spec = NetSpec {
                kind: NetKind::Generator,
                input_shape: vec![d],
                output_dim: 0,
                hidden: cfg.replay.vae.hidden,
                depth: 2,
                noise_dim: cfg.replay.vae.latent,
                base_channels: 16,
            };
            let vae_seed = derive_seed(cfg.seed, Stream::VaeInit);
            Some(GenerativeReplay::new(
                Network::build(&enc_spec, vae_seed)?,
                Network::build(&dec_spec, derive_seed(vae_seed, Stream::VaeInit))?,
                cfg.replay.vae.lr,
                cfg.replay.vae.max_steps_per_epoch,
            )?)
        }
        _ => None,
    };

    let run_dir = prepare_run_dir(out_root, "distill", &cfg.hash8())?;
    cfg.save(&run_dir.join(CONFIG_FILE))?;
    let mut run_log = BufWriter::new(File::create(run_dir.join(RUN_LOG))?);
    let mut diag_log = BufWriter::new(File::create(run_dir.join(DIAG_LOG))?);

    let mut student_opt = SgdMomentum::new(
        student.layout.clone(),
        cfg.student.lr,
        cfg.student.momentum,
        cfg.student.weight_decay,
    );
    let mut gen_opt = Adam::new(generator.layout.clone(), cfg.generator.lr);
    let mut noise = SeededStream::new(cfg.seed, Stream::Noise);
    let mut memory = SeededStream::new(cfg.seed, Stream::Memory);
    let mut vae_noise = SeededStream::new(cfg.seed, Stream::VaeNoise);

    let inner = InnerStepConfig {
        mode: cfg.student.mode,
        alpha: cfg.student.alpha,
        include_plain_retention: cfg.student.include_plain_retention,
    };
    let mut counters = RunCounters::default();
    let mut acc_series = Vec::with_capacity(cfg.distill.epochs);

    for epoch in 1..=cfg.distill.epochs {
        let lr_s = cosine_lr(epoch - 1, cfg.distill.epochs, cfg.student.lr);
        student_opt.lr = lr_s;
        if let Some(v) = vae.as_mut() {
            v.begin_epoch();
        }
        let mut sum_g = 0.0;
        let mut sum_acq = 0.0;
        let mut sum_ret = 0.0;
        let mut ret_count = 0usize;
        let mut sum_meta = 0.0;
        let mut cos_rows: Vec<f64> = Vec::new();
        let mut last_xhat: Option<ArrayD<f64>> = None;

        for iter in 1..=cfg.distill.iters_per_epoch {
            for _ in 0..cfg.distill.gen_steps {
                let z = sample_noise(
                    cfg.distill.noise_batch,
                    generator.spec.noise_dim,
                    &mut noise.rng,
                );
                let mut g = Graph::new();
                let gp = generator.inject_params(&mut g);
                let tp = teacher.inject_params(&mut g);
                let sp = student.inject_params(&mut g);
                let zn = g.leaf(z);
                let xhat = generator.forward_nodes(
                    &mut g,
                    &gp,
                    zn,
                    ForwardMode::Train { update_state: true },
                )?;
                let (t_logits, traces) =
                    teacher.forward_traced_nodes(&mut g, &tp, xhat, ForwardMode::Eval)?;
                let s_logits = student.forward_nodes(&mut g, &sp, xhat, ForwardMode::Eval)?;
                let loss_g = losses::generator_loss(
                    &mut g,
                    t_logits,
                    s_logits,
                    &traces,
                    cfg.generator.gamma,
                    cfg.generator.delta,
                );
                let lv = g.scalar_value(loss_g);
                let grads = g.grad(loss_g, &gp.nodes);
                let gv = grads_to_vector(&g, &generator.layout, &grads);
                if !lv.is_finite() || !gv.all_finite() {
                    return abort_run(&run_dir, epoch, iter, "generator", lv, &counters);
                }
                gen_opt.step(&mut generator.params, &gv);
                counters.gen_steps += 1;
                sum_g += lv;
            }

            for _ in 0..cfg.distill.student_steps {
                let z = sample_noise(
                    cfg.distill.noise_batch,
                    generator.spec.noise_dim,
                    &mut noise.rng,
                );
                let xhat = generator.forward_values(
                    &z,
                    ForwardMode::Train {
                        update_state: false,
                    },
                )?;
                let t_acq = teacher.forward_values(&xhat, ForwardMode::Eval)?;

                let draw: Option<ReplayDraw> = match cfg.replay.scheme {
                    ReplayScheme::None => None,
                    ReplayScheme::MemoryBank => {
                        match bank.sample(cfg.distill.memory_batch, &mut memory.rng) {
                            Some(x_m) => {
                                let t_ret = teacher.forward_values(&x_m, ForwardMode::Eval)?;
                                Some(ReplayDraw {
                                    samples: x_m,
                                    teacher_logits: t_ret,
                                })
                            }
                            None => {
                                if cfg.student.mode != StudentUpdateMode::NoReplay {
                                    counters.retention_skipped_empty += 1;
                                }
                                None
                            }
                        }
                    }
                    ReplayScheme::Generative => {
                        let v = vae.as_mut().expect("generative scheme built a vae");
                        let x_m = v.sample(cfg.distill.memory_batch, &mut vae_noise.rng)?;
                        if epoch % cfg.replay.vae.train_every == 0 && v.can_train() {
                            let x_star = random_subset(&xhat, cfg.replay.subset, &mut memory.rng);
                            let vae_batch = concat_rows(&x_m, &x_star);
                            v.train_step(&vae_batch, &mut vae_noise.rng)?;
                            counters.vae_steps += 1;
                        }
                        let t_ret = teacher.forward_values(&x_m, ForwardMode::Eval)?;
                        Some(ReplayDraw {
                            samples: x_m,
                            teacher_logits: t_ret,
                        })
                    }
                };

                let mut g = Graph::new();
                let p = student.inject_params(&mut g);
                let student_ref = &student;
                let acq_b = |g: &mut Graph, p: &crate::param::ParamNodes| -> Result<NodeId> {
                    let tl = g.leaf(t_acq.clone());
                    let xn = g.leaf(xhat.clone());
                    let sl = student_ref.forward_nodes(
                        g,
                        p,
                        xn,
                        ForwardMode::Train { update_state: true },
                    )?;
                    Ok(losses::kd_mae(g, tl, sl))
                };
                let ret_b = draw.as_ref().map(|dr| {
                    move |g: &mut Graph, p: &crate::param::ParamNodes| -> Result<NodeId> {
                        let tl = g.leaf(dr.teacher_logits.clone());
                        let xn = g.leaf(dr.samples.clone());
                        let sl = student_ref.forward_nodes(
                            g,
                            p,
                            xn,
                            ForwardMode::Train {
                                update_state: false,
                            },
                        )?;
                        Ok(losses::kd_mae(g, tl, sl))
                    }
                });
                let parts = meta_student_loss_parts(&mut g, &p, acq_b, ret_b.as_ref(), &inner)?;
                let grad = total_gradient(&mut g, &parts, &p);
                let total_v = g.scalar_value(parts.total);
                if !total_v.is_finite() || !grad.all_finite() {
                    return abort_run(&run_dir, epoch, iter, "student", total_v, &counters);
                }

                sum_acq += g.scalar_value(parts.acq);
                if let Some(r) = parts.ret_adapted.or(parts.ret_plain) {
                    sum_ret += g.scalar_value(r);
                    ret_count += 1;
                }
                sum_meta += total_v;

                let diag_due = cfg.diagnostics.align_every > 0
                    && (counters.student_steps + 1) % cfg.diagnostics.align_every == 0;
                if diag_due {
                    if let Some(rb) = ret_b.as_ref() {
                        let acq_grads = g.grad(parts.acq, &p.nodes);
                        let g_acq = grads_to_vector(&g, &student.layout, &acq_grads);
                        let ret_theta = match parts.ret_plain {
                            Some(n) => n,
                            None => rb(&mut g, &p)?,
                        };
                        let ret_grads = g.grad(ret_theta, &p.nodes);
                        let g_ret = grads_to_vector(&g, &student.layout, &ret_grads);
                        let al = alignment_report(&g_acq, &g_ret);
                        write_json_line(
                            &mut diag_log,
                            &AlignRow {
                                step: counters.student_steps + 1,
                                dot: al.dot,
                                cos: al.cos,
                                norm_acq: al.norm_acq,
                                norm_ret: al.norm_ret,
                            },
                        )?;
                        cos_rows.push(al.cos);
                    }
                }

                student_opt.step(&mut student.params, &grad);
                counters.student_steps += 1;
                last_xhat = Some(xhat);
            }
        }

        if cfg.replay.scheme == ReplayScheme::MemoryBank && epoch % cfg.replay.push_every == 0 {
            let xhat = last_xhat.as_ref().expect("student steps ran this epoch");
            bank.push_subset(xhat, cfg.replay.subset, &mut memory.rng)?;
            counters.bank_pushes += 1;
        }

        let acc = evaluate(&student, &test)?;
        acc_series.push(acc);
        let steps = counters.student_steps;
        let per_epoch_steps = cfg.distill.iters_per_epoch * cfg.distill.student_steps;
        debug_assert_eq!(steps, epoch * per_epoch_steps);
        let record = EpochRecord {
            epoch,
            acc,
            loss_g: sum_g / (cfg.distill.iters_per_epoch * cfg.distill.gen_steps) as f64,
            loss_acq: sum_acq / per_epoch_steps as f64,
            loss_ret: (ret_count > 0).then(|| sum_ret / ret_count as f64),
            loss_meta: sum_meta / per_epoch_steps as f64,
            align_cos_mean: (!cos_rows.is_empty())
                .then(|| cos_rows.iter().sum::<f64>() / cos_rows.len() as f64),
            lr_s,
        };
        write_json_line(&mut run_log, &record)?;

        if cfg.distill.ckpt_every > 0 && epoch % cfg.distill.ckpt_every == 0 {
            save_run_state(
                &run_dir.join(format!("state-{epoch:04}.ckpt")),
                epoch,
                &student,
                &student_opt,
                &generator,
                &gen_opt,
                &bank,
                &counters,
                [&noise, &memory, &vae_noise],
            )?;
        }
    }
    run_log.flush()?;
    diag_log.flush()?;

    student.save_checkpoint(&run_dir.join(STUDENT_CKPT))?;
    save_run_state(
        &run_dir.join("state-final.ckpt"),
        cfg.distill.epochs,
        &student,
        &student_opt,
        &generator,
        &gen_opt,
        &bank,
        &counters,
        [&noise, &memory, &vae_noise],
    )?;

    let best_acc = acc_series.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let final_acc = *acc_series.last().expect("at least one epoch");
    let meta = serde_json::json!({
        "kind": "distill",
        "seed": cfg.seed,
        "config_hash": cfg.hash(),
        "teacher_ckpt": teacher_ckpt.display().to_string(),
        "counters": counters,
        "best_acc": best_acc,
        "final_acc": final_acc,
        "started_unix": started,
        "wall_seconds": now_unix().saturating_sub(started),
    });
    std::fs::write(
        run_dir.join(META_FILE),
        serde_json::to_string_pretty(&meta).unwrap(),
    )?;

    Ok(DistillReport {
        run_dir,
        acc_series,
        best_acc,
        final_acc,
        counters,
    })
}

#[allow(clippy::too_many_arguments)]
fn save_run_state(
    path: &Path,
    epoch: usize,
    student: &Network,
    student_opt: &SgdMomentum,
    generator: &Network,
    gen_opt: &Adam,
    bank: &MemoryBank,
    counters: &RunCounters,
    rngs: [&SeededStream; 3],
) -> Result<()> {
    let mut arrays = vec![
        ckpt::NamedArray::new(
            "student.params",
            vec![student.params.len()],
            student.params.values.to_vec(),
        ),
        ckpt::NamedArray::new(
            "student.velocity",
            vec![student_opt.velocity.len()],
            student_opt.velocity.values.to_vec(),
        ),
        ckpt::NamedArray::new(
            "generator.params",
            vec![generator.params.len()],
            generator.params.values.to_vec(),
        ),
        ckpt::NamedArray::new(
            "generator.adam_m",
            vec![gen_opt.m.len()],
            gen_opt.m.values.to_vec(),
        ),
        ckpt::NamedArray::new(
            "generator.adam_v",
            vec![gen_opt.v.len()],
            gen_opt.v.values.to_vec(),
        ),
    ];
    for (i, slot) in bank.slots().enumerate() {
        arrays.push(ckpt::NamedArray::new(
            format!("bank.{i}"),
            slot.shape().to_vec(),
            slot.iter().cloned().collect(),
        ));
    }
    let meta = serde_json::json!({
        "kind": "run-state",
        "epoch": epoch,
        "counters": counters,
        "adam_t": gen_opt.t,
        "rng_word_pos": {
            "noise": rngs[0].word_pos().to_string(),
            "memory": rngs[1].word_pos().to_string(),
            "vae_noise": rngs[2].word_pos().to_string(),
        },
        "bank_slots": bank.len(),
    });
    ckpt::write_container(path, &ckpt::Container { meta, arrays })
}

fn abort_run(
    run_dir: &Path,
    epoch: usize,
    iter: usize,
    phase: &str,
    loss: f64,
    counters: &RunCounters,
) -> Result<DistillReport> {
    let info = serde_json::json!({
        "phase": phase,
        "epoch": epoch,
        "iter": iter,
        "loss": if loss.is_finite() { serde_json::json!(loss) } else { serde_json::json!(loss.to_string()) },
        "counters": counters,
    });
    let _ = std::fs::write(
        run_dir.join("abort.json"),
        serde_json::to_string_pretty(&info).unwrap(),
    );
    Err(Error::Numeric(format!(
        "non-finite {phase} objective at epoch {epoch}, iteration {iter}; state dumped to {}",
        run_dir.display()
    )))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::desk();
        cfg.seed = 7;
        cfg.data.classes = 4;
        cfg.data.per_class = 30;
        cfg.data.spread = 0.06;
        cfg.teacher.epochs = 12;
        cfg.teacher.hidden = 16;
        cfg.student.hidden = 8;
        cfg.generator.hidden = 16;
        cfg.generator.noise_dim = 8;
        cfg.distill.epochs = 4;
        cfg.distill.iters_per_epoch = 2;
        cfg.distill.gen_steps = 1;
        cfg.distill.student_steps = 2;
        cfg.distill.noise_batch = 16;
        cfg.distill.memory_batch = 8;
        cfg.replay.push_every = 2;
        cfg.replay.subset = 8;
        cfg.replay.vae.hidden = 12;
        cfg.replay.vae.latent = 4;
        cfg.diagnostics.align_every = 3;
        cfg
    }

    fn pretrained(cfg: &ExperimentConfig, root: &Path) -> TeacherReport {
        pretrain_teacher(cfg, root).unwrap()
    }

    #[test]
    fn teacher_pretraining_learns_the_ring_task() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg();
        let report = pretrained(&cfg, dir.path());
        assert!(
            report.test_acc >= 0.9,
            "teacher should master the toy task, got {}",
            report.test_acc
        );
        assert!(report.ckpt.exists());
        let log = std::fs::read_to_string(report.run_dir.join(RUN_LOG)).unwrap();
        assert_eq!(log.lines().count(), cfg.teacher.epochs);
    }

    #[test]
    fn counters_follow_the_schedule_and_bank_guard_instruments() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg();
        let teacher = pretrained(&cfg, dir.path());
        let report = run_distillation(&cfg, &teacher.ckpt, dir.path()).unwrap();
        let c = &report.counters;
        let epochs = cfg.distill.epochs;
        let iters = cfg.distill.iters_per_epoch;
        assert_eq!(c.gen_steps, epochs * iters * cfg.distill.gen_steps);
        assert_eq!(c.student_steps, epochs * iters * cfg.distill.student_steps);
        // push_every = 2 over 4 epochs: pushes after epochs 2 and 4.
        assert_eq!(c.bank_pushes, 2);
        // The bank stays empty through epochs 1-2 (push happens after the
        // epoch's iterations), so every student step there skips retention.
        assert_eq!(
            c.retention_skipped_empty,
            2 * iters * cfg.distill.student_steps
        );
        assert_eq!(c.vae_steps, 0);
        assert_eq!(report.acc_series.len(), epochs);
        // Retention appears in the log exactly once the bank is nonempty.
        let log = std::fs::read_to_string(report.run_dir.join(RUN_LOG)).unwrap();
        let rows: Vec<serde_json::Value> = log
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert!(rows[0]["loss_ret"].is_null());
        assert!(rows[1]["loss_ret"].is_null());
        assert!(rows[2]["loss_ret"].is_number());
        assert!(rows[3]["loss_ret"].is_number());
        // lr follows the cosine schedule.
        for (k, row) in rows.iter().enumerate() {
            let want = cosine_lr(k, epochs, cfg.student.lr);
            assert!((row["lr_s"].as_f64().unwrap() - want).abs() < 1e-12);
        }
    }

    #[test]
    fn generative_scheme_replays_from_the_start_within_budget() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_cfg();
        cfg.replay.scheme = ReplayScheme::Generative;
        cfg.replay.vae.max_steps_per_epoch = 3;
        let teacher = pretrained(&cfg, dir.path());
        let report = run_distillation(&cfg, &teacher.ckpt, dir.path()).unwrap();
        let c = &report.counters;
        // No emptiness guard: retention is never skipped.
        assert_eq!(c.retention_skipped_empty, 0);
        assert_eq!(c.bank_pushes, 0);
        // Budget: at most max_steps_per_epoch per epoch, and the student
        // loop offers more opportunities than the budget allows.
        assert_eq!(c.vae_steps, cfg.distill.epochs * 3);
        // Every epoch logs a retention loss.
        let log = std::fs::read_to_string(report.run_dir.join(RUN_LOG)).unwrap();
        for line in log.lines() {
            let row: serde_json::Value = serde_json::from_str(line).unwrap();
            assert!(row["loss_ret"].is_number());
        }
    }

    #[test]
    fn identical_seed_and_config_write_identical_logs() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg();
        let teacher = pretrained(&cfg, dir.path());
        let r1 = run_distillation(&cfg, &teacher.ckpt, dir.path()).unwrap();
        let r2 = run_distillation(&cfg, &teacher.ckpt, dir.path()).unwrap();
        assert_ne!(r1.run_dir, r2.run_dir, "run dirs never collide");
        let l1 = std::fs::read(r1.run_dir.join(RUN_LOG)).unwrap();
        let l2 = std::fs::read(r2.run_dir.join(RUN_LOG)).unwrap();
        assert_eq!(l1, l2, "run logs must be byte-identical");
        let d1 = std::fs::read(r1.run_dir.join(DIAG_LOG)).unwrap();
        let d2 = std::fs::read(r2.run_dir.join(DIAG_LOG)).unwrap();
        assert_eq!(d1, d2);
        let mut other = cfg.clone();
        other.seed = 8;
        let r3 = run_distillation(&other, &teacher.ckpt, dir.path()).unwrap();
        let l3 = std::fs::read(r3.run_dir.join(RUN_LOG)).unwrap();
        assert_ne!(l1, l3, "different seeds must change the log");
    }

    #[test]
    fn diverging_settings_dump_state_and_abort() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_cfg();
        let teacher = pretrained(&cfg, dir.path());
        // A step size at the float ceiling overflows the logits within a few
        // updates; the run must dump a report and fail loudly, not emit NaN
        // metrics.
        cfg.student.lr = 1e308;
        cfg.diagnostics.align_every = 0;
        let err = run_distillation(&cfg, &teacher.ckpt, dir.path());
        assert!(matches!(err, Err(Error::Numeric(_))), "got {err:?}");
        // The abort dump lands in the newest distill run directory.
        let mut dumps = 0;
        for entry in std::fs::read_dir(dir.path()).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() && p.join("abort.json").exists() {
                dumps += 1;
                let info: serde_json::Value =
                    serde_json::from_str(&std::fs::read_to_string(p.join("abort.json")).unwrap())
                        .unwrap();
                assert_eq!(info["phase"], "student");
            }
        }
        assert_eq!(dumps, 1);
    }

    #[test]
    fn teacher_checkpoint_must_match_the_task() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg();
        let teacher = pretrained(&cfg, dir.path());
        let mut other = cfg.clone();
        other.data.classes = 5;
        let err = run_distillation(&other, &teacher.ckpt, dir.path());
        assert!(matches!(err, Err(Error::Checkpoint(_))));
    }

    #[test]
    fn run_dirs_never_overwrite() {
        let dir = tempfile::tempdir().unwrap();
        let a = prepare_run_dir(dir.path(), "distill", "abcd1234").unwrap();
        let b = prepare_run_dir(dir.path(), "distill", "abcd1234").unwrap();
        assert_ne!(a, b);
        assert!(a.exists() && b.exists());
    }
}
