use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::config::{TrainConfig, TrainMode};
use super::data::{holdout_split, prepare_batch, TrainItem};
use super::log::{parse_probe_log, probe_log_tsv, LogRow, LossLog, LOSS_LOG_FILE, PROBE_LOG_FILE};
use super::sampler::{make_repeat_sampler, RepeatSampler};
use crate::degrade::PairedSample;
use crate::error::{Error, IoContext, Result};
use crate::eval::{emit_report, evaluate, EvalReport, ReportFormat};
use crate::model::{Checkpoint, CheckpointMeta, MaskDcptModel, RestorationModel};
use crate::nn::{cosine_lr, AdamW, GroupRates, Graph, ParamId, ParamStore, Tensor};
use crate::objectives::{l1_with_grad, total_loss_with_grad, LossBreakdown};
use crate::probe::probe_accuracy;
use crate::seed::derive_seed;

pub const FINAL_CHECKPOINT: &str = "checkpoint.ckpt";
pub const RESTORATION_CHECKPOINT: &str = "restoration.ckpt";
const SAMPLER_STREAM: u64 = 0x5a3e;
const PROBE_STREAM: u64 = 0x9b0e;

fn to_tensor(shape: &[usize], grad: &[f64], scale: f64) -> Tensor {
    Tensor::from_vec(shape, grad.iter().map(|g| (g * scale) as f32).collect()).expect("shape matches")
}

/// Sum per-sample parameter gradients in sample order.
fn reduce_grads(n: usize, per_sample: Vec<Vec<(ParamId, Tensor)>>) -> Vec<Option<Tensor>> {
    let mut out: Vec<Option<Tensor>> = vec![None; n];
    for sample in per_sample {
        for (id, g) in sample {
            match &mut out[id.index()] {
                Some(acc) => acc.add_assign(&g),
                slot => *slot = Some(g),
            }
        }
    }
    out
}

fn non_finite(cfg: &TrainConfig, iteration: u64, batch: &[TrainItem]) -> Error {
    Error::NonFiniteLoss {
        iteration,
        seed: cfg.seed,
        batch_ids: batch.iter().map(|b| b.id.clone()).collect(),
    }
}

/// One masked pre-training update; returns the batch-mean loss breakdown.
pub fn pretrain_step(
    model: &mut MaskDcptModel,
    opt: &mut AdamW,
    batch: &[TrainItem],
    cfg: &TrainConfig,
    iteration: u64,
) -> Result<LossBreakdown> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let scale = 1.0 / batch.len() as f64;
    let m: &MaskDcptModel = model;
    let results = batch
        .par_iter()
        .map(|item| {
            let mut g = Graph::new();
            let out = m.forward(&mut g, &item.lq, item.mask.as_ref())?;
            let (recon, logits) = (g.value(out.recon), g.value(out.logits));
            if !recon.all_finite() || !logits.all_finite() {
                return Ok(None);
            }
            let (loss, grad) = total_loss_with_grad(
                recon.data(),
                item.gt.data(),
                logits.data(),
                item.target,
                cfg.alpha,
                cfg.gamma,
                None,
            )?;
            if !loss.is_finite() {
                return Ok(None);
            }
            let seeds = [
                (out.recon, to_tensor(recon.shape(), &grad.d_recon, scale)),
                (out.logits, to_tensor(logits.shape(), &grad.d_logits, scale)),
            ];
            let grads = g.backward(&seeds);
            let params = grads.params().map(|(id, t)| (id, t.clone())).collect::<Vec<_>>();
            Ok(Some((loss, params)))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut losses = Vec::with_capacity(batch.len());
    let mut per_sample = Vec::with_capacity(batch.len());
    for r in results {
        let Some((loss, params)) = r else {
            return Err(non_finite(cfg, iteration, batch));
        };
        losses.push(loss);
        per_sample.push(params);
    }
    let grads = reduce_grads(model.store.len(), per_sample);
    if grads.iter().flatten().any(|t| !t.all_finite()) {
        return Err(non_finite(cfg, iteration, batch));
    }
    let rates = GroupRates {
        encoder: cfg.lr_encoder,
        decoder: cfg.lr_decoder,
        head: cfg.lr_decoder,
    };
    opt.step(&mut model.store, &grads, &rates);
    let pix = losses.iter().map(|l| l.pix).sum::<f64>() * scale;
    let cls = losses.iter().map(|l| l.cls).sum::<f64>() * scale;
    Ok(LossBreakdown::new(pix, cls, cfg.alpha))
}

/// One supervised L1 restoration update at learning rate `lr`; returns the batch-mean loss.
pub fn finetune_step(
    model: &mut RestorationModel,
    opt: &mut AdamW,
    batch: &[TrainItem],
    lr: f64,
    cfg: &TrainConfig,
    iteration: u64,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let scale = 1.0 / batch.len() as f64;
    let m: &RestorationModel = model;
    let results = batch
        .par_iter()
        .map(|item| {
            let mut g = Graph::new();
            let y = m.forward(&mut g, &item.lq)?;
            let out = g.value(y);
            if !out.all_finite() {
                return Ok(None);
            }
            let (loss, grad) = l1_with_grad(out.data(), item.gt.data())?;
            let grads = g.backward(&[(y, to_tensor(out.shape(), &grad, scale))]);
            Ok(Some((loss, grads.params().map(|(id, t)| (id, t.clone())).collect::<Vec<_>>())))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = 0.0;
    let mut per_sample = Vec::with_capacity(batch.len());
    for r in results {
        let Some((loss, params)) = r else {
            return Err(non_finite(cfg, iteration, batch));
        };
        total += loss;
        per_sample.push(params);
    }
    let grads = reduce_grads(model.store.len(), per_sample);
    if !total.is_finite() || grads.iter().flatten().any(|t| !t.all_finite()) {
        return Err(non_finite(cfg, iteration, batch));
    }
    opt.step(&mut model.store, &grads, &GroupRates::uniform(lr));
    Ok(total * scale)
}

fn train_sampler(samples: &[PairedSample], pool: &[usize], cfg: &TrainConfig) -> Result<RepeatSampler> {
    if pool.is_empty() {
        return Err(Error::InvalidInput("no training samples after the hold-out split".into()));
    }
    let families: Vec<_> = pool.iter().map(|&i| samples[i].family()).collect();
    make_repeat_sampler(&families, &cfg.repeat_factors, derive_seed(cfg.seed, &[SAMPLER_STREAM]))
}

fn optimizer_tensors(ckpt: &mut Checkpoint, store: &ParamStore, opt: &AdamW) {
    let (first, second) = opt.moments();
    for ((_, p), (m, v)) in store.iter().zip(first.iter().zip(second)) {
        ckpt.tensors.push((format!("optim.m.{}", p.name), m.clone()));
        ckpt.tensors.push((format!("optim.v.{}", p.name), v.clone()));
    }
}

fn restore_optimizer(ckpt: &Checkpoint, store: &ParamStore, opt: &mut AdamW) -> Result<()> {
    let take = |prefix: &str| -> Result<Vec<Tensor>> {
        store
            .iter()
            .map(|(_, p)| {
                ckpt.get(&format!("{prefix}{}", p.name))
                    .filter(|t| t.shape() == p.value.shape())
                    .cloned()
                    .ok_or_else(|| Error::Checkpoint(format!("optimizer state for {} missing or misshapen", p.name)))
            })
            .collect()
    };
    opt.restore(ckpt.meta.optimizer_step, take("optim.m.")?, take("optim.v.")?);
    Ok(())
}

/// Result of a pre-training run.
#[derive(Debug)]
pub struct PretrainOutcome {
    pub model: MaskDcptModel,
    pub checkpoint: PathBuf,
    pub loss_log: LossLog,
    /// `(iteration, probe accuracy)` snapshots.
    pub probe_log: Vec<(u64, f64)>,
}

/// Constant-rate masked pre-training from scratch.
pub fn pretrain_run(cfg: &TrainConfig, samples: &[PairedSample], out_dir: &Path) -> Result<PretrainOutcome> {
    pretrain_run_with(cfg, samples, out_dir, None)
}

fn pretrain_checkpoint(
    model: &MaskDcptModel,
    opt: &AdamW,
    cfg: &TrainConfig,
    iteration: u64,
    log: &LossLog,
    path: &Path,
) -> Result<()> {
    let mut ckpt = Checkpoint::new(
        model.encoder_cfg().clone(),
        CheckpointMeta {
            kind: "pretrain".into(),
            iteration,
            seed: cfg.seed,
            loss_digest: log.digest(),
            optimizer_step: opt.step_count(),
            decoder: Some(model.decoder_cfg.clone()),
        },
    );
    ckpt.add_params(&model.store, |_| true);
    optimizer_tensors(&mut ckpt, &model.store, opt);
    ckpt.save(path)
}

/// Pre-training, optionally resumed from a checkpoint written by an earlier run with the same
/// config. Logs in `out_dir` are truncated to the checkpoint's iteration and continued.
pub fn pretrain_run_with(
    cfg: &TrainConfig,
    samples: &[PairedSample],
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<PretrainOutcome> {
    if cfg.mode != TrainMode::Pretrain {
        return Err(Error::InvalidConfig("pretrain_run needs mode PRETRAIN".into()));
    }
    cfg.validate()?;
    std::fs::create_dir_all(out_dir).at(out_dir)?;
    let mut model = MaskDcptModel::new(cfg.encoder.clone(), cfg.decoder.clone(), cfg.seed)?;
    let mut opt = AdamW::new(&model.store);
    let (pool, _) = holdout_split(samples, cfg.holdout_fraction);
    let sampler = train_sampler(samples, &pool, cfg)?;
    let probe_at: BTreeSet<u64> = cfg.probe_iterations().into_iter().collect();

    let mut log = LossLog::default();
    let mut probe_rows = Vec::new();
    let mut start = 0;
    if let Some(path) = resume {
        let ckpt = Checkpoint::load(path)?;
        if ckpt.meta.kind != "pretrain" || ckpt.encoder != cfg.encoder || ckpt.meta.decoder.as_ref() != Some(&cfg.decoder) {
            return Err(Error::Checkpoint(format!("{} is not a compatible pre-training checkpoint", path.display())));
        }
        ckpt.load_into(&mut model.store, |_| true)?;
        restore_optimizer(&ckpt, &model.store, &mut opt)?;
        start = ckpt.meta.iteration;
        let log_path = out_dir.join(LOSS_LOG_FILE);
        if log_path.exists() {
            log = LossLog::read(&log_path)?;
            log.truncate_to(start);
            if log.digest() != ckpt.meta.loss_digest {
                log::warn!("loss log in {} does not match the checkpoint", out_dir.display());
            }
        }
        let probe_path = out_dir.join(PROBE_LOG_FILE);
        if probe_path.exists() {
            probe_rows = parse_probe_log(&std::fs::read_to_string(&probe_path).at(&probe_path)?)?;
            probe_rows.retain(|(i, _)| *i <= start);
        }
    }

    let probe = |model: &MaskDcptModel, it: u64| -> Result<f64> {
        let acc = probe_accuracy(&model.encoder, &model.store, samples, 0.0, &cfg.probe, derive_seed(cfg.seed, &[PROBE_STREAM]))?;
        log::info!("iteration {it}: probe accuracy {acc:.4}");
        Ok(acc)
    };
    let write_logs = |log: &LossLog, rows: &[(u64, f64)]| -> Result<()> {
        log.write(&out_dir.join(LOSS_LOG_FILE))?;
        let p = out_dir.join(PROBE_LOG_FILE);
        std::fs::write(&p, probe_log_tsv(rows)).at(&p)
    };

    if start == 0 && probe_at.contains(&0) {
        probe_rows.push((0, probe(&model, 0)?));
    }
    for t in start..cfg.iterations {
        let batch = prepare_batch(samples, &pool, &sampler, cfg, t, true)?;
        let loss = pretrain_step(&mut model, &mut opt, &batch, cfg, t)?;
        let it = t + 1;
        log.rows.push(LogRow {
            iter: it,
            pix: loss.pix,
            cls: loss.cls,
            total: loss.total,
            lr_enc: cfg.lr_encoder,
            lr_dec: cfg.lr_decoder,
        });
        if it % 50 == 0 {
            log::debug!("iteration {it}: total {:.5} (pix {:.5}, cls {:.5})", loss.total, loss.pix, loss.cls);
        }
        if probe_at.contains(&it) {
            probe_rows.push((it, probe(&model, it)?));
        }
        if cfg.checkpoint_every > 0 && it % cfg.checkpoint_every == 0 && it < cfg.iterations {
            write_logs(&log, &probe_rows)?;
            pretrain_checkpoint(&model, &opt, cfg, it, &log, &out_dir.join(format!("ckpt_{it:06}.ckpt")))?;
        }
    }
    write_logs(&log, &probe_rows)?;
    let checkpoint = out_dir.join(FINAL_CHECKPOINT);
    pretrain_checkpoint(&model, &opt, cfg, cfg.iterations.max(start), &log, &checkpoint)?;
    Ok(PretrainOutcome {
        model,
        checkpoint,
        loss_log: log,
        probe_log: probe_rows,
    })
}

/// Where fine-tuning starts from.
#[derive(Clone, Debug, PartialEq)]
pub enum FinetuneInit {
    Random,
    /// Encoder weights from a pre-training or encoder-only checkpoint.
    Checkpoint(PathBuf),
}

#[derive(Debug)]
pub struct FinetuneOutcome {
    pub model: RestorationModel,
    pub report: EvalReport,
    pub loss_log: LossLog,
    pub checkpoint: PathBuf,
}

/// Restoration model for `cfg`, with the encoder taken from `init` when it names a checkpoint.
pub fn init_restoration(cfg: &TrainConfig, init: &FinetuneInit) -> Result<RestorationModel> {
    let mut model = RestorationModel::new(cfg.encoder.clone(), cfg.seed)?;
    if let FinetuneInit::Checkpoint(path) = init {
        let ckpt = Checkpoint::load(path)?;
        let (a, b) = (&ckpt.encoder, &cfg.encoder);
        if a.topology != b.topology || a.num_blocks != b.num_blocks || a.in_channels != b.in_channels {
            return Err(Error::Checkpoint(format!(
                "{}: encoder {:?}/{} blocks does not match config {:?}/{} blocks",
                path.display(),
                a.topology,
                a.num_blocks,
                b.topology,
                b.num_blocks
            )));
        }
        ckpt.load_into(&mut model.store, |p| p.name.starts_with("encoder."))?;
    }
    Ok(model)
}

/// Unmasked L1 fine-tuning with a cosine learning-rate schedule, then evaluation of the held-out
/// split.
pub fn finetune_run(cfg: &TrainConfig, samples: &[PairedSample], init: &FinetuneInit, out_dir: &Path) -> Result<FinetuneOutcome> {
    if cfg.mode != TrainMode::Finetune {
        return Err(Error::InvalidConfig("finetune_run needs mode FINETUNE".into()));
    }
    cfg.validate()?;
    std::fs::create_dir_all(out_dir).at(out_dir)?;
    let mut model = init_restoration(cfg, init)?;
    let mut opt = AdamW::new(&model.store);
    let (pool, held) = holdout_split(samples, cfg.holdout_fraction);
    let sampler = train_sampler(samples, &pool, cfg)?;
    let mut log = LossLog::default();
    for t in 0..cfg.iterations {
        let lr = cosine_lr(t, cfg.iterations, cfg.lr_encoder, cfg.lr_min);
        let batch = prepare_batch(samples, &pool, &sampler, cfg, t, false)?;
        let loss = finetune_step(&mut model, &mut opt, &batch, lr, cfg, t)?;
        log.rows.push(LogRow {
            iter: t + 1,
            pix: loss,
            cls: 0.0,
            total: loss,
            lr_enc: lr,
            lr_dec: lr,
        });
    }
    log.write(&out_dir.join(LOSS_LOG_FILE))?;

    if held.is_empty() {
        log::warn!("hold-out split is empty; the report has no rows");
    }
    let eval_set: Vec<&PairedSample> = held.iter().map(|&i| &samples[i]).collect();
    let report = EvalReport::new(evaluate(&model, &eval_set)?, cfg.digest(), model.store.digest());
    emit_report(&report, out_dir, "eval", &[ReportFormat::Json, ReportFormat::Text])?;

    let mut ckpt = Checkpoint::new(
        model.encoder_cfg().clone(),
        CheckpointMeta {
            kind: "finetune".into(),
            iteration: cfg.iterations,
            seed: cfg.seed,
            loss_digest: log.digest(),
            optimizer_step: opt.step_count(),
            decoder: None,
        },
    );
    ckpt.add_params(&model.store, |_| true);
    let checkpoint = out_dir.join(RESTORATION_CHECKPOINT);
    ckpt.save(&checkpoint)?;
    Ok(FinetuneOutcome {
        model,
        report,
        loss_log: log,
        checkpoint,
    })
}

/// Load a fine-tuned restoration checkpoint.
pub fn load_restoration(path: &Path) -> Result<RestorationModel> {
    let ckpt = Checkpoint::load(path)?;
    let mut model = RestorationModel::new(ckpt.encoder.clone(), ckpt.meta.seed)?;
    ckpt.load_into(&mut model.store, |_| true)?;
    Ok(model)
}
