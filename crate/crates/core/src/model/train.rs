use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{SeqModel, TrainSample};
use crate::corpus::rng_for;
use crate::error::{Error, Result};
use crate::nn::{accumulate, global_norm, Adam, Mat, Params, Tape};
use crate::ops::OpLibrary;
use crate::tokenizer::NodeOrder;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Probability of replacing the condition by zeros for one sample.
    pub cond_dropout: f64,
    pub grad_clip: f64,
    /// Epochs without validation improvement before stopping; 0 disables.
    pub patience: usize,
    pub order: NodeOrder,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 16,
            learning_rate: 1e-3,
            seed: 0,
            cond_dropout: 0.1,
            grad_clip: 1.0,
            patience: 5,
            order: NodeOrder::BackToFront,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

struct SampleGrad {
    loss: f64,
    count: usize,
    grads: Vec<Option<Mat>>,
}

fn sample_grad<M: SeqModel>(model: &M, s: &TrainSample, drop: bool, lib: &OpLibrary) -> Result<SampleGrad> {
    let zeros;
    let cond = if drop {
        zeros = vec![0.0; s.cond.len()];
        &zeros
    } else {
        &s.cond
    };
    let mut t = Tape::new(model.params());
    let (loss, count) = model.sample_loss(&mut t, s, cond, lib)?;
    Ok(SampleGrad {
        loss: t.value(loss).data[0],
        count,
        grads: t.backward(loss, 1.0),
    })
}

/// Mean per-token cross-entropy over `samples`.
pub fn evaluate_loss<M: SeqModel>(model: &M, samples: &[TrainSample], lib: &OpLibrary) -> Result<f64> {
    let parts: Vec<Result<(f64, usize)>> = samples
        .par_iter()
        .map(|s| {
            let mut t = Tape::new(model.params());
            let (loss, count) = model.sample_loss(&mut t, s, &s.cond, lib)?;
            Ok((t.value(loss).data[0], count))
        })
        .collect();
    let (mut sum, mut count) = (0.0, 0);
    for p in parts {
        let (l, c) = p?;
        sum += l;
        count += c;
    }
    Ok(sum / count.max(1) as f64)
}

/// Per-token cross-entropy and its gradient, averaged over a batch. Samples
/// run in parallel; reduction order is fixed.
pub fn batch_gradient<M: SeqModel>(
    model: &M,
    batch: &[&TrainSample],
    drops: &[bool],
    lib: &OpLibrary,
) -> Result<(f64, Vec<Mat>)> {
    let parts: Vec<Result<SampleGrad>> = batch
        .par_iter()
        .zip(drops.par_iter())
        .map(|(s, &d)| sample_grad(model, s, d, lib))
        .collect();
    let mut grads = model.params().zeros_like();
    let (mut loss, mut count) = (0.0, 0);
    for p in parts {
        let p = p?;
        loss += p.loss;
        count += p.count;
        accumulate(&mut grads, p.grads);
    }
    let inv = 1.0 / count.max(1) as f64;
    grads.iter_mut().for_each(|g| g.scale(inv));
    Ok((loss * inv, grads))
}

/// Adam with gradient clipping and condition dropout. Keeps the parameters
/// of the epoch with the lowest validation loss (training loss when `val`
/// is empty).
pub fn train<M: SeqModel>(
    model: &mut M,
    train: &[TrainSample],
    val: &[TrainSample],
    cfg: &TrainConfig,
    lib: &OpLibrary,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainReport> {
    if train.is_empty() {
        return Err(Error::EmptyCorpus("loading training samples".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let mut adam = Adam::new(model.params(), cfg.learning_rate);
    let mut rng = rng_for(cfg.seed, 0x7a11);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best: Option<(usize, f64, Params)> = None;
    let mut report = TrainReport {
        epochs: Vec::new(),
        best_epoch: 0,
        best_val_loss: f64::INFINITY,
    };
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut batches, mut norm_sum) = (0.0, 0usize, 0.0);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&TrainSample> = chunk.iter().map(|&i| &train[i]).collect();
            let drops: Vec<bool> = batch.iter().map(|_| rng.random::<f64>() < cfg.cond_dropout).collect();
            let (loss, mut grads) = batch_gradient(model, &batch, &drops, lib)?;
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, loss });
            }
            let norm = global_norm(&grads);
            if !norm.is_finite() {
                return Err(Error::Divergence { epoch, loss: norm });
            }
            if cfg.grad_clip > 0.0 && norm > cfg.grad_clip {
                let s = cfg.grad_clip / norm;
                grads.iter_mut().for_each(|g| g.scale(s));
            }
            adam.step(model.params_mut(), &grads);
            loss_sum += loss;
            norm_sum += norm;
            batches += 1;
        }
        let train_loss = loss_sum / batches as f64;
        let val_loss = if val.is_empty() {
            train_loss
        } else {
            evaluate_loss(model, val, lib)?
        };
        if !val_loss.is_finite() {
            return Err(Error::Divergence { epoch, loss: val_loss });
        }
        let log = EpochLog {
            epoch,
            train_loss,
            val_loss,
            grad_norm: norm_sum / batches as f64,
        };
        on_epoch(&log);
        report.epochs.push(log);
        if best.as_ref().is_none_or(|b| val_loss < b.1) {
            best = Some((epoch, val_loss, model.params().clone()));
        } else if cfg.patience > 0 && epoch - best.as_ref().map_or(0, |b| b.0) >= cfg.patience {
            break;
        }
    }
    if let Some((epoch, loss, params)) = best {
        *model.params_mut() = params;
        report.best_epoch = epoch;
        report.best_val_loss = loss;
    }
    Ok(report)
}

/// Training records converted for one stack.
pub fn stack_samples(
    stack: &super::ModelStack,
    records: &[crate::tokenizer::ShardRecord],
    lib: &OpLibrary,
) -> Result<Vec<TrainSample>> {
    records
        .par_iter()
        .map(|r| TrainSample::from_record(r, lib, stack.order, &stack.cond_norm))
        .collect()
}

/// Fits the condition normalization on `train`, then trains the node, edge
/// and parameter models in turn. `on_epoch` receives the model name.
pub fn train_stack(
    stack: &mut super::ModelStack,
    train_records: &[crate::tokenizer::ShardRecord],
    val_records: &[crate::tokenizer::ShardRecord],
    cfg: &TrainConfig,
    lib: &OpLibrary,
    mut on_epoch: impl FnMut(super::ModelKind, &EpochLog),
) -> Result<Vec<(super::ModelKind, TrainReport)>> {
    use super::ModelKind;
    if train_records.is_empty() {
        return Err(Error::EmptyCorpus("loading training records".into()));
    }
    let conds: Vec<&[f32]> = train_records.iter().map(|r| r.cond.as_slice()).collect();
    if conds.iter().any(|c| c.len() != stack.config.cond_dim) {
        return Err(Error::Config(format!("condition width differs from {}", stack.config.cond_dim)));
    }
    stack.cond_norm = super::CondNorm::fit(&conds, stack.config.cond_dim);
    let tr = stack_samples(stack, train_records, lib)?;
    let va = stack_samples(stack, val_records, lib)?;
    let mut reports = Vec::new();
    for kind in ModelKind::ALL {
        let log = |e: &EpochLog| on_epoch(kind, e);
        let report = match kind {
            ModelKind::Node => train(&mut stack.node, &tr, &va, cfg, lib, log)?,
            ModelKind::Edge => train(&mut stack.edge, &tr, &va, cfg, lib, log)?,
            ModelKind::Param => train(&mut stack.param, &tr, &va, cfg, lib, log)?,
        };
        reports.push((kind, report));
    }
    Ok(reports)
}
