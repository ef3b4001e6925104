//! Linear-probe and end-to-end finetuning with binary cross-entropy.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{
    config_hash, init_backbone, BackboneConfig, Checkpoint, InitLineage, LineageStep, Model, Provenance, Scalar, Tap,
    Tape, Tensor,
};
use crate::data::DatasetHandle;
use crate::error::{Error, Result};
use crate::eval::{weighted_auroc, PredictionSet};
use crate::optim::{CosineAnnealing, Optimizer, OptimizerConfig};
use crate::seed::{self, TAG_SHUFFLE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinetuneMode {
    /// Only the classifier head is trained.
    Linear,
    EndToEnd,
}

impl FinetuneMode {
    pub fn as_str(self) -> &'static str {
        match self {
            FinetuneMode::Linear => "linear",
            FinetuneMode::EndToEnd => "end_to_end",
        }
    }
}

/// End-to-end epoch grid.
pub const EPOCH_GRID: [usize; 4] = [25, 50, 100, 200];
pub const LINEAR_EPOCHS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    pub mode: FinetuneMode,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
}

impl FinetuneConfig {
    /// Small-domain recipe: batch 16, LR 0.001, SGD with momentum.
    pub fn small_domain(mode: FinetuneMode, seed: u64) -> Self {
        Self {
            mode,
            epochs: LINEAR_EPOCHS,
            batch_size: 16,
            lr: 0.001,
            optimizer: OptimizerConfig::sgd(),
            seed,
        }
    }

    /// Large-domain recipe: batch 48, LR 0.0005, Adam.
    pub fn large_domain(mode: FinetuneMode, seed: u64) -> Self {
        Self {
            mode,
            epochs: LINEAR_EPOCHS,
            batch_size: 48,
            lr: 0.0005,
            optimizer: OptimizerConfig::adam(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Configuration("epochs and batch size must be positive".into()));
        }
        if !(self.lr >= 0.0) {
            return Err(Error::Configuration(format!("learning rate {} must be >= 0", self.lr)));
        }
        self.optimizer.validate()
    }
}

fn check_labels(labels: &[u8]) -> Result<()> {
    if labels.iter().any(|&y| y > 1) {
        return Err(Error::invalid("labels must be 0 or 1"));
    }
    Ok(())
}

/// Elementwise `max(z, 0) - z y + ln(1 + exp(-|z|))`.
fn bce_element<T: Scalar>(z: T, y: T) -> T {
    z.max(T::zero()) - z * y + (-z.abs()).exp().ln_1p()
}

fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// Mean binary cross-entropy over all logits.
pub fn bce_loss<T: Scalar>(logits: &[T], labels: &[u8]) -> Result<T> {
    bce_loss_with_grad(logits, labels).map(|(l, _)| l)
}

/// Mean binary cross-entropy and its gradient `(sigmoid(z) - y) / count`.
pub fn bce_loss_with_grad<T: Scalar>(logits: &[T], labels: &[u8]) -> Result<(T, Vec<T>)> {
    if logits.len() != labels.len() || logits.is_empty() {
        return Err(Error::invalid("logits and labels differ in length"));
    }
    check_labels(labels)?;
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(Error::Numeric("non-finite logit".into()));
    }
    let inv = T::one() / T::of(logits.len() as f64);
    let mut loss = T::zero();
    let grad = logits
        .iter()
        .zip(labels)
        .map(|(&z, &y)| {
            let y = T::of(f64::from(y));
            loss += bce_element(z, y);
            (sigmoid(z) - y) * inv
        })
        .collect();
    Ok((loss * inv, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_weighted_auroc: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub model: Model,
    pub mode: FinetuneMode,
    pub provenance: Provenance,
    pub history: Vec<EpochRecord>,
}

impl TrainedModel {
    /// Sigmoid scores for the labeled samples of `dataset`.
    pub fn predict(&self, dataset: &DatasetHandle, run: &str) -> Result<PredictionSet> {
        predict(&self.model, dataset, run)
    }

    pub fn final_val_metric(&self) -> Option<f64> {
        self.history.last().and_then(|r| r.val_weighted_auroc)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        self.model.to_checkpoint(self.provenance.clone())
    }
}

fn labeled_rows(dataset: &DatasetHandle) -> (Vec<Tensor<f32>>, Vec<u8>) {
    let labeled: Vec<_> = dataset.samples.iter().filter(|s| s.labels.is_some()).collect();
    let images = labeled.iter().map(|s| Tensor::from_image(&s.pixels)).collect();
    let labels = labeled
        .iter()
        .flat_map(|s| s.labels.clone().unwrap_or_default())
        .collect();
    (images, labels)
}

/// Sigmoid scores of `model` for the labeled samples of `dataset`.
pub fn predict(model: &Model, dataset: &DatasetHandle, run: &str) -> Result<PredictionSet> {
    let (images, labels) = labeled_rows(dataset);
    let logits = model.logits(&images)?;
    scores_from_logits(&logits, labels, model.config.head_arity, &dataset.name, run)
}

fn scores_from_logits(
    logits: &[Vec<f32>],
    labels: Vec<u8>,
    arity: usize,
    dataset: &str,
    run: &str,
) -> Result<PredictionSet> {
    let scores = logits.iter().flatten().map(|&z| sigmoid(f64::from(z))).collect();
    PredictionSet::new(scores, labels, arity, dataset, run)
}

/// Weighted AUROC on `val`, or `None` when it is undefined.
fn val_metric(model: &Model, val: Option<(&[Tensor<f32>], &[Vec<f32>], &[u8])>, linear: bool) -> Result<Option<f64>> {
    let Some((images, feats, labels)) = val else {
        return Ok(None);
    };
    let logits: Vec<Vec<f32>> = if linear {
        feats.iter().map(|f| model.head_logits(f)).collect()
    } else {
        model.logits(images)?
    };
    let p = scores_from_logits(&logits, labels.to_vec(), model.config.head_arity, "val", "")?;
    Ok(weighted_auroc(&p).ok())
}

fn pooled_all(model: &Model, images: &[Tensor<f32>]) -> Result<Vec<Vec<f32>>> {
    images.par_iter().map(|x| model.pooled_features(x)).collect()
}

/// Trains the classifier head (and the trunk in end-to-end mode) of a
/// fresh model initialized from `checkpoint`.
///
/// Only labeled samples of `train` are used. The head is re-drawn from the
/// configured seed, so its arity follows `train.task_arity`. Linear mode
/// runs the head on cached pooled features, which are computed by the
/// same code path as a full forward pass.
pub fn finetune(
    checkpoint: &Checkpoint,
    train: &DatasetHandle,
    val: Option<&DatasetHandle>,
    config: &FinetuneConfig,
) -> Result<TrainedModel> {
    config.validate()?;
    let (images, labels) = labeled_rows(train);
    if images.is_empty() {
        return Err(Error::Configuration(format!("no labeled samples in {}", train.name)));
    }
    let arity = train.task_arity;
    let backbone: BackboneConfig = checkpoint.config.with_head_arity(arity);
    let mut model = init_backbone(&backbone, config.seed, Some(checkpoint))?;
    model.reset_head(config.seed);
    let linear = config.mode == FinetuneMode::Linear;
    if linear {
        model.freeze_all_but_head();
    } else {
        model.unfreeze_all();
    }

    let train_feats = if linear {
        pooled_all(&model, &images)?
    } else {
        Vec::new()
    };
    let val_rows = val.map(labeled_rows);
    if let (Some(v), Some((_, vl))) = (val, &val_rows) {
        if v.task_arity != arity {
            return Err(Error::invalid(format!("validation arity {} != {arity}", v.task_arity)));
        }
        check_labels(vl)?;
    }
    let val_feats = match (&val_rows, linear) {
        (Some((vi, _)), true) => pooled_all(&model, vi)?,
        _ => Vec::new(),
    };

    let n = images.len();
    let steps_per_epoch = n.div_ceil(config.batch_size);
    let schedule = CosineAnnealing {
        base_lr: config.lr,
        total_steps: steps_per_epoch * config.epochs,
    };
    let mut optimizer = Optimizer::new(config.optimizer, &model.params);
    let head_w = model.params.id("head.weight").expect("head");
    let head_b = model.params.id("head.bias").expect("head");
    let mut history = Vec::with_capacity(config.epochs);
    let mut step = 0;
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut seed::rng(config.seed, &[TAG_SHUFFLE, epoch as u64]));
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            let scale = 1.0 / (batch.len() * arity) as f32;
            let m = &model;
            let (loss, grads) = m.batch_gradients(batch.len(), |j, grads| {
                let i = batch[j];
                let y = &labels[i * arity..(i + 1) * arity];
                if linear {
                    let feats = &train_feats[i];
                    let logits = m.head_logits(feats);
                    let (loss, g) = bce_loss_with_grad(&logits, y)?;
                    let dz: Vec<f32> = g.iter().map(|v| v * arity as f32 * scale).collect();
                    let dim = feats.len();
                    let gw = grads.buf_mut(head_w);
                    for (c, &d) in dz.iter().enumerate() {
                        for (w, &f) in gw[c * dim..(c + 1) * dim].iter_mut().zip(feats) {
                            *w += d * f;
                        }
                    }
                    for (b, &d) in grads.buf_mut(head_b).iter_mut().zip(&dz) {
                        *b += d;
                    }
                    Ok(loss)
                } else {
                    let mut tape = Tape::new(&m.params);
                    let input = tape.input(images[i].clone());
                    let nodes = m.forward_tape(&mut tape, input, Tap::Db4);
                    let z = m.head_tape(&mut tape, nodes.features);
                    let (loss, g) = bce_loss_with_grad(&tape.value(z).data, y)?;
                    let dz: Vec<f32> = g.iter().map(|v| v * arity as f32 * scale).collect();
                    tape.backward(z, &dz, grads);
                    Ok(loss)
                }
            })?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("training loss diverged in epoch {epoch}")));
            }
            epoch_loss += f64::from(loss);
            optimizer.step(&mut model.params, &grads, schedule.lr(step));
            step += 1;
        }
        let val_view = val_rows
            .as_ref()
            .map(|(vi, vl)| (vi.as_slice(), val_feats.as_slice(), vl.as_slice()));
        history.push(EpochRecord {
            epoch,
            train_loss: epoch_loss / n as f64,
            val_weighted_auroc: val_metric(&model, val_view, linear)?,
        });
    }
    let provenance = checkpoint.provenance.then(LineageStep {
        init: InitLineage::Finetune {
            dataset: train.name.clone(),
            mode: config.mode.as_str().into(),
        },
        config_hash: config_hash(config),
        seed: config.seed,
        epochs: config.epochs,
    });
    Ok(TrainedModel {
        model,
        mode: config.mode,
        provenance,
        history,
    })
}

/// Writes `epoch,train_loss,val_weighted_auroc` rows.
pub fn write_history(path: &std::path::Path, history: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::load(path, e.to_string()))?;
    for r in history {
        w.serialize(r).map_err(|e| Error::load(path, e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub epochs: usize,
    pub final_val: Option<f64>,
    pub test: Option<f64>,
}

/// Trains one model per epoch count from the same checkpoint and seed and
/// keeps the one with the highest final validation metric (first on ties).
pub fn epoch_sweep(
    checkpoint: &Checkpoint,
    train: &DatasetHandle,
    val: Option<&DatasetHandle>,
    test: Option<&DatasetHandle>,
    base: &FinetuneConfig,
    grid: &[usize],
) -> Result<(TrainedModel, Vec<SweepRow>)> {
    if grid.is_empty() {
        return Err(Error::Configuration("empty epoch grid".into()));
    }
    let mut best: Option<TrainedModel> = None;
    let mut rows = Vec::with_capacity(grid.len());
    for &epochs in grid {
        let model = finetune(checkpoint, train, val, &FinetuneConfig { epochs, ..*base })?;
        let test_metric = match test {
            Some(t) => weighted_auroc(&model.predict(t, "sweep")?).ok(),
            None => None,
        };
        let final_val = model.final_val_metric();
        rows.push(SweepRow {
            epochs,
            final_val,
            test: test_metric,
        });
        let better = match &best {
            None => true,
            Some(b) => final_val.unwrap_or(f64::NEG_INFINITY) > b.final_val_metric().unwrap_or(f64::NEG_INFINITY),
        };
        if better {
            best = Some(model);
        }
    }
    Ok((best.expect("nonempty grid"), rows))
}

/// Supervised end-to-end training from random initialization; the result
/// serves as the generic-supervised initialization for downstream runs.
pub fn supervised_pretrain(
    dataset: &DatasetHandle,
    backbone: &BackboneConfig,
    config: &FinetuneConfig,
) -> Result<Checkpoint> {
    let random = Model::random(&backbone.with_head_arity(dataset.task_arity), config.seed)?
        .to_checkpoint(Provenance::random(config.seed));
    let trained = finetune(
        &random,
        dataset,
        None,
        &FinetuneConfig {
            mode: FinetuneMode::EndToEnd,
            ..*config
        },
    )?;
    let provenance = Provenance::random(config.seed).then(LineageStep {
        init: InitLineage::GenericSupervised {
            dataset: dataset.name.clone(),
        },
        config_hash: config_hash(config),
        seed: config.seed,
        epochs: config.epochs,
    });
    Ok(trained.model.to_checkpoint(provenance))
}

#[cfg(test)]
mod tests;
