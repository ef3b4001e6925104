//! Momentum-contrast pretraining.
//!
//! A query encoder is trained with InfoNCE against one positive key (the
//! key encoder's embedding of a second view of the same image) and the `K`
//! negatives held in a FIFO queue. The key encoder tracks the query encoder
//! as an exponential moving average and never receives gradients.

use rand::seq::{IndexedRandom, SliceRandom};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::backbone::{
    config_hash, init_backbone, BackboneConfig, Checkpoint, InitLineage, LineageStep, Model, ParamStore, Provenance,
    Scalar, Tap, Tape, Tensor,
};
use crate::data::{make_view_pair, AugmentationPolicy, DatasetHandle};
use crate::error::{Error, Result};
use crate::optim::{CosineAnnealing, Optimizer, OptimizerConfig, OptimizerKind};
use crate::seed::{self, TAG_LIMITED, TAG_QUEUE, TAG_SHUFFLE};

/// Unit-norm tolerance for keys entering the queue.
const KEY_NORM_TOL: f64 = 1e-5;

/// Missing fields deserialize to the [`Default`] values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MoCoConfig {
    pub temperature: f64,
    pub queue_size: usize,
    /// Key-encoder momentum `m`.
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub optimizer_momentum: f64,
    pub augmentation: AugmentationPolicy,
}

impl Default for MoCoConfig {
    fn default() -> Self {
        Self {
            temperature: 0.2,
            queue_size: 4096,
            momentum: 0.999,
            epochs: 100,
            batch_size: 64,
            lr: 0.002,
            weight_decay: 1e-4,
            optimizer_momentum: 0.9,
            augmentation: AugmentationPolicy::moco_v2(),
        }
    }
}

impl MoCoConfig {
    /// Small-domain schedule: 500 epochs, batch 64, LR 0.002.
    pub fn small_domain() -> Self {
        Self {
            epochs: 500,
            batch_size: 64,
            ..Self::default()
        }
    }

    /// Large-domain schedule: 100 epochs, batch 256, LR 0.002.
    pub fn large_domain() -> Self {
        Self {
            epochs: 100,
            batch_size: 256,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::invalid(format!("temperature {} must be > 0", self.temperature)));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!("momentum {} must be in [0,1]", self.momentum)));
        }
        if self.batch_size == 0 || self.queue_size < self.batch_size || self.queue_size % self.batch_size != 0 {
            return Err(Error::Configuration(format!(
                "queue size {} must be >= and divisible by batch size {}",
                self.queue_size, self.batch_size
            )));
        }
        if self.lr < 0.0 || self.weight_decay < 0.0 || !(0.0..1.0).contains(&self.optimizer_momentum) {
            return Err(Error::Configuration("invalid optimizer settings".into()));
        }
        Ok(())
    }

    fn optimizer(&self) -> OptimizerConfig {
        OptimizerConfig {
            kind: OptimizerKind::SgdMomentum,
            weight_decay: self.weight_decay,
            momentum: self.optimizer_momentum,
            ..OptimizerConfig::sgd()
        }
    }
}

fn check_finite<T: Scalar>(what: &str, xs: &[T]) -> Result<()> {
    if xs.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("non-finite value in {what}")))
    }
}

/// Per-sample InfoNCE with gradients.
///
/// Returns `(loss, dL/dq, dL/dk_pos)` where the softmax runs over the
/// positive logit (index 0) followed by the `K` queue logits.
pub fn infonce_sample<T: Scalar>(q: &[T], k_pos: &[T], queue: &[T], tau: T) -> (T, Vec<T>, Vec<T>) {
    let d = q.len();
    let k = queue.len() / d;
    let mut logits = Vec::with_capacity(k + 1);
    logits.push(q.iter().zip(k_pos).map(|(&a, &b)| a * b).sum::<T>() / tau);
    let mut row_logits = vec![T::zero(); k];
    T::gemm(k, d, 1, queue, false, q, false, &mut row_logits, false);
    logits.extend(row_logits.into_iter().map(|l| l / tau));
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    let loss = total.ln() + max - logits[0];
    let probs: Vec<T> = exps.iter().map(|&e| e / total).collect();

    // dq = ((p0 - 1) k_pos + sum_j p_j queue_j) / tau
    let mut dq: Vec<T> = k_pos.iter().map(|&v| (probs[0] - T::one()) * v).collect();
    T::gemm(1, k, d, &probs[1..], false, queue, false, &mut dq, true);
    for v in &mut dq {
        *v = *v / tau;
    }
    let dk = q.iter().map(|&v| (probs[0] - T::one()) * v / tau).collect();
    (loss.max(T::zero()), dq, dk)
}

fn check_infonce_args<T: Scalar>(q: &[T], k_pos: &[T], queue: &[T], dim: usize, tau: T) -> Result<()> {
    if !(tau > T::zero()) {
        return Err(Error::invalid("temperature must be > 0"));
    }
    if dim == 0 || q.len() % dim != 0 || q.len() != k_pos.len() || queue.len() % dim != 0 || q.is_empty() {
        return Err(Error::invalid("infonce: inconsistent shapes"));
    }
    check_finite("q", q)?;
    check_finite("k_pos", k_pos)?;
    check_finite("queue", queue)
}

/// Batch-mean InfoNCE for row-major `q`, `k_pos` (`N x dim`) and `queue`
/// (`K x dim`).
pub fn infonce_loss<T: Scalar>(q: &[T], k_pos: &[T], queue: &[T], dim: usize, tau: T) -> Result<T> {
    infonce_loss_with_grads(q, k_pos, queue, dim, tau).map(|(l, _, _)| l)
}

/// Batch-mean InfoNCE with gradients with respect to `q` and `k_pos`.
pub fn infonce_loss_with_grads<T: Scalar>(
    q: &[T],
    k_pos: &[T],
    queue: &[T],
    dim: usize,
    tau: T,
) -> Result<(T, Vec<T>, Vec<T>)> {
    check_infonce_args(q, k_pos, queue, dim, tau)?;
    let n = q.len() / dim;
    let inv_n = T::one() / T::of(n as f64);
    let mut loss = T::zero();
    let mut dq = Vec::with_capacity(q.len());
    let mut dk = Vec::with_capacity(q.len());
    for (qi, ki) in q.chunks(dim).zip(k_pos.chunks(dim)) {
        let (l, gq, gk) = infonce_sample(qi, ki, queue, tau);
        loss += l;
        dq.extend(gq.into_iter().map(|v| v * inv_n));
        dk.extend(gk.into_iter().map(|v| v * inv_n));
    }
    Ok((loss * inv_n, dq, dk))
}

/// `key <- m * key + (1 - m) * query`, elementwise.
pub fn momentum_update<T: Scalar>(key: &mut ParamStore<T>, query: &ParamStore<T>, m: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::invalid(format!("momentum {m} must be in [0,1]")));
    }
    if key.len() != query.len()
        || key
            .iter()
            .zip(query.iter())
            .any(|(a, b)| a.name != b.name || a.shape != b.shape)
    {
        return Err(Error::invalid("key and query parameters are not shape-congruent"));
    }
    let (mk, mq) = (T::of(m), T::of(1.0 - m));
    for (k, q) in key.iter_mut().zip(query.iter()) {
        for (a, &b) in k.data.iter_mut().zip(&q.data) {
            *a = mk * *a + mq * b;
        }
    }
    Ok(())
}

/// Query/key encoders plus the negative-key queue.
#[derive(Debug, Clone)]
pub struct MoCoState {
    pub query: Model,
    pub key: Model,
    /// Row-major `K x d` unit-norm keys.
    pub queue: Vec<f32>,
    pub queue_ptr: usize,
    pub step: usize,
    pub dim: usize,
}

impl MoCoState {
    /// Key encoder starts as a copy of the query encoder; the queue holds
    /// random unit vectors.
    pub fn new(query: Model, queue_size: usize, seed: u64) -> Self {
        let dim = query.config.embed_dim;
        let mut rng = seed::rng(seed, &[TAG_QUEUE]);
        let mut queue = Vec::with_capacity(queue_size * dim);
        for _ in 0..queue_size {
            let row: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            queue.extend(normalized_f32(&row));
        }
        Self {
            key: query.clone(),
            query,
            queue,
            queue_ptr: 0,
            step: 0,
            dim,
        }
    }

    pub fn queue_size(&self) -> usize {
        self.queue.len() / self.dim
    }

    pub fn queue_row(&self, i: usize) -> &[f32] {
        &self.queue[i * self.dim..(i + 1) * self.dim]
    }
}

fn normalized_f32<T: Scalar>(row: &[T]) -> Vec<f32> {
    let v: Vec<f64> = row.iter().map(|x| x.to_f64().unwrap_or(f64::NAN)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.iter().map(|x| (x / norm) as f32).collect()
}

/// Replaces the oldest `B` keys at the queue pointer and advances it by `B`
/// modulo `K`.
pub fn enqueue_dequeue(state: &mut MoCoState, new_keys: &[Vec<f32>]) -> Result<()> {
    let k = state.queue_size();
    let b = new_keys.len();
    if b == 0 || k % b != 0 {
        return Err(Error::invalid(format!(
            "batch of {b} keys does not divide queue size {k}"
        )));
    }
    for key in new_keys {
        if key.len() != state.dim {
            return Err(Error::invalid("key dimension mismatch"));
        }
        let norm = key.iter().map(|&x| f64::from(x).powi(2)).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > KEY_NORM_TOL {
            return Err(Error::ContractViolation(format!("key norm {norm} is not 1")));
        }
    }
    for (r, key) in new_keys.iter().enumerate() {
        let row = (state.queue_ptr + r) % k;
        state.queue[row * state.dim..(row + 1) * state.dim].copy_from_slice(key);
    }
    state.queue_ptr = (state.queue_ptr + b) % k;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
}

/// Writes `step,epoch,loss,lr` rows.
pub fn write_train_log(path: &std::path::Path, records: &[TrainLogRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::load(path, e.to_string()))?;
    for r in records {
        w.serialize(r).map_err(|e| Error::load(path, e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct PretrainOutput {
    pub checkpoint: Checkpoint,
    pub state: MoCoState,
    pub log: Vec<TrainLogRecord>,
}

/// One optimization step on a batch of sample indices.
fn train_step(
    state: &mut MoCoState,
    optimizer: &mut Optimizer<f32>,
    dataset: &DatasetHandle,
    batch: &[usize],
    config: &MoCoConfig,
    epoch: usize,
    lr: f64,
    seed: u64,
) -> Result<f64> {
    let views: Vec<(Tensor<f32>, Tensor<f32>)> = batch
        .iter()
        .map(|&i| {
            let (a, b) = make_view_pair(&dataset.samples[i], &config.augmentation, epoch as u64, seed);
            (Tensor::from_image(&a), Tensor::from_image(&b))
        })
        .collect();
    let key_inputs: Vec<Tensor<f32>> = views.iter().map(|(_, b)| b.clone()).collect();
    let keys: Vec<Vec<f32>> = state
        .key
        .embed(&key_inputs)?
        .iter()
        .map(|k| normalized_f32(k))
        .collect();

    let b = batch.len();
    let tau = config.temperature as f32;
    let inv_b = 1.0 / b as f32;
    let query = &state.query;
    let queue = &state.queue;
    let (loss_sum, grads) = query.batch_gradients(b, |j, grads| {
        let mut tape = Tape::new(&query.params);
        let input = tape.input(views[j].0.clone());
        let nodes = query.forward_tape(&mut tape, input, Tap::Db4);
        let z = query.embed_tape(&mut tape, nodes.features);
        let (loss, dq, _) = infonce_sample(&tape.value(z).data, &keys[j], queue, tau);
        let dq: Vec<f32> = dq.into_iter().map(|v| v * inv_b).collect();
        tape.backward(z, &dq, grads);
        Ok(loss)
    })?;
    let loss = f64::from(loss_sum) / b as f64;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("InfoNCE loss diverged at step {}", state.step)));
    }
    optimizer.step(&mut state.query.params, &grads, lr);
    momentum_update(&mut state.key.params, &state.query.params, config.momentum)?;
    enqueue_dequeue(state, &keys)?;
    state.step += 1;
    Ok(loss)
}

fn run_pretraining(
    dataset: &DatasetHandle,
    config: &MoCoConfig,
    backbone: &BackboneConfig,
    init: Option<&Checkpoint>,
    seed: u64,
    limited: Option<usize>,
) -> Result<PretrainOutput> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Configuration("pretraining dataset is empty".into()));
    }
    if dataset.len() < config.batch_size {
        return Err(Error::Configuration(format!(
            "dataset of {} images is smaller than batch size {}",
            dataset.len(),
            config.batch_size
        )));
    }
    let model = init_backbone(backbone, seed, init)?;
    let mut state = MoCoState::new(model, config.queue_size, seed);
    let mut optimizer = Optimizer::new(config.optimizer(), &state.query.params);
    let steps_per_epoch = dataset.len() / config.batch_size;
    let schedule = CosineAnnealing {
        base_lr: config.lr,
        total_steps: steps_per_epoch * config.epochs,
    };
    let mut log = Vec::with_capacity(schedule.total_steps);
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut seed::rng(seed, &[TAG_SHUFFLE, epoch as u64]));
        for batch in order.chunks_exact(config.batch_size) {
            let lr = schedule.lr(state.step);
            let step = state.step;
            let loss = train_step(&mut state, &mut optimizer, dataset, batch, config, epoch, lr, seed)?;
            log.push(TrainLogRecord { step, epoch, loss, lr });
        }
        if let Some(last) = log.last() {
            log::debug!("moco {} epoch {epoch}: loss {:.4}", dataset.name, last.loss);
        }
    }
    let base = init
        .map(|c| c.provenance.clone())
        .unwrap_or_else(|| Provenance::random(seed));
    let provenance = base.then(LineageStep {
        init: InitLineage::Moco {
            dataset: dataset.name.clone(),
            limited,
        },
        config_hash: config_hash(config),
        seed,
        epochs: config.epochs,
    });
    Ok(PretrainOutput {
        checkpoint: state.query.to_checkpoint(provenance),
        state,
        log,
    })
}

/// MoCo pretraining on every image of `dataset` (labels ignored).
pub fn pretrain(
    dataset: &DatasetHandle,
    config: &MoCoConfig,
    backbone: &BackboneConfig,
    init: Option<&Checkpoint>,
    seed: u64,
) -> Result<PretrainOutput> {
    run_pretraining(dataset, config, backbone, init, seed, None)
}

/// MoCo pretraining restricted to a deterministic subset of `n_labeled`
/// images, matching the unlabeled pool to the labeled one.
pub fn pretrain_limited(
    dataset: &DatasetHandle,
    n_labeled: usize,
    config: &MoCoConfig,
    backbone: &BackboneConfig,
    init: Option<&Checkpoint>,
    seed: u64,
) -> Result<PretrainOutput> {
    if n_labeled == 0 || n_labeled > dataset.len() {
        return Err(Error::invalid(format!(
            "n_labeled {n_labeled} must be in 1..={}",
            dataset.len()
        )));
    }
    if n_labeled == dataset.len() {
        return run_pretraining(dataset, config, backbone, init, seed, Some(n_labeled));
    }
    let subset = dataset.subset(&limited_subset(dataset.len(), n_labeled, seed), dataset.name.clone());
    run_pretraining(&subset, config, backbone, init, seed, Some(n_labeled))
}

/// Indices `pretrain_limited` would train on.
pub fn limited_subset(len: usize, n_labeled: usize, seed: u64) -> Vec<usize> {
    if n_labeled >= len {
        return (0..len).collect();
    }
    let all: Vec<usize> = (0..len).collect();
    let mut picked: Vec<usize> = all
        .choose_multiple(&mut seed::rng(seed, &[TAG_LIMITED]), n_labeled)
        .copied()
        .collect();
    picked.sort_unstable();
    picked
}
