//! Image encoder with named feature taps, projection head, classifier head,
//! freezing and checkpoints.

mod arch;
mod checkpoint;
mod params;
mod tape;
mod tensor;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{self, TAG_HEAD, TAG_INIT};

pub use checkpoint::{config_hash, load_checkpoint, save_checkpoint, Checkpoint, InitLineage, LineageStep, Provenance};
pub use params::{Grads, NamedArray, Param, ParamId, ParamStore, ParameterSnapshot};
pub use tape::{NodeId, Tape};
pub use tensor::{Scalar, Tensor};

pub(crate) use tape::linear_forward;

/// The training precision.
pub type Model = Backbone<f32>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    TinyCnn,
    Densenet121,
}

/// Named feature taps: the first convolution and the last activation of
/// each of the four blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Tap {
    #[serde(rename = "CV1")]
    Cv1,
    #[serde(rename = "DB1")]
    Db1,
    #[serde(rename = "DB2")]
    Db2,
    #[serde(rename = "DB3")]
    Db3,
    #[serde(rename = "DB4")]
    Db4,
}

impl Tap {
    pub const ALL: [Tap; 5] = [Tap::Cv1, Tap::Db1, Tap::Db2, Tap::Db3, Tap::Db4];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        ["CV1", "DB1", "DB2", "DB3", "DB4"][self.index()]
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|t| t.name().eq_ignore_ascii_case(name))
            .ok_or_else(|| Error::invalid(format!("unknown tap `{name}` (expected CV1, DB1..DB4)")))
    }
}

impl std::fmt::Display for Tap {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub architecture: Architecture,
    #[serde(default = "default_taps")]
    pub tap_names: Vec<Tap>,
    pub embed_dim: usize,
    pub head_arity: usize,
    /// Channel widths of CV1, DB1..DB4 (tiny_cnn only).
    #[serde(default = "default_widths")]
    pub widths: Vec<usize>,
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
}

fn default_taps() -> Vec<Tap> {
    Tap::ALL.to_vec()
}

fn default_widths() -> Vec<usize> {
    vec![16, 24, 32, 48, 64]
}

fn default_in_channels() -> usize {
    3
}

impl BackboneConfig {
    pub fn tiny(head_arity: usize) -> Self {
        Self {
            architecture: Architecture::TinyCnn,
            tap_names: default_taps(),
            embed_dim: 64,
            head_arity,
            widths: default_widths(),
            in_channels: 3,
        }
    }

    pub fn densenet121(head_arity: usize) -> Self {
        Self {
            architecture: Architecture::Densenet121,
            embed_dim: 128,
            ..Self::tiny(head_arity)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.head_arity == 0 {
            return Err(Error::invalid("embed_dim and head_arity must be >= 1"));
        }
        if self.in_channels == 0 {
            return Err(Error::invalid("in_channels must be >= 1"));
        }
        if self.architecture == Architecture::TinyCnn && (self.widths.len() != 5 || self.widths.contains(&0)) {
            return Err(Error::invalid("tiny_cnn needs five positive widths (CV1, DB1..DB4)"));
        }
        Ok(())
    }

    pub fn with_head_arity(&self, head_arity: usize) -> Self {
        Self {
            head_arity,
            ..self.clone()
        }
    }
}

pub(crate) fn is_head(name: &str) -> bool {
    name.starts_with("head.")
}

/// An encoder with its projection and classifier heads.
#[derive(Debug, Clone)]
pub struct Backbone<T: Scalar> {
    pub config: BackboneConfig,
    pub params: ParamStore<T>,
    layout: arch::Layout,
    heads: arch::Heads,
    feature_dim: usize,
}

/// Outputs of one tape forward pass.
pub struct ForwardNodes {
    pub features: NodeId,
    taps: arch::TrunkNodes,
}

impl ForwardNodes {
    pub fn tap(&self, tap: Tap) -> NodeId {
        self.taps.get(tap)
    }
}

impl<T: Scalar> Backbone<T> {
    /// Random initialization, deterministic in `(config, seed)`.
    pub fn random(config: &BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut rng = seed::rng(seed, &[TAG_INIT]);
        let (layout, feature_dim) = arch::build_trunk(config, &mut params, &mut rng);
        let (w1, b1) = arch::linear_init(&mut rng, feature_dim, feature_dim);
        let (w2, b2) = arch::linear_init(&mut rng, config.embed_dim, feature_dim);
        let proj1 = (
            params.push("proj.fc1.weight", vec![feature_dim, feature_dim], w1),
            params.push("proj.fc1.bias", vec![feature_dim], b1),
        );
        let proj2 = (
            params.push("proj.fc2.weight", vec![config.embed_dim, feature_dim], w2),
            params.push("proj.fc2.bias", vec![config.embed_dim], b2),
        );
        let (wh, bh) = arch::linear_init(&mut seed::rng(seed, &[TAG_HEAD]), config.head_arity, feature_dim);
        let head = (
            params.push("head.weight", vec![config.head_arity, feature_dim], wh),
            params.push("head.bias", vec![config.head_arity], bh),
        );
        Ok(Self {
            config: config.clone(),
            params,
            layout,
            heads: arch::Heads { proj1, proj2, head },
            feature_dim,
        })
    }

    pub fn cast<U: Scalar>(&self) -> Backbone<U> {
        Backbone {
            config: self.config.clone(),
            params: self.params.cast(),
            layout: self.layout.clone(),
            heads: self.heads.clone(),
            feature_dim: self.feature_dim,
        }
    }

    /// Width of the pooled DB4 features that feed both heads.
    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    /// Re-draws the classifier head from `seed`.
    pub fn reset_head(&mut self, seed: u64) {
        let (w, b) = arch::linear_init::<T>(
            &mut seed::rng(seed, &[TAG_HEAD]),
            self.config.head_arity,
            self.feature_dim,
        );
        self.params.by_name_mut("head.weight").expect("head").data = w;
        self.params.by_name_mut("head.bias").expect("head").data = b;
    }

    /// Marks every parameter except the final linear classifier as frozen.
    pub fn freeze_all_but_head(&mut self) {
        for p in self.params.iter_mut() {
            p.trainable = is_head(&p.name);
        }
    }

    pub fn unfreeze_all(&mut self) {
        for p in self.params.iter_mut() {
            p.trainable = true;
        }
    }

    pub fn snapshot(&self) -> ParameterSnapshot {
        self.params.snapshot()
    }

    /// Everything except the classifier head.
    pub fn trunk_snapshot(&self) -> ParameterSnapshot {
        self.params.snapshot().filter(|n| !is_head(n))
    }

    /// Records the trunk (up to `stop`) and, when `stop` is DB4, the pooled
    /// features.
    pub fn forward_tape(&self, tape: &mut Tape<'_, T>, x: NodeId, stop: Tap) -> ForwardNodes {
        let taps = arch::trunk_forward(&self.layout, tape, x, stop);
        let last = taps.taps[stop.index()].expect("stop tap computed");
        let features = if stop == Tap::Db4 {
            tape.global_avg_pool(last)
        } else {
            last
        };
        ForwardNodes { features, taps }
    }

    pub fn embed_tape(&self, tape: &mut Tape<'_, T>, features: NodeId) -> NodeId {
        let (w1, b1) = self.heads.proj1;
        let (w2, b2) = self.heads.proj2;
        let h = tape.linear(features, w1, b1);
        let h = tape.relu(h);
        let z = tape.linear(h, w2, b2);
        tape.l2_normalize(z)
    }

    pub fn head_tape(&self, tape: &mut Tape<'_, T>, features: NodeId) -> NodeId {
        let (w, b) = self.heads.head;
        tape.linear(features, w, b)
    }

    /// Classifier logits from precomputed pooled features.
    pub fn head_logits(&self, features: &[T]) -> Vec<T> {
        let (w, b) = self.heads.head;
        linear_forward(&self.params.get(w).data, &self.params.get(b).data, features)
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let ok = x.shape.len() == 3 && x.shape[0] == self.config.in_channels && x.shape[1] >= 8 && x.shape[2] >= 8;
        if !ok {
            return Err(Error::invalid(format!(
                "input shape {:?} incompatible with {} input channels (min 8x8)",
                x.shape, self.config.in_channels
            )));
        }
        if x.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite input pixel".into()));
        }
        Ok(())
    }

    /// Activations at `tap` for one image.
    pub fn tap_activation(&self, x: &Tensor<T>, tap: Tap) -> Result<Tensor<T>> {
        if !self.config.tap_names.contains(&tap) {
            return Err(Error::invalid(format!("tap {tap} not configured")));
        }
        self.check_input(x)?;
        let mut tape = Tape::new(&self.params);
        let input = tape.input(x.clone());
        let nodes = self.forward_tape(&mut tape, input, tap);
        Ok(tape.value(nodes.tap(tap)).clone())
    }

    /// Activations at several taps from a single forward pass, in the order
    /// of `taps`.
    pub fn tap_activations(&self, x: &Tensor<T>, taps: &[Tap]) -> Result<Vec<Tensor<T>>> {
        if let Some(t) = taps.iter().find(|t| !self.config.tap_names.contains(t)) {
            return Err(Error::invalid(format!("tap {t} not configured")));
        }
        let Some(&deepest) = taps.iter().max() else {
            return Ok(Vec::new());
        };
        self.check_input(x)?;
        let mut tape = Tape::new(&self.params);
        let input = tape.input(x.clone());
        let nodes = self.forward_tape(&mut tape, input, deepest);
        Ok(taps.iter().map(|&t| tape.value(nodes.tap(t)).clone()).collect())
    }

    /// Activations at `tap` for a batch, one `[C, H', W']` tensor per image.
    pub fn forward_features(&self, batch: &[Tensor<T>], tap: Tap) -> Result<Vec<Tensor<T>>> {
        batch.par_iter().map(|x| self.tap_activation(x, tap)).collect()
    }

    /// Globally pooled DB4 features for one image.
    pub fn pooled_features(&self, x: &Tensor<T>) -> Result<Vec<T>> {
        self.check_input(x)?;
        let mut tape = Tape::new(&self.params);
        let input = tape.input(x.clone());
        let nodes = self.forward_tape(&mut tape, input, Tap::Db4);
        Ok(tape.value(nodes.features).data.clone())
    }

    /// Unit-norm projection embeddings, one row per image.
    pub fn embed(&self, batch: &[Tensor<T>]) -> Result<Vec<Vec<T>>> {
        batch
            .par_iter()
            .map(|x| {
                self.check_input(x)?;
                let mut tape = Tape::new(&self.params);
                let input = tape.input(x.clone());
                let nodes = self.forward_tape(&mut tape, input, Tap::Db4);
                let z = self.embed_tape(&mut tape, nodes.features);
                Ok(tape.value(z).data.clone())
            })
            .collect()
    }

    /// Classifier logits, one row per image.
    pub fn logits(&self, batch: &[Tensor<T>]) -> Result<Vec<Vec<T>>> {
        batch
            .par_iter()
            .map(|x| self.pooled_features(x).map(|f| self.head_logits(&f)))
            .collect()
    }

    /// Sums per-sample losses and gradients over `n` samples.
    ///
    /// Samples are grouped into fixed chunks of eight; chunks may run on any
    /// thread but are reduced in index order, so the result is independent
    /// of the thread pool.
    pub fn batch_gradients<F>(&self, n: usize, per_sample: F) -> Result<(T, Grads<T>)>
    where
        F: Fn(usize, &mut Grads<T>) -> Result<T> + Sync,
    {
        const CHUNK: usize = 8;
        let chunks: Vec<Result<(T, Grads<T>)>> = (0..n.div_ceil(CHUNK))
            .into_par_iter()
            .map(|c| {
                let mut grads = self.params.zero_grads();
                let mut loss = T::zero();
                for i in c * CHUNK..((c + 1) * CHUNK).min(n) {
                    loss += per_sample(i, &mut grads)?;
                }
                Ok((loss, grads))
            })
            .collect();
        let mut total = self.params.zero_grads();
        let mut loss = T::zero();
        for chunk in chunks {
            let (l, g) = chunk?;
            loss += l;
            total.add_assign(&g);
        }
        Ok((loss, total))
    }

    pub fn to_checkpoint(&self, provenance: Provenance) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            snapshot: self.snapshot(),
            provenance,
        }
    }
}

impl Backbone<f32> {
    /// Overwrites parameters from a checkpoint.
    ///
    /// Every non-head parameter must be present with the same shape. Head
    /// parameters are copied when congruent and otherwise keep their fresh
    /// initialization (a new task arity).
    pub fn load_snapshot(&mut self, snapshot: &ParameterSnapshot) -> Result<()> {
        for p in self.params.iter() {
            match snapshot.get(&p.name) {
                Some(src) if src.shape == p.shape => {}
                _ if is_head(&p.name) => {}
                Some(src) => {
                    return Err(Error::IncompatibleCheckpoint {
                        param: p.name.clone(),
                        reason: format!("shape {:?} in checkpoint, {:?} expected", src.shape, p.shape),
                    })
                }
                None => {
                    return Err(Error::IncompatibleCheckpoint {
                        param: p.name.clone(),
                        reason: "missing from checkpoint".into(),
                    })
                }
            }
        }
        if let Some(extra) = snapshot
            .params
            .iter()
            .find(|s| !is_head(&s.name) && self.params.by_name(&s.name).is_none())
        {
            return Err(Error::IncompatibleCheckpoint {
                param: extra.name.clone(),
                reason: "not part of this architecture".into(),
            });
        }
        for p in self.params.iter_mut() {
            if let Some(src) = snapshot.get(&p.name) {
                if src.shape == p.shape {
                    p.data.copy_from_slice(&src.data);
                }
            }
        }
        Ok(())
    }
}

/// Random or checkpoint initialization.
pub fn init_backbone(config: &BackboneConfig, seed: u64, init: Option<&Checkpoint>) -> Result<Model> {
    let mut model = Model::random(config, seed)?;
    if let Some(ckpt) = init {
        model.load_snapshot(&ckpt.snapshot)?;
    }
    Ok(model)
}

#[cfg(test)]
mod tests;
