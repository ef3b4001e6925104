//! Experiment configuration, read from TOML.
//!
//! Every table rejects unknown keys. Relative paths are resolved against
//! the directory holding the config file.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};

use mocolab::data::{MissingLabels, SynthParams, DEFAULT_IMAGE_SIZE};
use mocolab::finetune::EPOCH_GRID;
use mocolab::similarity::{CcaMean, SpatialMode, DEFAULT_SAMPLES, DEFAULT_THRESHOLD};
use mocolab::{
    Architecture, BackboneConfig, ClassWeighting, DomainTag, FinetuneConfig, FinetuneMode, MoCoConfig, OptimizerConfig,
    Tap,
};
use serde::{Deserialize, Serialize};

/// Name of the initialization that skips MoCo.
pub const BASELINE: &str = "baseline";

/// A configuration that failed to parse or validate.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "config error: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

fn bad(msg: impl Into<String>) -> ConfigError {
    ConfigError(msg.into())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Global seed; every stream in the run derives from it.
    pub seed: u64,
    #[serde(default)]
    pub backbone: BackboneSection,
    pub datasets: Vec<DatasetSpec>,
    pub init: InitSpec,
    /// MoCo hyperparameters shared by all pretraining runs.
    #[serde(default)]
    pub moco: MoCoConfig,
    #[serde(default)]
    pub pretraining: Vec<PretrainSpec>,
    pub target: TargetSpec,
    pub finetune: FinetuneSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub similarity: Option<SimilaritySection>,
    #[serde(default)]
    pub epoch_sweep: Option<SweepSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneSection {
    pub architecture: Architecture,
    pub embed_dim: usize,
    /// Channel widths of CV1, DB1..DB4 (tiny_cnn only).
    pub widths: Vec<usize>,
}

impl Default for BackboneSection {
    fn default() -> Self {
        let tiny = BackboneConfig::tiny(1);
        Self {
            architecture: Architecture::TinyCnn,
            embed_dim: tiny.embed_dim,
            widths: tiny.widths,
        }
    }
}

impl BackboneSection {
    pub fn to_config(&self, head_arity: usize) -> BackboneConfig {
        let base = match self.architecture {
            Architecture::TinyCnn => BackboneConfig::tiny(head_arity),
            Architecture::Densenet121 => BackboneConfig::densenet121(head_arity),
        };
        BackboneConfig {
            embed_dim: self.embed_dim,
            widths: self.widths.clone(),
            ..base
        }
    }
}

/// A named dataset: exactly one of `synthetic` or `folder`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub name: String,
    #[serde(default)]
    pub synthetic: Option<SynthSpec>,
    #[serde(default)]
    pub folder: Option<FolderSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub domain: DomainTag,
    pub n: usize,
    pub shift: f64,
    /// Defaults to a stream derived from the global seed and the name.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default = "default_image_size")]
    pub image_size: usize,
}

fn default_image_size() -> usize {
    DEFAULT_IMAGE_SIZE
}

impl SynthSpec {
    pub fn params(&self, seed: u64) -> SynthParams {
        SynthParams::new(self.domain, self.n, self.shift, seed).with_image_size(self.image_size)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FolderSpec {
    pub path: PathBuf,
    /// Defaults to `labels.csv` inside `path`.
    #[serde(default)]
    pub manifest: Option<PathBuf>,
    #[serde(default)]
    pub missing_labels: MissingLabels,
    #[serde(default)]
    pub resize: Option<u32>,
}

impl FolderSpec {
    pub fn manifest_path(&self) -> PathBuf {
        self.manifest.clone().unwrap_or_else(|| self.path.join("labels.csv"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    Random,
    GenericSupervised,
    Checkpoint,
}

/// The starting weights of every branch of the matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitSpec {
    pub kind: InitKind,
    /// Supervised dataset for `generic_supervised`.
    #[serde(default)]
    pub dataset: Option<String>,
    /// Weights file for `checkpoint`.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    #[serde(default = "TrainSpec::generic_supervised")]
    pub training: TrainSpec,
}

/// Optimization settings of one supervised training stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSpec {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: OptimizerConfig,
}

impl TrainSpec {
    pub fn generic_supervised() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            lr: 0.001,
            optimizer: OptimizerConfig::adam(),
        }
    }

    fn small_domain(mode: FinetuneMode) -> Self {
        let c = FinetuneConfig::small_domain(mode, 0);
        Self {
            epochs: c.epochs,
            batch_size: c.batch_size,
            lr: c.lr,
            optimizer: c.optimizer,
        }
    }

    pub fn linear() -> Self {
        Self::small_domain(FinetuneMode::Linear)
    }

    pub fn end_to_end() -> Self {
        Self::small_domain(FinetuneMode::EndToEnd)
    }

    pub fn to_finetune(self, mode: FinetuneMode, seed: u64) -> FinetuneConfig {
        FinetuneConfig {
            mode,
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            optimizer: self.optimizer,
            seed,
        }
    }
}

/// One MoCo initialization. Several datasets are concatenated and
/// shuffled as one pool. A dataset that is also the finetuning target
/// contributes only its train split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainSpec {
    pub name: String,
    pub datasets: Vec<String>,
    /// Restrict the pool to as many images as the labeled subset of each
    /// fraction; one checkpoint per fraction.
    #[serde(default)]
    pub limited: bool,
    /// Replaces the shared `[moco]` table for this run.
    #[serde(default)]
    pub moco: Option<MoCoConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetSpec {
    pub dataset: String,
    /// Train, validation and test fractions.
    #[serde(default = "default_split")]
    pub split: [f64; 3],
}

fn default_split() -> [f64; 3] {
    [0.6, 0.2, 0.2]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneSection {
    #[serde(default = "default_modes")]
    pub modes: Vec<FinetuneMode>,
    pub fractions: Vec<f64>,
    #[serde(default = "default_replicates")]
    pub replicates: usize,
    /// Subset of initialization names; all by default.
    #[serde(default)]
    pub inits: Option<Vec<String>>,
    #[serde(default = "TrainSpec::linear")]
    pub linear: TrainSpec,
    #[serde(default = "TrainSpec::end_to_end")]
    pub end_to_end: TrainSpec,
}

fn default_modes() -> Vec<FinetuneMode> {
    vec![FinetuneMode::Linear]
}

fn default_replicates() -> usize {
    3
}

impl FinetuneSection {
    pub fn train_spec(&self, mode: FinetuneMode) -> TrainSpec {
        match mode {
            FinetuneMode::Linear => self.linear,
            FinetuneMode::EndToEnd => self.end_to_end,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub resamples: usize,
    pub percentiles: (f64, f64),
    pub weighting: ClassWeighting,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            resamples: 500,
            percentiles: (5.0, 95.0),
            weighting: ClassWeighting::PositiveCount,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimilaritySection {
    /// Initialization whose weights are probed.
    #[serde(default = "default_similarity_model")]
    pub model: String,
    pub datasets: Vec<String>,
    #[serde(default = "default_layers")]
    pub layers: Vec<Tap>,
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    #[serde(default)]
    pub spatial: SpatialMode,
    #[serde(default)]
    pub mean: CcaMean,
}

fn default_similarity_model() -> String {
    BASELINE.to_string()
}
fn default_layers() -> Vec<Tap> {
    Tap::ALL.to_vec()
}
fn default_samples() -> usize {
    DEFAULT_SAMPLES
}
fn default_threshold() -> f64 {
    DEFAULT_THRESHOLD
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    #[serde(default)]
    pub inits: Option<Vec<String>>,
    #[serde(default = "default_grid")]
    pub grid: Vec<usize>,
    /// Label fraction of the train split used for the sweep.
    #[serde(default = "default_sweep_fraction")]
    pub fraction: f64,
}

fn default_grid() -> Vec<usize> {
    EPOCH_GRID.to_vec()
}
fn default_sweep_fraction() -> f64 {
    1.0
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let config: Self = toml::from_str(text).map_err(|e| bad(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Reads, resolves relative paths and validates.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| bad(format!("{}: {e}", path.display())))?;
        let mut config: Self = toml::from_str(&text).map_err(|e| bad(format!("{}: {e}", path.display())))?;
        if let Some(dir) = path.parent() {
            config.resolve_paths(dir);
        }
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for d in &mut self.datasets {
            if let Some(f) = d.folder.as_mut() {
                fix(&mut f.path);
                if let Some(m) = f.manifest.as_mut() {
                    fix(m);
                }
            }
        }
        if let Some(c) = self.init.checkpoint.as_mut() {
            fix(c);
        }
    }

    pub fn dataset(&self, name: &str) -> Option<&DatasetSpec> {
        self.datasets.iter().find(|d| d.name == name)
    }

    /// Initialization names: the baseline, then each pretraining run.
    pub fn init_names(&self) -> Vec<String> {
        std::iter::once(BASELINE.to_string())
            .chain(self.pretraining.iter().map(|p| p.name.clone()))
            .collect()
    }

    pub fn pretrain_spec(&self, name: &str) -> Option<&PretrainSpec> {
        self.pretraining.iter().find(|p| p.name == name)
    }

    pub fn moco_for(&self, spec: &PretrainSpec) -> MoCoConfig {
        spec.moco.clone().unwrap_or_else(|| self.moco.clone())
    }

    /// Initializations taking part in the finetuning matrix.
    pub fn matrix_inits(&self) -> Vec<String> {
        self.finetune.inits.clone().unwrap_or_else(|| self.init_names())
    }

    pub fn sweep_inits(&self) -> Vec<String> {
        self.epoch_sweep
            .as_ref()
            .and_then(|s| s.inits.clone())
            .unwrap_or_else(|| self.init_names())
    }

    /// Number of finetune-and-evaluate cells in the matrix.
    pub fn cell_count(&self) -> usize {
        self.matrix_inits().len() * self.finetune.modes.len() * self.finetune.fractions.len() * self.finetune.replicates
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut names = BTreeSet::new();
        for d in &self.datasets {
            if d.name.is_empty() || d.name.contains(['/', '\\']) {
                return Err(bad(format!(
                    "dataset name `{}` must be nonempty without path separators",
                    d.name
                )));
            }
            if !names.insert(d.name.as_str()) {
                return Err(bad(format!("duplicate dataset `{}`", d.name)));
            }
            match (&d.synthetic, &d.folder) {
                (Some(s), None) => s
                    .params(0)
                    .validate()
                    .map_err(|e| bad(format!("dataset `{}`: {e}", d.name)))?,
                (None, Some(_)) => {}
                _ => {
                    return Err(bad(format!(
                        "dataset `{}` needs exactly one of `synthetic` or `folder`",
                        d.name
                    )))
                }
            }
        }
        let known = |what: &str, name: &str| -> Result<(), ConfigError> {
            if names.contains(name) {
                Ok(())
            } else {
                Err(bad(format!("{what} refers to unknown dataset `{name}`")))
            }
        };

        self.backbone
            .to_config(1)
            .validate()
            .map_err(|e| bad(format!("backbone: {e}")))?;

        match self.init.kind {
            InitKind::Random => {}
            InitKind::GenericSupervised => {
                let d = self
                    .init
                    .dataset
                    .as_deref()
                    .ok_or_else(|| bad("init: generic_supervised needs `dataset`"))?;
                known("init", d)?;
                self.init
                    .training
                    .to_finetune(FinetuneMode::EndToEnd, 0)
                    .validate()
                    .map_err(|e| bad(format!("init.training: {e}")))?;
            }
            InitKind::Checkpoint => {
                if self.init.checkpoint.is_none() {
                    return Err(bad("init: checkpoint needs `checkpoint`"));
                }
            }
        }

        self.moco.validate().map_err(|e| bad(format!("moco: {e}")))?;
        let mut inits = BTreeSet::from([BASELINE]);
        for p in &self.pretraining {
            if p.name.is_empty() || p.name.contains(['/', '\\']) {
                return Err(bad(format!(
                    "pretraining name `{}` must be nonempty without path separators",
                    p.name
                )));
            }
            if !inits.insert(p.name.as_str()) {
                return Err(bad(format!("duplicate initialization name `{}`", p.name)));
            }
            if p.datasets.is_empty() {
                return Err(bad(format!("pretraining `{}` lists no datasets", p.name)));
            }
            for d in &p.datasets {
                known(&format!("pretraining `{}`", p.name), d)?;
            }
            self.moco_for(p)
                .validate()
                .map_err(|e| bad(format!("pretraining `{}`: {e}", p.name)))?;
        }
        let known_init = |what: &str, name: &str| -> Result<(), ConfigError> {
            if inits.contains(name) {
                Ok(())
            } else {
                Err(bad(format!("{what} refers to unknown initialization `{name}`")))
            }
        };

        known("target", &self.target.dataset)?;
        let split = self.target.split;
        if split.iter().any(|f| !(f.is_finite() && *f >= 0.0)) || (split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(bad(format!("target.split {split:?} must be non-negative and sum to 1")));
        }

        let ft = &self.finetune;
        if ft.replicates == 0 {
            return Err(bad("finetune.replicates must be >= 1"));
        }
        if ft.modes.is_empty() || ft.fractions.is_empty() {
            return Err(bad("finetune.modes and finetune.fractions must be nonempty"));
        }
        if ft.modes.iter().collect::<BTreeSet<_>>().len() != ft.modes.len() {
            return Err(bad("finetune.modes has duplicates"));
        }
        for &f in &ft.fractions {
            if !(f > 0.0 && f <= 1.0) {
                return Err(bad(format!("label fraction {f} must be in (0,1]")));
            }
        }
        for mode in [FinetuneMode::Linear, FinetuneMode::EndToEnd] {
            ft.train_spec(mode)
                .to_finetune(mode, 0)
                .validate()
                .map_err(|e| bad(format!("finetune.{}: {e}", mode.as_str())))?;
        }
        if let Some(list) = &ft.inits {
            if list.is_empty() {
                return Err(bad("finetune.inits must be nonempty when given"));
            }
            for i in list {
                known_init("finetune.inits", i)?;
            }
        }

        let ev = &self.eval;
        let (lo, hi) = ev.percentiles;
        if ev.resamples == 0 || !(0.0..=100.0).contains(&lo) || !(0.0..=100.0).contains(&hi) || lo > hi {
            return Err(bad("eval needs resamples >= 1 and 0 <= low <= high <= 100 percentiles"));
        }

        if let Some(s) = &self.similarity {
            known_init("similarity.model", &s.model)?;
            if s.datasets.len() < 2 {
                return Err(bad("similarity needs at least two datasets"));
            }
            for d in &s.datasets {
                known("similarity", d)?;
            }
            if s.layers.is_empty() || s.samples < 2 || !(s.threshold > 0.0 && s.threshold <= 1.0) {
                return Err(bad("similarity needs layers, samples >= 2 and threshold in (0,1]"));
            }
            if let Some(p) = self.pretrain_spec(&s.model) {
                if p.limited {
                    return Err(bad("similarity.model cannot be a limited pretraining run"));
                }
            }
        }

        if let Some(s) = &self.epoch_sweep {
            if s.grid.is_empty() || s.grid.contains(&0) {
                return Err(bad("epoch_sweep.grid must be nonempty and positive"));
            }
            if !(s.fraction > 0.0 && s.fraction <= 1.0) {
                return Err(bad("epoch_sweep.fraction must be in (0,1]"));
            }
            for i in self.sweep_inits() {
                known_init("epoch_sweep.inits", &i)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
seed = 1
[[datasets]]
name = "target"
synthetic = { domain = "small_domain", n = 40, shift = 0.5, image_size = 16 }
[init]
kind = "random"
[target]
dataset = "target"
[finetune]
fractions = [1.0]
replicates = 1
"#;

    #[test]
    fn minimal_config_uses_defaults() {
        let c = ExperimentConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(c.finetune.modes, vec![FinetuneMode::Linear]);
        assert_eq!(c.eval.resamples, 500);
        assert_eq!(c.eval.percentiles, (5.0, 95.0));
        assert_eq!(c.target.split, [0.6, 0.2, 0.2]);
        assert_eq!(c.init_names(), vec![BASELINE.to_string()]);
        assert_eq!(c.cell_count(), 1);
    }

    #[test]
    fn round_trips_through_toml() {
        let c = ExperimentConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(ExperimentConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn rejects_unknown_keys() {
        let typo = MINIMAL.replace("replicates = 1", "replicate = 1");
        assert!(ExperimentConfig::from_toml(&typo).is_err());
        let nested = MINIMAL.replace("[init]\n", "[init]\nflavour = 1\n");
        assert!(ExperimentConfig::from_toml(&nested).is_err());
    }

    #[test]
    fn rejects_unresolved_names_and_bad_values() {
        let cases = [
            MINIMAL.replace("dataset = \"target\"\n[finetune]", "dataset = \"nope\"\n[finetune]"),
            MINIMAL.replace("replicates = 1", "replicates = 0"),
            MINIMAL.replace("shift = 0.5", "shift = 1.5"),
            MINIMAL.replace("fractions = [1.0]", "fractions = [0.0]"),
            MINIMAL.replace("kind = \"random\"", "kind = \"generic_supervised\""),
            format!("{MINIMAL}inits = [\"moco\"]\n"),
        ];
        for text in cases {
            assert!(ExperimentConfig::from_toml(&text).is_err(), "accepted:\n{text}");
        }
    }

    #[test]
    fn cell_count_is_the_matrix_product() {
        let text = MINIMAL
            .replace(
                "fractions = [1.0]",
                "fractions = [0.1, 0.5, 1.0]\nmodes = [\"linear\", \"end_to_end\"]",
            )
            .replace("replicates = 1", "replicates = 3")
            + "[[pretraining]]\nname = \"moco\"\ndatasets = [\"target\"]\n";
        let c = ExperimentConfig::from_toml(&text).unwrap();
        assert_eq!(c.cell_count(), 2 * 2 * 3 * 3);
    }
}
