//! Run manifests: everything needed to re-execute a run.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Result;
use mocolab::backbone::config_hash;
use mocolab::ClassWeighting;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, InitKind};
use crate::pipeline::Seeds;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetSize {
    pub fraction: f64,
    pub labeled_train: usize,
    pub n_labeled: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellState {
    Completed,
    /// Loaded from a previous run by config-hash identity.
    Resumed,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellStatus {
    pub cell_hash: String,
    pub init: String,
    pub mode: String,
    pub fraction: f64,
    pub replicate: usize,
    pub state: CellState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub software_version: String,
    pub config_hash: String,
    /// Resolved config written next to the manifest; rerunning it with
    /// `--jobs 1` reproduces every CSV.
    pub config_file: String,
    pub seeds: BTreeMap<String, u64>,
    pub jobs: usize,
    pub resume: bool,
    pub design_decisions: BTreeMap<String, String>,
    #[serde(default)]
    pub subset_sizes: Vec<SubsetSize>,
    #[serde(default)]
    pub cells: Vec<CellStatus>,
    /// Paths relative to the output directory.
    pub artifacts: Vec<String>,
    pub timings: Vec<Timing>,
}

impl RunManifest {
    pub fn new(command: &str, config: &ExperimentConfig, seeds: &Seeds, jobs: usize, resume: bool) -> Self {
        Self {
            command: command.to_string(),
            software_version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: config_hash(config),
            config_file: format!("config-{command}.toml"),
            seeds: seeds.resolved(config),
            jobs,
            resume,
            design_decisions: design_decisions(config),
            subset_sizes: Vec::new(),
            cells: Vec::new(),
            artifacts: Vec::new(),
            timings: Vec::new(),
        }
    }

    pub fn add_artifact(&mut self, out: &Path, path: &Path) {
        let rel = path
            .strip_prefix(out)
            .unwrap_or(path)
            .to_string_lossy()
            .replace('\\', "/");
        if !self.artifacts.contains(&rel) {
            self.artifacts.push(rel);
        }
    }

    pub fn time<T>(&mut self, stage: &str, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        self.timings.push(Timing {
            stage: stage.to_string(),
            seconds: start.elapsed().as_secs_f64(),
        });
        out
    }

    /// Writes the resolved config and `manifest-<command>.json` under `out`.
    pub fn write(&mut self, out: &Path, config: &ExperimentConfig) -> Result<PathBuf> {
        std::fs::create_dir_all(out)?;
        std::fs::write(out.join(&self.config_file), config.to_toml())?;
        let path = out.join(format!("manifest-{}.json", self.command));
        self.artifacts.sort();
        std::fs::write(&path, serde_json::to_string_pretty(self)?)?;
        Ok(path)
    }
}

/// The deliberate choices in effect for a run, keyed by topic.
pub fn design_decisions(config: &ExperimentConfig) -> BTreeMap<String, String> {
    let mut d = BTreeMap::new();
    let mut put = |k: &str, v: String| {
        d.insert(k.to_string(), v);
    };
    put(
        "initialization",
        match config.init.kind {
            InitKind::Random => "random weights".into(),
            InitKind::GenericSupervised => format!(
                "supervised training on `{}` stands in for generic pretrained weights",
                config.init.dataset.as_deref().unwrap_or_default()
            ),
            InitKind::Checkpoint => "external checkpoint".into(),
        },
    );
    put(
        "moco_start",
        "every MoCo run starts from the baseline initialization".into(),
    );
    put(
        "label_subsets",
        "floor(fraction x labeled train size), drawn independently per fraction and replicate (not nested), shared across initializations".into(),
    );
    put(
        "pretraining_pool",
        "listed datasets are concatenated and shuffled uniformly; the finetuning target contributes its train split only".into(),
    );
    put(
        "limited_pretraining",
        "pool restricted to as many images as the labeled subset; batch lowered to the largest divisor of the queue size that fits the pool".into(),
    );
    put(
        "linear_freeze",
        "all parameters frozen except the final linear classifier".into(),
    );
    put(
        "model_selection",
        "final-epoch weights; validation AUROC recorded per epoch".into(),
    );
    put("class_imbalance", "none; plain binary cross-entropy".into());
    put(
        "class_weighting",
        match config.eval.weighting {
            ClassWeighting::PositiveCount => "per-class AUROC weighted by positive count".into(),
            ClassWeighting::LabeledCount => "per-class AUROC weighted by labeled count".into(),
        },
    );
    put(
        "bootstrap",
        "whole-row resampling; percentiles by linear interpolation between order statistics".into(),
    );
    put(
        "embedding",
        "L2-normalized projections; dot-product similarities".into(),
    );
    put("queue_init", "random unit-norm keys".into());
    if let Some(s) = &config.similarity {
        put(
            "similarity",
            format!(
                "principal-angle cosines between SVD subspaces at {} retained variance; spatial {:?}; mean {:?}",
                s.threshold, s.spatial, s.mean
            ),
        );
    }
    d
}
