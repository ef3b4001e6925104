//! Shared stages: seeds, datasets, target splits and initializations.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use mocolab::backbone::config_hash;
use mocolab::data::{load_image_folder_with, FolderOptions};
use mocolab::finetune::supervised_pretrain;
use mocolab::moco::{pretrain, pretrain_limited, write_train_log, PretrainOutput};
use mocolab::seed::{derive, key_of};
use mocolab::{
    load_checkpoint, save_checkpoint, split, subsample_labeled, Checkpoint, DatasetHandle, FinetuneMode, MoCoConfig,
    Model, Provenance, SplitAssignment, SubsampleSpec,
};
use serde::Serialize;

use crate::config::{ExperimentConfig, InitKind, PretrainSpec, BASELINE};

const TAG_DATA: u64 = 0x4441_5441;
const TAG_SPLIT: u64 = 0x5350_4c54;
const TAG_INIT: u64 = 0x494e_4954;
const TAG_MOCO: u64 = 0x4d4f_434f;
const TAG_SUBSAMPLE: u64 = 0x5355_4253;
const TAG_FINETUNE: u64 = 0x4654_554e;
const TAG_EVAL: u64 = 0x4556_414c;
const TAG_SIMILARITY: u64 = 0x5349_4d49;
const TAG_SWEEP: u64 = 0x5357_4550;

/// Every seed a run uses, derived from the global seed.
#[derive(Debug, Clone)]
pub struct Seeds {
    pub global: u64,
}

impl Seeds {
    pub fn new(global: u64) -> Self {
        Self { global }
    }

    fn at(&self, keys: &[u64]) -> u64 {
        derive(self.global, keys)
    }

    pub fn dataset(&self, config: &ExperimentConfig, name: &str) -> u64 {
        config
            .dataset(name)
            .and_then(|d| d.synthetic.as_ref())
            .and_then(|s| s.seed)
            .unwrap_or_else(|| self.at(&[TAG_DATA, key_of(name)]))
    }

    pub fn split(&self) -> u64 {
        self.at(&[TAG_SPLIT])
    }

    pub fn init(&self) -> u64 {
        self.at(&[TAG_INIT])
    }

    pub fn moco(&self, run: &str) -> u64 {
        self.at(&[TAG_MOCO, key_of(run)])
    }

    /// Shared by all initializations so each replicate sees the same labels.
    pub fn subsample(&self) -> u64 {
        self.at(&[TAG_SUBSAMPLE])
    }

    pub fn finetune(&self, replicate: usize) -> u64 {
        self.at(&[TAG_FINETUNE, replicate as u64])
    }

    pub fn eval(&self) -> u64 {
        self.at(&[TAG_EVAL])
    }

    pub fn similarity(&self) -> u64 {
        self.at(&[TAG_SIMILARITY])
    }

    pub fn sweep(&self) -> u64 {
        self.at(&[TAG_SWEEP])
    }

    /// Named seeds for the manifest.
    pub fn resolved(&self, config: &ExperimentConfig) -> BTreeMap<String, u64> {
        let mut out = BTreeMap::new();
        out.insert("global".into(), self.global);
        for d in &config.datasets {
            if d.synthetic.is_some() {
                out.insert(format!("dataset:{}", d.name), self.dataset(config, &d.name));
            }
        }
        out.insert("split".into(), self.split());
        out.insert("init".into(), self.init());
        for p in &config.pretraining {
            out.insert(format!("moco:{}", p.name), self.moco(&p.name));
        }
        out.insert("subsample".into(), self.subsample());
        for r in 0..config.finetune.replicates {
            out.insert(format!("finetune:{r}"), self.finetune(r));
        }
        out.insert("eval".into(), self.eval());
        out.insert("similarity".into(), self.similarity());
        out.insert("epoch_sweep".into(), self.sweep());
        out
    }
}

/// Materializes every configured dataset.
pub fn load_datasets(config: &ExperimentConfig, seeds: &Seeds) -> Result<BTreeMap<String, DatasetHandle>> {
    let mut out = BTreeMap::new();
    for d in &config.datasets {
        let mut handle = if let Some(s) = &d.synthetic {
            s.params(seeds.dataset(config, &d.name)).generate()?
        } else if let Some(f) = &d.folder {
            let options = FolderOptions {
                missing: f.missing_labels,
                resize: f.resize,
            };
            load_image_folder_with(&f.path, &f.manifest_path(), &options)?
        } else {
            unreachable!("validated config")
        };
        handle.name = d.name.clone();
        out.insert(d.name.clone(), handle);
    }
    Ok(out)
}

/// The finetuning target, split into train, validation and test.
#[derive(Debug, Clone)]
pub struct Target {
    pub assignment: SplitAssignment,
    pub train: DatasetHandle,
    pub val: DatasetHandle,
    pub test: DatasetHandle,
    /// Positions of labeled samples within `train`.
    pub labeled_train: Vec<usize>,
}

impl Target {
    pub fn new(config: &ExperimentConfig, datasets: &BTreeMap<String, DatasetHandle>, seeds: &Seeds) -> Result<Self> {
        let name = &config.target.dataset;
        let full = &datasets[name];
        let assignment = split(full.len(), config.target.split, seeds.split())?;
        let train = full.subset(&assignment.train, format!("{name}_train"));
        let val = full.subset(&assignment.val, format!("{name}_val"));
        let test = full.subset(&assignment.test, format!("{name}_test"));
        let labeled_train = (0..train.len()).filter(|&i| train.labeled_mask[i]).collect();
        Ok(Self {
            assignment,
            train,
            val,
            test,
            labeled_train,
        })
    }

    /// Labeled training subset for one fraction and replicate.
    pub fn labeled_subset(&self, fraction: f64, replicate: usize, seeds: &Seeds) -> Result<DatasetHandle> {
        let spec = SubsampleSpec {
            fraction,
            seed: seeds.subsample(),
            replicate_index: u32::try_from(replicate)?,
        };
        let idx = subsample_labeled(&self.labeled_train, &spec)?;
        Ok(self
            .train
            .subset(&idx, format!("{}_f{fraction}_r{replicate}", self.train.name)))
    }

    /// `floor(fraction * labeled train size)`.
    pub fn subset_size(&self, fraction: f64) -> usize {
        if fraction == 1.0 {
            self.labeled_train.len()
        } else {
            (fraction * self.labeled_train.len() as f64).floor() as usize
        }
    }
}

/// The unlabeled MoCo pool of one pretraining run.
pub fn pretraining_pool(
    config: &ExperimentConfig,
    spec: &PretrainSpec,
    datasets: &BTreeMap<String, DatasetHandle>,
    target: &Target,
) -> DatasetHandle {
    let parts: Vec<&DatasetHandle> = spec
        .datasets
        .iter()
        .map(|d| {
            if *d == config.target.dataset {
                &target.train
            } else {
                &datasets[d]
            }
        })
        .collect();
    DatasetHandle::concat_unlabeled(spec.datasets.join("+"), &parts)
}

/// Largest batch size not above `wanted` or `pool` that divides the queue.
pub fn fitted_batch(wanted: usize, pool: usize, queue: usize) -> usize {
    (1..=wanted.min(pool)).rev().find(|b| queue % b == 0).unwrap_or(1)
}

/// Identity of an initialization; equal recipes produce equal weights.
#[derive(Debug, Clone, Serialize)]
enum Recipe<'a> {
    Random {
        backbone: &'a crate::config::BackboneSection,
        seed: u64,
    },
    Supervised {
        backbone: &'a crate::config::BackboneSection,
        dataset: &'a crate::config::DatasetSpec,
        dataset_seed: u64,
        training: &'a crate::config::TrainSpec,
        seed: u64,
    },
    External {
        path: &'a Path,
    },
    Moco {
        base: String,
        pool: Vec<PoolPart<'a>>,
        moco: MoCoConfig,
        seed: u64,
        limited: Option<usize>,
    },
}

#[derive(Debug, Clone, Serialize)]
struct PoolPart<'a> {
    dataset: &'a crate::config::DatasetSpec,
    dataset_seed: u64,
    /// Train split of the target, when the dataset is the target.
    split: Option<([f64; 3], u64)>,
}

/// Builds, caches and loads initial weights under `<out>/checkpoints`.
pub struct InitStore<'a> {
    pub config: &'a ExperimentConfig,
    pub seeds: &'a Seeds,
    pub dir: PathBuf,
    baseline: Option<Checkpoint>,
    built: BTreeMap<String, Checkpoint>,
    /// Paths of every checkpoint and training log written or reused.
    pub artifacts: Vec<PathBuf>,
}

impl<'a> InitStore<'a> {
    pub fn new(config: &'a ExperimentConfig, seeds: &'a Seeds, out: &Path) -> Self {
        Self {
            config,
            seeds,
            dir: out.join("checkpoints"),
            baseline: None,
            built: BTreeMap::new(),
            artifacts: Vec::new(),
        }
    }

    fn recipe_hash(&self, recipe: &Recipe<'_>) -> String {
        config_hash(recipe)
    }

    pub fn baseline_hash(&self) -> String {
        let c = self.config;
        let recipe = match c.init.kind {
            InitKind::Random => Recipe::Random {
                backbone: &c.backbone,
                seed: self.seeds.init(),
            },
            InitKind::GenericSupervised => {
                let name = c.init.dataset.as_deref().expect("validated");
                Recipe::Supervised {
                    backbone: &c.backbone,
                    dataset: c.dataset(name).expect("validated"),
                    dataset_seed: self.seeds.dataset(c, name),
                    training: &c.init.training,
                    seed: self.seeds.init(),
                }
            }
            InitKind::Checkpoint => Recipe::External {
                path: c.init.checkpoint.as_deref().expect("validated"),
            },
        };
        self.recipe_hash(&recipe)
    }

    /// Recipe hash of initialization `name`; `limited` is the pool size of
    /// a limited run.
    pub fn hash_of(&self, name: &str, limited: Option<usize>) -> String {
        if name == BASELINE {
            return self.baseline_hash();
        }
        let c = self.config;
        let spec = c.pretrain_spec(name).expect("validated");
        let pool = spec
            .datasets
            .iter()
            .map(|d| PoolPart {
                dataset: c.dataset(d).expect("validated"),
                dataset_seed: self.seeds.dataset(c, d),
                split: (*d == c.target.dataset).then(|| (c.target.split, self.seeds.split())),
            })
            .collect();
        self.recipe_hash(&Recipe::Moco {
            base: self.baseline_hash(),
            pool,
            moco: c.moco_for(spec),
            seed: self.seeds.moco(name),
            limited,
        })
    }

    fn file_stem(name: &str, limited: Option<usize>) -> String {
        match limited {
            Some(n) => format!("{name}-n{n}"),
            None => name.to_string(),
        }
    }

    /// Reuses `<stem>.ckpt` when its recorded recipe matches.
    fn cached(&mut self, stem: &str, hash: &str) -> Result<Option<Checkpoint>> {
        let ckpt = self.dir.join(format!("{stem}.ckpt"));
        let recipe = self.dir.join(format!("{stem}.recipe"));
        match fs::read_to_string(&recipe) {
            Ok(h) if h.trim() == hash && ckpt.exists() => {
                log::info!("reusing {}", ckpt.display());
                self.artifacts.push(ckpt.clone());
                Ok(Some(load_checkpoint(&ckpt)?))
            }
            _ => Ok(None),
        }
    }

    fn store(&mut self, stem: &str, hash: &str, ckpt: &Checkpoint) -> Result<()> {
        fs::create_dir_all(&self.dir)?;
        let path = self.dir.join(format!("{stem}.ckpt"));
        save_checkpoint(ckpt, &path)?;
        fs::write(self.dir.join(format!("{stem}.recipe")), format!("{hash}\n"))?;
        self.artifacts.push(path);
        Ok(())
    }

    pub fn baseline(&mut self, datasets: &BTreeMap<String, DatasetHandle>) -> Result<Checkpoint> {
        if let Some(b) = &self.baseline {
            return Ok(b.clone());
        }
        let hash = self.baseline_hash();
        let ckpt = match self.cached(BASELINE, &hash)? {
            Some(c) => c,
            None => {
                let c = self.config;
                let seed = self.seeds.init();
                let ckpt = match c.init.kind {
                    InitKind::Random => {
                        let backbone = c.backbone.to_config(1);
                        Model::random(&backbone, seed)?.to_checkpoint(Provenance::random(seed))
                    }
                    InitKind::GenericSupervised => {
                        let name = c.init.dataset.as_deref().expect("validated");
                        let data = &datasets[name];
                        log::info!("supervised pretraining on {name} ({} images)", data.len());
                        let train = c.init.training.to_finetune(FinetuneMode::EndToEnd, seed);
                        supervised_pretrain(data, &c.backbone.to_config(data.task_arity), &train)?
                    }
                    InitKind::Checkpoint => {
                        let path = c.init.checkpoint.as_deref().expect("validated");
                        load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?
                    }
                };
                self.store(BASELINE, &hash, &ckpt)?;
                ckpt
            }
        };
        self.baseline = Some(ckpt.clone());
        Ok(ckpt)
    }

    /// Weights of initialization `name`. Limited runs need the labeled
    /// subset size they are matched to.
    pub fn get(
        &mut self,
        name: &str,
        limited_to: Option<usize>,
        datasets: &BTreeMap<String, DatasetHandle>,
        target: &Target,
    ) -> Result<Checkpoint> {
        if name == BASELINE {
            return self.baseline(datasets);
        }
        let c = self.config;
        let spec = c
            .pretrain_spec(name)
            .ok_or_else(|| anyhow!("unknown initialization `{name}`"))?;
        let limited = if spec.limited {
            Some(limited_to.ok_or_else(|| anyhow!("limited run `{name}` needs a subset size"))?)
        } else {
            None
        };
        let stem = Self::file_stem(name, limited);
        if let Some(ckpt) = self.built.get(&stem) {
            return Ok(ckpt.clone());
        }
        let hash = self.hash_of(name, limited);
        let ckpt = match self.cached(&stem, &hash)? {
            Some(c) => c,
            None => {
                let base = self.baseline(datasets)?;
                let pool = pretraining_pool(c, spec, datasets, target);
                let mut moco = c.moco_for(spec);
                let seed = self.seeds.moco(name);
                log::info!(
                    "MoCo `{name}` on {} ({} images, limited {limited:?})",
                    pool.name,
                    pool.len()
                );
                let output: PretrainOutput = match limited {
                    None => pretrain(&pool, &moco, &base.config, Some(&base), seed)?,
                    Some(n) => {
                        let n = n.min(pool.len()).max(1);
                        moco.batch_size = fitted_batch(moco.batch_size, n, moco.queue_size);
                        pretrain_limited(&pool, n, &moco, &base.config, Some(&base), seed)?
                    }
                };
                fs::create_dir_all(&self.dir)?;
                let log_path = self.dir.join(format!("{stem}.train_log.csv"));
                write_train_log(&log_path, &output.log)?;
                self.artifacts.push(log_path);
                self.store(&stem, &hash, &output.checkpoint)?;
                output.checkpoint
            }
        };
        self.built.insert(stem, ckpt.clone());
        Ok(ckpt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fitted_batch_divides_the_queue() {
        assert_eq!(fitted_batch(64, 2000, 256), 64);
        assert_eq!(fitted_batch(64, 20, 256), 16);
        assert_eq!(fitted_batch(64, 58, 4096), 32);
        assert_eq!(fitted_batch(64, 7, 12), 6);
    }

    #[test]
    fn seeds_are_distinct_streams() {
        let s = Seeds::new(5);
        let all = [
            s.split(),
            s.init(),
            s.subsample(),
            s.eval(),
            s.similarity(),
            s.sweep(),
            s.finetune(0),
            s.finetune(1),
        ];
        let uniq: std::collections::BTreeSet<_> = all.iter().collect();
        assert_eq!(uniq.len(), all.len());
        assert_eq!(Seeds::new(5).moco("a"), s.moco("a"));
        assert_ne!(s.moco("a"), s.moco("b"));
    }
}
