//! Subcommands other than `experiment`.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use mocolab::data::export_folder;
use mocolab::eval::{evaluate, BootstrapOptions};
use mocolab::finetune::{epoch_sweep, write_history};
use mocolab::similarity::SimilarityOptions;
use mocolab::{
    finetune, init_backbone, load_checkpoint, pairwise_dataset_similarity, save_checkpoint, FinetuneMode,
    PredictionSet, SimilarityReport,
};
use serde::{Deserialize, Serialize};

use crate::config::{ConfigError, ExperimentConfig};
use crate::experiment::{bootstrap_options, read_summary, with_jobs, RunOptions, SummaryRow};
use crate::manifest::RunManifest;
use crate::pipeline::{load_datasets, InitStore, Seeds, Target};
use crate::plot;

fn is_nonempty_dir(path: &Path) -> bool {
    fs::read_dir(path).map(|mut d| d.next().is_some()).unwrap_or(false)
}

/// Exports every synthetic dataset to `<out>/<name>/` as PNGs plus
/// `labels.csv`. Refuses a non-empty output directory.
pub fn cmd_synth_data(config: &ExperimentConfig, opts: &RunOptions) -> Result<Vec<PathBuf>> {
    if is_nonempty_dir(&opts.out) {
        bail!(ConfigError(format!(
            "output directory {} is not empty",
            opts.out.display()
        )));
    }
    let seeds = Seeds::new(config.seed);
    let mut manifest = RunManifest::new("synth-data", config, &seeds, opts.jobs, opts.resume);
    let mut dirs = Vec::new();
    with_jobs(opts.jobs, || -> Result<()> {
        for d in config.datasets.iter().filter(|d| d.synthetic.is_some()) {
            let spec = d.synthetic.as_ref().expect("filtered");
            let mut handle = spec.params(seeds.dataset(config, &d.name)).generate()?;
            handle.name = d.name.clone();
            let dir = opts.out.join(&d.name);
            manifest.time(&format!("export {}", d.name), || export_folder(&handle, &dir))?;
            manifest.add_artifact(&opts.out, &dir.join("labels.csv"));
            dirs.push(dir);
        }
        Ok(())
    })??;
    manifest.write(&opts.out, config)?;
    Ok(dirs)
}

/// Builds the baseline and every pretraining run into
/// `<out>/checkpoints`. Limited runs get one checkpoint per fraction.
pub fn cmd_pretrain(config: &ExperimentConfig, opts: &RunOptions) -> Result<Vec<PathBuf>> {
    let seeds = Seeds::new(config.seed);
    let mut manifest = RunManifest::new("pretrain", config, &seeds, opts.jobs, opts.resume);
    let artifacts = with_jobs(opts.jobs, || -> Result<Vec<PathBuf>> {
        let datasets = load_datasets(config, &seeds)?;
        let target = Target::new(config, &datasets, &seeds)?;
        let mut store = InitStore::new(config, &seeds, &opts.out);
        manifest.time("baseline", || store.baseline(&datasets))?;
        for p in &config.pretraining {
            if p.limited {
                for &f in &config.finetune.fractions {
                    let n = target.subset_size(f).max(1);
                    manifest.time(&format!("{}-n{n}", p.name), || {
                        store.get(&p.name, Some(n), &datasets, &target)
                    })?;
                }
            } else {
                manifest.time(&p.name, || store.get(&p.name, None, &datasets, &target))?;
            }
        }
        Ok(store.artifacts.clone())
    })??;
    for a in &artifacts {
        manifest.add_artifact(&opts.out, a);
    }
    manifest.write(&opts.out, config)?;
    Ok(artifacts)
}

/// What `finetune` starts from.
#[derive(Debug, Clone)]
pub enum FinetuneSource {
    /// A configured initialization, built or reused under `<out>/checkpoints`.
    Init(String),
    Checkpoint(PathBuf),
}

#[derive(Debug, Clone)]
pub struct FinetuneArgs {
    pub source: FinetuneSource,
    pub mode: FinetuneMode,
    pub fraction: f64,
    pub replicate: usize,
}

/// One finetuning run on the target; writes the model, its history and
/// test-set predictions under `<out>/finetune/<label>/`.
pub fn cmd_finetune(config: &ExperimentConfig, opts: &RunOptions, args: &FinetuneArgs) -> Result<PathBuf> {
    if !(args.fraction > 0.0 && args.fraction <= 1.0) {
        bail!(ConfigError(format!("fraction {} must be in (0,1]", args.fraction)));
    }
    if args.replicate >= config.finetune.replicates {
        bail!(ConfigError(format!(
            "replicate {} out of range for {} replicates",
            args.replicate, config.finetune.replicates
        )));
    }
    let seeds = Seeds::new(config.seed);
    let mut manifest = RunManifest::new("finetune", config, &seeds, opts.jobs, opts.resume);
    let dir = with_jobs(opts.jobs, || -> Result<PathBuf> {
        let datasets = load_datasets(config, &seeds)?;
        let target = Target::new(config, &datasets, &seeds)?;
        let mut store = InitStore::new(config, &seeds, &opts.out);
        let (label, ckpt) = match &args.source {
            FinetuneSource::Init(name) => {
                if !config.init_names().contains(name) {
                    bail!(ConfigError(format!("unknown initialization `{name}`")));
                }
                let limited = config
                    .pretrain_spec(name)
                    .filter(|p| p.limited)
                    .map(|_| target.subset_size(args.fraction).max(1));
                (name.clone(), store.get(name, limited, &datasets, &target)?)
            }
            FinetuneSource::Checkpoint(path) => {
                let stem = path
                    .file_stem()
                    .and_then(|s| s.to_str())
                    .unwrap_or("checkpoint")
                    .to_string();
                (
                    stem,
                    load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?,
                )
            }
        };
        let subset = target.labeled_subset(args.fraction, args.replicate, &seeds)?;
        let train = config
            .finetune
            .train_spec(args.mode)
            .to_finetune(args.mode, seeds.finetune(args.replicate));
        let model = manifest.time("finetune", || finetune(&ckpt, &subset, Some(&target.val), &train))?;
        let dir = opts.out.join("finetune").join(format!(
            "{label}_{}_f{}_r{}",
            args.mode.as_str(),
            args.fraction,
            args.replicate
        ));
        fs::create_dir_all(&dir)?;
        save_checkpoint(&model.checkpoint(), &dir.join("model.ckpt"))?;
        write_history(&dir.join("history.csv"), &model.history)?;
        let predictions = model.predict(&target.test, &label)?;
        write_predictions(&dir.join("predictions.csv"), &predictions)?;
        for f in ["model.ckpt", "history.csv", "predictions.csv"] {
            manifest.add_artifact(&opts.out, &dir.join(f));
        }
        for a in &store.artifacts {
            manifest.add_artifact(&opts.out, a);
        }
        Ok(dir)
    })??;
    manifest.write(&opts.out, config)?;
    Ok(dir)
}

/// Predictions as CSV: `score_0..score_{L-1},label_0..label_{L-1}`.
pub fn write_predictions(path: &Path, p: &PredictionSet) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = (0..p.arity).map(|k| format!("score_{k}")).collect();
    header.extend((0..p.arity).map(|k| format!("label_{k}")));
    w.write_record(&header)?;
    for i in 0..p.n {
        let row = &p.scores[i * p.arity..(i + 1) * p.arity];
        let labels = &p.labels[i * p.arity..(i + 1) * p.arity];
        let mut rec: Vec<String> = row.iter().map(|s| s.to_string()).collect();
        rec.extend(labels.iter().map(|l| l.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_predictions(path: &Path) -> Result<PredictionSet> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let header = r.headers()?.clone();
    let arity = header.iter().filter(|h| h.starts_with("score_")).count();
    if arity == 0 || header.len() != 2 * arity {
        bail!("{}: expected score_k and label_k columns", path.display());
    }
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        for k in 0..arity {
            scores.push(
                rec[k]
                    .parse::<f64>()
                    .with_context(|| format!("{}: bad score", path.display()))?,
            );
            labels.push(
                rec[arity + k]
                    .parse::<u8>()
                    .with_context(|| format!("{}: bad label", path.display()))?,
            );
        }
    }
    let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("predictions");
    Ok(PredictionSet::new(scores, labels, arity, name, name)?)
}

/// Bootstrap evaluation of a predictions file; writes
/// `<out>/evaluate/<stem>.json`.
pub fn cmd_evaluate(
    config: Option<&ExperimentConfig>,
    opts: &RunOptions,
    predictions: &Path,
    seed: u64,
) -> Result<PathBuf> {
    let p = read_predictions(predictions)?;
    let options = match config {
        Some(c) => bootstrap_options(c, &Seeds::new(c.seed)),
        None => BootstrapOptions {
            seed,
            ..BootstrapOptions::default()
        },
    };
    let report = with_jobs(opts.jobs, || evaluate(&p, &options))??;
    let dir = opts.out.join("evaluate");
    fs::create_dir_all(&dir)?;
    let path = dir.join(format!("{}.json", p.dataset));
    fs::write(&path, report.to_json()?)?;
    println!(
        "{}: weighted AUROC {:.4}, median {:.4} ({:.4}-{:.4}) over {} resamples",
        p.dataset, report.point, report.median, report.q_low, report.q_high, report.resamples
    );
    Ok(path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub layer: String,
    pub a: String,
    pub b: String,
    pub score: f64,
    pub rank_a: usize,
    pub rank_b: usize,
}

/// Pairwise dataset similarity through the configured model; writes the
/// JSON report, a score CSV and the grouped bar chart.
pub fn cmd_similarity(config: &ExperimentConfig, opts: &RunOptions) -> Result<SimilarityReport> {
    let Some(section) = &config.similarity else {
        bail!(ConfigError("no [similarity] table in config".into()));
    };
    let seeds = Seeds::new(config.seed);
    let mut manifest = RunManifest::new("similarity", config, &seeds, opts.jobs, opts.resume);
    let report = with_jobs(opts.jobs, || -> Result<SimilarityReport> {
        let datasets = load_datasets(config, &seeds)?;
        let target = Target::new(config, &datasets, &seeds)?;
        let mut store = InitStore::new(config, &seeds, &opts.out);
        let ckpt = store.get(&section.model, None, &datasets, &target)?;
        for a in &store.artifacts {
            manifest.add_artifact(&opts.out, a);
        }
        let model = init_backbone(&ckpt.config, 0, Some(&ckpt))?;
        let handles: Vec<_> = section.datasets.iter().map(|d| &datasets[d]).collect();
        let options = SimilarityOptions {
            samples: section.samples,
            threshold: section.threshold,
            seed: seeds.similarity(),
            spatial: section.spatial,
            mean: section.mean,
        };
        Ok(manifest.time("similarity", || {
            pairwise_dataset_similarity(&model, &handles, &section.layers, &options)
        })?)
    })??;

    let dir = opts.out.join("similarity");
    fs::create_dir_all(&dir)?;
    let json = dir.join("report.json");
    fs::write(&json, report.to_json()?)?;
    let rows: Vec<ScoreRow> = report
        .entries
        .iter()
        .map(|e| ScoreRow {
            layer: e.layer.name().to_string(),
            a: e.a.clone(),
            b: e.b.clone(),
            score: e.score,
            rank_a: e.rank_a,
            rank_b: e.rank_b,
        })
        .collect();
    let csv_path = dir.join("scores.csv");
    let mut w = csv::Writer::from_path(&csv_path)?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    let fig = opts.out.join("figures").join("similarity.png");
    similarity_plot(&fig, &rows)?;
    for p in [&json, &csv_path, &fig] {
        manifest.add_artifact(&opts.out, p);
    }
    manifest.write(&opts.out, config)?;
    Ok(report)
}

fn similarity_plot(path: &Path, rows: &[ScoreRow]) -> Result<()> {
    fs::create_dir_all(path.parent().expect("figure path has a parent"))?;
    let mut layers: Vec<String> = Vec::new();
    let mut pairs: Vec<String> = Vec::new();
    for r in rows.iter().filter(|r| r.a != r.b) {
        if !layers.contains(&r.layer) {
            layers.push(r.layer.clone());
        }
        let p = format!("{} / {}", r.a, r.b);
        if !pairs.contains(&p) {
            pairs.push(p);
        }
    }
    plot::similarity_figure(path, &layers, &pairs, |layer, pair| {
        rows.iter()
            .find(|r| r.layer == layer && format!("{} / {}", r.a, r.b) == pair)
            .map_or(0.0, |r| r.score)
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCsvRow {
    pub init: String,
    pub epochs: usize,
    pub final_val: Option<f64>,
    pub test: Option<f64>,
    pub selected: bool,
}

/// End-to-end epoch sweep per initialization on the configured label
/// fraction; writes `sweep/sweep.csv` and the epochs figure.
pub fn cmd_epoch_sweep(config: &ExperimentConfig, opts: &RunOptions) -> Result<Vec<SweepCsvRow>> {
    let Some(section) = &config.epoch_sweep else {
        bail!(ConfigError("no [epoch_sweep] table in config".into()));
    };
    let seeds = Seeds::new(config.seed);
    let mut manifest = RunManifest::new("epoch-sweep", config, &seeds, opts.jobs, opts.resume);
    let rows = with_jobs(opts.jobs, || -> Result<Vec<SweepCsvRow>> {
        let datasets = load_datasets(config, &seeds)?;
        let target = Target::new(config, &datasets, &seeds)?;
        let mut store = InitStore::new(config, &seeds, &opts.out);
        let subset = target.labeled_subset(section.fraction, 0, &seeds)?;
        let base = config
            .finetune
            .end_to_end
            .to_finetune(FinetuneMode::EndToEnd, seeds.sweep());
        let mut rows = Vec::new();
        for init in config.sweep_inits() {
            let limited = config
                .pretrain_spec(&init)
                .filter(|p| p.limited)
                .map(|_| target.subset_size(section.fraction).max(1));
            let ckpt = store.get(&init, limited, &datasets, &target)?;
            let (best, table) = manifest.time(&format!("sweep {init}"), || {
                epoch_sweep(
                    &ckpt,
                    &subset,
                    Some(&target.val),
                    Some(&target.test),
                    &base,
                    &section.grid,
                )
            })?;
            let best_epochs = best.history.len();
            rows.extend(table.into_iter().map(|r| SweepCsvRow {
                init: init.clone(),
                epochs: r.epochs,
                final_val: r.final_val,
                test: r.test,
                selected: r.epochs == best_epochs,
            }));
        }
        for a in &store.artifacts {
            manifest.add_artifact(&opts.out, a);
        }
        Ok(rows)
    })??;
    let dir = opts.out.join("sweep");
    fs::create_dir_all(&dir)?;
    let csv_path = dir.join("sweep.csv");
    let mut w = csv::Writer::from_path(&csv_path)?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    let fig = opts.out.join("figures").join("epoch_sweep.png");
    sweep_plot(&fig, &rows)?;
    manifest.add_artifact(&opts.out, &csv_path);
    manifest.add_artifact(&opts.out, &fig);
    manifest.write(&opts.out, config)?;
    Ok(rows)
}

fn sweep_plot(path: &Path, rows: &[SweepCsvRow]) -> Result<()> {
    fs::create_dir_all(path.parent().expect("figure path has a parent"))?;
    let pts: Vec<_> = rows
        .iter()
        .map(|r| (r.init.clone(), r.epochs, r.final_val, r.test))
        .collect();
    plot::sweep_figure(path, &pts)
}

/// Re-renders every figure whose source table exists under `out`.
pub fn cmd_plot(out: &Path) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    let figures = out.join("figures");
    let summary = out.join("results").join("summary.csv");
    if summary.exists() {
        fs::create_dir_all(&figures)?;
        let rows = read_summary(&summary)?;
        let mut modes: Vec<&str> = Vec::new();
        for r in &rows {
            if !modes.contains(&r.mode.as_str()) {
                modes.push(&r.mode);
            }
        }
        for mode in modes {
            let subset: Vec<&SummaryRow> = rows.iter().filter(|r| r.mode == mode).collect();
            let path = figures.join(format!("transfer_{mode}.png"));
            plot::transfer_figure(&path, mode, &subset)?;
            written.push(path);
        }
    }
    let scores = out.join("similarity").join("scores.csv");
    if scores.exists() {
        let rows: Vec<ScoreRow> = csv::Reader::from_path(&scores)?
            .deserialize()
            .collect::<Result<_, _>>()?;
        let path = figures.join("similarity.png");
        similarity_plot(&path, &rows)?;
        written.push(path);
    }
    let sweep = out.join("sweep").join("sweep.csv");
    if sweep.exists() {
        let rows: Vec<SweepCsvRow> = csv::Reader::from_path(&sweep)?
            .deserialize()
            .collect::<Result<_, _>>()?;
        let path = figures.join("epoch_sweep.png");
        sweep_plot(&path, &rows)?;
        written.push(path);
    }
    if written.is_empty() {
        bail!(ConfigError(format!("nothing to plot under {}", out.display())));
    }
    Ok(written)
}
