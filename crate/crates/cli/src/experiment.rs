//! The finetuning matrix: initializations x modes x label fractions x
//! replicates, one evaluated cell each.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Result};
use mocolab::backbone::config_hash;
use mocolab::eval::{evaluate, render_table_csv, BootstrapOptions, TableCell};
use mocolab::finetune::write_history;
use mocolab::{aggregate_seeds, finetune, Checkpoint, FinetuneMode, MetricReport};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{DatasetSpec, EvalSection, ExperimentConfig, TrainSpec};
use crate::manifest::{CellState, CellStatus, RunManifest, SubsetSize};
use crate::pipeline::{load_datasets, InitStore, Seeds, Target};
use crate::plot;

/// Output directory, worker count and resume switch shared by commands.
#[derive(Debug, Clone)]
pub struct RunOptions {
    pub out: PathBuf,
    pub jobs: usize,
    pub resume: bool,
}

/// Runs `f` on a pool of `jobs` workers.
pub fn with_jobs<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build()?;
    Ok(pool.install(f))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellSpec {
    pub init: String,
    pub mode: FinetuneMode,
    pub fraction: f64,
    pub replicate: usize,
}

/// Matrix cells in init, mode, fraction, replicate order.
pub fn cells(config: &ExperimentConfig) -> Vec<CellSpec> {
    let ft = &config.finetune;
    let mut out = Vec::with_capacity(config.cell_count());
    for init in config.matrix_inits() {
        for &mode in &ft.modes {
            for &fraction in &ft.fractions {
                for replicate in 0..ft.replicates {
                    out.push(CellSpec {
                        init: init.clone(),
                        mode,
                        fraction,
                        replicate,
                    });
                }
            }
        }
    }
    out
}

/// Everything that determines a cell's result.
#[derive(Serialize)]
struct CellIdentity<'a> {
    init: String,
    mode: FinetuneMode,
    training: TrainSpec,
    fraction: f64,
    replicate: usize,
    subsample_seed: u64,
    finetune_seed: u64,
    eval: EvalSection,
    eval_seed: u64,
    target: &'a DatasetSpec,
    target_seed: u64,
    split: [f64; 3],
    split_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub cell_hash: String,
    pub init: String,
    pub mode: FinetuneMode,
    pub fraction: f64,
    pub replicate: usize,
    pub n_labeled: usize,
    pub final_val: Option<f64>,
    pub report: MetricReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellFailure {
    pub cell: CellSpec,
    pub cell_hash: String,
    pub error: String,
}

pub struct ExperimentOutcome {
    pub records: Vec<CellRecord>,
    pub failures: Vec<CellFailure>,
    pub manifest: RunManifest,
}

fn limited_size(config: &ExperimentConfig, init: &str, target: &Target, fraction: f64) -> Option<usize> {
    config
        .pretrain_spec(init)
        .filter(|p| p.limited)
        .map(|_| target.subset_size(fraction).max(1))
}

fn cell_hash(
    config: &ExperimentConfig,
    seeds: &Seeds,
    store: &InitStore<'_>,
    target: &Target,
    cell: &CellSpec,
) -> String {
    let name = &config.target.dataset;
    config_hash(&CellIdentity {
        init: store.hash_of(&cell.init, limited_size(config, &cell.init, target, cell.fraction)),
        mode: cell.mode,
        training: config.finetune.train_spec(cell.mode),
        fraction: cell.fraction,
        replicate: cell.replicate,
        subsample_seed: seeds.subsample(),
        finetune_seed: seeds.finetune(cell.replicate),
        eval: config.eval,
        eval_seed: seeds.eval(),
        target: config.dataset(name).expect("validated"),
        target_seed: seeds.dataset(config, name),
        split: config.target.split,
        split_seed: seeds.split(),
    })
}

pub fn bootstrap_options(config: &ExperimentConfig, seeds: &Seeds) -> BootstrapOptions {
    BootstrapOptions {
        resamples: config.eval.resamples,
        percentiles: config.eval.percentiles,
        seed: seeds.eval(),
        weighting: config.eval.weighting,
    }
}

fn run_cell(
    config: &ExperimentConfig,
    seeds: &Seeds,
    target: &Target,
    init: &Checkpoint,
    cell: &CellSpec,
    hash: &str,
    cells_dir: &Path,
) -> Result<CellRecord> {
    let subset = target.labeled_subset(cell.fraction, cell.replicate, seeds)?;
    let train = config
        .finetune
        .train_spec(cell.mode)
        .to_finetune(cell.mode, seeds.finetune(cell.replicate));
    let model = finetune(init, &subset, Some(&target.val), &train)?;
    let run = format!(
        "{}/{}/{}/r{}",
        cell.init,
        cell.mode.as_str(),
        cell.fraction,
        cell.replicate
    );
    let predictions = model.predict(&target.test, &run)?;
    let report = evaluate(&predictions, &bootstrap_options(config, seeds))?;
    write_history(&cells_dir.join(format!("{hash}.history.csv")), &model.history)?;
    let record = CellRecord {
        cell_hash: hash.to_string(),
        init: cell.init.clone(),
        mode: cell.mode,
        fraction: cell.fraction,
        replicate: cell.replicate,
        n_labeled: subset.labeled_mask.iter().filter(|&&m| m).count(),
        final_val: model.final_val_metric(),
        report,
    };
    fs::write(
        cells_dir.join(format!("{hash}.json")),
        serde_json::to_string_pretty(&record)?,
    )?;
    Ok(record)
}

fn load_cell(path: &Path) -> Option<CellRecord> {
    serde_json::from_str(&fs::read_to_string(path).ok()?).ok()
}

/// Runs the whole matrix, writing cells, tables, figures and the manifest
/// under `opts.out`. Failed cells are recorded and skipped.
pub fn cmd_experiment(config: &ExperimentConfig, opts: &RunOptions) -> Result<ExperimentOutcome> {
    let out = &opts.out;
    let cells_dir = out.join("cells");
    if !opts.resume
        && fs::read_dir(&cells_dir)
            .map(|mut d| d.next().is_some())
            .unwrap_or(false)
    {
        bail!(crate::config::ConfigError(format!(
            "{} already holds results; pass --resume to continue it",
            out.display()
        )));
    }
    fs::create_dir_all(&cells_dir)?;
    let seeds = Seeds::new(config.seed);
    let mut manifest = RunManifest::new("experiment", config, &seeds, opts.jobs, opts.resume);

    with_jobs(opts.jobs, || -> Result<ExperimentOutcome> {
        let datasets = manifest.time("datasets", || load_datasets(config, &seeds))?;
        let target = Target::new(config, &datasets, &seeds)?;
        manifest.subset_sizes = config
            .finetune
            .fractions
            .iter()
            .map(|&fraction| SubsetSize {
                fraction,
                labeled_train: target.labeled_train.len(),
                n_labeled: target.subset_size(fraction),
            })
            .collect();
        for s in &manifest.subset_sizes {
            log::info!(
                "fraction {}: {} of {} labeled train samples",
                s.fraction,
                s.n_labeled,
                s.labeled_train
            );
        }

        let mut store = InitStore::new(config, &seeds, out);
        let specs = cells(config);
        let hashes: Vec<String> = specs
            .iter()
            .map(|c| cell_hash(config, &seeds, &store, &target, c))
            .collect();

        let mut done: BTreeMap<usize, CellRecord> = BTreeMap::new();
        if opts.resume {
            for (i, h) in hashes.iter().enumerate() {
                if let Some(r) = load_cell(&cells_dir.join(format!("{h}.json"))) {
                    done.insert(i, r);
                }
            }
            log::info!("resuming: {} of {} cells already complete", done.len(), specs.len());
        }

        // Initial weights, built once per distinct (init, limited size).
        let mut inits: BTreeMap<usize, std::result::Result<Checkpoint, String>> = BTreeMap::new();
        let mut by_key: BTreeMap<(String, Option<usize>), std::result::Result<Checkpoint, String>> = BTreeMap::new();
        let start = std::time::Instant::now();
        for (i, c) in specs.iter().enumerate() {
            if done.contains_key(&i) {
                continue;
            }
            let key = (c.init.clone(), limited_size(config, &c.init, &target, c.fraction));
            let built = by_key
                .entry(key.clone())
                .or_insert_with(|| {
                    store
                        .get(&key.0, key.1, &datasets, &target)
                        .map_err(|e| format!("{e:#}"))
                })
                .clone();
            inits.insert(i, built);
        }
        manifest.timings.push(crate::manifest::Timing {
            stage: "initializations".into(),
            seconds: start.elapsed().as_secs_f64(),
        });

        let start = std::time::Instant::now();
        let pending: Vec<usize> = (0..specs.len()).filter(|i| !done.contains_key(i)).collect();
        let results: Vec<(usize, std::result::Result<CellRecord, String>)> = pending
            .par_iter()
            .map(|&i| {
                let r = match &inits[&i] {
                    Ok(ckpt) => run_cell(config, &seeds, &target, ckpt, &specs[i], &hashes[i], &cells_dir)
                        .map_err(|e| format!("{e:#}")),
                    Err(e) => Err(format!("initialization `{}` failed: {e}", specs[i].init)),
                };
                (i, r)
            })
            .collect();
        manifest.timings.push(crate::manifest::Timing {
            stage: "cells".into(),
            seconds: start.elapsed().as_secs_f64(),
        });

        let mut failures = Vec::new();
        let mut states: BTreeMap<usize, (CellState, Option<String>)> =
            done.keys().map(|&i| (i, (CellState::Resumed, None))).collect();
        for (i, r) in results {
            match r {
                Ok(rec) => {
                    done.insert(i, rec);
                    states.insert(i, (CellState::Completed, None));
                }
                Err(e) => {
                    log::error!("cell {} failed: {e}", hashes[i]);
                    failures.push(CellFailure {
                        cell: specs[i].clone(),
                        cell_hash: hashes[i].clone(),
                        error: e.clone(),
                    });
                    states.insert(i, (CellState::Failed, Some(e)));
                }
            }
        }
        manifest.cells = states
            .into_iter()
            .map(|(i, (state, error))| CellStatus {
                cell_hash: hashes[i].clone(),
                init: specs[i].init.clone(),
                mode: specs[i].mode.as_str().to_string(),
                fraction: specs[i].fraction,
                replicate: specs[i].replicate,
                state,
                error,
            })
            .collect();
        for (i, _) in done.iter() {
            manifest.add_artifact(out, &cells_dir.join(format!("{}.json", hashes[*i])));
            manifest.add_artifact(out, &cells_dir.join(format!("{}.history.csv", hashes[*i])));
        }
        for p in &store.artifacts {
            manifest.add_artifact(out, p);
        }

        let records: Vec<CellRecord> = done.into_values().collect();
        let written = write_results(config, out, &records, &failures)?;
        for p in &written {
            manifest.add_artifact(out, p);
        }
        let manifest_path = manifest.write(out, config)?;
        log::info!("wrote {}", manifest_path.display());
        Ok(ExperimentOutcome {
            records,
            failures,
            manifest: manifest.clone(),
        })
    })?
}

/// Mean over replicates of one (init, mode, fraction) group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub init: String,
    pub mode: String,
    pub fraction: f64,
    pub n_labeled: usize,
    pub replicates: usize,
    pub mean_point: f64,
    pub mean_median: f64,
    pub mean_q_low: f64,
    pub mean_q_high: f64,
}

/// Groups records in config order and averages their reports.
pub fn summarize(config: &ExperimentConfig, records: &[CellRecord]) -> Result<Vec<SummaryRow>> {
    let mut rows = Vec::new();
    for init in config.matrix_inits() {
        for &mode in &config.finetune.modes {
            for &fraction in &config.finetune.fractions {
                let group: Vec<&CellRecord> = records
                    .iter()
                    .filter(|r| r.init == init && r.mode == mode && r.fraction == fraction)
                    .collect();
                if group.is_empty() {
                    continue;
                }
                let reports: Vec<MetricReport> = group.iter().map(|r| r.report.clone()).collect();
                let agg = aggregate_seeds(&reports)?;
                rows.push(SummaryRow {
                    init: init.clone(),
                    mode: mode.as_str().to_string(),
                    fraction,
                    n_labeled: group[0].n_labeled,
                    replicates: group.len(),
                    mean_point: agg.mean_point,
                    mean_median: agg.mean_median,
                    mean_q_low: agg.mean_q_low,
                    mean_q_high: agg.mean_q_high,
                });
            }
        }
    }
    Ok(rows)
}

fn write_csv<S: Serialize>(path: &Path, rows: &[S], header: &[&str]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct CellRow<'a> {
    init: &'a str,
    mode: &'a str,
    fraction: f64,
    replicate: usize,
    n_labeled: usize,
    point: f64,
    median: f64,
    q_low: f64,
    q_high: f64,
    skipped: usize,
    final_val: Option<f64>,
    cell_hash: &'a str,
}

const CELL_HEADER: [&str; 12] = [
    "init",
    "mode",
    "fraction",
    "replicate",
    "n_labeled",
    "point",
    "median",
    "q_low",
    "q_high",
    "skipped",
    "final_val",
    "cell_hash",
];

#[derive(Serialize)]
struct FailureRow<'a> {
    init: &'a str,
    mode: &'a str,
    fraction: f64,
    replicate: usize,
    cell_hash: &'a str,
    error: &'a str,
}

pub const SUMMARY_HEADER: [&str; 9] = [
    "init",
    "mode",
    "fraction",
    "n_labeled",
    "replicates",
    "mean_point",
    "mean_median",
    "mean_q_low",
    "mean_q_high",
];

fn fraction_label(f: f64) -> String {
    format!("{}%", f * 100.0)
}

/// Writes `results/*.csv` and `figures/transfer_<mode>.png`; returns the
/// written paths.
pub fn write_results(
    config: &ExperimentConfig,
    out: &Path,
    records: &[CellRecord],
    failures: &[CellFailure],
) -> Result<Vec<PathBuf>> {
    let results = out.join("results");
    let figures = out.join("figures");
    fs::create_dir_all(&results)?;
    fs::create_dir_all(&figures)?;
    let mut written = Vec::new();

    let mut sorted: Vec<&CellRecord> = records.iter().collect();
    let order = |r: &CellRecord| {
        let inits = config.matrix_inits();
        (
            inits.iter().position(|i| *i == r.init),
            config.finetune.modes.iter().position(|m| *m == r.mode),
            config.finetune.fractions.iter().position(|f| *f == r.fraction),
            r.replicate,
        )
    };
    sorted.sort_by_key(|r| order(r));
    let rows: Vec<CellRow<'_>> = sorted
        .iter()
        .map(|r| CellRow {
            init: &r.init,
            mode: r.mode.as_str(),
            fraction: r.fraction,
            replicate: r.replicate,
            n_labeled: r.n_labeled,
            point: r.report.point,
            median: r.report.median,
            q_low: r.report.q_low,
            q_high: r.report.q_high,
            skipped: r.report.skipped,
            final_val: r.final_val,
            cell_hash: &r.cell_hash,
        })
        .collect();
    let path = results.join("cells.csv");
    write_csv(&path, &rows, &CELL_HEADER)?;
    written.push(path);

    let failure_rows: Vec<FailureRow<'_>> = failures
        .iter()
        .map(|f| FailureRow {
            init: &f.cell.init,
            mode: f.cell.mode.as_str(),
            fraction: f.cell.fraction,
            replicate: f.cell.replicate,
            cell_hash: &f.cell_hash,
            error: &f.error,
        })
        .collect();
    let path = results.join("failures.csv");
    write_csv(
        &path,
        &failure_rows,
        &["init", "mode", "fraction", "replicate", "cell_hash", "error"],
    )?;
    written.push(path);

    let summary = summarize(config, records)?;
    let path = results.join("summary.csv");
    write_csv(&path, &summary, &SUMMARY_HEADER)?;
    written.push(path);

    for &mode in &config.finetune.modes {
        let rows: Vec<&SummaryRow> = summary.iter().filter(|r| r.mode == mode.as_str()).collect();
        let cells: Vec<TableCell> = rows
            .iter()
            .map(|r| TableCell {
                row: fraction_label(r.fraction),
                column: r.init.clone(),
                median: r.mean_median,
                q_low: r.mean_q_low,
                q_high: r.mean_q_high,
            })
            .collect();
        let path = results.join(format!("table_{}.csv", mode.as_str()));
        fs::write(&path, render_table_csv("label_fraction", &cells))?;
        written.push(path);
        if !rows.is_empty() {
            let path = figures.join(format!("transfer_{}.png", mode.as_str()));
            plot::transfer_figure(&path, mode.as_str(), &rows)?;
            written.push(path);
        }
    }
    Ok(written)
}

/// Reads `results/summary.csv`.
pub fn read_summary(path: &Path) -> Result<Vec<SummaryRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<Vec<SummaryRow>, _>>()?)
}
