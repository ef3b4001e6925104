//! AUROC, class-weighted AUROC and bootstrap percentile intervals.

use std::cmp::Ordering;
use std::fmt::Write as _;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{self, TAG_BOOTSTRAP};

/// Row-major `N x L` scores with matching multi-hot labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
    pub n: usize,
    pub arity: usize,
    pub dataset: String,
    pub run: String,
}

impl PredictionSet {
    pub fn new(
        scores: Vec<f64>,
        labels: Vec<u8>,
        arity: usize,
        dataset: impl Into<String>,
        run: impl Into<String>,
    ) -> Result<Self> {
        if arity == 0 || scores.len() % arity != 0 || scores.len() != labels.len() {
            return Err(Error::invalid(format!(
                "{} scores and {} labels do not form rows of arity {arity}",
                scores.len(),
                labels.len()
            )));
        }
        if labels.iter().any(|&y| y > 1) {
            return Err(Error::invalid("labels must be 0 or 1"));
        }
        Ok(Self {
            n: scores.len() / arity,
            scores,
            labels,
            arity,
            dataset: dataset.into(),
            run: run.into(),
        })
    }

    /// Scores and labels of one class.
    pub fn column(&self, class: usize) -> (Vec<f64>, Vec<u8>) {
        (0..self.n)
            .map(|i| (self.scores[i * self.arity + class], self.labels[i * self.arity + class]))
            .unzip()
    }

    /// The rows at `indices`, repeats allowed.
    pub fn resample(&self, indices: &[usize]) -> Self {
        let l = self.arity;
        let mut scores = Vec::with_capacity(indices.len() * l);
        let mut labels = Vec::with_capacity(indices.len() * l);
        for &i in indices {
            scores.extend_from_slice(&self.scores[i * l..(i + 1) * l]);
            labels.extend_from_slice(&self.labels[i * l..(i + 1) * l]);
        }
        Self {
            scores,
            labels,
            n: indices.len(),
            arity: l,
            dataset: self.dataset.clone(),
            run: self.run.clone(),
        }
    }
}

/// Mann-Whitney AUROC with half credit for ties, via midranks.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::invalid("scores and labels differ in length"));
    }
    if labels.iter().any(|&y| y > 1) {
        return Err(Error::invalid("labels must be 0 or 1"));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Numeric("NaN score".into()));
    }
    let pos = labels.iter().filter(|&&y| y == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(format!("{pos} positives and {neg} negatives")));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the positive rank sum keeps midranks integral.
    let mut twice_rank_sum: u64 = 0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]].partial_cmp(&scores[order[start]]) == Some(Ordering::Equal) {
            end += 1;
        }
        let twice_midrank = (start + 1 + end) as u64;
        let tied_pos = order[start..end].iter().filter(|&&i| labels[i] == 1).count() as u64;
        twice_rank_sum += tied_pos * twice_midrank;
        start = end;
    }
    let (p, n) = (pos as u64, neg as u64);
    let twice_u = twice_rank_sum - p * (p + 1);
    Ok(twice_u as f64 / (2 * p * n) as f64)
}

/// How per-class AUROCs are weighted in [`weighted_auroc`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassWeighting {
    /// Number of positive samples in the class.
    #[default]
    PositiveCount,
    /// Number of samples carrying a label for the class.
    LabeledCount,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedAuroc {
    pub value: f64,
    /// `None` for classes lacking positives or negatives.
    pub per_class: Vec<Option<f64>>,
    pub weights: Vec<f64>,
    pub excluded: Vec<usize>,
}

/// Class-weighted AUROC with positive-count weights.
pub fn weighted_auroc(predictions: &PredictionSet) -> Result<f64> {
    weighted_auroc_detail(predictions, ClassWeighting::PositiveCount).map(|w| w.value)
}

pub fn weighted_auroc_detail(predictions: &PredictionSet, weighting: ClassWeighting) -> Result<WeightedAuroc> {
    let mut per_class = Vec::with_capacity(predictions.arity);
    let mut weights = Vec::with_capacity(predictions.arity);
    let mut excluded = Vec::new();
    let (mut num, mut den) = (0.0, 0.0);
    for c in 0..predictions.arity {
        let (s, y) = predictions.column(c);
        let w = match weighting {
            ClassWeighting::PositiveCount => y.iter().filter(|&&v| v == 1).count() as f64,
            ClassWeighting::LabeledCount => y.len() as f64,
        };
        weights.push(w);
        match auroc(&s, &y) {
            Ok(a) => {
                num += w * a;
                den += w;
                per_class.push(Some(a));
            }
            Err(Error::UndefinedMetric(_)) => {
                excluded.push(c);
                per_class.push(None);
            }
            Err(e) => return Err(e),
        }
    }
    if den == 0.0 {
        return Err(Error::UndefinedMetric(
            "no class has both positives and negatives".into(),
        ));
    }
    Ok(WeightedAuroc {
        value: num / den,
        per_class,
        weights,
        excluded,
    })
}

/// Linear interpolation between order statistics of sorted `values`,
/// at position `p / 100 * (n - 1)`.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of empty slice");
    let pos = (p / 100.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + (sorted[hi] - sorted[lo]) * frac
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BootstrapOptions {
    pub resamples: usize,
    pub percentiles: (f64, f64),
    pub seed: u64,
    #[serde(default)]
    pub weighting: ClassWeighting,
}

impl Default for BootstrapOptions {
    fn default() -> Self {
        Self {
            resamples: 500,
            percentiles: (5.0, 95.0),
            seed: 0,
            weighting: ClassWeighting::PositiveCount,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub dataset: String,
    pub run: String,
    /// Per-class AUROC on the full set.
    pub per_class_auroc: Vec<Option<f64>>,
    /// Metric on the full set.
    pub point: f64,
    pub median: f64,
    pub q_low: f64,
    pub q_high: f64,
    pub percentiles: (f64, f64),
    pub resamples: usize,
    pub skipped: usize,
    pub seed: u64,
    /// Metric on each defined resample, in resample order.
    pub values: Vec<f64>,
}

impl MetricReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Percentile bootstrap over rows. Resample `b` draws its indices from a
/// stream keyed by `(seed, b)`, so results do not depend on thread count.
pub fn bootstrap_ci<F>(predictions: &PredictionSet, metric: F, options: &BootstrapOptions) -> Result<MetricReport>
where
    F: Fn(&PredictionSet) -> Result<f64> + Sync,
{
    if options.resamples == 0 {
        return Err(Error::invalid("bootstrap needs at least one resample"));
    }
    let (lo, hi) = options.percentiles;
    if !(0.0..=100.0).contains(&lo) || !(lo..=100.0).contains(&hi) {
        return Err(Error::invalid(format!("bad percentiles ({lo}, {hi})")));
    }
    if predictions.n == 0 {
        return Err(Error::invalid("empty prediction set"));
    }
    let point = metric(predictions)?;
    let per_class_auroc = weighted_auroc_detail(predictions, options.weighting)
        .map(|w| w.per_class)
        .unwrap_or_else(|_| vec![None; predictions.arity]);
    let n = predictions.n;
    let outcomes: Vec<Result<Option<f64>>> = (0..options.resamples)
        .into_par_iter()
        .map(|b| {
            let mut rng = seed::rng(options.seed, &[TAG_BOOTSTRAP, b as u64]);
            let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            match metric(&predictions.resample(&idx)) {
                Ok(v) => Ok(Some(v)),
                Err(Error::UndefinedMetric(_)) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect();
    let mut values = Vec::with_capacity(options.resamples);
    for o in outcomes {
        if let Some(v) = o? {
            values.push(v);
        }
    }
    let skipped = options.resamples - values.len();
    if 2 * skipped > options.resamples || values.is_empty() {
        return Err(Error::DegenerateEvaluation {
            skipped,
            total: options.resamples,
        });
    }
    let mut sorted = values.clone();
    sorted.sort_by(f64::total_cmp);
    Ok(MetricReport {
        dataset: predictions.dataset.clone(),
        run: predictions.run.clone(),
        per_class_auroc,
        point,
        median: percentile(&sorted, 50.0),
        q_low: percentile(&sorted, lo),
        q_high: percentile(&sorted, hi),
        percentiles: options.percentiles,
        resamples: options.resamples,
        skipped,
        seed: options.seed,
        values,
    })
}

/// Weighted AUROC with its bootstrap interval.
pub fn evaluate(predictions: &PredictionSet, options: &BootstrapOptions) -> Result<MetricReport> {
    let weighting = options.weighting;
    bootstrap_ci(
        predictions,
        |p| weighted_auroc_detail(p, weighting).map(|w| w.value),
        options,
    )
}

/// Replicate reports of one experimental cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedAggregate {
    pub mean_point: f64,
    pub mean_median: f64,
    pub mean_q_low: f64,
    pub mean_q_high: f64,
    pub replicates: Vec<MetricReport>,
}

pub fn aggregate_seeds(reports: &[MetricReport]) -> Result<SeedAggregate> {
    if reports.is_empty() {
        return Err(Error::invalid("no reports to aggregate"));
    }
    let mean = |f: fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / reports.len() as f64;
    Ok(SeedAggregate {
        mean_point: mean(|r| r.point),
        mean_median: mean(|r| r.median),
        mean_q_low: mean(|r| r.q_low),
        mean_q_high: mean(|r| r.q_high),
        replicates: reports.to_vec(),
    })
}

/// One cell of a results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableCell {
    pub row: String,
    pub column: String,
    pub median: f64,
    pub q_low: f64,
    pub q_high: f64,
}

/// Renders `median (q_low-q_high)` cells as CSV with rows in first-seen
/// order and one column per distinct column key.
pub fn render_table_csv(corner: &str, cells: &[TableCell]) -> String {
    let mut rows: Vec<&str> = Vec::new();
    let mut cols: Vec<&str> = Vec::new();
    for c in cells {
        if !rows.contains(&c.row.as_str()) {
            rows.push(&c.row);
        }
        if !cols.contains(&c.column.as_str()) {
            cols.push(&c.column);
        }
    }
    let mut out = String::new();
    out.push_str(corner);
    for c in &cols {
        let _ = write!(out, ",{c}");
    }
    out.push('\n');
    for r in &rows {
        out.push_str(r);
        for c in &cols {
            match cells.iter().find(|x| x.row == *r && x.column == *c) {
                Some(x) => {
                    let _ = write!(out, ",{:.3} ({:.3}-{:.3})", x.median, x.q_low, x.q_high);
                }
                None => out.push(','),
            }
        }
        out.push('\n');
    }
    out
}
