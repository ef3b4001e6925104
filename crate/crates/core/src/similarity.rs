//! Dataset similarity from layer activations.
//!
//! Each dataset's activations at a tap are column-centered and truncated
//! by SVD to the directions carrying a fixed share of the variance. Two
//! datasets are then scored by the mean cosine of the principal angles
//! between their retained subspaces, which needs no pairing between the
//! samples of the two datasets.

use std::io::{BufReader, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::IndexedRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{Model, Tap, Tensor};
use crate::data::DatasetHandle;
use crate::error::{Error, Result};
use crate::seed::{self, TAG_ACTIVATIONS};

pub const DEFAULT_SAMPLES: usize = 2000;
pub const DEFAULT_THRESHOLD: f64 = 0.99;
const ACTIVATION_MAGIC: &[u8; 8] = b"MOCOACT1";
const ORTHONORMAL_TOL: f64 = 1e-8;

/// How convolutional activations become rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpatialMode {
    /// One row per image: the spatial mean of each channel.
    #[default]
    GlobalAverage,
    /// One row per image and spatial position.
    FlattenPositions,
}

/// Denominator of the mean canonical correlation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CcaMean {
    /// Average over `min(r_a, r_b)` correlations.
    #[default]
    MinRank,
    /// Average over `max(r_a, r_b)`, the missing correlations counting as 0.
    ZeroPadded,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActivationMatrix {
    /// `N x D`, one row per sample.
    pub values: DMatrix<f64>,
    pub layer: Tap,
    pub dataset: String,
    pub model_hash: String,
}

/// SHA-256 over parameter names, shapes and values, hex-truncated to 16
/// characters.
pub fn model_hash(model: &Model) -> String {
    let mut h = Sha256::new();
    for p in model.params.iter() {
        h.update(p.name.as_bytes());
        for &s in &p.shape {
            h.update((s as u64).to_le_bytes());
        }
        for &v in &p.data {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(&h.finalize()[..8])
}

/// Sorted indices of the samples used for `dataset`; all of them when the
/// dataset has at most `n`.
pub fn activation_subset(dataset: &DatasetHandle, n: usize, seed: u64) -> Vec<usize> {
    let all: Vec<usize> = (0..dataset.len()).collect();
    if n >= dataset.len() {
        return all;
    }
    let mut rng = seed::rng(seed, &[TAG_ACTIVATIONS, seed::key_of(&dataset.name)]);
    let mut picked: Vec<usize> = all.choose_multiple(&mut rng, n).copied().collect();
    picked.sort_unstable();
    picked
}

fn rows_of(t: &Tensor<f32>, spatial: SpatialMode) -> Vec<Vec<f64>> {
    let (c, h, w) = t.chw();
    let hw = h * w;
    match spatial {
        SpatialMode::GlobalAverage => vec![(0..c)
            .map(|ch| {
                t.data[ch * hw..(ch + 1) * hw]
                    .iter()
                    .map(|&v| f64::from(v))
                    .sum::<f64>()
                    / hw as f64
            })
            .collect()],
        SpatialMode::FlattenPositions => (0..hw)
            .map(|pos| (0..c).map(|ch| f64::from(t.data[ch * hw + pos])).collect())
            .collect(),
    }
}

/// Activations of up to `n` randomly chosen samples at each of `layers`,
/// from one forward pass per sample.
pub fn extract_activations_multi(
    model: &Model,
    dataset: &DatasetHandle,
    layers: &[Tap],
    n: usize,
    seed: u64,
    spatial: SpatialMode,
) -> Result<Vec<ActivationMatrix>> {
    if dataset.is_empty() {
        return Err(Error::invalid(format!("dataset {} is empty", dataset.name)));
    }
    if n == 0 {
        return Err(Error::invalid("sample count must be positive"));
    }
    if n > dataset.len() {
        log::warn!(
            "dataset {} has {} samples; using all of them instead of {n}",
            dataset.name,
            dataset.len()
        );
    }
    let indices = activation_subset(dataset, n, seed);
    let per_sample: Vec<Vec<Tensor<f32>>> = indices
        .par_iter()
        .map(|&i| model.tap_activations(&Tensor::from_image(&dataset.samples[i].pixels), layers))
        .collect::<Result<_>>()?;
    let hash = model_hash(model);
    layers
        .iter()
        .enumerate()
        .map(|(k, &layer)| {
            let rows: Vec<Vec<f64>> = per_sample.iter().flat_map(|acts| rows_of(&acts[k], spatial)).collect();
            let d = rows[0].len();
            let values = DMatrix::from_fn(rows.len(), d, |r, c| rows[r][c]);
            if values.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("non-finite activation at {layer}")));
            }
            Ok(ActivationMatrix {
                values,
                layer,
                dataset: dataset.name.clone(),
                model_hash: hash.clone(),
            })
        })
        .collect()
}

/// Globally pooled activations of up to `n` samples at `layer`.
pub fn extract_activations(
    model: &Model,
    dataset: &DatasetHandle,
    layer: Tap,
    n: usize,
    seed: u64,
) -> Result<ActivationMatrix> {
    Ok(extract_activations_multi(model, dataset, &[layer], n, seed, SpatialMode::GlobalAverage)?.remove(0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubspaceBasis {
    /// `D x r`, orthonormal columns ordered by decreasing singular value.
    pub basis: DMatrix<f64>,
    /// All singular values of the centered matrix, descending.
    pub singular_values: Vec<f64>,
    pub retained_variance: f64,
}

impl SubspaceBasis {
    pub fn rank(&self) -> usize {
        self.basis.ncols()
    }
}

/// Smallest set of leading right-singular vectors of the column-centered
/// `values` whose squared singular values reach `threshold` of the total.
pub fn top_subspace(values: &DMatrix<f64>, threshold: f64) -> Result<SubspaceBasis> {
    if values.nrows() < 2 || values.ncols() == 0 {
        return Err(Error::invalid(format!("need at least 2 rows, got {}", values.nrows())));
    }
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::invalid(format!("threshold {threshold} outside (0, 1]")));
    }
    let mut centered = values.clone();
    for mut col in centered.column_iter_mut() {
        let mean = col.mean();
        col.add_scalar_mut(-mean);
    }
    let total: f64 = centered.iter().map(|v| v * v).sum();
    let scale = values.iter().map(|v| v * v).sum::<f64>().max(f64::MIN_POSITIVE);
    if !(total > 1e-24 * scale) {
        return Err(Error::DegenerateInput("activations have zero variance".into()));
    }
    let svd = centered.svd(false, true);
    let v_t = svd
        .v_t
        .as_ref()
        .ok_or_else(|| Error::Numeric("SVD did not converge".into()))?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let sv: Vec<f64> = order.iter().map(|&i| svd.singular_values[i]).collect();
    let energy: f64 = sv.iter().map(|s| s * s).sum();
    let target = threshold * energy * (1.0 - 1e-12);
    let mut cum = 0.0;
    let mut r = sv.len();
    for (k, s) in sv.iter().enumerate() {
        cum += s * s;
        if cum >= target {
            r = k + 1;
            break;
        }
    }
    let basis = DMatrix::from_fn(values.ncols(), r, |row, col| v_t[(order[col], row)]);
    let gram = basis.transpose() * &basis;
    let deviation = (gram - DMatrix::identity(r, r)).abs().max();
    if deviation > ORTHONORMAL_TOL {
        return Err(Error::Numeric(format!(
            "basis not orthonormal (deviation {deviation:e})"
        )));
    }
    let retained = sv[..r].iter().map(|s| s * s).sum::<f64>() / energy;
    Ok(SubspaceBasis {
        basis,
        singular_values: sv,
        retained_variance: retained,
    })
}

/// Descending cosines of the principal angles between two column spaces.
pub fn principal_cosines(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<Vec<f64>> {
    if a.nrows() != b.nrows() {
        return Err(Error::invalid(format!(
            "ambient dimensions differ: {} vs {}",
            a.nrows(),
            b.nrows()
        )));
    }
    if a.ncols() == 0 || b.ncols() == 0 {
        return Err(Error::invalid("empty basis"));
    }
    // The taller product keeps the result independent of argument order.
    let m = if a.ncols() >= b.ncols() {
        a.transpose() * b
    } else {
        b.transpose() * a
    };
    let mut s: Vec<f64> = m.singular_values().iter().map(|v| v.clamp(0.0, 1.0)).collect();
    s.sort_by(|x, y| y.total_cmp(x));
    Ok(s)
}

/// Mean principal-angle cosine over `min(r_a, r_b)`.
pub fn cca_similarity(a: &SubspaceBasis, b: &SubspaceBasis) -> Result<f64> {
    cca_similarity_with(a, b, CcaMean::MinRank)
}

pub fn cca_similarity_with(a: &SubspaceBasis, b: &SubspaceBasis, mean: CcaMean) -> Result<f64> {
    let cos = principal_cosines(&a.basis, &b.basis)?;
    let denom = match mean {
        CcaMean::MinRank => cos.len(),
        CcaMean::ZeroPadded => a.rank().max(b.rank()),
    };
    Ok(cos.iter().sum::<f64>() / denom as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimilarityOptions {
    pub samples: usize,
    pub threshold: f64,
    pub seed: u64,
    #[serde(default)]
    pub spatial: SpatialMode,
    #[serde(default)]
    pub mean: CcaMean,
}

impl Default for SimilarityOptions {
    fn default() -> Self {
        Self {
            samples: DEFAULT_SAMPLES,
            threshold: DEFAULT_THRESHOLD,
            seed: 0,
            spatial: SpatialMode::GlobalAverage,
            mean: CcaMean::MinRank,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityEntry {
    pub a: String,
    pub b: String,
    pub layer: Tap,
    pub score: f64,
    pub rank_a: usize,
    pub rank_b: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    pub datasets: Vec<String>,
    pub layers: Vec<Tap>,
    /// Rows used per dataset.
    pub samples: Vec<usize>,
    pub options: SimilarityOptions,
    pub model_hash: String,
    /// One entry per unordered pair, self-pairs included.
    pub entries: Vec<SimilarityEntry>,
}

impl SimilarityReport {
    pub fn score(&self, a: &str, b: &str, layer: Tap) -> Option<f64> {
        self.entries
            .iter()
            .find(|e| e.layer == layer && ((e.a == a && e.b == b) || (e.a == b && e.b == a)))
            .map(|e| e.score)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Scores every unordered pair of `datasets` at every layer through one
/// fixed model.
pub fn pairwise_dataset_similarity(
    model: &Model,
    datasets: &[&DatasetHandle],
    layers: &[Tap],
    options: &SimilarityOptions,
) -> Result<SimilarityReport> {
    if datasets.len() < 2 {
        return Err(Error::invalid("need at least two datasets"));
    }
    if layers.is_empty() {
        return Err(Error::invalid("need at least one layer"));
    }
    let mut bases: Vec<Vec<SubspaceBasis>> = Vec::with_capacity(datasets.len());
    let mut samples = Vec::with_capacity(datasets.len());
    for d in datasets {
        let acts = extract_activations_multi(model, d, layers, options.samples, options.seed, options.spatial)?;
        samples.push(acts[0].values.nrows());
        bases.push(
            acts.par_iter()
                .map(|a| top_subspace(&a.values, options.threshold))
                .collect::<Result<_>>()?,
        );
    }
    let mut entries = Vec::new();
    for i in 0..datasets.len() {
        for j in i..datasets.len() {
            for (k, &layer) in layers.iter().enumerate() {
                entries.push(SimilarityEntry {
                    a: datasets[i].name.clone(),
                    b: datasets[j].name.clone(),
                    layer,
                    score: cca_similarity_with(&bases[i][k], &bases[j][k], options.mean)?,
                    rank_a: bases[i][k].rank(),
                    rank_b: bases[j][k].rank(),
                });
            }
        }
    }
    Ok(SimilarityReport {
        datasets: datasets.iter().map(|d| d.name.clone()).collect(),
        layers: layers.to_vec(),
        samples,
        options: *options,
        model_hash: model_hash(model),
        entries,
    })
}

/// CSV with a header row of unit indices.
pub fn write_activations_csv(m: &ActivationMatrix, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::load(path, e.to_string()))?;
    w.write_record((0..m.values.ncols()).map(|c| c.to_string()))
        .map_err(|e| Error::load(path, e.to_string()))?;
    for row in m.values.row_iter() {
        w.write_record(row.iter().map(|v| v.to_string()))
            .map_err(|e| Error::load(path, e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_activations_csv(path: &Path, layer: Tap, dataset: &str) -> Result<ActivationMatrix> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::load(path, e.to_string()))?;
    let d = r.headers().map_err(|e| Error::load(path, e.to_string()))?.len();
    let mut data = Vec::new();
    let mut n = 0;
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::load(path, e.to_string()))?;
        for field in rec.iter() {
            data.push(
                field
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| Error::load(path, format!("row {n}: {e}")))?,
            );
        }
        n += 1;
    }
    if data.len() != n * d {
        return Err(Error::load(path, "ragged rows"));
    }
    Ok(ActivationMatrix {
        values: DMatrix::from_row_slice(n, d, &data),
        layer,
        dataset: dataset.into(),
        model_hash: String::new(),
    })
}

/// Raw binary: 8-byte magic, `N` and `D` as u64, tap index as u32, a
/// reserved u32, then `N x D` row-major f32, all little-endian.
pub fn write_activations_bin(m: &ActivationMatrix, path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    out.write_all(ACTIVATION_MAGIC)?;
    out.write_all(&(m.values.nrows() as u64).to_le_bytes())?;
    out.write_all(&(m.values.ncols() as u64).to_le_bytes())?;
    out.write_all(&(m.layer.index() as u32).to_le_bytes())?;
    out.write_all(&0u32.to_le_bytes())?;
    for row in m.values.row_iter() {
        for &v in row.iter() {
            out.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_activations_bin(path: &Path, dataset: &str) -> Result<ActivationMatrix> {
    let mut input = BufReader::new(std::fs::File::open(path)?);
    let mut header = [0u8; 32];
    input
        .read_exact(&mut header)
        .map_err(|_| Error::load(path, "truncated header"))?;
    if &header[..8] != ACTIVATION_MAGIC {
        return Err(Error::load(path, "bad magic"));
    }
    let word = |r: std::ops::Range<usize>| u64::from_le_bytes(header[r].try_into().expect("8 bytes")) as usize;
    let (n, d) = (word(8..16), word(16..24));
    let tag = u32::from_le_bytes(header[24..28].try_into().expect("4 bytes")) as usize;
    let layer = *Tap::ALL
        .get(tag)
        .ok_or_else(|| Error::load(path, format!("unknown layer tag {tag}")))?;
    let mut body = Vec::new();
    input.read_to_end(&mut body)?;
    if Some(body.len()) != n.checked_mul(d).and_then(|v| v.checked_mul(4)) {
        return Err(Error::load(path, format!("expected {n} x {d} floats")));
    }
    let data: Vec<f64> = body
        .chunks_exact(4)
        .map(|b| f64::from(f32::from_le_bytes(b.try_into().expect("4 bytes"))))
        .collect();
    Ok(ActivationMatrix {
        values: DMatrix::from_row_slice(n, d, &data),
        layer,
        dataset: dataset.into(),
        model_hash: String::new(),
    })
}

#[cfg(test)]
mod tests;
