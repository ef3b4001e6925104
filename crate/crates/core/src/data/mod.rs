//! Images, datasets, splits and augmentation.

mod augment;
mod folder;
mod split;
mod synth;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use augment::{make_view_pair, AugmentationPolicy, Blur, IntensityJitter, RandomResizedCrop};
pub use folder::{export_folder, load_image_folder, load_image_folder_with, FolderOptions, MissingLabels};
pub use split::{split, subsample_labeled, SplitAssignment, SubsampleSpec};
pub use synth::{generate_synthetic_domain, SynthParams, DEFAULT_IMAGE_SIZE, LARGE_DOMAIN_ARITY};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainTag {
    Generic,
    LargeDomain,
    SmallDomain,
    External,
}

impl DomainTag {
    pub fn as_str(self) -> &'static str {
        match self {
            DomainTag::Generic => "generic",
            DomainTag::LargeDomain => "large_domain",
            DomainTag::SmallDomain => "small_domain",
            DomainTag::External => "external",
        }
    }
}

/// One image (channels x height x width, values in [0, 1]) with optional
/// multi-hot labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pub pixels: Array3<f32>,
    pub labels: Option<Vec<u8>>,
    pub sample_id: u64,
    pub domain: DomainTag,
}

impl ImageSample {
    pub fn validate(&self) -> Result<()> {
        if let Some(bad) = self.pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!(
                "sample {}: pixel value {bad} outside [0,1]",
                self.sample_id
            )));
        }
        if let Some(labels) = &self.labels {
            if labels.iter().any(|&l| l > 1) {
                return Err(Error::invalid(format!("sample {}: labels must be 0/1", self.sample_id)));
            }
        }
        Ok(())
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.pixels.dim()
    }
}

/// An ordered collection of samples sharing one label arity.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetHandle {
    pub name: String,
    pub task_arity: usize,
    pub samples: Vec<ImageSample>,
    pub labeled_mask: Vec<bool>,
}

impl DatasetHandle {
    /// Builds a handle, deriving `labeled_mask` from the samples and checking
    /// the arity and id invariants.
    pub fn new(name: impl Into<String>, task_arity: usize, samples: Vec<ImageSample>) -> Result<Self> {
        let name = name.into();
        let mut seen = std::collections::HashSet::with_capacity(samples.len());
        for s in &samples {
            if !seen.insert(s.sample_id) {
                return Err(Error::invalid(format!(
                    "dataset {name}: duplicate sample_id {}",
                    s.sample_id
                )));
            }
            if let Some(l) = &s.labels {
                if l.len() != task_arity {
                    return Err(Error::invalid(format!(
                        "dataset {name}: sample {} has {} labels, expected {task_arity}",
                        s.sample_id,
                        l.len()
                    )));
                }
            }
        }
        let labeled_mask = samples.iter().map(|s| s.labels.is_some()).collect();
        Ok(Self {
            name,
            task_arity,
            samples,
            labeled_mask,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// New handle holding the samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize], name: impl Into<String>) -> Self {
        let samples: Vec<ImageSample> = indices.iter().map(|&i| self.samples[i].clone()).collect();
        let labeled_mask = indices.iter().map(|&i| self.labeled_mask[i]).collect();
        Self {
            name: name.into(),
            task_arity: self.task_arity,
            samples,
            labeled_mask,
        }
    }

    /// Labeled samples only.
    pub fn labeled(&self) -> Self {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| self.labeled_mask[i]).collect();
        self.subset(&idx, self.name.clone())
    }

    /// Concatenates datasets for joint pretraining; sample ids are
    /// re-keyed by position so they stay unique. Labels are dropped.
    pub fn concat_unlabeled(name: impl Into<String>, parts: &[&DatasetHandle]) -> Self {
        let mut samples = Vec::new();
        for part in parts {
            for s in &part.samples {
                let mut s = s.clone();
                s.labels = None;
                s.sample_id = samples.len() as u64;
                samples.push(s);
            }
        }
        let labeled_mask = vec![false; samples.len()];
        Self {
            name: name.into(),
            task_arity: parts.first().map_or(1, |p| p.task_arity),
            samples,
            labeled_mask,
        }
    }

    /// Image dimensions, if every sample shares them.
    pub fn image_dims(&self) -> Option<(usize, usize, usize)> {
        let first = self.samples.first()?.dims();
        self.samples.iter().all(|s| s.dims() == first).then_some(first)
    }

    pub fn validate(&self) -> Result<()> {
        if self.labeled_mask.len() != self.samples.len() {
            return Err(Error::invalid("labeled_mask length differs from sample count"));
        }
        for s in &self.samples {
            s.validate()?;
        }
        Ok(())
    }
}
