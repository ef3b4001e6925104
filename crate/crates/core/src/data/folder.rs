//! Image-folder ingestion and export (PNG/JPEG + `filename,l_0,...` CSV).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer, Luma, Rgb};
use ndarray::Array3;

use super::{DatasetHandle, DomainTag, ImageSample};
use crate::error::{Error, Result};

/// What to do with image files that have no manifest row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MissingLabels {
    /// Keep the image with `labeled_mask = false`.
    #[default]
    Unlabeled,
    Error,
}

#[derive(Debug, Clone, Default)]
pub struct FolderOptions {
    pub missing: MissingLabels,
    /// Resize every image to `size x size`; otherwise all images must share
    /// dimensions.
    pub resize: Option<u32>,
}

fn is_image(path: &Path) -> bool {
    matches!(
        path.extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
            .as_deref(),
        Some("png" | "jpg" | "jpeg")
    )
}

fn read_manifest(path: &Path) -> Result<(usize, BTreeMap<String, Vec<u8>>)> {
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .from_path(path)
        .map_err(|e| Error::load(path, e.to_string()))?;
    let header = reader.headers().map_err(|e| Error::load(path, e.to_string()))?.clone();
    if header.get(0) != Some("filename") || header.len() < 2 {
        return Err(Error::load(path, "manifest header must be `filename,l_0,...,l_{L-1}`"));
    }
    let arity = header.len() - 1;
    let mut rows = BTreeMap::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::load(path, e.to_string()))?;
        let file = record.get(0).unwrap_or_default().to_string();
        if record.len() - 1 != arity {
            return Err(Error::load(
                &file,
                format!("label vector has length {}, expected {arity}", record.len() - 1),
            ));
        }
        let labels = record
            .iter()
            .skip(1)
            .map(|v| match v.trim() {
                "0" => Ok(0u8),
                "1" => Ok(1u8),
                other => Err(Error::load(&file, format!("label `{other}` is not 0/1"))),
            })
            .collect::<Result<Vec<_>>>()?;
        if rows.insert(file.clone(), labels).is_some() {
            return Err(Error::load(&file, "duplicate manifest row"));
        }
    }
    Ok((arity, rows))
}

fn decode(path: &Path, resize: Option<u32>) -> Result<Array3<f32>> {
    let mut img = image::open(path).map_err(|e| Error::load(path, e.to_string()))?;
    if let Some(size) = resize {
        img = img.resize_exact(size, size, image::imageops::FilterType::Triangle);
    }
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut pixels = Array3::<f32>::zeros((3, h, w));
    if img.color().channel_count() <= 2 {
        let luma = img.to_luma32f();
        for (x, y, p) in luma.enumerate_pixels() {
            for c in 0..3 {
                pixels[[c, y as usize, x as usize]] = p[0].clamp(0.0, 1.0);
            }
        }
    } else {
        let rgb = img.to_rgb32f();
        for (x, y, p) in rgb.enumerate_pixels() {
            for c in 0..3 {
                pixels[[c, y as usize, x as usize]] = p[c].clamp(0.0, 1.0);
            }
        }
    }
    Ok(pixels)
}

pub fn load_image_folder(dir: &Path, manifest: &Path) -> Result<DatasetHandle> {
    load_image_folder_with(dir, manifest, &FolderOptions::default())
}

/// Loads every PNG/JPEG in `dir` in lexicographic filename order.
pub fn load_image_folder_with(dir: &Path, manifest: &Path, options: &FolderOptions) -> Result<DatasetHandle> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::load(dir, e.to_string()))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_image(p))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::load(dir, "no PNG/JPEG images found"));
    }
    let (arity, mut rows) = read_manifest(manifest)?;

    let mut samples = Vec::with_capacity(files.len());
    let mut dims = None;
    for (i, file) in files.iter().enumerate() {
        let fname = file
            .file_name()
            .and_then(|f| f.to_str())
            .unwrap_or_default()
            .to_string();
        let pixels = decode(file, options.resize)?;
        match dims {
            None => dims = Some(pixels.dim()),
            Some(d) if d != pixels.dim() => {
                return Err(Error::load(
                    file,
                    format!("image dims {:?} differ from {:?}", pixels.dim(), d),
                ))
            }
            _ => {}
        }
        let labels = rows.remove(&fname);
        if labels.is_none() && options.missing == MissingLabels::Error {
            return Err(Error::load(file, "no manifest entry"));
        }
        samples.push(ImageSample {
            pixels,
            labels,
            sample_id: i as u64,
            domain: DomainTag::External,
        });
    }
    if let Some(orphan) = rows.keys().next() {
        return Err(Error::load(
            dir.join(orphan),
            "manifest row names a file that does not exist",
        ));
    }
    let name = dir
        .file_name()
        .and_then(|f| f.to_str())
        .unwrap_or("external")
        .to_string();
    DatasetHandle::new(name, arity, samples)
}

fn to_u16(v: f32) -> u16 {
    (v.clamp(0.0, 1.0) * 65535.0).round() as u16
}

/// Writes `{sample_id:06}.png` (16-bit) per sample plus `labels.csv`.
pub fn export_folder(dataset: &DatasetHandle, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    for s in &dataset.samples {
        let (c, h, w) = s.dims();
        let gray = c == 1
            || (1..c).all(|k| s.pixels.index_axis(ndarray::Axis(0), k) == s.pixels.index_axis(ndarray::Axis(0), 0));
        let path = dir.join(format!("{:06}.png", s.sample_id));
        let img = if gray {
            DynamicImage::ImageLuma16(ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
                Luma([to_u16(s.pixels[[0, y as usize, x as usize]])])
            }))
        } else {
            DynamicImage::ImageRgb16(ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
                Rgb([0, 1, 2].map(|k| to_u16(s.pixels[[k, y as usize, x as usize]])))
            }))
        };
        img.save(&path).map_err(|e| Error::load(&path, e.to_string()))?;
    }
    let mut writer = csv::Writer::from_path(dir.join("labels.csv")).map_err(|e| Error::load(dir, e.to_string()))?;
    let mut header = vec!["filename".to_string()];
    header.extend((0..dataset.task_arity).map(|k| format!("l_{k}")));
    writer
        .write_record(&header)
        .map_err(|e| Error::load(dir, e.to_string()))?;
    for s in &dataset.samples {
        if let Some(labels) = &s.labels {
            let mut row = vec![format!("{:06}.png", s.sample_id)];
            row.extend(labels.iter().map(|l| l.to_string()));
            writer.write_record(&row).map_err(|e| Error::load(dir, e.to_string()))?;
        }
    }
    writer.flush()?;
    Ok(())
}
