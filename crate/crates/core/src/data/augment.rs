//! Augmented view pairs for contrastive pretraining.
//!
//! The default policy follows the MoCo-v2 recipe (random resized crop,
//! horizontal flip, intensity jitter, Gaussian blur). Colour jitter acts on
//! intensity only since the images are grayscale.

use ndarray::{Array3, Axis};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::ImageSample;
use crate::seed::{self, Rng, TAG_AUGMENT};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomResizedCrop {
    /// Range of the crop area as a fraction of the image area.
    pub scale: (f32, f32),
    /// Range of the crop aspect ratio (width / height).
    pub ratio: (f32, f32),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntensityJitter {
    pub prob: f32,
    /// Brightness factor drawn from `[1 - b, 1 + b]`.
    pub brightness: f32,
    /// Contrast factor drawn from `[1 - c, 1 + c]`.
    pub contrast: f32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Blur {
    pub prob: f32,
    /// Sigma range in pixels of a 224-pixel image; scaled to the actual
    /// image width.
    pub sigma: (f32, f32),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentationPolicy {
    pub crop: Option<RandomResizedCrop>,
    pub flip_prob: f32,
    pub jitter: Option<IntensityJitter>,
    pub blur: Option<Blur>,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        Self::moco_v2()
    }
}

impl AugmentationPolicy {
    pub fn identity() -> Self {
        Self {
            crop: None,
            flip_prob: 0.0,
            jitter: None,
            blur: None,
        }
    }

    pub fn moco_v2() -> Self {
        Self {
            crop: Some(RandomResizedCrop {
                scale: (0.2, 1.0),
                ratio: (3.0 / 4.0, 4.0 / 3.0),
            }),
            flip_prob: 0.5,
            jitter: Some(IntensityJitter {
                prob: 0.8,
                brightness: 0.4,
                contrast: 0.4,
            }),
            blur: Some(Blur {
                prob: 0.5,
                sigma: (0.1, 2.0),
            }),
        }
    }

    /// MoCo-v2 with a narrower crop scale (0.6 to 1) and half-strength
    /// jitter. Crops still cover most of the image, so both views keep the
    /// bulk of the instance content.
    pub fn mild() -> Self {
        let mut p = Self::moco_v2();
        if let Some(c) = p.crop.as_mut() {
            c.scale = (0.6, 1.0);
        }
        if let Some(j) = p.jitter.as_mut() {
            j.brightness = 0.2;
            j.contrast = 0.2;
        }
        p
    }

    pub fn flip_only(prob: f32) -> Self {
        Self {
            flip_prob: prob,
            ..Self::identity()
        }
    }

    /// Applies the policy with an explicit RNG. Output dims equal input dims.
    pub fn apply(&self, pixels: &Array3<f32>, rng: &mut Rng) -> Array3<f32> {
        let mut img = match &self.crop {
            Some(crop) => resized_crop(pixels, crop, rng),
            None => pixels.clone(),
        };
        if self.flip_prob > 0.0 && rng.random::<f32>() < self.flip_prob {
            img.invert_axis(Axis(2));
            img = img.as_standard_layout().into_owned();
        }
        if let Some(j) = &self.jitter {
            if rng.random::<f32>() < j.prob {
                let b = 1.0 + rng.random_range(-j.brightness..=j.brightness);
                let c = 1.0 + rng.random_range(-j.contrast..=j.contrast);
                img.mapv_inplace(|v| (v * b).clamp(0.0, 1.0));
                let mean = img.mean().unwrap_or(0.0);
                img.mapv_inplace(|v| ((v - mean) * c + mean).clamp(0.0, 1.0));
            }
        }
        if let Some(blur) = &self.blur {
            if rng.random::<f32>() < blur.prob {
                let scale = img.dim().2 as f32 / 224.0;
                let sigma = rng.random_range(blur.sigma.0..=blur.sigma.1) * scale;
                img = gaussian_blur(&img, sigma);
            }
        }
        img
    }
}

/// Two independently augmented views of one sample, keyed by
/// `(sample_id, epoch, seed)`.
pub fn make_view_pair(
    sample: &ImageSample,
    policy: &AugmentationPolicy,
    epoch: u64,
    seed: u64,
) -> (Array3<f32>, Array3<f32>) {
    let view = |k: u64| {
        let mut rng = seed::rng(seed, &[TAG_AUGMENT, sample.sample_id, epoch, k]);
        policy.apply(&sample.pixels, &mut rng)
    };
    (view(0), view(1))
}

fn resized_crop(pixels: &Array3<f32>, crop: &RandomResizedCrop, rng: &mut Rng) -> Array3<f32> {
    let (_, h, w) = pixels.dim();
    let area = (h * w) as f32;
    let (log_lo, log_hi) = (crop.ratio.0.ln(), crop.ratio.1.ln());
    let mut region = None;
    for _ in 0..10 {
        let target = area * rng.random_range(crop.scale.0..=crop.scale.1);
        let ratio = if log_hi > log_lo {
            rng.random_range(log_lo..=log_hi).exp()
        } else {
            crop.ratio.0
        };
        let cw = (target * ratio).sqrt();
        let ch = (target / ratio).sqrt();
        if cw <= w as f32 && ch <= h as f32 && cw >= 1.0 && ch >= 1.0 {
            let x0 = rng.random_range(0.0..=(w as f32 - cw));
            let y0 = rng.random_range(0.0..=(h as f32 - ch));
            region = Some((x0, y0, cw, ch));
            break;
        }
    }
    let (x0, y0, cw, ch) = region.unwrap_or((0.0, 0.0, w as f32, h as f32));
    resample(pixels, x0, y0, cw, ch)
}

/// Bilinear resampling of the region `(x0, y0, cw, ch)` back to full size.
fn resample(pixels: &Array3<f32>, x0: f32, y0: f32, cw: f32, ch: f32) -> Array3<f32> {
    let (c, h, w) = pixels.dim();
    let mut out = Array3::<f32>::zeros((c, h, w));
    let sx = cw / w as f32;
    let sy = ch / h as f32;
    for oy in 0..h {
        let fy = (y0 + (oy as f32 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f32);
        let y_lo = fy.floor() as usize;
        let y_hi = (y_lo + 1).min(h - 1);
        let ty = fy - y_lo as f32;
        for ox in 0..w {
            let fx = (x0 + (ox as f32 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f32);
            let x_lo = fx.floor() as usize;
            let x_hi = (x_lo + 1).min(w - 1);
            let tx = fx - x_lo as f32;
            for k in 0..c {
                let top = pixels[[k, y_lo, x_lo]] * (1.0 - tx) + pixels[[k, y_lo, x_hi]] * tx;
                let bottom = pixels[[k, y_hi, x_lo]] * (1.0 - tx) + pixels[[k, y_hi, x_hi]] * tx;
                out[[k, oy, ox]] = (top * (1.0 - ty) + bottom * ty).clamp(0.0, 1.0);
            }
        }
    }
    out
}

fn gaussian_blur(pixels: &Array3<f32>, sigma: f32) -> Array3<f32> {
    if sigma <= 0.0 {
        return pixels.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f32> = (-radius..=radius)
        .map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f32 = kernel.iter().sum();
    let kernel: Vec<f32> = kernel.iter().map(|k| k / norm).collect();
    let (c, h, w) = pixels.dim();
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut tmp = Array3::<f32>::zeros((c, h, w));
    for k in 0..c {
        for y in 0..h {
            for x in 0..w {
                tmp[[k, y, x]] = kernel
                    .iter()
                    .enumerate()
                    .map(|(j, wgt)| wgt * pixels[[k, y, clamp(x as isize + j as isize - radius, w)]])
                    .sum();
            }
        }
    }
    let mut out = Array3::<f32>::zeros((c, h, w));
    for k in 0..c {
        for y in 0..h {
            for x in 0..w {
                out[[k, y, x]] = kernel
                    .iter()
                    .enumerate()
                    .map(|(j, wgt)| wgt * tmp[[k, clamp(y as isize + j as isize - radius, h), x]])
                    .sum::<f32>()
                    .clamp(0.0, 1.0);
            }
        }
    }
    out
}
