//! Stochastic image augmentations used by the consistency metric and by the
//! methods that adapt on perturbed views.

use ndarray::{s, Array3, ArrayView3, Axis};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Images;
use crate::rng::{rng_from, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Transform {
    /// Multiplicative brightness, contrast around the image mean and
    /// saturation towards the per-pixel channel mean, each factor drawn
    /// from `[1 - x, 1 + x]`.
    ColorJitter {
        brightness: f64,
        contrast: f64,
        saturation: f64,
    },
    /// 3x3 Gaussian kernel with sigma drawn from `[min, max]`.
    GaussianBlur { sigma_min: f64, sigma_max: f64 },
    /// Additive noise with standard deviation drawn from `[0, std_max]`.
    GaussianNoise { std_max: f64 },
    /// Rotation (degrees) and translation (fraction of size), bilinear,
    /// edge-clamped sampling.
    Affine { max_degrees: f64, max_translate: f64 },
    /// Random crop covering a fraction of the area in `[min_scale, 1]`,
    /// resized back to the input size.
    Crop { min_scale: f64 },
    HorizontalFlip { p: f64 },
    Grayscale { p: f64 },
}

/// An ordered list of transforms applied with probability `p` each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct AugmentationPipeline {
    pub transforms: Vec<(Transform, f64)>,
}

impl AugmentationPipeline {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn is_identity(&self) -> bool {
        self.transforms.is_empty()
    }

    /// Color jitter, blur, noise, affine and crop with mild ranges.
    pub fn consistency() -> Self {
        Self {
            transforms: vec![
                (
                    Transform::ColorJitter {
                        brightness: 0.2,
                        contrast: 0.2,
                        saturation: 0.2,
                    },
                    0.8,
                ),
                (
                    Transform::Affine {
                        max_degrees: 10.0,
                        max_translate: 0.06,
                    },
                    0.5,
                ),
                (Transform::Crop { min_scale: 0.8 }, 0.5),
                (
                    Transform::GaussianBlur {
                        sigma_min: 0.1,
                        sigma_max: 0.6,
                    },
                    0.3,
                ),
                (Transform::GaussianNoise { std_max: 0.05 }, 0.5),
            ],
        }
    }

    /// Crop and flip only.
    pub fn weak() -> Self {
        Self {
            transforms: vec![
                (Transform::Crop { min_scale: 0.85 }, 1.0),
                (Transform::HorizontalFlip { p: 0.5 }, 1.0),
            ],
        }
    }

    /// Resized crop, color jitter, grayscale, blur and flip.
    pub fn strong() -> Self {
        Self {
            transforms: vec![
                (Transform::Crop { min_scale: 0.6 }, 1.0),
                (
                    Transform::ColorJitter {
                        brightness: 0.4,
                        contrast: 0.4,
                        saturation: 0.4,
                    },
                    0.8,
                ),
                (Transform::Grayscale { p: 0.2 }, 1.0),
                (
                    Transform::GaussianBlur {
                        sigma_min: 0.1,
                        sigma_max: 1.0,
                    },
                    0.5,
                ),
                (Transform::HorizontalFlip { p: 0.5 }, 1.0),
            ],
        }
    }

    /// Augment every sample of `images`; deterministic in `seed`.
    pub fn apply_batch(&self, images: &Images, seed: u64) -> Result<Images> {
        let mut rng = rng_from(seed);
        self.apply_batch_with(images, &mut rng)
    }

    pub fn apply_batch_with(&self, images: &Images, rng: &mut Rng) -> Result<Images> {
        if self.is_identity() {
            return Ok(images.clone());
        }
        let mut out = images.clone();
        for (i, mut dst) in out.axis_iter_mut(Axis(0)).enumerate() {
            let aug = self.apply_one(images.index_axis(Axis(0), i), rng);
            if let Some(bad) = aug.iter().find(|v| !v.is_finite()) {
                return Err(Error::Augmentation {
                    index: i,
                    reason: format!("non-finite output value {bad}"),
                });
            }
            dst.assign(&aug);
        }
        Ok(out)
    }

    pub fn apply_one(&self, sample: ArrayView3<f64>, rng: &mut Rng) -> Array3<f64> {
        let mut x = sample.to_owned();
        for (t, p) in &self.transforms {
            if rng.random::<f64>() >= *p {
                continue;
            }
            x = apply_transform(t, x, rng);
        }
        x
    }
}

fn uniform(rng: &mut Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

fn apply_transform(t: &Transform, mut x: Array3<f64>, rng: &mut Rng) -> Array3<f64> {
    let (c, h, w) = x.dim();
    match *t {
        Transform::ColorJitter {
            brightness,
            contrast,
            saturation,
        } => {
            let fb = uniform(rng, 1.0 - brightness, 1.0 + brightness);
            x.mapv_inplace(|v| v * fb);
            let fc = uniform(rng, 1.0 - contrast, 1.0 + contrast);
            let mean = x.mean().unwrap_or(0.0);
            x.mapv_inplace(|v| (v - mean) * fc + mean);
            if c > 1 {
                let fs = uniform(rng, 1.0 - saturation, 1.0 + saturation);
                let gray = x.mean_axis(Axis(0)).expect("non-empty channels");
                for mut ch in x.axis_iter_mut(Axis(0)) {
                    ch.zip_mut_with(&gray, |v, g| *v = (*v - g) * fs + g);
                }
            }
            x
        }
        Transform::Grayscale { p } => {
            if c > 1 && rng.random::<f64>() < p {
                let gray = x.mean_axis(Axis(0)).expect("non-empty channels");
                for mut ch in x.axis_iter_mut(Axis(0)) {
                    ch.assign(&gray);
                }
            }
            x
        }
        Transform::HorizontalFlip { p } => {
            if rng.random::<f64>() < p {
                x.slice(s![.., .., ..;-1]).to_owned()
            } else {
                x
            }
        }
        Transform::GaussianNoise { std_max } => {
            let std = uniform(rng, 0.0, std_max);
            x.mapv_inplace(|v| {
                let n: f64 = StandardNormal.sample(rng);
                v + std * n
            });
            x
        }
        Transform::GaussianBlur { sigma_min, sigma_max } => {
            let sigma = uniform(rng, sigma_min, sigma_max);
            blur3(&x, sigma)
        }
        Transform::Affine {
            max_degrees,
            max_translate,
        } => {
            let angle = uniform(rng, -max_degrees, max_degrees).to_radians();
            let tx = uniform(rng, -max_translate, max_translate) * w as f64;
            let ty = uniform(rng, -max_translate, max_translate) * h as f64;
            let (sin, cos) = angle.sin_cos();
            let cy = (h as f64 - 1.0) / 2.0;
            let cx = (w as f64 - 1.0) / 2.0;
            resample(&x, |oy, ox| {
                let dy = oy - cy - ty;
                let dx = ox - cx - tx;
                (cos * dy - sin * dx + cy, sin * dy + cos * dx + cx)
            })
        }
        Transform::Crop { min_scale } => {
            let scale = uniform(rng, min_scale, 1.0).sqrt();
            let ch = scale * h as f64;
            let cw = scale * w as f64;
            let y0 = uniform(rng, 0.0, h as f64 - ch);
            let x0 = uniform(rng, 0.0, w as f64 - cw);
            resample(&x, |oy, ox| {
                (
                    y0 + (oy + 0.5) * ch / h as f64 - 0.5,
                    x0 + (ox + 0.5) * cw / w as f64 - 0.5,
                )
            })
        }
    }
}

/// Bilinear resampling with edge clamping; `map` sends output pixel
/// coordinates to input coordinates.
fn resample(x: &Array3<f64>, map: impl Fn(f64, f64) -> (f64, f64)) -> Array3<f64> {
    let (c, h, w) = x.dim();
    let mut out = Array3::zeros((c, h, w));
    for oy in 0..h {
        for ox in 0..w {
            let (sy, sx) = map(oy as f64, ox as f64);
            let sy = sy.clamp(0.0, (h - 1) as f64);
            let sx = sx.clamp(0.0, (w - 1) as f64);
            let y0 = sy.floor() as usize;
            let x0 = sx.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let x1 = (x0 + 1).min(w - 1);
            let fy = sy - y0 as f64;
            let fx = sx - x0 as f64;
            for ci in 0..c {
                let v = x[[ci, y0, x0]] * (1.0 - fy) * (1.0 - fx)
                    + x[[ci, y0, x1]] * (1.0 - fy) * fx
                    + x[[ci, y1, x0]] * fy * (1.0 - fx)
                    + x[[ci, y1, x1]] * fy * fx;
                out[[ci, oy, ox]] = v;
            }
        }
    }
    out
}

/// Separable 3-tap Gaussian blur with edge clamping.
pub(crate) fn blur3(x: &Array3<f64>, sigma: f64) -> Array3<f64> {
    let (c, h, w) = x.dim();
    let e = (-1.0 / (2.0 * sigma * sigma)).exp();
    let k = [e / (1.0 + 2.0 * e), 1.0 / (1.0 + 2.0 * e), e / (1.0 + 2.0 * e)];
    let mut tmp = Array3::zeros((c, h, w));
    for ci in 0..c {
        for y in 0..h {
            for xx in 0..w {
                let l = x[[ci, y, xx.saturating_sub(1)]];
                let r = x[[ci, y, (xx + 1).min(w - 1)]];
                tmp[[ci, y, xx]] = k[0] * l + k[1] * x[[ci, y, xx]] + k[2] * r;
            }
        }
    }
    let mut out = Array3::zeros((c, h, w));
    for ci in 0..c {
        for y in 0..h {
            for xx in 0..w {
                let u = tmp[[ci, y.saturating_sub(1), xx]];
                let d = tmp[[ci, (y + 1).min(h - 1), xx]];
                out[[ci, y, xx]] = k[0] * u + k[1] * tmp[[ci, y, xx]] + k[2] * d;
            }
        }
    }
    out
}
