use ndarray::{Array3, Array4, Axis};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Domain, LabeledCorpus, SourceData};
use crate::augment::blur3;
use crate::error::{Error, Result};
use crate::rng::{derived_rng, Rng};

/// Synthetic distribution shifts applied to clean generated samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Corruption {
    Clean,
    GaussianNoise,
    GaussianBlur,
    Contrast,
    Brightness,
}

impl Corruption {
    pub fn parse(name: &str) -> Option<Self> {
        Some(match name {
            "clean" => Corruption::Clean,
            "gaussian_noise" => Corruption::GaussianNoise,
            "gaussian_blur" => Corruption::GaussianBlur,
            "contrast" => Corruption::Contrast,
            "brightness" => Corruption::Brightness,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Corruption::Clean => "clean",
            Corruption::GaussianNoise => "gaussian_noise",
            Corruption::GaussianBlur => "gaussian_blur",
            Corruption::Contrast => "contrast",
            Corruption::Brightness => "brightness",
        }
    }

    fn apply(self, x: &mut Array3<f64>, severity: u8, rng: &mut Rng) {
        let s = (severity.clamp(1, 5) - 1) as usize;
        match self {
            Corruption::Clean => {}
            Corruption::GaussianNoise => {
                let std = [0.25, 0.4, 0.55, 0.7, 0.9][s];
                x.mapv_inplace(|v| {
                    let n: f64 = StandardNormal.sample(rng);
                    v + std * n
                });
            }
            Corruption::GaussianBlur => {
                let sigma = [0.5, 0.7, 0.9, 1.1, 1.4][s];
                *x = blur3(&blur3(x, sigma), sigma);
            }
            Corruption::Contrast => {
                let f = [0.7, 0.55, 0.45, 0.35, 0.25][s];
                let mean = x.mean().unwrap_or(0.0);
                x.mapv_inplace(|v| (v - mean) * f + mean);
            }
            Corruption::Brightness => {
                let b = [0.3, 0.5, 0.7, 0.9, 1.2][s];
                x.mapv_inplace(|v| v + b);
            }
        }
    }
}

/// Procedural oriented-texture classification task.
///
/// Each class owns a spatial frequency and a color mix; a sample is its
/// class texture at a random phase and amplitude, blended with a weaker
/// texture of another class, plus pixel noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub channels: usize,
    pub image_size: usize,
    pub source_train: usize,
    pub source_validation: usize,
    pub samples_per_domain: usize,
    pub severity: u8,
    pub pixel_noise: f64,
    pub distractor: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_classes: 10,
            channels: 3,
            image_size: 8,
            source_train: 4000,
            source_validation: 1000,
            samples_per_domain: 2500,
            severity: 3,
            pixel_noise: 0.25,
            distractor: 0.55,
            seed: 0,
        }
    }
}

struct ClassTexture {
    freq: (f64, f64),
    color: Vec<f64>,
}

const FREQUENCIES: [(f64, f64); 12] = [
    (1.0, 0.0),
    (0.0, 1.0),
    (1.0, 1.0),
    (1.0, -1.0),
    (2.0, 0.0),
    (0.0, 2.0),
    (2.0, 1.0),
    (1.0, 2.0),
    (2.0, -1.0),
    (1.0, -2.0),
    (2.0, 2.0),
    (2.0, -2.0),
];

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.num_classes > FREQUENCIES.len() {
            return Err(Error::invalid(format!(
                "synthetic corpus supports 2..={} classes",
                FREQUENCIES.len()
            )));
        }
        if self.channels == 0 || self.image_size < 4 {
            return Err(Error::invalid("synthetic images need >= 1 channel and size >= 4"));
        }
        if !(1..=5).contains(&self.severity) {
            return Err(Error::invalid("severity must be in 1..=5"));
        }
        Ok(())
    }

    pub fn sample_shape(&self) -> [usize; 3] {
        [self.channels, self.image_size, self.image_size]
    }

    fn textures(&self) -> Vec<ClassTexture> {
        let mut rng = derived_rng(self.seed, &["synthetic", "textures"]);
        (0..self.num_classes)
            .map(|c| {
                let mut color: Vec<f64> = (0..self.channels).map(|_| 0.2 + rng.random::<f64>()).collect();
                let norm = color.iter().map(|v| v * v).sum::<f64>().sqrt();
                color.iter_mut().for_each(|v| *v /= norm);
                ClassTexture {
                    freq: FREQUENCIES[c],
                    color,
                }
            })
            .collect()
    }

    fn render(&self, textures: &[ClassTexture], label: usize, rng: &mut Rng) -> Array3<f64> {
        let n = self.image_size;
        let mut x = Array3::zeros((self.channels, n, n));
        let other = (label + 1 + rng.random_range(0..self.num_classes - 1)) % self.num_classes;
        let parts = [
            (label, 0.7 + 0.5 * rng.random::<f64>()),
            (other, self.distractor * rng.random::<f64>()),
        ];
        for (class, amp) in parts {
            let tex = &textures[class];
            let phase = rng.random::<f64>() * std::f64::consts::TAU;
            for y in 0..n {
                for xx in 0..n {
                    let arg = std::f64::consts::TAU * (tex.freq.0 * y as f64 + tex.freq.1 * xx as f64) / n as f64 + phase;
                    let v = amp * arg.cos();
                    for c in 0..self.channels {
                        x[[c, y, xx]] += v * tex.color[c] * (self.channels as f64).sqrt();
                    }
                }
            }
        }
        x.mapv_inplace(|v| {
            let e: f64 = StandardNormal.sample(rng);
            v + self.pixel_noise * e
        });
        x
    }

    fn generate(&self, name: &str, count: usize, corruption: Corruption) -> Domain {
        let textures = self.textures();
        let mut rng = derived_rng(self.seed, &["synthetic", name]);
        let mut images = Array4::zeros((count, self.channels, self.image_size, self.image_size));
        let mut labels = Vec::with_capacity(count);
        for i in 0..count {
            // balanced labels, order randomized by the stream builder
            let label = i % self.num_classes;
            let mut x = self.render(&textures, label, &mut rng);
            corruption.apply(&mut x, self.severity, &mut rng);
            images.index_axis_mut(Axis(0), i).assign(&x);
            labels.push(label);
        }
        Domain {
            name: name.to_string(),
            images,
            labels,
        }
    }

    pub fn source(&self) -> Result<SourceData> {
        self.validate()?;
        Ok(SourceData {
            train: self.generate("source_train", self.source_train, Corruption::Clean),
            validation: self.generate("source_validation", self.source_validation, Corruption::Clean),
        })
    }

    /// Target domains named by corruption. Each domain is drawn from its own
    /// seed path, so the same name always yields the same samples.
    pub fn target(&self, domains: &[String]) -> Result<LabeledCorpus> {
        self.validate()?;
        let domains = domains
            .iter()
            .map(|name| {
                let c = Corruption::parse(name).ok_or_else(|| Error::MissingDomain(name.clone()))?;
                Ok(self.generate(&format!("target_{name}"), self.samples_per_domain, c))
            })
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .zip(domains)
            .map(|(mut d, name)| {
                d.name = name.clone();
                d
            })
            .collect();
        Ok(LabeledCorpus {
            num_classes: self.num_classes,
            domains,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            source_train: 40,
            source_validation: 20,
            samples_per_domain: 30,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn generation_is_deterministic_and_balanced() {
        let spec = small();
        let a = spec.target(&["gaussian_noise".into()]).unwrap();
        let b = spec.target(&["gaussian_noise".into()]).unwrap();
        assert_eq!(a.domains[0].images, b.domains[0].images);
        let counts = a.domains[0].labels.iter().filter(|&&l| l == 0).count();
        assert_eq!(counts, 3);
    }

    #[test]
    fn unknown_corruption_is_rejected() {
        assert!(matches!(small().target(&["fog".into()]), Err(Error::MissingDomain(_))));
    }

    #[test]
    fn corruptions_change_samples() {
        let spec = small();
        let c = spec.target(&["clean".into(), "contrast".into()]).unwrap();
        assert_ne!(c.domains[0].images, c.domains[1].images);
    }
}
