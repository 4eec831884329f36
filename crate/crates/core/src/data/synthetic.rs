//! Seeded oriented-grating images.
//!
//! Each class is a sinusoidal grating with its own orientation and spatial
//! frequency. Every image draws a random phase, small orientation and
//! frequency jitter, and additive Gaussian noise, then is clamped to
//! `[0, 1]`. Separability is controlled by the angular gap between classes,
//! the jitter and the noise level.

use std::f64::consts::PI;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Class composition of the clinical cohort: normal, TB, cancer.
pub const CLINICAL_CLASS_COUNTS: [usize; 3] = [81, 76, 277];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub class_names: Vec<String>,
    pub class_counts: Vec<usize>,
    /// `(height, width)`
    pub image_size: (usize, usize),
    pub channels: usize,
    pub orientations_deg: Vec<f64>,
    /// Cycles across the image width.
    pub frequencies: Vec<f64>,
    pub orientation_jitter_deg: f64,
    pub frequency_jitter: f64,
    /// Peak-to-peak grating amplitude as a fraction of the `[0, 1]` range.
    pub contrast: f64,
    pub noise_std: f64,
}

impl SyntheticSpec {
    /// Three well-separated target classes with the clinical imbalance.
    pub fn high_separability() -> Self {
        SyntheticSpec {
            class_names: vec!["normal".into(), "tb".into(), "cancer".into()],
            class_counts: CLINICAL_CLASS_COUNTS.to_vec(),
            image_size: (16, 16),
            channels: 1,
            orientations_deg: vec![0.0, 60.0, 120.0],
            frequencies: vec![3.0, 3.0, 3.0],
            orientation_jitter_deg: 6.0,
            frequency_jitter: 0.3,
            contrast: 0.8,
            noise_std: 0.3,
        }
    }

    /// Noise-free, jitter-free version of [`SyntheticSpec::high_separability`].
    pub fn separable() -> Self {
        SyntheticSpec {
            orientation_jitter_deg: 0.0,
            frequency_jitter: 0.0,
            noise_std: 0.0,
            ..Self::high_separability()
        }
    }

    /// Related four-class task for pretraining: the same kind of gratings at
    /// shifted orientations and frequency.
    pub fn source_task() -> Self {
        SyntheticSpec {
            class_names: vec!["src0".into(), "src1".into(), "src2".into(), "src3".into()],
            class_counts: vec![150; 4],
            orientations_deg: vec![15.0, 60.0, 105.0, 150.0],
            frequencies: vec![4.0; 4],
            noise_std: 0.3,
            ..Self::high_separability()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "high-separability" | "high_separability" => Some(Self::high_separability()),
            "separable" => Some(Self::separable()),
            "source" | "source-task" => Some(Self::source_task()),
            _ => None,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.class_names.len();
        if k < 2 {
            return Err(Error::Config("a synthetic dataset needs at least two classes".into()));
        }
        for (what, len) in [
            ("class_counts", self.class_counts.len()),
            ("orientations_deg", self.orientations_deg.len()),
            ("frequencies", self.frequencies.len()),
        ] {
            if len != k {
                return Err(Error::Config(format!("{what} has {len} entries for {k} classes")));
            }
        }
        if let Some(c) = self.class_counts.iter().position(|&n| n < 2) {
            return Err(Error::Config(format!("class {:?} needs at least 2 samples", self.class_names[c])));
        }
        if self.image_size.0 == 0 || self.image_size.1 == 0 || self.channels == 0 {
            return Err(Error::Config("image size and channels must be positive".into()));
        }
        if self.noise_std < 0.0 || self.orientation_jitter_deg < 0.0 || self.frequency_jitter < 0.0 {
            return Err(Error::Config("noise and jitter must be non-negative".into()));
        }
        Ok(())
    }
}

/// Parses either a preset name or `preset;key=value;...` overrides, e.g.
/// `high-separability;noise=0.2;counts=20,20,40;size=24`.
///
/// Keys: `counts`, `size` (square) or `size=HxW`, `channels`, `noise`,
/// `contrast`, `orientations`, `frequencies`, `orientation_jitter`,
/// `frequency_jitter`, `classes`.
impl FromStr for SyntheticSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.split(';').map(str::trim).filter(|p| !p.is_empty());
        let first = parts.next().unwrap_or("high-separability");
        let (mut spec, pending) = match Self::preset(first) {
            Some(spec) => (spec, None),
            None if first.contains('=') => (Self::high_separability(), Some(first)),
            None => return Err(Error::Config(format!("unknown synthetic preset {first:?}"))),
        };
        let list = |v: &str| -> Result<Vec<f64>> {
            v.split(',')
                .map(|x| x.trim().parse::<f64>().map_err(|_| Error::Config(format!("bad number {x:?}"))))
                .collect()
        };
        for kv in pending.into_iter().chain(parts) {
            let (key, value) =
                kv.split_once('=').ok_or_else(|| Error::Config(format!("expected key=value, got {kv:?}")))?;
            let num =
                || value.trim().parse::<f64>().map_err(|_| Error::Config(format!("bad value for {key}: {value:?}")));
            match key.trim() {
                "counts" => spec.class_counts = list(value)?.into_iter().map(|c| c as usize).collect(),
                "size" => {
                    spec.image_size = match value.split_once('x') {
                        Some((h, w)) => (
                            h.trim().parse().map_err(|_| Error::Config(format!("bad size {value:?}")))?,
                            w.trim().parse().map_err(|_| Error::Config(format!("bad size {value:?}")))?,
                        ),
                        None => {
                            let n = num()? as usize;
                            (n, n)
                        }
                    }
                }
                "channels" => spec.channels = num()? as usize,
                "noise" => spec.noise_std = num()?,
                "contrast" => spec.contrast = num()?,
                "orientations" => spec.orientations_deg = list(value)?,
                "frequencies" => spec.frequencies = list(value)?,
                "orientation_jitter" => spec.orientation_jitter_deg = num()?,
                "frequency_jitter" => spec.frequency_jitter = num()?,
                "classes" => spec.class_names = value.split(',').map(|c| c.trim().to_string()).collect(),
                other => return Err(Error::Config(format!("unknown synthetic key {other:?}"))),
            }
        }
        spec.validate()?;
        Ok(spec)
    }
}

/// Generates the dataset described by `spec`. Identical `(spec, seed)`
/// pairs produce bitwise-identical datasets. Samples are ordered by class.
pub fn generate_synthetic_dataset(spec: &SyntheticSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, spec.noise_std).map_err(|e| Error::Config(e.to_string()))?;
    let (h, w) = spec.image_size;
    let mut samples = Vec::with_capacity(spec.class_counts.iter().sum());
    for (label, &count) in spec.class_counts.iter().enumerate() {
        for i in 0..count {
            let theta = (spec.orientations_deg[label] + jitter(&mut rng, spec.orientation_jitter_deg)).to_radians();
            let freq = spec.frequencies[label] + jitter(&mut rng, spec.frequency_jitter);
            let phase = rng.random_range(0.0..2.0 * PI);
            let (cos, sin) = (theta.cos(), theta.sin());
            let scale = 2.0 * PI * freq / w as f64;
            let mut data = Vec::with_capacity(spec.channels * h * w);
            for _ in 0..spec.channels {
                for y in 0..h {
                    for x in 0..w {
                        let t = scale * (x as f64 * cos + y as f64 * sin) + phase;
                        let v = 0.5 + 0.5 * spec.contrast * t.sin() + noise.sample(&mut rng);
                        data.push(v.clamp(0.0, 1.0));
                    }
                }
            }
            samples.push(Sample {
                image: Tensor::new(&[spec.channels, h, w], data)?,
                label,
                id: format!("{}_{i:04}", spec.class_names[label]),
            });
        }
    }
    Dataset::new(spec.class_names.clone(), samples)
}

fn jitter(rng: &mut ChaCha8Rng, amplitude: f64) -> f64 {
    if amplitude == 0.0 {
        0.0
    } else {
        rng.random_range(-amplitude..=amplitude)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clinical_counts_and_range() {
        let d = generate_synthetic_dataset(&SyntheticSpec::high_separability(), 1).unwrap();
        assert_eq!(d.label_counts(), CLINICAL_CLASS_COUNTS);
        assert_eq!(d.len(), 434);
        assert!(d.samples.iter().all(|s| s.image.data().iter().all(|v| (0.0..=1.0).contains(v))));
        assert_eq!(d.samples[0].image.shape(), &[1, 16, 16]);
    }

    #[test]
    fn deterministic() {
        let spec = SyntheticSpec::source_task();
        assert_eq!(generate_synthetic_dataset(&spec, 5).unwrap(), generate_synthetic_dataset(&spec, 5).unwrap());
        assert_ne!(generate_synthetic_dataset(&spec, 5).unwrap(), generate_synthetic_dataset(&spec, 6).unwrap());
    }

    #[test]
    fn parses_overrides() {
        let s: SyntheticSpec = "separable;counts=4,5,6;size=8x12;noise=0.05".parse().unwrap();
        assert_eq!(s.class_counts, vec![4, 5, 6]);
        assert_eq!(s.image_size, (8, 12));
        assert_eq!(s.noise_std, 0.05);
        let s: SyntheticSpec = "counts=3,3,3".parse().unwrap();
        assert_eq!(s.orientations_deg, SyntheticSpec::high_separability().orientations_deg);
        assert!("nope".parse::<SyntheticSpec>().is_err());
        assert!("separable;counts=1,5,6".parse::<SyntheticSpec>().is_err());
        assert!("separable;counts=5,6".parse::<SyntheticSpec>().is_err());
    }
}
