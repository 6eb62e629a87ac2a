//! Seeded corruption archetypes for `[0, 1]` images.
//!
//! Severity 0 is the identity for every kind; severities 1 to 5 index the
//! fixed parameter tables below. Random draws for an example come from a
//! seed derived from the spec seed and the example id, so a corrupted split
//! does not depend on example order.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::LabeledDataset;
use crate::tensor::mix_seed;

pub const GAUSSIAN_SIGMA: [f64; 6] = [0.0, 0.04, 0.08, 0.12, 0.18, 0.26];
pub const IMPULSE_FRACTION: [f64; 6] = [0.0, 0.01, 0.02, 0.05, 0.10, 0.17];
pub const BLUR_KERNEL: [usize; 6] = [1, 3, 3, 5, 5, 7];
pub const CONTRAST_FACTOR: [f64; 6] = [1.0, 0.75, 0.6, 0.45, 0.3, 0.2];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CorruptionError {
    #[error("severity {0} is outside 0..=5")]
    Severity(u8),
    #[error("unknown corruption kind {0:?}")]
    UnknownKind(String),
    #[error("corruption spec must look like kind:severity:seed, got {0:?}")]
    Format(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    GaussianNoise,
    ImpulseNoise,
    BoxBlur,
    Contrast,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 4] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::ImpulseNoise,
        CorruptionKind::BoxBlur,
        CorruptionKind::Contrast,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::ImpulseNoise => "impulse_noise",
            CorruptionKind::BoxBlur => "box_blur",
            CorruptionKind::Contrast => "contrast",
        }
    }

    /// Column label used in reports.
    pub fn short(self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gauss",
            CorruptionKind::ImpulseNoise => "impulse",
            CorruptionKind::BoxBlur => "blur",
            CorruptionKind::Contrast => "contrast",
        }
    }
}

impl FromStr for CorruptionKind {
    type Err = CorruptionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        CorruptionKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| CorruptionError::UnknownKind(s.to_string()))
    }
}

/// A corruption kind at a severity, with the seed for its random draws.
/// Text form: `kind:severity:seed`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub severity: u8,
    pub seed: u64,
}

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind, severity: u8, seed: u64) -> Result<Self, CorruptionError> {
        if severity > 5 {
            return Err(CorruptionError::Severity(severity));
        }
        Ok(Self { kind, severity, seed })
    }

    /// Label such as `gauss3`.
    pub fn label(&self) -> String {
        format!("{}{}", self.kind.short(), self.severity)
    }
}

impl fmt::Display for CorruptionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.kind.name(), self.severity, self.seed)
    }
}

impl FromStr for CorruptionSpec {
    type Err = CorruptionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.trim().split(':').collect();
        let [kind, severity, seed] = parts.as_slice() else {
            return Err(CorruptionError::Format(s.to_string()));
        };
        let severity: u8 = severity.parse().map_err(|_| CorruptionError::Format(s.to_string()))?;
        let seed: u64 = seed.parse().map_err(|_| CorruptionError::Format(s.to_string()))?;
        CorruptionSpec::new(kind.parse()?, severity, seed)
    }
}

impl TryFrom<String> for CorruptionSpec {
    type Error = CorruptionError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<CorruptionSpec> for String {
    fn from(spec: CorruptionSpec) -> Self {
        spec.to_string()
    }
}

/// Corrupts one `[channels, height, width]` image in place using `seed`.
pub fn apply(image: &mut [f32], dims: [usize; 3], kind: CorruptionKind, severity: u8, seed: u64) -> Result<(), CorruptionError> {
    if severity > 5 {
        return Err(CorruptionError::Severity(severity));
    }
    if severity == 0 {
        return Ok(());
    }
    let s = severity as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match kind {
        CorruptionKind::GaussianNoise => {
            let noise = Normal::new(0.0, GAUSSIAN_SIGMA[s]).expect("positive sigma");
            for v in image.iter_mut() {
                *v = (*v as f64 + noise.sample(&mut rng)).clamp(0.0, 1.0) as f32;
            }
        }
        CorruptionKind::ImpulseNoise => {
            let p = IMPULSE_FRACTION[s];
            for v in image.iter_mut() {
                if rng.gen_bool(p) {
                    *v = if rng.gen_bool(0.5) { 1.0 } else { 0.0 };
                }
            }
        }
        CorruptionKind::BoxBlur => box_blur(image, dims, BLUR_KERNEL[s]),
        CorruptionKind::Contrast => {
            let c = CONTRAST_FACTOR[s];
            for v in image.iter_mut() {
                *v = ((*v as f64 - 0.5) * c + 0.5).clamp(0.0, 1.0) as f32;
            }
        }
    }
    Ok(())
}

/// `k x k` mean filter per channel; out-of-bounds taps reuse the nearest edge pixel.
fn box_blur(image: &mut [f32], dims: [usize; 3], k: usize) {
    let [_, h, w] = dims;
    let r = (k / 2) as isize;
    let area = (k * k) as f64;
    for plane in image.chunks_mut(h * w) {
        let src = plane.to_vec();
        for y in 0..h as isize {
            for x in 0..w as isize {
                let mut acc = 0.0f64;
                for dy in -r..=r {
                    let sy = (y + dy).clamp(0, h as isize - 1) as usize;
                    for dx in -r..=r {
                        let sx = (x + dx).clamp(0, w as isize - 1) as usize;
                        acc += src[sy * w + sx] as f64;
                    }
                }
                plane[y as usize * w + x as usize] = (acc / area) as f32;
            }
        }
    }
}

/// Seed used for the example with `id`.
pub fn example_seed(spec: &CorruptionSpec, id: u64) -> u64 {
    mix_seed(spec.seed, id)
}

/// Corrupted copy of `split`; ids and labels are preserved.
pub fn corrupt_split(split: &LabeledDataset, spec: &CorruptionSpec) -> Result<LabeledDataset, CorruptionError> {
    let dims = split.dims();
    let mut out = split.clone();
    out.name = format!("{}-{}", split.name, spec.label());
    for i in 0..out.len() {
        let seed = example_seed(spec, out.id(i));
        apply(out.image_mut(i), dims, spec.kind, spec.severity, seed)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant(n: usize, v: f32) -> Vec<f32> {
        vec![v; n]
    }

    #[test]
    fn severity_zero_is_identity() {
        let img: Vec<f32> = (0..64).map(|i| i as f32 / 64.0).collect();
        for kind in CorruptionKind::ALL {
            let mut out = img.clone();
            apply(&mut out, [1, 8, 8], kind, 0, 9).unwrap();
            assert_eq!(out, img, "{kind:?}");
        }
    }

    #[test]
    fn gaussian_std_matches_table() {
        let n = 20_000;
        let mut img = constant(n, 0.5);
        apply(&mut img, [1, 100, 200], CorruptionKind::GaussianNoise, 3, 1).unwrap();
        let mean = img.iter().map(|v| *v as f64).sum::<f64>() / n as f64;
        let var = img.iter().map(|v| (*v as f64 - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((var.sqrt() - 0.12).abs() < 0.012, "std {}", var.sqrt());
    }

    #[test]
    fn impulse_fraction_matches_table() {
        let n = 20_000;
        let mut img = constant(n, 0.5);
        apply(&mut img, [1, 100, 200], CorruptionKind::ImpulseNoise, 5, 2).unwrap();
        let flipped = img.iter().filter(|v| **v != 0.5).count() as f64 / n as f64;
        assert!((flipped - 0.17).abs() < 0.02, "{flipped}");
        assert!(img.iter().all(|v| *v == 0.0 || *v == 1.0 || *v == 0.5));
    }

    #[test]
    fn blur_preserves_constant_and_smooths_spike() {
        let mut flat = constant(49, 0.3);
        apply(&mut flat, [1, 7, 7], CorruptionKind::BoxBlur, 5, 0).unwrap();
        assert!(flat.iter().all(|v| (v - 0.3).abs() < 1e-6));
        let mut spike = constant(49, 0.0);
        spike[24] = 1.0;
        apply(&mut spike, [1, 7, 7], CorruptionKind::BoxBlur, 1, 0).unwrap();
        assert!((spike[24] - 1.0 / 9.0).abs() < 1e-6);
        assert!((spike[16] - 1.0 / 9.0).abs() < 1e-6);
        assert_eq!(spike[0], 0.0);
    }

    #[test]
    fn contrast_pulls_toward_half() {
        let mut img = vec![0.0, 1.0, 0.5];
        apply(&mut img, [1, 1, 3], CorruptionKind::Contrast, 5, 0).unwrap();
        assert_eq!(img, vec![0.4, 0.6, 0.5]);
    }

    #[test]
    fn output_stays_in_unit_range() {
        for kind in CorruptionKind::ALL {
            for sev in 1..=5 {
                let mut img: Vec<f32> = (0..256).map(|i| (i % 2) as f32).collect();
                apply(&mut img, [1, 16, 16], kind, sev, 77).unwrap();
                assert!(img.iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }

    #[test]
    fn bad_severity_rejected() {
        let mut img = vec![0.5; 4];
        assert_eq!(
            apply(&mut img, [1, 2, 2], CorruptionKind::Contrast, 6, 0),
            Err(CorruptionError::Severity(6))
        );
        assert!(CorruptionSpec::new(CorruptionKind::BoxBlur, 9, 0).is_err());
        assert!("box_blur:6:1".parse::<CorruptionSpec>().is_err());
    }

    #[test]
    fn spec_string_round_trips() {
        let spec: CorruptionSpec = "gaussian_noise:3:42".parse().unwrap();
        assert_eq!(spec, CorruptionSpec::new(CorruptionKind::GaussianNoise, 3, 42).unwrap());
        assert_eq!(spec.to_string(), "gaussian_noise:3:42");
        assert!("fog:1:2".parse::<CorruptionSpec>().is_err());
        assert!("gaussian_noise:3".parse::<CorruptionSpec>().is_err());
    }
}
