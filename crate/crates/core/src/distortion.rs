//! Parametric distortion bank used to make one side of a contrastive pair
//! quality-divergent. Four families, five severities each, all monotone in
//! severity:
//!
//! | kind                  | severity s = 1..5            |
//! |-----------------------|------------------------------|
//! | gaussian_blur         | sigma = 0.5 * s              |
//! | gaussian_noise        | std = 0.03 * s               |
//! | jpeg_like_blockiness  | 8x8 block-mean blend s / 6   |
//! | brightness_shift      | offset = 0.06 * s            |
//!
//! Every application clamps back to `[0, 1]`. Noise is the only stochastic
//! family; it draws from a counter-seeded generator so realization is
//! deterministic and order-independent across views.

use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistortionKind {
    GaussianBlur,
    GaussianNoise,
    JpegLikeBlockiness,
    BrightnessShift,
    None,
}

/// One distortion drawn from the bank. `severity` is 1..=5 for active kinds
/// and ignored for `None`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DistortionSpec {
    pub kind: DistortionKind,
    pub severity: u8,
}

impl DistortionSpec {
    pub fn none() -> Self {
        Self {
            kind: DistortionKind::None,
            severity: 0,
        }
    }

    pub fn new(kind: DistortionKind, severity: u8) -> Result<Self> {
        let spec = Self { kind, severity };
        spec.validate()?;
        Ok(spec)
    }

    pub fn is_none(&self) -> bool {
        self.kind == DistortionKind::None
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind != DistortionKind::None && !(1..=5).contains(&self.severity) {
            return Err(Error::Config(format!(
                "distortion severity {} outside 1..=5",
                self.severity
            )));
        }
        Ok(())
    }
}

fn gaussian_kernel(sigma: f32) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f32> = (-radius..=radius)
        .map(|i| (-(i as f32).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f32 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Separable Gaussian blur with replicate padding.
fn blur(pixels: &Array3<f32>, sigma: f32) -> Array3<f32> {
    let (h, w, c) = pixels.dim();
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as i64;

    let mut horiz = Array3::<f32>::zeros((h, w, c));
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (ki, kv) in kernel.iter().enumerate() {
                    let sx = (x as i64 + ki as i64 - radius).clamp(0, w as i64 - 1) as usize;
                    acc += kv * pixels[(y, sx, ch)];
                }
                horiz[(y, x, ch)] = acc;
            }
        }
    }
    let mut out = Array3::<f32>::zeros((h, w, c));
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (ki, kv) in kernel.iter().enumerate() {
                    let sy = (y as i64 + ki as i64 - radius).clamp(0, h as i64 - 1) as usize;
                    acc += kv * horiz[(sy, x, ch)];
                }
                out[(y, x, ch)] = acc;
            }
        }
    }
    out
}

fn add_noise(pixels: &Array3<f32>, std: f32, seed: u64) -> Array3<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0f32, std).expect("std > 0");
    let mut out = pixels.clone();
    for v in out.iter_mut() {
        *v = (*v + normal.sample(&mut rng)).clamp(0.0, 1.0);
    }
    out
}

/// Blend each pixel toward its 8x8 block mean; alpha = severity / 6.
fn blockiness(pixels: &Array3<f32>, alpha: f32) -> Array3<f32> {
    const B: usize = 8;
    let (h, w, c) = pixels.dim();
    let mut out = pixels.clone();
    for by in (0..h).step_by(B) {
        for bx in (0..w).step_by(B) {
            let y_end = (by + B).min(h);
            let x_end = (bx + B).min(w);
            let n = ((y_end - by) * (x_end - bx)) as f32;
            for ch in 0..c {
                let mut mean = 0.0;
                for y in by..y_end {
                    for x in bx..x_end {
                        mean += pixels[(y, x, ch)];
                    }
                }
                mean /= n;
                for y in by..y_end {
                    for x in bx..x_end {
                        let p = pixels[(y, x, ch)];
                        out[(y, x, ch)] = p + alpha * (mean - p);
                    }
                }
            }
        }
    }
    out
}

fn brightness(pixels: &Array3<f32>, offset: f32) -> Array3<f32> {
    pixels.mapv(|v| (v + offset).clamp(0.0, 1.0))
}

/// Apply `spec` to one view. `seed` feeds the noise family only; blur,
/// blockiness, and brightness are deterministic functions of the pixels.
pub fn apply_distortion(pixels: &Array3<f32>, spec: &DistortionSpec, seed: u64) -> Array3<f32> {
    let s = spec.severity as f32;
    match spec.kind {
        DistortionKind::None => pixels.clone(),
        DistortionKind::GaussianBlur => blur(pixels, 0.5 * s),
        DistortionKind::GaussianNoise => add_noise(pixels, 0.03 * s, seed),
        DistortionKind::JpegLikeBlockiness => blockiness(pixels, s / 6.0),
        DistortionKind::BrightnessShift => brightness(pixels, 0.06 * s),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::Rng;

    fn gradient_view(h: usize, w: usize) -> Array3<f32> {
        Array3::from_shape_fn((h, w, 3), |(y, x, c)| {
            ((y * 13 + x * 7 + c * 29) % 97) as f32 / 96.0
        })
    }

    fn mse(a: &Array3<f32>, b: &Array3<f32>) -> f32 {
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f32>()
            / a.len() as f32
    }

    #[test]
    fn none_is_identity() {
        let v = gradient_view(24, 24);
        let out = apply_distortion(&v, &DistortionSpec::none(), 1);
        assert_eq!(v, out);
    }

    #[test]
    fn severity_outside_range_rejected() {
        assert!(DistortionSpec::new(DistortionKind::GaussianBlur, 0).is_err());
        assert!(DistortionSpec::new(DistortionKind::GaussianBlur, 6).is_err());
        assert!(DistortionSpec::new(DistortionKind::GaussianBlur, 3).is_ok());
    }

    #[test]
    fn outputs_stay_in_unit_range() {
        let v = gradient_view(32, 32);
        for kind in [
            DistortionKind::GaussianBlur,
            DistortionKind::GaussianNoise,
            DistortionKind::JpegLikeBlockiness,
            DistortionKind::BrightnessShift,
        ] {
            for sev in 1..=5 {
                let spec = DistortionSpec::new(kind, sev).unwrap();
                let out = apply_distortion(&v, &spec, 42);
                assert!(out.iter().all(|&p| (0.0..=1.0).contains(&p)));
            }
        }
    }

    #[test]
    fn distortion_strength_is_monotone_in_severity() {
        let v = gradient_view(40, 40);
        for kind in [
            DistortionKind::GaussianBlur,
            DistortionKind::JpegLikeBlockiness,
            DistortionKind::BrightnessShift,
        ] {
            let mut last = 0.0;
            for sev in 1..=5 {
                let spec = DistortionSpec::new(kind, sev).unwrap();
                let d = mse(&v, &apply_distortion(&v, &spec, 0));
                assert!(d > last, "{kind:?} severity {sev}: {d} <= {last}");
                last = d;
            }
        }
    }

    #[test]
    fn noise_matches_declared_std() {
        let v = Array3::from_elem((64, 64, 3), 0.5f32);
        for sev in [1u8, 5] {
            let spec = DistortionSpec::new(DistortionKind::GaussianNoise, sev).unwrap();
            let out = apply_distortion(&v, &spec, 9);
            let diffs: Vec<f32> = out.iter().zip(v.iter()).map(|(a, b)| a - b).collect();
            let mean = diffs.iter().sum::<f32>() / diffs.len() as f32;
            let var =
                diffs.iter().map(|d| (d - mean).powi(2)).sum::<f32>() / diffs.len() as f32;
            let expected = 0.03 * sev as f32;
            assert!(mean.abs() < 0.005, "mean {mean}");
            assert!(
                (var.sqrt() - expected).abs() < 0.1 * expected,
                "std {} vs {expected}",
                var.sqrt()
            );
        }
    }

    #[test]
    fn noise_is_deterministic_per_seed() {
        let v = gradient_view(16, 16);
        let spec = DistortionSpec::new(DistortionKind::GaussianNoise, 3).unwrap();
        let a = apply_distortion(&v, &spec, 7);
        let b = apply_distortion(&v, &spec, 7);
        let c = apply_distortion(&v, &spec, 8);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn blockiness_preserves_constant_images() {
        let v = Array3::from_elem((24, 24, 3), 0.3f32);
        let spec = DistortionSpec::new(DistortionKind::JpegLikeBlockiness, 5).unwrap();
        let out = apply_distortion(&v, &spec, 0);
        for (a, b) in v.iter().zip(out.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn brightness_shift_is_exact_below_clamp() {
        let v = Array3::from_elem((16, 16, 3), 0.4f32);
        let spec = DistortionSpec::new(DistortionKind::BrightnessShift, 2).unwrap();
        let out = apply_distortion(&v, &spec, 0);
        for p in out.iter() {
            assert!((p - 0.52).abs() < 1e-6);
        }
    }

    #[test]
    fn blur_reduces_high_frequency_energy() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v = Array3::from_shape_fn((32, 32, 3), |_| rng.gen::<f32>());
        let spec = DistortionSpec::new(DistortionKind::GaussianBlur, 4).unwrap();
        let out = apply_distortion(&v, &spec, 0);
        let var = |a: &Array3<f32>| {
            let m = a.mean().unwrap();
            a.iter().map(|&x| (x - m).powi(2)).sum::<f32>() / a.len() as f32
        };
        assert!(var(&out) < 0.25 * var(&v));
    }
}
