//! Per-pair soft targets for the three quality branches.
//!
//! The image branch scores a pair by mean SSIM across corresponding views;
//! the video branch applies the same similarity to inter-view difference
//! frames, which ignores static content and reacts to flicker; the
//! replacement branch maps the view replacement ratio affinely. Image and
//! video scores are rescaled to `[-1, 1]` with bounds calibrated from the
//! training distribution, so the bounds persist alongside checkpoints.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pairs::{ContrastivePair, PairRecipe};

/// The three quality branches: image-metric guided, video-metric guided,
/// and replacement-ratio guided.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Iqa,
    Vqa,
    Rep,
}

pub const BRANCHES: [Branch; 3] = [Branch::Iqa, Branch::Vqa, Branch::Rep];

impl Branch {
    pub fn name(&self) -> &'static str {
        match self {
            Branch::Iqa => "iqa",
            Branch::Vqa => "vqa",
            Branch::Rep => "rep",
        }
    }
}

/// Soft targets, one per branch, each in `[-1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidanceVector {
    pub psi_iqa: f64,
    pub psi_vqa: f64,
    pub psi_rep: f64,
}

impl GuidanceVector {
    pub fn get(&self, branch: Branch) -> f64 {
        match branch {
            Branch::Iqa => self.psi_iqa,
            Branch::Vqa => self.psi_vqa,
            Branch::Rep => self.psi_rep,
        }
    }
}

/// Affine rescale bounds with `a < b` enforced at construction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "(f64, f64)", into = "(f64, f64)")]
pub struct RescaleBounds {
    a: f64,
    b: f64,
}

impl TryFrom<(f64, f64)> for RescaleBounds {
    type Error = Error;
    fn try_from((a, b): (f64, f64)) -> Result<Self> {
        RescaleBounds::new(a, b)
    }
}

impl From<RescaleBounds> for (f64, f64) {
    fn from(r: RescaleBounds) -> Self {
        (r.a, r.b)
    }
}

impl RescaleBounds {
    pub fn new(a: f64, b: f64) -> Result<Self> {
        if !(a < b) || !a.is_finite() || !b.is_finite() {
            return Err(Error::Config(format!(
                "rescale bounds need a < b, got a={a}, b={b}"
            )));
        }
        Ok(Self { a, b })
    }

    pub fn a(&self) -> f64 {
        self.a
    }

    pub fn b(&self) -> f64 {
        self.b
    }
}

/// Calibrated bounds for the two metric-backed branches.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidanceBounds {
    pub iqa: RescaleBounds,
    pub vqa: RescaleBounds,
}

impl Default for GuidanceBounds {
    /// Permissive bounds covering the full similarity range; real use
    /// replaces them via [`calibrate_bounds`].
    fn default() -> Self {
        Self {
            iqa: RescaleBounds { a: -1.0, b: 1.0 },
            vqa: RescaleBounds { a: -1.0, b: 1.0 },
        }
    }
}

/// Map `x` affinely so `[a, b]` lands on `[-1, 1]`, clamping outside.
pub fn rescale(x: f64, bounds: &RescaleBounds) -> f64 {
    (2.0 * (x - bounds.a) / (bounds.b - bounds.a) - 1.0).clamp(-1.0, 1.0)
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn ssim_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let mid = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in w.iter_mut().enumerate() {
        *v = (-((i as f64 - mid).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in &mut w {
        *v /= sum;
    }
    w
}

/// Separable valid-mode filter: output shrinks by `SSIM_WINDOW - 1` in each
/// spatial dimension.
fn filter_valid(plane: &Array2<f64>, w: &[f64; SSIM_WINDOW]) -> Array2<f64> {
    let (h, win) = plane.dim();
    let wout = win - (SSIM_WINDOW - 1);
    let hout = h - (SSIM_WINDOW - 1);
    let mut horiz = Array2::<f64>::zeros((h, wout));
    for y in 0..h {
        for x in 0..wout {
            let mut acc = 0.0;
            for (k, wk) in w.iter().enumerate() {
                acc += wk * plane[(y, x + k)];
            }
            horiz[(y, x)] = acc;
        }
    }
    let mut out = Array2::<f64>::zeros((hout, wout));
    for y in 0..hout {
        for x in 0..wout {
            let mut acc = 0.0;
            for (k, wk) in w.iter().enumerate() {
                acc += wk * horiz[(y + k, x)];
            }
            out[(y, x)] = acc;
        }
    }
    out
}

fn channel_plane(pixels: &Array3<f32>, ch: usize) -> Array2<f64> {
    let (h, w, _) = pixels.dim();
    Array2::from_shape_fn((h, w), |(y, x)| pixels[(y, x, ch)] as f64)
}

/// Structural similarity between two same-shape images in `[0, 1]` pixel
/// range: 11x11 Gaussian window (sigma 1.5), K1=0.01, K2=0.03, dynamic
/// range 1, Gaussian-weighted moments, valid-mode map averaged over
/// positions and channels.
pub fn ssim(a: &Array3<f32>, b: &Array3<f32>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!(
            "ssim inputs differ in shape: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    let (h, w, channels) = a.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Shape(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"
        )));
    }
    let window = ssim_window();
    let mut total = 0.0;
    for ch in 0..channels {
        let pa = channel_plane(a, ch);
        let pb = channel_plane(b, ch);
        let mu_a = filter_valid(&pa, &window);
        let mu_b = filter_valid(&pb, &window);
        let e_aa = filter_valid(&(&pa * &pa), &window);
        let e_bb = filter_valid(&(&pb * &pb), &window);
        let e_ab = filter_valid(&(&pa * &pb), &window);

        let mut acc = 0.0;
        for (i, (&ma, &mb)) in mu_a.iter().zip(mu_b.iter()).enumerate() {
            let va = e_aa.as_slice().unwrap()[i] - ma * ma;
            let vb = e_bb.as_slice().unwrap()[i] - mb * mb;
            let cov = e_ab.as_slice().unwrap()[i] - ma * mb;
            let num = (2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2);
            let den = (ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2);
            acc += num / den;
        }
        total += acc / mu_a.len() as f64;
    }
    Ok(total / channels as f64)
}

fn check_aligned(pair: &ContrastivePair) -> Result<()> {
    if pair.s1.len() != pair.s2.len() {
        return Err(Error::Shape(format!(
            "pair view counts differ: {} vs {}",
            pair.s1.len(),
            pair.s2.len()
        )));
    }
    Ok(())
}

/// Raw image-branch guidance: mean SSIM over corresponding views.
pub fn iqa_guidance(pair: &ContrastivePair) -> Result<f64> {
    check_aligned(pair)?;
    let scores = crate::exec::par_map_range(pair.s1.len(), |j| ssim(&pair.s1[j], &pair.s2[j]));
    let mut sum = 0.0;
    for s in scores {
        sum += s?;
    }
    Ok(sum / pair.s1.len() as f64)
}

/// Inter-view difference frame shifted back into `[0, 1]`.
fn difference_frame(next: &Array3<f32>, prev: &Array3<f32>) -> Array3<f32> {
    let mut d = next - prev;
    d.mapv_inplace(|v| (v + 1.0) / 2.0);
    d
}

/// Raw video-branch guidance: mean SSIM over inter-view difference frames.
pub fn vqa_guidance(pair: &ContrastivePair) -> Result<f64> {
    check_aligned(pair)?;
    let v = pair.s1.len();
    if v < 2 {
        return Err(Error::Shape(
            "VQA guidance needs >= 2 views".to_string(),
        ));
    }
    let scores = crate::exec::par_map_range(v - 1, |j| {
        let d1 = difference_frame(&pair.s1[j + 1], &pair.s1[j]);
        let d2 = difference_frame(&pair.s2[j + 1], &pair.s2[j]);
        ssim(&d1, &d2)
    });
    let mut sum = 0.0;
    for s in scores {
        sum += s?;
    }
    Ok(sum / (v - 1) as f64)
}

/// Replacement-branch guidance `1 - 4 r`: no replacement maps to +1, the
/// maximal ratio 0.5 maps to -1.
pub fn rep_guidance(recipe: &PairRecipe) -> Result<f64> {
    if !(0.0..0.5).contains(&recipe.r) {
        return Err(Error::Config(format!(
            "replacement ratio {} outside [0, 0.5)",
            recipe.r
        )));
    }
    Ok(1.0 - 4.0 * recipe.r)
}

/// All three branch targets for one pair, rescaled into `[-1, 1]`.
pub fn compute_guidance(pair: &ContrastivePair, bounds: &GuidanceBounds) -> Result<GuidanceVector> {
    Ok(GuidanceVector {
        psi_iqa: rescale(iqa_guidance(pair)?, &bounds.iqa),
        psi_vqa: rescale(vqa_guidance(pair)?, &bounds.vqa),
        psi_rep: rep_guidance(&pair.recipe)?,
    })
}

/// Nearest-rank percentile: the `ceil(p/100 * n)`-th smallest value.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let rank = ((p / 100.0 * n as f64).ceil() as usize).clamp(1, n);
    sorted[rank - 1]
}

/// Calibrate rescale bounds as the 1st/99th percentiles of raw branch
/// scores over a sample of pairs.
pub fn calibrate_bounds(raw_scores: &[f64]) -> Result<RescaleBounds> {
    if raw_scores.len() < 100 {
        return Err(Error::Config(format!(
            "bound calibration needs >= 100 samples, got {}",
            raw_scores.len()
        )));
    }
    let mut sorted: Vec<f64> = raw_scores.to_vec();
    if sorted.iter().any(|v| !v.is_finite()) {
        return Err(Error::Config(
            "non-finite score in calibration sample".to_string(),
        ));
    }
    sorted.sort_by(f64::total_cmp);
    let a = percentile(&sorted, 1.0);
    let b = percentile(&sorted, 99.0);
    if b - a < 1e-6 {
        return Err(Error::Config(format!(
            "degenerate score distribution (spread {:.2e}); calibrate on a larger or more varied sample",
            b - a
        )));
    }
    RescaleBounds::new(a, b)
}
