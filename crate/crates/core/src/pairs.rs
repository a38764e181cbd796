//! Contrastive pair preparation: semantically aligned, quality-divergent
//! scene-clip pairs.
//!
//! A [`PairRecipe`] records every randomized choice, so realization is a
//! pure function of `(index, recipe)` and a recipe stream can be exported
//! and replayed exactly. Construction order for one pair:
//!
//! 1. take a contiguous clip of the base method's views, crop and orient it
//! 2. duplicate the clip
//! 3. pass each copy through its own optional distortion
//! 4. substitute `round(r * V)` views of the second copy with the
//!    replacement method's corresponding views (same crop, orientation, and
//!    second-side distortion)
//!
//! Both sides keep the same scene, view indices, and shape; only rendering
//! provenance and distortion differ.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::Array3;
use num_bigint::BigUint;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::distortion::{apply_distortion, DistortionKind, DistortionSpec};
use crate::error::{Error, Result};
use crate::scene::{load_views, DatasetIndex};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    Identity,
    Rot90,
    Rot180,
    Rot270,
    Hflip,
    Vflip,
}

pub const ORIENTATIONS: [Orientation; 6] = [
    Orientation::Identity,
    Orientation::Rot90,
    Orientation::Rot180,
    Orientation::Rot270,
    Orientation::Hflip,
    Orientation::Vflip,
];

/// Crop rectangle in source-view coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropRect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

/// Full record of one pair's randomized choices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecipe {
    pub scene_id: String,
    pub base_method_id: String,
    pub replacement_method_id: String,
    pub view_indices: Vec<usize>,
    pub crop: CropRect,
    pub orientation: Orientation,
    pub distortion_1: DistortionSpec,
    pub distortion_2: DistortionSpec,
    /// View replacement ratio in `[0, 0.5)`.
    pub r: f64,
    /// Positions within the clip (not dataset view indices) whose views are
    /// substituted on the second side.
    pub replaced_indices: BTreeSet<usize>,
}

/// Realized pair of clips. Views are cropped/oriented pixels in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct ContrastivePair {
    pub s1: Vec<Array3<f32>>,
    pub s2: Vec<Array3<f32>>,
    pub recipe: PairRecipe,
}

/// Sampling ranges and distortion behavior for recipe generation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PrepConfig {
    /// Inclusive clip-length range; clamped to the available view count.
    pub clip_len_min: usize,
    pub clip_len_max: usize,
    /// Inclusive crop-side range; height and width are drawn independently
    /// and clamped to the source dimensions.
    pub crop_min: usize,
    pub crop_max: usize,
}

impl Default for PrepConfig {
    fn default() -> Self {
        Self {
            clip_len_min: 4,
            clip_len_max: 16,
            crop_min: 96,
            crop_max: 256,
        }
    }
}

/// Round half away from zero; inputs here are non-negative.
pub fn round_half_away(x: f64) -> usize {
    (x + 0.5).floor() as usize
}

fn sample_range(rng: &mut impl Rng, min: usize, max: usize, available: usize) -> usize {
    let upper = max.min(available);
    let lower = min.min(upper);
    rng.gen_range(lower..=upper)
}

/// Draw either no distortion (probability 1/5) or a uniform kind and
/// severity from the bank.
fn sample_distortion(rng: &mut impl Rng) -> DistortionSpec {
    const KINDS: [DistortionKind; 4] = [
        DistortionKind::GaussianBlur,
        DistortionKind::GaussianNoise,
        DistortionKind::JpegLikeBlockiness,
        DistortionKind::BrightnessShift,
    ];
    match rng.gen_range(0..=KINDS.len()) {
        0 => DistortionSpec::none(),
        i => DistortionSpec {
            kind: KINDS[i - 1],
            severity: rng.gen_range(1..=5),
        },
    }
}

/// Sample one recipe. Scenes with fewer than two methods are excluded; the
/// draw order is fixed, so `(seed, config, index)` determines the stream.
pub fn sample_recipe(
    index: &DatasetIndex,
    rng: &mut impl Rng,
    config: &PrepConfig,
) -> Result<PairRecipe> {
    let eligible = index.scenes_with_min_methods(2);
    if eligible.is_empty() {
        return Err(Error::Dataset(
            "no scene has at least two methods; cannot form pairs".to_string(),
        ));
    }
    let scene_id = eligible[rng.gen_range(0..eligible.len())].to_string();
    let methods = index.methods_of(&scene_id);
    let base_method_id = methods[rng.gen_range(0..methods.len())].to_string();
    let others: Vec<&str> = methods
        .iter()
        .filter(|m| **m != base_method_id)
        .copied()
        .collect();
    let replacement_method_id = others[rng.gen_range(0..others.len())].to_string();

    let n_base = index.n_views(&scene_id, &base_method_id)?;
    let n_repl = index.n_views(&scene_id, &replacement_method_id)?;
    let n_avail = n_base.min(n_repl);
    let clip_len = sample_range(rng, config.clip_len_min, config.clip_len_max, n_avail);
    let start = rng.gen_range(0..=n_avail - clip_len);
    let view_indices: Vec<usize> = (start..start + clip_len).collect();

    let (h_base, w_base) = index.dims(&scene_id, &base_method_id)?;
    let (h_repl, w_repl) = index.dims(&scene_id, &replacement_method_id)?;
    let (h, w) = (h_base.min(h_repl), w_base.min(w_repl));
    let crop_h = sample_range(rng, config.crop_min, config.crop_max, h);
    let crop_w = sample_range(rng, config.crop_min, config.crop_max, w);
    let crop = CropRect {
        top: rng.gen_range(0..=h - crop_h),
        left: rng.gen_range(0..=w - crop_w),
        height: crop_h,
        width: crop_w,
    };

    let orientation = ORIENTATIONS[rng.gen_range(0..ORIENTATIONS.len())];
    let distortion_1 = sample_distortion(rng);
    let distortion_2 = sample_distortion(rng);

    let r: f64 = rng.gen_range(0.0..0.5);
    let n_replaced = round_half_away(r * clip_len as f64);
    let mut positions: Vec<usize> = (0..clip_len).collect();
    positions.shuffle(rng);
    let replaced_indices: BTreeSet<usize> = positions.into_iter().take(n_replaced).collect();

    Ok(PairRecipe {
        scene_id,
        base_method_id,
        replacement_method_id,
        view_indices,
        crop,
        orientation,
        distortion_1,
        distortion_2,
        r,
        replaced_indices,
    })
}

fn crop_view(pixels: &Array3<f32>, crop: &CropRect) -> Array3<f32> {
    pixels
        .slice(ndarray::s![
            crop.top..crop.top + crop.height,
            crop.left..crop.left + crop.width,
            ..
        ])
        .to_owned()
}

pub fn orient_view(pixels: &Array3<f32>, orientation: Orientation) -> Array3<f32> {
    let (h, w, c) = pixels.dim();
    match orientation {
        Orientation::Identity => pixels.clone(),
        Orientation::Rot90 => {
            Array3::from_shape_fn((w, h, c), |(y, x, ch)| pixels[(h - 1 - x, y, ch)])
        }
        Orientation::Rot180 => {
            Array3::from_shape_fn((h, w, c), |(y, x, ch)| pixels[(h - 1 - y, w - 1 - x, ch)])
        }
        Orientation::Rot270 => {
            Array3::from_shape_fn((w, h, c), |(y, x, ch)| pixels[(x, w - 1 - y, ch)])
        }
        Orientation::Hflip => {
            Array3::from_shape_fn((h, w, c), |(y, x, ch)| pixels[(y, w - 1 - x, ch)])
        }
        Orientation::Vflip => {
            Array3::from_shape_fn((h, w, c), |(y, x, ch)| pixels[(h - 1 - y, x, ch)])
        }
    }
}

/// FNV-1a over the recipe's canonical JSON; the noise distortions draw from
/// counters derived from this, keeping realization a pure function of the
/// recipe with no extra seed field.
fn recipe_seed(recipe: &PairRecipe) -> u64 {
    let json = serde_json::to_string(recipe).expect("recipe serializes");
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in json.as_bytes() {
        hash ^= *b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

fn view_seed(base: u64, side: u64, position: usize) -> u64 {
    base.wrapping_add(side.wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add((position as u64).wrapping_mul(0xbf58_476d_1ce4_e5b9))
}

fn validate_recipe(index: &DatasetIndex, recipe: &PairRecipe) -> Result<()> {
    if recipe.base_method_id == recipe.replacement_method_id {
        return Err(Error::Config(
            "recipe base and replacement methods coincide".to_string(),
        ));
    }
    if !(0.0..0.5).contains(&recipe.r) {
        return Err(Error::Config(format!(
            "replacement ratio {} outside [0, 0.5)",
            recipe.r
        )));
    }
    let expect = round_half_away(recipe.r * recipe.view_indices.len() as f64);
    if recipe.replaced_indices.len() != expect {
        return Err(Error::Config(format!(
            "recipe lists {} replaced views but round(r*V) = {expect}",
            recipe.replaced_indices.len()
        )));
    }
    if let Some(&p) = recipe
        .replaced_indices
        .iter()
        .find(|&&p| p >= recipe.view_indices.len())
    {
        return Err(Error::Config(format!(
            "replaced position {p} outside clip of length {}",
            recipe.view_indices.len()
        )));
    }
    recipe.distortion_1.validate()?;
    recipe.distortion_2.validate()?;
    let n_repl = index.n_views(&recipe.scene_id, &recipe.replacement_method_id)?;
    if let Some(&bad) = recipe.view_indices.iter().find(|&&v| v >= n_repl) {
        return Err(Error::Dataset(format!(
            "replacement method {} lacks view index {bad}",
            recipe.replacement_method_id
        )));
    }
    for (label, method) in [
        ("base", &recipe.base_method_id),
        ("replacement", &recipe.replacement_method_id),
    ] {
        let (h, w) = index.dims(&recipe.scene_id, method)?;
        if recipe.crop.top + recipe.crop.height > h || recipe.crop.left + recipe.crop.width > w {
            return Err(Error::Config(format!(
                "crop {:?} exceeds {label} view bounds {h}x{w}",
                recipe.crop
            )));
        }
    }
    Ok(())
}

/// Realize a recipe into pixel clips. Deterministic: the same recipe always
/// yields bit-identical pairs.
pub fn realize_pair(index: &DatasetIndex, recipe: &PairRecipe) -> Result<ContrastivePair> {
    validate_recipe(index, recipe)?;
    let seed = recipe_seed(recipe);

    let base_views = load_views(
        index,
        &recipe.scene_id,
        &recipe.base_method_id,
        &recipe.view_indices,
    )?;
    let geo: Vec<Array3<f32>> = base_views
        .iter()
        .map(|v| orient_view(&crop_view(&v.pixels, &recipe.crop), recipe.orientation))
        .collect();

    let s1: Vec<Array3<f32>> = geo
        .iter()
        .enumerate()
        .map(|(i, v)| apply_distortion(v, &recipe.distortion_1, view_seed(seed, 1, i)))
        .collect();
    let mut s2: Vec<Array3<f32>> = geo
        .iter()
        .enumerate()
        .map(|(i, v)| apply_distortion(v, &recipe.distortion_2, view_seed(seed, 2, i)))
        .collect();

    if !recipe.replaced_indices.is_empty() {
        let wanted: Vec<usize> = recipe
            .replaced_indices
            .iter()
            .map(|&p| recipe.view_indices[p])
            .collect();
        let repl_views = load_views(
            index,
            &recipe.scene_id,
            &recipe.replacement_method_id,
            &wanted,
        )?;
        for (&pos, view) in recipe.replaced_indices.iter().zip(repl_views) {
            let v = orient_view(&crop_view(&view.pixels, &recipe.crop), recipe.orientation);
            s2[pos] = apply_distortion(&v, &recipe.distortion_2, view_seed(seed, 2, pos));
        }
    }

    Ok(ContrastivePair {
        s1,
        s2,
        recipe: recipe.clone(),
    })
}

/// Effective pair budget `a * s * v * (m c)(m c - 1) / 2`. Exact for any
/// input sizes; arbitrary-precision because the product overflows fixed
///-width integers well before the documented 10^6 bound.
pub fn pair_budget(s: u64, v: u64, m: u64, c: u64, a: u64) -> BigUint {
    let mc = BigUint::from(m) * BigUint::from(c);
    let pairs = &mc * (&mc - 1u32) / 2u32;
    BigUint::from(a) * BigUint::from(s) * BigUint::from(v) * pairs
}

/// Export recipes as JSON lines, one recipe per line, all fields explicit.
pub fn write_recipes(recipes: &[PairRecipe], path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for r in recipes {
        let line = serde_json::to_string(r)
            .map_err(|e| Error::Config(format!("recipe serialization: {e}")))?;
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_recipes(path: &Path) -> Result<Vec<PairRecipe>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let recipe: PairRecipe = serde_json::from_str(&line).map_err(|e| {
            Error::Config(format!("{}:{}: bad recipe: {e}", path.display(), i + 1))
        })?;
        out.push(recipe);
    }
    Ok(out)
}
