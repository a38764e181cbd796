//! Procedural synthetic datasets: textured scenes rendered at shifted
//! viewpoints, degraded by pseudo-methods with known severity ordering so
//! the ground-truth quality ranking is available for free.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::distortion::{apply_distortion, DistortionKind, DistortionSpec};
use crate::error::{Error, Result};
use crate::exec;
use crate::scene::{save_views, View};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub n_scenes: usize,
    pub views_per_scene: usize,
    /// (height, width).
    pub resolution: (usize, usize),
    /// Stand-in renderers; each degrades the clean frames with its own
    /// distortion. Severities must be strictly increasing so labels have
    /// a known order.
    pub pseudo_methods: Vec<DistortionSpec>,
    pub seed: u64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_scenes == 0 || self.views_per_scene == 0 {
            return Err(Error::Config(
                "synthetic spec needs at least 1 scene and 1 view".to_string(),
            ));
        }
        if self.resolution.0 < 16 || self.resolution.1 < 16 {
            return Err(Error::Config(
                "synthetic resolution must be at least 16x16".to_string(),
            ));
        }
        if self.pseudo_methods.len() < 2 {
            return Err(Error::Config(
                "synthetic spec needs at least 2 pseudo-methods".to_string(),
            ));
        }
        for spec in &self.pseudo_methods {
            spec.validate()?;
        }
        for pair in self.pseudo_methods.windows(2) {
            if pair[1].severity <= pair[0].severity {
                return Err(Error::Config(
                    "pseudo-method severities must be strictly increasing".to_string(),
                ));
            }
        }
        Ok(())
    }
}

pub fn scene_id(index: usize) -> String {
    format!("scene_{index:03}")
}

fn kind_slug(kind: DistortionKind) -> &'static str {
    match kind {
        DistortionKind::GaussianBlur => "gaussian_blur",
        DistortionKind::GaussianNoise => "gaussian_noise",
        DistortionKind::JpegLikeBlockiness => "blockiness",
        DistortionKind::BrightnessShift => "brightness",
        DistortionKind::None => "clean",
    }
}

pub fn method_id(spec: &SynthSpec, method_index: usize) -> String {
    let m = &spec.pseudo_methods[method_index];
    format!("m{method_index}_{}_s{}", kind_slug(m.kind), m.severity)
}

/// Quality label for a method: best (highest) at the lowest severity.
pub fn method_label(spec: &SynthSpec, method_index: usize) -> f64 {
    -(spec.pseudo_methods[method_index].severity as f64)
}

struct Shape {
    cx: f32,
    cy: f32,
    radius: f32,
    depth: f32,
    color: [f32; 3],
    rect: bool,
}

struct SceneParams {
    freq: [f32; 3],
    phase: [f32; 3],
    angle: f32,
    texture_freq: f32,
    texture_amp: f32,
    shapes: Vec<Shape>,
}

fn scene_params(spec: &SynthSpec, scene_index: usize) -> SceneParams {
    let mut rng =
        ChaCha8Rng::seed_from_u64(spec.seed ^ (scene_index as u64).wrapping_mul(0x9e37_79b9));
    let shapes = (0..rng.gen_range(4..=6))
        .map(|_| Shape {
            cx: rng.gen_range(0.1..0.9),
            cy: rng.gen_range(0.1..0.9),
            radius: rng.gen_range(0.06..0.18),
            depth: rng.gen_range(0.2..1.0),
            color: [rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9)],
            rect: rng.gen_bool(0.4),
        })
        .collect();
    SceneParams {
        freq: [rng.gen_range(0.8..2.5), rng.gen_range(0.8..2.5), rng.gen_range(0.8..2.5)],
        phase: [rng.gen_range(0.0..6.28), rng.gen_range(0.0..6.28), rng.gen_range(0.0..6.28)],
        angle: rng.gen_range(0.0..std::f32::consts::PI),
        texture_freq: rng.gen_range(40.0..70.0),
        texture_amp: rng.gen_range(0.06..0.12),
        shapes,
    }
}

/// Fraction of the frame width a unit-depth shape moves per view step.
const PARALLAX_PER_VIEW: f32 = 0.02;

fn smoothstep(edge0: f32, edge1: f32, x: f32) -> f32 {
    let t = ((x - edge0) / (edge1 - edge0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Render the undegraded frame for one (scene, view). Shapes shift with
/// the view index in proportion to their depth, imitating parallax.
pub fn render_clean_view(spec: &SynthSpec, scene_index: usize, view_index: usize) -> Array3<f32> {
    let params = scene_params(spec, scene_index);
    let (h, w) = spec.resolution;
    let shift = view_index as f32 * PARALLAX_PER_VIEW;
    Array3::from_shape_fn((h, w, 3), |(y, x, c)| {
        let u = x as f32 / w as f32;
        let v = y as f32 / h as f32;
        // Low-frequency background gradient, rotated per scene.
        let axis = u * params.angle.cos() + v * params.angle.sin();
        let mut value = 0.5
            + 0.25
                * (std::f32::consts::TAU * params.freq[c] * axis + params.phase[c]).sin();
        // Fine texture so blur has high frequencies to remove.
        value += params.texture_amp
            * (params.texture_freq * u + params.phase[c]).sin()
            * (params.texture_freq * 0.83 * v + params.phase[(c + 1) % 3]).cos();
        // Shapes, nearest (deepest) painted last.
        for shape in &params.shapes {
            let sx = shape.cx + shift * shape.depth;
            let coverage = if shape.rect {
                let dx = (u - sx).abs();
                let dy = (v - shape.cy).abs();
                let d = dx.max(dy);
                1.0 - smoothstep(shape.radius - 0.01, shape.radius, d)
            } else {
                let d = ((u - sx) * (u - sx) + (v - shape.cy) * (v - shape.cy)).sqrt();
                1.0 - smoothstep(shape.radius - 0.01, shape.radius, d)
            };
            value = value * (1.0 - coverage) + shape.color[c] * coverage;
        }
        value.clamp(0.0, 1.0)
    })
}

fn view_noise_seed(spec: &SynthSpec, scene: usize, method: usize, view: usize) -> u64 {
    let mut state = spec
        .seed
        .wrapping_add(0x243f_6a88_85a3_08d3)
        .wrapping_add((scene as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add((method as u64).wrapping_mul(0xbf58_476d_1ce4_e5b9))
        .wrapping_add((view as u64).wrapping_mul(0x94d0_49bb_1331_11eb));
    state ^= state >> 30;
    state = state.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    state ^= state >> 27;
    state
}

/// Write the dataset tree (`scene/method/view_*.png`) plus a manifest
/// `labels.json` with severity-monotone quality labels.
pub fn generate(spec: &SynthSpec, out: &Path) -> Result<()> {
    spec.validate()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let jobs: Vec<(usize, usize)> = (0..spec.n_scenes)
        .flat_map(|s| (0..spec.pseudo_methods.len()).map(move |m| (s, m)))
        .collect();
    let results = exec::par_map(&jobs, |&(s, m)| -> Result<()> {
        let dir = out.join(scene_id(s)).join(method_id(spec, m));
        let distortion = &spec.pseudo_methods[m];
        let views: Vec<View> = (0..spec.views_per_scene)
            .map(|v| {
                let clean = render_clean_view(spec, s, v);
                View {
                    pixels: apply_distortion(&clean, distortion, view_noise_seed(spec, s, m, v)),
                    index: v,
                }
            })
            .collect();
        save_views(&views, &dir)
    });
    results.into_iter().collect::<Result<Vec<()>>>()?;

    let mut labels = BTreeMap::new();
    for s in 0..spec.n_scenes {
        for m in 0..spec.pseudo_methods.len() {
            labels.insert(
                format!("{}/{}", scene_id(s), method_id(spec, m)),
                method_label(spec, m),
            );
        }
    }
    #[derive(Serialize)]
    struct Manifest {
        labels: BTreeMap<String, f64>,
    }
    let path = out.join("labels.json");
    let json = serde_json::to_string_pretty(&Manifest { labels })
        .map_err(|e| Error::Dataset(format!("serializing labels: {e}")))?;
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(())
}
