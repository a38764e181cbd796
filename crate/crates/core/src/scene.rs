//! Scene data model and dataset ingestion.
//!
//! A [`Scene`] is an ordered sequence of same-size views rendered from one
//! scene by one view-synthesis method. Datasets live on disk as
//! `<root>/<scene_id>/<method_id>/<view_####>.png`, optionally overridden by
//! a JSON manifest, and are enumerated into a [`DatasetIndex`] without
//! decoding pixels. Pixels are normalized to `[0, 1]` floats at load time;
//! everything downstream assumes that range.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::ImageReader;
use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One view (image) of a scene. Pixels are H×W×3 in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct View {
    pub pixels: Array3<f32>,
    /// Position in the view sequence.
    pub index: usize,
}

impl View {
    pub fn height(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[1]
    }
}

/// Ordered views of one scene as rendered by one method. All views share the
/// same height and width, and the view order follows the camera path.
#[derive(Debug, Clone)]
pub struct Scene {
    pub views: Vec<View>,
    pub scene_id: String,
    pub method_id: String,
}

impl Scene {
    pub fn n_views(&self) -> usize {
        self.views.len()
    }

    pub fn height(&self) -> usize {
        self.views[0].height()
    }

    pub fn width(&self) -> usize {
        self.views[0].width()
    }
}

/// Key for a labeled sample: `(scene_id, method_id)`.
pub type SceneMethodKey = (String, String);

/// View files of one (scene, method) sequence plus their shared dimensions.
#[derive(Debug, Clone)]
pub struct SequenceEntry {
    pub files: Vec<PathBuf>,
    pub width: usize,
    pub height: usize,
}

/// Enumerated dataset: view-file locators per (scene, method), plus optional
/// perceptual labels. Building the index reads image headers only.
#[derive(Debug, Clone)]
pub struct DatasetIndex {
    root: PathBuf,
    scenes: BTreeMap<String, BTreeMap<String, SequenceEntry>>,
    labels: BTreeMap<SceneMethodKey, f64>,
}

/// On-disk manifest/labels schema. Both fields are optional: `scenes` maps
/// scene id → method id → view files (relative to the dataset root), and
/// `labels` maps `"scene_id/method_id"` to a perceptual score.
#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scenes: Option<BTreeMap<String, BTreeMap<String, Vec<String>>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<BTreeMap<String, f64>>,
}

const IMAGE_EXTENSIONS: [&str; 4] = ["png", "jpg", "jpeg", "PNG"];

fn is_view_file(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTENSIONS.iter().any(|x| x.eq_ignore_ascii_case(e)))
        .unwrap_or(false)
}

fn sorted_dir_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    // Zero-padded numeric names sort correctly under plain lexicographic
    // order on the file name.
    out.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
    Ok(out)
}

/// Check that all view files of one sequence share the same dimensions,
/// reading image headers only. Returns `(width, height)`.
fn check_uniform_dims(scene: &str, method: &str, files: &[PathBuf]) -> Result<(u32, u32)> {
    let mut first: Option<(u32, u32, &PathBuf)> = None;
    for f in files {
        let (w, h) = image::image_dimensions(f).map_err(|e| Error::Image {
            path: f.clone(),
            message: e.to_string(),
        })?;
        match first {
            None => first = Some((w, h, f)),
            Some((w0, h0, f0)) => {
                if (w, h) != (w0, h0) {
                    return Err(Error::Dataset(format!(
                        "mixed resolutions in {scene}/{method}: {} is {w0}x{h0} but {} is {w}x{h}",
                        f0.display(),
                        f.display()
                    )));
                }
            }
        }
    }
    Ok(first.map(|(w, h, _)| (w, h)).unwrap_or((0, 0)))
}

/// Enumerate a dataset rooted at `root_path`. When `manifest` is given its
/// `scenes` block overrides the directory scan; its `labels` block is loaded
/// either way. Empty (scene, method) directories are excluded with a
/// warning.
pub fn load_dataset(root_path: &Path, manifest: Option<&Path>) -> Result<DatasetIndex> {
    if !root_path.is_dir() {
        return Err(Error::Dataset(format!(
            "dataset root {} is not a directory",
            root_path.display()
        )));
    }

    let manifest_data: Option<ManifestFile> = match manifest {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            Some(serde_json::from_str(&text).map_err(|e| {
                Error::Config(format!("manifest {}: {e}", p.display()))
            })?)
        }
        None => None,
    };

    let mut scenes: BTreeMap<String, BTreeMap<String, SequenceEntry>> = BTreeMap::new();

    if let Some(listed) = manifest_data.as_ref().and_then(|m| m.scenes.as_ref()) {
        for (scene_id, methods) in listed {
            for (method_id, files) in methods {
                let paths: Vec<PathBuf> = files.iter().map(|f| root_path.join(f)).collect();
                if paths.is_empty() {
                    log::warn!("manifest lists no views for {scene_id}/{method_id}; excluded");
                    continue;
                }
                for p in &paths {
                    if !p.is_file() {
                        return Err(Error::Dataset(format!(
                            "manifest view file {} does not exist",
                            p.display()
                        )));
                    }
                }
                let (w, h) = check_uniform_dims(scene_id, method_id, &paths)?;
                scenes.entry(scene_id.clone()).or_default().insert(
                    method_id.clone(),
                    SequenceEntry {
                        files: paths,
                        width: w as usize,
                        height: h as usize,
                    },
                );
            }
        }
    } else {
        for scene_dir in sorted_dir_entries(root_path)? {
            if !scene_dir.is_dir() {
                continue;
            }
            let scene_id = scene_dir
                .file_name()
                .and_then(|n| n.to_str())
                .unwrap_or_default()
                .to_string();
            for method_dir in sorted_dir_entries(&scene_dir)? {
                if !method_dir.is_dir() {
                    continue;
                }
                let method_id = method_dir
                    .file_name()
                    .and_then(|n| n.to_str())
                    .unwrap_or_default()
                    .to_string();
                let files: Vec<PathBuf> = sorted_dir_entries(&method_dir)?
                    .into_iter()
                    .filter(|p| p.is_file() && is_view_file(p))
                    .collect();
                if files.is_empty() {
                    log::warn!("{scene_id}/{method_id} contains no images; excluded");
                    continue;
                }
                let (w, h) = check_uniform_dims(&scene_id, &method_id, &files)?;
                scenes.entry(scene_id.clone()).or_default().insert(
                    method_id,
                    SequenceEntry {
                        files,
                        width: w as usize,
                        height: h as usize,
                    },
                );
            }
        }
    }

    scenes.retain(|_, methods| !methods.is_empty());
    if scenes.is_empty() {
        return Err(Error::Dataset(format!(
            "no scenes found under {}",
            root_path.display()
        )));
    }

    let mut labels = BTreeMap::new();
    if let Some(raw) = manifest_data.and_then(|m| m.labels) {
        for (key, score) in raw {
            let (scene_id, method_id) = split_label_key(&key)?;
            let known = scenes
                .get(scene_id)
                .map(|m| m.contains_key(method_id))
                .unwrap_or(false);
            if !known {
                return Err(Error::Dataset(format!(
                    "label key {key} does not match any indexed (scene, method) pair"
                )));
            }
            labels.insert((scene_id.to_string(), method_id.to_string()), score);
        }
    }

    Ok(DatasetIndex {
        root: root_path.to_path_buf(),
        scenes,
        labels,
    })
}

pub fn split_label_key(key: &str) -> Result<(&str, &str)> {
    key.split_once('/')
        .ok_or_else(|| Error::Config(format!("label key {key:?} is not `scene_id/method_id`")))
}

impl DatasetIndex {
    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn scene_ids(&self) -> impl Iterator<Item = &str> {
        self.scenes.keys().map(|s| s.as_str())
    }

    pub fn methods_of(&self, scene_id: &str) -> Vec<&str> {
        self.scenes
            .get(scene_id)
            .map(|m| m.keys().map(|s| s.as_str()).collect())
            .unwrap_or_default()
    }

    pub fn n_scenes(&self) -> usize {
        self.scenes.len()
    }

    /// All (scene, method) keys in deterministic order.
    pub fn keys(&self) -> Vec<SceneMethodKey> {
        self.scenes
            .iter()
            .flat_map(|(s, ms)| ms.keys().map(move |m| (s.clone(), m.clone())))
            .collect()
    }

    pub fn contains(&self, scene_id: &str, method_id: &str) -> bool {
        self.scenes
            .get(scene_id)
            .map(|m| m.contains_key(method_id))
            .unwrap_or(false)
    }

    pub fn entry(&self, scene_id: &str, method_id: &str) -> Result<&SequenceEntry> {
        self.scenes
            .get(scene_id)
            .and_then(|m| m.get(method_id))
            .ok_or_else(|| {
                Error::Dataset(format!("no entry for {scene_id}/{method_id} in index"))
            })
    }

    pub fn view_files(&self, scene_id: &str, method_id: &str) -> Result<&[PathBuf]> {
        Ok(&self.entry(scene_id, method_id)?.files)
    }

    pub fn n_views(&self, scene_id: &str, method_id: &str) -> Result<usize> {
        Ok(self.entry(scene_id, method_id)?.files.len())
    }

    /// View dimensions as `(height, width)`, read from image headers at
    /// index time.
    pub fn dims(&self, scene_id: &str, method_id: &str) -> Result<(usize, usize)> {
        let e = self.entry(scene_id, method_id)?;
        Ok((e.height, e.width))
    }

    pub fn labels(&self) -> &BTreeMap<SceneMethodKey, f64> {
        &self.labels
    }

    pub fn set_labels(&mut self, labels: BTreeMap<SceneMethodKey, f64>) {
        self.labels = labels;
    }

    /// Scenes rendered by at least `min_methods` methods, in deterministic
    /// order. Pair preparation needs ≥ 2 methods per scene.
    pub fn scenes_with_min_methods(&self, min_methods: usize) -> Vec<&str> {
        self.scenes
            .iter()
            .filter(|(_, m)| m.len() >= min_methods)
            .map(|(s, _)| s.as_str())
            .collect()
    }
}

fn decode_view(path: &Path, index: usize) -> Result<View> {
    if path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.eq_ignore_ascii_case("jpg") || e.eq_ignore_ascii_case("jpeg"))
        .unwrap_or(false)
    {
        log::warn!(
            "{} is JPEG; compression artifacts may confound quality learning",
            path.display()
        );
    }
    let img = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    if h < 16 || w < 16 {
        return Err(Error::Shape(format!(
            "{} is {w}x{h}; views must be at least 16x16",
            path.display()
        )));
    }
    let raw = img.into_raw();
    let mut pixels = Array3::<f32>::zeros((h, w, 3));
    {
        let dst = pixels.as_slice_mut().expect("contiguous");
        for (d, s) in dst.iter_mut().zip(raw.iter()) {
            *d = *s as f32 / 255.0;
        }
    }
    Ok(View { pixels, index })
}

/// Load and normalize a subset of views of one (scene, method) entry,
/// preserving the order of `indices`.
pub fn load_views(
    index: &DatasetIndex,
    scene_id: &str,
    method_id: &str,
    indices: &[usize],
) -> Result<Vec<View>> {
    let files = index.view_files(scene_id, method_id)?;
    for &i in indices {
        if i >= files.len() {
            return Err(Error::Dataset(format!(
                "{scene_id}/{method_id} has {} views; index {i} out of range",
                files.len()
            )));
        }
    }
    crate::exec::par_map_range(indices.len(), |k| decode_view(&files[indices[k]], indices[k]))
        .into_iter()
        .collect()
}

/// Load and normalize all views of one (scene, method) entry.
pub fn load_scene(index: &DatasetIndex, scene_id: &str, method_id: &str) -> Result<Scene> {
    let files = index.view_files(scene_id, method_id)?;
    let views = crate::exec::par_map_range(files.len(), |i| decode_view(&files[i], i));
    let mut out = Vec::with_capacity(views.len());
    let mut shape: Option<(usize, usize)> = None;
    for (view, file) in views.into_iter().zip(files) {
        let view = view?;
        let dims = (view.height(), view.width());
        match shape {
            None => shape = Some(dims),
            Some(s) if s != dims => {
                return Err(Error::Shape(format!(
                    "{} is {}x{} but earlier views of {scene_id}/{method_id} are {}x{}",
                    file.display(),
                    dims.0,
                    dims.1,
                    s.0,
                    s.1
                )))
            }
            _ => {}
        }
        out.push(view);
    }
    Ok(Scene {
        views: out,
        scene_id: scene_id.to_string(),
        method_id: method_id.to_string(),
    })
}

/// Write views as zero-padded PNGs (`view_0000.png`, ...) into `dir`.
/// Values are quantized to 8 bits with round-to-nearest, so reloading a
/// scene that itself came from 8-bit files round-trips bit-exactly.
pub fn save_views(views: &[View], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, view) in views.iter().enumerate() {
        let (h, w) = (view.height(), view.width());
        let mut buf = image::RgbImage::new(w as u32, h as u32);
        let src = view.pixels.as_slice().expect("contiguous");
        for (d, s) in buf.iter_mut().zip(src.iter()) {
            *d = (s.clamp(0.0, 1.0) * 255.0).round() as u8;
        }
        let path = dir.join(format!("view_{i:04}.png"));
        buf.save(&path).map_err(|e| Error::Image {
            path: path.clone(),
            message: e.to_string(),
        })?;
    }
    Ok(())
}
