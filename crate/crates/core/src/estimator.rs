//! Frozen-backbone quality estimation: extract scene representations,
//! fit a ridge regression from representations to perceptual scores, and
//! predict scores for held-out scenes.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Array3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::Backbone;
use crate::error::{Error, Result};
use crate::scene::{Scene, SceneMethodKey};

pub const DEFAULT_RIDGE_ALPHA: f64 = 1e-3;

/// Affine map from representations to scores. The intercept is not
/// penalized: features and labels are centered before the ridge solve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionModel {
    pub coefficients: Vec<f64>,
    pub intercept: f64,
    pub alpha: f64,
    pub fitted_on: Vec<SceneMethodKey>,
}

/// Evenly subsample `n` indices down to at most `max` while keeping the
/// first and last views.
fn subsample_indices(n: usize, max: usize) -> Vec<usize> {
    if n <= max {
        return (0..n).collect();
    }
    if max == 1 {
        return vec![0];
    }
    (0..max)
        .map(|j| (j as f64 * (n - 1) as f64 / (max - 1) as f64).round() as usize)
        .collect()
}

/// Representation of a view sequence under frozen weights. Sequences
/// longer than the backbone's view limit are uniformly subsampled.
pub fn extract_views(backbone: &Backbone, views: &[Array3<f32>]) -> Result<Array1<f32>> {
    let max = backbone.config.max_views;
    if views.len() > max {
        let picked: Vec<Array3<f32>> = subsample_indices(views.len(), max)
            .into_iter()
            .map(|i| views[i].clone())
            .collect();
        backbone.represent_inference(&picked)
    } else {
        backbone.represent_inference(views)
    }
}

pub fn extract(backbone: &Backbone, scene: &Scene) -> Result<Array1<f32>> {
    let views: Vec<Array3<f32>> = scene.views.iter().map(|v| v.pixels.clone()).collect();
    extract_views(backbone, &views)
}

/// Solve `A x = b` for symmetric positive-definite `A` by Cholesky
/// factorization.
fn cholesky_solve(a: &Array2<f64>, b: &Array1<f64>) -> Result<Array1<f64>> {
    let n = a.nrows();
    let mut l = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[[i, j]];
            for k in 0..j {
                sum -= l[[i, k]] * l[[j, k]];
            }
            if i == j {
                if sum <= 0.0 {
                    return Err(Error::Eval(
                        "normal equations are not positive definite; increase the ridge alpha"
                            .to_string(),
                    ));
                }
                l[[i, i]] = sum.sqrt();
            } else {
                l[[i, j]] = sum / l[[j, j]];
            }
        }
    }
    // Forward substitution L y = b, then back substitution L^T x = y.
    let mut y = Array1::<f64>::zeros(n);
    for i in 0..n {
        let mut sum = b[i];
        for k in 0..i {
            sum -= l[[i, k]] * y[k];
        }
        y[i] = sum / l[[i, i]];
    }
    let mut x = Array1::<f64>::zeros(n);
    for i in (0..n).rev() {
        let mut sum = y[i];
        for k in i + 1..n {
            sum -= l[[k, i]] * x[k];
        }
        x[i] = sum / l[[i, i]];
    }
    Ok(x)
}

/// Ridge regression on explicit training keys.
pub fn fit_on_keys(
    representations: &BTreeMap<SceneMethodKey, Array1<f32>>,
    labels: &BTreeMap<SceneMethodKey, f64>,
    train_keys: &[SceneMethodKey],
    alpha: f64,
) -> Result<RegressionModel> {
    if train_keys.len() < 3 {
        return Err(Error::Eval(format!(
            "regression needs at least 3 training keys, got {}",
            train_keys.len()
        )));
    }
    if alpha < 0.0 {
        return Err(Error::Eval("ridge alpha must be >= 0".to_string()));
    }
    let dim = representations
        .values()
        .next()
        .map(|r| r.len())
        .ok_or_else(|| Error::Eval("no representations given".to_string()))?;
    let n = train_keys.len();
    let mut x = Array2::<f64>::zeros((n, dim));
    let mut y = Array1::<f64>::zeros(n);
    for (row, key) in train_keys.iter().enumerate() {
        let repr = representations.get(key).ok_or_else(|| {
            Error::Eval(format!("no representation for {}/{}", key.0, key.1))
        })?;
        if repr.len() != dim {
            return Err(Error::Shape(format!(
                "representation for {}/{} has dim {}, expected {dim}",
                key.0,
                key.1,
                repr.len()
            )));
        }
        for (col, &v) in repr.iter().enumerate() {
            x[[row, col]] = v as f64;
        }
        y[row] = *labels.get(key).ok_or_else(|| {
            Error::Eval(format!("no label for {}/{}", key.0, key.1))
        })?;
    }

    let x_mean = x.mean_axis(ndarray::Axis(0)).unwrap();
    let y_mean = y.mean().unwrap();
    let xc = &x - &x_mean.view().insert_axis(ndarray::Axis(0));
    let yc = &y - y_mean;

    let mut gram = xc.t().dot(&xc);
    for i in 0..dim {
        gram[[i, i]] += alpha;
    }
    let rhs = xc.t().dot(&yc);
    let w = cholesky_solve(&gram, &rhs)?;
    let intercept = y_mean - w.dot(&x_mean);
    Ok(RegressionModel {
        coefficients: w.to_vec(),
        intercept,
        alpha,
        fitted_on: train_keys.to_vec(),
    })
}

/// Random-half protocol: shuffle all labeled keys with `split_seed`, fit
/// on the first `split_fraction`, and return the complement for
/// evaluation.
pub fn fit(
    representations: &BTreeMap<SceneMethodKey, Array1<f32>>,
    labels: &BTreeMap<SceneMethodKey, f64>,
    split_seed: u64,
    split_fraction: f64,
    alpha: f64,
) -> Result<(RegressionModel, Vec<SceneMethodKey>)> {
    if !(0.0..1.0).contains(&split_fraction) || split_fraction == 0.0 {
        return Err(Error::Eval(format!(
            "split fraction {split_fraction} outside (0, 1)"
        )));
    }
    let mut keys: Vec<SceneMethodKey> = representations
        .keys()
        .filter(|k| labels.contains_key(*k))
        .cloned()
        .collect();
    if keys.is_empty() {
        return Err(Error::Eval(
            "no keys have both a representation and a label".to_string(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(split_seed);
    keys.shuffle(&mut rng);
    let n_train = ((keys.len() as f64) * split_fraction).round() as usize;
    let n_train = n_train.clamp(1, keys.len().saturating_sub(1).max(1));
    let (train, test) = keys.split_at(n_train);
    let model = fit_on_keys(representations, labels, train, alpha)?;
    Ok((model, test.to_vec()))
}

pub fn predict(model: &RegressionModel, repr: &Array1<f32>) -> Result<f64> {
    if repr.len() != model.coefficients.len() {
        return Err(Error::Shape(format!(
            "representation dim {} does not match model dim {}",
            repr.len(),
            model.coefficients.len()
        )));
    }
    Ok(model
        .coefficients
        .iter()
        .zip(repr.iter())
        .map(|(w, &x)| w * x as f64)
        .sum::<f64>()
        + model.intercept)
}

/// Cross-dataset protocol: fit on every labeled key of the training
/// datasets, return the test dataset's labeled keys for evaluation.
#[allow(clippy::type_complexity)]
pub fn cross_dataset_fit(
    representations: &BTreeMap<String, BTreeMap<SceneMethodKey, Array1<f32>>>,
    labels: &BTreeMap<String, BTreeMap<SceneMethodKey, f64>>,
    train_ids: &BTreeSet<String>,
    test_id: &str,
    alpha: f64,
) -> Result<(RegressionModel, Vec<SceneMethodKey>)> {
    if train_ids.contains(test_id) {
        return Err(Error::Eval(format!(
            "test dataset {test_id} overlaps the training datasets"
        )));
    }
    if train_ids.is_empty() {
        return Err(Error::Eval("no training datasets given".to_string()));
    }
    let mut train_reprs = BTreeMap::new();
    let mut train_labels = BTreeMap::new();
    for id in train_ids {
        let reprs = representations
            .get(id)
            .ok_or_else(|| Error::Eval(format!("no representations for dataset {id}")))?;
        let labs = labels
            .get(id)
            .ok_or_else(|| Error::Eval(format!("no labels for dataset {id}")))?;
        for (key, repr) in reprs {
            if labs.contains_key(key) {
                // Prefix with the dataset id so same-named scenes from
                // different datasets stay distinct.
                let merged = (format!("{id}:{}", key.0), key.1.clone());
                train_reprs.insert(merged.clone(), repr.clone());
                train_labels.insert(merged, labs[key]);
            }
        }
    }
    let train_keys: Vec<SceneMethodKey> = train_reprs.keys().cloned().collect();
    let model = fit_on_keys(&train_reprs, &train_labels, &train_keys, alpha)?;
    let test_keys: Vec<SceneMethodKey> = representations
        .get(test_id)
        .ok_or_else(|| Error::Eval(format!("no representations for dataset {test_id}")))?
        .keys()
        .filter(|k| labels.get(test_id).is_some_and(|l| l.contains_key(*k)))
        .cloned()
        .collect();
    Ok((model, test_keys))
}

/// Disk cache of extracted representations, keyed by checkpoint content
/// hash so stale entries from other checkpoints never match.
pub struct ReprCache {
    dir: PathBuf,
    checkpoint_hash: String,
}

#[derive(Serialize, Deserialize)]
struct CacheSidecar {
    checkpoint_hash: String,
    dim: usize,
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

impl ReprCache {
    pub fn new(dir: &Path, checkpoint_path: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            checkpoint_hash: file_sha256(checkpoint_path)?,
        })
    }

    fn paths(&self, key: &SceneMethodKey) -> (PathBuf, PathBuf) {
        let stem = format!("{}__{}", key.0, key.1);
        (
            self.dir.join(format!("{stem}.bin")),
            self.dir.join(format!("{stem}.json")),
        )
    }

    pub fn get(&self, key: &SceneMethodKey) -> Option<Array1<f32>> {
        let (bin, sidecar) = self.paths(key);
        let meta: CacheSidecar = serde_json::from_str(&fs::read_to_string(sidecar).ok()?).ok()?;
        if meta.checkpoint_hash != self.checkpoint_hash {
            return None;
        }
        let bytes = fs::read(bin).ok()?;
        if bytes.len() != meta.dim * 4 {
            return None;
        }
        Some(Array1::from_iter(
            bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])),
        ))
    }

    pub fn put(&self, key: &SceneMethodKey, repr: &Array1<f32>) -> Result<()> {
        let (bin, sidecar) = self.paths(key);
        let mut bytes = Vec::with_capacity(repr.len() * 4);
        for v in repr {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(&bin, bytes).map_err(|e| Error::io(&bin, e))?;
        let meta = CacheSidecar {
            checkpoint_hash: self.checkpoint_hash.clone(),
            dim: repr.len(),
        };
        fs::write(&sidecar, serde_json::to_string(&meta).unwrap())
            .map_err(|e| Error::io(&sidecar, e))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use ndarray::Array3;
    use rand::Rng;

    fn tiny_backbone(seed: u64) -> Backbone {
        Backbone::new(
            BackboneConfig {
                stage_channels: [2, 3, 4, 5],
                repr_dim: 8,
                transformer_layers: 1,
                attention_heads: 2,
                projector_hidden: 6,
                projector_out: 4,
                max_views: 4,
            },
            seed,
        )
        .unwrap()
    }

    fn noisy_views(seed: f32, n: usize) -> Vec<Array3<f32>> {
        (0..n)
            .map(|v| {
                Array3::from_shape_fn((20, 20, 3), |(y, x, c)| {
                    (0.5 + 0.4 * ((x * 3 + y * 7 + c + v) as f32 * 0.17 + seed).sin())
                        .clamp(0.0, 1.0)
                })
            })
            .collect()
    }

    #[test]
    fn extraction_is_deterministic_and_subsamples_long_sequences() {
        let backbone = tiny_backbone(0);
        let views = noisy_views(0.3, 7);
        let a = extract_views(&backbone, &views).unwrap();
        let b = extract_views(&backbone, &views).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 8);
        // 7 views against a limit of 4: evenly spaced picks.
        assert_eq!(subsample_indices(7, 4), vec![0, 2, 4, 6]);
        assert_eq!(subsample_indices(3, 4), vec![0, 1, 2]);
        // The subsampled representation equals extracting those views.
        let picked: Vec<Array3<f32>> = [0usize, 2, 4, 6].iter().map(|&i| views[i].clone()).collect();
        let direct = backbone.represent_inference(&picked).unwrap();
        assert_eq!(a, direct);
    }

    #[test]
    fn single_view_scene_extracts() {
        let backbone = tiny_backbone(1);
        let views = noisy_views(1.0, 1);
        let repr = extract_views(&backbone, &views).unwrap();
        assert!(repr.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn blurred_views_give_a_different_representation() {
        let backbone = tiny_backbone(2);
        let views = noisy_views(0.7, 3);
        let spec = crate::distortion::DistortionSpec::new(
            crate::distortion::DistortionKind::GaussianBlur,
            5,
        )
        .unwrap();
        let blurred: Vec<Array3<f32>> = views
            .iter()
            .map(|v| crate::distortion::apply_distortion(v, &spec, 0))
            .collect();
        let a = extract_views(&backbone, &views).unwrap();
        let b = extract_views(&backbone, &blurred).unwrap();
        let dist: f32 = (&a - &b).iter().map(|d| d * d).sum::<f32>().sqrt();
        assert!(dist > 0.0);
    }

    fn synthetic_regression_data(
        n: usize,
        dim: usize,
        seed: u64,
    ) -> (
        BTreeMap<SceneMethodKey, Array1<f32>>,
        BTreeMap<SceneMethodKey, f64>,
        Vec<f64>,
        f64,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w: Vec<f64> = (0..dim).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let b = rng.gen_range(-1.0..1.0);
        let mut reprs = BTreeMap::new();
        let mut labels = BTreeMap::new();
        for i in 0..n {
            let x = Array1::from_shape_fn(dim, |_| rng.gen_range(-1.0f32..1.0));
            let y: f64 = w
                .iter()
                .zip(x.iter())
                .map(|(wi, &xi)| wi * xi as f64)
                .sum::<f64>()
                + b;
            let key = (format!("scene_{:02}", i / 4), format!("m{}", i % 4));
            reprs.insert(key.clone(), x);
            labels.insert(key, y);
        }
        (reprs, labels, w, b)
    }

    #[test]
    fn exact_linear_labels_are_recovered_without_regularization() {
        let (reprs, labels, w, b) = synthetic_regression_data(40, 4, 7);
        let (model, held_out) = fit(&reprs, &labels, 11, 0.5, 0.0).unwrap();
        assert_eq!(held_out.len(), 20);
        assert_eq!(model.fitted_on.len(), 20);
        for (wi, mi) in w.iter().zip(&model.coefficients) {
            assert!((wi - mi).abs() < 1e-6, "{wi} vs {mi}");
        }
        assert!((model.intercept - b).abs() < 1e-6);
        for key in &held_out {
            let pred = predict(&model, &reprs[key]).unwrap();
            assert!((pred - labels[key]).abs() < 1e-8);
        }
    }

    #[test]
    fn splits_are_seed_deterministic_and_disjoint() {
        let (reprs, labels, _, _) = synthetic_regression_data(40, 4, 8);
        let (model_a, test_a) = fit(&reprs, &labels, 3, 0.5, 1e-3).unwrap();
        let (model_b, test_b) = fit(&reprs, &labels, 3, 0.5, 1e-3).unwrap();
        assert_eq!(test_a, test_b);
        assert_eq!(model_a.fitted_on, model_b.fitted_on);
        let train: BTreeSet<_> = model_a.fitted_on.iter().collect();
        assert!(test_a.iter().all(|k| !train.contains(k)));
        let (_, test_c) = fit(&reprs, &labels, 4, 0.5, 1e-3).unwrap();
        assert_ne!(test_a, test_c);
    }

    #[test]
    fn degenerate_fits_are_rejected() {
        let (reprs, labels, _, _) = synthetic_regression_data(8, 4, 9);
        let keys: Vec<SceneMethodKey> = reprs.keys().cloned().collect();
        assert!(fit_on_keys(&reprs, &labels, &keys[..2], 1e-3).is_err());
        // More features than samples with alpha = 0: singular normal
        // equations.
        let (wide, wide_labels, _, _) = synthetic_regression_data(6, 16, 10);
        let wide_keys: Vec<SceneMethodKey> = wide.keys().cloned().collect();
        assert!(fit_on_keys(&wide, &wide_labels, &wide_keys, 0.0).is_err());
        assert!(fit_on_keys(&wide, &wide_labels, &wide_keys, 1e-3).is_ok());
    }

    #[test]
    fn prediction_is_affine() {
        let model = RegressionModel {
            coefficients: vec![0.0, 0.0],
            intercept: 5.0,
            alpha: 0.0,
            fitted_on: Vec::new(),
        };
        assert_eq!(predict(&model, &ndarray::array![3.0f32, -2.0]).unwrap(), 5.0);
        let model = RegressionModel {
            coefficients: vec![2.0, -1.0],
            intercept: 0.5,
            alpha: 0.0,
            fitted_on: Vec::new(),
        };
        let x = ndarray::array![1.0f32, 4.0];
        let doubled = ndarray::array![2.0f32, 8.0];
        let p1 = predict(&model, &x).unwrap() - model.intercept;
        let p2 = predict(&model, &doubled).unwrap() - model.intercept;
        assert!((p2 - 2.0 * p1).abs() < 1e-12);
        assert!(predict(&model, &ndarray::array![1.0f32]).is_err());
    }

    #[test]
    fn cross_dataset_split_is_disjoint_and_validated() {
        let mut reprs = BTreeMap::new();
        let mut labels = BTreeMap::new();
        for (i, id) in ["a", "b", "c"].iter().enumerate() {
            let (r, l, _, _) = synthetic_regression_data(12, 4, 20 + i as u64);
            reprs.insert(id.to_string(), r);
            labels.insert(id.to_string(), l);
        }
        let train: BTreeSet<String> = ["a".to_string(), "b".to_string()].into();
        let (model, test_keys) = cross_dataset_fit(&reprs, &labels, &train, "c", 1e-3).unwrap();
        assert_eq!(test_keys.len(), 12);
        assert_eq!(model.fitted_on.len(), 24);
        assert!(model.fitted_on.iter().all(|k| !k.0.starts_with("c:")));
        let err = cross_dataset_fit(&reprs, &labels, &train, "a", 1e-3);
        assert!(err.is_err());
        let single: BTreeSet<String> = ["a".to_string()].into();
        assert!(cross_dataset_fit(&reprs, &labels, &single, "c", 1e-3).is_ok());
    }

    #[test]
    fn cache_hits_only_for_matching_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let ckpt_a = dir.path().join("a.json");
        let ckpt_b = dir.path().join("b.json");
        std::fs::write(&ckpt_a, "alpha").unwrap();
        std::fs::write(&ckpt_b, "beta").unwrap();
        let cache_dir = dir.path().join("cache");
        let key = ("scene".to_string(), "method".to_string());
        let repr = ndarray::array![1.0f32, -2.5, 0.125];

        let cache = ReprCache::new(&cache_dir, &ckpt_a).unwrap();
        assert!(cache.get(&key).is_none());
        cache.put(&key, &repr).unwrap();
        assert_eq!(cache.get(&key).unwrap(), repr);

        let other = ReprCache::new(&cache_dir, &ckpt_b).unwrap();
        assert!(other.get(&key).is_none());
    }
}
