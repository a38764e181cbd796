//! Acceptance gate: one test per criterion, each printing a PASS/FAIL line.
//! Run with `cargo test --test acceptance -- --nocapture` to see the lines.
//!
//! Checks are oracle-based: expected values are recomputed here from first
//! principles (definitional correlation formulas, hand gradient sums, known
//! closed forms) rather than by calling back into the code under test.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, resume_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::OnceLock;

use ndarray::{Array1, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sceneq_core::backbone::{Backbone, BackboneConfig};
use sceneq_core::distortion::{DistortionKind, DistortionSpec};
use sceneq_core::estimator;
use sceneq_core::guidance::{GuidanceBounds, GuidanceVector};
use sceneq_core::metrics;
use sceneq_core::objective::{
    self, BranchWeights, NoiseParams, PairGrads, ProjectedPair,
};
use sceneq_core::pairs::{self, PrepConfig};
use sceneq_core::plot::{self, ScenePanel};
use sceneq_core::scene::{load_dataset, load_views, DatasetIndex, SceneMethodKey};
use sceneq_core::synth::{self, SynthSpec};
use sceneq_core::trainer::{Objective, Session, TrainConfig};

fn report<F: FnOnce()>(num: u32, name: &str, check: F) {
    match catch_unwind(AssertUnwindSafe(check)) {
        Ok(()) => println!("ACCEPTANCE {num} ({name}): PASS"),
        Err(payload) => {
            println!("ACCEPTANCE {num} ({name}): FAIL");
            resume_unwind(payload);
        }
    }
}

// ---------------------------------------------------------------- helpers

fn blur_methods(severities: &[u8]) -> Vec<DistortionSpec> {
    severities
        .iter()
        .map(|&s| DistortionSpec::new(DistortionKind::GaussianBlur, s).unwrap())
        .collect()
}

/// Shared 4-scene x 4-method x 10-view synthetic set used by the slower
/// end-to-end criteria; generated once per process.
static TOY: OnceLock<tempfile::TempDir> = OnceLock::new();

fn toy_root() -> &'static Path {
    TOY.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec {
            n_scenes: 4,
            views_per_scene: 10,
            resolution: (128, 128),
            pseudo_methods: blur_methods(&[1, 2, 3, 4]),
            seed: 1234,
        };
        synth::generate(&spec, dir.path()).unwrap();
        dir
    })
    .path()
}

fn toy_index() -> DatasetIndex {
    load_dataset(toy_root(), Some(&toy_root().join("labels.json"))).unwrap()
}

fn small_backbone() -> BackboneConfig {
    BackboneConfig {
        stage_channels: [8, 16, 32, 64],
        repr_dim: 64,
        transformer_layers: 2,
        attention_heads: 2,
        projector_hidden: 64,
        projector_out: 32,
        max_views: 16,
    }
}

fn tiny_backbone() -> BackboneConfig {
    BackboneConfig {
        stage_channels: [4, 8, 16, 32],
        repr_dim: 32,
        transformer_layers: 1,
        attention_heads: 2,
        projector_hidden: 32,
        projector_out: 16,
        max_views: 8,
    }
}

fn random_vec(rng: &mut impl Rng, dim: usize) -> Array1<f32> {
    Array1::from_iter((0..dim).map(|_| rng.gen_range(-1.0f32..1.0)))
}

/// Definitional cosine with the same documented norm floor.
fn oracle_cosine(u: &Array1<f32>, v: &Array1<f32>) -> f64 {
    let mut dot = 0.0f64;
    let mut nu = 0.0f64;
    let mut nv = 0.0f64;
    for (a, b) in u.iter().zip(v.iter()) {
        let (a, b) = (*a as f64, *b as f64);
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    dot / ((nu.sqrt() + 1e-12) * (nv.sqrt() + 1e-12))
}

fn extract_reprs(
    backbone: &Backbone,
    index: &DatasetIndex,
) -> BTreeMap<SceneMethodKey, Array1<f32>> {
    let mut reprs = BTreeMap::new();
    for key in index.keys() {
        let n = index.n_views(&key.0, &key.1).unwrap();
        let indices: Vec<usize> = (0..n).collect();
        let views = load_views(index, &key.0, &key.1, &indices).unwrap();
        let pixels: Vec<Array3<f32>> = views.into_iter().map(|v| v.pixels).collect();
        reprs.insert(key, estimator::extract_views(backbone, &pixels).unwrap());
    }
    reprs
}

// --------------------------------------------------------------- criteria

#[test]
fn acceptance_01_loss_formula_fidelity() {
    report(1, "loss-formula-fidelity", || {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let half_log_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
        for _ in 0..100 {
            let u = random_vec(&mut rng, 8);
            let v = random_vec(&mut rng, 8);
            let target = rng.gen_range(-1.0f64..=1.0);
            let log_sigma = rng.gen_range(-1.5f64..1.0);
            let sigma = log_sigma.exp();
            let sim = oracle_cosine(&u, &v);
            let e = sim - target;

            let expected_mbw = e.abs();
            let got_mbw = objective::mbw_branch_loss(&u, &v, target).unwrap();
            assert!(
                (got_mbw - expected_mbw).abs() <= 1e-12,
                "mbw {got_mbw} vs {expected_mbw}"
            );

            let expected_aqb = e * e / (2.0 * sigma * sigma) + log_sigma;
            let got_aqb = objective::aqb_branch_loss(&u, &v, target, log_sigma).unwrap();
            assert!(
                (got_aqb - expected_aqb).abs() <= 1e-12,
                "aqb {got_aqb} vs {expected_aqb}"
            );

            // Shifting by half the log-normalizer recovers the Gaussian
            // negative log-density of the residual.
            let nll = 0.5 * (e / sigma).powi(2) + sigma.ln() + half_log_2pi;
            assert!(
                (got_aqb + half_log_2pi - nll).abs() <= 1e-12,
                "aqb+c {} vs nll {nll}",
                got_aqb + half_log_2pi
            );
        }
    });
}

#[test]
fn acceptance_02_aqb_stationarity() {
    report(2, "aqb-stationarity", || {
        for &e in &[0.1f64, 0.5, 1.0] {
            // Unit vectors at angle acos(e): similarity is e exactly (up to
            // the 1e-12 norm floor), targets zero freeze the residual at e.
            let u = Array1::from_vec(vec![1.0f32, 0.0]);
            let v = Array1::from_vec(vec![e as f32, (1.0 - e * e).max(0.0).sqrt() as f32]);
            let pair = ProjectedPair {
                p1: [u.clone(), u.clone(), u.clone()],
                p2: [v.clone(), v.clone(), v.clone()],
                guidance: GuidanceVector {
                    psi_iqa: 0.0,
                    psi_vqa: 0.0,
                    psi_rep: 0.0,
                },
            };
            let residual = objective::cosine_sim(&u, &v).unwrap();

            let mut noise = NoiseParams::default();
            *noise.values_mut() = [0.7; 3];
            let eta = 0.01;
            let mut steps = 0;
            for step in 1..=5000 {
                noise.zero_grads();
                objective::aqb_total(std::slice::from_ref(&pair), &mut noise).unwrap();
                let grads = noise.grad;
                for (value, grad) in noise.values_mut().iter_mut().zip(grads) {
                    *value -= eta * grad;
                }
                steps = step;
                if noise
                    .values()
                    .iter()
                    .all(|&ls| (ls.exp() - residual.abs()).abs() < 1e-3)
                {
                    break;
                }
            }
            let sigma = noise.values()[0].exp();
            assert!(
                (sigma - residual.abs()).abs() < 1e-3,
                "e={e}: sigma {sigma} not within 1e-3 of {} after {steps} steps",
                residual.abs()
            );
            assert!(steps <= 5000, "e={e}: did not converge in 5000 steps");
        }
    });
}

#[test]
fn acceptance_03_gradient_checks() {
    report(3, "gradient-checks", || {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dim = 6;

        let make_pair = |rng: &mut ChaCha8Rng| {
            let p1 = [
                random_vec(rng, dim),
                random_vec(rng, dim),
                random_vec(rng, dim),
            ];
            let p2 = [
                random_vec(rng, dim),
                random_vec(rng, dim),
                random_vec(rng, dim),
            ];
            // Targets offset from the realized similarity so no branch sits
            // on the non-smooth point of |e| and finite differences behave.
            let mut psi = [0.0f64; 3];
            for b in 0..3 {
                let sim = oracle_cosine(&p1[b], &p2[b]);
                let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                let delta = sign * rng.gen_range(0.1f64..0.6);
                psi[b] = (sim - delta).clamp(-1.0, 1.0);
                assert!((sim - psi[b]).abs() > 0.01, "degenerate residual");
            }
            ProjectedPair {
                p1,
                p2,
                guidance: GuidanceVector {
                    psi_iqa: psi[0],
                    psi_vqa: psi[1],
                    psi_rep: psi[2],
                },
            }
        };

        let rel_check = |analytic: f64, fd: f64, what: &str| {
            let denom = analytic.abs().max(fd.abs());
            if denom < 1e-7 {
                return;
            }
            let rel = (analytic - fd).abs() / denom;
            assert!(rel < 1e-4, "{what}: analytic {analytic} fd {fd} rel {rel}");
        };

        // Central difference over one f32 projection coordinate, dividing by
        // the realized (representable) step.
        let fd_projection = |pairs: &[ProjectedPair],
                             loss: &dyn Fn(&[ProjectedPair]) -> f64,
                             pi: usize,
                             side: usize,
                             bi: usize,
                             ci: usize| {
            let mut work = pairs.to_vec();
            let base = if side == 0 {
                work[pi].p1[bi][ci]
            } else {
                work[pi].p2[bi][ci]
            };
            let plus = base + 1e-5f32;
            let minus = base - 1e-5f32;
            let slot = |w: &mut Vec<ProjectedPair>, x: f32| {
                if side == 0 {
                    w[pi].p1[bi][ci] = x;
                } else {
                    w[pi].p2[bi][ci] = x;
                }
            };
            slot(&mut work, plus);
            let lp = loss(&work);
            slot(&mut work, minus);
            let lm = loss(&work);
            (lp - lm) / (plus as f64 - minus as f64)
        };

        for instance in 0..10 {
            let pairs: Vec<ProjectedPair> =
                (0..2).map(|_| make_pair(&mut rng)).collect();
            let weights = BranchWeights {
                lambda_iqa: rng.gen_range(0.2..2.0),
                lambda_vqa: rng.gen_range(0.2..2.0),
                lambda_rep: rng.gen_range(0.2..2.0),
            };
            let log_sigmas = [
                rng.gen_range(-0.5f64..0.5),
                rng.gen_range(-0.5f64..0.5),
                rng.gen_range(-0.5f64..0.5),
            ];

            let mbw_loss = |ps: &[ProjectedPair]| -> f64 {
                objective::mbw_batch(ps, &weights).unwrap().0.total
            };
            let aqb_loss = |ps: &[ProjectedPair]| -> f64 {
                let mut noise = NoiseParams::default();
                *noise.values_mut() = log_sigmas;
                objective::aqb_total(ps, &mut noise).unwrap().0.total
            };

            let (_, mbw_grads) = objective::mbw_batch(&pairs, &weights).unwrap();
            let mut noise = NoiseParams::default();
            *noise.values_mut() = log_sigmas;
            let (_, aqb_grads) = objective::aqb_total(&pairs, &mut noise).unwrap();

            let pick = |grads: &[PairGrads], pi: usize, side: usize, bi: usize, ci: usize| {
                if side == 0 {
                    grads[pi].d_p1[bi][ci] as f64
                } else {
                    grads[pi].d_p2[bi][ci] as f64
                }
            };

            for pi in 0..pairs.len() {
                for side in 0..2 {
                    for bi in 0..3 {
                        for ci in 0..dim {
                            let fd = fd_projection(&pairs, &mbw_loss, pi, side, bi, ci);
                            rel_check(
                                pick(&mbw_grads, pi, side, bi, ci),
                                fd,
                                &format!("mbw i{instance} p{pi} s{side} b{bi} c{ci}"),
                            );
                            let fd = fd_projection(&pairs, &aqb_loss, pi, side, bi, ci);
                            rel_check(
                                pick(&aqb_grads, pi, side, bi, ci),
                                fd,
                                &format!("aqb i{instance} p{pi} s{side} b{bi} c{ci}"),
                            );
                        }
                    }
                }
            }

            // log_sigma gradients, pure f64 central difference.
            for bi in 0..3 {
                let step = 1e-5f64;
                let eval = |ls: [f64; 3]| -> f64 {
                    let mut noise = NoiseParams::default();
                    *noise.values_mut() = ls;
                    objective::aqb_total(&pairs, &mut noise).unwrap().0.total
                };
                let mut up = log_sigmas;
                up[bi] += step;
                let mut down = log_sigmas;
                down[bi] -= step;
                let fd = (eval(up) - eval(down)) / (2.0 * step);
                rel_check(noise.grad[bi], fd, &format!("log_sigma i{instance} b{bi}"));
            }
        }
    });
}

#[test]
fn acceptance_04_pair_prep_invariants() {
    report(4, "pair-prep-invariants", || {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec {
            n_scenes: 3,
            views_per_scene: 12,
            resolution: (48, 56),
            pseudo_methods: blur_methods(&[1, 3, 5]),
            seed: 11,
        };
        synth::generate(&spec, dir.path()).unwrap();
        let index = load_dataset(dir.path(), Some(&dir.path().join("labels.json"))).unwrap();
        let prep = PrepConfig {
            clip_len_min: 2,
            clip_len_max: 6,
            crop_min: 24,
            crop_max: 40,
        };

        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let recipes: Vec<_> = (0..1000)
            .map(|_| pairs::sample_recipe(&index, &mut rng, &prep).unwrap())
            .collect();

        let mut rs = Vec::with_capacity(recipes.len());
        for recipe in &recipes {
            assert_ne!(recipe.base_method_id, recipe.replacement_method_id);
            assert!(
                (0.0..0.5).contains(&recipe.r),
                "r {} outside [0, 0.5)",
                recipe.r
            );
            let v = recipe.view_indices.len();
            assert!((prep.clip_len_min..=prep.clip_len_max).contains(&v));
            let expected = pairs::round_half_away(recipe.r * v as f64);
            assert_eq!(
                recipe.replaced_indices.len(),
                expected,
                "replaced {} != round({} * {v})",
                recipe.replaced_indices.len(),
                recipe.r
            );
            rs.push(recipe.r);
        }

        // Definitional one-sample KS statistic of r against U(0, 0.5).
        rs.sort_by(f64::total_cmp);
        let n = rs.len() as f64;
        let mut d = 0.0f64;
        for (i, &r) in rs.iter().enumerate() {
            let cdf = (r / 0.5).clamp(0.0, 1.0);
            d = d.max(((i + 1) as f64 / n - cdf).abs());
            d = d.max((cdf - i as f64 / n).abs());
        }
        let critical = 1.628 / n.sqrt();
        assert!(d < critical, "KS statistic {d} >= {critical} at alpha=0.01");

        // Realization invariants on a subset: same scene, equal clip shape.
        for recipe in recipes.iter().take(50) {
            let pair = pairs::realize_pair(&index, recipe).unwrap();
            assert_eq!(pair.s1.len(), recipe.view_indices.len());
            assert_eq!(pair.s2.len(), pair.s1.len());
            let shape = pair.s1[0].dim();
            for view in pair.s1.iter().chain(&pair.s2) {
                assert_eq!(view.dim(), shape);
            }
            // Orientation may transpose the crop, so compare as a set.
            let mut got = [shape.0, shape.1];
            let mut want = [recipe.crop.height, recipe.crop.width];
            got.sort_unstable();
            want.sort_unstable();
            assert_eq!(got, want);
            assert_eq!(shape.2, 3);
        }

        // Manifest replay: identical bytes on rewrite, identical recipes on
        // read-back, identical pixels on re-realization.
        let manifest_a = dir.path().join("recipes_a.jsonl");
        let manifest_b = dir.path().join("recipes_b.jsonl");
        pairs::write_recipes(&recipes, &manifest_a).unwrap();
        pairs::write_recipes(&recipes, &manifest_b).unwrap();
        assert_eq!(
            std::fs::read(&manifest_a).unwrap(),
            std::fs::read(&manifest_b).unwrap()
        );
        let replayed = pairs::read_recipes(&manifest_a).unwrap();
        assert_eq!(replayed, recipes);
        for (original, replay) in recipes.iter().zip(&replayed).take(10) {
            let a = pairs::realize_pair(&index, original).unwrap();
            let b = pairs::realize_pair(&index, replay).unwrap();
            assert_eq!(a.s1, b.s1);
            assert_eq!(a.s2, b.s2);
        }
    });
}

#[test]
fn acceptance_05_pair_budget() {
    report(5, "pair-budget", || {
        let budget = pairs::pair_budget(10, 300, 5, 5, 20);
        assert_eq!(budget, num_bigint::BigUint::from(18_000_000u64));
    });
}

#[test]
fn acceptance_06_metric_oracles() {
    report(6, "metric-oracles", || {
        fn bf_ranks(x: &[f64]) -> Vec<f64> {
            let n = x.len();
            let mut idx: Vec<usize> = (0..n).collect();
            idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
            let mut ranks = vec![0.0; n];
            let mut i = 0;
            while i < n {
                let mut j = i;
                while j + 1 < n && x[idx[j + 1]] == x[idx[i]] {
                    j += 1;
                }
                let avg = (i + j + 2) as f64 / 2.0;
                for &k in &idx[i..=j] {
                    ranks[k] = avg;
                }
                i = j + 1;
            }
            ranks
        }
        fn bf_pearson(x: &[f64], y: &[f64]) -> Option<f64> {
            let n = x.len() as f64;
            let mx = x.iter().sum::<f64>() / n;
            let my = y.iter().sum::<f64>() / n;
            let mut sxy = 0.0;
            let mut sxx = 0.0;
            let mut syy = 0.0;
            for (&a, &b) in x.iter().zip(y) {
                sxy += (a - mx) * (b - my);
                sxx += (a - mx) * (a - mx);
                syy += (b - my) * (b - my);
            }
            if sxx == 0.0 || syy == 0.0 {
                return None;
            }
            Some(sxy / (sxx * syy).sqrt())
        }
        fn bf_kendall(x: &[f64], y: &[f64]) -> Option<f64> {
            let n = x.len();
            let (mut c, mut d, mut tx, mut ty) = (0.0f64, 0.0, 0.0, 0.0);
            for i in 0..n {
                for j in i + 1..n {
                    let sx = x[i].total_cmp(&x[j]);
                    let sy = y[i].total_cmp(&y[j]);
                    use std::cmp::Ordering::Equal;
                    match (sx, sy) {
                        (Equal, Equal) => {}
                        (Equal, _) => ty += 1.0,
                        (_, Equal) => tx += 1.0,
                        (a, b) if a == b => c += 1.0,
                        _ => d += 1.0,
                    }
                }
            }
            let denom = ((c + d + tx) * (c + d + ty)).sqrt();
            if denom == 0.0 {
                return None;
            }
            Some((c - d) / denom)
        }

        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut checked = 0;
        while checked < 200 {
            let n = rng.gen_range(3..=50);
            let quantize = rng.gen_bool(0.5);
            let draw = |rng: &mut ChaCha8Rng| -> Vec<f64> {
                (0..n)
                    .map(|_| {
                        let v = rng.gen_range(0.0f64..1.0);
                        if quantize {
                            (v * 10.0).round() / 10.0
                        } else {
                            v
                        }
                    })
                    .collect()
            };
            let x = draw(&mut rng);
            let y = draw(&mut rng);
            let (Some(p), Some(k), Some(s)) = (
                bf_pearson(&x, &y),
                bf_kendall(&x, &y),
                bf_pearson(&bf_ranks(&x), &bf_ranks(&y)),
            ) else {
                continue; // degenerate draw; the modules' 0-return path has
                          // its own unit coverage
            };
            checked += 1;
            assert!((metrics::plcc(&x, &y).unwrap() - p).abs() <= 1e-9);
            assert!((metrics::srcc(&x, &y).unwrap() - s).abs() <= 1e-9);
            assert!((metrics::krcc(&x, &y).unwrap() - k).abs() <= 1e-9);
        }

        let x = [1.0, 2.0, 3.0];
        let y = [1.0, 3.0, 2.0];
        assert_eq!(metrics::srcc(&x, &y).unwrap(), 0.5);
        assert_eq!(metrics::krcc(&x, &y).unwrap(), 1.0 / 3.0);
    });
}

#[test]
fn acceptance_07_backbone_sweep() {
    report(7, "backbone-sweep", || {
        let backbone = Backbone::new(BackboneConfig::default(), 0).unwrap();
        let params = backbone.config.parameter_count();
        assert!(
            (3_500_000..=6_000_000).contains(&params),
            "parameter count {params} outside [3.5M, 6M]"
        );

        let make_view = |h: usize, w: usize, k: usize| -> Array3<f32> {
            Array3::from_shape_fn((h, w, 3), |(y, x, c)| {
                0.5 + 0.4
                    * (x as f32 * 0.13 + y as f32 * 0.07 + (k * 3 + c) as f32).sin()
            })
        };

        let mut dims = BTreeSet::new();
        for &(h, w) in &[(96usize, 96usize), (128, 160), (256, 256)] {
            for &views in &[1usize, 4, 8, 16, 32] {
                let clip: Vec<Array3<f32>> =
                    (0..views).map(|k| make_view(h, w, k)).collect();
                let repr = backbone.represent_inference(&clip).unwrap();
                assert!(
                    repr.iter().all(|v| v.is_finite()),
                    "non-finite output at {h}x{w}, V={views}"
                );
                dims.insert(repr.len());
            }
        }
        assert_eq!(dims.len(), 1, "output dimension varies: {dims:?}");
        assert_eq!(dims.into_iter().next(), Some(256));
    });
}

#[test]
fn acceptance_08_toy_end_to_end() {
    report(8, "toy-end-to-end", || {
        let index = toy_index();
        let labels = index.labels().clone();
        let out = tempfile::tempdir().unwrap();
        let config = TrainConfig {
            batch_size: 8,
            objective: Objective::Aqb,
            seed: 7,
            checkpoint_every: 0,
            ..TrainConfig::default()
        };
        let prep = PrepConfig {
            clip_len_min: 3,
            clip_len_max: 4,
            crop_min: 48,
            crop_max: 64,
        };
        let mut session = Session::new(
            index.clone(),
            config,
            prep,
            small_backbone(),
            GuidanceBounds::default(),
            out.path(),
        )
        .unwrap();
        let steps = 600;
        assert!(steps <= 3000);
        for _ in 0..steps {
            session.step().unwrap();
        }

        let reprs = extract_reprs(session.backbone(), &index);
        let (model, test_keys) =
            estimator::fit(&reprs, &labels, 5, 0.5, estimator::DEFAULT_RIDGE_ALPHA).unwrap();
        let mut predictions = BTreeMap::new();
        let mut test_labels = BTreeMap::new();
        for key in &test_keys {
            predictions.insert(key.clone(), estimator::predict(&model, &reprs[key]).unwrap());
            test_labels.insert(key.clone(), labels[key]);
        }
        let report = metrics::scene_wise_report(&predictions, &test_labels).unwrap();
        let mean_srcc = report.aggregate.srcc.mean;
        println!(
            "        toy run: {} steps, {} eval scenes, mean SRCC {mean_srcc:.3}",
            steps, report.aggregate.n_scenes
        );
        assert!(
            mean_srcc >= 0.8,
            "held-out scene-wise SRCC mean {mean_srcc} < 0.8"
        );
    });
}

#[test]
fn acceptance_09_sigma_adaptation() {
    report(9, "sigma-adaptation", || {
        let index = toy_index();
        let out = tempfile::tempdir().unwrap();
        let config = TrainConfig {
            batch_size: 4,
            objective: Objective::Aqb,
            seed: 3,
            checkpoint_every: 0,
            ..TrainConfig::default()
        };
        let prep = PrepConfig {
            clip_len_min: 2,
            clip_len_max: 2,
            crop_min: 32,
            crop_max: 32,
        };
        let mut session = Session::new(
            index,
            config,
            prep,
            tiny_backbone(),
            GuidanceBounds::default(),
            out.path(),
        )
        .unwrap();
        // Decouple the replacement targets from the clips they describe;
        // that branch's residual cannot shrink, so its noise scale should
        // stay above the learnable-signal branches'.
        session.shuffle_rep_targets = true;

        let sigmas = |session: &Session| {
            let values = session.noise().values();
            (values[2].exp(), values[0].exp())
        };
        let mut exceeded_at = None;
        for step in 1..=1000 {
            session.step().unwrap();
            let (sigma_rep, sigma_iqa) = sigmas(&session);
            if sigma_rep > sigma_iqa + 0.05 {
                exceeded_at = Some((step, sigma_rep, sigma_iqa));
                break;
            }
        }
        let (step, sigma_rep, sigma_iqa) =
            exceeded_at.expect("sigma_rep never exceeded sigma_iqa in 1000 steps");
        println!(
            "        sigma_rep {sigma_rep:.3} > sigma_iqa {sigma_iqa:.3} at step {step}"
        );
        // The ordering should persist, not be a transient blip.
        for _ in 0..50 {
            session.step().unwrap();
        }
        let (sigma_rep, sigma_iqa) = sigmas(&session);
        assert!(
            sigma_rep > sigma_iqa,
            "ordering reversed 50 steps later: rep {sigma_rep} iqa {sigma_iqa}"
        );
    });
}

#[test]
fn acceptance_10_bradley_terry_recovery() {
    report(10, "bradley-terry-recovery", || {
        // Known strengths, simulated duels, fixed seed.
        let strengths = [1.0f64, 0.7, 0.5, 0.3, 0.15];
        let items: Vec<String> = (0..5).map(|i| format!("m{i}")).collect();
        let mut table = metrics::PairwisePreferenceTable::new(items);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for i in 0..5 {
            for j in i + 1..5 {
                for _ in 0..200 {
                    let p = strengths[i] / (strengths[i] + strengths[j]);
                    if rng.gen_bool(p) {
                        table.wins[i][j] += 1;
                    } else {
                        table.wins[j][i] += 1;
                    }
                }
            }
        }
        let outcome = metrics::bradley_terry(
            &table,
            metrics::BT_DEFAULT_MAX_ITERS,
            metrics::BT_DEFAULT_TOL,
        )
        .unwrap();
        for window in outcome.log_likelihood_trace.windows(2) {
            assert!(
                window[1] >= window[0] - 1e-12,
                "log-likelihood decreased: {} -> {}",
                window[0],
                window[1]
            );
        }
        let mut recovered: Vec<(String, f64)> =
            outcome.scores.clone().into_iter().collect();
        recovered.sort_by(|a, b| b.1.total_cmp(&a.1));
        let order: Vec<String> = recovered.into_iter().map(|(name, _)| name).collect();
        assert_eq!(order, ["m0", "m1", "m2", "m3", "m4"]);

        // Two items, 3:1 record: closed-form scores.
        let mut small = metrics::PairwisePreferenceTable::new(vec!["a".into(), "b".into()]);
        small.wins[0][1] = 3;
        small.wins[1][0] = 1;
        let outcome = metrics::bradley_terry(&small, 100, 1e-12).unwrap();
        assert_eq!(outcome.scores["a"], 0.75);
        assert_eq!(outcome.scores["b"], 0.25);
    });
}

#[test]
fn acceptance_11_protocol_plumbing() {
    report(11, "protocol-plumbing", || {
        // Three small datasets, one frozen backbone.
        let dirs: Vec<tempfile::TempDir> = [101u64, 202, 303]
            .iter()
            .map(|&seed| {
                let dir = tempfile::tempdir().unwrap();
                let spec = SynthSpec {
                    n_scenes: 3,
                    views_per_scene: 4,
                    resolution: (64, 64),
                    pseudo_methods: blur_methods(&[1, 3, 5]),
                    seed,
                };
                synth::generate(&spec, dir.path()).unwrap();
                dir
            })
            .collect();
        let backbone = Backbone::new(small_backbone(), 0).unwrap();

        let run = |plot_path: &Path| -> (String, String, Vec<u8>) {
            let mut reprs_by_dataset = BTreeMap::new();
            let mut labels_by_dataset = BTreeMap::new();
            for (i, dir) in dirs.iter().enumerate() {
                let index =
                    load_dataset(dir.path(), Some(&dir.path().join("labels.json"))).unwrap();
                let id = format!("d{i}");
                reprs_by_dataset.insert(id.clone(), extract_reprs(&backbone, &index));
                labels_by_dataset.insert(id, index.labels().clone());
            }

            // Half-split protocol on the first dataset.
            let reprs = &reprs_by_dataset["d0"];
            let labels = &labels_by_dataset["d0"];
            let (model, test_keys) =
                estimator::fit(reprs, labels, 17, 0.5, estimator::DEFAULT_RIDGE_ALPHA).unwrap();
            for key in &test_keys {
                assert!(
                    !model.fitted_on.contains(key),
                    "test key {key:?} was used for fitting"
                );
            }
            let mut predictions = BTreeMap::new();
            let mut test_labels = BTreeMap::new();
            for key in &test_keys {
                predictions
                    .insert(key.clone(), estimator::predict(&model, &reprs[key]).unwrap());
                test_labels.insert(key.clone(), labels[key]);
            }
            let split_report = metrics::scene_wise_report(&predictions, &test_labels).unwrap();

            // Plot the evaluated scenes; slope signs must agree with the
            // per-scene SRCC signs the report carries.
            let panels: Vec<ScenePanel> = split_report
                .per_scene
                .keys()
                .map(|scene| ScenePanel {
                    scene: scene.clone(),
                    points: predictions
                        .iter()
                        .filter(|(key, _)| &key.0 == scene)
                        .map(|(key, &pred)| (test_labels[key], pred))
                        .collect(),
                })
                .collect();
            let summary = plot::scatter_grid(&panels, "half split", plot_path).unwrap();
            let positive_srcc = split_report
                .per_scene
                .values()
                .filter(|m| m.srcc > 0.0)
                .count();
            assert_eq!(
                summary.positive_slopes, positive_srcc,
                "plot says {} positive scenes, report says {positive_srcc}",
                summary.positive_slopes
            );

            // Cross-dataset protocol: fit on d0+d1, test on d2.
            let train_ids: BTreeSet<String> = ["d0".to_string(), "d1".to_string()].into();
            let (model, test_keys) = estimator::cross_dataset_fit(
                &reprs_by_dataset,
                &labels_by_dataset,
                &train_ids,
                "d2",
                estimator::DEFAULT_RIDGE_ALPHA,
            )
            .unwrap();
            for key in &test_keys {
                assert!(!model.fitted_on.contains(key));
            }
            let mut predictions = BTreeMap::new();
            let mut test_labels = BTreeMap::new();
            for key in &test_keys {
                predictions.insert(
                    key.clone(),
                    estimator::predict(&model, &reprs_by_dataset["d2"][key]).unwrap(),
                );
                test_labels.insert(key.clone(), labels_by_dataset["d2"][key]);
            }
            let cross_report = metrics::scene_wise_report(&predictions, &test_labels).unwrap();

            (
                serde_json::to_string(&split_report).unwrap(),
                serde_json::to_string(&cross_report).unwrap(),
                std::fs::read(plot_path).unwrap(),
            )
        };

        let scratch = tempfile::tempdir().unwrap();
        let first = run(&scratch.path().join("a.svg"));
        let second = run(&scratch.path().join("b.svg"));
        assert_eq!(first.0, second.0, "half-split report not reproducible");
        assert_eq!(first.1, second.1, "cross-dataset report not reproducible");
        assert_eq!(first.2, second.2, "plot bytes not reproducible");
    });
}

#[test]
fn acceptance_12_checkpoint_roundtrip() {
    report(12, "checkpoint-round-trip", || {
        let index = toy_index();
        let out_a = tempfile::tempdir().unwrap();
        let out_b = tempfile::tempdir().unwrap();
        let config = TrainConfig {
            batch_size: 4,
            objective: Objective::Aqb,
            seed: 21,
            checkpoint_every: 0,
            ..TrainConfig::default()
        };
        let prep = PrepConfig {
            clip_len_min: 2,
            clip_len_max: 2,
            crop_min: 32,
            crop_max: 32,
        };
        let mut session = Session::new(
            index.clone(),
            config,
            prep,
            tiny_backbone(),
            GuidanceBounds::default(),
            out_a.path(),
        )
        .unwrap();
        session.step().unwrap();
        session.step().unwrap();
        let ckpt = session.save_checkpoint("ck.json").unwrap();

        let uninterrupted = session.step().unwrap();
        let mut resumed = Session::from_checkpoint(&ckpt, index, out_b.path()).unwrap();
        let restarted = resumed.step().unwrap();

        assert!(
            (uninterrupted.total - restarted.total).abs() <= 1e-10,
            "third-step loss diverged: {} vs {}",
            uninterrupted.total,
            restarted.total
        );
        assert_eq!(session.step_count(), resumed.step_count());
    });
}
