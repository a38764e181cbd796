//! Rank and linear correlation metrics, scene-wise evaluation reports,
//! Bradley-Terry scaling of pairwise preferences, and clip-score variance
//! analysis.
//!
//! Tie conventions: Spearman uses average ranks; Kendall is the
//! tie-corrected tau-b; any metric whose denominator degenerates (a
//! constant input) returns 0 with a warning instead of NaN. Aggregate
//! spreads are sample standard deviations (n-1).

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::SceneMethodKey;

fn check_lengths(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::Eval(format!(
            "metric inputs differ in length: {} vs {}",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 2 {
        return Err(Error::Eval(format!(
            "metric needs at least 2 points, got {}",
            x.len()
        )));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::Eval("metric inputs must be finite".to_string()));
    }
    Ok(())
}

/// Ranks with ties sharing their average rank (1-indexed).
fn average_ranks(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        // Positions i..=j (0-based) share the mean of ranks i+1..=j+1.
        let shared = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = shared;
        }
        i = j + 1;
    }
    ranks
}

fn pearson_raw(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (xi, yi) in x.iter().zip(y) {
        let dx = xi - mx;
        let dy = yi - my;
        cov += dx * dy;
        vx += dx * dx;
        vy += dy * dy;
    }
    if vx == 0.0 || vy == 0.0 {
        log::warn!("constant input to a correlation metric; returning 0");
        return 0.0;
    }
    (cov / (vx * vy).sqrt()).clamp(-1.0, 1.0)
}

/// Pearson linear correlation.
pub fn plcc(x: &[f64], y: &[f64]) -> Result<f64> {
    check_lengths(x, y)?;
    Ok(pearson_raw(x, y))
}

/// Spearman rank correlation: Pearson over average ranks.
pub fn srcc(x: &[f64], y: &[f64]) -> Result<f64> {
    check_lengths(x, y)?;
    Ok(pearson_raw(&average_ranks(x), &average_ranks(y)))
}

/// Kendall rank correlation, tau-b.
pub fn krcc(x: &[f64], y: &[f64]) -> Result<f64> {
    check_lengths(x, y)?;
    let n = x.len();
    let (mut concordant, mut discordant, mut ties_x, mut ties_y) = (0i64, 0i64, 0i64, 0i64);
    for i in 0..n {
        for j in i + 1..n {
            let dx = x[i] - x[j];
            let dy = y[i] - y[j];
            if dx == 0.0 && dy == 0.0 {
                continue;
            } else if dx == 0.0 {
                ties_x += 1;
            } else if dy == 0.0 {
                ties_y += 1;
            } else if (dx > 0.0) == (dy > 0.0) {
                concordant += 1;
            } else {
                discordant += 1;
            }
        }
    }
    let denom = (((concordant + discordant + ties_x) as f64)
        * ((concordant + discordant + ties_y) as f64))
        .sqrt();
    if denom == 0.0 {
        log::warn!("constant input to a correlation metric; returning 0");
        return Ok(0.0);
    }
    Ok(((concordant - discordant) as f64 / denom).clamp(-1.0, 1.0))
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Sample standard deviation (n-1); 0 for fewer than two values.
pub fn sample_std(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = mean(values);
    (values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (values.len() - 1) as f64).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneMetrics {
    pub srcc: f64,
    pub plcc: f64,
    pub krcc: f64,
    pub n_methods: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub srcc: MeanStd,
    pub plcc: MeanStd,
    pub krcc: MeanStd,
    pub n_scenes: usize,
}

/// Per-scene correlations plus their across-scene mean and sample std.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_scene: BTreeMap<String, SceneMetrics>,
    pub aggregate: AggregateMetrics,
}

/// Correlations within each scene's method set, aggregated across scenes.
/// Scenes with fewer than two keys present in both maps are skipped with
/// a warning.
pub fn scene_wise_report(
    predictions: &BTreeMap<SceneMethodKey, f64>,
    labels: &BTreeMap<SceneMethodKey, f64>,
) -> Result<EvalReport> {
    let mut by_scene: BTreeMap<&str, Vec<(f64, f64)>> = BTreeMap::new();
    for (key, pred) in predictions {
        if let Some(label) = labels.get(key) {
            by_scene.entry(&key.0).or_default().push((*pred, *label));
        }
    }
    if by_scene.is_empty() {
        return Err(Error::Eval(
            "predictions and labels share no keys".to_string(),
        ));
    }
    let mut per_scene = BTreeMap::new();
    for (scene, points) in by_scene {
        if points.len() < 2 {
            log::warn!("scene {scene} has fewer than 2 labeled methods; skipped");
            continue;
        }
        let preds: Vec<f64> = points.iter().map(|p| p.0).collect();
        let labs: Vec<f64> = points.iter().map(|p| p.1).collect();
        per_scene.insert(
            scene.to_string(),
            SceneMetrics {
                srcc: srcc(&preds, &labs)?,
                plcc: plcc(&preds, &labs)?,
                krcc: krcc(&preds, &labs)?,
                n_methods: points.len(),
            },
        );
    }
    if per_scene.is_empty() {
        return Err(Error::Eval(
            "no scene has at least 2 labeled methods".to_string(),
        ));
    }
    let collect = |f: fn(&SceneMetrics) -> f64| -> MeanStd {
        let values: Vec<f64> = per_scene.values().map(f).collect();
        MeanStd {
            mean: mean(&values),
            std: sample_std(&values),
        }
    };
    let aggregate = AggregateMetrics {
        srcc: collect(|m| m.srcc),
        plcc: collect(|m| m.plcc),
        krcc: collect(|m| m.krcc),
        n_scenes: per_scene.len(),
    };
    Ok(EvalReport {
        per_scene,
        aggregate,
    })
}

/// `scene,srcc,plcc,krcc,n` rows.
pub fn write_report_csv(report: &EvalReport, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "scene,srcc,plcc,krcc,n").map_err(|e| Error::io(path, e))?;
    for (scene, m) in &report.per_scene {
        writeln!(w, "{scene},{},{},{},{}", m.srcc, m.plcc, m.krcc, m.n_methods)
            .map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Pairwise preference counts: `wins[i][j]` = times item i beat item j.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwisePreferenceTable {
    pub items: Vec<String>,
    pub wins: Vec<Vec<u64>>,
}

impl PairwisePreferenceTable {
    pub fn new(items: Vec<String>) -> Self {
        let n = items.len();
        Self {
            items,
            wins: vec![vec![0; n]; n],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.items.len();
        if self.wins.len() != n || self.wins.iter().any(|row| row.len() != n) {
            return Err(Error::Eval("win matrix is not square".to_string()));
        }
        for (i, row) in self.wins.iter().enumerate() {
            if row[i] != 0 {
                return Err(Error::Eval(format!(
                    "item {} has self-comparisons",
                    self.items[i]
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BtOutcome {
    pub scores: BTreeMap<String, f64>,
    pub iterations: usize,
    /// Log-likelihood after each iteration; the MM update never lowers
    /// it.
    pub log_likelihood_trace: Vec<f64>,
}

fn bt_log_likelihood(wins: &[Vec<u64>], strengths: &[f64]) -> f64 {
    let n = strengths.len();
    let mut ll = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j && wins[i][j] > 0 {
                ll += wins[i][j] as f64 * (strengths[i] / (strengths[i] + strengths[j])).ln();
            }
        }
    }
    ll
}

/// Connected components over the "has comparisons" graph.
fn comparison_components(wins: &[Vec<u64>]) -> Vec<Vec<usize>> {
    let n = wins.len();
    let mut component = vec![usize::MAX; n];
    let mut components = Vec::new();
    for start in 0..n {
        if component[start] != usize::MAX {
            continue;
        }
        let id = components.len();
        let mut stack = vec![start];
        let mut members = Vec::new();
        component[start] = id;
        while let Some(i) = stack.pop() {
            members.push(i);
            for j in 0..n {
                if component[j] == usize::MAX && wins[i][j] + wins[j][i] > 0 {
                    component[j] = id;
                    stack.push(j);
                }
            }
        }
        members.sort_unstable();
        components.push(members);
    }
    components
}

/// Bradley-Terry strengths via minorization-maximization:
/// `pi_i <- W_i / sum_j n_ij / (pi_i + pi_j)`, normalized to sum 1.
pub fn bradley_terry(
    table: &PairwisePreferenceTable,
    max_iters: usize,
    tol: f64,
) -> Result<BtOutcome> {
    table.validate()?;
    let n = table.items.len();
    if n < 2 {
        return Err(Error::Eval(
            "preference table needs at least 2 items".to_string(),
        ));
    }
    let wins = &table.wins;
    let components = comparison_components(wins);
    if components.len() > 1 {
        let described: Vec<String> = components
            .iter()
            .map(|c| {
                let names: Vec<&str> = c.iter().map(|&i| table.items[i].as_str()).collect();
                format!("{{{}}}", names.join(", "))
            })
            .collect();
        return Err(Error::Eval(format!(
            "comparison graph is disconnected: components {}",
            described.join(", ")
        )));
    }
    for i in 0..n {
        let total: u64 = (0..n).map(|j| wins[i][j] + wins[j][i]).sum();
        if total == 0 {
            return Err(Error::Eval(format!(
                "item {} has no comparisons",
                table.items[i]
            )));
        }
    }

    let total_wins: Vec<f64> = (0..n)
        .map(|i| wins[i].iter().sum::<u64>() as f64)
        .collect();
    let mut pi = vec![1.0 / n as f64; n];
    let mut trace = Vec::new();
    for iteration in 1..=max_iters {
        let mut next = vec![0.0; n];
        for i in 0..n {
            let mut denom = 0.0;
            for j in 0..n {
                if j != i {
                    let games = (wins[i][j] + wins[j][i]) as f64;
                    if games > 0.0 {
                        denom += games / (pi[i] + pi[j]);
                    }
                }
            }
            next[i] = if denom > 0.0 { total_wins[i] / denom } else { 0.0 };
        }
        let sum: f64 = next.iter().sum();
        if !(sum > 0.0) {
            return Err(Error::Eval(
                "Bradley-Terry strengths collapsed to zero".to_string(),
            ));
        }
        for v in next.iter_mut() {
            *v /= sum;
        }
        let delta = pi
            .iter()
            .zip(&next)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        pi = next;
        trace.push(bt_log_likelihood(wins, &pi));
        if delta < tol {
            return Ok(BtOutcome {
                scores: table.items.iter().cloned().zip(pi).collect(),
                iterations: iteration,
                log_likelihood_trace: trace,
            });
        }
    }
    Err(Error::Eval(format!(
        "Bradley-Terry did not converge in {max_iters} iterations"
    )))
}

pub const BT_DEFAULT_TOL: f64 = 1e-8;
pub const BT_DEFAULT_MAX_ITERS: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceReport {
    /// Sample std of clip scores within each scene.
    pub intra_stds: BTreeMap<String, f64>,
    /// Sample std of per-scene mean scores.
    pub inter_std: f64,
    /// Fraction of scenes whose intra std exceeds both the median intra
    /// std and the inter-scene std.
    pub fraction_exceeding: f64,
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    }
}

/// Compare quality variation within scenes against variation across
/// scenes.
pub fn variance_analysis(clip_scores: &BTreeMap<String, Vec<f64>>) -> Result<VarianceReport> {
    if clip_scores.len() < 2 {
        return Err(Error::Eval(
            "variance analysis needs at least 2 scenes".to_string(),
        ));
    }
    for (scene, scores) in clip_scores {
        if scores.len() < 2 {
            return Err(Error::Eval(format!(
                "scene {scene} has fewer than 2 clip scores"
            )));
        }
    }
    let intra_stds: BTreeMap<String, f64> = clip_scores
        .iter()
        .map(|(scene, scores)| (scene.clone(), sample_std(scores)))
        .collect();
    let scene_means: Vec<f64> = clip_scores.values().map(|s| mean(s)).collect();
    let inter_std = sample_std(&scene_means);
    let mut sorted: Vec<f64> = intra_stds.values().copied().collect();
    sorted.sort_by(f64::total_cmp);
    let med = median(&sorted);
    let exceeding = intra_stds
        .values()
        .filter(|&&s| s > med && s > inter_std)
        .count();
    Ok(VarianceReport {
        fraction_exceeding: exceeding as f64 / intra_stds.len() as f64,
        intra_stds,
        inter_std,
    })
}

/// Kolmogorov-Smirnov statistic of `samples` against the uniform
/// distribution on `[lo, hi)`.
pub fn ks_statistic_uniform(samples: &[f64], lo: f64, hi: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Eval("KS statistic of an empty sample".to_string()));
    }
    if !(hi > lo) {
        return Err(Error::Eval("KS range must satisfy hi > lo".to_string()));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mut d = 0.0f64;
    for (i, x) in sorted.iter().enumerate() {
        let cdf = ((x - lo) / (hi - lo)).clamp(0.0, 1.0);
        let above = (i + 1) as f64 / n - cdf;
        let below = cdf - i as f64 / n;
        d = d.max(above).max(below);
    }
    Ok(d)
}

/// Large-sample critical value of the KS statistic at significance 0.01.
pub fn ks_critical_001(n: usize) -> f64 {
    1.628 / (n as f64).sqrt()
}
