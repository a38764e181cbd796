//! Similarity-matching losses over branch projections.
//!
//! Both objectives compare the cosine similarity of a pair's projections
//! against the branch's guidance target. The fixed-weight form takes the
//! absolute residual per branch and combines branches with static weights.
//! The adaptive form treats each branch residual as Gaussian noise with a
//! learnable scale `sigma = exp(log_sigma)`, giving `e^2/(2 sigma^2) +
//! log sigma` per branch, which is the Gaussian negative log-likelihood
//! minus the constant `log(2 pi) / 2`; branches with noisier targets then
//! down-weight themselves.
//!
//! Loss math runs in f64. Breakdown bookkeeping: `per_branch` holds
//! unweighted per-branch batch means; the total is the lambda-weighted sum
//! of those means for the fixed-weight form and their plain sum for the
//! adaptive form.

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::guidance::{Branch, GuidanceVector, BRANCHES};

/// Static branch weights for the fixed-weight objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BranchWeights {
    pub lambda_iqa: f64,
    pub lambda_vqa: f64,
    pub lambda_rep: f64,
}

impl Default for BranchWeights {
    fn default() -> Self {
        Self {
            lambda_iqa: 1.5,
            lambda_vqa: 1.0,
            lambda_rep: 0.2,
        }
    }
}

impl BranchWeights {
    pub fn get(&self, branch: Branch) -> f64 {
        match branch {
            Branch::Iqa => self.lambda_iqa,
            Branch::Vqa => self.lambda_vqa,
            Branch::Rep => self.lambda_rep,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_iqa, self.lambda_vqa, self.lambda_rep];
        if all.iter().any(|l| *l < 0.0 || !l.is_finite()) {
            return Err(Error::Config("branch weights must be >= 0".to_string()));
        }
        if all.iter().all(|l| *l == 0.0) {
            return Err(Error::Config(
                "at least one branch weight must be positive".to_string(),
            ));
        }
        Ok(())
    }
}

/// Learnable per-branch noise scales, parameterized as `log sigma` so
/// `sigma > 0` always holds. Gradients accumulate alongside.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseParams {
    log_sigma: [f64; 3],
    #[serde(skip)]
    pub grad: [f64; 3],
}

impl Default for NoiseParams {
    /// `log sigma = 0` (sigma 1): branches start balanced.
    fn default() -> Self {
        Self {
            log_sigma: [0.0; 3],
            grad: [0.0; 3],
        }
    }
}

pub fn branch_index(branch: Branch) -> usize {
    match branch {
        Branch::Iqa => 0,
        Branch::Vqa => 1,
        Branch::Rep => 2,
    }
}

impl NoiseParams {
    pub fn log_sigma(&self, branch: Branch) -> f64 {
        self.log_sigma[branch_index(branch)]
    }

    pub fn set_log_sigma(&mut self, branch: Branch, value: f64) {
        self.log_sigma[branch_index(branch)] = value;
    }

    pub fn sigma(&self, branch: Branch) -> f64 {
        self.log_sigma(branch).exp()
    }

    pub fn zero_grads(&mut self) {
        self.grad = [0.0; 3];
    }

    pub fn values(&self) -> [f64; 3] {
        self.log_sigma
    }

    pub fn values_mut(&mut self) -> &mut [f64; 3] {
        &mut self.log_sigma
    }
}

/// One value per branch.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BranchValues {
    pub iqa: f64,
    pub vqa: f64,
    pub rep: f64,
}

impl BranchValues {
    pub fn get(&self, branch: Branch) -> f64 {
        match branch {
            Branch::Iqa => self.iqa,
            Branch::Vqa => self.vqa,
            Branch::Rep => self.rep,
        }
    }

    pub fn set(&mut self, branch: Branch, value: f64) {
        match branch {
            Branch::Iqa => self.iqa = value,
            Branch::Vqa => self.vqa = value,
            Branch::Rep => self.rep = value,
        }
    }
}

/// Loss report for one batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    /// Unweighted per-branch batch means.
    pub per_branch: BranchValues,
    /// Current noise scales; adaptive objective only.
    pub sigmas: Option<BranchValues>,
}

/// Both sides' branch projections plus the pair's guidance targets,
/// indexed by [`branch_index`].
#[derive(Debug, Clone)]
pub struct ProjectedPair {
    pub p1: [Array1<f32>; 3],
    pub p2: [Array1<f32>; 3],
    pub guidance: GuidanceVector,
}

/// Loss gradients with respect to one pair's projections, same indexing.
#[derive(Debug, Clone)]
pub struct PairGrads {
    pub d_p1: [Array1<f32>; 3],
    pub d_p2: [Array1<f32>; 3],
}

const NORM_EPS: f64 = 1e-12;

fn as_f64(v: &Array1<f32>) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

/// Cosine similarity with stabilized norms.
pub fn cosine_sim(u: &Array1<f32>, v: &Array1<f32>) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Shape(format!(
            "cosine inputs differ in length: {} vs {}",
            u.len(),
            v.len()
        )));
    }
    let (u, v) = (as_f64(u), as_f64(v));
    let dot: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt() + NORM_EPS;
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt() + NORM_EPS;
    Ok(dot / (nu * nv))
}

/// Cosine similarity plus its gradients with respect to both inputs.
fn cosine_sim_with_grads(u: &[f64], v: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let norm_u = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let norm_v = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nu = norm_u + NORM_EPS;
    let nv = norm_v + NORM_EPS;
    let s = dot / (nu * nv);
    // d s / d u = v / (nu nv) - s * u / (|u| nu); second term vanishes at
    // the origin where the similarity itself is zero.
    let du: Vec<f64> = u
        .iter()
        .zip(v)
        .map(|(&ui, &vi)| {
            let direction = if norm_u > 0.0 { ui / norm_u } else { 0.0 };
            vi / (nu * nv) - s * direction / nu
        })
        .collect();
    let dv: Vec<f64> = v
        .iter()
        .zip(u)
        .map(|(&vi, &ui)| {
            let direction = if norm_v > 0.0 { vi / norm_v } else { 0.0 };
            ui / (nu * nv) - s * direction / nv
        })
        .collect();
    (s, du, dv)
}

fn check_target(target: f64) -> Result<()> {
    if !(-1.0..=1.0).contains(&target) {
        return Err(Error::Config(format!(
            "guidance target {target} outside [-1, 1]"
        )));
    }
    Ok(())
}

/// Absolute similarity-matching residual for one branch: `|sim - target|`.
pub fn mbw_branch_loss(p1: &Array1<f32>, p2: &Array1<f32>, target: f64) -> Result<f64> {
    check_target(target)?;
    Ok((cosine_sim(p1, p2)? - target).abs())
}

/// Weighted combination of per-branch losses. The batch mean is the
/// caller's job.
pub fn mbw_total(losses: &BranchValues, weights: &BranchWeights) -> f64 {
    BRANCHES
        .iter()
        .map(|&b| weights.get(b) * losses.get(b))
        .sum()
}

/// Adaptive branch loss `e^2 / (2 sigma^2) + log sigma`.
pub fn aqb_branch_loss(
    p1: &Array1<f32>,
    p2: &Array1<f32>,
    target: f64,
    log_sigma: f64,
) -> Result<f64> {
    check_target(target)?;
    let e = cosine_sim(p1, p2)? - target;
    let sigma = log_sigma.exp();
    Ok(e * e / (2.0 * sigma * sigma) + log_sigma)
}

fn to_f32(v: Vec<f64>) -> Array1<f32> {
    Array1::from_iter(v.into_iter().map(|x| x as f32))
}

/// Fixed-weight batch loss and its projection gradients.
///
/// `total = (1/N) sum_i sum_branch lambda * |sim_i - target_i|`; the
/// returned breakdown satisfies `total = mbw_total(per_branch, weights)`.
pub fn mbw_batch(
    batch: &[ProjectedPair],
    weights: &BranchWeights,
) -> Result<(LossBreakdown, Vec<PairGrads>)> {
    if batch.is_empty() {
        return Err(Error::Training("empty batch".to_string()));
    }
    weights.validate()?;
    let n = batch.len() as f64;
    let mut per_branch = BranchValues::default();
    let mut grads = Vec::with_capacity(batch.len());
    for pair in batch {
        let mut d_p1: [Array1<f32>; 3] = Default::default();
        let mut d_p2: [Array1<f32>; 3] = Default::default();
        for &branch in &BRANCHES {
            let i = branch_index(branch);
            let target = pair.guidance.get(branch);
            check_target(target)?;
            let u = as_f64(&pair.p1[i]);
            let v = as_f64(&pair.p2[i]);
            let (s, du, dv) = cosine_sim_with_grads(&u, &v);
            let e = s - target;
            per_branch.set(branch, per_branch.get(branch) + e.abs() / n);
            let dl_ds = weights.get(branch) * e.signum() / n;
            d_p1[i] = to_f32(du.into_iter().map(|g| g * dl_ds).collect());
            d_p2[i] = to_f32(dv.into_iter().map(|g| g * dl_ds).collect());
        }
        grads.push(PairGrads { d_p1, d_p2 });
    }
    let total = mbw_total(&per_branch, weights);
    Ok((
        LossBreakdown {
            total,
            per_branch,
            sigmas: None,
        },
        grads,
    ))
}

/// Adaptive batch loss, its projection gradients, and accumulated
/// `log_sigma` gradients.
///
/// `total = (1/N) sum_i sum_branch [e^2/(2 sigma^2) + log sigma]`; the
/// breakdown satisfies `total = per_branch.iqa + per_branch.vqa +
/// per_branch.rep`. Per branch, `d total / d log_sigma = (1/N) sum_i (1 -
/// e_i^2 / sigma^2)`, added into `noise.grad`.
pub fn aqb_total(
    batch: &[ProjectedPair],
    noise: &mut NoiseParams,
) -> Result<(LossBreakdown, Vec<PairGrads>)> {
    if batch.is_empty() {
        return Err(Error::Training("empty batch".to_string()));
    }
    let n = batch.len() as f64;
    let mut per_branch = BranchValues::default();
    let mut sigmas = BranchValues::default();
    for &branch in &BRANCHES {
        sigmas.set(branch, noise.sigma(branch));
    }
    let mut grads = Vec::with_capacity(batch.len());
    for pair in batch {
        let mut d_p1: [Array1<f32>; 3] = Default::default();
        let mut d_p2: [Array1<f32>; 3] = Default::default();
        for &branch in &BRANCHES {
            let i = branch_index(branch);
            let target = pair.guidance.get(branch);
            check_target(target)?;
            let u = as_f64(&pair.p1[i]);
            let v = as_f64(&pair.p2[i]);
            let (s, du, dv) = cosine_sim_with_grads(&u, &v);
            let e = s - target;
            let log_sigma = noise.log_sigma(branch);
            let sigma2 = (2.0 * log_sigma).exp();
            let loss = e * e / (2.0 * sigma2) + log_sigma;
            per_branch.set(branch, per_branch.get(branch) + loss / n);
            let dl_ds = e / sigma2 / n;
            d_p1[i] = to_f32(du.into_iter().map(|g| g * dl_ds).collect());
            d_p2[i] = to_f32(dv.into_iter().map(|g| g * dl_ds).collect());
            noise.grad[i] += (1.0 - e * e / sigma2) / n;
        }
        grads.push(PairGrads { d_p1, d_p2 });
    }
    let total = per_branch.iqa + per_branch.vqa + per_branch.rep;
    Ok((
        LossBreakdown {
            total,
            per_branch,
            sigmas: Some(sigmas),
        },
        grads,
    ))
}
