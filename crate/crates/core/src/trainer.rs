//! Training loop: samples contrastive pairs, computes guidance targets and
//! projections, applies one ADAM step per batch, logs per-step loss
//! breakdowns, and checkpoints on schedule.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::Array1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig, ProjCache, SceneCache};
use crate::checkpoint::{self, Checkpoint, RngState};
use crate::error::{Error, Result};
use crate::exec;
use crate::guidance::{compute_guidance, GuidanceBounds, GuidanceVector, BRANCHES};
use crate::nn::Parameterized;
use crate::objective::{
    aqb_total, branch_index, mbw_batch, BranchWeights, LossBreakdown, NoiseParams, ProjectedPair,
};
use crate::optim::{clip_grad_norm, Adam, NoiseAdam};
use crate::pairs::{realize_pair, sample_recipe, write_recipes, PairRecipe, PrepConfig};
use crate::scene::DatasetIndex;

/// Which loss drives training: fixed branch weights or learned per-branch
/// noise scales.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Mbw,
    Aqb,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Learning rate for the noise scales; they are three scalars chasing
    /// moving residual statistics, so they adapt faster than the weights.
    pub noise_learning_rate: f64,
    pub pairs_per_epoch: usize,
    pub objective: Objective,
    /// Branch weights; used by the fixed-weight objective only.
    pub weights: BranchWeights,
    pub seed: u64,
    /// Save `ckpt_<step>.json` every this many steps; 0 disables periodic
    /// checkpoints (the final one is always written).
    pub checkpoint_every: usize,
    pub grad_clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 16,
            learning_rate: 1e-4,
            noise_learning_rate: 3e-3,
            pairs_per_epoch: 2000,
            objective: Objective::Aqb,
            weights: BranchWeights::default(),
            seed: 0,
            checkpoint_every: 1000,
            grad_clip_norm: Some(5.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 || self.batch_size < 1 || self.pairs_per_epoch < 1 {
            return Err(Error::Config(
                "epochs, batch_size, and pairs_per_epoch must be >= 1".to_string(),
            ));
        }
        if !(self.learning_rate > 0.0) || !(self.noise_learning_rate > 0.0) {
            return Err(Error::Config("learning rates must be > 0".to_string()));
        }
        if let Some(clip) = self.grad_clip_norm {
            if !(clip > 0.0) {
                return Err(Error::Config("grad_clip_norm must be > 0".to_string()));
            }
        }
        if self.objective == Objective::Mbw {
            self.weights.validate()?;
        }
        Ok(())
    }
}

pub const TRAIN_LOG_HEADER: &str = "step,total,iqa,vqa,rep,sigma_iqa,sigma_vqa,sigma_rep";

/// A live training run. `step` drives one batch at a time for
/// experiment-level control; `train_epochs` runs the configured schedule.
pub struct Session {
    index: DatasetIndex,
    config: TrainConfig,
    prep: PrepConfig,
    bounds: GuidanceBounds,
    backbone: Backbone,
    noise: NoiseParams,
    adam: Adam,
    noise_adam: NoiseAdam,
    rng: ChaCha8Rng,
    step: u64,
    epoch: u64,
    out_dir: PathBuf,
    log: BufWriter<File>,
    /// Experiment switch: permute the replacement-overlap targets across
    /// the batch, turning that branch's guidance into pure noise. Used to
    /// study how the adaptive objective down-weights an unlearnable
    /// branch.
    pub shuffle_rep_targets: bool,
}

fn open_log(path: &Path, append: bool) -> Result<BufWriter<File>> {
    let mut options = OpenOptions::new();
    options.create(true).write(true);
    if append {
        options.append(true);
    } else {
        options.truncate(true);
    }
    let file = options.open(path).map_err(|e| Error::io(path, e))?;
    let is_empty = file.metadata().map(|m| m.len() == 0).unwrap_or(true);
    let mut log = BufWriter::new(file);
    if !append || is_empty {
        writeln!(log, "{TRAIN_LOG_HEADER}").map_err(|e| Error::io(path, e))?;
    }
    Ok(log)
}

/// Decorrelates the pair-sampling stream from the weight-init stream,
/// which is seeded with the raw config seed.
fn sampling_seed(seed: u64) -> u64 {
    seed ^ 0x9e37_79b9_7f4a_7c15
}

impl Session {
    pub fn new(
        index: DatasetIndex,
        config: TrainConfig,
        prep: PrepConfig,
        backbone_config: BackboneConfig,
        bounds: GuidanceBounds,
        out_dir: &Path,
    ) -> Result<Self> {
        config.validate()?;
        if index.scenes_with_min_methods(2).is_empty() {
            return Err(Error::Dataset(
                "training needs at least one scene with two methods".to_string(),
            ));
        }
        std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        let backbone = Backbone::new(backbone_config, config.seed)?;
        let log = open_log(&out_dir.join("train_log.csv"), false)?;
        Ok(Self {
            index,
            adam: Adam::new(config.learning_rate),
            noise_adam: NoiseAdam::new(config.noise_learning_rate),
            rng: ChaCha8Rng::seed_from_u64(sampling_seed(config.seed)),
            config,
            prep,
            bounds,
            backbone,
            noise: NoiseParams::default(),
            step: 0,
            epoch: 0,
            out_dir: out_dir.to_path_buf(),
            log,
            shuffle_rep_targets: false,
        })
    }

    /// Rebuild a session from a checkpoint; training continues with the
    /// restored weights, optimizer moments, and RNG position.
    pub fn from_checkpoint(path: &Path, index: DatasetIndex, out_dir: &Path) -> Result<Self> {
        let ckpt = checkpoint::load(path)?;
        std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        let mut backbone = Backbone::new(ckpt.backbone_config.clone(), ckpt.train_config.seed)?;
        checkpoint::restore_weights(&mut backbone, &ckpt.weights)?;
        let mut noise = NoiseParams::default();
        *noise.values_mut() = ckpt.noise_log_sigma;
        let log = open_log(&out_dir.join("train_log.csv"), true)?;
        Ok(Self {
            index,
            adam: checkpoint::optimizer_from_data(&ckpt.optimizer)?,
            noise_adam: ckpt.noise_optimizer.clone(),
            rng: ckpt.rng.restore()?,
            config: ckpt.train_config,
            prep: ckpt.prep_config,
            bounds: ckpt.bounds,
            backbone,
            noise,
            step: ckpt.step,
            epoch: ckpt.epoch,
            out_dir: out_dir.to_path_buf(),
            log,
            shuffle_rep_targets: false,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn epoch_count(&self) -> u64 {
        self.epoch
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn noise(&self) -> &NoiseParams {
        &self.noise
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn out_dir(&self) -> &Path {
        &self.out_dir
    }

    /// One optimizer step over a freshly sampled batch.
    pub fn step(&mut self) -> Result<LossBreakdown> {
        self.step_batch(self.config.batch_size)
    }

    fn step_batch(&mut self, batch_size: usize) -> Result<LossBreakdown> {
        let recipes: Vec<PairRecipe> = (0..batch_size)
            .map(|_| sample_recipe(&self.index, &mut self.rng, &self.prep))
            .collect::<Result<_>>()?;
        let pairs = exec::par_map(&recipes, |r| realize_pair(&self.index, r))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        let mut guidance = exec::par_map(&pairs, |p| compute_guidance(p, &self.bounds))
            .into_iter()
            .collect::<Result<Vec<GuidanceVector>>>()?;
        if self.shuffle_rep_targets {
            for i in (1..guidance.len()).rev() {
                let j = self.rng.gen_range(0..=i);
                let tmp = guidance[i].psi_rep;
                guidance[i].psi_rep = guidance[j].psi_rep;
                guidance[j].psi_rep = tmp;
            }
        }

        struct PairForward {
            scene1: SceneCache,
            scene2: SceneCache,
            proj: [(ProjCache, ProjCache); 3],
        }
        let mut forwards = Vec::with_capacity(pairs.len());
        let mut projected = Vec::with_capacity(pairs.len());
        for (pair, targets) in pairs.iter().zip(guidance) {
            let (r1, scene1) = self.backbone.represent(&pair.s1)?;
            let (r2, scene2) = self.backbone.represent(&pair.s2)?;
            let mut p1: [Array1<f32>; 3] = Default::default();
            let mut p2: [Array1<f32>; 3] = Default::default();
            let mut proj: Vec<(ProjCache, ProjCache)> = Vec::with_capacity(3);
            for &branch in &BRANCHES {
                let i = branch_index(branch);
                let (proj1, cache1) = self.backbone.project(&r1, branch);
                let (proj2, cache2) = self.backbone.project(&r2, branch);
                p1[i] = proj1;
                p2[i] = proj2;
                proj.push((cache1, cache2));
            }
            let proj: [(ProjCache, ProjCache); 3] = proj.try_into().map_err(|_| {
                Error::Training("projection cache arity mismatch".to_string())
            })?;
            forwards.push(PairForward {
                scene1,
                scene2,
                proj,
            });
            projected.push(ProjectedPair {
                p1,
                p2,
                guidance: targets,
            });
        }

        let (breakdown, grads) = match self.config.objective {
            Objective::Mbw => mbw_batch(&projected, &self.config.weights)?,
            Objective::Aqb => aqb_total(&projected, &mut self.noise)?,
        };
        if !breakdown.total.is_finite() {
            let dump = self.out_dir.join(format!("failed_batch_{}.jsonl", self.step));
            write_recipes(&recipes, &dump)?;
            return Err(Error::Training(format!(
                "non-finite loss {} at step {}; offending recipes replayable from {}",
                breakdown.total,
                self.step,
                dump.display()
            )));
        }

        let dim = self.backbone.config.repr_dim;
        for (forward, grad) in forwards.iter().zip(&grads) {
            let mut dr1 = Array1::<f32>::zeros(dim);
            let mut dr2 = Array1::<f32>::zeros(dim);
            for i in 0..3 {
                dr1 += &self.backbone.backward_project(&forward.proj[i].0, &grad.d_p1[i]);
                dr2 += &self.backbone.backward_project(&forward.proj[i].1, &grad.d_p2[i]);
            }
            self.backbone.backward_scene(&forward.scene1, &dr1);
            self.backbone.backward_scene(&forward.scene2, &dr2);
        }

        if let Some(max_norm) = self.config.grad_clip_norm {
            clip_grad_norm(&mut self.backbone, &mut self.noise, max_norm);
        }
        self.adam.step(&mut self.backbone);
        if self.config.objective == Objective::Aqb {
            self.noise_adam.step(&mut self.noise);
        }
        self.backbone.zero_grads();
        self.noise.zero_grads();

        self.step += 1;
        let sigmas = breakdown.sigmas.unwrap_or_else(|| {
            let mut current = crate::objective::BranchValues::default();
            for &b in &BRANCHES {
                current.set(b, self.noise.sigma(b));
            }
            current
        });
        let log_path = self.out_dir.join("train_log.csv");
        writeln!(
            self.log,
            "{},{},{},{},{},{},{},{}",
            self.step,
            breakdown.total,
            breakdown.per_branch.iqa,
            breakdown.per_branch.vqa,
            breakdown.per_branch.rep,
            sigmas.iqa,
            sigmas.vqa,
            sigmas.rep
        )
        .and_then(|_| self.log.flush())
        .map_err(|e| Error::io(&log_path, e))?;
        Ok(breakdown)
    }

    pub fn save_checkpoint(&mut self, file_name: &str) -> Result<PathBuf> {
        let path = self.out_dir.join(file_name);
        let ckpt = Checkpoint {
            format_version: checkpoint::FORMAT_VERSION,
            backbone_config: self.backbone.config.clone(),
            train_config: self.config.clone(),
            prep_config: self.prep.clone(),
            bounds: self.bounds.clone(),
            step: self.step,
            epoch: self.epoch,
            weights: checkpoint::collect_weights(&mut self.backbone),
            noise_log_sigma: self.noise.values(),
            optimizer: checkpoint::optimizer_to_data(&self.adam),
            noise_optimizer: self.noise_adam.clone(),
            rng: RngState::capture(&self.rng),
        };
        checkpoint::save(&ckpt, &path)?;
        Ok(path)
    }

    /// Run `epochs` epochs of `pairs_per_epoch` pairs each, then write and
    /// return the final checkpoint.
    pub fn train_epochs(&mut self, epochs: usize) -> Result<PathBuf> {
        for _ in 0..epochs {
            let mut remaining = self.config.pairs_per_epoch;
            let mut loss_sum = 0.0;
            let mut steps = 0u64;
            while remaining > 0 {
                let batch = remaining.min(self.config.batch_size);
                let breakdown = self.step_batch(batch)?;
                loss_sum += breakdown.total;
                steps += 1;
                remaining -= batch;
                if self.config.checkpoint_every > 0
                    && self.step % self.config.checkpoint_every as u64 == 0
                {
                    self.save_checkpoint(&format!("ckpt_{}.json", self.step))?;
                }
            }
            self.epoch += 1;
            log::info!(
                "epoch {}: {} steps, mean loss {:.6}",
                self.epoch,
                steps,
                loss_sum / steps as f64
            );
        }
        self.save_checkpoint("ckpt_final.json")
    }
}

/// Train from scratch and return the final checkpoint path.
pub fn train(
    index: DatasetIndex,
    config: TrainConfig,
    prep: PrepConfig,
    backbone_config: BackboneConfig,
    bounds: GuidanceBounds,
    out_dir: &Path,
) -> Result<PathBuf> {
    let epochs = config.epochs;
    let mut session = Session::new(index, config, prep, backbone_config, bounds, out_dir)?;
    session.train_epochs(epochs)
}

/// Continue a checkpointed run for `extra_epochs` more epochs.
pub fn resume(
    checkpoint_path: &Path,
    index: DatasetIndex,
    extra_epochs: usize,
    out_dir: &Path,
) -> Result<PathBuf> {
    let mut session = Session::from_checkpoint(checkpoint_path, index, out_dir)?;
    session.train_epochs(extra_epochs)
}
