//! `sceneq` — one binary driving the full pipeline: contrastive pair
//! preparation, self-supervised training, frozen-backbone evaluation with
//! linear score regression, and Bradley-Terry scoring of pairwise
//! preference data.
//!
//! Every command resolves a [`RunConfig`] (JSON file merged with flag
//! overrides); evaluation reports embed the SHA-256 of the resolved config
//! so results are traceable to their exact settings.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use ndarray::Array1;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use sceneq_core::backbone::{Backbone, BackboneConfig};
use sceneq_core::checkpoint::{self, Checkpoint};
use sceneq_core::estimator::{self, RegressionModel, ReprCache, DEFAULT_RIDGE_ALPHA};
use sceneq_core::guidance::GuidanceBounds;
use sceneq_core::metrics::{
    self, EvalReport, PairwisePreferenceTable, BT_DEFAULT_MAX_ITERS, BT_DEFAULT_TOL,
};
use sceneq_core::nn::Parameterized;
use sceneq_core::objective::BranchWeights;
use sceneq_core::pairs::{self, PrepConfig};
use sceneq_core::plot::{self, ScenePanel};
use sceneq_core::scene::{load_dataset, load_views, DatasetIndex, SceneMethodKey};
use sceneq_core::trainer::{self, Objective, TrainConfig};
use sceneq_core::{Error, Result};

const CONFIG_HELP: &str = "CONFIG FILE (JSON, unknown keys rejected; all keys optional):
  data_root        dataset directory (scene/method/view_*.png)   default: unset
  labels           manifest JSON with quality labels             default: unset
  out_dir          output directory                              default: \"sceneq_out\"
  cache_dir        representation cache directory                default: unset (no cache)
  alpha            ridge regularization strength                 default: 0.001
  split_fraction   training fraction for half-split protocol     default: 0.5
  split_seed       split shuffling seed                          default: 0
  datasets         map id -> {root, labels} for cross_dataset    default: empty
  prep             {clip_len_min: 4, clip_len_max: 16, crop_min: 96, crop_max: 256}
  backbone         {stage_channels: [32,64,128,256], repr_dim: 256, transformer_layers: 4,
                    attention_heads: 4, projector_hidden: 256, projector_out: 128, max_views: 64}
  bounds           {iqa: [-1.0, 1.0], vqa: [-1.0, 1.0]} guidance rescale bounds
  train            {epochs: 200, batch_size: 16, learning_rate: 0.0001,
                    noise_learning_rate: 0.003, pairs_per_epoch: 2000, objective: \"aqb\",
                    weights: {lambda_iqa: 1.5, lambda_vqa: 1.0, lambda_rep: 0.2},
                    seed: 0, checkpoint_every: 1000, grad_clip_norm: 5.0}

EXIT CODES: 0 success, 1 runtime failure, 2 usage or configuration error.";

#[derive(Parser)]
#[command(
    name = "sceneq",
    about = "Self-supervised quality assessment of multi-view synthesized scenes",
    after_long_help = CONFIG_HELP,
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample contrastive pair recipes into a JSON-lines manifest.
    Prepare(PrepareArgs),
    /// Train the backbone with the contrastive objective.
    Train(TrainArgs),
    /// Evaluate a checkpoint: extract, regress, report, and plot.
    Evaluate(EvaluateArgs),
    /// Convert pairwise preference counts to per-scene Bradley-Terry scores.
    Bt(BtArgs),
    /// Summarize a checkpoint file.
    Inspect(InspectArgs),
}

#[derive(Args)]
struct DataArgs {
    /// JSON run-config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset root directory (overrides config `data_root`).
    #[arg(long)]
    data_root: Option<PathBuf>,
    /// Manifest JSON with labels (overrides config `labels`).
    #[arg(long)]
    labels: Option<PathBuf>,
}

#[derive(Args)]
struct PrepareArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Output manifest path (JSON lines, one recipe per line).
    #[arg(long)]
    out: PathBuf,
    /// Number of recipes to sample.
    #[arg(long)]
    count: usize,
    /// Sampling seed (defaults to the config's train.seed).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Output directory (overrides config `out_dir`).
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Objective (overrides config `train.objective`).
    #[arg(long, value_enum)]
    objective: Option<ObjectiveArg>,
    /// Branch weights as `iqa,vqa,rep` (e.g. `1.5,1,0.2`); fixed-weight
    /// objective only.
    #[arg(long)]
    weights: Option<String>,
    /// Training seed (overrides config `train.seed`).
    #[arg(long)]
    seed: Option<u64>,
    /// Epoch count (overrides config `train.epochs`).
    #[arg(long)]
    epochs: Option<usize>,
    /// Resume from this checkpoint instead of initializing fresh weights.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Trained checkpoint to evaluate.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Evaluation protocol.
    #[arg(long, value_enum, default_value_t = ProtocolArg::HalfSplit)]
    protocol: ProtocolArg,
    /// Split seed (overrides config `split_seed`).
    #[arg(long)]
    seed: Option<u64>,
    /// Held-out dataset id for the cross-dataset protocol.
    #[arg(long)]
    test_dataset: Option<String>,
    /// Output directory (overrides config `out_dir`).
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Ridge strength (overrides config `alpha`).
    #[arg(long)]
    alpha: Option<f64>,
    /// Training fraction for half-split (overrides config `split_fraction`).
    #[arg(long)]
    split_fraction: Option<f64>,
    /// Representation cache directory (overrides config `cache_dir`).
    #[arg(long)]
    cache_dir: Option<PathBuf>,
}

#[derive(Args)]
struct BtArgs {
    /// CSV of `scene,winner_method,loser_method,count` rows.
    #[arg(long)]
    comparisons: PathBuf,
    /// Output JSON path (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InspectArgs {
    /// Checkpoint to summarize.
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ObjectiveArg {
    Mbw,
    Aqb,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ProtocolArg {
    HalfSplit,
    CrossDataset,
}

impl ProtocolArg {
    fn name(self) -> &'static str {
        match self {
            ProtocolArg::HalfSplit => "half_split",
            ProtocolArg::CrossDataset => "cross_dataset",
        }
    }
}

// ------------------------------------------------------------- run config

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RunConfig {
    data_root: Option<PathBuf>,
    labels: Option<PathBuf>,
    out_dir: PathBuf,
    cache_dir: Option<PathBuf>,
    alpha: f64,
    split_fraction: f64,
    split_seed: u64,
    datasets: BTreeMap<String, DatasetEntry>,
    prep: PrepConfig,
    backbone: BackboneConfig,
    bounds: GuidanceBounds,
    train: TrainConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetEntry {
    root: PathBuf,
    #[serde(default)]
    labels: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data_root: None,
            labels: None,
            out_dir: PathBuf::from("sceneq_out"),
            cache_dir: None,
            alpha: DEFAULT_RIDGE_ALPHA,
            split_fraction: 0.5,
            split_seed: 0,
            datasets: BTreeMap::new(),
            prep: PrepConfig::default(),
            backbone: BackboneConfig::default(),
            bounds: GuidanceBounds::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    fn merge_data(&mut self, data: &DataArgs) {
        if let Some(root) = &data.data_root {
            self.data_root = Some(root.clone());
        }
        if let Some(labels) = &data.labels {
            self.labels = Some(labels.clone());
        }
    }

    fn require_data_root(&self) -> Result<&Path> {
        self.data_root.as_deref().ok_or_else(|| {
            Error::Config("data_root is required (config key or --data-root)".to_string())
        })
    }

    /// SHA-256 of the resolved configuration, embedded in reports. Output
    /// locations are excluded: they say where results land, not what the
    /// results are, so runs differing only in destination hash identically.
    fn hash(&self) -> String {
        let mut meaningful = self.clone();
        meaningful.out_dir = PathBuf::new();
        meaningful.cache_dir = None;
        let json = serde_json::to_string(&meaningful).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(json.as_bytes());
        format!("{:x}", hasher.finalize())
    }
}

// ------------------------------------------------------------------ main

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            match err {
                Error::Config(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Prepare(args) => cmd_prepare(args),
        Command::Train(args) => cmd_train(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Bt(args) => cmd_bt(args),
        Command::Inspect(args) => cmd_inspect(args),
    }
}

fn load_index(config: &RunConfig) -> Result<DatasetIndex> {
    load_dataset(config.require_data_root()?, config.labels.as_deref())
}

// --------------------------------------------------------------- prepare

fn cmd_prepare(args: PrepareArgs) -> Result<()> {
    let mut config = RunConfig::load(args.data.config.as_deref())?;
    config.merge_data(&args.data);
    let index = load_index(&config)?;
    let seed = args.seed.unwrap_or(config.train.seed);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let recipes = (0..args.count)
        .map(|_| pairs::sample_recipe(&index, &mut rng, &config.prep))
        .collect::<Result<Vec<_>>>()?;
    pairs::write_recipes(&recipes, &args.out)?;
    info!(
        "wrote {} recipes to {} (seed {seed})",
        recipes.len(),
        args.out.display()
    );
    println!("{}", args.out.display());
    Ok(())
}

// ----------------------------------------------------------------- train

fn parse_weights(text: &str) -> Result<BranchWeights> {
    let parts: Vec<&str> = text.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(Error::Config(format!(
            "--weights expects three comma-separated values `iqa,vqa,rep`, got `{text}`"
        )));
    }
    let parse = |s: &str| -> Result<f64> {
        s.parse()
            .map_err(|_| Error::Config(format!("--weights: `{s}` is not a number")))
    };
    let weights = BranchWeights {
        lambda_iqa: parse(parts[0])?,
        lambda_vqa: parse(parts[1])?,
        lambda_rep: parse(parts[2])?,
    };
    weights.validate()?;
    Ok(weights)
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut config = RunConfig::load(args.data.config.as_deref())?;
    config.merge_data(&args.data);
    if let Some(out) = &args.out_dir {
        config.out_dir = out.clone();
    }
    if let Some(objective) = args.objective {
        config.train.objective = match objective {
            ObjectiveArg::Mbw => Objective::Mbw,
            ObjectiveArg::Aqb => Objective::Aqb,
        };
    }
    if let Some(weights) = &args.weights {
        config.train.weights = parse_weights(weights)?;
    }
    if let Some(seed) = args.seed {
        config.train.seed = seed;
    }
    if let Some(epochs) = args.epochs {
        config.train.epochs = epochs;
    }
    config.train.validate()?;

    let index = load_index(&config)?;
    info!("resolved config sha256 {}", config.hash());
    match config.train.objective {
        Objective::Mbw => {
            let w = &config.train.weights;
            info!(
                "objective mbw with weights (iqa {}, vqa {}, rep {})",
                w.lambda_iqa, w.lambda_vqa, w.lambda_rep
            );
        }
        Objective::Aqb => info!("objective aqb with learnable noise scales"),
    }

    let final_ckpt = match &args.resume {
        Some(ckpt) => {
            let epochs = args.epochs.unwrap_or(config.train.epochs);
            info!("resuming from {} for {epochs} more epochs", ckpt.display());
            trainer::resume(ckpt, index, epochs, &config.out_dir)?
        }
        None => trainer::train(
            index,
            config.train.clone(),
            config.prep.clone(),
            config.backbone.clone(),
            config.bounds,
            &config.out_dir,
        )?,
    };
    info!("final checkpoint: {}", final_ckpt.display());
    println!("{}", final_ckpt.display());
    Ok(())
}

// -------------------------------------------------------------- evaluate

fn load_backbone(path: &Path) -> Result<(Backbone, Checkpoint)> {
    let ckpt = checkpoint::load(path)?;
    let mut backbone = Backbone::new(ckpt.backbone_config.clone(), 0)?;
    checkpoint::restore_weights(&mut backbone, &ckpt.weights)?;
    Ok((backbone, ckpt))
}

fn extract_all(
    backbone: &Backbone,
    index: &DatasetIndex,
    cache: Option<&ReprCache>,
) -> Result<BTreeMap<SceneMethodKey, Array1<f32>>> {
    let mut reprs = BTreeMap::new();
    for key in index.keys() {
        if let Some(hit) = cache.and_then(|c| c.get(&key)) {
            reprs.insert(key, hit);
            continue;
        }
        let n = index.n_views(&key.0, &key.1)?;
        let indices: Vec<usize> = (0..n).collect();
        let views = load_views(index, &key.0, &key.1, &indices)?;
        let pixels: Vec<_> = views.into_iter().map(|v| v.pixels).collect();
        let repr = estimator::extract_views(backbone, &pixels)?;
        if let Some(cache) = cache {
            cache.put(&key, &repr)?;
        }
        reprs.insert(key, repr);
    }
    Ok(reprs)
}

fn predict_keys(
    model: &RegressionModel,
    reprs: &BTreeMap<SceneMethodKey, Array1<f32>>,
    keys: &[SceneMethodKey],
) -> Result<BTreeMap<SceneMethodKey, f64>> {
    keys.iter()
        .map(|key| {
            let repr = reprs.get(key).ok_or_else(|| {
                Error::Eval(format!("no representation for {}/{}", key.0, key.1))
            })?;
            Ok((key.clone(), estimator::predict(model, repr)?))
        })
        .collect()
}

/// Full JSON report: correlations plus the provenance needed to reproduce
/// them.
#[derive(Serialize)]
struct ReportFile<'a> {
    config_sha256: String,
    protocol: &'a str,
    checkpoint: String,
    split_seed: u64,
    alpha: f64,
    test_keys: Vec<String>,
    predictions: BTreeMap<String, f64>,
    report: &'a EvalReport,
}

#[allow(clippy::too_many_arguments)]
fn write_outputs(
    out_dir: &Path,
    protocol: &str,
    config: &RunConfig,
    checkpoint: &Path,
    predictions: &BTreeMap<SceneMethodKey, f64>,
    test_labels: &BTreeMap<SceneMethodKey, f64>,
    report: &EvalReport,
) -> Result<()> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    metrics::write_report_csv(report, &out_dir.join("report.csv"))?;

    let file = ReportFile {
        config_sha256: config.hash(),
        protocol,
        checkpoint: checkpoint.display().to_string(),
        split_seed: config.split_seed,
        alpha: config.alpha,
        test_keys: predictions.keys().map(|k| format!("{}/{}", k.0, k.1)).collect(),
        predictions: predictions
            .iter()
            .map(|(k, &v)| (format!("{}/{}", k.0, k.1), v))
            .collect(),
        report,
    };
    let json_path = out_dir.join("report.json");
    let mut json = serde_json::to_string_pretty(&file)
        .map_err(|e| Error::Eval(format!("serializing report: {e}")))?;
    json.push('\n');
    std::fs::write(&json_path, json).map_err(|e| Error::io(&json_path, e))?;

    let panels: Vec<ScenePanel> = report
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
    let summary = plot::scatter_grid(&panels, protocol, &out_dir.join("scatter.svg"))?;

    info!(
        "wrote report.csv, report.json, scatter.svg to {}",
        out_dir.display()
    );
    println!(
        "{protocol}: SRCC mean {:.4} (std {:.4}), PLCC mean {:.4}, KRCC mean {:.4} over {} scenes; {}/{} scenes with positive slope",
        report.aggregate.srcc.mean,
        report.aggregate.srcc.std,
        report.aggregate.plcc.mean,
        report.aggregate.krcc.mean,
        report.aggregate.n_scenes,
        summary.positive_slopes,
        summary.slopes.len(),
    );
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    let mut config = RunConfig::load(args.data.config.as_deref())?;
    config.merge_data(&args.data);
    if let Some(out) = &args.out_dir {
        config.out_dir = out.clone();
    }
    if let Some(seed) = args.seed {
        config.split_seed = seed;
    }
    if let Some(alpha) = args.alpha {
        config.alpha = alpha;
    }
    if let Some(fraction) = args.split_fraction {
        config.split_fraction = fraction;
    }
    if let Some(cache) = &args.cache_dir {
        config.cache_dir = Some(cache.clone());
    }

    let (backbone, _ckpt) = load_backbone(&args.checkpoint)?;
    let cache = match &config.cache_dir {
        Some(dir) => Some(ReprCache::new(dir, &args.checkpoint)?),
        None => None,
    };

    match args.protocol {
        ProtocolArg::HalfSplit => {
            let index = load_index(&config)?;
            let labels = index.labels().clone();
            if labels.is_empty() {
                return Err(Error::Eval(
                    "half_split needs labels (manifest with a `labels` map)".to_string(),
                ));
            }
            let reprs = extract_all(&backbone, &index, cache.as_ref())?;
            let (model, test_keys) = estimator::fit(
                &reprs,
                &labels,
                config.split_seed,
                config.split_fraction,
                config.alpha,
            )?;
            let predictions = predict_keys(&model, &reprs, &test_keys)?;
            let test_labels: BTreeMap<SceneMethodKey, f64> = test_keys
                .iter()
                .map(|k| (k.clone(), labels[k]))
                .collect();
            let report = metrics::scene_wise_report(&predictions, &test_labels)?;
            write_outputs(
                &config.out_dir,
                args.protocol.name(),
                &config,
                &args.checkpoint,
                &predictions,
                &test_labels,
                &report,
            )
        }
        ProtocolArg::CrossDataset => {
            if config.datasets.len() < 2 {
                return Err(Error::Config(format!(
                    "cross_dataset needs at least 2 entries in `datasets`, got {}",
                    config.datasets.len()
                )));
            }
            let test_id = args.test_dataset.clone().ok_or_else(|| {
                Error::Config("cross_dataset requires --test-dataset".to_string())
            })?;
            if !config.datasets.contains_key(&test_id) {
                return Err(Error::Config(format!(
                    "--test-dataset {test_id} is not a key of `datasets`"
                )));
            }
            let mut reprs_by_dataset = BTreeMap::new();
            let mut labels_by_dataset = BTreeMap::new();
            for (id, entry) in &config.datasets {
                let index = load_dataset(&entry.root, entry.labels.as_deref())?;
                reprs_by_dataset
                    .insert(id.clone(), extract_all(&backbone, &index, cache.as_ref())?);
                labels_by_dataset.insert(id.clone(), index.labels().clone());
            }
            let train_ids: BTreeSet<String> = config
                .datasets
                .keys()
                .filter(|id| **id != test_id)
                .cloned()
                .collect();
            let (model, test_keys) = estimator::cross_dataset_fit(
                &reprs_by_dataset,
                &labels_by_dataset,
                &train_ids,
                &test_id,
                config.alpha,
            )?;
            let predictions = predict_keys(&model, &reprs_by_dataset[&test_id], &test_keys)?;
            let test_labels: BTreeMap<SceneMethodKey, f64> = test_keys
                .iter()
                .map(|k| (k.clone(), labels_by_dataset[&test_id][k]))
                .collect();
            let report = metrics::scene_wise_report(&predictions, &test_labels)?;
            write_outputs(
                &config.out_dir,
                args.protocol.name(),
                &config,
                &args.checkpoint,
                &predictions,
                &test_labels,
                &report,
            )
        }
    }
}

// -------------------------------------------------------------------- bt

fn cmd_bt(args: BtArgs) -> Result<()> {
    let text = std::fs::read_to_string(&args.comparisons)
        .map_err(|e| Error::io(&args.comparisons, e))?;

    // scene -> (winner, loser) -> count
    let mut duels: BTreeMap<String, BTreeMap<(String, String), u64>> = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if i == 0 && line == "scene,winner_method,loser_method,count" {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(Error::Config(format!(
                "{} line {line_no}: expected `scene,winner_method,loser_method,count`, got {} fields",
                args.comparisons.display(),
                fields.len()
            )));
        }
        if fields[..3].iter().any(|f| f.is_empty()) {
            return Err(Error::Config(format!(
                "{} line {line_no}: empty scene or method name",
                args.comparisons.display()
            )));
        }
        let count: u64 = fields[3].parse().map_err(|_| {
            Error::Config(format!(
                "{} line {line_no}: count `{}` is not a non-negative integer",
                args.comparisons.display(),
                fields[3]
            ))
        })?;
        if fields[1] == fields[2] {
            return Err(Error::Config(format!(
                "{} line {line_no}: winner and loser are both `{}`",
                args.comparisons.display(),
                fields[1]
            )));
        }
        *duels
            .entry(fields[0].to_string())
            .or_default()
            .entry((fields[1].to_string(), fields[2].to_string()))
            .or_default() += count;
    }
    if duels.is_empty() {
        return Err(Error::Config(format!(
            "{}: no comparison rows",
            args.comparisons.display()
        )));
    }

    let mut scores: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
    for (scene, outcomes) in &duels {
        let items: BTreeSet<String> = outcomes
            .keys()
            .flat_map(|(w, l)| [w.clone(), l.clone()])
            .collect();
        let items: Vec<String> = items.into_iter().collect();
        let position: BTreeMap<String, usize> = items
            .iter()
            .enumerate()
            .map(|(i, name)| (name.clone(), i))
            .collect();
        let mut table = PairwisePreferenceTable::new(items);
        for ((winner, loser), count) in outcomes {
            table.wins[position[winner]][position[loser]] += count;
        }
        let outcome = metrics::bradley_terry(&table, BT_DEFAULT_MAX_ITERS, BT_DEFAULT_TOL)
            .map_err(|e| Error::Eval(format!("scene {scene}: {e}")))?;
        scores.insert(scene.clone(), outcome.scores);
    }

    let mut json = serde_json::to_string_pretty(&scores)
        .map_err(|e| Error::Eval(format!("serializing scores: {e}")))?;
    json.push('\n');
    match &args.out {
        Some(path) => {
            std::fs::write(path, json).map_err(|e| Error::io(path, e))?;
            info!("wrote scores for {} scenes to {}", scores.len(), path.display());
        }
        None => print!("{json}"),
    }
    Ok(())
}

// --------------------------------------------------------------- inspect

fn cmd_inspect(args: InspectArgs) -> Result<()> {
    let ckpt = checkpoint::load(&args.checkpoint)?;
    let mut backbone = Backbone::new(ckpt.backbone_config.clone(), 0)?;
    checkpoint::restore_weights(&mut backbone, &ckpt.weights)?;

    #[derive(Serialize)]
    struct Summary<'a> {
        format_version: u32,
        step: u64,
        epoch: u64,
        parameters: usize,
        weight_tensors: usize,
        noise_sigma: [f64; 3],
        backbone: &'a BackboneConfig,
        train: &'a TrainConfig,
        prep: &'a PrepConfig,
    }
    let summary = Summary {
        format_version: ckpt.format_version,
        step: ckpt.step,
        epoch: ckpt.epoch,
        parameters: backbone.parameter_count(),
        weight_tensors: ckpt.weights.len(),
        noise_sigma: [
            ckpt.noise_log_sigma[0].exp(),
            ckpt.noise_log_sigma[1].exp(),
            ckpt.noise_log_sigma[2].exp(),
        ],
        backbone: &ckpt.backbone_config,
        train: &ckpt.train_config,
        prep: &ckpt.prep_config,
    };
    let json = serde_json::to_string_pretty(&summary)
        .map_err(|e| Error::Checkpoint(format!("serializing summary: {e}")))?;
    println!("{json}");
    Ok(())
}
