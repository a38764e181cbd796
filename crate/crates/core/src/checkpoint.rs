//! Single-file JSON checkpoints holding everything a run needs to resume
//! bit-exactly: configs, weights, noise parameters, optimizer moments, and
//! the sampling RNG position. Tensor data rides as base64 little-endian
//! f32 so values round-trip exactly; writes go through a temp file plus
//! rename so a crash never leaves a torn checkpoint.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::guidance::GuidanceBounds;
use crate::nn::{ParamVisitor, Parameterized};
use crate::optim::{Adam, AdamSlot, NoiseAdam};
use crate::pairs::PrepConfig;
use crate::trainer::TrainConfig;

pub const FORMAT_VERSION: u32 = 1;

/// One tensor: shape plus base64 little-endian f32 payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorData {
    pub shape: Vec<usize>,
    pub data: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentData {
    pub m: String,
    pub v: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerData {
    pub t: u64,
    pub lr: f64,
    pub moments: BTreeMap<String, MomentData>,
}

/// ChaCha stream position: seed bytes plus 128-bit word offset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub word_pos_hi: u64,
    pub word_pos_lo: u64,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        let pos = rng.get_word_pos();
        Self {
            seed: B64.encode(rng.get_seed()),
            word_pos_hi: (pos >> 64) as u64,
            word_pos_lo: pos as u64,
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bytes = B64
            .decode(&self.seed)
            .map_err(|e| Error::Checkpoint(format!("bad rng seed encoding: {e}")))?;
        let seed: [u8; 32] = bytes
            .try_into()
            .map_err(|_| Error::Checkpoint("rng seed is not 32 bytes".to_string()))?;
        let mut rng = <ChaCha8Rng as rand::SeedableRng>::from_seed(seed);
        rng.set_word_pos(((self.word_pos_hi as u128) << 64) | self.word_pos_lo as u128);
        Ok(rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub backbone_config: BackboneConfig,
    pub train_config: TrainConfig,
    pub prep_config: PrepConfig,
    pub bounds: GuidanceBounds,
    pub step: u64,
    pub epoch: u64,
    pub weights: BTreeMap<String, TensorData>,
    pub noise_log_sigma: [f64; 3],
    pub optimizer: OptimizerData,
    pub noise_optimizer: NoiseAdam,
    pub rng: RngState,
}

fn encode_f32(values: &[f32]) -> String {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    B64.encode(bytes)
}

fn decode_f32(data: &str, expected: usize) -> Result<Vec<f32>> {
    let bytes = B64
        .decode(data)
        .map_err(|e| Error::Checkpoint(format!("bad tensor encoding: {e}")))?;
    if bytes.len() != expected * 4 {
        return Err(Error::Checkpoint(format!(
            "tensor payload holds {} bytes, expected {}",
            bytes.len(),
            expected * 4
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// Snapshot every parameter tensor by canonical name.
pub fn collect_weights(model: &mut impl Parameterized) -> BTreeMap<String, TensorData> {
    struct Collect(BTreeMap<String, TensorData>);
    impl ParamVisitor for Collect {
        fn visit(&mut self, name: &str, shape: &[usize], value: &mut [f32], _: &mut [f32]) {
            self.0.insert(
                name.to_string(),
                TensorData {
                    shape: shape.to_vec(),
                    data: encode_f32(value),
                },
            );
        }
    }
    let mut c = Collect(BTreeMap::new());
    model.visit_params("", &mut c);
    c.0
}

/// Write stored tensors back into the model, by name. Any missing,
/// unexpected, or shape-mismatched tensors fail with all offenders listed.
pub fn restore_weights(
    model: &mut impl Parameterized,
    weights: &BTreeMap<String, TensorData>,
) -> Result<()> {
    struct Restore<'a> {
        weights: &'a BTreeMap<String, TensorData>,
        seen: BTreeSet<String>,
        problems: Vec<String>,
    }
    impl ParamVisitor for Restore<'_> {
        fn visit(&mut self, name: &str, shape: &[usize], value: &mut [f32], _: &mut [f32]) {
            self.seen.insert(name.to_string());
            let Some(tensor) = self.weights.get(name) else {
                self.problems.push(format!("missing in checkpoint: {name}"));
                return;
            };
            if tensor.shape != shape {
                self.problems.push(format!(
                    "shape mismatch for {name}: checkpoint {:?} vs model {:?}",
                    tensor.shape, shape
                ));
                return;
            }
            match decode_f32(&tensor.data, value.len()) {
                Ok(decoded) => value.copy_from_slice(&decoded),
                Err(e) => self.problems.push(format!("{name}: {e}")),
            }
        }
    }
    let mut r = Restore {
        weights,
        seen: BTreeSet::new(),
        problems: Vec::new(),
    };
    model.visit_params("", &mut r);
    for name in weights.keys() {
        if !r.seen.contains(name) {
            r.problems.push(format!("not in model: {name}"));
        }
    }
    if !r.problems.is_empty() {
        return Err(Error::Checkpoint(format!(
            "checkpoint does not match model: {}",
            r.problems.join("; ")
        )));
    }
    Ok(())
}

pub fn optimizer_to_data(adam: &Adam) -> OptimizerData {
    OptimizerData {
        t: adam.t,
        lr: adam.lr,
        moments: adam
            .slots
            .iter()
            .map(|(name, slot)| {
                (
                    name.clone(),
                    MomentData {
                        m: encode_f32(&slot.m),
                        v: encode_f32(&slot.v),
                    },
                )
            })
            .collect(),
    }
}

pub fn optimizer_from_data(data: &OptimizerData) -> Result<Adam> {
    let mut slots = BTreeMap::new();
    for (name, moment) in &data.moments {
        let m_bytes = B64
            .decode(&moment.m)
            .map_err(|e| Error::Checkpoint(format!("bad moment encoding for {name}: {e}")))?;
        let len = m_bytes.len() / 4;
        slots.insert(
            name.clone(),
            AdamSlot {
                m: decode_f32(&moment.m, len)?,
                v: decode_f32(&moment.v, len)?,
            },
        );
    }
    Ok(Adam {
        lr: data.lr,
        t: data.t,
        slots,
    })
}

/// Atomic write: serialize to `<path>.tmp`, then rename over the target.
pub fn save(checkpoint: &Checkpoint, path: &Path) -> Result<()> {
    let tmp = path.with_extension("json.tmp");
    {
        let file = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let mut writer = BufWriter::new(file);
        serde_json::to_writer(&mut writer, checkpoint)
            .map_err(|e| Error::Checkpoint(format!("serializing checkpoint: {e}")))?;
        writer.flush().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let checkpoint: Checkpoint = serde_json::from_reader(BufReader::new(file))
        .map_err(|e| Error::Checkpoint(format!("reading {}: {e}", path.display())))?;
    if checkpoint.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {} (supported: {FORMAT_VERSION})",
            checkpoint.format_version
        )));
    }
    Ok(checkpoint)
}
