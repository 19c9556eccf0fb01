//! Binary checkpoints.
//!
//! Layout: one line of JSON (the header, terminated by `\n`) followed by the
//! raw little-endian `f64` parameter buffers in declaration order: feature
//! extractor `W0, b0, W1, b1, ...`, then the anchor weight, then the bait
//! weight when present.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BaitModel, Mlp, ParamGroup, WeightNormClassifier};
use crate::tensor::Tensor;

pub const FORMAT_NAME: &str = "bait-checkpoint";
pub const FORMAT_VERSION: u32 = 1;

/// Serializable position of a ChaCha8 generator.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        let seed = rng.get_seed().iter().map(|b| format!("{b:02x}")).collect();
        Self {
            seed,
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let bad = || Error::Checkpoint(format!("malformed rng seed {:?}", self.seed));
        if self.seed.len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, byte) in seed.iter_mut().enumerate() {
            *byte = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let word_pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| Error::Checkpoint(format!("malformed rng word position {:?}", self.word_pos)))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(word_pos);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
    widths: Vec<usize>,
    num_classes: usize,
    has_bait: bool,
    frozen: Vec<ParamGroup>,
    epoch: usize,
    rng: Option<RngState>,
    values: usize,
}

fn value_count(widths: &[usize], num_classes: usize, has_bait: bool) -> usize {
    let mlp: usize = widths.windows(2).map(|p| p[0] * p[1] + p[1]).sum();
    let d_f = widths.last().copied().unwrap_or(0);
    let heads = if has_bait { 2 } else { 1 };
    mlp + heads * num_classes * d_f
}

/// Dimensions a caller requires of a checkpoint it is about to use.
#[derive(Clone, Copy, Debug, Default)]
pub struct Expect {
    pub input_dim: Option<usize>,
    pub num_classes: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: BaitModel,
    pub epoch: usize,
    pub rng: Option<RngState>,
}

impl Checkpoint {
    pub fn new(model: BaitModel) -> Self {
        Self {
            model,
            epoch: 0,
            rng: None,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let m = &self.model;
        let widths = m.features().widths().to_vec();
        let has_bait = m.bait().is_some();
        let header = Header {
            format: FORMAT_NAME.to_string(),
            version: FORMAT_VERSION,
            num_classes: m.num_classes(),
            values: value_count(&widths, m.num_classes(), has_bait),
            widths,
            has_bait,
            frozen: m.frozen_groups().iter().copied().collect(),
            epoch: self.epoch,
            rng: self.rng.clone(),
        };
        let mut out = serde_json::to_vec(&header)?;
        out.push(b'\n');
        for group in ParamGroup::ALL {
            for t in m.group_params(group) {
                for v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let newline = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Checkpoint("missing header line".into()))?;
        let header: Header = serde_json::from_slice(&bytes[..newline])
            .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        if header.format != FORMAT_NAME {
            return Err(Error::Checkpoint(format!("not a checkpoint (format {:?})", header.format)));
        }
        if header.version != FORMAT_VERSION {
            return Err(Error::CheckpointVersion {
                found: header.version,
                expected: FORMAT_VERSION,
            });
        }
        if header.widths.len() < 2 || header.num_classes < 2 {
            return Err(Error::Checkpoint(format!(
                "header dimensions are degenerate: widths {:?}, {} classes",
                header.widths, header.num_classes
            )));
        }
        let expected = value_count(&header.widths, header.num_classes, header.has_bait);
        if header.values != expected {
            return Err(Error::Checkpoint(format!(
                "header disagreement: widths {:?} with {} classes imply {expected} values, header says {}",
                header.widths, header.num_classes, header.values
            )));
        }
        let body = &bytes[newline + 1..];
        if body.len() != expected * 8 {
            return Err(Error::Checkpoint(format!(
                "truncated or oversized body: expected {} bytes, found {}",
                expected * 8,
                body.len()
            )));
        }
        let mut values = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        let mut take = |shape: &[usize]| -> Result<Tensor> {
            let n = shape.iter().product();
            Tensor::new(shape.to_vec(), values.by_ref().take(n).collect())
        };

        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for p in header.widths.windows(2) {
            weights.push(take(&[p[0], p[1]])?);
            biases.push(take(&[p[1]])?);
        }
        let d_f = *header.widths.last().unwrap();
        let anchor = WeightNormClassifier::new(take(&[header.num_classes, d_f])?)?;
        let bait = if header.has_bait {
            Some(WeightNormClassifier::new(take(&[header.num_classes, d_f])?)?)
        } else {
            None
        };
        let mlp = Mlp::from_parts(&header.widths, weights, biases)?;
        let frozen: BTreeSet<ParamGroup> = header.frozen.into_iter().collect();
        let model = BaitModel::from_raw_parts(mlp, anchor, bait, frozen)?;
        Ok(Self {
            model,
            epoch: header.epoch,
            rng: header.rng,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Loads and checks the stored dimensions against what the caller needs.
    pub fn load_expecting(path: impl AsRef<Path>, expect: Expect) -> Result<Self> {
        let ckpt = Self::load(path)?;
        if let Some(d) = expect.input_dim {
            if ckpt.model.input_dim() != d {
                return Err(Error::Checkpoint(format!(
                    "checkpoint expects {}-dimensional inputs, data has {d}",
                    ckpt.model.input_dim()
                )));
            }
        }
        if let Some(k) = expect.num_classes {
            if ckpt.model.num_classes() != k {
                return Err(Error::Checkpoint(format!(
                    "checkpoint header has {} classes, expected {k}",
                    ckpt.model.num_classes()
                )));
            }
        }
        Ok(ckpt)
    }
}

pub fn save_checkpoint(model: &BaitModel, path: impl AsRef<Path>) -> Result<()> {
    Checkpoint::new(model.clone()).save(path)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<BaitModel> {
    Ok(Checkpoint::load(path)?.model)
}
