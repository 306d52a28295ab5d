//! Calibration token sets and per-layer activation collection.

use std::fs;
use std::path::Path;

use rand::seq::index;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LayerId, ToyModel};
use crate::rng;
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenCorpus {
    tokens: Vec<u32>,
    vocab: usize,
}

impl TokenCorpus {
    pub fn new(tokens: Vec<u32>, vocab: usize) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::invalid("token corpus is empty"));
        }
        if let Some(t) = tokens.iter().find(|&&t| t as usize >= vocab) {
            return Err(Error::invalid(format!("token id {t} outside vocabulary of {vocab}")));
        }
        Ok(Self { tokens, vocab })
    }

    /// Bytes as token ids over a 256-entry vocabulary.
    pub fn from_text(bytes: &[u8]) -> Result<Self> {
        Self::new(bytes.iter().map(|&b| b as u32).collect(), 256)
    }

    /// Little-endian `u32` token ids.
    pub fn from_le_bytes(bytes: &[u8], vocab: usize) -> Result<Self> {
        if !bytes.len().is_multiple_of(4) {
            return Err(Error::Format(format!(
                "binary corpus length {} is not a multiple of 4",
                bytes.len()
            )));
        }
        let tokens = bytes
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Self::new(tokens, vocab)
    }

    pub fn load_text(path: &Path) -> Result<Self> {
        Self::from_text(&fs::read(path)?)
    }

    pub fn load_bin(path: &Path, vocab: usize) -> Result<Self> {
        Self::from_le_bytes(&fs::read(path)?, vocab)
    }

    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.tokens.iter().flat_map(|t| t.to_le_bytes()).collect()
    }

    /// Seeded stream where each token depends on its predecessor most of the
    /// time, so next-token likelihood carries some signal.
    pub fn synthetic(len: usize, vocab: usize, seed: u64) -> Result<Self> {
        if vocab == 0 {
            return Err(Error::invalid("vocabulary must be non-empty"));
        }
        let mut r = rng::seeded(seed);
        let mut tokens = Vec::with_capacity(len);
        let mut prev = 0u32;
        for _ in 0..len {
            let t = if r.random_bool(0.6) {
                ((prev as u64 * 31 + 7 + r.random_range(0..3u64)) % vocab as u64) as u32
            } else {
                r.random_range(0..vocab as u32)
            };
            tokens.push(t);
            prev = t;
        }
        Self::new(tokens, vocab)
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    #[default]
    ConcatChunk,
    DropHead,
    DropRand,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CalibSet {
    pub sequences: Vec<Vec<u32>>,
    pub strategy: Strategy,
    pub seed: u64,
}

impl CalibSet {
    pub fn seq_len(&self) -> usize {
        self.sequences.first().map_or(0, Vec::len)
    }

    pub fn total_tokens(&self) -> usize {
        self.sequences.iter().map(Vec::len).sum()
    }
}

/// Tokens discarded ahead of each drop-head chunk.
pub fn drop_head_len(t: usize) -> usize {
    t / 4
}

pub fn required_tokens(strategy: Strategy, n: usize, t: usize) -> usize {
    match strategy {
        Strategy::ConcatChunk | Strategy::DropRand => n * t,
        Strategy::DropHead => n * (t + drop_head_len(t)),
    }
}

pub fn sample_calib(corpus: &TokenCorpus, strategy: Strategy, n: usize, t: usize, seed: u64) -> Result<CalibSet> {
    if n == 0 || t == 0 {
        return Err(Error::invalid("calibration needs at least one sequence of positive length"));
    }
    let required = required_tokens(strategy, n, t);
    let toks = corpus.tokens();
    if toks.len() < required {
        return Err(Error::InsufficientTokens { required, available: toks.len() });
    }
    let sequences = match strategy {
        Strategy::ConcatChunk => (0..n).map(|i| toks[i * t..(i + 1) * t].to_vec()).collect(),
        Strategy::DropHead => {
            let d = drop_head_len(t);
            (0..n).map(|i| toks[i * (t + d) + d..(i + 1) * (t + d)].to_vec()).collect()
        }
        Strategy::DropRand => {
            // Disjoint windows correspond one-to-one with n-subsets of
            // [0, len − nT + n); start_i = c_i + i·(T − 1).
            let slots = toks.len() - n * t + n;
            let mut r = rng::seeded(seed);
            let mut picks = index::sample(&mut r, slots, n).into_vec();
            picks.sort_unstable();
            picks
                .iter()
                .enumerate()
                .map(|(i, &c)| {
                    let start = c + i * (t - 1);
                    toks[start..start + t].to_vec()
                })
                .collect()
        }
    };
    Ok(CalibSet { sequences, strategy, seed })
}

/// Stacked full-precision inputs to `layer` over every calibration sequence.
pub fn collect_layer_inputs(model: &ToyModel, calib: &CalibSet, layer: &LayerId) -> Result<Matrix> {
    model.check_layer(layer)?;
    let mut parts = Vec::with_capacity(calib.sequences.len());
    for seq in &calib.sequences {
        let taps = model.forward_with_taps(seq)?;
        parts.push(taps.layer_input(layer).clone());
    }
    Matrix::vstack(&parts)
}
