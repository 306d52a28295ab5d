use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autobit::{ErrorMode, Solver};
use crate::calib::{sample_calib, CalibSet, Strategy, TokenCorpus};
use crate::error::{Error, Result};
use crate::model::ToyConfig;
use crate::preprocess::PreprocessOptions;
use crate::rng;

use super::refiners::RefinerSpec;
use super::sweep::{PrecisionMap, SweepOptions};

pub const SEED_ENV: &str = "QUANTKIT_SEED";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSource {
    /// Container to load; the bundled toy model is generated when absent.
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub toy: ToyConfig,
    /// Generation seed; derived from the run seed when absent.
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibOptions {
    /// UTF-8 text read as bytes; a synthetic corpus is used when absent.
    #[serde(default)]
    pub corpus: Option<PathBuf>,
    #[serde(default = "default_corpus_tokens")]
    pub synthetic_tokens: usize,
    #[serde(default)]
    pub strategy: Strategy,
    #[serde(default = "default_n")]
    pub n: usize,
    #[serde(default = "default_seq_len")]
    pub seq_len: usize,
    #[serde(default = "default_eval_n")]
    pub eval_n: usize,
}

fn default_corpus_tokens() -> usize {
    16384
}
fn default_n() -> usize {
    8
}
fn default_seq_len() -> usize {
    32
}
fn default_eval_n() -> usize {
    4
}

impl Default for CalibOptions {
    fn default() -> Self {
        Self {
            corpus: None,
            synthetic_tokens: default_corpus_tokens(),
            strategy: Strategy::default(),
            n: default_n(),
            seq_len: default_seq_len(),
            eval_n: default_eval_n(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AutobitOptions {
    pub bpw: f64,
    #[serde(default = "default_mode")]
    pub mode: ErrorMode,
    #[serde(default)]
    pub solver: Solver,
}

fn default_mode() -> ErrorMode {
    ErrorMode::ActAware
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub model: ModelSource,
    #[serde(default)]
    pub calib: CalibOptions,
    #[serde(default)]
    pub preprocess: PreprocessOptions,
    /// Per-layer formats, unless `plan` or `autobit` is set.
    #[serde(default)]
    pub precision: PrecisionMap,
    #[serde(default)]
    pub plan: Option<PathBuf>,
    #[serde(default)]
    pub autobit: Option<AutobitOptions>,
    #[serde(default)]
    pub sweep: SweepOptions,
    #[serde(default)]
    pub refiners: Vec<RefinerSpec>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub report: Option<PathBuf>,
}

impl PipelineConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: PipelineConfig = serde_json::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative paths inside it resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = Self::from_json(&fs::read_to_string(path)?)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.model.path, &mut cfg.calib.corpus, &mut cfg.plan, &mut cfg.output, &mut cfg.report].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.plan.is_some() && self.autobit.is_some() {
            return Err(Error::Config("`plan` and `autobit` are mutually exclusive".into()));
        }
        if self.calib.n == 0 || self.calib.eval_n == 0 || self.calib.seq_len < 2 {
            return Err(Error::Config("calibration needs n ≥ 1, eval_n ≥ 1 and seq_len ≥ 2".into()));
        }
        self.precision.default.validate()?;
        for s in self.precision.overrides.values() {
            s.validate()?;
        }
        self.sweep.gptq.validate()?;
        if let Some(q) = &self.sweep.qep {
            q.validate()?;
        }
        Ok(())
    }

    /// Explicit seed, then the environment, then the config, then zero.
    pub fn resolve_seed(&self, explicit: Option<u64>) -> Result<u64> {
        if let Some(s) = explicit {
            return Ok(s);
        }
        if let Ok(v) = std::env::var(SEED_ENV) {
            return v.trim().parse().map_err(|_| Error::Config(format!("{SEED_ENV}={v} is not an unsigned integer")));
        }
        Ok(self.seed.unwrap_or(0))
    }
}

/// Calibration and held-out evaluation sets, drawn from disjoint halves
/// of the corpus.
pub fn build_data(opts: &CalibOptions, vocab: usize, seed: u64) -> Result<(CalibSet, CalibSet)> {
    let corpus = match &opts.corpus {
        Some(p) => TokenCorpus::load_text(p)?,
        None => TokenCorpus::synthetic(opts.synthetic_tokens, vocab, rng::derive(seed, 4))?,
    };
    if corpus.vocab() > vocab {
        return Err(Error::Config(format!("corpus vocabulary {} exceeds model vocabulary {vocab}", corpus.vocab())));
    }
    let half = corpus.len() / 2;
    let head = TokenCorpus::new(corpus.tokens()[..half].to_vec(), corpus.vocab())?;
    let tail = TokenCorpus::new(corpus.tokens()[half..].to_vec(), corpus.vocab())?;
    let calib = sample_calib(&head, opts.strategy, opts.n, opts.seq_len, rng::derive(seed, 2))?;
    let eval = sample_calib(&tail, opts.strategy, opts.eval_n, opts.seq_len, rng::derive(seed, 3))?;
    Ok((calib, eval))
}

pub fn model_seed(src: &ModelSource, seed: u64) -> u64 {
    src.seed.unwrap_or_else(|| rng::derive(seed, 1))
}
