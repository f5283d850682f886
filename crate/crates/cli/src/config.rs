//! Run configuration: defaults, file overrides and flag overrides.

use std::path::Path;

use anyhow::{bail, Context, Result};
use maskgrid::backbone::ModelConfig;
use maskgrid::sampler::SamplerConfig;
use maskgrid::toylang::ToyParams;
use maskgrid::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenSection {
    pub count: usize,
    pub corrupt_fraction: f64,
    pub noisy_fraction: f64,
}

impl Default for GenSection {
    fn default() -> Self {
        Self {
            count: 1000,
            corrupt_fraction: 0.0,
            noisy_fraction: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeSection {
    /// Requests decoded together in one packed batch.
    pub chunk: usize,
    /// Decode only the first this many samples when set.
    pub limit: Option<usize>,
    pub strip_instruct: bool,
}

impl Default for DecodeSection {
    fn default() -> Self {
        Self {
            chunk: 32,
            limit: None,
            strip_instruct: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSection {
    /// `full`, `soundstorm` or `maskgct`.
    pub strategies: Vec<String>,
    /// `random` or `ar-warmstart`.
    pub inits: Vec<String>,
    /// Cell seeds; three consecutive seeds from the root seed when empty.
    pub seeds: Vec<u64>,
    pub eval_every: Option<u64>,
    pub eval_samples: usize,
}

impl Default for AblationSection {
    fn default() -> Self {
        Self {
            strategies: vec!["full".into(), "soundstorm".into(), "maskgct".into()],
            inits: vec!["random".into()],
            seeds: Vec::new(),
            eval_every: None,
            eval_samples: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSection {
    pub batch_sizes: Vec<usize>,
    pub step_counts: Vec<usize>,
    pub runs: usize,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self {
            batch_sizes: vec![1, 8],
            step_counts: vec![16, 32],
            runs: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Masked positions in the KL probe when a checkpoint is given.
    pub probe_positions: usize,
    pub heldout_chunk: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            probe_positions: 500,
            heldout_chunk: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ResampleSection {
    pub beta: f64,
}

impl Default for ResampleSection {
    fn default() -> Self {
        Self { beta: 0.8 }
    }
}

/// Every knob of every subcommand. The root seed overrides the seeds of
/// the train, pretraining and sampler sections when resolved.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub ar_train: TrainConfig,
    pub sampler: SamplerConfig,
    pub toy: ToyParams,
    pub gen: GenSection,
    pub decode: DecodeSection,
    pub ablation: AblationSection,
    pub bench: BenchSection,
    pub eval: EvalSection,
    pub resample: ResampleSection,
}

impl RunConfig {
    /// Defaults overlaid with the file at `path`, if any.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let bytes = std::fs::read(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_slice(&bytes).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Propagates the root seed and checks every section.
    pub fn resolve(mut self) -> Result<Self> {
        self.train.seed = self.seed;
        self.ar_train.seed = self.seed;
        self.sampler.seed = self.seed;
        self.model.validate()?;
        self.train.validate()?;
        self.ar_train.validate()?;
        self.sampler.validate()?;
        self.toy.validate()?;
        if self.decode.chunk == 0 {
            bail!("decode.chunk must be positive");
        }
        Ok(self)
    }

    /// Rejects a model whose vocabularies disagree with the toy language.
    pub fn check_model_matches_toy(&self, toy: &ToyParams) -> Result<()> {
        let m = &self.model;
        if m.codebooks != toy.codebooks || m.codebook_vocab != toy.codebook_vocab || m.text_vocab != toy.text_vocab {
            bail!(
                "model vocabularies (C={}, K={}, text={}) disagree with the toy language (C={}, K={}, text={})",
                m.codebooks,
                m.codebook_vocab,
                m.text_vocab,
                toy.codebooks,
                toy.codebook_vocab,
                toy.text_vocab
            );
        }
        Ok(())
    }

    pub fn to_pretty_json(&self) -> Result<Vec<u8>> {
        let mut out = serde_json::to_vec_pretty(self)?;
        out.push(b'\n');
        Ok(out)
    }
}
