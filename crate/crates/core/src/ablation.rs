//! Toy-corpus evaluation and the masking / initialization ablations.

use maskgrid_tensor::Scalar;
use serde::{Deserialize, Serialize};

use crate::backbone::{transfer_weights, AttentionMode, Model, ModelConfig};
use crate::error::{Error, Result};
use crate::grid::{Sequence, TokenGrid};
use crate::masking::{batch_loss, plan_full_random, MaskedItem, Strategy};
use crate::rng::{substream, Stream};
use crate::sampler::{decode_batch, estimate_frames, DecodeRequest, SamplerConfig};
use crate::toylang::{kl_divergence, oracle_posterior, toy_sim, toy_wer, SampleKind, ToySample, ToySpec};
use crate::trainer::{init_state, train, Objective, TrainConfig, TrainState};

/// Fixed full-codebook plans for held-out scoring: sample `i` always gets
/// the plan drawn from eval stream `i` of `seed`.
pub fn heldout_items(samples: &[ToySample], mask_id: u32, seed: u64) -> Result<Vec<MaskedItem>> {
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let seq = s.sequence();
            let mut rng = substream(seed, Stream::Eval, i as u64);
            let plan = plan_full_random(seq.grid.frames(), seq.grid.codebooks(), seq.prompt_len, &mut rng)?;
            MaskedItem::new(&seq, &plan, mask_id)
        })
        .collect()
}

/// Mean negative log-likelihood per scored position over `items`, evaluated
/// in chunks of `chunk` sequences.
pub fn heldout_nll<F: Scalar>(model: &Model<F>, items: &[MaskedItem], chunk: usize) -> Result<f64> {
    let (mut sum, mut count) = (0.0, 0);
    for part in items.chunks(chunk.max(1)) {
        let r = batch_loss(model, part)?;
        sum += r.sum;
        count += r.count;
    }
    Ok(sum / count as f64)
}

fn log_softmax(row: &[impl Scalar]) -> Vec<f64> {
    let max = row.iter().map(|x| x.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|x| (x.as_f64() - max).exp()).sum::<f64>().ln();
    row.iter().map(|x| x.as_f64() - lse).collect()
}

/// Mean `KL(oracle ‖ model)` over the first `positions` masked positions of
/// the held-out plans. Only clean samples qualify.
pub fn probe_kl<F: Scalar>(model: &Model<F>, spec: &ToySpec, samples: &[ToySample], positions: usize, seed: u64) -> Result<f64> {
    let clean: Vec<ToySample> = samples.iter().filter(|s| s.kind == SampleKind::Clean).cloned().collect();
    let items = heldout_items(&clean, spec.mask_id(), seed)?;
    let (mut total, mut n) = (0.0, 0);
    for (s, item) in clean.iter().zip(&items) {
        if n >= positions {
            break;
        }
        let post = oracle_posterior(spec, &s.symbols(spec), &item.input)?;
        let logits = model.forward(&item.text, &item.input)?;
        for (&(t, c), p) in post.positions.iter().zip(&post.probs) {
            if n >= positions {
                break;
            }
            total += kl_divergence(p, &log_softmax(logits.row(t, c)));
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Input("probe set has no masked positions".into()));
    }
    Ok(total / n as f64)
}

/// Mean toy metrics over samples whose clean prompt identifies a unique
/// speaker; the rest are counted in `ambiguous` and left out.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DecodeScores {
    pub toy_wer: f64,
    pub toy_sim: f64,
    pub count: usize,
    pub ambiguous: usize,
}

/// How the prompt is presented when scoring a sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PromptText {
    /// The sample's own text.
    AsIs,
    /// The sample's text without any instruct token.
    StripInstruct,
}

/// Clean rendering of a sample's prompt region.
pub fn clean_prompt(spec: &ToySpec, sample: &ToySample) -> TokenGrid {
    let symbols = sample.symbols(spec);
    spec.render(&symbols[..sample.prompt_len / spec.params.frames_per_symbol], sample.speaker)
}

/// One decode request per sample: its prompt frames, its text, and a target
/// length from the duration estimate.
pub fn decode_requests(spec: &ToySpec, samples: &[ToySample], prompt_text: PromptText) -> Result<Vec<DecodeRequest>> {
    let l = spec.params.frames_per_symbol;
    samples
        .iter()
        .map(|s| {
            let symbols = s.symbols(spec);
            let prompt_symbols = s.prompt_len / l;
            let target_frames = estimate_frames(prompt_symbols, symbols.len() - prompt_symbols, s.prompt_len)?;
            let text = match prompt_text {
                PromptText::AsIs => s.text.clone(),
                PromptText::StripInstruct => symbols,
            };
            Ok(DecodeRequest {
                text,
                prompt: s.grid.frames_range(0..s.prompt_len),
                target_frames,
            })
        })
        .collect()
}

/// Decoded targets for `samples`, in chunks of `chunk`; chunk `k` decodes
/// with seed `sampler.seed + k`.
pub fn decode_samples<F: Scalar>(
    model: &Model<F>,
    spec: &ToySpec,
    samples: &[ToySample],
    sampler: &SamplerConfig,
    prompt_text: PromptText,
    chunk: usize,
) -> Result<Vec<TokenGrid>> {
    let requests = decode_requests(spec, samples, prompt_text)?;
    let mut out = Vec::with_capacity(requests.len());
    for (k, part) in requests.chunks(chunk.max(1)).enumerate() {
        let cfg = SamplerConfig {
            seed: sampler.seed.wrapping_add(k as u64),
            ..sampler.clone()
        };
        out.extend(decode_batch(model, part, &cfg)?.into_iter().map(|d| d.grid));
    }
    Ok(out)
}

/// Scores decoded targets against the clean references. Similarity is
/// measured against the clean rendering of the prompt, so corrupted prompts
/// can still be scored.
pub fn score_decoded(spec: &ToySpec, samples: &[ToySample], decoded: &[TokenGrid]) -> Result<DecodeScores> {
    if samples.len() != decoded.len() {
        return Err(Error::Input(format!("{} samples but {} decoded grids", samples.len(), decoded.len())));
    }
    let mut scores = DecodeScores::default();
    for (s, grid) in samples.iter().zip(decoded) {
        let sim = match toy_sim(spec, grid, &clean_prompt(spec, s)) {
            Err(Error::AmbiguousPrompt) => {
                scores.ambiguous += 1;
                continue;
            }
            other => other?,
        };
        scores.toy_wer += toy_wer(spec, grid, &s.reference(spec))?;
        scores.toy_sim += sim;
        scores.count += 1;
    }
    if scores.count == 0 {
        return Err(Error::Input("no sample has an unambiguous prompt".into()));
    }
    scores.toy_wer /= scores.count as f64;
    scores.toy_sim /= scores.count as f64;
    Ok(scores)
}

pub fn decode_scores<F: Scalar>(
    model: &Model<F>,
    spec: &ToySpec,
    samples: &[ToySample],
    sampler: &SamplerConfig,
    prompt_text: PromptText,
    chunk: usize,
) -> Result<DecodeScores> {
    if samples.is_empty() {
        return Err(Error::Input("no samples to decode".into()));
    }
    let decoded = decode_samples(model, spec, samples, sampler, prompt_text, chunk)?;
    score_decoded(spec, samples, &decoded)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Init {
    Random,
    ArWarmstart,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationCell {
    pub strategy: Strategy,
    pub init: Init,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Next-frame pretraining for warm-started cells.
    pub ar_train: TrainConfig,
    /// Toy-WER is also recorded every this many updates when set.
    pub eval_every: Option<u64>,
    pub eval_samples: usize,
    pub eval_seed: u64,
    pub sampler: SamplerConfig,
    pub decode_chunk: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            ar_train: TrainConfig::default(),
            eval_every: None,
            eval_samples: 64,
            eval_seed: 0,
            sampler: SamplerConfig::default(),
            decode_chunk: 32,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub updates: u64,
    pub toy_wer: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub strategy: Strategy,
    pub init: Init,
    pub seed: u64,
    pub updates: u64,
    pub heldout_nll: f64,
    pub toy_wer: f64,
    pub toy_sim: f64,
    pub curve: Vec<CurvePoint>,
}

/// Corpora for one ablation: masked training data, an independent
/// next-frame pretraining corpus, and clean held-out samples.
pub struct AblationData<'a> {
    pub spec: &'a ToySpec,
    pub train: &'a [Sequence],
    pub pretrain: &'a [Sequence],
    pub heldout: &'a [ToySample],
}

/// Causal pretraining on `pretrain`, then transfer into the bidirectional
/// configuration.
pub fn ar_warm_start<F: Scalar>(model_config: &ModelConfig, ar: &TrainConfig, pretrain: &[Sequence], seed: u64) -> Result<Model<F>> {
    let mut causal = model_config.clone();
    causal.attention_mode = AttentionMode::Causal;
    let mut state: TrainState<F> = init_state(&causal, seed)?;
    train(&mut state, pretrain, ar, Objective::NextFrame, |_, _| Ok(true))?;
    let mut target = model_config.clone();
    target.attention_mode = AttentionMode::Bidirectional;
    transfer_weights(&state.model, &target)
}

pub fn run_cell<F: Scalar>(config: &AblationConfig, cell: &AblationCell, data: &AblationData<'_>) -> Result<AblationRow> {
    let mut model_config = config.model.clone();
    model_config.attention_mode = AttentionMode::Bidirectional;
    let train_cfg = TrainConfig {
        strategy: cell.strategy,
        seed: cell.seed,
        ..config.train.clone()
    };
    let mut state: TrainState<F> = match cell.init {
        Init::Random => init_state(&model_config, cell.seed)?,
        Init::ArWarmstart => {
            let ar = TrainConfig {
                seed: cell.seed,
                ..config.ar_train.clone()
            };
            TrainState::new(ar_warm_start(&model_config, &ar, data.pretrain, cell.seed)?, cell.seed)
        }
    };
    let eval_set: Vec<ToySample> = data
        .heldout
        .iter()
        .filter(|s| s.kind == SampleKind::Clean)
        .take(config.eval_samples)
        .cloned()
        .collect();
    let scores = |m: &Model<F>| decode_scores(m, data.spec, &eval_set, &config.sampler, PromptText::AsIs, config.decode_chunk);
    let mut curve = Vec::new();
    train(&mut state, data.train, &train_cfg, Objective::Masked, |st, _| {
        if let Some(every) = config.eval_every {
            if st.step % every == 0 && st.step < train_cfg.total_updates {
                curve.push(CurvePoint {
                    updates: st.step,
                    toy_wer: scores(&st.model)?.toy_wer,
                });
            }
        }
        Ok(true)
    })?;
    let final_scores = scores(&state.model)?;
    curve.push(CurvePoint {
        updates: state.step,
        toy_wer: final_scores.toy_wer,
    });
    let items = heldout_items(data.heldout, model_config.mask_id(), config.eval_seed)?;
    Ok(AblationRow {
        strategy: cell.strategy,
        init: cell.init,
        seed: cell.seed,
        updates: state.step,
        heldout_nll: heldout_nll(&state.model, &items, config.decode_chunk)?,
        toy_wer: final_scores.toy_wer,
        toy_sim: final_scores.toy_sim,
        curve,
    })
}

/// Worker count from `MASKGRID_THREADS`, defaulting to the available cores.
pub fn worker_threads() -> usize {
    std::env::var("MASKGRID_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Trains and scores every cell; cells run concurrently on up to
/// [`worker_threads`] threads and rows come back in cell order.
pub fn run_ablation<F: Scalar>(config: &AblationConfig, cells: &[AblationCell], data: &AblationData<'_>) -> Result<Vec<AblationRow>> {
    use rayon::prelude::*;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(worker_threads())
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| cells.par_iter().map(|cell| run_cell::<F>(config, cell, data)).collect())
}

/// Earliest update at which `curve` reaches `target` toy-WER.
pub fn updates_to_reach(curve: &[CurvePoint], target: f64) -> Option<u64> {
    curve.iter().find(|p| p.toy_wer <= target).map(|p| p.updates)
}

/// Sequences of `samples`, for training.
pub fn sequences(samples: &[ToySample]) -> Vec<Sequence> {
    samples.iter().map(ToySample::sequence).collect()
}
