//! Iterative parallel unmasking.
//!
//! Decoding starts with every target position masked. Each step scores the
//! remaining masked positions, reveals a scheduled number of them chosen by
//! Gumbel-top-k over temperature-scaled confidence, and fixes each revealed
//! position to its argmax token. Revealed positions never change again.

use std::time::Instant;

use maskgrid_tensor::Scalar;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{AttentionMode, Input, LogitsGrid, Model};
use crate::error::{Error, Result};
use crate::grid::TokenGrid;
use crate::rng::{substream, Stream};

/// Cumulative unmasked fraction after step `n` of `steps`.
pub fn schedule_ratio(n: usize, steps: usize, tau: f64) -> f64 {
    if n >= steps {
        return 1.0;
    }
    let x = n as f64 / steps as f64;
    tau * x / (1.0 + (tau - 1.0) * x)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnmaskSchedule {
    pub steps: usize,
    pub tau: f64,
    /// `r_1..r_N`, with `r_N = 1`.
    pub ratios: Vec<f64>,
    /// Positions revealed at each step; sums to the masked total.
    pub counts: Vec<usize>,
}

pub fn build_schedule(steps: usize, tau: f64, total: usize) -> Result<UnmaskSchedule> {
    if steps == 0 {
        return Err(Error::Input("schedule needs at least one step".into()));
    }
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Input(format!("schedule shift must be positive, got {tau}")));
    }
    if total == 0 {
        return Err(Error::Input("nothing to unmask".into()));
    }
    let ratios: Vec<f64> = (1..=steps).map(|n| schedule_ratio(n, steps, tau)).collect();
    let revealed = |r: f64| (r * total as f64).round() as usize;
    let mut prev = 0;
    let counts = ratios
        .iter()
        .map(|&r| {
            let now = revealed(r);
            let c = now - prev;
            prev = now;
            c
        })
        .collect();
    Ok(UnmaskSchedule {
        steps,
        tau,
        ratios,
        counts,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub steps: usize,
    pub tau: f64,
    pub temperature: f64,
    pub guidance: f64,
    /// Confidence offset per codebook layer above the first.
    pub layer_penalty: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 32,
            tau: 0.1,
            temperature: 5.0,
            guidance: 2.0,
            layer_penalty: 0.5,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.steps == 0 || !(self.tau > 0.0) {
            return bad("steps must be positive and tau > 0");
        }
        if !(self.temperature > 0.0) {
            return bad("temperature must be positive");
        }
        if !(self.guidance >= 0.0 && self.layer_penalty >= 0.0) {
            return bad("guidance and layer_penalty must be non-negative");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CharClass {
    Cjk,
    Latin,
    Digit,
    SpacePunct,
    Other,
}

pub fn classify(ch: char) -> CharClass {
    let u = ch as u32;
    let cjk = matches!(u,
        0x3040..=0x30FF | 0x3400..=0x4DBF | 0x4E00..=0x9FFF | 0xAC00..=0xD7AF | 0xF900..=0xFAFF | 0x20000..=0x2FA1F);
    if cjk {
        CharClass::Cjk
    } else if ch.is_numeric() {
        CharClass::Digit
    } else if ch.is_whitespace()
        || ch.is_ascii_punctuation()
        || matches!(u, 0x2000..=0x206F | 0x3000..=0x303F | 0xFF00..=0xFF0F | 0xFF1A..=0xFF20)
    {
        CharClass::SpacePunct
    } else if ch.is_ascii_alphabetic() || (matches!(u, 0x00C0..=0x024F | 0x1E00..=0x1EFF) && ch.is_alphabetic()) {
        CharClass::Latin
    } else {
        CharClass::Other
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DurationWeights {
    pub cjk: f64,
    pub latin: f64,
    pub digit: f64,
    pub space_punct: f64,
    pub other: f64,
    /// Acoustic frames per second, for converting durations to frame counts.
    pub frame_rate: f64,
}

impl Default for DurationWeights {
    fn default() -> Self {
        Self {
            cjk: 1.0,
            latin: 0.4,
            digit: 0.6,
            space_punct: 0.1,
            other: 0.4,
            frame_rate: 25.0,
        }
    }
}

impl DurationWeights {
    pub fn weight(&self, ch: char) -> f64 {
        match classify(ch) {
            CharClass::Cjk => self.cjk,
            CharClass::Latin => self.latin,
            CharClass::Digit => self.digit,
            CharClass::SpacePunct => self.space_punct,
            CharClass::Other => self.other,
        }
    }

    pub fn total(&self, text: &str) -> f64 {
        text.chars().map(|c| self.weight(c)).sum()
    }

    /// Frame count for `seconds`, rounded half up, at least one.
    pub fn frames(&self, seconds: f64) -> usize {
        ((seconds * self.frame_rate + 0.5).floor() as usize).max(1)
    }
}

/// Target duration from the prompt's duration scaled by the ratio of
/// character weight totals.
pub fn estimate_duration(prompt_text: &str, target_text: &str, prompt_seconds: f64, weights: &DurationWeights) -> Result<f64> {
    if prompt_text.is_empty() {
        return Err(Error::Input("empty prompt text".into()));
    }
    if !(prompt_seconds > 0.0) {
        return Err(Error::Input(format!("prompt duration must be positive, got {prompt_seconds}")));
    }
    let w_prompt = weights.total(prompt_text);
    if !(w_prompt > 0.0) {
        return Err(Error::Input("prompt text has zero total weight".into()));
    }
    Ok(prompt_seconds * weights.total(target_text) / w_prompt)
}

/// Token-level variant with unit weight per token, returning frames.
pub fn estimate_frames(prompt_tokens: usize, target_tokens: usize, prompt_frames: usize) -> Result<usize> {
    if prompt_tokens == 0 || prompt_frames == 0 {
        return Err(Error::Input("empty prompt".into()));
    }
    let f = prompt_frames as f64 * target_tokens as f64 / prompt_tokens as f64;
    Ok(((f + 0.5).floor() as usize).max(1))
}

/// `u + s·(c − u)`; at `s = 1` the conditional scores pass through as-is.
pub fn guide(cond: &[f64], uncond: Option<&[f64]>, scale: f64) -> Vec<f64> {
    match uncond {
        Some(u) if scale != 1.0 => cond.iter().zip(u).map(|(&c, &u)| u + scale * (c - u)).collect(),
        _ => cond.to_vec(),
    }
}

fn log_softmax(row: &[impl Scalar]) -> Vec<f64> {
    let max = row.iter().map(|x| x.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|x| (x.as_f64() - max).exp()).sum::<f64>().ln();
    row.iter().map(|x| x.as_f64() - lse).collect()
}

/// First index of the maximum over `scores[..limit]`.
fn argmax(scores: &[f64], limit: usize) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, &s) in scores[..limit].iter().enumerate() {
        if s > best.1 {
            best = (i, s);
        }
    }
    best
}

pub fn gumbel(rng: &mut impl Rng) -> f64 {
    let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    -(-u.ln()).ln()
}

/// Indices of the `k` largest `scores[i]/temperature + G_i`, with one Gumbel
/// draw per score in order. Ties go to the lower index.
pub fn gumbel_top_k(scores: &[f64], k: usize, temperature: f64, rng: &mut impl Rng) -> Vec<usize> {
    let keys: Vec<f64> = scores.iter().map(|&s| s / temperature + gumbel(rng)).collect();
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| keys[b].total_cmp(&keys[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

#[derive(Clone, Debug)]
pub struct DecodeRequest {
    pub text: Vec<u32>,
    pub prompt: TokenGrid,
    pub target_frames: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    /// Target frames only.
    pub grid: TokenGrid,
    /// Target-relative `(t, c)` positions revealed at each step.
    pub reveals: Vec<Vec<(usize, usize)>>,
}

/// Decodes every request in one packed forward pass per step. Request `i`
/// draws from its own stream, so results do not depend on batch makeup.
pub fn decode_batch<F: Scalar>(model: &Model<F>, requests: &[DecodeRequest], config: &SamplerConfig) -> Result<Vec<Decoded>> {
    config.validate()?;
    let mcfg = &model.config;
    if mcfg.attention_mode != AttentionMode::Bidirectional {
        return Err(Error::Config("decoding needs a bidirectional model".into()));
    }
    if requests.is_empty() {
        return Ok(Vec::new());
    }
    let c_count = mcfg.codebooks;
    let mask = mcfg.mask_id();
    let vocab = mcfg.codebook_vocab - 1;
    let null_text = [mcfg.null_text_id()];
    let guided = config.guidance != 1.0;

    let mut grids = Vec::with_capacity(requests.len());
    let mut schedules = Vec::with_capacity(requests.len());
    for r in requests {
        if r.target_frames == 0 {
            return Err(Error::Input("target length must be at least one frame".into()));
        }
        if r.prompt.frames() > 0 && r.prompt.codebooks() != c_count {
            return Err(Error::Input("prompt codebooks do not match the model".into()));
        }
        let target = TokenGrid::filled(r.target_frames, c_count, mask);
        grids.push(r.prompt.append(&target)?);
        schedules.push(build_schedule(config.steps, config.tau, r.target_frames * c_count)?);
    }
    let mut rngs: Vec<ChaCha8Rng> = (0..requests.len())
        .map(|i| substream(config.seed, Stream::Decode, i as u64))
        .collect();
    let mut reveals = vec![Vec::with_capacity(config.steps); requests.len()];

    for step in 0..config.steps {
        let mut inputs: Vec<Input<'_>> = requests
            .iter()
            .zip(&grids)
            .map(|(r, g)| Input { text: &r.text, grid: g })
            .collect();
        if guided {
            inputs.extend(grids.iter().map(|g| Input { text: &null_text, grid: g }));
        }
        let logits: Vec<LogitsGrid<F>> = model.forward_batch(&inputs)?;
        let mut updates = Vec::with_capacity(requests.len());
        for (i, r) in requests.iter().enumerate() {
            let offset = r.prompt.frames();
            let grid = &grids[i];
            let mut positions = Vec::new();
            let mut confidence = Vec::new();
            let mut tokens = Vec::new();
            for t in offset..grid.frames() {
                for c in 0..c_count {
                    if grid.get(t, c) != mask {
                        continue;
                    }
                    let cond = log_softmax(logits[i].row(t, c));
                    let uncond = guided.then(|| log_softmax(logits[requests.len() + i].row(t, c)));
                    let g = guide(&cond, uncond.as_deref(), config.guidance);
                    if g.iter().any(|x| !x.is_finite()) {
                        return Err(Error::NonFiniteLogits);
                    }
                    let (token, best) = argmax(&g, vocab);
                    positions.push((t, c));
                    confidence.push(best - config.layer_penalty * c as f64);
                    tokens.push(token as u32);
                }
            }
            let k = schedules[i].counts[step].min(positions.len());
            let chosen = gumbel_top_k(&confidence, k, config.temperature, &mut rngs[i]);
            updates.push((chosen, positions, tokens));
        }
        for (i, (chosen, positions, tokens)) in updates.into_iter().enumerate() {
            let offset = requests[i].prompt.frames();
            let mut step_reveals = Vec::with_capacity(chosen.len());
            for j in chosen {
                let (t, c) = positions[j];
                grids[i].set(t, c, tokens[j]);
                step_reveals.push((t - offset, c));
            }
            reveals[i].push(step_reveals);
        }
    }
    Ok(requests
        .iter()
        .zip(grids)
        .zip(reveals)
        .map(|((r, g), reveals)| Decoded {
            grid: g.frames_range(r.prompt.frames()..g.frames()),
            reveals,
        })
        .collect())
}

pub fn decode<F: Scalar>(
    model: &Model<F>,
    text: &[u32],
    prompt: &TokenGrid,
    target_frames: usize,
    config: &SamplerConfig,
) -> Result<TokenGrid> {
    let req = DecodeRequest {
        text: text.to_vec(),
        prompt: prompt.clone(),
        target_frames,
    };
    Ok(decode_batch(model, &[req], config)?.remove(0).grid)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub batch: usize,
    pub steps: usize,
    pub wall_ms_per_frame: f64,
}

/// Median wall time per generated frame over `runs` timed repetitions of
/// every `(batch, steps)` cell. Every cell is warmed up once, then the runs
/// visit the cells round-robin so drift in machine state is shared evenly.
pub fn bench_decode<F: Scalar>(
    model: &Model<F>,
    request: &DecodeRequest,
    batch_sizes: &[usize],
    step_counts: &[usize],
    runs: usize,
    config: &SamplerConfig,
) -> Result<Vec<BenchRow>> {
    if request.target_frames == 0 {
        return Err(Error::Input("target length must be at least one frame".into()));
    }
    if runs == 0 || batch_sizes.contains(&0) {
        return Err(Error::Input("runs and batch sizes must be positive".into()));
    }
    let cells: Vec<(usize, usize, SamplerConfig)> = batch_sizes
        .iter()
        .flat_map(|&batch| {
            step_counts.iter().map(move |&steps| {
                let cfg = SamplerConfig {
                    steps,
                    ..config.clone()
                };
                (batch, steps, cfg)
            })
        })
        .collect();
    let batches: Vec<Vec<DecodeRequest>> = cells.iter().map(|c| vec![request.clone(); c.0]).collect();
    for ((_, _, cfg), requests) in cells.iter().zip(&batches) {
        decode_batch(model, requests, cfg)?;
    }
    let mut times = vec![Vec::with_capacity(runs); cells.len()];
    for _ in 0..runs {
        for (((_, _, cfg), requests), t) in cells.iter().zip(&batches).zip(&mut times) {
            let start = Instant::now();
            decode_batch(model, requests, cfg)?;
            t.push(start.elapsed().as_secs_f64() * 1e3);
        }
    }
    Ok(cells
        .iter()
        .zip(times)
        .map(|(&(batch, steps, _), mut t)| {
            t.sort_by(f64::total_cmp);
            let median = if runs % 2 == 1 {
                t[runs / 2]
            } else {
                0.5 * (t[runs / 2 - 1] + t[runs / 2])
            };
            BenchRow {
                batch,
                steps,
                wall_ms_per_frame: median / (batch * request.target_frames) as f64,
            }
        })
        .collect())
}

pub fn write_bench_csv(path: &std::path::Path, rows: &[BenchRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(Error::io(path))
}
