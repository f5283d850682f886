//! Mask plans over the target region of a token grid and the masked
//! token-recovery loss.
//!
//! Full-codebook random masking draws one ratio per instance and masks every
//! target `(t, c)` independently at that ratio. The per-layer baselines pick
//! one codebook layer, mask within it, fully mask every layer above it, and
//! score only the chosen layer.

use std::f64::consts::FRAC_PI_2;

use maskgrid_tensor::{Scalar, Tape, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{forward_tape, Input, Model, ModelConfig};
use crate::error::{Error, Result};
use crate::grid::{Sequence, TokenGrid};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    FullRandom,
    Soundstorm,
    Maskgct,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::FullRandom, Strategy::Soundstorm, Strategy::Maskgct];

    pub fn spec(self) -> StrategySpec {
        match self {
            Strategy::FullRandom => StrategySpec {
                strategy: self,
                layer_law: None,
                ratio_law: RatioLaw::Uniform,
            },
            Strategy::Soundstorm => StrategySpec {
                strategy: self,
                layer_law: Some(LayerLaw::Uniform),
                ratio_law: RatioLaw::Cosine,
            },
            Strategy::Maskgct => StrategySpec {
                strategy: self,
                layer_law: Some(LayerLaw::LinearDecreasing),
                ratio_law: RatioLaw::Cosine,
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerLaw {
    Uniform,
    /// `P(c) ∝ C − c + 1` for 1-based layer `c`.
    LinearDecreasing,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RatioLaw {
    Uniform,
    /// `cos(u·π/2)` with `u ~ U(0, 1)`.
    Cosine,
}

impl RatioLaw {
    pub fn sample(self, rng: &mut impl Rng) -> f64 {
        let u: f64 = rng.gen();
        match self {
            RatioLaw::Uniform => u,
            RatioLaw::Cosine => (u * FRAC_PI_2).cos(),
        }
    }

    /// `E[r^a (1 − r)^b]` for small integer powers.
    fn moment(self, a: i32, b: i32) -> f64 {
        let f = |u: f64| {
            let r = match self {
                RatioLaw::Uniform => u,
                RatioLaw::Cosine => (u * FRAC_PI_2).cos(),
            };
            r.powi(a) * (1.0 - r).powi(b)
        };
        simpson(f, 20_000)
    }
}

fn simpson(f: impl Fn(f64) -> f64, n: usize) -> f64 {
    let h = 1.0 / n as f64;
    let inner: f64 = (1..n).map(|i| f(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 }).sum();
    (f(0.0) + f(1.0) + inner) * h / 3.0
}

/// How one strategy draws its layer and ratio. `layer_law` is `None` for
/// full-codebook masking.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategySpec {
    pub strategy: Strategy,
    pub layer_law: Option<LayerLaw>,
    pub ratio_law: RatioLaw,
}

impl StrategySpec {
    /// Probability of choosing each 0-based layer.
    pub fn layer_probs(&self, codebooks: usize) -> Vec<f64> {
        let weights: Vec<f64> = match self.layer_law {
            None | Some(LayerLaw::Uniform) => vec![1.0; codebooks],
            Some(LayerLaw::LinearDecreasing) => (0..codebooks).map(|c| (codebooks - c) as f64).collect(),
        };
        let total: f64 = weights.iter().sum();
        weights.into_iter().map(|w| w / total).collect()
    }

    fn sample_layer(&self, codebooks: usize, rng: &mut impl Rng) -> usize {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (c, p) in self.layer_probs(codebooks).into_iter().enumerate() {
            acc += p;
            if u < acc {
                return c;
            }
        }
        codebooks - 1
    }

    /// Mean and variance of `|loss_positions|` per plan, accounting for the
    /// redraw of plans that would score nothing.
    pub fn loss_count_moments(&self, target_frames: usize, codebooks: usize) -> (f64, f64) {
        let n = match self.layer_law {
            None => target_frames * codebooks,
            Some(_) => target_frames,
        } as f64;
        let (e_r, e_r2, e_rq) = (
            self.ratio_law.moment(1, 0),
            self.ratio_law.moment(2, 0),
            self.ratio_law.moment(1, 1),
        );
        let p_zero = match self.ratio_law {
            RatioLaw::Uniform => 1.0 / (n + 1.0),
            RatioLaw::Cosine => self.ratio_law.moment(0, n as i32),
        };
        let mean = n * e_r / (1.0 - p_zero);
        let second = (n * e_rq + n * n * e_r2) / (1.0 - p_zero);
        (mean, second - mean * mean)
    }

    /// `E|loss_positions|` of a single draw before any redraw.
    pub fn raw_loss_count_mean(&self, target_frames: usize, codebooks: usize) -> f64 {
        let n = match self.layer_law {
            None => target_frames * codebooks,
            Some(_) => target_frames,
        };
        n as f64 * self.ratio_law.moment(1, 0)
    }
}

/// Masked and scored positions for one sequence, as frame-major `(t, c)`
/// pairs over the whole grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskPlan {
    pub strategy: Strategy,
    pub ratio: f64,
    /// Chosen layer for per-layer strategies.
    pub layer: Option<usize>,
    pub masked: Vec<(usize, usize)>,
    pub loss_positions: Vec<(usize, usize)>,
}

fn check_region(frames: usize, prompt_len: usize) -> Result<()> {
    if prompt_len >= frames {
        return Err(Error::Input(format!("empty target region: prompt {prompt_len} of {frames} frames")));
    }
    Ok(())
}

/// One draw of `spec` with no redraw; the plan may be empty.
pub fn draw_once(spec: &StrategySpec, frames: usize, codebooks: usize, prompt_len: usize, rng: &mut impl Rng) -> MaskPlan {
    match spec.layer_law {
        None => {
            let ratio = spec.ratio_law.sample(rng);
            bernoulli_plan(spec.strategy, ratio, frames, codebooks, prompt_len, rng)
        }
        Some(_) => {
            let layer = spec.sample_layer(codebooks, rng);
            let ratio = spec.ratio_law.sample(rng);
            let mut masked = Vec::new();
            let mut loss_positions = Vec::new();
            for t in prompt_len..frames {
                if rng.gen::<f64>() < ratio {
                    masked.push((t, layer));
                    loss_positions.push((t, layer));
                }
                masked.extend((layer + 1..codebooks).map(|c| (t, c)));
            }
            MaskPlan {
                strategy: spec.strategy,
                ratio,
                layer: Some(layer),
                masked,
                loss_positions,
            }
        }
    }
}

fn bernoulli_plan(strategy: Strategy, ratio: f64, frames: usize, codebooks: usize, prompt_len: usize, rng: &mut impl Rng) -> MaskPlan {
    let mut masked = Vec::new();
    for t in prompt_len..frames {
        for c in 0..codebooks {
            if rng.gen::<f64>() < ratio {
                masked.push((t, c));
            }
        }
    }
    MaskPlan {
        strategy,
        ratio,
        layer: None,
        loss_positions: masked.clone(),
        masked,
    }
}

/// Draws plans from `spec` until one has something to score.
pub fn plan(spec: &StrategySpec, frames: usize, codebooks: usize, prompt_len: usize, rng: &mut impl Rng) -> Result<MaskPlan> {
    check_region(frames, prompt_len)?;
    if codebooks == 0 {
        return Err(Error::Input("grid has no codebooks".into()));
    }
    loop {
        let p = draw_once(spec, frames, codebooks, prompt_len, rng);
        if !p.loss_positions.is_empty() {
            return Ok(p);
        }
    }
}

pub fn plan_full_random(frames: usize, codebooks: usize, prompt_len: usize, rng: &mut impl Rng) -> Result<MaskPlan> {
    plan(&Strategy::FullRandom.spec(), frames, codebooks, prompt_len, rng)
}

pub fn plan_per_layer(spec: &StrategySpec, frames: usize, codebooks: usize, prompt_len: usize, rng: &mut impl Rng) -> Result<MaskPlan> {
    if spec.layer_law.is_none() {
        return Err(Error::Config("per-layer plan needs a layer law".into()));
    }
    plan(spec, frames, codebooks, prompt_len, rng)
}

/// Full-codebook plan at a fixed ratio, redrawn while empty.
pub fn plan_with_ratio(ratio: f64, frames: usize, codebooks: usize, prompt_len: usize, rng: &mut impl Rng) -> Result<MaskPlan> {
    check_region(frames, prompt_len)?;
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::Input(format!("ratio {ratio} outside (0, 1]")));
    }
    loop {
        let p = bernoulli_plan(Strategy::FullRandom, ratio, frames, codebooks, prompt_len, rng);
        if !p.masked.is_empty() {
            return Ok(p);
        }
    }
}

impl MaskPlan {
    /// Grid with every masked position replaced by `mask_id`.
    pub fn apply(&self, grid: &TokenGrid, mask_id: u32) -> TokenGrid {
        let mut out = grid.clone();
        for &(t, c) in &self.masked {
            out.set(t, c, mask_id);
        }
        out
    }

    pub fn check(&self, seq: &Sequence) -> Result<()> {
        let bad = self.masked.iter().chain(&self.loss_positions).find(|&&(t, c)| {
            t < seq.prompt_len || t >= seq.grid.frames() || c >= seq.grid.codebooks()
        });
        match bad {
            Some(p) => Err(Error::Input(format!("plan position {p:?} outside the target region"))),
            None if self.loss_positions.is_empty() => Err(Error::Input("plan scores no positions".into())),
            None => Ok(()),
        }
    }
}

/// A sequence prepared for the masked loss: network input plus the clean
/// ids to recover at `loss_positions`.
#[derive(Clone, Debug)]
pub struct MaskedItem {
    pub text: Vec<u32>,
    pub input: TokenGrid,
    pub clean: TokenGrid,
    pub loss_positions: Vec<(usize, usize)>,
}

impl MaskedItem {
    pub fn new(seq: &Sequence, plan: &MaskPlan, mask_id: u32) -> Result<Self> {
        plan.check(seq)?;
        Ok(Self {
            text: seq.text.clone(),
            input: plan.apply(&seq.grid, mask_id),
            clean: seq.grid.clone(),
            loss_positions: plan.loss_positions.clone(),
        })
    }
}

/// Summed negative log-likelihood over all items' loss positions, and the
/// number of positions, from one packed forward pass.
pub fn masked_loss_tape<'t, F: Scalar>(
    config: &ModelConfig,
    tape: &'t Tape<F>,
    params: &[Var<'t, F>],
    items: &[MaskedItem],
) -> Result<(Var<'t, F>, usize)> {
    let inputs: Vec<Input<'_>> = items.iter().map(|i| Input { text: &i.text, grid: &i.input }).collect();
    let out = forward_tape(config, tape, params, &inputs)?;
    let mut total: Option<Var<'t, F>> = None;
    let mut count = 0;
    for c in 0..config.codebooks {
        let mut rows = Vec::new();
        let mut targets = Vec::new();
        for (item, &off) in items.iter().zip(&out.frame_offsets) {
            for &(t, _) in item.loss_positions.iter().filter(|p| p.1 == c) {
                rows.push(off + t);
                targets.push(item.clean.get(t, c) as usize);
            }
        }
        if rows.is_empty() {
            continue;
        }
        count += rows.len();
        let l = out.per_codebook[c].cross_entropy_masked(&targets, &rows)?;
        total = Some(match total {
            None => l,
            Some(acc) => acc.add(l)?,
        });
    }
    let total = total.ok_or_else(|| Error::Input("no loss positions in batch".into()))?;
    Ok((total, count))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub sum: f64,
    pub mean: f64,
    pub count: usize,
}

/// Masks `seq` per `plan`, runs the model, and scores the loss positions.
pub fn apply_and_loss<F: Scalar>(model: &Model<F>, seq: &Sequence, plan: &MaskPlan) -> Result<LossReport> {
    let item = MaskedItem::new(seq, plan, model.config.mask_id())?;
    batch_loss(model, std::slice::from_ref(&item))
}

pub fn batch_loss<F: Scalar>(model: &Model<F>, items: &[MaskedItem]) -> Result<LossReport> {
    let tape = Tape::with_finite_checks(false);
    let vars = model.constants(&tape);
    let (loss, count) = masked_loss_tape(&model.config, &tape, &vars, items)?;
    let sum = loss.value().item().as_f64();
    Ok(LossReport {
        sum,
        mean: sum / count as f64,
        count,
    })
}
