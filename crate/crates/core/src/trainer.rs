//! AdamW training on the masked-recovery loss with warmup + cosine decay,
//! condition dropout for guidance, and next-frame pretraining for warm
//! starts.

use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::Path;

use maskgrid_tensor::{Scalar, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{ar_loss_tape, Model, ModelConfig, Params};
use crate::datakit::pack_in_order;
use crate::error::{Error, Result};
use crate::grid::Sequence;
use crate::masking::{masked_loss_tape, plan, MaskedItem, Strategy};
use crate::rng::{stream, RngState, Stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossNorm {
    /// Divide by the number of scored positions.
    Mean,
    Sum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub total_updates: u64,
    pub warmup_fraction: f64,
    pub batch_tokens: usize,
    pub weight_decay: f64,
    pub adam_betas: (f64, f64),
    pub adam_eps: f64,
    pub cond_dropout_p: f64,
    pub seed: u64,
    pub precision: Precision,
    pub strategy: Strategy,
    pub loss_norm: LossNorm,
    /// Global gradient-norm clip; off when `None`.
    pub grad_clip: Option<f64>,
    pub checkpoint_every: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            peak_lr: 1e-4,
            total_updates: 1000,
            warmup_fraction: 0.03,
            batch_tokens: 2048,
            weight_decay: 0.01,
            adam_betas: (0.9, 0.999),
            adam_eps: 1e-8,
            cond_dropout_p: 0.1,
            seed: 0,
            precision: Precision::F32,
            strategy: Strategy::FullRandom,
            loss_norm: LossNorm::Mean,
            grad_clip: None,
            checkpoint_every: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return bad("warmup_fraction must lie in (0, 1)");
        }
        if !(0.0..1.0).contains(&self.cond_dropout_p) {
            return bad("cond_dropout_p must lie in [0, 1)");
        }
        if self.total_updates == 0 || self.batch_tokens == 0 {
            return bad("total_updates and batch_tokens must be positive");
        }
        if !(self.peak_lr >= 0.0 && self.weight_decay >= 0.0 && self.adam_eps > 0.0) {
            return bad("peak_lr and weight_decay must be non-negative, adam_eps positive");
        }
        let (b1, b2) = self.adam_betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return bad("adam betas must lie in [0, 1)");
        }
        if self.grad_clip.is_some_and(|c| c <= 0.0) {
            return bad("grad_clip must be positive");
        }
        Ok(())
    }

    pub fn warmup_steps(&self) -> u64 {
        ((self.warmup_fraction * self.total_updates as f64).round() as u64).max(1)
    }
}

/// Linear ramp from 0 to `peak_lr` over the warmup, then cosine decay to 0
/// at `total_updates`.
pub fn lr_at(step: u64, config: &TrainConfig) -> f64 {
    let total = config.total_updates;
    let warmup = config.warmup_steps().min(total);
    let step = step.min(total);
    if step <= warmup {
        return config.peak_lr * step as f64 / warmup as f64;
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    config.peak_lr * 0.5 * (1.0 + (PI * progress).cos())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunningStats {
    pub updates: u64,
    pub loss_mean_sum: f64,
    pub last_loss_mean: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<F> {
    pub step: u64,
    pub model: Model<F>,
    pub m: Params<F>,
    pub v: Params<F>,
    pub rng: ChaCha8Rng,
    pub stats: RunningStats,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StateFile {
    step: u64,
    rng: RngState,
    stats: RunningStats,
}

impl<F: Scalar> TrainState<F> {
    pub fn new(model: Model<F>, seed: u64) -> Self {
        let m = model.params.zeros_like();
        Self {
            step: 0,
            v: m.clone(),
            m,
            model,
            rng: stream(seed, Stream::Train),
            stats: RunningStats::default(),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.model.save(dir)?;
        self.m.write(dir, "adam_m")?;
        self.v.write(dir, "adam_v")?;
        let file = StateFile {
            step: self.step,
            rng: RngState::capture(&self.rng),
            stats: self.stats,
        };
        let path = dir.join("state.json");
        fs::write(&path, serde_json::to_vec_pretty(&file)?).map_err(Error::io(&path))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let model = Model::load(dir)?;
        let m = Params::read(&model.config, dir, "adam_m")?;
        let v = Params::read(&model.config, dir, "adam_v")?;
        let path = dir.join("state.json");
        let file: StateFile = serde_json::from_slice(&fs::read(&path).map_err(Error::io(&path))?)?;
        Ok(Self {
            step: file.step,
            model,
            m,
            v,
            rng: file.rng.restore()?,
            stats: file.stats,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub loss_sum: f64,
    pub loss_mean: f64,
    pub lr: f64,
    pub masked_count: usize,
}

/// One AdamW update on `grads` with decoupled weight decay, applied to
/// matrices and embedding tables only.
fn adamw<F: Scalar>(state: &mut TrainState<F>, grads: &[Tensor<F>], lr: f64, config: &TrainConfig) {
    let (b1, b2) = config.adam_betas;
    let t = state.step as i32 + 1;
    let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
    let params = state.model.params.tensors_mut();
    let ms = state.m.tensors_mut();
    let vs = state.v.tensors_mut();
    for (((p, m), v), g) in params.iter_mut().zip(ms).zip(vs).zip(grads) {
        let decay = if p.rank() >= 2 { config.weight_decay } else { 0.0 };
        let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
        for i in 0..p.len() {
            let gi = g.data()[i].as_f64();
            let mi = b1 * m[i].as_f64() + (1.0 - b1) * gi;
            let vi = b2 * v[i].as_f64() + (1.0 - b2) * gi * gi;
            m[i] = F::of(mi);
            v[i] = F::of(vi);
            let update = (mi / c1) / ((vi / c2).sqrt() + config.adam_eps) + decay * p[i].as_f64();
            p[i] = F::of(p[i].as_f64() - lr * update);
        }
    }
}

fn clip<F: Scalar>(grads: &mut [Tensor<F>], max_norm: f64) {
    let norm = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|x| x.as_f64() * x.as_f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = F::of(max_norm / norm);
        for g in grads {
            for x in g.data_mut() {
                *x = *x * s;
            }
        }
    }
}

fn finish_step<F: Scalar>(
    state: &mut TrainState<F>,
    config: &TrainConfig,
    tape: &Tape<F>,
    loss: maskgrid_tensor::Var<'_, F>,
    vars: &[maskgrid_tensor::Var<'_, F>],
) -> Result<f64> {
    let value = loss.value().item().as_f64();
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss {
            step: state.step,
            batch_id: state.step,
        });
    }
    let mut grads = tape.backward(loss)?;
    let mut grads: Vec<Tensor<F>> = vars
        .iter()
        .map(|&v| grads.take(v).unwrap_or_else(|| Tensor::zeros(v.shape())))
        .collect();
    if let Some(c) = config.grad_clip {
        clip(&mut grads, c);
    }
    let lr = lr_at(state.step, config);
    adamw(state, &grads, lr, config);
    state.step += 1;
    Ok(lr)
}

/// Masks every sequence, drops its text with probability `cond_dropout_p`,
/// and takes one AdamW step on the packed batch.
pub fn train_step<F: Scalar>(state: &mut TrainState<F>, batch: &[&Sequence], config: &TrainConfig) -> Result<StepMetrics> {
    if batch.is_empty() {
        return Err(Error::Input("empty training batch".into()));
    }
    let mcfg = state.model.config.clone();
    let spec = config.strategy.spec();
    let mut items = Vec::with_capacity(batch.len());
    for seq in batch {
        let p = plan(&spec, seq.grid.frames(), seq.grid.codebooks(), seq.prompt_len, &mut state.rng)?;
        let mut item = MaskedItem::new(seq, &p, mcfg.mask_id())?;
        // Drawn unconditionally so p = 0 consumes the same stream.
        let drop: f64 = state.rng.gen();
        if drop < config.cond_dropout_p {
            item.text = vec![mcfg.null_text_id()];
        }
        items.push(item);
    }
    let tape = Tape::with_finite_checks(false);
    let vars: Vec<_> = state.model.params.tensors().iter().map(|t| tape.param(t.clone())).collect();
    let (sum, count) = masked_loss_tape(&mcfg, &tape, &vars, &items)?;
    let loss = match config.loss_norm {
        LossNorm::Mean => sum.scale(F::of(1.0 / count as f64))?,
        LossNorm::Sum => sum,
    };
    let loss_sum = sum.value().item().as_f64();
    let step = state.step;
    let lr = finish_step(state, config, &tape, loss, &vars)?;
    let loss_mean = loss_sum / count as f64;
    state.stats.updates += 1;
    state.stats.loss_mean_sum += loss_mean;
    state.stats.last_loss_mean = loss_mean;
    Ok(StepMetrics {
        step,
        loss_sum,
        loss_mean,
        lr,
        masked_count: count,
    })
}

/// One next-frame update on a causal model. `loss_mean` is per predicted
/// frame, summed over codebooks.
pub fn ar_train_step<F: Scalar>(state: &mut TrainState<F>, batch: &[&Sequence], config: &TrainConfig) -> Result<StepMetrics> {
    if batch.is_empty() {
        return Err(Error::Input("empty training batch".into()));
    }
    let mcfg = state.model.config.clone();
    let tape = Tape::with_finite_checks(false);
    let vars: Vec<_> = state.model.params.tensors().iter().map(|t| tape.param(t.clone())).collect();
    let (sum, frames) = ar_loss_tape(&mcfg, &tape, &vars, batch)?;
    let positions = frames * mcfg.codebooks;
    let loss = match config.loss_norm {
        LossNorm::Mean => sum.scale(F::of(1.0 / positions as f64))?,
        LossNorm::Sum => sum,
    };
    let loss_sum = sum.value().item().as_f64();
    let step = state.step;
    let lr = finish_step(state, config, &tape, loss, &vars)?;
    Ok(StepMetrics {
        step,
        loss_sum,
        loss_mean: loss_sum / frames as f64,
        lr,
        masked_count: positions,
    })
}

/// Epoch order: shuffle `indices`, then cut into token-budget batches
/// without reordering.
pub fn epoch_batches(indices: &[usize], token_lens: &[usize], budget: usize, rng: &mut impl Rng) -> Result<Vec<Vec<usize>>> {
    let mut order = indices.to_vec();
    order.shuffle(rng);
    let sizes: Vec<usize> = order.iter().map(|&i| token_lens[i]).collect();
    Ok(pack_in_order(&sizes, budget)?
        .into_iter()
        .map(|b| b.items.into_iter().map(|k| order[k]).collect())
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    Masked,
    NextFrame,
}

/// Runs `config.total_updates − state.step` updates over `corpus`, cycling
/// through shuffled epochs; `on_step` sees every step's metrics and may
/// stop the run early by returning `false`.
pub fn train<F: Scalar>(
    state: &mut TrainState<F>,
    corpus: &[Sequence],
    config: &TrainConfig,
    objective: Objective,
    mut on_step: impl FnMut(&TrainState<F>, &StepMetrics) -> Result<bool>,
) -> Result<()> {
    config.validate()?;
    if corpus.is_empty() {
        return Err(Error::Input("empty training corpus".into()));
    }
    let lens: Vec<usize> = corpus.iter().map(Sequence::token_len).collect();
    let indices: Vec<usize> = (0..corpus.len()).collect();
    let mut queue: Vec<Vec<usize>> = Vec::new();
    while state.step < config.total_updates {
        if queue.is_empty() {
            queue = epoch_batches(&indices, &lens, config.batch_tokens, &mut state.rng)?;
            queue.reverse();
        }
        let batch: Vec<&Sequence> = queue.pop().expect("nonempty epoch").iter().map(|&i| &corpus[i]).collect();
        let metrics = match objective {
            Objective::Masked => train_step(state, &batch, config)?,
            Objective::NextFrame => ar_train_step(state, &batch, config)?,
        };
        if !on_step(state, &metrics)? {
            break;
        }
    }
    Ok(())
}

/// Appends one JSON line per step.
pub struct MetricsLog {
    file: fs::File,
    path: String,
}

impl MetricsLog {
    pub fn create(path: &Path) -> Result<Self> {
        let file = fs::File::create(path).map_err(Error::io(path))?;
        Ok(Self {
            file,
            path: path.display().to_string(),
        })
    }

    pub fn write(&mut self, m: &StepMetrics) -> Result<()> {
        let mut line = serde_json::to_vec(m)?;
        line.push(b'\n');
        self.file.write_all(&line).map_err(Error::io(&self.path))
    }
}

/// Fresh random-init state for `model_config`.
pub fn init_state<F: Scalar>(model_config: &ModelConfig, seed: u64) -> Result<TrainState<F>> {
    let model = Model::new(model_config.clone(), &mut stream(seed, Stream::Init))?;
    Ok(TrainState::new(model, seed))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_examples() {
        let cfg = TrainConfig {
            total_updates: 1000,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.warmup_steps(), 30);
        assert_eq!(lr_at(0, &cfg), 0.0);
        assert_eq!(lr_at(30, &cfg), 1e-4);
        assert!((lr_at(515, &cfg) - 5e-5).abs() < 1e-18);
        assert!(lr_at(1000, &cfg).abs() < 1e-20);
    }

    #[test]
    fn lr_peaks_at_warmup_end() {
        let cfg = TrainConfig {
            total_updates: 321,
            ..TrainConfig::default()
        };
        let peak = (0..=321).map(|s| lr_at(s, &cfg)).fold(f64::MIN, f64::max);
        assert_eq!(peak, cfg.peak_lr);
        assert_eq!(lr_at(cfg.warmup_steps(), &cfg), cfg.peak_lr);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            warmup_fraction: 0.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            cond_dropout_p: 1.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!(serde_json::from_str::<TrainConfig>(r#"{"nope": 1}"#).is_err());
    }
}
