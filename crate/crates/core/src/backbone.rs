//! Transformer over `[text tokens][acoustic frames]` with one prediction
//! head per codebook.
//!
//! Each frame enters the sequence as the sum of its C codebook embeddings.
//! Several sequences can share one forward pass: their rows are laid out
//! back to back and attention is confined to each sequence's own rows, with
//! position ids restarting at zero for every sequence.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use maskgrid_tensor::checkpoint::{read_checkpoint, write_checkpoint};
use maskgrid_tensor::{AttnLayout, Scalar, Tape, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Sequence, TokenGrid};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    Bidirectional,
    Causal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub layers: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    /// Includes the reserved null-text id (`text_vocab − 1`).
    pub text_vocab: usize,
    pub codebooks: usize,
    /// Includes the reserved mask id (`codebook_vocab − 1`).
    pub codebook_vocab: usize,
    pub max_positions: usize,
    pub attention_mode: AttentionMode,
    /// Adds a learned table indexed by within-sequence position to the
    /// input, on top of the rotary encoding inside attention.
    pub absolute_positions: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            model_dim: 128,
            heads: 4,
            ffn_dim: 512,
            text_vocab: 64,
            codebooks: 4,
            codebook_vocab: 64,
            max_positions: 512,
            attention_mode: AttentionMode::Bidirectional,
            absolute_positions: true,
        }
    }
}

const NORM_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;
const PER_LAYER: usize = 12;

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.layers == 0 || self.model_dim == 0 || self.ffn_dim == 0 {
            return bad("layers, model_dim and ffn_dim must be positive".into());
        }
        if self.heads == 0 || self.model_dim % self.heads != 0 {
            return bad(format!("model_dim {} not divisible by heads {}", self.model_dim, self.heads));
        }
        if (self.model_dim / self.heads) % 2 != 0 {
            return bad("head dimension must be even for rotary encoding".into());
        }
        if self.codebook_vocab < 2 || self.codebooks == 0 {
            return bad("need codebook_vocab >= 2 and codebooks >= 1".into());
        }
        if self.text_vocab < 2 || self.max_positions == 0 {
            return bad("need text_vocab >= 2 and max_positions >= 1".into());
        }
        Ok(())
    }

    pub fn mask_id(&self) -> u32 {
        (self.codebook_vocab - 1) as u32
    }

    pub fn null_text_id(&self) -> u32 {
        (self.text_vocab - 1) as u32
    }

    fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (d, f, k) = (self.model_dim, self.ffn_dim, self.codebook_vocab);
        let mut out = vec![("text_emb".to_string(), vec![self.text_vocab, d])];
        for c in 0..self.codebooks {
            out.push((format!("code_emb.{c}"), vec![k, d]));
        }
        if self.absolute_positions {
            out.push(("pos_emb".to_string(), vec![self.max_positions, d]));
        }
        for l in 0..self.layers {
            let p = |n: &str| format!("layers.{l}.{n}");
            out.extend([
                (p("ln1.gain"), vec![d]),
                (p("ln1.bias"), vec![d]),
                (p("attn.wq"), vec![d, d]),
                (p("attn.wk"), vec![d, d]),
                (p("attn.wv"), vec![d, d]),
                (p("attn.wo"), vec![d, d]),
                (p("ln2.gain"), vec![d]),
                (p("ln2.bias"), vec![d]),
                (p("mlp.w1"), vec![d, f]),
                (p("mlp.b1"), vec![f]),
                (p("mlp.w2"), vec![f, d]),
                (p("mlp.b2"), vec![d]),
            ]);
        }
        out.push(("final_ln.gain".into(), vec![d]));
        out.push(("final_ln.bias".into(), vec![d]));
        for c in 0..self.codebooks {
            out.push((format!("heads.{c}.w"), vec![d, k]));
            out.push((format!("heads.{c}.b"), vec![k]));
        }
        out
    }

    fn layer_base(&self, l: usize) -> usize {
        1 + self.codebooks + usize::from(self.absolute_positions) + l * PER_LAYER
    }

    fn final_base(&self) -> usize {
        self.layer_base(self.layers)
    }

    /// Every config field equal except the attention mode.
    pub fn same_shape_as(&self, other: &Self) -> bool {
        let mut a = self.clone();
        a.attention_mode = other.attention_mode;
        a == *other
    }
}

/// Named parameter tensors in the canonical order of [`ModelConfig`].
#[derive(Clone, Debug, PartialEq)]
pub struct Params<F> {
    names: Vec<String>,
    tensors: Vec<Tensor<F>>,
}

impl<F: Scalar> Params<F> {
    pub fn init(config: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let out_std = INIT_STD / (2.0 * config.layers as f64).sqrt();
        let (names, tensors) = config
            .param_shapes()
            .into_iter()
            .map(|(name, shape)| {
                let numel: usize = shape.iter().product();
                let t = if name.ends_with("gain") {
                    Tensor::full(shape, F::one())
                } else if name.ends_with("bias") || name.ends_with(".b") || name.ends_with("b1") || name.ends_with("b2") {
                    Tensor::zeros(shape)
                } else {
                    let std = if name.ends_with("wo") || name.ends_with("w2") { out_std } else { INIT_STD };
                    let normal = Normal::new(0.0, std).expect("positive std");
                    let data = (0..numel).map(|_| F::of(normal.sample(rng))).collect();
                    Tensor::new(shape, data).expect("shape from config")
                };
                (name, t)
            })
            .unzip();
        Ok(Self { names, tensors })
    }

    /// Checks names and shapes against what `config` expects.
    pub fn from_named(config: &ModelConfig, named: Vec<(String, Tensor<F>)>) -> Result<Self> {
        let expected = config.param_shapes();
        if expected.len() != named.len() {
            return Err(Error::IncompatibleCheckpoint(format!(
                "expected {} tensors, found {}",
                expected.len(),
                named.len()
            )));
        }
        for ((en, es), (n, t)) in expected.iter().zip(&named) {
            if en != n || es.as_slice() != t.shape() {
                return Err(Error::IncompatibleCheckpoint(format!(
                    "expected {en} {es:?}, found {n} {:?}",
                    t.shape()
                )));
            }
        }
        let (names, tensors) = named.into_iter().unzip();
        Ok(Self { names, tensors })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect(),
        }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<F>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<F>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<F>> {
        self.names.iter().position(|n| n == name).map(move |i| &mut self.tensors[i])
    }

    pub fn to_named(&self) -> Vec<(String, Tensor<F>)> {
        self.names.iter().cloned().zip(self.tensors.iter().cloned()).collect()
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn cast<G: Scalar>(&self) -> Params<G> {
        Params {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        write_checkpoint(
            &dir.join(format!("{stem}.json")),
            &dir.join(format!("{stem}.bin")),
            &self.to_named(),
        )?;
        Ok(())
    }

    pub fn read(config: &ModelConfig, dir: &Path, stem: &str) -> Result<Self> {
        let named = read_checkpoint(&dir.join(format!("{stem}.json")), &dir.join(format!("{stem}.bin")))?;
        Self::from_named(config, named)
    }
}

/// Per-codebook logits for one sequence: C tensors of shape `[T, K]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitsGrid<F> {
    pub per_codebook: Vec<Tensor<F>>,
}

impl<F: Scalar> LogitsGrid<F> {
    pub fn frames(&self) -> usize {
        self.per_codebook.first().map_or(0, |t| t.shape()[0])
    }

    pub fn row(&self, t: usize, c: usize) -> &[F] {
        let k = self.per_codebook[c].shape()[1];
        &self.per_codebook[c].data()[t * k..(t + 1) * k]
    }
}

/// One sequence as fed to the network.
#[derive(Clone, Copy, Debug)]
pub struct Input<'a> {
    pub text: &'a [u32],
    pub grid: &'a TokenGrid,
}

impl<'a> From<&'a Sequence> for Input<'a> {
    fn from(s: &'a Sequence) -> Self {
        Self {
            text: &s.text,
            grid: &s.grid,
        }
    }
}

/// Logits of a packed forward pass: per codebook, `[Σ T_i, K]` with the
/// frames of sequence `i` starting at row `frame_offsets[i]`.
pub struct TapeLogits<'t, F: Scalar> {
    pub per_codebook: Vec<Var<'t, F>>,
    pub frame_offsets: Vec<usize>,
    pub frames: Vec<usize>,
}

impl<'t, F: Scalar> TapeLogits<'t, F> {
    pub fn split(&self) -> Result<Vec<LogitsGrid<F>>> {
        let values: Vec<Tensor<F>> = self.per_codebook.iter().map(|v| v.value()).collect();
        self.frame_offsets
            .iter()
            .zip(&self.frames)
            .map(|(&off, &n)| {
                let per_codebook = values.iter().map(|v| v.slice(0, off, off + n)).collect::<Result<_, _>>()?;
                Ok(LogitsGrid { per_codebook })
            })
            .collect()
    }
}

fn validate_input(config: &ModelConfig, input: &Input<'_>) -> Result<()> {
    if input.text.is_empty() {
        return Err(Error::Input("empty text prefix".into()));
    }
    if input.grid.frames() == 0 {
        return Err(Error::Input("grid has no frames".into()));
    }
    if input.grid.codebooks() != config.codebooks {
        return Err(Error::Input(format!(
            "grid has {} codebooks, model expects {}",
            input.grid.codebooks(),
            config.codebooks
        )));
    }
    if let Some(&bad) = input.text.iter().find(|&&x| x as usize >= config.text_vocab) {
        return Err(Error::Input(format!("text id {bad} outside vocabulary of {}", config.text_vocab)));
    }
    input.grid.check_vocab(config.codebook_vocab)?;
    let len = input.text.len() + input.grid.frames();
    if len > config.max_positions {
        return Err(Error::Input(format!("sequence of {len} tokens exceeds max_positions {}", config.max_positions)));
    }
    Ok(())
}

/// Packed forward pass on `tape`; `params` are the tape handles of the
/// model parameters in canonical order.
pub fn forward_tape<'t, F: Scalar>(
    config: &ModelConfig,
    tape: &'t Tape<F>,
    params: &[Var<'t, F>],
    inputs: &[Input<'_>],
) -> Result<TapeLogits<'t, F>> {
    if inputs.is_empty() {
        return Err(Error::Input("forward on an empty batch".into()));
    }
    for input in inputs {
        validate_input(config, input)?;
    }
    let text_rows: usize = inputs.iter().map(|i| i.text.len()).sum();
    let frame_rows: usize = inputs.iter().map(|i| i.grid.frames()).sum();
    let c_count = config.codebooks;

    let text_ids: Vec<usize> = inputs.iter().flat_map(|i| i.text.iter().map(|&x| x as usize)).collect();
    let mut x = tape.embedding(params[0], &text_ids)?;
    let mut frames: Option<Var<'t, F>> = None;
    for c in 0..c_count {
        let ids: Vec<usize> = inputs.iter().flat_map(|i| i.grid.column(c).map(|x| x as usize)).collect();
        let e = tape.embedding(params[1 + c], &ids)?;
        frames = Some(match frames {
            None => e,
            Some(acc) => acc.add(e)?,
        });
    }
    x = tape.concat(&[x, frames.expect("at least one codebook")], 0)?;

    let mut segments = Vec::with_capacity(inputs.len());
    let mut positions = vec![0; text_rows + frame_rows];
    let mut frame_offsets = Vec::with_capacity(inputs.len());
    let (mut text_off, mut frame_off) = (0, 0);
    for input in inputs {
        let n_text = input.text.len();
        let n_frames = input.grid.frames();
        let mut rows: Vec<usize> = (text_off..text_off + n_text).collect();
        rows.extend(text_rows + frame_off..text_rows + frame_off + n_frames);
        for (p, &r) in rows.iter().enumerate() {
            positions[r] = p;
        }
        segments.push(rows);
        frame_offsets.push(frame_off);
        text_off += n_text;
        frame_off += n_frames;
    }
    if config.absolute_positions {
        x = x.add(tape.embedding(params[1 + c_count], &positions)?)?;
    }
    let causal = config.attention_mode == AttentionMode::Causal;
    let layout = Arc::new(AttnLayout::new(segments, positions, causal)?);
    let eps = F::of(NORM_EPS);

    for l in 0..config.layers {
        let p = &params[config.layer_base(l)..config.layer_base(l + 1)];
        let h = x.layer_norm(p[0], p[1], eps)?;
        let (q, k, v) = (h.matmul(p[2])?, h.matmul(p[3])?, h.matmul(p[4])?);
        let a = q.attention(k, v, config.heads, Arc::clone(&layout))?.matmul(p[5])?;
        x = x.add(a)?;
        let h = x.layer_norm(p[6], p[7], eps)?;
        let m = h.matmul(p[8])?.add(p[9])?.gelu()?.matmul(p[10])?.add(p[11])?;
        x = x.add(m)?;
    }
    let fb = config.final_base();
    let acoustic = x.slice(0, text_rows, text_rows + frame_rows)?.layer_norm(params[fb], params[fb + 1], eps)?;
    let per_codebook = (0..c_count)
        .map(|c| acoustic.matmul(params[fb + 2 + 2 * c])?.add(params[fb + 3 + 2 * c]))
        .collect::<Result<_, _>>()?;
    Ok(TapeLogits {
        per_codebook,
        frame_offsets,
        frames: inputs.iter().map(|i| i.grid.frames()).collect(),
    })
}

/// Next-frame loss summed over codebooks: position `t` predicts frame
/// `t + 1`. Returns the summed negative log-likelihood and the number of
/// predicted frames.
pub fn ar_loss_tape<'t, F: Scalar>(
    config: &ModelConfig,
    tape: &'t Tape<F>,
    params: &[Var<'t, F>],
    seqs: &[&Sequence],
) -> Result<(Var<'t, F>, usize)> {
    if config.attention_mode != AttentionMode::Causal {
        return Err(Error::Config("next-frame pretraining needs causal attention".into()));
    }
    if let Some(s) = seqs.iter().find(|s| s.grid.frames() < 2) {
        return Err(Error::Input(format!("next-frame loss needs at least 2 frames, got {}", s.grid.frames())));
    }
    let inputs: Vec<Input<'_>> = seqs.iter().map(|s| Input::from(*s)).collect();
    let out = forward_tape(config, tape, params, &inputs)?;
    let mut total: Option<Var<'t, F>> = None;
    for c in 0..config.codebooks {
        let mut rows = Vec::new();
        let mut targets = Vec::new();
        for (s, &off) in seqs.iter().zip(&out.frame_offsets) {
            for t in 0..s.grid.frames() - 1 {
                rows.push(off + t);
                targets.push(s.grid.get(t + 1, c) as usize);
            }
        }
        let l = out.per_codebook[c].cross_entropy_masked(&targets, &rows)?;
        total = Some(match total {
            None => l,
            Some(acc) => acc.add(l)?,
        });
    }
    let frames = seqs.iter().map(|s| s.grid.frames() - 1).sum();
    Ok((total.expect("codebooks >= 1"), frames))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<F> {
    pub config: ModelConfig,
    pub params: Params<F>,
}

impl<F: Scalar> Model<F> {
    pub fn new(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        let params = Params::init(&config, rng)?;
        Ok(Self { config, params })
    }

    pub fn from_parts(config: ModelConfig, params: Params<F>) -> Result<Self> {
        config.validate()?;
        let params = Params::from_named(&config, params.to_named())?;
        Ok(Self { config, params })
    }

    pub fn constants<'t>(&self, tape: &'t Tape<F>) -> Vec<Var<'t, F>> {
        self.params.tensors().iter().map(|t| tape.constant(t.clone())).collect()
    }

    /// Inference forward of a packed batch; one [`LogitsGrid`] per input.
    pub fn forward_batch(&self, inputs: &[Input<'_>]) -> Result<Vec<LogitsGrid<F>>> {
        let tape = Tape::with_finite_checks(false);
        let vars = self.constants(&tape);
        forward_tape(&self.config, &tape, &vars, inputs)?.split()
    }

    pub fn forward(&self, text: &[u32], grid: &TokenGrid) -> Result<LogitsGrid<F>> {
        Ok(self.forward_batch(&[Input { text, grid }])?.remove(0))
    }

    /// Mean next-frame loss per predicted frame (summed over codebooks).
    pub fn ar_loss(&self, seqs: &[&Sequence]) -> Result<f64> {
        let tape = Tape::with_finite_checks(false);
        let vars = self.constants(&tape);
        let (loss, frames) = ar_loss_tape(&self.config, &tape, &vars, seqs)?;
        Ok(loss.value().item().as_f64() / frames as f64)
    }

    /// Same parameters under a different attention mode. Lossless: mapping
    /// back recovers the original bit for bit.
    pub fn transfer_weights(&self, mode: AttentionMode) -> Model<F> {
        let mut config = self.config.clone();
        config.attention_mode = mode;
        Model {
            config,
            params: self.params.clone(),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(Error::io(dir))?;
        let cfg = serde_json::to_vec_pretty(&self.config)?;
        fs::write(dir.join("config.json"), cfg).map_err(Error::io(dir.join("config.json")))?;
        self.params.write(dir, "params")
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("config.json");
        let config: ModelConfig = serde_json::from_slice(&fs::read(&path).map_err(Error::io(&path))?)?;
        config.validate()?;
        let params = Params::read(&config, dir, "params")?;
        Ok(Self { config, params })
    }
}

/// Builds the bidirectional model from a causal checkpoint, refusing any
/// difference other than the attention mode.
pub fn transfer_weights<F: Scalar>(source: &Model<F>, target: &ModelConfig) -> Result<Model<F>> {
    if !source.config.same_shape_as(target) {
        return Err(Error::IncompatibleCheckpoint(format!(
            "source config {:?} differs from target {:?} beyond attention mode",
            source.config, target
        )));
    }
    let params = Params::from_named(target, source.params.to_named())?;
    Ok(Model {
        config: target.clone(),
        params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    pub(crate) fn tiny_config(mode: AttentionMode) -> ModelConfig {
        ModelConfig {
            layers: 2,
            model_dim: 16,
            heads: 2,
            ffn_dim: 24,
            text_vocab: 10,
            codebooks: 3,
            codebook_vocab: 7,
            max_positions: 64,
            attention_mode: mode,
            absolute_positions: true,
        }
    }

    fn grid(rows: &[&[u32]]) -> TokenGrid {
        TokenGrid::from_rows(rows.iter().map(|r| r.to_vec()).collect()).unwrap()
    }

    #[test]
    fn shape_contract_single_frame() {
        let mut cfg = tiny_config(AttentionMode::Bidirectional);
        cfg.codebooks = 1;
        let model = Model::<f32>::new(cfg, &mut stream(1, Stream::Init)).unwrap();
        let out = model.forward(&[3], &grid(&[&[6]])).unwrap();
        assert_eq!(out.per_codebook.len(), 1);
        assert_eq!(out.per_codebook[0].shape(), &[1, 7]);
    }

    #[test]
    fn rejects_out_of_vocabulary() {
        let model = Model::<f32>::new(tiny_config(AttentionMode::Bidirectional), &mut stream(1, Stream::Init)).unwrap();
        assert!(matches!(model.forward(&[10], &grid(&[&[0, 0, 0]])), Err(Error::Input(_))));
        assert!(matches!(model.forward(&[1], &grid(&[&[0, 7, 0]])), Err(Error::Input(_))));
        assert!(matches!(model.forward(&[1], &grid(&[&[0, 0]])), Err(Error::Input(_))));
    }

    #[test]
    fn config_validation() {
        let mut cfg = ModelConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.heads = 3;
        assert!(cfg.validate().is_err());
        cfg.heads = 4;
        cfg.codebook_vocab = 1;
        assert!(cfg.validate().is_err());
        assert_eq!(ModelConfig::default().mask_id(), 63);
    }

    #[test]
    fn config_rejects_unknown_keys() {
        assert!(serde_json::from_str::<ModelConfig>(r#"{"layers": 2, "bogus": 1}"#).is_err());
        let cfg: ModelConfig = serde_json::from_str(r#"{"layers": 2}"#).unwrap();
        assert_eq!(cfg.layers, 2);
        assert_eq!(cfg.model_dim, 128);
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let model = Model::<f32>::new(tiny_config(AttentionMode::Causal), &mut stream(2, Stream::Init)).unwrap();
        model.save(dir.path()).unwrap();
        assert_eq!(Model::<f32>::load(dir.path()).unwrap(), model);
    }
}
