#![allow(dead_code)]

use maskgrid::backbone::{AttentionMode, ModelConfig};
use maskgrid::grid::{Sequence, TokenGrid};
use rand::Rng;

pub fn tiny_config(mode: AttentionMode) -> ModelConfig {
    ModelConfig {
        layers: 2,
        model_dim: 16,
        heads: 2,
        ffn_dim: 32,
        text_vocab: 12,
        codebooks: 3,
        codebook_vocab: 9,
        max_positions: 64,
        attention_mode: mode,
        absolute_positions: true,
    }
}

/// Random sequence over non-reserved ids.
pub fn random_sequence(rng: &mut impl Rng, cfg: &ModelConfig, text_len: usize, frames: usize, prompt_len: usize) -> Sequence {
    let text = (0..text_len).map(|_| rng.gen_range(0..cfg.text_vocab as u32 - 1)).collect();
    let data = (0..frames * cfg.codebooks)
        .map(|_| rng.gen_range(0..cfg.codebook_vocab as u32 - 1))
        .collect();
    let grid = TokenGrid::from_flat(frames, cfg.codebooks, data).unwrap();
    Sequence::new(text, grid, prompt_len).unwrap()
}

pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-6)
}

/// Adds N(0, σ²) noise to every parameter, moving a fresh model away from
/// its near-uniform outputs.
pub fn perturb<F: maskgrid::Scalar>(model: &mut maskgrid::backbone::Model<F>, sigma: f64, rng: &mut impl Rng) {
    for t in model.params.tensors_mut() {
        for x in t.data_mut() {
            *x = F::of(x.as_f64() + sigma * rng.sample::<f64, _>(rand_distr::StandardNormal));
        }
    }
}
