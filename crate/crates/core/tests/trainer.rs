mod common;

use common::{random_sequence, tiny_config};
use maskgrid::backbone::AttentionMode;
use maskgrid::grid::Sequence;
use maskgrid::rng::RngState;
use maskgrid::masking::{masked_loss_tape, plan, MaskedItem};
use maskgrid::trainer::{init_state, lr_at, train, train_step, Objective, TrainConfig, TrainState};
use maskgrid_tensor::Tape;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn corpus(n: usize, seed: u64) -> Vec<Sequence> {
    let cfg = tiny_config(AttentionMode::Bidirectional);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let (frames, text) = (rng.gen_range(3..9), rng.gen_range(1..5));
            let prompt = rng.gen_range(0..frames);
            random_sequence(&mut rng, &cfg, text, frames, prompt)
        })
        .collect()
}

fn config(updates: u64) -> TrainConfig {
    TrainConfig {
        peak_lr: 3e-3,
        total_updates: updates,
        batch_tokens: 48,
        ..TrainConfig::default()
    }
}

/// Field-wise equality with the rng compared by stream position, since
/// ChaCha buffers can differ between equivalent positions.
fn assert_same_state(a: &TrainState<f32>, b: &TrainState<f32>) {
    assert_eq!(a.step, b.step);
    assert_eq!(a.model, b.model);
    assert_eq!(a.m, b.m);
    assert_eq!(a.v, b.v);
    assert_eq!(a.stats, b.stats);
    assert_eq!(RngState::capture(&a.rng), RngState::capture(&b.rng));
}

fn state<F: maskgrid::Scalar>(seed: u64) -> TrainState<F> {
    init_state(&tiny_config(AttentionMode::Bidirectional), seed).unwrap()
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let data = corpus(16, 1);
    let mut st = state::<f32>(2);
    let before = st.model.params.clone();
    let cfg = TrainConfig {
        peak_lr: 0.0,
        ..config(10)
    };
    train(&mut st, &data, &cfg, Objective::Masked, |_, _| Ok(true)).unwrap();
    assert_eq!(st.step, 10);
    assert_eq!(st.model.params, before);
}

#[test]
fn same_seed_same_trajectory() {
    let data = corpus(16, 3);
    let run = || {
        let mut st = state::<f32>(4);
        let mut losses = Vec::new();
        train(&mut st, &data, &config(15), Objective::Masked, |_, m| {
            losses.push(m.loss_sum.to_bits());
            Ok(true)
        })
        .unwrap();
        (st, losses)
    };
    let (a, la) = run();
    let (b, lb) = run();
    assert_eq!(la, lb);
    assert_same_state(&a, &b);
}

/// A batch budget that holds the whole corpus puts every step at an epoch
/// boundary, so the saved stream alone determines the rest of the run.
#[test]
fn resumed_run_matches_straight_run() {
    let data = corpus(16, 5);
    let cfg = TrainConfig {
        batch_tokens: 1000,
        ..config(12)
    };
    let mut straight = state::<f32>(6);
    train(&mut straight, &data, &cfg, Objective::Masked, |_, _| Ok(true)).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let mut first = state::<f32>(6);
    train(&mut first, &data, &cfg, Objective::Masked, |st, _| Ok(st.step < 5)).unwrap();
    assert_eq!(first.step, 5);
    first.save(dir.path()).unwrap();
    let mut resumed: TrainState<f32> = TrainState::load(dir.path()).unwrap();
    assert_same_state(&resumed, &first);
    train(&mut resumed, &data, &cfg, Objective::Masked, |_, _| Ok(true)).unwrap();
    assert_same_state(&resumed, &straight);
}

#[test]
fn memorizes_a_single_sequence() {
    let data = corpus(1, 7);
    let mut st = state::<f32>(8);
    let cfg = TrainConfig {
        cond_dropout_p: 0.0,
        ..config(300)
    };
    let mut first = None;
    let mut tail = Vec::new();
    train(&mut st, &data, &cfg, Objective::Masked, |st, m| {
        first.get_or_insert(m.loss_mean);
        if st.step > 280 {
            tail.push(m.loss_mean);
        }
        Ok(true)
    })
    .unwrap();
    let tail = tail.iter().sum::<f64>() / tail.len() as f64;
    assert!(tail < 0.1 * first.unwrap(), "loss {} -> {tail}", first.unwrap());
}

/// With both betas at zero AdamW reduces to `p ← p − lr·(g/(|g|+ε) + wd·p)`;
/// the gradient comes from an independent replay of the step's draws.
#[test]
fn zero_beta_adamw_matches_sign_descent() {
    let data = corpus(4, 9);
    let batch: Vec<&Sequence> = data.iter().collect();
    let cfg = TrainConfig {
        adam_betas: (0.0, 0.0),
        weight_decay: 0.1,
        cond_dropout_p: 0.5,
        ..config(100)
    };
    let mut st = state::<f64>(10);
    train_step(&mut st, &batch, &cfg).unwrap();

    let before = st.clone();
    let mcfg = before.model.config.clone();
    let mut rng = before.rng.clone();
    let items: Vec<MaskedItem> = batch
        .iter()
        .map(|s| {
            let p = plan(&cfg.strategy.spec(), s.grid.frames(), s.grid.codebooks(), s.prompt_len, &mut rng).unwrap();
            let mut item = MaskedItem::new(s, &p, mcfg.mask_id()).unwrap();
            if rng.gen::<f64>() < cfg.cond_dropout_p {
                item.text = vec![mcfg.null_text_id()];
            }
            item
        })
        .collect();
    let tape = Tape::with_finite_checks(true);
    let vars: Vec<_> = before.model.params.tensors().iter().map(|t| tape.param(t.clone())).collect();
    let (sum, count) = masked_loss_tape(&mcfg, &tape, &vars, &items).unwrap();
    let grads = tape.backward(sum).unwrap();
    let lr = cfg.peak_lr * 1.0 / cfg.warmup_steps() as f64;
    assert_eq!(lr, lr_at(1, &cfg));

    train_step(&mut st, &batch, &cfg).unwrap();
    for ((p0, p1), v) in before.model.params.tensors().iter().zip(st.model.params.tensors()).zip(&vars) {
        let decay = if p0.shape().len() >= 2 { cfg.weight_decay } else { 0.0 };
        let g = grads.get(*v).unwrap();
        for i in 0..p0.numel() {
            let gi = g.data()[i] / count as f64;
            let expected = p0.data()[i] - lr * (gi / (gi.abs() + cfg.adam_eps) + decay * p0.data()[i]);
            assert!((p1.data()[i] - expected).abs() < 1e-12, "param moved to {} not {expected}", p1.data()[i]);
        }
    }
}

#[test]
fn rejects_empty_corpus_and_bad_config() {
    let mut st = state::<f32>(1);
    assert!(train(&mut st, &[], &config(1), Objective::Masked, |_, _| Ok(true)).is_err());
    let bad = TrainConfig {
        warmup_fraction: 0.0,
        ..config(1)
    };
    assert!(train(&mut st, &corpus(2, 1), &bad, Objective::Masked, |_, _| Ok(true)).is_err());
}

#[test]
fn next_frame_pretraining_lowers_loss() {
    let data = corpus(8, 11);
    let causal = tiny_config(AttentionMode::Causal);
    let mut st: TrainState<f32> = init_state(&causal, 12).unwrap();
    let refs: Vec<&Sequence> = data.iter().collect();
    let before = st.model.ar_loss(&refs).unwrap();
    train(&mut st, &data, &config(150), Objective::NextFrame, |_, _| Ok(true)).unwrap();
    let after = st.model.ar_loss(&refs).unwrap();
    assert!(after < 0.8 * before, "{before} -> {after}");
    let bidir = tiny_config(AttentionMode::Bidirectional);
    let mut wrong: TrainState<f32> = init_state(&bidir, 1).unwrap();
    assert!(train(&mut wrong, &data, &config(1), Objective::NextFrame, |_, _| Ok(true)).is_err());
}
