//! Subcommands. Each resolves its configuration, checks its inputs, does
//! its work, then writes `resolved_config.json` and `summary.json` next to
//! its artifacts.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use maskgrid::ablation::{
    ar_warm_start, decode_requests, decode_samples, heldout_items, heldout_nll, probe_kl, run_ablation, score_decoded,
    sequences, AblationCell, AblationConfig, AblationData, Init, PromptText,
};
use maskgrid::backbone::{AttentionMode, Model};
use maskgrid::datakit::{plan_resample, LanguageManifest};
use maskgrid::grid::{Sequence, TokenGrid};
use maskgrid::masking::Strategy;
use maskgrid::rng::{stream, Stream};
use maskgrid::sampler::{bench_decode, write_bench_csv};
use maskgrid::toylang::{generate, read_corpus, write_corpus, GenOptions, SampleKind, ToySample, ToySpec};
use maskgrid::trainer::{init_state, train, MetricsLog, Objective, Precision, TrainState};
use maskgrid::Scalar;
use serde::{Deserialize, Serialize};

use crate::artifacts::{write_summary, Outcome, Summary};
use crate::config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "maskgrid", version, about = "Masked-diffusion generation of multi-codebook token grids")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a toy language and a corpus drawn from it.
    Gen(GenArgs),
    /// Train a model on a toy corpus.
    Train(TrainArgs),
    /// Train and score every strategy/init/seed cell.
    Ablate(AblateArgs),
    /// Decode the target region of every corpus sample.
    Decode(DecodeArgs),
    /// Score decoded grids, and optionally a checkpoint, against a corpus.
    Eval(EvalArgs),
    /// Time decoding across batch sizes and step counts.
    Bench(BenchArgs),
    /// Per-language repetition factors for a duration manifest.
    PlanResample(PlanArgs),
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// JSON config overriding the defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Root seed for every random stream.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory, created if missing.
    #[arg(long)]
    pub out: PathBuf,
}

impl CommonArgs {
    pub fn new(out: impl Into<PathBuf>) -> Self {
        Self {
            config: None,
            seed: None,
            out: out.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StrategyArg {
    Full,
    Soundstorm,
    Maskgct,
}

impl From<StrategyArg> for Strategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Full => Strategy::FullRandom,
            StrategyArg::Soundstorm => Strategy::Soundstorm,
            StrategyArg::Maskgct => Strategy::Maskgct,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum InitArg {
    Random,
    ArWarmstart,
}

impl From<InitArg> for Init {
    fn from(i: InitArg) -> Self {
        match i {
            InitArg::Random => Init::Random,
            InitArg::ArWarmstart => Init::ArWarmstart,
        }
    }
}

fn parse_value<T: ValueEnum>(s: &str) -> Result<T> {
    T::from_str(s, true).map_err(|e| anyhow::anyhow!(e))
}

#[derive(Debug, Clone, Args)]
pub struct GenArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub count: Option<usize>,
    /// Fraction of denoise samples (noisy prompt, clean target, instruct).
    #[arg(long)]
    pub corrupt: Option<f64>,
    /// Fraction of samples recorded through a noisy channel throughout.
    #[arg(long)]
    pub noisy: Option<f64>,
    /// Reuse the language tables from this spec file.
    #[arg(long)]
    pub spec: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long, value_enum)]
    pub strategy: Option<StrategyArg>,
    #[arg(long, value_enum)]
    pub init: Option<InitArg>,
    /// Next-frame pretraining corpus for `--init ar-warmstart`.
    #[arg(long)]
    pub pretrain_corpus: Option<PathBuf>,
    #[arg(long)]
    pub ar_steps: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_tokens: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub spec: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub heldout: PathBuf,
    /// Needed when any cell is warm-started.
    #[arg(long)]
    pub pretrain_corpus: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub ar_steps: Option<u64>,
    #[arg(long, value_enum, value_delimiter = ',')]
    pub strategy: Vec<StrategyArg>,
    #[arg(long, value_enum, value_delimiter = ',')]
    pub init: Vec<InitArg>,
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
    #[arg(long)]
    pub eval_every: Option<u64>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct SamplerFlags {
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub guidance: Option<f64>,
    #[arg(long)]
    pub layer_penalty: Option<f64>,
}

impl SamplerFlags {
    fn apply(&self, cfg: &mut RunConfig) {
        let s = &mut cfg.sampler;
        s.steps = self.steps.unwrap_or(s.steps);
        s.tau = self.tau.unwrap_or(s.tau);
        s.temperature = self.temperature.unwrap_or(s.temperature);
        s.guidance = self.guidance.unwrap_or(s.guidance);
        s.layer_penalty = self.layer_penalty.unwrap_or(s.layer_penalty);
    }
}

#[derive(Debug, Clone, Args)]
pub struct DecodeArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub spec: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[command(flatten)]
    pub sampler: SamplerFlags,
    /// Drop instruct tokens from the text before decoding.
    #[arg(long)]
    pub strip_instruct: bool,
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub spec: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    /// `decoded.jsonl` from `decode`.
    #[arg(long)]
    pub decoded: Option<PathBuf>,
    /// Adds held-out masked NLL and the oracle KL probe.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub probe_positions: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub spec: PathBuf,
    /// The first sample supplies the benchmark request.
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, value_delimiter = ',')]
    pub batch_sizes: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    pub step_counts: Vec<usize>,
    #[arg(long)]
    pub runs: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct PlanArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// CSV with `language,duration_hours` columns.
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub beta: Option<f64>,
}

pub fn run(cli: Cli) -> Result<Summary> {
    match cli.command {
        Command::Gen(a) => cmd_gen(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Ablate(a) => cmd_ablate(&a),
        Command::Decode(a) => cmd_decode(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Bench(a) => cmd_bench(&a),
        Command::PlanResample(a) => cmd_plan(&a),
    }
}

const RESOLVED: &str = "resolved_config.json";

/// Shared flow: resolve the config, create the output directory, run
/// `body`, then hash everything into the summary.
fn execute(
    name: &str,
    common: &CommonArgs,
    inputs: &[(&str, Option<&Path>)],
    overrides: impl FnOnce(&mut RunConfig) -> Result<()>,
    body: impl FnOnce(&RunConfig, &Path) -> Result<Outcome>,
) -> Result<Summary> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    overrides(&mut cfg)?;
    let cfg = cfg.resolve()?;
    for (role, path) in inputs {
        if let Some(path) = path {
            if !path.exists() {
                bail!("{role} not found: {}", path.display());
            }
        }
    }
    let out = &common.out;
    fs::create_dir_all(out).with_context(|| format!("creating output directory {}", out.display()))?;
    let config_json = cfg.to_pretty_json()?;
    fs::write(out.join(RESOLVED), &config_json).with_context(|| format!("writing into {}", out.display()))?;
    let mut outcome = body(&cfg, out)?;
    for (role, path) in inputs {
        if let Some(path) = path {
            outcome.inputs.push((role.to_string(), path.to_path_buf()));
        }
    }
    outcome.outputs.push(RESOLVED.into());
    write_summary(out, name, cfg.seed, &config_json, &outcome)
}

fn require_checkpoint(dir: &Path) -> Result<()> {
    if !dir.join("config.json").is_file() {
        bail!("checkpoint not found: {} has no config.json", dir.display());
    }
    Ok(())
}

fn load_corpus(path: &Path) -> Result<Vec<ToySample>> {
    let samples = read_corpus(path).with_context(|| format!("reading corpus {}", path.display()))?;
    if samples.is_empty() {
        bail!("corpus {} is empty", path.display());
    }
    Ok(samples)
}

fn load_spec(path: &Path) -> Result<ToySpec> {
    ToySpec::read(path).with_context(|| format!("reading spec {}", path.display()))
}

/// Rejects sequences the configured model cannot take.
fn check_corpus_fits(cfg: &RunConfig, seqs: &[Sequence], what: &str) -> Result<()> {
    let m = &cfg.model;
    for (i, s) in seqs.iter().enumerate() {
        if s.grid.codebooks() != m.codebooks {
            bail!("{what} sample {i} has {} codebooks, model has {}", s.grid.codebooks(), m.codebooks);
        }
        s.grid
            .check_vocab(m.codebook_vocab - 1)
            .with_context(|| format!("{what} sample {i}"))?;
        if let Some(&x) = s.text.iter().find(|&&x| x as usize >= m.text_vocab - 1) {
            bail!("{what} sample {i} has text id {x} outside the model's text vocabulary");
        }
        if s.grid.frames() > m.max_positions {
            bail!("{what} sample {i} has {} frames, model allows {}", s.grid.frames(), m.max_positions);
        }
    }
    Ok(())
}

pub fn cmd_gen(args: &GenArgs) -> Result<Summary> {
    execute(
        "gen",
        &args.common,
        &[("spec", args.spec.as_deref())],
        |cfg| {
            cfg.gen.count = args.count.unwrap_or(cfg.gen.count);
            cfg.gen.corrupt_fraction = args.corrupt.unwrap_or(cfg.gen.corrupt_fraction);
            cfg.gen.noisy_fraction = args.noisy.unwrap_or(cfg.gen.noisy_fraction);
            let g = &cfg.gen;
            if !(g.corrupt_fraction >= 0.0 && g.noisy_fraction >= 0.0 && g.corrupt_fraction + g.noisy_fraction <= 1.0) {
                bail!("corrupt and noisy fractions must be non-negative and sum to at most 1");
            }
            Ok(())
        },
        |cfg, out| {
            let spec = match &args.spec {
                Some(path) => load_spec(path)?,
                None => ToySpec::new(cfg.toy.clone(), &mut stream(cfg.seed, Stream::Spec))?,
            };
            let options = GenOptions {
                count: cfg.gen.count,
                corrupt_fraction: cfg.gen.corrupt_fraction,
                noisy_fraction: cfg.gen.noisy_fraction,
            };
            let samples = generate(&spec, &mut stream(cfg.seed, Stream::Corpus), options);
            spec.write(&out.join("spec.json"))?;
            write_corpus(&out.join("corpus.jsonl"), &samples)?;
            let stats = CorpusStats::of(&samples, spec.params.speakers);
            println!(
                "{} samples: {} clean, {} noisy, {} denoise; mean {:.1} frames",
                samples.len(),
                stats.clean,
                stats.noisy,
                stats.denoise,
                stats.mean_frames
            );
            Ok(Outcome {
                outputs: vec!["spec.json".into(), "corpus.jsonl".into()],
                results: serde_json::to_value(stats)?,
                ..Outcome::default()
            })
        },
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub count: usize,
    pub clean: usize,
    pub noisy: usize,
    pub denoise: usize,
    pub mean_frames: f64,
    pub per_speaker: Vec<usize>,
}

impl CorpusStats {
    pub fn of(samples: &[ToySample], speakers: usize) -> Self {
        let kind = |k| samples.iter().filter(|s| s.kind == k).count();
        let mut per_speaker = vec![0; speakers];
        for s in samples {
            per_speaker[s.speaker] += 1;
        }
        Self {
            count: samples.len(),
            clean: kind(SampleKind::Clean),
            noisy: kind(SampleKind::Noisy),
            denoise: kind(SampleKind::Denoise),
            mean_frames: samples.iter().map(|s| s.grid.frames()).sum::<usize>() as f64 / samples.len().max(1) as f64,
            per_speaker,
        }
    }
}

pub fn cmd_train(args: &TrainArgs) -> Result<Summary> {
    let init = args.init.map(Init::from).unwrap_or(Init::Random);
    if init == Init::ArWarmstart && args.pretrain_corpus.is_none() {
        bail!("--init ar-warmstart needs --pretrain-corpus");
    }
    execute(
        "train",
        &args.common,
        &[("corpus", Some(&args.corpus)), ("pretrain_corpus", args.pretrain_corpus.as_deref())],
        |cfg| {
            let t = &mut cfg.train;
            t.total_updates = args.steps.unwrap_or(t.total_updates);
            t.peak_lr = args.lr.unwrap_or(t.peak_lr);
            t.batch_tokens = args.batch_tokens.unwrap_or(t.batch_tokens);
            if let Some(s) = args.strategy {
                t.strategy = s.into();
            }
            cfg.ar_train.total_updates = args.ar_steps.unwrap_or(cfg.ar_train.total_updates);
            cfg.model.attention_mode = AttentionMode::Bidirectional;
            Ok(())
        },
        |cfg, out| {
            let corpus = sequences(&load_corpus(&args.corpus)?);
            check_corpus_fits(cfg, &corpus, "corpus")?;
            let pretrain = match &args.pretrain_corpus {
                Some(p) if init == Init::ArWarmstart => {
                    let seqs = sequences(&load_corpus(p)?);
                    check_corpus_fits(cfg, &seqs, "pretraining corpus")?;
                    seqs
                }
                _ => Vec::new(),
            };
            match cfg.train.precision {
                Precision::F32 => train_run::<f32>(cfg, init, &corpus, &pretrain, out),
                Precision::F64 => train_run::<f64>(cfg, init, &corpus, &pretrain, out),
            }
        },
    )
}

fn train_run<F: Scalar>(cfg: &RunConfig, init: Init, corpus: &[Sequence], pretrain: &[Sequence], out: &Path) -> Result<Outcome> {
    let mut state: TrainState<F> = match init {
        Init::Random => init_state(&cfg.model, cfg.seed)?,
        Init::ArWarmstart => TrainState::new(ar_warm_start(&cfg.model, &cfg.ar_train, pretrain, cfg.seed)?, cfg.seed),
    };
    let mut log = MetricsLog::create(&out.join("metrics.jsonl"))?;
    let mut outputs = vec!["metrics.jsonl".to_string()];
    let mut last = None;
    train(&mut state, corpus, &cfg.train, Objective::Masked, |st, m| {
        log.write(m)?;
        last = Some(*m);
        if let Some(every) = cfg.train.checkpoint_every {
            if st.step % every == 0 && st.step < cfg.train.total_updates {
                let name = format!("checkpoints/step-{:06}", st.step);
                let dir = out.join(&name);
                fs::create_dir_all(&dir).map_err(maskgrid::Error::io(&dir))?;
                st.save(&dir)?;
                outputs.push(name);
            }
        }
        Ok(true)
    })?;
    let dir = out.join("checkpoint");
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    state.save(&dir)?;
    outputs.push("checkpoint".into());
    let last = last.context("training ran no updates")?;
    println!("trained {} updates, final loss {:.4}", state.step, last.loss_mean);
    Ok(Outcome {
        outputs,
        results: serde_json::json!({
            "updates": state.step,
            "final_loss_mean": last.loss_mean,
            "init": init,
            "strategy": cfg.train.strategy,
        }),
        ..Outcome::default()
    })
}

pub fn cmd_ablate(args: &AblateArgs) -> Result<Summary> {
    execute(
        "ablate",
        &args.common,
        &[
            ("spec", Some(&args.spec)),
            ("corpus", Some(&args.corpus)),
            ("heldout", Some(&args.heldout)),
            ("pretrain_corpus", args.pretrain_corpus.as_deref()),
        ],
        |cfg| {
            cfg.train.total_updates = args.steps.unwrap_or(cfg.train.total_updates);
            cfg.ar_train.total_updates = args.ar_steps.unwrap_or(cfg.ar_train.total_updates);
            let a = &mut cfg.ablation;
            if !args.strategy.is_empty() {
                a.strategies = args.strategy.iter().map(|s| value_name(*s)).collect();
            }
            if !args.init.is_empty() {
                a.inits = args.init.iter().map(|i| value_name(*i)).collect();
            }
            if !args.seeds.is_empty() {
                a.seeds = args.seeds.clone();
            }
            if a.seeds.is_empty() {
                a.seeds = (0..3).map(|k| cfg.seed.wrapping_add(k)).collect();
            }
            a.eval_every = args.eval_every.or(a.eval_every);
            Ok(())
        },
        |cfg, out| {
            let strategies: Vec<Strategy> = cfg
                .ablation
                .strategies
                .iter()
                .map(|s| parse_value::<StrategyArg>(s).map(Strategy::from))
                .collect::<Result<_>>()?;
            let inits: Vec<Init> = cfg
                .ablation
                .inits
                .iter()
                .map(|s| parse_value::<InitArg>(s).map(Init::from))
                .collect::<Result<_>>()?;
            if inits.contains(&Init::ArWarmstart) && args.pretrain_corpus.is_none() {
                bail!("warm-started cells need --pretrain-corpus");
            }
            let spec = load_spec(&args.spec)?;
            cfg.check_model_matches_toy(&spec.params)?;
            let train_seqs = sequences(&load_corpus(&args.corpus)?);
            check_corpus_fits(cfg, &train_seqs, "corpus")?;
            let heldout = load_corpus(&args.heldout)?;
            check_corpus_fits(cfg, &sequences(&heldout), "held-out corpus")?;
            let pretrain = match &args.pretrain_corpus {
                Some(p) => sequences(&load_corpus(p)?),
                None => Vec::new(),
            };
            let mut cells = Vec::new();
            for &strategy in &strategies {
                for &init in &inits {
                    for &seed in &cfg.ablation.seeds {
                        cells.push(AblationCell { strategy, init, seed });
                    }
                }
            }
            let ab = AblationConfig {
                model: cfg.model.clone(),
                train: cfg.train.clone(),
                ar_train: cfg.ar_train.clone(),
                eval_every: cfg.ablation.eval_every,
                eval_samples: cfg.ablation.eval_samples,
                eval_seed: cfg.seed,
                sampler: cfg.sampler.clone(),
                decode_chunk: cfg.decode.chunk,
            };
            let data = AblationData {
                spec: &spec,
                train: &train_seqs,
                pretrain: &pretrain,
                heldout: &heldout,
            };
            let rows = match cfg.train.precision {
                Precision::F32 => run_ablation::<f32>(&ab, &cells, &data)?,
                Precision::F64 => run_ablation::<f64>(&ab, &cells, &data)?,
            };
            write_jsonl(&out.join("results.jsonl"), &rows)?;
            for r in &rows {
                println!(
                    "{:?} {:?} seed {}: nll {:.4} toy_wer {:.4} toy_sim {:.4}",
                    r.strategy, r.init, r.seed, r.heldout_nll, r.toy_wer, r.toy_sim
                );
            }
            Ok(Outcome {
                outputs: vec!["results.jsonl".into()],
                results: serde_json::json!({ "cells": rows.len() }),
                ..Outcome::default()
            })
        },
    )
}

fn value_name<T: ValueEnum>(v: T) -> String {
    v.to_possible_value().expect("no skipped variants").get_name().to_string()
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut out = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    let mut file = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    file.write_all(&out).with_context(|| format!("writing {}", path.display()))
}

/// One line of `decoded.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodedRecord {
    /// Line index of the source sample in the corpus.
    pub index: usize,
    /// Target frames only.
    pub grid: TokenGrid,
}

pub fn read_decoded(path: &Path) -> Result<Vec<DecodedRecord>> {
    let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line).with_context(|| format!("parsing {}", path.display()))?);
        }
    }
    Ok(out)
}

pub fn cmd_decode(args: &DecodeArgs) -> Result<Summary> {
    execute(
        "decode",
        &args.common,
        &[
            ("checkpoint", Some(&args.checkpoint)),
            ("spec", Some(&args.spec)),
            ("corpus", Some(&args.corpus)),
        ],
        |cfg| {
            args.sampler.apply(cfg);
            cfg.decode.strip_instruct |= args.strip_instruct;
            cfg.decode.limit = args.limit.or(cfg.decode.limit);
            require_checkpoint(&args.checkpoint)
        },
        |cfg, out| {
            let spec = load_spec(&args.spec)?;
            let mut samples = load_corpus(&args.corpus)?;
            if let Some(n) = cfg.decode.limit {
                samples.truncate(n);
            }
            let prompt_text = if cfg.decode.strip_instruct {
                PromptText::StripInstruct
            } else {
                PromptText::AsIs
            };
            let grids = match cfg.train.precision {
                Precision::F32 => decode_run::<f32>(cfg, &args.checkpoint, &spec, &samples, prompt_text)?,
                Precision::F64 => decode_run::<f64>(cfg, &args.checkpoint, &spec, &samples, prompt_text)?,
            };
            let records: Vec<DecodedRecord> = grids
                .into_iter()
                .enumerate()
                .map(|(index, grid)| DecodedRecord { index, grid })
                .collect();
            write_jsonl(&out.join("decoded.jsonl"), &records)?;
            println!("decoded {} samples", records.len());
            Ok(Outcome {
                outputs: vec!["decoded.jsonl".into()],
                results: serde_json::json!({ "decoded": records.len() }),
                ..Outcome::default()
            })
        },
    )
}

fn load_model<F: Scalar>(cfg: &RunConfig, dir: &Path, spec: &ToySpec) -> Result<Model<F>> {
    let model: Model<F> = Model::load(dir).with_context(|| format!("loading checkpoint {}", dir.display()))?;
    let check = RunConfig {
        model: model.config.clone(),
        ..cfg.clone()
    };
    check.check_model_matches_toy(&spec.params)?;
    Ok(model)
}

fn decode_run<F: Scalar>(
    cfg: &RunConfig,
    checkpoint: &Path,
    spec: &ToySpec,
    samples: &[ToySample],
    prompt_text: PromptText,
) -> Result<Vec<TokenGrid>> {
    let model = load_model::<F>(cfg, checkpoint, spec)?;
    Ok(decode_samples(&model, spec, samples, &cfg.sampler, prompt_text, cfg.decode.chunk)?)
}

pub fn cmd_eval(args: &EvalArgs) -> Result<Summary> {
    if args.decoded.is_none() && args.checkpoint.is_none() {
        bail!("eval needs --decoded, --checkpoint or both");
    }
    execute(
        "eval",
        &args.common,
        &[
            ("spec", Some(&args.spec)),
            ("corpus", Some(&args.corpus)),
            ("decoded", args.decoded.as_deref()),
            ("checkpoint", args.checkpoint.as_deref()),
        ],
        |cfg| {
            cfg.eval.probe_positions = args.probe_positions.unwrap_or(cfg.eval.probe_positions);
            match &args.checkpoint {
                Some(dir) => require_checkpoint(dir),
                None => Ok(()),
            }
        },
        |cfg, out| {
            let spec = load_spec(&args.spec)?;
            let samples = load_corpus(&args.corpus)?;
            let mut metrics = BTreeMap::new();
            if let Some(path) = &args.decoded {
                let records = read_decoded(path)?;
                let mut picked = Vec::with_capacity(records.len());
                for r in &records {
                    picked.push(
                        samples
                            .get(r.index)
                            .cloned()
                            .with_context(|| format!("decoded index {} outside the corpus", r.index))?,
                    );
                }
                let grids: Vec<TokenGrid> = records.into_iter().map(|r| r.grid).collect();
                let scores = score_decoded(&spec, &picked, &grids)?;
                metrics.insert("toy_wer", serde_json::json!(scores.toy_wer));
                metrics.insert("toy_sim", serde_json::json!(scores.toy_sim));
                metrics.insert("scored", serde_json::json!(scores.count));
                metrics.insert("ambiguous", serde_json::json!(scores.ambiguous));
            }
            if let Some(dir) = &args.checkpoint {
                let (nll, kl) = match cfg.train.precision {
                    Precision::F32 => model_metrics::<f32>(cfg, dir, &spec, &samples)?,
                    Precision::F64 => model_metrics::<f64>(cfg, dir, &spec, &samples)?,
                };
                metrics.insert("heldout_nll", serde_json::json!(nll));
                metrics.insert("probe_kl", serde_json::json!(kl));
            }
            let value = serde_json::to_value(&metrics)?;
            let mut bytes = serde_json::to_vec_pretty(&value)?;
            bytes.push(b'\n');
            fs::write(out.join("metrics.json"), bytes)?;
            println!("{}", serde_json::to_string(&value)?);
            Ok(Outcome {
                outputs: vec!["metrics.json".into()],
                results: value,
                ..Outcome::default()
            })
        },
    )
}

fn model_metrics<F: Scalar>(cfg: &RunConfig, dir: &Path, spec: &ToySpec, samples: &[ToySample]) -> Result<(f64, Option<f64>)> {
    let model = load_model::<F>(cfg, dir, spec)?;
    let items = heldout_items(samples, model.config.mask_id(), cfg.seed)?;
    let nll = heldout_nll(&model, &items, cfg.eval.heldout_chunk)?;
    let kl = if samples.iter().any(|s| s.kind == SampleKind::Clean) {
        Some(probe_kl(&model, spec, samples, cfg.eval.probe_positions, cfg.seed)?)
    } else {
        None
    };
    Ok((nll, kl))
}

pub fn cmd_bench(args: &BenchArgs) -> Result<Summary> {
    execute(
        "bench",
        &args.common,
        &[
            ("checkpoint", Some(&args.checkpoint)),
            ("spec", Some(&args.spec)),
            ("corpus", Some(&args.corpus)),
        ],
        |cfg| {
            let b = &mut cfg.bench;
            if !args.batch_sizes.is_empty() {
                b.batch_sizes = args.batch_sizes.clone();
            }
            if !args.step_counts.is_empty() {
                b.step_counts = args.step_counts.clone();
            }
            b.runs = args.runs.unwrap_or(b.runs);
            if b.runs == 0 || b.batch_sizes.contains(&0) || b.step_counts.contains(&0) {
                bail!("runs, batch sizes and step counts must be positive");
            }
            require_checkpoint(&args.checkpoint)
        },
        |cfg, out| {
            let spec = load_spec(&args.spec)?;
            let samples = load_corpus(&args.corpus)?;
            let request = decode_requests(&spec, &samples[..1], PromptText::AsIs)?.remove(0);
            let rows = match cfg.train.precision {
                Precision::F32 => {
                    let model = load_model::<f32>(cfg, &args.checkpoint, &spec)?;
                    bench_decode(&model, &request, &cfg.bench.batch_sizes, &cfg.bench.step_counts, cfg.bench.runs, &cfg.sampler)?
                }
                Precision::F64 => {
                    let model = load_model::<f64>(cfg, &args.checkpoint, &spec)?;
                    bench_decode(&model, &request, &cfg.bench.batch_sizes, &cfg.bench.step_counts, cfg.bench.runs, &cfg.sampler)?
                }
            };
            write_bench_csv(&out.join("bench.csv"), &rows)?;
            for r in &rows {
                println!("batch {} steps {}: {:.3} ms/frame", r.batch, r.steps, r.wall_ms_per_frame);
            }
            // Wall times vary run to run, so they stay out of the summary.
            Ok(Outcome {
                outputs: vec!["bench.csv".into()],
                results: serde_json::json!({ "cells": rows.len() }),
                ..Outcome::default()
            })
        },
    )
}

pub fn cmd_plan(args: &PlanArgs) -> Result<Summary> {
    execute(
        "plan-resample",
        &args.common,
        &[("manifest", Some(&args.manifest))],
        |cfg| {
            cfg.resample.beta = args.beta.unwrap_or(cfg.resample.beta);
            if !(0.0..=1.0).contains(&cfg.resample.beta) {
                bail!("beta {} outside [0, 1]", cfg.resample.beta);
            }
            Ok(())
        },
        |cfg, out| {
            let manifest = LanguageManifest::read_csv(&args.manifest)?;
            let plan = plan_resample(&manifest, cfg.resample.beta)?;
            let mut bytes = serde_json::to_vec_pretty(&plan)?;
            bytes.push(b'\n');
            fs::write(out.join("plan.json"), bytes)?;
            for l in &plan.languages {
                println!("{}: {} h x{} = {} h", l.language, l.duration_hours, l.repeat, l.effective_hours);
            }
            Ok(Outcome {
                outputs: vec!["plan.json".into()],
                results: serde_json::json!({
                    "repeats": plan.languages.iter().map(|l| l.repeat).collect::<Vec<_>>(),
                }),
                ..Outcome::default()
            })
        },
    )
}
