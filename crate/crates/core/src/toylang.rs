//! A synthetic text-to-grid language whose posterior is exactly computable.
//!
//! Each text symbol `y` spans `L` frames. Speaker `s` renders slot `l` of
//! symbol `y` in codebook `c` as `(b_c(y, l) + o_c(s)) mod (K − 1)`, so the
//! reserved mask id `K − 1` never appears in clean data.
//!
//! Noise is a per-codebook channel shift: a recording made through a noisy
//! channel has a random subset of its codebooks shifted by a constant. Noisy
//! recordings carry the shift through prompt and target alike. Denoise
//! samples shift only the prompt, keep a clean target, and lead the text
//! with the denoise instruct token.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Sequence, TokenGrid};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyParams {
    pub alphabet: usize,
    pub frames_per_symbol: usize,
    pub speakers: usize,
    pub codebooks: usize,
    pub codebook_vocab: usize,
    pub text_vocab: usize,
    /// Probability that a given codebook is shifted in a noisy channel.
    pub noise_rate: f64,
    pub symbols_per_sample: usize,
    pub min_prompt_symbols: usize,
    pub max_prompt_symbols: usize,
}

impl Default for ToyParams {
    fn default() -> Self {
        Self {
            alphabet: 26,
            frames_per_symbol: 2,
            speakers: 8,
            codebooks: 4,
            codebook_vocab: 64,
            text_vocab: 64,
            noise_rate: 0.25,
            symbols_per_sample: 10,
            min_prompt_symbols: 2,
            max_prompt_symbols: 4,
        }
    }
}

impl ToyParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        let codes = self.codebook_vocab.saturating_sub(1);
        if self.alphabet == 0 || self.frames_per_symbol == 0 || self.speakers == 0 || self.codebooks == 0 {
            return bad("alphabet, frames_per_symbol, speakers and codebooks must be positive");
        }
        if self.alphabet > codes || self.speakers > codes {
            return bad("alphabet and speakers must not exceed codebook_vocab - 1");
        }
        // Symbols, the denoise id, and the null-text id must be distinct.
        if self.alphabet + 2 > self.text_vocab {
            return bad("text_vocab must hold the alphabet plus denoise and null ids");
        }
        if !(0.0..=1.0).contains(&self.noise_rate) {
            return bad("noise_rate must lie in [0, 1]");
        }
        if self.min_prompt_symbols > self.max_prompt_symbols || self.max_prompt_symbols >= self.symbols_per_sample {
            return bad("need min_prompt_symbols <= max_prompt_symbols < symbols_per_sample");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToySpec {
    pub params: ToyParams,
    /// `base[c][l][y]`, injective in `y` for every `(c, l)`.
    pub base: Vec<Vec<Vec<u32>>>,
    /// `offsets[s][c]`, distinct across speakers for every `c`.
    pub offsets: Vec<Vec<u32>>,
}

impl ToySpec {
    pub fn new(params: ToyParams, rng: &mut impl Rng) -> Result<Self> {
        params.validate()?;
        let codes: Vec<u32> = (0..(params.codebook_vocab - 1) as u32).collect();
        let base = (0..params.codebooks)
            .map(|_| {
                (0..params.frames_per_symbol)
                    .map(|_| codes.choose_multiple(rng, params.alphabet).copied().collect())
                    .collect()
            })
            .collect();
        let per_codebook: Vec<Vec<u32>> = (0..params.codebooks)
            .map(|_| codes.choose_multiple(rng, params.speakers).copied().collect())
            .collect();
        let offsets = (0..params.speakers)
            .map(|s| per_codebook.iter().map(|col| col[s]).collect())
            .collect();
        let spec = Self { params, base, offsets };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.params;
        p.validate()?;
        let codes = (p.codebook_vocab - 1) as u32;
        let bad = |m: &str| Err(Error::Config(format!("toy spec tables: {m}")));
        if self.base.len() != p.codebooks
            || self
                .base
                .iter()
                .any(|slots| slots.len() != p.frames_per_symbol || slots.iter().any(|row| row.len() != p.alphabet))
        {
            return bad("base table has the wrong shape");
        }
        for row in self.base.iter().flatten() {
            let mut seen = vec![false; codes as usize];
            for &x in row {
                if x >= codes || std::mem::replace(&mut seen[x as usize], true) {
                    return bad("base table must be injective and below the mask id");
                }
            }
        }
        if self.offsets.len() != p.speakers || self.offsets.iter().any(|o| o.len() != p.codebooks) {
            return bad("offset table has the wrong shape");
        }
        for c in 0..p.codebooks {
            let mut col: Vec<u32> = self.offsets.iter().map(|o| o[c]).collect();
            col.sort_unstable();
            col.dedup();
            if col.len() != p.speakers || col.iter().any(|&x| x >= codes) {
                return bad("offsets must be distinct per codebook and below the mask id");
            }
        }
        Ok(())
    }

    pub fn mask_id(&self) -> u32 {
        (self.params.codebook_vocab - 1) as u32
    }

    pub fn denoise_id(&self) -> u32 {
        self.params.alphabet as u32
    }

    fn modulus(&self) -> u32 {
        (self.params.codebook_vocab - 1) as u32
    }

    pub fn code(&self, symbol: u32, slot: usize, speaker: usize, c: usize) -> u32 {
        (self.base[c][slot][symbol as usize] + self.offsets[speaker][c]) % self.modulus()
    }

    /// Clean grid for `symbols` spoken by `speaker`.
    pub fn render(&self, symbols: &[u32], speaker: usize) -> TokenGrid {
        let (l_count, c_count) = (self.params.frames_per_symbol, self.params.codebooks);
        let mut grid = TokenGrid::filled(symbols.len() * l_count, c_count, 0);
        for (i, &y) in symbols.iter().enumerate() {
            for l in 0..l_count {
                for c in 0..c_count {
                    grid.set(i * l_count + l, c, self.code(y, l, speaker, c));
                }
            }
        }
        grid
    }

    /// Symbol that frame `row` (at slot `slot`) spells under `speaker`, if
    /// every codebook agrees on one.
    pub fn invert_frame(&self, row: &[u32], slot: usize, speaker: usize) -> Option<u32> {
        let m = self.modulus();
        let mut found = None;
        for (c, &x) in row.iter().enumerate() {
            if x >= m {
                return None;
            }
            let raw = (x + m - self.offsets[speaker][c]) % m;
            let y = self.base[c][slot].iter().position(|&b| b == raw)? as u32;
            match found {
                None => found = Some(y),
                Some(prev) if prev != y => return None,
                _ => {}
            }
        }
        found
    }

    /// Speakers under which every frame of `grid` spells some symbol.
    pub fn consistent_speakers(&self, grid: &TokenGrid) -> Vec<usize> {
        let l_count = self.params.frames_per_symbol;
        (0..self.params.speakers)
            .filter(|&s| (0..grid.frames()).all(|t| self.invert_frame(grid.row(t), t % l_count, s).is_some()))
            .collect()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self)?).map_err(Error::io(path))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let spec: Self = serde_json::from_slice(&fs::read(path).map_err(Error::io(path))?)?;
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleKind {
    Clean,
    /// Noisy channel throughout prompt and target.
    Noisy,
    /// Noisy prompt, clean target, denoise instruct token in the text.
    Denoise,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToySample {
    pub text: Vec<u32>,
    pub grid: TokenGrid,
    pub prompt_len: usize,
    pub speaker: usize,
    pub kind: SampleKind,
    /// One flag per prompt frame: true where the channel altered the frame.
    pub flags: Vec<bool>,
}

impl ToySample {
    pub fn sequence(&self) -> Sequence {
        Sequence {
            text: self.text.clone(),
            grid: self.grid.clone(),
            prompt_len: self.prompt_len,
        }
    }

    /// Transcript symbols, without any instruct token.
    pub fn symbols(&self, spec: &ToySpec) -> Vec<u32> {
        self.text.iter().copied().filter(|&x| (x as usize) < spec.params.alphabet).collect()
    }

    /// Symbols spoken in the target region.
    pub fn reference(&self, spec: &ToySpec) -> Vec<u32> {
        self.symbols(spec)[self.prompt_len / spec.params.frames_per_symbol..].to_vec()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GenOptions {
    pub count: usize,
    /// Fraction of denoise samples.
    pub corrupt_fraction: f64,
    /// Fraction of recordings made through a noisy channel end to end.
    pub noisy_fraction: f64,
}

impl GenOptions {
    pub fn clean(count: usize) -> Self {
        Self {
            count,
            corrupt_fraction: 0.0,
            noisy_fraction: 0.0,
        }
    }
}

/// Per-codebook shifts for one noisy channel. At least one codebook stays
/// clean (when C > 1) so the speaker remains identifiable.
fn draw_channel(spec: &ToySpec, rng: &mut impl Rng) -> Vec<u32> {
    let c_count = spec.params.codebooks;
    let m = spec.modulus();
    let rate = spec.params.noise_rate;
    if rate == 0.0 || rate == 1.0 {
        // Degenerate rates: shift exactly one codebook, or all but one.
        let keep = rng.gen_range(0..c_count);
        return (0..c_count)
            .map(|c| {
                let shifted = if rate == 0.0 { c == keep } else { c != keep || c_count == 1 };
                if shifted { rng.gen_range(1..m) } else { 0 }
            })
            .collect();
    }
    loop {
        let shifts: Vec<u32> = (0..c_count)
            .map(|_| if rng.gen_bool(rate) { rng.gen_range(1..m) } else { 0 })
            .collect();
        let hit = shifts.iter().filter(|&&j| j != 0).count();
        if hit >= 1 && (hit < c_count || c_count == 1) {
            return shifts;
        }
    }
}

fn apply_channel(spec: &ToySpec, grid: &mut TokenGrid, frames: std::ops::Range<usize>, shifts: &[u32]) {
    let m = spec.modulus();
    for t in frames {
        for (c, &j) in shifts.iter().enumerate() {
            grid.set(t, c, (grid.get(t, c) + j) % m);
        }
    }
}

pub fn generate_one(spec: &ToySpec, kind: SampleKind, rng: &mut impl Rng) -> ToySample {
    let p = &spec.params;
    let symbols: Vec<u32> = (0..p.symbols_per_sample).map(|_| rng.gen_range(0..p.alphabet as u32)).collect();
    let speaker = rng.gen_range(0..p.speakers);
    let prompt_symbols = rng.gen_range(p.min_prompt_symbols..=p.max_prompt_symbols);
    let prompt_len = prompt_symbols * p.frames_per_symbol;
    let mut grid = spec.render(&symbols, speaker);
    let mut text = symbols;
    let noisy_until = match kind {
        SampleKind::Clean => 0,
        SampleKind::Noisy => grid.frames(),
        SampleKind::Denoise => {
            text.insert(0, spec.denoise_id());
            prompt_len
        }
    };
    if noisy_until > 0 {
        let shifts = draw_channel(spec, rng);
        apply_channel(spec, &mut grid, 0..noisy_until, &shifts);
    }
    ToySample {
        text,
        grid,
        prompt_len,
        speaker,
        kind,
        flags: vec![kind != SampleKind::Clean; prompt_len],
    }
}

pub fn generate(spec: &ToySpec, rng: &mut impl Rng, options: GenOptions) -> Vec<ToySample> {
    (0..options.count)
        .map(|_| {
            let u: f64 = rng.gen();
            let kind = if u < options.corrupt_fraction {
                SampleKind::Denoise
            } else if u < options.corrupt_fraction + options.noisy_fraction {
                SampleKind::Noisy
            } else {
                SampleKind::Clean
            };
            generate_one(spec, kind, rng)
        })
        .collect()
}

pub fn write_corpus(path: &Path, samples: &[ToySample]) -> Result<()> {
    let mut out = Vec::new();
    for s in samples {
        serde_json::to_writer(&mut out, s)?;
        out.push(b'\n');
    }
    let mut file = fs::File::create(path).map_err(Error::io(path))?;
    file.write_all(&out).map_err(Error::io(path))
}

pub fn read_corpus(path: &Path) -> Result<Vec<ToySample>> {
    let file = fs::File::open(path).map_err(Error::io(path))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(Error::io(path))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Exact distributions over the codebook vocabulary at the masked positions
/// of `grid`, in frame-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct Posterior {
    pub positions: Vec<(usize, usize)>,
    pub probs: Vec<Vec<f64>>,
    pub speakers: Vec<usize>,
}

/// Enumerates the speakers that agree with every visible position of a
/// clean recording of `symbols`; each masked position's posterior is the
/// uniform mixture of their renderings.
pub fn oracle_posterior(spec: &ToySpec, symbols: &[u32], grid: &TokenGrid) -> Result<Posterior> {
    let p = &spec.params;
    if grid.frames() != symbols.len() * p.frames_per_symbol || grid.codebooks() != p.codebooks {
        return Err(Error::Input(format!(
            "grid {}x{} does not match {} symbols",
            grid.frames(),
            grid.codebooks(),
            symbols.len()
        )));
    }
    let mask = spec.mask_id();
    let symbol_at = |t: usize| symbols[t / p.frames_per_symbol];
    let slot = |t: usize| t % p.frames_per_symbol;
    let speakers: Vec<usize> = (0..p.speakers)
        .filter(|&s| {
            (0..grid.frames()).all(|t| {
                (0..p.codebooks).all(|c| {
                    let x = grid.get(t, c);
                    x == mask || x == spec.code(symbol_at(t), slot(t), s, c)
                })
            })
        })
        .collect();
    if speakers.is_empty() {
        return Err(Error::Inconsistent);
    }
    let weight = 1.0 / speakers.len() as f64;
    let mut positions = Vec::new();
    let mut probs = Vec::new();
    for t in 0..grid.frames() {
        for c in 0..p.codebooks {
            if grid.get(t, c) != mask {
                continue;
            }
            let mut dist = vec![0.0; p.codebook_vocab];
            for &s in &speakers {
                dist[spec.code(symbol_at(t), slot(t), s, c) as usize] += weight;
            }
            positions.push((t, c));
            probs.push(dist);
        }
    }
    Ok(Posterior {
        positions,
        probs,
        speakers,
    })
}

/// `KL(p ‖ q)` for a distribution `p` and log-probabilities `log_q`.
pub fn kl_divergence(p: &[f64], log_q: &[f64]) -> f64 {
    p.iter()
        .zip(log_q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &lq)| pi * (pi.ln() - lq))
        .sum()
}

fn levenshtein(hyp: &[Option<u32>], reference: &[u32]) -> usize {
    let mut prev: Vec<usize> = (0..=reference.len()).collect();
    for (i, h) in hyp.iter().enumerate() {
        let mut cur = vec![i + 1; reference.len() + 1];
        for (j, r) in reference.iter().enumerate() {
            let sub = prev[j] + usize::from(*h != Some(*r));
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        prev = cur;
    }
    prev[reference.len()]
}

/// Speaker under which the most frames of `grid` are readable; ties go to
/// the lowest id.
pub fn best_fit_speaker(spec: &ToySpec, grid: &TokenGrid) -> usize {
    let l_count = spec.params.frames_per_symbol;
    (0..spec.params.speakers)
        .max_by_key(|&s| {
            let hits = (0..grid.frames())
                .filter(|&t| spec.invert_frame(grid.row(t), t % l_count, s).is_some())
                .count();
            (hits, std::cmp::Reverse(s))
        })
        .unwrap_or(0)
}

/// Reads `grid` back into symbols under its best-fit speaker; a symbol
/// whose frames disagree or fail to invert reads as `None`.
pub fn transcribe(spec: &ToySpec, grid: &TokenGrid) -> Result<Vec<Option<u32>>> {
    let l_count = spec.params.frames_per_symbol;
    if grid.frames() % l_count != 0 {
        return Err(Error::Input(format!(
            "grid of {} frames is not a multiple of {l_count} frames per symbol",
            grid.frames()
        )));
    }
    let s = best_fit_speaker(spec, grid);
    Ok((0..grid.frames() / l_count)
        .map(|i| {
            let mut ys = (0..l_count).map(|l| spec.invert_frame(grid.row(i * l_count + l), l, s));
            let first = ys.next().flatten()?;
            ys.all(|y| y == Some(first)).then_some(first)
        })
        .collect())
}

/// Symbol edit distance against `reference`, divided by its length.
pub fn toy_wer(spec: &ToySpec, grid: &TokenGrid, reference: &[u32]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Input("empty reference".into()));
    }
    let hyp = transcribe(spec, grid)?;
    Ok(levenshtein(&hyp, reference) as f64 / reference.len() as f64)
}

/// Fraction of `decoded` frames readable under the speaker identified by
/// `prompt`. Both grids must start at symbol boundaries.
pub fn toy_sim(spec: &ToySpec, decoded: &TokenGrid, prompt: &TokenGrid) -> Result<f64> {
    let speakers = spec.consistent_speakers(prompt);
    let [s] = speakers[..] else {
        return Err(Error::AmbiguousPrompt);
    };
    if decoded.frames() == 0 {
        return Err(Error::Input("empty decoded grid".into()));
    }
    let l_count = spec.params.frames_per_symbol;
    let hits = (0..decoded.frames())
        .filter(|&t| spec.invert_frame(decoded.row(t), t % l_count, s).is_some())
        .count();
    Ok(hits as f64 / decoded.frames() as f64)
}
