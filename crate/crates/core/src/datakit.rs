//! Language resampling and sequence packing.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LanguageEntry {
    pub language: String,
    pub duration_hours: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LanguageManifest {
    pub entries: Vec<LanguageEntry>,
}

impl LanguageManifest {
    pub fn new(entries: Vec<LanguageEntry>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Input("empty language manifest".into()));
        }
        let mut seen = BTreeSet::new();
        for e in &entries {
            if !(e.duration_hours > 0.0 && e.duration_hours.is_finite()) {
                return Err(Error::Input(format!(
                    "language {} has non-positive duration {}",
                    e.language, e.duration_hours
                )));
            }
            if !seen.insert(e.language.as_str()) {
                return Err(Error::Input(format!("duplicate language {}", e.language)));
            }
        }
        Ok(Self { entries })
    }

    /// Reads a `language,duration_hours` CSV with a header row.
    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(source) => Error::Io {
                path: path.display().to_string(),
                source,
            },
            other => Error::Input(format!("{}: {other:?}", path.display())),
        })?;
        let entries = reader.deserialize().collect::<std::result::Result<Vec<LanguageEntry>, _>>()?;
        Self::new(entries)
    }

    pub fn max_duration(&self) -> f64 {
        self.entries.iter().map(|e| e.duration_hours).fold(f64::MIN, f64::max)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LanguageRepeat {
    pub language: String,
    pub duration_hours: f64,
    pub repeat: u64,
    pub effective_hours: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResamplePlan {
    pub beta: f64,
    pub languages: Vec<LanguageRepeat>,
}

/// `r_i = max(1, round((D_max / D_i)^(1 − β)))`, rounding half away from
/// zero.
pub fn repetition_factor(d_max: f64, d_i: f64, beta: f64) -> u64 {
    ((d_max / d_i).powf(1.0 - beta).round() as u64).max(1)
}

pub fn plan_resample(manifest: &LanguageManifest, beta: f64) -> Result<ResamplePlan> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::Input(format!("beta {beta} outside [0, 1]")));
    }
    let manifest = LanguageManifest::new(manifest.entries.clone())?;
    let d_max = manifest.max_duration();
    let languages = manifest
        .entries
        .iter()
        .map(|e| {
            let repeat = repetition_factor(d_max, e.duration_hours, beta);
            LanguageRepeat {
                language: e.language.clone(),
                duration_hours: e.duration_hours,
                repeat,
                effective_hours: repeat as f64 * e.duration_hours,
            }
        })
        .collect();
    Ok(ResamplePlan { beta, languages })
}

/// Epoch index list: item `i` appears `repeats[i]` times.
pub fn repeat_indices(repeats: &[u64]) -> Vec<usize> {
    repeats
        .iter()
        .enumerate()
        .flat_map(|(i, &r)| std::iter::repeat(i).take(r as usize))
        .collect()
}

/// One packed row of sequences. Each segment is a contiguous token span
/// whose position ids restart at zero and whose attention stays inside it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackedBatch {
    /// Input indices, in placement order.
    pub items: Vec<usize>,
    /// `(start, len)` token spans, parallel to `items`.
    pub segments: Vec<(usize, usize)>,
    pub budget: usize,
}

impl PackedBatch {
    pub fn tokens(&self) -> usize {
        self.segments.iter().map(|s| s.1).sum()
    }

    pub fn position_ids(&self) -> Vec<usize> {
        self.segments.iter().flat_map(|&(_, len)| 0..len).collect()
    }

    /// Segment index of every token.
    pub fn segment_ids(&self) -> Vec<usize> {
        self.segments
            .iter()
            .enumerate()
            .flat_map(|(i, &(_, len))| std::iter::repeat(i).take(len))
            .collect()
    }

    fn push(&mut self, item: usize, len: usize) {
        let start = self.tokens();
        self.items.push(item);
        self.segments.push((start, len));
    }
}

fn check_sizes(sizes: &[usize], budget: usize) -> Result<()> {
    if let Some((i, &s)) = sizes.iter().enumerate().find(|(_, &s)| s > budget || s == 0) {
        return Err(Error::Input(format!("sequence {i} has {s} tokens, budget is {budget}")));
    }
    Ok(())
}

/// First-fit-decreasing placement of sequences with `sizes` tokens.
pub fn pack(sizes: &[usize], budget: usize) -> Result<Vec<PackedBatch>> {
    check_sizes(sizes, budget)?;
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by_key(|&i| std::cmp::Reverse(sizes[i]));
    let mut batches: Vec<PackedBatch> = Vec::new();
    for i in order {
        match batches.iter_mut().find(|b| b.tokens() + sizes[i] <= budget) {
            Some(b) => b.push(i, sizes[i]),
            None => {
                let mut b = PackedBatch {
                    items: Vec::new(),
                    segments: Vec::new(),
                    budget,
                };
                b.push(i, sizes[i]);
                batches.push(b);
            }
        }
    }
    Ok(batches)
}

/// Next-fit placement that keeps input order, used when the order itself
/// carries meaning (a shuffled epoch).
pub fn pack_in_order(sizes: &[usize], budget: usize) -> Result<Vec<PackedBatch>> {
    check_sizes(sizes, budget)?;
    let mut batches: Vec<PackedBatch> = Vec::new();
    for (i, &s) in sizes.iter().enumerate() {
        match batches.last_mut() {
            Some(b) if b.tokens() + s <= budget => b.push(i, s),
            _ => {
                let mut b = PackedBatch {
                    items: Vec::new(),
                    segments: Vec::new(),
                    budget,
                };
                b.push(i, s);
                batches.push(b);
            }
        }
    }
    Ok(batches)
}

/// Concatenated token stream of one batch.
pub fn pack_tokens<T: Clone>(batch: &PackedBatch, seqs: &[Vec<T>]) -> Vec<T> {
    batch.items.iter().flat_map(|&i| seqs[i].iter().cloned()).collect()
}

/// Inverse of [`pack`] + [`pack_tokens`]: original sequences in input order.
pub fn unpack<T: Clone>(batches: &[PackedBatch], streams: &[Vec<T>]) -> Result<Vec<Vec<T>>> {
    let n = batches.iter().map(|b| b.items.len()).sum();
    let mut out: Vec<Option<Vec<T>>> = vec![None; n];
    for (b, stream) in batches.iter().zip(streams) {
        for (&item, &(start, len)) in b.items.iter().zip(&b.segments) {
            let slot = out
                .get_mut(item)
                .ok_or_else(|| Error::Input(format!("item {item} outside {n} packed sequences")))?;
            *slot = Some(stream[start..start + len].to_vec());
        }
    }
    out.into_iter()
        .enumerate()
        .map(|(i, s)| s.ok_or_else(|| Error::Input(format!("sequence {i} missing from packed batches"))))
        .collect()
}
