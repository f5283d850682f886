use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `T × C` matrix of codebook token ids, stored frame-major.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<u32>>", into = "Vec<Vec<u32>>")]
pub struct TokenGrid {
    frames: usize,
    codebooks: usize,
    data: Vec<u32>,
}

impl TokenGrid {
    pub fn filled(frames: usize, codebooks: usize, value: u32) -> Self {
        Self {
            frames,
            codebooks,
            data: vec![value; frames * codebooks],
        }
    }

    pub fn from_rows(rows: Vec<Vec<u32>>) -> Result<Self> {
        let codebooks = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != codebooks) {
            return Err(Error::Input("ragged token grid".into()));
        }
        Ok(Self {
            frames: rows.len(),
            codebooks,
            data: rows.into_iter().flatten().collect(),
        })
    }

    pub fn from_flat(frames: usize, codebooks: usize, data: Vec<u32>) -> Result<Self> {
        if data.len() != frames * codebooks {
            return Err(Error::Input(format!(
                "grid data of {} ids does not fill {frames}x{codebooks}",
                data.len()
            )));
        }
        Ok(Self {
            frames,
            codebooks,
            data,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn codebooks(&self) -> usize {
        self.codebooks
    }

    pub fn get(&self, t: usize, c: usize) -> u32 {
        self.data[t * self.codebooks + c]
    }

    pub fn set(&mut self, t: usize, c: usize, value: u32) {
        self.data[t * self.codebooks + c] = value;
    }

    pub fn row(&self, t: usize) -> &[u32] {
        &self.data[t * self.codebooks..(t + 1) * self.codebooks]
    }

    pub fn as_flat(&self) -> &[u32] {
        &self.data
    }

    /// Ids of codebook `c` across all frames.
    pub fn column(&self, c: usize) -> impl Iterator<Item = u32> + '_ {
        self.data.iter().skip(c).step_by(self.codebooks.max(1)).copied()
    }

    pub fn frames_range(&self, range: Range<usize>) -> Self {
        Self {
            frames: range.len(),
            codebooks: self.codebooks,
            data: self.data[range.start * self.codebooks..range.end * self.codebooks].to_vec(),
        }
    }

    /// Frames of `self` followed by frames of `other`.
    pub fn append(&self, other: &Self) -> Result<Self> {
        if self.frames > 0 && other.frames > 0 && self.codebooks != other.codebooks {
            return Err(Error::Input(format!(
                "cannot join grids with {} and {} codebooks",
                self.codebooks, other.codebooks
            )));
        }
        let codebooks = if self.frames > 0 { self.codebooks } else { other.codebooks };
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(Self {
            frames: self.frames + other.frames,
            codebooks,
            data,
        })
    }

    pub fn check_vocab(&self, vocab: usize) -> Result<()> {
        match self.data.iter().find(|&&x| x as usize >= vocab) {
            Some(x) => Err(Error::Input(format!("codebook id {x} outside vocabulary of {vocab}"))),
            None => Ok(()),
        }
    }
}

impl TryFrom<Vec<Vec<u32>>> for TokenGrid {
    type Error = Error;

    fn try_from(rows: Vec<Vec<u32>>) -> Result<Self> {
        Self::from_rows(rows)
    }
}

impl From<TokenGrid> for Vec<Vec<u32>> {
    fn from(g: TokenGrid) -> Self {
        (0..g.frames).map(|t| g.row(t).to_vec()).collect()
    }
}

/// Text prefix (instruct + transcript ids) with an acoustic grid whose first
/// `prompt_len` frames are the prompt and the rest the target.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sequence {
    pub text: Vec<u32>,
    pub grid: TokenGrid,
    pub prompt_len: usize,
}

impl Sequence {
    pub fn new(text: Vec<u32>, grid: TokenGrid, prompt_len: usize) -> Result<Self> {
        let seq = Self {
            text,
            grid,
            prompt_len,
        };
        if seq.text.is_empty() {
            return Err(Error::Input("empty text prefix".into()));
        }
        if seq.prompt_len > seq.grid.frames() {
            return Err(Error::Input(format!(
                "prompt length {} exceeds {} frames",
                seq.prompt_len,
                seq.grid.frames()
            )));
        }
        Ok(seq)
    }

    pub fn target_len(&self) -> usize {
        self.grid.frames() - self.prompt_len
    }

    /// Token count once laid out as `[text][frames]`.
    pub fn token_len(&self) -> usize {
        self.text.len() + self.grid.frames()
    }
}
