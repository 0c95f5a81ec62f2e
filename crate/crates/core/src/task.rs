//! Synthetic training tasks: batch streams of (tokens, targets) pairs.
//!
//! Each sequence is generated as `seq_len + 1` tokens; the model sees the
//! first `seq_len` and predicts the stream shifted by one. Three sources:
//!
//! * `copy` — periodic streams with period `seq_len / 2`, so the second
//!   half of every sequence repeats the first half. Solvable by attending
//!   `seq_len / 2` positions back.
//! * `induction` — a per-sequence random bigram code: keys from the lower
//!   half of the vocabulary, values from the upper half, sequences formed
//!   by concatenating random pairs. Every later occurrence of a key is
//!   predictable by recalling what followed it last time — the classic
//!   induction-head probe, and the mapping changes per sequence so it
//!   cannot be memorized in the weights.
//! * `bytes` — sliding windows over a byte corpus (vocabulary 256), either
//!   a file or a deterministic synthetic text.

use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::Rng;

use serde::{Deserialize, Serialize};

/// Which generator to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Copy,
    Induction,
    Bytes,
}

fn default_synthetic_len() -> usize {
    1 << 16
}

/// Task section of an experiment config.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub kind: TaskKind,
    /// Corpus file for `bytes`; when absent, a synthetic text is generated
    /// from the task seed.
    #[serde(default)]
    pub path: Option<String>,
    /// Length of the synthetic corpus when no path is given.
    #[serde(default = "default_synthetic_len")]
    pub synthetic_len: usize,
}

/// One training batch: `batch_size` rows of `seq_len` token ids each,
/// targets shifted one position ahead.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub tokens: Vec<Vec<usize>>,
    pub targets: Vec<Vec<usize>>,
}

/// Deterministic batch source.
#[derive(Debug)]
pub struct TaskStream {
    kind: TaskKind,
    seq_len: usize,
    vocab: usize,
    rng: Rng,
    /// Byte corpus (`bytes` only).
    corpus: Vec<u8>,
}

impl TaskStream {
    /// Build a stream. `vocab` must be 256 for the bytes task; `copy`
    /// requires an even `seq_len` so the halves line up.
    pub fn new(cfg: &TaskConfig, seq_len: usize, vocab: usize, rng: Rng) -> Result<Self> {
        if seq_len < 2 {
            return Err(Error::Config(format!("seq_len = {seq_len} is too short")));
        }
        let mut rng = rng;
        let corpus = match cfg.kind {
            TaskKind::Copy => {
                if seq_len % 2 != 0 {
                    return Err(Error::Config(format!(
                        "copy task needs an even seq_len, got {seq_len}"
                    )));
                }
                if vocab < 2 {
                    return Err(Error::Config("copy task needs vocab >= 2".to_string()));
                }
                Vec::new()
            }
            TaskKind::Induction => {
                if vocab < 4 {
                    return Err(Error::Config(format!(
                        "induction task needs vocab >= 4, got {vocab}"
                    )));
                }
                Vec::new()
            }
            TaskKind::Bytes => {
                if vocab != 256 {
                    return Err(Error::Config(format!(
                        "bytes task requires vocab 256, got {vocab}"
                    )));
                }
                let corpus = match &cfg.path {
                    Some(p) => std::fs::read(Path::new(p)).map_err(Error::Io)?,
                    None => {
                        let mut text_rng = rng.fork("synthetic-text");
                        synthetic_text(&mut text_rng, cfg.synthetic_len)
                    }
                };
                if corpus.len() < seq_len + 1 {
                    return Err(Error::Config(format!(
                        "corpus of {} bytes is shorter than seq_len + 1 = {}",
                        corpus.len(),
                        seq_len + 1
                    )));
                }
                corpus
            }
        };
        Ok(TaskStream { kind: cfg.kind, seq_len, vocab, rng, corpus })
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    /// Generate one sequence of `seq_len + 1` tokens.
    fn next_stream(&mut self) -> Vec<usize> {
        let n = self.seq_len + 1;
        match self.kind {
            TaskKind::Copy => {
                let p = self.seq_len / 2;
                let head: Vec<usize> = (0..p).map(|_| self.rng.below(self.vocab)).collect();
                (0..n).map(|i| head[i % p]).collect()
            }
            TaskKind::Induction => {
                // Keys come from [0, vocab/2), values from [vocab/2, vocab),
                // so a key can never appear in value position and its
                // successor is always well defined.
                let half = self.vocab / 2;
                let n_pairs = (self.seq_len / 8).clamp(2, half);
                let mut keys: Vec<usize> = (0..half).collect();
                // Partial Fisher-Yates: the first n_pairs entries become a
                // uniform sample without replacement.
                for i in 0..n_pairs {
                    let j = i + self.rng.below(half - i);
                    keys.swap(i, j);
                }
                let values: Vec<usize> =
                    (0..n_pairs).map(|_| half + self.rng.below(self.vocab - half)).collect();
                let mut out = Vec::with_capacity(n + 1);
                while out.len() < n {
                    let j = self.rng.below(n_pairs);
                    out.push(keys[j]);
                    out.push(values[j]);
                }
                out.truncate(n);
                out
            }
            TaskKind::Bytes => {
                let start = self.rng.below(self.corpus.len() - self.seq_len);
                self.corpus[start..start + n].iter().map(|&b| b as usize).collect()
            }
        }
    }

    /// Next batch of `batch_size` independent sequences.
    pub fn next_batch(&mut self, batch_size: usize) -> Batch {
        let mut tokens = Vec::with_capacity(batch_size);
        let mut targets = Vec::with_capacity(batch_size);
        for _ in 0..batch_size {
            let s = self.next_stream();
            tokens.push(s[..self.seq_len].to_vec());
            targets.push(s[1..].to_vec());
        }
        Batch { tokens, targets }
    }
}

/// Deterministic word-like byte text: lowercase words with a skewed letter
/// distribution, spaces, sentence breaks. Non-uniform enough that a small
/// model has something to learn, with no external corpus dependency.
pub fn synthetic_text(rng: &mut Rng, len: usize) -> Vec<u8> {
    // Letter weights fall off roughly geometrically, echoing natural text.
    const LETTERS: &[u8] = b"etaoinshrdlucmfwypvbgkjqxz";
    let mut out = Vec::with_capacity(len);
    let mut words_in_sentence = 0usize;
    while out.len() < len {
        let word_len = 2 + rng.below(6);
        for _ in 0..word_len {
            // Squaring a uniform draw skews toward small indices, i.e.
            // toward the common letters at the front of the table.
            let u = rng.next_f64();
            let idx = ((u * u) * LETTERS.len() as f64) as usize % LETTERS.len();
            out.push(LETTERS[idx]);
        }
        words_in_sentence += 1;
        let sentence_len = 6 + rng.below(8);
        if words_in_sentence >= sentence_len {
            out.push(b'.');
            out.push(b'\n');
            words_in_sentence = 0;
        } else {
            out.push(b' ');
        }
    }
    out.truncate(len);
    out
}
