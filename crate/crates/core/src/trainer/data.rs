use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use rand::Rng;

use crate::linalg::{seeded_rng, SeededRng};

/// Byte tokens occupy ids `0..256`.
pub const BYTE_TOKENS: usize = 256;
pub const BOS: usize = 256;
pub const EOS: usize = 257;
/// Bytes plus the two specials.
pub const VOCAB: usize = 258;

/// Identity mapping from bytes to token ids.
pub fn byte_tokenize(bytes: &[u8]) -> Vec<usize> {
    bytes.iter().map(|&b| b as usize).collect()
}

/// Inverse of [`byte_tokenize`]; special tokens are dropped.
pub fn detokenize(tokens: &[usize]) -> Vec<u8> {
    tokens.iter().filter(|&&t| t < BYTE_TOKENS).map(|&t| t as u8).collect()
}

/// A training window: `target[i] == input[i + 1]` within the corpus.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub input: Vec<usize>,
    pub target: Vec<usize>,
}

impl Window {
    /// Window of `seq` inputs starting at `offset`.
    pub fn at(tokens: &[usize], offset: usize, seq: usize) -> Result<Self> {
        if offset + seq >= tokens.len() {
            return Err(Error::InvalidArgument(format!(
                "window {offset}+{seq} does not fit a corpus of {} tokens",
                tokens.len()
            )));
        }
        Ok(Self {
            input: tokens[offset..offset + seq].to_vec(),
            target: tokens[offset + 1..offset + seq + 1].to_vec(),
        })
    }
}

/// Endless seeded stream of batches of contiguous windows.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    tokens: Arc<[usize]>,
    batch: usize,
    seq: usize,
    rng: SeededRng,
}

impl BatchSampler {
    pub fn new(tokens: impl Into<Arc<[usize]>>, batch: usize, seq: usize, seed: u64) -> Result<Self> {
        let tokens = tokens.into();
        if batch == 0 || seq == 0 {
            return Err(Error::InvalidArgument("batch and seq must be at least 1".into()));
        }
        if tokens.len() <= seq {
            return Err(Error::InvalidArgument(format!(
                "corpus of {} tokens is too short for windows of {seq}",
                tokens.len()
            )));
        }
        Ok(Self {
            tokens,
            batch,
            seq,
            rng: seeded_rng(seed),
        })
    }

    /// Number of distinct window start offsets.
    pub fn offsets(&self) -> usize {
        self.tokens.len() - self.seq
    }

    pub fn next_offset(&mut self) -> usize {
        self.rng.random_range(0..self.offsets())
    }

    pub fn next_batch(&mut self) -> Vec<Window> {
        (0..self.batch)
            .map(|_| {
                let o = self.next_offset();
                Window::at(&self.tokens, o, self.seq).expect("offset in range")
            })
            .collect()
    }
}

impl Iterator for BatchSampler {
    type Item = Vec<Window>;

    fn next(&mut self) -> Option<Vec<Window>> {
        Some(self.next_batch())
    }
}

/// Entropy in nats of the corpus' token frequencies.
pub fn unigram_entropy(tokens: &[usize]) -> f64 {
    if tokens.is_empty() {
        return 0.0;
    }
    let mut counts = vec![0u64; tokens.iter().max().map_or(0, |m| m + 1)];
    for &t in tokens {
        counts[t] += 1;
    }
    let n = tokens.len() as f64;
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

const REFRAIN: &str = "the quick brown fox jumps over the lazy dog. \
a low rank layer keeps two thin factors instead of one wide matrix. \
pack my box with five dozen liquor jugs! how vexingly quick daft zebras jump. \
sphinx of black quartz, judge my vow; 0123456789\n";

/// Deterministic text of `len` bytes built by repeating a short refrain.
pub fn repetitive_corpus(len: usize) -> Vec<u8> {
    REFRAIN.bytes().cycle().take(len).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenize_roundtrip() {
        assert!(byte_tokenize(b"").is_empty());
        assert_eq!(byte_tokenize(b"ab"), vec![97, 98]);
        let text = b"bytes \x00\xff round trip";
        assert_eq!(detokenize(&byte_tokenize(text)), text.to_vec());
        assert_eq!(detokenize(&[BOS, 104, 105, EOS]), b"hi".to_vec());
    }

    #[test]
    fn windows_are_shifted_by_one() {
        let tokens: Vec<usize> = (0..50).collect();
        let mut s = BatchSampler::new(tokens, 3, 8, 1).unwrap();
        for w in s.next_batch() {
            assert_eq!(w.input.len(), 8);
            assert_eq!(&w.input[1..], &w.target[..7]);
            assert_eq!(w.target[7], w.input[7] + 1);
        }
    }

    #[test]
    fn same_seed_same_batches() {
        let tokens = byte_tokenize(&repetitive_corpus(500));
        let a: Vec<_> = BatchSampler::new(tokens.clone(), 2, 16, 9).unwrap().take(5).collect();
        let b: Vec<_> = BatchSampler::new(tokens.clone(), 2, 16, 9).unwrap().take(5).collect();
        let c: Vec<_> = BatchSampler::new(tokens, 2, 16, 10).unwrap().take(5).collect();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn every_offset_is_drawn() {
        // 20 offsets, 2000 draws: the chance of missing one is ~20·0.95^2000.
        let tokens: Vec<usize> = (0..24).collect();
        let mut s = BatchSampler::new(tokens, 1, 4, 3).unwrap();
        let mut seen = vec![0usize; s.offsets()];
        for _ in 0..2000 {
            seen[s.next_offset()] += 1;
        }
        assert!(seen.iter().all(|&c| c > 0), "{seen:?}");
        // Roughly uniform: each bucket within 40% of the mean of 100.
        assert!(seen.iter().all(|&c| (60..=140).contains(&c)), "{seen:?}");
    }

    #[test]
    fn short_corpus_is_rejected() {
        assert!(BatchSampler::new(vec![1usize, 2, 3], 1, 3, 0).is_err());
        assert!(BatchSampler::new(vec![1usize, 2, 3, 4], 1, 3, 0).is_ok());
    }

    #[test]
    fn entropy_oracles() {
        assert_eq!(unigram_entropy(&[]), 0.0);
        assert_eq!(unigram_entropy(&[5, 5, 5]), 0.0);
        assert!((unigram_entropy(&[0, 1, 2, 3]) - 4f64.ln()).abs() < 1e-15);
        let corpus = byte_tokenize(&repetitive_corpus(65_536));
        let h = unigram_entropy(&corpus);
        assert!(h > 2.0 && h < 4.0, "{h}");
    }
}
