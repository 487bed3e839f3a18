//! Frozen text encoders: the deterministic hashed stub used everywhere in
//! this repo, and an adapter that reads precomputed embeddings from a
//! file so any external expert encoder can be plugged in offline.
//!
//! The stub maps each token to a fixed pseudo-random Gaussian direction
//! (sum of twelve dyadic uniforms, so it is bit-stable across platforms —
//! no transcendental functions) and L2-normalizes the bag-of-words sum.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TextEmbedding;
use crate::error::{Error, Result};
use crate::seeding::{fnv1a, mix2, mix3, SplitMix64};

/// A frozen text embedder: no method takes `&mut self`, and
/// [`state_digest`](TextEncoder::state_digest) lets callers verify
/// bitwise that training never touched it. `Send + Sync` so one encoder
/// can serve parallel batch workers.
pub trait TextEncoder: Send + Sync {
    fn dim(&self) -> usize;
    /// Embed each text; every output is unit-norm.
    fn encode(&self, texts: &[&str]) -> Result<Vec<TextEmbedding>>;
    /// Deterministic digest of all internal state.
    fn state_digest(&self) -> u64;
}

/// Lowercased maximal alphanumeric runs.
fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

/// Standard-normal-ish value from twelve uniform draws; uses only
/// add/multiply so results are identical on every platform.
fn irwin_hall_gaussian(stream: &mut SplitMix64) -> f64 {
    let mut acc = 0.0;
    for _ in 0..12 {
        acc += stream.next_unit_f64();
    }
    acc - 6.0
}

/// Deterministic bag-of-words embedding: each token hashes to a fixed
/// d-dimensional Gaussian direction; the token-vector sum is
/// L2-normalized. Identical strings give identical embeddings on every
/// platform and run.
pub fn stub_encode_text(texts: &[&str], d: usize, seed: u64) -> Result<Vec<TextEmbedding>> {
    if d < 2 {
        return Err(Error::validation(format!(
            "text embedding dim {d} must be at least 2"
        )));
    }
    texts
        .iter()
        .map(|text| {
            let tokens = tokenize(text);
            if tokens.is_empty() {
                return Err(Error::validation(format!(
                    "text '{text}' has no tokens to embed"
                )));
            }
            let mut acc = vec![0.0f64; d];
            for token in &tokens {
                let mut stream = SplitMix64::new(mix2(seed, fnv1a(token.as_bytes())));
                for v in acc.iter_mut() {
                    *v += irwin_hall_gaussian(&mut stream);
                }
            }
            let norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(norm.is_finite() && norm > 1e-12) {
                return Err(Error::validation(format!(
                    "text '{text}' embeds to a degenerate (near-zero) vector"
                )));
            }
            for v in acc.iter_mut() {
                *v /= norm;
            }
            Ok(TextEmbedding { vector: acc })
        })
        .collect()
}

/// The hashed stub as a [`TextEncoder`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HashedTextEncoder {
    pub dim: usize,
    pub seed: u64,
}

impl HashedTextEncoder {
    pub fn new(dim: usize, seed: u64) -> Result<Self> {
        if dim < 2 {
            return Err(Error::validation("text encoder dim must be at least 2"));
        }
        Ok(HashedTextEncoder { dim, seed })
    }
}

impl TextEncoder for HashedTextEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, texts: &[&str]) -> Result<Vec<TextEmbedding>> {
        stub_encode_text(texts, self.dim, self.seed)
    }

    fn state_digest(&self) -> u64 {
        mix2(self.dim as u64, self.seed)
    }
}

/// Adapter over a file of precomputed embeddings keyed by exact string —
/// lets an external expert encoder run offline and feed this pipeline.
/// File format: one JSON record per line, `{"text": ..., "embedding": [...]}`.
#[derive(Debug, Clone, PartialEq)]
pub struct PrecomputedTextEncoder {
    dim: usize,
    table: BTreeMap<String, Vec<f64>>,
}

#[derive(Deserialize)]
struct PrecomputedRecord {
    text: String,
    embedding: Vec<f64>,
}

impl PrecomputedTextEncoder {
    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut table = BTreeMap::new();
        let mut dim = None;
        for (lineno, line) in raw.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let record: PrecomputedRecord = serde_json::from_str(line)
                .map_err(|e| Error::parse(path, format!("line {}: {e}", lineno + 1)))?;
            let d = record.embedding.len();
            if *dim.get_or_insert(d) != d {
                return Err(Error::parse(
                    path,
                    format!("line {}: embedding dim {d} differs from earlier lines", lineno + 1),
                ));
            }
            let norm = record.embedding.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(norm.is_finite() && norm > 1e-12) {
                return Err(Error::parse(
                    path,
                    format!("line {}: degenerate embedding", lineno + 1),
                ));
            }
            let unit: Vec<f64> = record.embedding.iter().map(|v| v / norm).collect();
            if table.insert(record.text.clone(), unit).is_some() {
                return Err(Error::parse(
                    path,
                    format!("line {}: text '{}' repeated", lineno + 1, record.text),
                ));
            }
        }
        let dim = dim.ok_or_else(|| Error::parse(path, "no records"))?;
        if dim < 2 {
            return Err(Error::parse(path, "embedding dim must be at least 2"));
        }
        Ok(PrecomputedTextEncoder { dim, table })
    }
}

impl TextEncoder for PrecomputedTextEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, texts: &[&str]) -> Result<Vec<TextEmbedding>> {
        texts
            .iter()
            .map(|text| {
                self.table
                    .get(*text)
                    .map(|v| TextEmbedding { vector: v.clone() })
                    .ok_or_else(|| {
                        Error::validation(format!(
                            "no precomputed embedding for text '{text}'"
                        ))
                    })
            })
            .collect()
    }

    fn state_digest(&self) -> u64 {
        let mut acc = self.dim as u64;
        for (text, vec) in &self.table {
            acc = mix3(acc, fnv1a(text.as_bytes()), vec.len() as u64);
            for &v in vec {
                acc = mix2(acc, v.to_bits());
            }
        }
        acc
    }
}
