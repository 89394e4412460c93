use serde::{Deserialize, Serialize};

use super::AgentSpec;
use crate::error::{Error, Result};

pub const DEFAULT_EMBED_DIM: usize = 384;

/// Unit-norm text embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    /// Normalizes `values`; an all-zero input maps to the first basis vector.
    pub fn normalized(mut values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Config("embedding dimension must be positive".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Protocol("embedding contains non-finite values".into()));
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Ok(Self::basis(values.len()));
        }
        values.iter_mut().for_each(|v| *v /= norm);
        Ok(Self(values))
    }

    pub fn basis(dim: usize) -> Self {
        let mut v = vec![0.0; dim];
        v[0] = 1.0;
        Self(v)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

pub trait Embedder: Send + Sync {
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Result<EmbeddingVector>;
}

/// Signed feature hashing of character 3-grams.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    dim: usize,
}

impl HashEmbedder {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("embedding dimension must be positive".into()));
        }
        Ok(Self { dim })
    }
}

impl Default for HashEmbedder {
    fn default() -> Self {
        Self {
            dim: DEFAULT_EMBED_DIM,
        }
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(bytes: &[u8], salt: u64) -> u64 {
    let mut h = FNV_OFFSET ^ salt;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

impl Embedder for HashEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector> {
        if text.is_empty() {
            return Ok(EmbeddingVector::basis(self.dim));
        }
        let chars: Vec<char> = text.chars().collect();
        let mut acc = vec![0.0; self.dim];
        let mut buf = [0u8; 12];
        let mut add = |gram: &[char]| {
            let mut len = 0;
            for c in gram {
                len += c.encode_utf8(&mut buf[len..]).len();
            }
            let bytes = &buf[..len];
            let bucket = (fnv1a(bytes, 0) % self.dim as u64) as usize;
            let sign = if fnv1a(bytes, 0x5bd1_e995) & 1 == 0 { 1.0 } else { -1.0 };
            acc[bucket] += sign;
        };
        if chars.len() < 3 {
            add(&chars);
        } else {
            chars.windows(3).for_each(&mut add);
        }
        EmbeddingVector::normalized(acc)
    }
}

/// Embeds `base ∥ "\n" ∥ role ∥ "\n" ∥ plugins joined by "\n"`.
pub fn encode_agent(agent: &AgentSpec, provider: &dyn Embedder) -> Result<EmbeddingVector> {
    let text = format!(
        "{}\n{}\n{}",
        agent.base,
        agent.role,
        agent.plugins.join("\n")
    );
    provider.embed(&text)
}
