//! Text encoders producing unit-norm embeddings.
//!
//! The reference encoder hashes UTF-8 byte trigrams into `dim` buckets with a
//! seeded FNV-1a and L2-normalizes the counts. Byte-level features keep script
//! information, so texts in different writing systems land far apart.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::Vector;

pub const MIN_DIM: usize = 8;
pub const DEFAULT_DIM: usize = 256;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EncodeError {
    #[error("text is empty")]
    EmptyText,
    #[error("no external encoder backend configured")]
    ExternalUnavailable,
    #[error("external encoder returned {found} values, expected {expected}")]
    BadDimension { expected: usize, found: usize },
    #[error("external encoder returned an invalid vector: {0}")]
    InvalidOutput(String),
    #[error("encoder dim must be at least {MIN_DIM}, got {0}")]
    DimTooSmall(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderKind {
    ReferenceTrigram,
    External,
}

impl fmt::Display for EncoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EncoderKind::ReferenceTrigram => "reference-trigram",
            EncoderKind::External => "external",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderSpec {
    pub dim: usize,
    pub kind: EncoderKind,
    pub seed: u64,
}

impl EncoderSpec {
    pub fn reference(dim: usize, seed: u64) -> Self {
        Self {
            dim,
            kind: EncoderKind::ReferenceTrigram,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), EncodeError> {
        if self.dim < MIN_DIM {
            return Err(EncodeError::DimTooSmall(self.dim));
        }
        Ok(())
    }
}

impl Default for EncoderSpec {
    fn default() -> Self {
        Self::reference(DEFAULT_DIM, 0)
    }
}

pub trait Encoder: Send + Sync {
    fn spec(&self) -> EncoderSpec;

    fn encode(&self, text: &str) -> Result<Vector, EncodeError>;

    fn dim(&self) -> usize {
        self.spec().dim
    }
}

/// FNV-1a over `bytes` with `seed` folded into the offset basis.
pub fn fnv1a64(bytes: &[u8], seed: u64) -> u64 {
    let mut hash = FNV_OFFSET ^ seed;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(FNV_PRIME);
    }
    hash
}

/// Encodes with `spec`. External specs have no backend here and fail with
/// `ExternalUnavailable`; wrap a callable in [`ExternalEncoder`] instead.
pub fn encode(spec: &EncoderSpec, text: &str) -> Result<Vector, EncodeError> {
    spec.validate()?;
    match spec.kind {
        EncoderKind::ReferenceTrigram => trigram_embedding(spec.dim, spec.seed, text),
        EncoderKind::External => {
            if text.trim().is_empty() {
                return Err(EncodeError::EmptyText);
            }
            Err(EncodeError::ExternalUnavailable)
        }
    }
}

fn trigram_embedding(dim: usize, seed: u64, text: &str) -> Result<Vector, EncodeError> {
    if text.trim().is_empty() {
        return Err(EncodeError::EmptyText);
    }
    let bytes = text.as_bytes();
    let mut counts = vec![0.0f64; dim];
    if bytes.len() < 3 {
        counts[(fnv1a64(bytes, seed) % dim as u64) as usize] += 1.0;
    } else {
        for gram in bytes.windows(3) {
            counts[(fnv1a64(gram, seed) % dim as u64) as usize] += 1.0;
        }
    }
    let norm = counts.iter().map(|c| c * c).sum::<f64>().sqrt();
    let data = counts.into_iter().map(|c| (c / norm) as f32).collect();
    Ok(Vector::new(data).expect("finite by construction"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrigramEncoder {
    dim: usize,
    seed: u64,
}

impl TrigramEncoder {
    pub fn new(dim: usize, seed: u64) -> Result<Self, EncodeError> {
        EncoderSpec::reference(dim, seed).validate()?;
        Ok(Self { dim, seed })
    }
}

impl Encoder for TrigramEncoder {
    fn spec(&self) -> EncoderSpec {
        EncoderSpec::reference(self.dim, self.seed)
    }

    fn encode(&self, text: &str) -> Result<Vector, EncodeError> {
        trigram_embedding(self.dim, self.seed, text)
    }
}

pub type EmbedFn = dyn Fn(&str) -> Vec<f32> + Send + Sync;

/// Adapts an arbitrary embedding callable; outputs are checked for dimension
/// and finiteness, then L2-normalized.
#[derive(Clone)]
pub struct ExternalEncoder {
    dim: usize,
    backend: Option<Arc<EmbedFn>>,
}

impl ExternalEncoder {
    pub fn new(dim: usize, backend: Arc<EmbedFn>) -> Self {
        Self {
            dim,
            backend: Some(backend),
        }
    }

    pub fn unconfigured(dim: usize) -> Self {
        Self { dim, backend: None }
    }
}

impl fmt::Debug for ExternalEncoder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ExternalEncoder")
            .field("dim", &self.dim)
            .field("configured", &self.backend.is_some())
            .finish()
    }
}

impl Encoder for ExternalEncoder {
    fn spec(&self) -> EncoderSpec {
        EncoderSpec {
            dim: self.dim,
            kind: EncoderKind::External,
            seed: 0,
        }
    }

    fn encode(&self, text: &str) -> Result<Vector, EncodeError> {
        if text.trim().is_empty() {
            return Err(EncodeError::EmptyText);
        }
        let backend = self.backend.as_ref().ok_or(EncodeError::ExternalUnavailable)?;
        let raw = backend(text);
        if raw.len() != self.dim {
            return Err(EncodeError::BadDimension {
                expected: self.dim,
                found: raw.len(),
            });
        }
        Vector::new(raw)
            .and_then(|v| v.normalized())
            .map_err(|e| EncodeError::InvalidOutput(e.to_string()))
    }
}
