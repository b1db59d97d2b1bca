//! Low-rank adapters and the per-language adapter pool.
//!
//! An adapter contributes `ΔW x = (α / r) · B (A x)` on top of a frozen base
//! weight. The pool holds at most one adapter per language and is immutable:
//! [`AdapterPool::register`] returns a new pool that shares every existing
//! adapter with the old one.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::Rng;
use thiserror::Error;

use crate::codec::{self, ByteReader, CodecError};
use crate::linalg::{self, LinalgError, Matrix, Vector};

pub const ADAPTER_MAGIC: &[u8; 4] = b"LORA";
pub const ADAPTER_FORMAT_VERSION: u32 = 1;
pub const ADAPTER_FILE_EXTENSION: &str = "lora";

#[derive(Debug, Error)]
pub enum AdapterError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("invalid adapter: {0}")]
    Invalid(String),
    #[error("an adapter for language `{0}` is already registered")]
    DuplicateLanguage(String),
    #[error("an adapter with id `{0}` is already registered")]
    DuplicateId(String),
    #[error("no adapter registered for language `{0}`")]
    AdapterMissing(String),
    #[error("no adapter with id `{0}`")]
    UnknownId(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed adapter file: {source}")]
    Format {
        path: PathBuf,
        #[source]
        source: CodecError,
    },
}

impl From<LinalgError> for AdapterError {
    fn from(e: LinalgError) -> Self {
        match e {
            LinalgError::DimensionMismatch { expected, found } => {
                AdapterError::DimensionMismatch { expected, found }
            }
            other => AdapterError::Invalid(other.to_string()),
        }
    }
}

/// One language's low-rank update: `A ∈ ℝ^{r×d}`, `B ∈ ℝ^{d×r}` and scale α.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    id: String,
    language: String,
    scale: f32,
    a: Matrix,
    b: Matrix,
}

/// Language codes are lowercase, non-empty and free of whitespace.
pub fn validate_language(code: &str) -> Result<(), String> {
    if code.is_empty() {
        return Err("language code is empty".into());
    }
    if code.chars().any(|c| c.is_whitespace() || c.is_uppercase()) {
        return Err(format!("language code `{code}` must be lowercase without whitespace"));
    }
    Ok(())
}

impl LoraAdapter {
    pub fn new(
        id: impl Into<String>,
        language: impl Into<String>,
        scale: f32,
        a: Matrix,
        b: Matrix,
    ) -> Result<Self, AdapterError> {
        let id = id.into();
        let language = language.into();
        if id.is_empty() {
            return Err(AdapterError::Invalid("adapter id is empty".into()));
        }
        validate_language(&language).map_err(AdapterError::Invalid)?;
        if !(scale.is_finite() && scale > 0.0) {
            return Err(AdapterError::Invalid(format!("scale must be positive, got {scale}")));
        }
        let (rank, dim) = (a.rows(), a.cols());
        if rank == 0 || dim == 0 {
            return Err(AdapterError::Invalid(format!(
                "rank and dim must be at least 1, got r={rank} d={dim}"
            )));
        }
        if b.rows() != dim || b.cols() != rank {
            return Err(AdapterError::Invalid(format!(
                "B must be {dim}x{rank}, got {}x{}",
                b.rows(),
                b.cols()
            )));
        }
        Ok(Self {
            id,
            language,
            scale,
            a,
            b,
        })
    }

    /// Random adapter with α = r, entries uniform in `[-bound, bound]`.
    pub fn random<R: Rng + ?Sized>(
        id: impl Into<String>,
        language: impl Into<String>,
        rank: usize,
        dim: usize,
        bound: f32,
        rng: &mut R,
    ) -> Result<Self, AdapterError> {
        let a = Matrix::random(rank, dim, bound, rng);
        let b = Matrix::random(dim, rank, bound, rng);
        Self::new(id, language, rank as f32, a, b)
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn language(&self) -> &str {
        &self.language
    }

    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    pub fn dim(&self) -> usize {
        self.a.cols()
    }

    /// α as stored.
    pub fn scale(&self) -> f32 {
        self.scale
    }

    /// The effective multiplier α / r.
    pub fn scaling(&self) -> f64 {
        f64::from(self.scale) / self.rank() as f64
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn b(&self) -> &Matrix {
        &self.b
    }

    /// `(α / r) · B (A x)`.
    pub fn delta_forward(&self, x: &Vector) -> Result<Vector, AdapterError> {
        if x.dim() != self.dim() {
            return Err(AdapterError::DimensionMismatch {
                expected: self.dim(),
                found: x.dim(),
            });
        }
        let mut out = vec![0.0; self.dim()];
        self.delta_into(x.as_slice(), &mut out);
        Ok(Vector::new(out)?)
    }

    pub(crate) fn delta_into(&self, x: &[f32], out: &mut [f32]) {
        let hidden = self.project_down(x);
        let scaling = self.scaling();
        for (m, slot) in out.iter_mut().enumerate() {
            *slot = (scaling * linalg::dot(self.b.row(m), &hidden)) as f32;
        }
    }

    fn project_down(&self, x: &[f32]) -> Vec<f32> {
        (0..self.rank())
            .map(|q| linalg::dot(self.a.row(q), x) as f32)
            .collect()
    }

    /// The full `d×d` update `(α / r) · B A`.
    pub fn delta_weight(&self) -> Matrix {
        let ba = linalg::matmul(&self.b, &self.a).expect("B and A shapes agree by construction");
        let scaling = self.scaling();
        let data = ba
            .into_vec()
            .into_iter()
            .map(|v| (f64::from(v) * scaling) as f32)
            .collect();
        Matrix::new(self.dim(), self.dim(), data).expect("finite by construction")
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(32 + 8 * self.rank() * self.dim());
        buf.extend_from_slice(ADAPTER_MAGIC);
        codec::put_u32(&mut buf, ADAPTER_FORMAT_VERSION);
        codec::put_str(&mut buf, &self.id);
        codec::put_str(&mut buf, &self.language);
        codec::put_u32(&mut buf, self.rank() as u32);
        codec::put_u32(&mut buf, self.dim() as u32);
        codec::put_f32(&mut buf, self.scale);
        codec::put_f32s(&mut buf, self.a.as_slice());
        codec::put_f32s(&mut buf, self.b.as_slice());
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CodecError> {
        let mut r = ByteReader::new(bytes);
        let magic = r.bytes(4, "magic")?;
        if magic != ADAPTER_MAGIC {
            return Err(CodecError {
                offset: 0,
                reason: format!("bad magic {magic:?}"),
            });
        }
        let version = r.u32("version")?;
        if version != ADAPTER_FORMAT_VERSION {
            return Err(r.err(format!("unsupported format version {version}")));
        }
        let id = r.string("id")?;
        let language = r.string("language")?;
        let rank = r.u32("rank")? as usize;
        let dim = r.u32("dim")? as usize;
        let scale = r.f32("scale")?;
        let a = r.f32s(rank * dim, "A payload")?;
        let b = r.f32s(dim * rank, "B payload")?;
        r.expect_end()?;
        let invalid = |reason: String| CodecError {
            offset: bytes.len(),
            reason,
        };
        let a = Matrix::new(rank, dim, a).map_err(|e| invalid(format!("A: {e}")))?;
        let b = Matrix::new(dim, rank, b).map_err(|e| invalid(format!("B: {e}")))?;
        Self::new(id, language, scale, a, b).map_err(|e| invalid(e.to_string()))
    }
}

pub fn save_adapter(adapter: &LoraAdapter, path: impl AsRef<Path>) -> Result<(), AdapterError> {
    let path = path.as_ref();
    fs::write(path, adapter.to_bytes()).map_err(|source| AdapterError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_adapter(path: impl AsRef<Path>) -> Result<LoraAdapter, AdapterError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| AdapterError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    LoraAdapter::from_bytes(&bytes).map_err(|source| AdapterError::Format {
        path: path.to_path_buf(),
        source,
    })
}

/// Registry of adapters keyed by language. Cloning is cheap; adapters are
/// shared behind `Arc`.
#[derive(Debug, Clone, Default)]
pub struct AdapterPool {
    adapters: Vec<Arc<LoraAdapter>>,
    by_language: BTreeMap<String, usize>,
    by_id: BTreeMap<String, usize>,
}

impl AdapterPool {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&self, adapter: LoraAdapter) -> Result<AdapterPool, AdapterError> {
        self.register_shared(Arc::new(adapter))
    }

    pub fn register_shared(&self, adapter: Arc<LoraAdapter>) -> Result<AdapterPool, AdapterError> {
        if let Some(dim) = self.dim() {
            if adapter.dim() != dim {
                return Err(AdapterError::DimensionMismatch {
                    expected: dim,
                    found: adapter.dim(),
                });
            }
        }
        if self.by_language.contains_key(adapter.language()) {
            return Err(AdapterError::DuplicateLanguage(adapter.language().to_string()));
        }
        if self.by_id.contains_key(adapter.id()) {
            return Err(AdapterError::DuplicateId(adapter.id().to_string()));
        }
        let mut next = self.clone();
        let pos = next.adapters.len();
        next.by_language.insert(adapter.language().to_string(), pos);
        next.by_id.insert(adapter.id().to_string(), pos);
        next.adapters.push(adapter);
        Ok(next)
    }

    pub fn lookup(&self, language: &str) -> Result<&Arc<LoraAdapter>, AdapterError> {
        self.by_language
            .get(language)
            .map(|&pos| &self.adapters[pos])
            .ok_or_else(|| AdapterError::AdapterMissing(language.to_string()))
    }

    pub fn get_by_id(&self, id: &str) -> Result<&Arc<LoraAdapter>, AdapterError> {
        self.by_id
            .get(id)
            .map(|&pos| &self.adapters[pos])
            .ok_or_else(|| AdapterError::UnknownId(id.to_string()))
    }

    pub fn contains_language(&self, language: &str) -> bool {
        self.by_language.contains_key(language)
    }

    pub fn len(&self) -> usize {
        self.adapters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adapters.is_empty()
    }

    /// Shared feature dimension, `None` for an empty pool.
    pub fn dim(&self) -> Option<usize> {
        self.adapters.first().map(|a| a.dim())
    }

    /// Adapters in registration order.
    pub fn iter(&self) -> impl Iterator<Item = &Arc<LoraAdapter>> {
        self.adapters.iter()
    }

    pub fn languages(&self) -> impl Iterator<Item = &str> {
        self.by_language.keys().map(String::as_str)
    }

    /// Loads every `*.lora` file in `dir`, in file-name order. Identity comes
    /// from each file's header, not its name.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<AdapterPool, AdapterError> {
        let dir = dir.as_ref();
        let io_err = |source| AdapterError::Io {
            path: dir.to_path_buf(),
            source,
        };
        let mut paths: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(io_err)?
            .map(|entry| entry.map(|e| e.path()))
            .collect::<Result<_, _>>()
            .map_err(io_err)?;
        paths.retain(|p| {
            p.is_file() && p.extension().and_then(|e| e.to_str()) == Some(ADAPTER_FILE_EXTENSION)
        });
        paths.sort();
        let mut pool = AdapterPool::new();
        for path in paths {
            pool = pool.register(load_adapter(&path)?)?;
        }
        Ok(pool)
    }
}
