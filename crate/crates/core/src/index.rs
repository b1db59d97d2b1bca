//! The cross-granularity example store.
//!
//! Every training sample contributes one context record (the embedding of its
//! full text) and one entity record per annotated mention. Retrieval is an
//! exact scan: score every eligible record by cosine, keep those strictly
//! above the threshold, order by `(similarity desc, sample_id asc)` and
//! truncate to `k`.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapter::validate_language;
use crate::codec::{self, ByteReader, CodecError};
use crate::encoder::{EncodeError, Encoder, EncoderKind, EncoderSpec};
use crate::linalg::{cosine_slices, LinalgError, Vector};

pub const INDEX_FORMAT_VERSION: u32 = 1;
const UNIT_NORM_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("duplicate sample id `{0}`")]
    DuplicateSampleId(String),
    #[error("sample `{sample_id}`: {reason}")]
    InvalidSample { sample_id: String, reason: String },
    #[error("failed to encode sample `{sample_id}`: {source}")]
    EncodeFailure {
        sample_id: String,
        #[source]
        source: EncodeError,
    },
    #[error("unknown entity type `{0}`")]
    UnknownEntityType(String),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("invalid query: {0}")]
    InvalidQuery(String),
    #[error("invalid retrieval config: {0}")]
    InvalidConfig(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {reason}")]
    Corpus {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("malformed index: {0}")]
    Format(String),
}

impl From<CodecError> for IndexError {
    fn from(e: CodecError) -> Self {
        IndexError::Format(e.to_string())
    }
}

fn query_error(e: LinalgError) -> IndexError {
    match e {
        LinalgError::DimensionMismatch { expected, found } => {
            IndexError::DimensionMismatch { expected, found }
        }
        other => IndexError::InvalidQuery(other.to_string()),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityMention {
    pub text: String,
    #[serde(rename = "type")]
    pub entity_type: String,
}

impl EntityMention {
    pub fn new(text: impl Into<String>, entity_type: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            entity_type: entity_type.into(),
        }
    }
}

/// One corpus line: `{"id", "lang", "text", "entities": [{"text", "type"}]}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusSample {
    #[serde(rename = "id")]
    pub sample_id: String,
    #[serde(rename = "lang")]
    pub language: String,
    pub text: String,
    #[serde(default)]
    pub entities: Vec<EntityMention>,
}

impl CorpusSample {
    fn validate(&self) -> Result<(), IndexError> {
        let invalid = |reason: String| IndexError::InvalidSample {
            sample_id: self.sample_id.clone(),
            reason,
        };
        if self.sample_id.is_empty() {
            return Err(invalid("sample id is empty".into()));
        }
        validate_language(&self.language).map_err(invalid)?;
        for mention in &self.entities {
            if mention.entity_type.trim().is_empty() {
                return Err(invalid("entity type is empty".into()));
            }
            if mention.text.trim().is_empty() {
                return Err(invalid("entity text is empty".into()));
            }
            if !self.text.contains(&mention.text) {
                return Err(invalid(format!(
                    "entity `{}` does not occur in the sample text",
                    mention.text
                )));
            }
        }
        Ok(())
    }
}

pub fn read_corpus(path: impl AsRef<Path>) -> Result<Vec<CorpusSample>, IndexError> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|source| IndexError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_corpus(BufReader::new(file), path)
}

pub fn parse_corpus<R: BufRead>(reader: R, origin: &Path) -> Result<Vec<CorpusSample>, IndexError> {
    let mut samples = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line.map_err(|source| IndexError::Io {
            path: origin.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let sample = serde_json::from_str(&line).map_err(|e| IndexError::Corpus {
            path: origin.to_path_buf(),
            line: n + 1,
            reason: e.to_string(),
        })?;
        samples.push(sample);
    }
    Ok(samples)
}

pub fn write_corpus(path: impl AsRef<Path>, corpus: &[CorpusSample]) -> Result<(), IndexError> {
    let path = path.as_ref();
    let io = |source| IndexError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut out = std::io::BufWriter::new(fs::File::create(path).map_err(io)?);
    for sample in corpus {
        let line = serde_json::to_string(sample).expect("corpus samples serialize");
        writeln!(out, "{line}").map_err(io)?;
    }
    out.flush().map_err(io)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EntityRecord {
    pub sample_id: String,
    pub language: String,
    pub entity_type: String,
    pub entity_text: String,
    pub embedding: Vector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContextRecord {
    pub sample_id: String,
    pub language: String,
    pub text: String,
    pub entities: Vec<EntityMention>,
    pub embedding: Vector,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetrievalConfig {
    pub tau_e: f32,
    pub tau_c: f32,
    pub k: usize,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            tau_e: 0.65,
            tau_c: 0.7,
            k: 5,
        }
    }
}

impl RetrievalConfig {
    pub fn validate(&self) -> Result<(), IndexError> {
        for (name, tau) in [("tau_e", self.tau_e), ("tau_c", self.tau_c)] {
            if !(0.0..=1.0).contains(&tau) {
                return Err(IndexError::InvalidConfig(format!("{name}={tau} is outside [0, 1]")));
            }
        }
        if self.k == 0 {
            return Err(IndexError::InvalidConfig("k must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    Context,
    Entity,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RetrievalHit {
    pub granularity: Granularity,
    /// Position in the index's context or entity records.
    pub record: usize,
    pub sample_id: String,
    pub language: String,
    pub similarity: f32,
    /// Set when the hit did not clear the threshold and was taken as the
    /// nearest record instead.
    pub fallback: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexCounts {
    pub contexts: usize,
    pub entities: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExampleIndex {
    spec: EncoderSpec,
    entity_types: Vec<String>,
    contexts: Vec<ContextRecord>,
    entities: Vec<EntityRecord>,
}

fn hit_order(a: &RetrievalHit, b: &RetrievalHit) -> Ordering {
    b.similarity
        .total_cmp(&a.similarity)
        .then_with(|| a.sample_id.cmp(&b.sample_id))
        .then_with(|| a.record.cmp(&b.record))
}

fn check_embedding(embedding: &Vector, dim: usize, what: &str) -> Result<(), IndexError> {
    if embedding.dim() != dim {
        return Err(IndexError::DimensionMismatch {
            expected: dim,
            found: embedding.dim(),
        });
    }
    if (embedding.norm() - 1.0).abs() > UNIT_NORM_TOLERANCE {
        return Err(IndexError::Format(format!(
            "{what} embedding is not unit norm ({})",
            embedding.norm()
        )));
    }
    Ok(())
}

impl ExampleIndex {
    /// Builds with the entity type set taken from the corpus in first-appearance order.
    pub fn build(corpus: &[CorpusSample], encoder: &dyn Encoder) -> Result<Self, IndexError> {
        let mut types: Vec<String> = Vec::new();
        for mention in corpus.iter().flat_map(|s| &s.entities) {
            if !types.contains(&mention.entity_type) {
                types.push(mention.entity_type.clone());
            }
        }
        Self::build_with_types(corpus, types, encoder)
    }

    /// Builds against a declared entity type set; mentions of other types are rejected.
    pub fn build_with_types(
        corpus: &[CorpusSample],
        entity_types: Vec<String>,
        encoder: &dyn Encoder,
    ) -> Result<Self, IndexError> {
        if corpus.is_empty() {
            return Err(IndexError::EmptyCorpus);
        }
        let mut seen = HashSet::new();
        for sample in corpus {
            if !seen.insert(sample.sample_id.as_str()) {
                return Err(IndexError::DuplicateSampleId(sample.sample_id.clone()));
            }
            sample.validate()?;
            if let Some(m) = sample
                .entities
                .iter()
                .find(|m| !entity_types.contains(&m.entity_type))
            {
                return Err(IndexError::InvalidSample {
                    sample_id: sample.sample_id.clone(),
                    reason: format!("entity type `{}` is not declared", m.entity_type),
                });
            }
        }

        let encode = |sample: &CorpusSample, text: &str| {
            encoder.encode(text).map_err(|source| IndexError::EncodeFailure {
                sample_id: sample.sample_id.clone(),
                source,
            })
        };
        let mut contexts = Vec::with_capacity(corpus.len());
        let mut entities = Vec::new();
        for sample in corpus {
            contexts.push(ContextRecord {
                sample_id: sample.sample_id.clone(),
                language: sample.language.clone(),
                text: sample.text.clone(),
                entities: sample.entities.clone(),
                embedding: encode(sample, &sample.text)?,
            });
            for mention in &sample.entities {
                entities.push(EntityRecord {
                    sample_id: sample.sample_id.clone(),
                    language: sample.language.clone(),
                    entity_type: mention.entity_type.clone(),
                    entity_text: mention.text.clone(),
                    embedding: encode(sample, &mention.text)?,
                });
            }
        }
        Ok(Self {
            spec: encoder.spec(),
            entity_types,
            contexts,
            entities,
        })
    }

    /// Assembles an index from precomputed records.
    pub fn from_records(
        spec: EncoderSpec,
        entity_types: Vec<String>,
        contexts: Vec<ContextRecord>,
        entities: Vec<EntityRecord>,
    ) -> Result<Self, IndexError> {
        let mut seen = HashSet::new();
        for c in &contexts {
            if !seen.insert(c.sample_id.as_str()) {
                return Err(IndexError::DuplicateSampleId(c.sample_id.clone()));
            }
            check_embedding(&c.embedding, spec.dim, "context")?;
        }
        for e in &entities {
            if !entity_types.contains(&e.entity_type) {
                return Err(IndexError::UnknownEntityType(e.entity_type.clone()));
            }
            check_embedding(&e.embedding, spec.dim, "entity")?;
        }
        Ok(Self {
            spec,
            entity_types,
            contexts,
            entities,
        })
    }

    pub fn spec(&self) -> EncoderSpec {
        self.spec
    }

    pub fn dim(&self) -> usize {
        self.spec.dim
    }

    pub fn entity_types(&self) -> &[String] {
        &self.entity_types
    }

    pub fn contexts(&self) -> &[ContextRecord] {
        &self.contexts
    }

    pub fn entities(&self) -> &[EntityRecord] {
        &self.entities
    }

    pub fn counts(&self) -> IndexCounts {
        IndexCounts {
            contexts: self.contexts.len(),
            entities: self.entities.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.contexts.is_empty()
    }

    fn check_query(&self, query: &Vector) -> Result<(), IndexError> {
        if query.dim() != self.dim() {
            return Err(IndexError::DimensionMismatch {
                expected: self.dim(),
                found: query.dim(),
            });
        }
        if query.norm() == 0.0 {
            return Err(IndexError::InvalidQuery("query has zero norm".into()));
        }
        Ok(())
    }

    fn score(query: &Vector, embedding: &Vector) -> Result<f32, IndexError> {
        cosine_slices(query.as_slice(), embedding.as_slice()).map_err(query_error)
    }

    fn select(mut hits: Vec<RetrievalHit>, k: usize) -> Vec<RetrievalHit> {
        hits.sort_by(hit_order);
        hits.truncate(k);
        hits
    }

    /// Top-k context records strictly above `tau_c`, never from `exclude_sample`.
    pub fn retrieve_context(
        &self,
        query: &Vector,
        cfg: &RetrievalConfig,
        exclude_sample: Option<&str>,
    ) -> Result<Vec<RetrievalHit>, IndexError> {
        cfg.validate()?;
        self.check_query(query)?;
        let mut hits = Vec::new();
        for (i, rec) in self.contexts.iter().enumerate() {
            if exclude_sample == Some(rec.sample_id.as_str()) {
                continue;
            }
            let similarity = Self::score(query, &rec.embedding)?;
            if similarity > cfg.tau_c {
                hits.push(RetrievalHit {
                    granularity: Granularity::Context,
                    record: i,
                    sample_id: rec.sample_id.clone(),
                    language: rec.language.clone(),
                    similarity,
                    fallback: false,
                });
            }
        }
        Ok(Self::select(hits, cfg.k))
    }

    /// Top-k entity records of `entity_type` strictly above `tau_e`, dropping
    /// every record that belongs to `exclude_sample`.
    pub fn retrieve_entities(
        &self,
        query: &Vector,
        entity_type: &str,
        cfg: &RetrievalConfig,
        exclude_sample: Option<&str>,
    ) -> Result<Vec<RetrievalHit>, IndexError> {
        cfg.validate()?;
        if !self.entity_types.iter().any(|t| t == entity_type) {
            return Err(IndexError::UnknownEntityType(entity_type.to_string()));
        }
        self.check_query(query)?;
        let mut hits = Vec::new();
        for (i, rec) in self.entities.iter().enumerate() {
            if rec.entity_type != entity_type || exclude_sample == Some(rec.sample_id.as_str()) {
                continue;
            }
            let similarity = Self::score(query, &rec.embedding)?;
            if similarity > cfg.tau_e {
                hits.push(RetrievalHit {
                    granularity: Granularity::Entity,
                    record: i,
                    sample_id: rec.sample_id.clone(),
                    language: rec.language.clone(),
                    similarity,
                    fallback: false,
                });
            }
        }
        Ok(Self::select(hits, cfg.k))
    }

    /// The single most similar context record regardless of threshold,
    /// flagged as a fallback hit. `None` when no record is eligible.
    pub fn nearest_context(
        &self,
        query: &Vector,
        exclude_sample: Option<&str>,
    ) -> Result<Option<RetrievalHit>, IndexError> {
        self.check_query(query)?;
        let mut best: Option<RetrievalHit> = None;
        for (i, rec) in self.contexts.iter().enumerate() {
            if exclude_sample == Some(rec.sample_id.as_str()) {
                continue;
            }
            let hit = RetrievalHit {
                granularity: Granularity::Context,
                record: i,
                sample_id: rec.sample_id.clone(),
                language: rec.language.clone(),
                similarity: Self::score(query, &rec.embedding)?,
                fallback: true,
            };
            if best.as_ref().is_none_or(|b| hit_order(&hit, b) == Ordering::Less) {
                best = Some(hit);
            }
        }
        Ok(best)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = IndexHeader {
            version: INDEX_FORMAT_VERSION,
            dim: self.dim(),
            encoder: HeaderEncoder {
                kind: self.spec.kind,
                seed: self.spec.seed,
            },
            counts: self.counts(),
            entity_types: self.entity_types.clone(),
        };
        let mut buf = serde_json::to_vec(&header).expect("header serializes");
        buf.push(b'\n');
        for c in &self.contexts {
            codec::put_str(&mut buf, &c.sample_id);
            codec::put_str(&mut buf, &c.language);
            codec::put_str(&mut buf, &c.text);
            codec::put_u32(&mut buf, c.entities.len() as u32);
            for m in &c.entities {
                codec::put_str(&mut buf, &m.text);
                codec::put_str(&mut buf, &m.entity_type);
            }
            codec::put_f32s(&mut buf, c.embedding.as_slice());
        }
        for e in &self.entities {
            codec::put_str(&mut buf, &e.sample_id);
            codec::put_str(&mut buf, &e.language);
            codec::put_str(&mut buf, &e.entity_type);
            codec::put_str(&mut buf, &e.entity_text);
            codec::put_f32s(&mut buf, e.embedding.as_slice());
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, IndexError> {
        let newline = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| IndexError::Format("missing header line".into()))?;
        let header: IndexHeader = serde_json::from_slice(&bytes[..newline])
            .map_err(|e| IndexError::Format(format!("header: {e}")))?;
        if header.version != INDEX_FORMAT_VERSION {
            return Err(IndexError::Format(format!(
                "unsupported index version {}",
                header.version
            )));
        }
        let dim = header.dim;
        let mut r = ByteReader::new(&bytes[newline + 1..]);
        let embedding = |r: &mut ByteReader| -> Result<Vector, IndexError> {
            Vector::new(r.f32s(dim, "embedding")?).map_err(|e| IndexError::Format(e.to_string()))
        };
        let mut contexts = Vec::with_capacity(header.counts.contexts);
        for _ in 0..header.counts.contexts {
            let sample_id = r.string("sample id")?;
            let language = r.string("language")?;
            let text = r.string("text")?;
            let n = r.u32("annotation count")? as usize;
            let mut entities = Vec::with_capacity(n.min(1024));
            for _ in 0..n {
                let text = r.string("entity text")?;
                let entity_type = r.string("entity type")?;
                entities.push(EntityMention { text, entity_type });
            }
            contexts.push(ContextRecord {
                sample_id,
                language,
                text,
                entities,
                embedding: embedding(&mut r)?,
            });
        }
        let mut entities = Vec::with_capacity(header.counts.entities);
        for _ in 0..header.counts.entities {
            entities.push(EntityRecord {
                sample_id: r.string("sample id")?,
                language: r.string("language")?,
                entity_type: r.string("entity type")?,
                entity_text: r.string("entity text")?,
                embedding: embedding(&mut r)?,
            });
        }
        r.expect_end()?;
        let spec = EncoderSpec {
            dim,
            kind: header.encoder.kind,
            seed: header.encoder.seed,
        };
        Self::from_records(spec, header.entity_types, contexts, entities)
            .map_err(|e| IndexError::Format(e.to_string()))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct HeaderEncoder {
    kind: EncoderKind,
    seed: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexHeader {
    version: u32,
    dim: usize,
    encoder: HeaderEncoder,
    counts: IndexCounts,
    entity_types: Vec<String>,
}

pub fn save_index(index: &ExampleIndex, path: impl AsRef<Path>) -> Result<(), IndexError> {
    let path = path.as_ref();
    fs::write(path, index.to_bytes()).map_err(|source| IndexError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_index(path: impl AsRef<Path>) -> Result<ExampleIndex, IndexError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| IndexError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    ExampleIndex::from_bytes(&bytes)
}
