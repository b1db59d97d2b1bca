//! Generation backends: turn a prompt bundle into output text.
//!
//! `OracleEcho` answers with the bundle's gold target, `TableLookup` with a
//! fixed per-sample answer, and `External` talks newline-delimited JSON to
//! another process over stdio or TCP:
//!
//! ```text
//! -> {"id": "...", "prompt": "..."}
//! <- {"id": "...", "text": "..."}
//! ```
//!
//! A nonzero corruption rate mangles outputs deterministically (per seed and
//! sample id) for parser-robustness tests.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::path::Path;
use std::process::{Child, Command, Stdio};
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::fnv1a64;
use crate::prompt::PromptBundle;

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("no table entry for sample `{0}`")]
    MissingTableEntry(String),
    #[error("external backend unavailable: {0}")]
    ExternalUnavailable(String),
    #[error("bundle for sample `{0}` carries no gold target")]
    MissingGold(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("corruption rate must be within [0, 1], got {0}")]
    InvalidRate(f64),
}

#[derive(Serialize)]
struct Request<'a> {
    id: &'a str,
    prompt: &'a str,
}

#[derive(Deserialize)]
struct Response {
    id: String,
    text: String,
}

/// A line-oriented JSON channel to an external generator. Requests are
/// serialized through a mutex.
pub struct ExternalBackend {
    channel: Mutex<Channel>,
    description: String,
}

struct Channel {
    reader: Box<dyn BufRead + Send>,
    writer: Box<dyn Write + Send>,
    child: Option<Child>,
}

impl Drop for Channel {
    fn drop(&mut self) {
        if let Some(child) = self.child.as_mut() {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

impl ExternalBackend {
    /// Spawns `program` and speaks the protocol over its stdin/stdout.
    pub fn spawn(program: &str, args: &[String]) -> Result<Self, BackendError> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| BackendError::ExternalUnavailable(format!("{program}: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        Ok(Self {
            channel: Mutex::new(Channel {
                reader: Box::new(BufReader::new(stdout)),
                writer: Box::new(stdin),
                child: Some(child),
            }),
            description: format!("exec:{program}"),
        })
    }

    pub fn connect(addr: &str) -> Result<Self, BackendError> {
        let stream = TcpStream::connect(addr)
            .map_err(|e| BackendError::ExternalUnavailable(format!("{addr}: {e}")))?;
        let reader = stream
            .try_clone()
            .map_err(|e| BackendError::ExternalUnavailable(format!("{addr}: {e}")))?;
        Ok(Self {
            channel: Mutex::new(Channel {
                reader: Box::new(BufReader::new(reader)),
                writer: Box::new(stream),
                child: None,
            }),
            description: format!("tcp:{addr}"),
        })
    }

    pub fn request(&self, id: &str, prompt: &str) -> Result<String, BackendError> {
        let mut ch = self
            .channel
            .lock()
            .map_err(|_| BackendError::ExternalUnavailable("channel poisoned".into()))?;
        let mut line = serde_json::to_string(&Request { id, prompt }).expect("request serializes");
        line.push('\n');
        ch.writer
            .write_all(line.as_bytes())
            .and_then(|_| ch.writer.flush())
            .map_err(|e| BackendError::ExternalUnavailable(e.to_string()))?;
        let mut reply = String::new();
        let n = ch
            .reader
            .read_line(&mut reply)
            .map_err(|e| BackendError::ExternalUnavailable(e.to_string()))?;
        if n == 0 {
            return Err(BackendError::ExternalUnavailable("backend closed the stream".into()));
        }
        let response: Response = serde_json::from_str(reply.trim_end())
            .map_err(|e| BackendError::Protocol(format!("bad response line: {e}")))?;
        if response.id != id {
            return Err(BackendError::Protocol(format!(
                "response for `{}` while waiting for `{id}`",
                response.id
            )));
        }
        Ok(response.text)
    }
}

impl fmt::Debug for ExternalBackend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ExternalBackend")
            .field("endpoint", &self.description)
            .finish()
    }
}

#[derive(Debug)]
pub enum BackendKind {
    OracleEcho,
    TableLookup(HashMap<String, String>),
    External(ExternalBackend),
}

#[derive(Debug)]
pub struct GenerationBackend {
    kind: BackendKind,
    corruption_rate: f64,
    seed: u64,
}

impl GenerationBackend {
    pub fn new(kind: BackendKind) -> Self {
        Self {
            kind,
            corruption_rate: 0.0,
            seed: 0,
        }
    }

    pub fn oracle_echo() -> Self {
        Self::new(BackendKind::OracleEcho)
    }

    pub fn table(table: HashMap<String, String>) -> Self {
        Self::new(BackendKind::TableLookup(table))
    }

    /// Reads a `{"id": ..., "text": ...}` JSON Lines file into a lookup table.
    pub fn table_from_jsonl(path: impl AsRef<Path>) -> Result<Self, BackendError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| BackendError::ExternalUnavailable(format!("{}: {e}", path.display())))?;
        let mut table = HashMap::new();
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let entry: Response = serde_json::from_str(line).map_err(|e| {
                BackendError::Protocol(format!("{}:{}: {e}", path.display(), n + 1))
            })?;
            table.insert(entry.id, entry.text);
        }
        Ok(Self::table(table))
    }

    pub fn with_corruption(mut self, rate: f64, seed: u64) -> Result<Self, BackendError> {
        if !(0.0..=1.0).contains(&rate) {
            return Err(BackendError::InvalidRate(rate));
        }
        self.corruption_rate = rate;
        self.seed = seed;
        Ok(self)
    }

    pub fn kind(&self) -> &BackendKind {
        &self.kind
    }

    /// True when `generate` may be called concurrently without ordering effects.
    pub fn is_pure(&self) -> bool {
        !matches!(self.kind, BackendKind::External(_))
    }

    pub fn generate(&self, bundle: &PromptBundle) -> Result<String, BackendError> {
        let id = bundle.source_sample_id.as_str();
        let raw = match &self.kind {
            BackendKind::OracleEcho => bundle
                .expected_target
                .clone()
                .ok_or_else(|| BackendError::MissingGold(id.to_string()))?,
            BackendKind::TableLookup(table) => table
                .get(id)
                .cloned()
                .ok_or_else(|| BackendError::MissingTableEntry(id.to_string()))?,
            BackendKind::External(ext) => ext.request(id, &bundle.input_text)?,
        };
        Ok(self.maybe_corrupt(id, raw))
    }

    fn maybe_corrupt(&self, sample_id: &str, text: String) -> String {
        if self.corruption_rate == 0.0 {
            return text;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a64(sample_id.as_bytes(), 0));
        if rng.gen::<f64>() >= self.corruption_rate {
            return text;
        }
        corrupt(&text, &mut rng)
    }
}

/// Drops one top-level tuple when there are several, then removes the
/// opening parenthesis so the result can no longer parse.
fn corrupt(text: &str, rng: &mut ChaCha8Rng) -> String {
    let tuples = split_top_level(text);
    let kept = if tuples.len() > 1 {
        let drop = rng.gen_range(0..tuples.len());
        tuples
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != drop)
            .map(|(_, t)| t.trim())
            .collect::<Vec<_>>()
            .join(", ")
    } else {
        text.trim().to_string()
    };
    match kept.find('(') {
        Some(pos) => {
            let mut out = kept;
            out.remove(pos);
            out
        }
        None => format!("{kept}]"),
    }
}

/// Splits on commas outside parentheses, honoring backslash escapes.
fn split_top_level(text: &str) -> Vec<&str> {
    let mut parts = Vec::new();
    let (mut depth, mut start, mut escaped) = (0i32, 0usize, false);
    for (i, c) in text.char_indices() {
        if escaped {
            escaped = false;
            continue;
        }
        match c {
            '\\' => escaped = true,
            '(' => depth += 1,
            ')' => depth -= 1,
            ',' if depth == 0 => {
                parts.push(&text[start..i]);
                start = i + 1;
            }
            _ => {}
        }
    }
    parts.push(&text[start..]);
    parts
}
