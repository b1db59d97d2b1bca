//! Run configuration: flat `key=value` files with dotted section keys.
//!
//! ```text
//! # comments and blank lines are ignored
//! encoder.dim=256
//! retrieval.tau_e=0.65
//! backend=tcp:127.0.0.1:7000
//! ```

use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::backend::{BackendError, ExternalBackend, GenerationBackend};
use crate::encoder::{EncoderSpec, DEFAULT_DIM};
use crate::index::RetrievalConfig;

pub const CONFIG_ENV: &str = "RETRIEVEALL_CONFIG";

pub const KEYS: [&str; 13] = [
    "encoder.dim",
    "encoder.seed",
    "retrieval.tau_e",
    "retrieval.tau_c",
    "retrieval.k",
    "templates",
    "pool",
    "index",
    "default_language",
    "backend",
    "backend.corruption_rate",
    "batch_size",
    "seed",
];

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("invalid value `{value}` for `{key}`: {reason}")]
    InvalidValue { key: String, value: String, reason: String },
    #[error("{path}:{line}: {reason}")]
    Syntax { path: PathBuf, line: usize, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Where generations come from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BackendSpec {
    OracleEcho,
    /// JSONL file of `{"id", "text"}` lines.
    Table(PathBuf),
    /// Program and arguments speaking NDJSON on stdin/stdout.
    Stdio(Vec<String>),
    Tcp(String),
}

impl FromStr for BackendSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let s = s.trim();
        if s == "oracle-echo" {
            return Ok(Self::OracleEcho);
        }
        let (kind, rest) = s
            .split_once(':')
            .ok_or_else(|| "expected oracle-echo, table:PATH, stdio:COMMAND or tcp:HOST:PORT".to_string())?;
        if rest.trim().is_empty() {
            return Err(format!("`{kind}:` needs an argument"));
        }
        match kind {
            "table" => Ok(Self::Table(PathBuf::from(rest))),
            "stdio" => Ok(Self::Stdio(rest.split_whitespace().map(str::to_string).collect())),
            "tcp" => Ok(Self::Tcp(rest.to_string())),
            other => Err(format!("unknown backend kind `{other}`")),
        }
    }
}

impl BackendSpec {
    pub fn build(&self, corruption_rate: f64, seed: u64) -> Result<GenerationBackend, BackendError> {
        let backend = match self {
            Self::OracleEcho => GenerationBackend::oracle_echo(),
            Self::Table(path) => GenerationBackend::table_from_jsonl(path)?,
            Self::Stdio(argv) => {
                let (program, args) = argv.split_first().expect("parser rejects empty commands");
                GenerationBackend::new(crate::backend::BackendKind::External(ExternalBackend::spawn(
                    program, args,
                )?))
            }
            Self::Tcp(addr) => {
                GenerationBackend::new(crate::backend::BackendKind::External(ExternalBackend::connect(addr)?))
            }
        };
        backend.with_corruption(corruption_rate, seed)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub encoder: EncoderSpec,
    pub retrieval: RetrievalConfig,
    pub templates: Option<PathBuf>,
    pub pool: Option<PathBuf>,
    pub index: Option<PathBuf>,
    pub default_language: Option<String>,
    pub backend: BackendSpec,
    pub corruption_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderSpec::reference(DEFAULT_DIM, 0),
            retrieval: RetrievalConfig::default(),
            templates: None,
            pool: None,
            index: None,
            default_language: None,
            backend: BackendSpec::OracleEcho,
            corruption_rate: 0.0,
            batch_size: 16,
            seed: 0,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::InvalidValue {
        key: key.to_string(),
        value: value.to_string(),
        reason: e.to_string(),
    })
}

fn optional(value: &str) -> Option<String> {
    (!value.is_empty()).then(|| value.to_string())
}

impl RunConfig {
    /// Sets one key. Values are trimmed; an empty value clears optional keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let value = value.trim();
        let invalid = |reason: &str| ConfigError::InvalidValue {
            key: key.to_string(),
            value: value.to_string(),
            reason: reason.to_string(),
        };
        match key {
            "encoder.dim" => self.encoder.dim = parse(key, value)?,
            "encoder.seed" => self.encoder.seed = parse(key, value)?,
            "retrieval.tau_e" => self.retrieval.tau_e = parse(key, value)?,
            "retrieval.tau_c" => self.retrieval.tau_c = parse(key, value)?,
            "retrieval.k" => self.retrieval.k = parse(key, value)?,
            "templates" => self.templates = optional(value).map(PathBuf::from),
            "pool" => self.pool = optional(value).map(PathBuf::from),
            "index" => self.index = optional(value).map(PathBuf::from),
            "default_language" => self.default_language = optional(value),
            "backend" => self.backend = value.parse().map_err(|e: String| invalid(&e))?,
            "backend.corruption_rate" => {
                let rate: f64 = parse(key, value)?;
                if !(0.0..=1.0).contains(&rate) {
                    return Err(invalid("must be within [0, 1]"));
                }
                self.corruption_rate = rate;
            }
            "batch_size" => {
                let n: usize = parse(key, value)?;
                if n == 0 {
                    return Err(invalid("must be at least 1"));
                }
                self.batch_size = n;
            }
            "seed" => self.seed = parse(key, value)?,
            other => return Err(ConfigError::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    /// Applies `key=value` lines on top of the current values.
    pub fn apply_str(&mut self, text: &str, origin: &Path) -> Result<(), ConfigError> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let syntax = |reason: String| ConfigError::Syntax {
                path: origin.to_path_buf(),
                line: n + 1,
                reason,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| syntax("expected key=value".into()))?;
            self.set(key.trim(), value).map_err(|e| syntax(e.to_string()))?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = Self::default();
        cfg.apply_str(&text, path)?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = RunConfig::default();
        assert_eq!(c.retrieval, RetrievalConfig { tau_e: 0.65, tau_c: 0.7, k: 5 });
        assert_eq!(c.encoder.dim, 256);
        assert_eq!(c.backend, BackendSpec::OracleEcho);
    }

    #[test]
    fn parses_dotted_keys_and_comments() {
        let mut c = RunConfig::default();
        c.apply_str(
            "# run\nretrieval.tau_e = 0.5\nretrieval.k=3\n\nencoder.dim=64\ndefault_language=en\nbackend=tcp:127.0.0.1:9\n",
            Path::new("x.conf"),
        )
        .unwrap();
        assert_eq!(c.retrieval.tau_e, 0.5);
        assert_eq!(c.retrieval.k, 3);
        assert_eq!(c.encoder.dim, 64);
        assert_eq!(c.default_language.as_deref(), Some("en"));
        assert_eq!(c.backend, BackendSpec::Tcp("127.0.0.1:9".into()));
        c.set("default_language", "").unwrap();
        assert_eq!(c.default_language, None);
    }

    #[test]
    fn every_listed_key_is_settable() {
        let samples = [
            "8", "1", "0.5", "0.5", "2", "t.conf", "pool", "i.idx", "en", "oracle-echo", "0.1", "4", "3",
        ];
        let mut c = RunConfig::default();
        for (k, v) in KEYS.iter().zip(samples) {
            c.set(k, v).unwrap_or_else(|e| panic!("{k}: {e}"));
        }
    }

    #[test]
    fn errors_carry_location() {
        let mut c = RunConfig::default();
        let err = c.apply_str("seed=1\nnope\n", Path::new("a.conf")).unwrap_err();
        assert!(matches!(err, ConfigError::Syntax { line: 2, .. }));
        assert!(matches!(c.set("colour", "x"), Err(ConfigError::UnknownKey(_))));
        assert!(c.set("retrieval.k", "many").is_err());
        assert!(c.set("backend.corruption_rate", "2").is_err());
        assert!(c.set("backend", "grpc:x").is_err());
        assert!(c.set("batch_size", "0").is_err());
    }

    #[test]
    fn backend_specs() {
        assert_eq!("table:out.jsonl".parse(), Ok(BackendSpec::Table("out.jsonl".into())));
        assert_eq!(
            "stdio:python3 model.py".parse(),
            Ok(BackendSpec::Stdio(vec!["python3".into(), "model.py".into()]))
        );
        assert!("stdio:".parse::<BackendSpec>().is_err());
    }
}
