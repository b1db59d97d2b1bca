//! Deterministic synthetic NER corpora in script-disjoint languages.
//!
//! Each language gets a fixed vocabulary of filler words and per-type entity
//! names drawn from its own script. Sentences mix filler words with zero to
//! three entity mentions. Vocabularies depend only on the generator seed, so
//! training corpora and held-out queries from the same generator share them.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::index::{CorpusSample, EntityMention};

pub const ENTITY_TYPES: [&str; 3] = ["PER", "LOC", "ORG"];

/// Supported codes with their code point ranges.
const SCRIPTS: [(&str, u32, u32, (usize, usize)); 7] = [
    ("en", 0x61, 0x7a, (3, 8)),
    ("ru", 0x430, 0x44f, (3, 8)),
    ("el", 0x3b1, 0x3c9, (3, 8)),
    ("ar", 0x627, 0x64a, (3, 7)),
    ("zh", 0x4e00, 0x4fff, (1, 3)),
    ("ja", 0x3041, 0x3096, (2, 4)),
    ("ko", 0xac00, 0xd7a3, (1, 3)),
];

pub fn supported_languages() -> impl Iterator<Item = &'static str> {
    SCRIPTS.iter().map(|s| s.0)
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SynthError {
    #[error("no synthetic script for language `{0}`")]
    UnknownLanguage(String),
    #[error("no languages given")]
    NoLanguages,
}

#[derive(Debug, Clone)]
struct SyntheticLanguage {
    code: String,
    vocab: Vec<String>,
    names: Vec<(&'static str, Vec<String>)>,
}

#[derive(Debug, Clone)]
pub struct CorpusGenerator {
    languages: Vec<SyntheticLanguage>,
}

fn word(rng: &mut ChaCha8Rng, lo: u32, hi: u32, len: (usize, usize)) -> String {
    let n = rng.gen_range(len.0..=len.1);
    (0..n)
        .map(|_| char::from_u32(rng.gen_range(lo..=hi)).expect("ranges hold valid scalars"))
        .collect()
}

impl CorpusGenerator {
    pub const VOCAB_SIZE: usize = 24;
    pub const NAMES_PER_TYPE: usize = 12;

    pub fn new(codes: &[&str], seed: u64) -> Result<Self, SynthError> {
        if codes.is_empty() {
            return Err(SynthError::NoLanguages);
        }
        let mut languages = Vec::with_capacity(codes.len());
        for &code in codes {
            let &(_, lo, hi, len) = SCRIPTS
                .iter()
                .find(|s| s.0 == code)
                .ok_or_else(|| SynthError::UnknownLanguage(code.to_string()))?;
            let salt = crate::encoder::fnv1a64(code.as_bytes(), seed);
            let mut rng = ChaCha8Rng::seed_from_u64(salt);
            let vocab = (0..Self::VOCAB_SIZE).map(|_| word(&mut rng, lo, hi, len)).collect();
            let names = ENTITY_TYPES
                .iter()
                .map(|&ty| {
                    let list = (0..Self::NAMES_PER_TYPE)
                        .map(|_| {
                            let first = word(&mut rng, lo, hi, len);
                            if rng.gen_bool(0.5) {
                                format!("{first} {}", word(&mut rng, lo, hi, len))
                            } else {
                                first
                            }
                        })
                        .collect();
                    (ty, list)
                })
                .collect();
            languages.push(SyntheticLanguage {
                code: code.to_string(),
                vocab,
                names,
            });
        }
        Ok(Self { languages })
    }

    pub fn languages(&self) -> impl Iterator<Item = &str> {
        self.languages.iter().map(|l| l.code.as_str())
    }

    fn sentence(&self, lang: &SyntheticLanguage, id: String, rng: &mut ChaCha8Rng) -> CorpusSample {
        let n_words = rng.gen_range(5..=9);
        let mut tokens: Vec<String> = (0..n_words)
            .map(|_| lang.vocab.choose(rng).expect("non-empty vocab").clone())
            .collect();
        let mut entities = Vec::new();
        for _ in 0..rng.gen_range(0..=3) {
            let (ty, names) = lang.names.choose(rng).expect("entity types");
            let name = names.choose(rng).expect("names").clone();
            let at = rng.gen_range(0..=tokens.len());
            tokens.insert(at, name.clone());
            entities.push((at, EntityMention::new(name, *ty)));
        }
        // Mentions in textual order; later inserts shift earlier positions.
        let text = tokens.join(" ");
        let mut mentions: Vec<(usize, EntityMention)> = entities
            .into_iter()
            .map(|(_, m)| {
                let pos = text.find(&m.text).unwrap_or(0);
                (pos, m)
            })
            .collect();
        mentions.sort_by_key(|(pos, _)| *pos);
        CorpusSample {
            sample_id: id,
            language: lang.code.clone(),
            text,
            entities: mentions.into_iter().map(|(_, m)| m).collect(),
        }
    }

    /// `per_language` samples for every language, interleaved by language and
    /// identified as `{prefix}-{lang}-{n}`.
    pub fn corpus(&self, per_language: usize, prefix: &str, seed: u64) -> Vec<CorpusSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(per_language * self.languages.len());
        for n in 0..per_language {
            for lang in &self.languages {
                let id = format!("{prefix}-{}-{n:05}", lang.code);
                out.push(self.sentence(lang, id, &mut rng));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_valid() {
        let g = CorpusGenerator::new(&["en", "ko", "ru"], 1).unwrap();
        let a = g.corpus(20, "t", 5);
        let b = g.corpus(20, "t", 5);
        assert_eq!(a, b);
        assert_eq!(a.len(), 60);
        for s in &a {
            for m in &s.entities {
                assert!(s.text.contains(&m.text));
                assert!(ENTITY_TYPES.contains(&m.entity_type.as_str()));
            }
        }
        assert!(a.iter().any(|s| !s.entities.is_empty()));
        assert_ne!(a, g.corpus(20, "t", 6));
    }

    #[test]
    fn vocabulary_is_shared_across_corpus_seeds() {
        let g = CorpusGenerator::new(&["en"], 1).unwrap();
        let words = |c: &[CorpusSample]| {
            c.iter()
                .flat_map(|s| s.text.split(' ').map(str::to_string).collect::<Vec<_>>())
                .collect::<std::collections::HashSet<_>>()
        };
        let a = words(&g.corpus(50, "a", 1));
        let b = words(&g.corpus(50, "b", 2));
        assert!(a.intersection(&b).count() > 10);
    }

    #[test]
    fn unknown_language() {
        assert_eq!(
            CorpusGenerator::new(&["xx"], 0).unwrap_err(),
            SynthError::UnknownLanguage("xx".into())
        );
        assert_eq!(CorpusGenerator::new(&[], 0).unwrap_err(), SynthError::NoLanguages);
    }
}
