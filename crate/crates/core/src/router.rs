//! Input-aware adapter routing.
//!
//! The language of an input is the mode of the languages of its top-k context
//! hits. Ties go to the language with the larger summed similarity, then to
//! the lexicographically smallest code. When nothing clears `tau_c` the
//! single nearest context record decides and the decision is marked as a
//! fallback.

use std::collections::BTreeMap;

use serde::Serialize;
use thiserror::Error;

use crate::adapter::AdapterPool;
use crate::index::{ExampleIndex, IndexError, RetrievalConfig, RetrievalHit};
use crate::linalg::Vector;

#[derive(Debug, Error)]
pub enum RouteError {
    #[error("example index is empty")]
    EmptyIndex,
    #[error("adapter pool is empty")]
    EmptyPool,
    #[error("no adapter for inferred language `{language}`")]
    AdapterMissing { language: String },
    #[error(transparent)]
    Index(#[from] IndexError),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoutingDecision {
    pub language: String,
    /// Empty until the decision is resolved against a pool.
    pub adapter_id: String,
    pub votes: BTreeMap<String, usize>,
    pub vote_similarity: BTreeMap<String, f64>,
    pub fallback_used: bool,
    pub hits: Vec<RetrievalHit>,
}

/// Routing knobs beyond retrieval: an optional adapter to use when the
/// inferred language has none.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RouterConfig {
    pub retrieval: RetrievalConfig,
    pub default_language: Option<String>,
}

fn tally(hits: &[RetrievalHit]) -> (BTreeMap<String, usize>, BTreeMap<String, f64>) {
    let mut votes = BTreeMap::new();
    let mut sims = BTreeMap::new();
    for hit in hits {
        *votes.entry(hit.language.clone()).or_insert(0) += 1;
        *sims.entry(hit.language.clone()).or_insert(0.0) += f64::from(hit.similarity);
    }
    (votes, sims)
}

fn mode(votes: &BTreeMap<String, usize>, sims: &BTreeMap<String, f64>) -> Option<String> {
    // BTreeMap iterates codes ascending, so keeping the first maximum
    // resolves the final tie toward the smallest code.
    let mut best: Option<(&String, usize, f64)> = None;
    for (lang, &count) in votes {
        let sim = sims[lang];
        let better = match best {
            None => true,
            Some((_, bc, bs)) => count > bc || (count == bc && sim > bs),
        };
        if better {
            best = Some((lang, count, sim));
        }
    }
    best.map(|(lang, _, _)| lang.clone())
}

/// Votes over context hits. `exclude_sample` keeps an indexed sample from
/// voting on itself.
pub fn infer_language(
    index: &ExampleIndex,
    query: &Vector,
    cfg: &RetrievalConfig,
    exclude_sample: Option<&str>,
) -> Result<RoutingDecision, RouteError> {
    if index.is_empty() {
        return Err(RouteError::EmptyIndex);
    }
    let mut hits = index.retrieve_context(query, cfg, exclude_sample)?;
    let mut fallback_used = false;
    if hits.is_empty() {
        let nearest = index
            .nearest_context(query, exclude_sample)?
            .ok_or(RouteError::EmptyIndex)?;
        hits.push(nearest);
        fallback_used = true;
    }
    let (votes, vote_similarity) = tally(&hits);
    let language = mode(&votes, &vote_similarity).expect("at least one hit");
    Ok(RoutingDecision {
        language,
        adapter_id: String::new(),
        votes,
        vote_similarity,
        fallback_used,
        hits,
    })
}

/// Infers the language and resolves its adapter. With a configured default
/// language, an unserved language falls back to that adapter.
pub fn route(
    pool: &AdapterPool,
    index: &ExampleIndex,
    query: &Vector,
    cfg: &RouterConfig,
) -> Result<RoutingDecision, RouteError> {
    route_excluding(pool, index, query, cfg, None)
}

/// [`route`] for a query that is itself in the index.
pub fn route_excluding(
    pool: &AdapterPool,
    index: &ExampleIndex,
    query: &Vector,
    cfg: &RouterConfig,
    exclude_sample: Option<&str>,
) -> Result<RoutingDecision, RouteError> {
    if pool.is_empty() {
        return Err(RouteError::EmptyPool);
    }
    let mut decision = infer_language(index, query, &cfg.retrieval, exclude_sample)?;
    resolve(pool, &mut decision, cfg.default_language.as_deref())?;
    Ok(decision)
}

pub(crate) fn resolve(
    pool: &AdapterPool,
    decision: &mut RoutingDecision,
    default_language: Option<&str>,
) -> Result<(), RouteError> {
    if let Ok(adapter) = pool.lookup(&decision.language) {
        decision.adapter_id = adapter.id().to_string();
        return Ok(());
    }
    let adapter = default_language
        .and_then(|lang| pool.lookup(lang).ok())
        .ok_or_else(|| RouteError::AdapterMissing {
            language: decision.language.clone(),
        })?;
    decision.adapter_id = adapter.id().to_string();
    decision.fallback_used = true;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::LoraAdapter;
    use crate::encoder::EncoderSpec;
    use crate::index::ContextRecord;
    use rand::SeedableRng;

    const DIM: usize = 8;

    fn e0() -> Vector {
        let mut v = vec![0.0; DIM];
        v[0] = 1.0;
        Vector::new(v).unwrap()
    }

    /// Unit vector at cosine `sim` to e0, rotated toward axis `axis`.
    fn at_similarity(sim: f32, axis: usize) -> Vector {
        let mut v = vec![0.0; DIM];
        v[0] = sim;
        v[axis] = (1.0 - sim * sim).sqrt();
        Vector::new(v).unwrap()
    }

    fn index_of(records: &[(&str, &str, f32)]) -> ExampleIndex {
        let contexts = records
            .iter()
            .enumerate()
            .map(|(i, (id, lang, sim))| ContextRecord {
                sample_id: id.to_string(),
                language: lang.to_string(),
                text: id.to_string(),
                entities: vec![],
                embedding: at_similarity(*sim, 1 + i % (DIM - 1)),
            })
            .collect();
        ExampleIndex::from_records(EncoderSpec::reference(DIM, 0), vec![], contexts, vec![]).unwrap()
    }

    fn pool(langs: &[&str]) -> AdapterPool {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        langs.iter().fold(AdapterPool::new(), |p, l| {
            p.register(LoraAdapter::random(format!("lora-{l}"), *l, 2, DIM, 0.1, &mut rng).unwrap())
                .unwrap()
        })
    }

    #[test]
    fn strict_majority_wins() {
        let index = index_of(&[
            ("a", "en", 0.95),
            ("b", "en", 0.9),
            ("c", "en", 0.85),
            ("d", "fr", 0.99),
            ("e", "de", 0.98),
        ]);
        let d = infer_language(&index, &e0(), &RetrievalConfig::default(), None).unwrap();
        assert_eq!(d.language, "en");
        assert_eq!(d.votes["en"], 3);
        assert!(!d.fallback_used);
    }

    #[test]
    fn count_tie_goes_to_larger_similarity_sum() {
        let index = index_of(&[
            ("a", "en", 0.9),
            ("b", "en", 0.9),
            ("c", "fr", 0.95),
            ("d", "fr", 0.95),
            ("e", "de", 0.8),
        ]);
        let d = infer_language(&index, &e0(), &RetrievalConfig::default(), None).unwrap();
        assert!((d.vote_similarity["en"] - 1.8).abs() < 1e-6);
        assert!((d.vote_similarity["fr"] - 1.9).abs() < 1e-6);
        assert_eq!(d.language, "fr");
    }

    #[test]
    fn full_tie_goes_to_smallest_code() {
        let index = index_of(&[("a", "fr", 0.9), ("b", "en", 0.9)]);
        let d = infer_language(&index, &e0(), &RetrievalConfig::default(), None).unwrap();
        assert_eq!(d.language, "en");
    }

    #[test]
    fn below_threshold_falls_back_to_nearest() {
        let index = index_of(&[("a", "en", 0.3), ("b", "ko", 0.41), ("c", "fr", 0.2)]);
        let d = infer_language(&index, &e0(), &RetrievalConfig::default(), None).unwrap();
        assert_eq!(d.language, "ko");
        assert!(d.fallback_used);
        assert_eq!(d.hits.len(), 1);
        assert!(d.hits[0].fallback);
        assert!((d.hits[0].similarity - 0.41).abs() < 1e-6);
    }

    #[test]
    fn excluded_sample_cannot_vote_for_itself() {
        let index = index_of(&[("self", "en", 1.0), ("b", "ko", 0.5)]);
        let d = infer_language(&index, &e0(), &RetrievalConfig::default(), Some("self")).unwrap();
        assert_eq!(d.language, "ko");
        assert!(d.fallback_used);
    }

    #[test]
    fn route_resolves_adapter() {
        let index = index_of(&[("a", "en", 0.9)]);
        let d = route(&pool(&["en", "fr"]), &index, &e0(), &RouterConfig::default()).unwrap();
        assert_eq!(d.adapter_id, "lora-en");
        assert!(!d.fallback_used);
    }

    #[test]
    fn unserved_language_without_default_fails() {
        let index = index_of(&[("a", "zh", 0.9)]);
        let err = route(&pool(&["en"]), &index, &e0(), &RouterConfig::default()).unwrap_err();
        assert!(matches!(err, RouteError::AdapterMissing { language } if language == "zh"));
    }

    #[test]
    fn unserved_language_uses_configured_default() {
        let index = index_of(&[("a", "zh", 0.9)]);
        let cfg = RouterConfig {
            default_language: Some("en".into()),
            ..RouterConfig::default()
        };
        let d = route(&pool(&["en"]), &index, &e0(), &cfg).unwrap();
        assert_eq!(d.language, "zh");
        assert_eq!(d.adapter_id, "lora-en");
        assert!(d.fallback_used);
    }

    #[test]
    fn empty_pool_and_index_errors() {
        let index = index_of(&[("a", "en", 0.9)]);
        assert!(matches!(
            route(&AdapterPool::new(), &index, &e0(), &RouterConfig::default()),
            Err(RouteError::EmptyPool)
        ));
        let empty =
            ExampleIndex::from_records(EncoderSpec::reference(DIM, 0), vec![], vec![], vec![]).unwrap();
        assert!(matches!(
            infer_language(&empty, &e0(), &RetrievalConfig::default(), None),
            Err(RouteError::EmptyIndex)
        ));
    }

    #[test]
    fn record_order_does_not_change_the_decision() {
        let recs = [
            ("a", "en", 0.9),
            ("b", "en", 0.9),
            ("c", "fr", 0.9),
            ("d", "fr", 0.9),
            ("e", "de", 0.9),
            ("f", "de", 0.75),
        ];
        let forward = infer_language(&index_of(&recs), &e0(), &RetrievalConfig::default(), None).unwrap();
        let mut reversed = recs;
        reversed.reverse();
        let backward = infer_language(&index_of(&reversed), &e0(), &RetrievalConfig::default(), None).unwrap();
        assert_eq!(forward.language, backward.language);
        assert_eq!(forward.votes, backward.votes);
    }
}
