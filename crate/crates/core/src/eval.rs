//! Span-exact micro-F1, routing accuracy, and per-language reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;
use thiserror::Error;

use crate::index::CorpusSample;
use crate::pipeline::{Pipeline, PipelineError, SampleOutcome};
use crate::prompt::{annotations_from_mentions, Annotation};
use crate::router::RoutingDecision;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("length mismatch: {left} predictions vs {right} references")]
    LengthMismatch { left: usize, right: usize },
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct MatchCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl MatchCounts {
    pub fn add(&mut self, other: MatchCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }

    pub fn scores(&self) -> Scores {
        let precision = ratio(self.tp, self.tp + self.fp);
        let recall = ratio(self.tp, self.tp + self.fn_);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Scores {
            precision,
            recall,
            f1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Scores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(n: usize, d: usize) -> f64 {
    if d == 0 {
        0.0
    } else {
        n as f64 / d as f64
    }
}

fn pairs(annotations: &[Annotation]) -> Vec<(String, String)> {
    annotations
        .iter()
        .flat_map(|a| {
            let ty = a.entity_type.trim().to_string();
            a.entities.iter().map(move |e| (ty.clone(), e.trim().to_string()))
        })
        .collect()
}

/// Multiset matching of one sample, counted per entity type.
pub fn match_sample(pred: &[Annotation], gold: &[Annotation]) -> BTreeMap<String, MatchCounts> {
    let mut per_type: BTreeMap<String, MatchCounts> = BTreeMap::new();
    let mut unmatched = pairs(gold);
    for p in pairs(pred) {
        let counts = per_type.entry(p.0.clone()).or_default();
        match unmatched.iter().position(|g| *g == p) {
            Some(i) => {
                unmatched.swap_remove(i);
                counts.tp += 1;
            }
            None => counts.fp += 1,
        }
    }
    for (ty, _) in unmatched {
        per_type.entry(ty).or_default().fn_ += 1;
    }
    per_type
}

fn total(per_type: &BTreeMap<String, MatchCounts>) -> MatchCounts {
    per_type.values().fold(MatchCounts::default(), |mut acc, c| {
        acc.add(*c);
        acc
    })
}

pub fn micro_counts(preds: &[Vec<Annotation>], golds: &[Vec<Annotation>]) -> Result<MatchCounts, EvalError> {
    if preds.len() != golds.len() {
        return Err(EvalError::LengthMismatch {
            left: preds.len(),
            right: golds.len(),
        });
    }
    Ok(preds
        .iter()
        .zip(golds)
        .fold(MatchCounts::default(), |mut acc, (p, g)| {
            acc.add(total(&match_sample(p, g)));
            acc
        }))
}

pub fn micro_f1(preds: &[Vec<Annotation>], golds: &[Vec<Annotation>]) -> Result<Scores, EvalError> {
    Ok(micro_counts(preds, golds)?.scores())
}

/// Fraction of decisions whose language equals the gold language; 0 for no inputs.
pub fn routing_accuracy<S: AsRef<str>>(decisions: &[RoutingDecision], gold: &[S]) -> Result<f64, EvalError> {
    if decisions.len() != gold.len() {
        return Err(EvalError::LengthMismatch {
            left: decisions.len(),
            right: gold.len(),
        });
    }
    let hits = decisions
        .iter()
        .zip(gold)
        .filter(|(d, g)| d.language == g.as_ref())
        .count();
    Ok(ratio(hits, decisions.len()))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LanguageReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Gold entity mentions.
    pub support: usize,
    pub parse_failures: usize,
    pub samples: usize,
    pub routing_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub samples: usize,
    pub micro: Scores,
    pub counts: MatchCounts,
    /// Unweighted mean of per-entity-type F1.
    pub macro_f1: f64,
    pub routing_accuracy: f64,
    pub parse_failures: usize,
    pub per_language: BTreeMap<String, LanguageReport>,
}

#[derive(Default)]
struct LanguageTally {
    counts: MatchCounts,
    support: usize,
    parse_failures: usize,
    samples: usize,
    routed: usize,
}

/// Scores pipeline outcomes against their corpus samples (same order).
/// Unparseable outputs count as empty predictions.
pub fn report_from_outcomes(corpus: &[CorpusSample], outcomes: &[SampleOutcome]) -> Result<EvalReport, EvalError> {
    if corpus.len() != outcomes.len() {
        return Err(EvalError::LengthMismatch {
            left: outcomes.len(),
            right: corpus.len(),
        });
    }
    let mut langs: BTreeMap<String, LanguageTally> = BTreeMap::new();
    let mut per_type: BTreeMap<String, MatchCounts> = BTreeMap::new();
    let mut counts = MatchCounts::default();
    let (mut routed, mut parse_failures) = (0, 0);
    for (sample, outcome) in corpus.iter().zip(outcomes) {
        let gold = annotations_from_mentions(&sample.entities);
        let pred: &[Annotation] = match &outcome.parsed {
            Ok(p) => p,
            Err(_) => &[],
        };
        let sample_types = match_sample(pred, &gold);
        let sample_counts = total(&sample_types);
        for (ty, c) in sample_types {
            per_type.entry(ty).or_default().add(c);
        }
        counts.add(sample_counts);

        let tally = langs.entry(sample.language.clone()).or_default();
        tally.counts.add(sample_counts);
        tally.support += sample.entities.len();
        tally.samples += 1;
        if outcome.parsed.is_err() {
            tally.parse_failures += 1;
            parse_failures += 1;
        }
        if outcome.decision.language == sample.language {
            tally.routed += 1;
            routed += 1;
        }
    }

    let per_language = langs
        .into_iter()
        .map(|(lang, t)| {
            let s = t.counts.scores();
            let report = LanguageReport {
                precision: s.precision,
                recall: s.recall,
                f1: s.f1,
                support: t.support,
                parse_failures: t.parse_failures,
                samples: t.samples,
                routing_accuracy: ratio(t.routed, t.samples),
            };
            (lang, report)
        })
        .collect();
    let macro_f1 = if per_type.is_empty() {
        0.0
    } else {
        per_type.values().map(|c| c.scores().f1).sum::<f64>() / per_type.len() as f64
    };
    Ok(EvalReport {
        samples: corpus.len(),
        micro: counts.scores(),
        counts,
        macro_f1,
        routing_accuracy: ratio(routed, corpus.len()),
        parse_failures,
        per_language,
    })
}

/// Runs every sample through the pipeline (with self-exclusion as
/// configured on it) and scores the result.
pub fn evaluate_pipeline(corpus: &[CorpusSample], pipeline: &Pipeline<'_>) -> Result<EvalReport, EvalError> {
    let outcomes = corpus
        .iter()
        .map(|s| pipeline.process(s))
        .collect::<Result<Vec<_>, _>>()?;
    report_from_outcomes(corpus, &outcomes)
}

impl EvalReport {
    /// One row per language plus an `ALL` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("language,samples,support,precision,recall,f1,parse_failures,routing_accuracy\n");
        for (lang, r) in &self.per_language {
            let _ = writeln!(
                out,
                "{lang},{},{},{:.6},{:.6},{:.6},{},{:.6}",
                r.samples, r.support, r.precision, r.recall, r.f1, r.parse_failures, r.routing_accuracy
            );
        }
        let support: usize = self.per_language.values().map(|r| r.support).sum();
        let _ = writeln!(
            out,
            "ALL,{},{},{:.6},{:.6},{:.6},{},{:.6}",
            self.samples,
            support,
            self.micro.precision,
            self.micro.recall,
            self.micro.f1,
            self.parse_failures,
            self.routing_accuracy
        );
        out
    }
}
