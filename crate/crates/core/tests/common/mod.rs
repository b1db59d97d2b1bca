//! Shared fixtures for integration tests: deterministic golden recipes and
//! independent reference computations.
#![allow(dead_code)]

use std::path::PathBuf;

use retrieveall::adapter::LoraAdapter;
use retrieveall::encoder::TrigramEncoder;
use retrieveall::index::{CorpusSample, EntityMention, ExampleIndex};
use retrieveall::linalg::Matrix;
use retrieveall::prompt::{build_input, serialize_target, Annotation, ContextExample, PromptTemplates};

pub fn golden_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

/// Set to rewrite the checked-in golden files from the recipes below.
pub const BLESS_ENV: &str = "RETRIEVEALL_BLESS";

pub fn golden_adapter() -> LoraAdapter {
    let a = Matrix::new(2, 4, vec![0.5, -1.0, 0.25, 2.0, 1.5, 0.0, -0.75, 0.125]).unwrap();
    let b = Matrix::new(4, 2, vec![1.0, 0.0, -0.5, 0.5, 0.0, 3.0, 0.0625, -2.0]).unwrap();
    LoraAdapter::new("golden-en", "en", 4.0, a, b).unwrap()
}

pub fn golden_corpus() -> Vec<CorpusSample> {
    let s = |id: &str, lang: &str, text: &str, ents: &[(&str, &str)]| CorpusSample {
        sample_id: id.into(),
        language: lang.into(),
        text: text.into(),
        entities: ents.iter().map(|(t, ty)| EntityMention::new(*t, *ty)).collect(),
    };
    vec![
        s("g1", "en", "Ada Lovelace visited London", &[("Ada Lovelace", "PER"), ("London", "LOC")]),
        s("g2", "de", "Siemens baut in Berlin", &[("Siemens", "ORG"), ("Berlin", "LOC")]),
        s("g3", "ko", "서울은 크다", &[("서울", "LOC")]),
    ]
}

pub fn golden_index() -> ExampleIndex {
    ExampleIndex::build(&golden_corpus(), &TrigramEncoder::new(16, 7).unwrap()).unwrap()
}

pub fn golden_prompt() -> String {
    let entities = vec![
        ("PER".to_string(), vec!["Ada Lovelace".to_string()]),
        ("LOC".to_string(), vec!["London".to_string(), "Paris, France".to_string()]),
    ];
    let contexts = vec![ContextExample {
        text: "Ada Lovelace visited London".into(),
        annotations: vec![
            Annotation::new("PER", ["Ada Lovelace"]),
            Annotation::new("LOC", ["London"]),
        ],
    }];
    let mut out = build_input("Grace Hopper flew to Paris", &entities, &contexts, &PromptTemplates::default()).unwrap();
    out.push_str("\n---\n");
    out.push_str(&serialize_target(&[
        Annotation::new("PER", ["Grace Hopper"]),
        Annotation::new("LOC", ["Paris, France", "a]b\\c"]),
    ]));
    out.push('\n');
    out
}

/// `(name, recipe bytes)` for every golden file.
pub fn golden_files() -> Vec<(&'static str, Vec<u8>)> {
    vec![
        ("adapter.lora", golden_adapter().to_bytes()),
        ("index.idx", golden_index().to_bytes()),
        ("prompt.txt", golden_prompt().into_bytes()),
    ]
}

/// Rewrites goldens when blessing; otherwise reports the first mismatch.
pub fn check_goldens() -> Result<(), String> {
    let bless = std::env::var_os(BLESS_ENV).is_some();
    for (name, bytes) in golden_files() {
        let path = golden_dir().join(name);
        if bless {
            std::fs::write(&path, &bytes).map_err(|e| format!("{}: {e}", path.display()))?;
            continue;
        }
        let expected = std::fs::read(&path).map_err(|e| format!("{}: {e}", path.display()))?;
        if expected != bytes {
            let at = expected.iter().zip(&bytes).position(|(a, b)| a != b).unwrap_or(expected.len().min(bytes.len()));
            return Err(format!(
                "{name} differs from its golden at byte {at} ({} vs {} bytes)",
                bytes.len(),
                expected.len()
            ));
        }
    }
    Ok(())
}

/// Plain f64 reference for `W0 x + (α/r) B (A x)` at one position.
pub fn reference_forward(w0: &Matrix, adapter: &LoraAdapter, x: &[f32]) -> Vec<f64> {
    let d = x.len();
    let r = adapter.rank();
    let (a, b) = (adapter.a().as_slice(), adapter.b().as_slice());
    let hidden: Vec<f64> = (0..r)
        .map(|q| (0..d).map(|j| f64::from(a[q * d + j]) * f64::from(x[j])).sum())
        .collect();
    let scale = f64::from(adapter.scale()) / r as f64;
    (0..d)
        .map(|m| {
            let base: f64 = (0..d).map(|j| f64::from(w0.as_slice()[m * d + j]) * f64::from(x[j])).sum();
            let delta: f64 = (0..r).map(|q| f64::from(b[m * r + q]) * hidden[q]).sum();
            base + scale * delta
        })
        .collect()
}
