use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use retrieveall::adapter::{save_adapter, AdapterPool, LoraAdapter};
use retrieveall::backend::GenerationBackend;
use retrieveall::encoder::TrigramEncoder;
use retrieveall::eval::evaluate_pipeline;
use retrieveall::index::{load_index, read_corpus, save_index, write_corpus, ExampleIndex};
use retrieveall::linalg::Vector;
use retrieveall::pipeline::Pipeline;
use retrieveall::prompt::PromptTemplates;
use retrieveall::router::RouterConfig;
use retrieveall::synth::CorpusGenerator;

const LANGS: [&str; 4] = ["en", "ru", "ko", "ar"];

#[test]
fn artifacts_reload_into_an_identical_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let gen = CorpusGenerator::new(&LANGS, 11).unwrap();
    let corpus = gen.corpus(25, "p", 4);

    let corpus_path = dir.path().join("corpus.jsonl");
    write_corpus(&corpus_path, &corpus).unwrap();
    assert_eq!(read_corpus(&corpus_path).unwrap(), corpus);

    let encoder = TrigramEncoder::new(128, 3).unwrap();
    let index = ExampleIndex::build(&corpus, &encoder).unwrap();
    let index_path = dir.path().join("corpus.idx");
    save_index(&index, &index_path).unwrap();
    let reloaded_index = load_index(&index_path).unwrap();
    assert_eq!(reloaded_index, index);

    let pool_dir = dir.path().join("pool");
    std::fs::create_dir(&pool_dir).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut pool = AdapterPool::new();
    for lang in LANGS {
        let a = LoraAdapter::random(format!("lora-{lang}"), lang, 4, 32, 0.2, &mut rng).unwrap();
        save_adapter(&a, pool_dir.join(format!("{lang}.lora"))).unwrap();
        pool = pool.register(a).unwrap();
    }
    std::fs::write(pool_dir.join("README.txt"), "not an adapter").unwrap();
    let reloaded_pool = AdapterPool::load_dir(&pool_dir).unwrap();
    assert_eq!(reloaded_pool.len(), LANGS.len());
    for a in pool.iter() {
        assert_eq!(**reloaded_pool.get_by_id(a.id()).unwrap(), **a);
    }

    let templates = PromptTemplates::default();
    let backend = GenerationBackend::oracle_echo();
    let fresh = Pipeline::new(&pool, &index, &encoder, &templates, &backend, RouterConfig::default()).unwrap();
    let loaded = Pipeline::new(
        &reloaded_pool,
        &reloaded_index,
        &encoder,
        &templates,
        &backend,
        RouterConfig::default(),
    )
    .unwrap();
    for s in &corpus {
        let a = fresh.process(s).unwrap();
        let b = loaded.process(s).unwrap();
        assert_eq!(a.bundle, b.bundle);
        assert_eq!(a.decision, b.decision);
    }
    let report = evaluate_pipeline(&corpus, &loaded).unwrap();
    assert_eq!(report.micro.f1, 1.0);
    assert_eq!(report.routing_accuracy, 1.0);
    let support: usize = corpus.iter().map(|s| s.entities.len()).sum();
    assert_eq!(report.per_language.values().map(|r| r.support).sum::<usize>(), support);
}

#[test]
fn hot_extension_leaves_existing_adapters_untouched() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = Vector::new((0..16).map(|i| i as f32 / 16.0).collect()).unwrap();
    let mut pool = AdapterPool::new();
    let mut before = Vec::new();
    for lang in LANGS {
        pool = pool
            .register(LoraAdapter::random(format!("lora-{lang}"), lang, 2, 16, 0.5, &mut rng).unwrap())
            .unwrap();
        before.push(pool.lookup(lang).unwrap().delta_forward(&x).unwrap());
    }
    let older = pool.clone();
    let extended = pool
        .register(LoraAdapter::random("lora-zh", "zh", 2, 16, 0.5, &mut rng).unwrap())
        .unwrap();
    assert!(!older.contains_language("zh"));
    assert!(extended.contains_language("zh"));
    for (lang, want) in LANGS.iter().zip(&before) {
        let got = extended.lookup(lang).unwrap().delta_forward(&x).unwrap();
        let bits = |v: &Vector| v.as_slice().iter().map(|f| f.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&got), bits(want));
    }
}

#[test]
fn held_out_queries_get_same_language_demonstrations() {
    let gen = CorpusGenerator::new(&LANGS, 21).unwrap();
    let train = gen.corpus(60, "t", 1);
    let held_out = gen.corpus(10, "h", 2);
    let encoder = TrigramEncoder::new(256, 0).unwrap();
    let index = ExampleIndex::build(&train, &encoder).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let pool = LANGS.iter().fold(AdapterPool::new(), |p, l| {
        p.register(LoraAdapter::random(format!("lora-{l}"), *l, 2, 8, 0.1, &mut rng).unwrap())
            .unwrap()
    });
    let templates = PromptTemplates::default();
    let backend = GenerationBackend::oracle_echo();
    let pipe = Pipeline::new(&pool, &index, &encoder, &templates, &backend, RouterConfig::default()).unwrap();
    let lang_of = |text: &str| train.iter().find(|s| s.text == text).map(|s| s.language.clone());
    let mut demos = 0;
    for s in &held_out {
        let out = pipe.process(s).unwrap();
        assert_eq!(out.decision.language, s.language);
        for c in &out.bundle.context_examples {
            assert_eq!(lang_of(&c.text).as_deref(), Some(s.language.as_str()));
            demos += 1;
        }
    }
    assert!(demos > 0, "no query retrieved a demonstration");
}
