use std::io::{self, BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use retrieveall::adapter::{load_adapter, save_adapter, AdapterPool, LoraAdapter, ADAPTER_FILE_EXTENSION};
use retrieveall::backend::GenerationBackend;
use retrieveall::bench::{run_bench, BenchParams};
use retrieveall::config::{RunConfig, CONFIG_ENV};
use retrieveall::encoder::{Encoder, EncoderKind, TrigramEncoder};
use retrieveall::eval::report_from_outcomes;
use retrieveall::index::{load_index, read_corpus, save_index, write_corpus, EntityMention, ExampleIndex};
use retrieveall::pipeline::{Pipeline, SampleOutcome};
use retrieveall::prompt::{Annotation, PromptTemplates};
use retrieveall::router::{route, RouterConfig, RoutingDecision};
use retrieveall::synth::CorpusGenerator;

#[derive(Parser)]
#[command(name = "retrieveall", version, about = "Input-aware multi-adapter NER serving")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Run configuration: a key=value file plus one flag per key.
#[derive(Args, Default)]
struct ConfigArgs {
    /// Config file of key=value lines
    #[arg(long, env = CONFIG_ENV)]
    config: Option<PathBuf>,
    #[arg(long = "encoder.dim")]
    encoder_dim: Option<String>,
    #[arg(long = "encoder.seed")]
    encoder_seed: Option<String>,
    #[arg(long = "retrieval.tau_e")]
    tau_e: Option<String>,
    #[arg(long = "retrieval.tau_c")]
    tau_c: Option<String>,
    #[arg(long = "retrieval.k")]
    k: Option<String>,
    /// Prompt template file
    #[arg(long)]
    templates: Option<String>,
    /// Directory of *.lora adapter files
    #[arg(long)]
    pool: Option<String>,
    /// Example index file
    #[arg(long)]
    index: Option<String>,
    /// Adapter language used when the inferred language has none
    #[arg(long = "default_language")]
    default_language: Option<String>,
    /// oracle-echo, table:PATH, stdio:COMMAND or tcp:HOST:PORT
    #[arg(long)]
    backend: Option<String>,
    #[arg(long = "backend.corruption_rate")]
    corruption_rate: Option<String>,
    #[arg(long = "batch_size")]
    batch_size: Option<String>,
    #[arg(long)]
    seed: Option<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        let overrides = [
            ("encoder.dim", &self.encoder_dim),
            ("encoder.seed", &self.encoder_seed),
            ("retrieval.tau_e", &self.tau_e),
            ("retrieval.tau_c", &self.tau_c),
            ("retrieval.k", &self.k),
            ("templates", &self.templates),
            ("pool", &self.pool),
            ("index", &self.index),
            ("default_language", &self.default_language),
            ("backend", &self.backend),
            ("backend.corruption_rate", &self.corruption_rate),
            ("batch_size", &self.batch_size),
            ("seed", &self.seed),
        ];
        for (key, value) in overrides {
            if let Some(value) = value {
                cfg.set(key, value)?;
            }
        }
        cfg.retrieval.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Encode a JSONL corpus into an example index
    IndexBuild {
        corpus: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Infer the language of each input and pick its adapter
    Route {
        /// Text to route; omit with --stdin to read one input per line
        text: Option<String>,
        #[arg(long)]
        stdin: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Run the full pipeline over a JSONL input file
    Infer {
        corpus: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Score the pipeline on a labelled corpus
    Eval {
        corpus: PathBuf,
        /// Per-language table instead of JSON
        #[arg(long)]
        csv: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Time batched against sequential multi-adapter forward passes
    Bench {
        #[arg(long, default_value_t = 256)]
        d: usize,
        #[arg(long, default_value_t = 8)]
        r: usize,
        #[arg(long, default_value_t = 64)]
        b: usize,
        #[arg(long, default_value_t = 16)]
        l: usize,
        #[arg(long, default_value_t = 4)]
        p: usize,
        #[arg(long, default_value_t = 10)]
        repeats: usize,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Describe adapter files or every adapter in a directory
    AdapterInfo {
        #[arg(required = true)]
        paths: Vec<PathBuf>,
    },
    /// Write randomly initialised adapters, one per language
    AdapterInit {
        #[arg(long, short, required = true, value_delimiter = ',')]
        languages: Vec<String>,
        #[arg(long, default_value_t = 8)]
        rank: usize,
        #[arg(long, default_value_t = 256)]
        dim: usize,
        #[arg(long, short)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Generate a synthetic labelled corpus in script-disjoint languages
    SynthCorpus {
        #[arg(long, short, required = true, value_delimiter = ',')]
        languages: Vec<String>,
        #[arg(long, default_value_t = 100)]
        per_language: usize,
        /// Sample-id prefix
        #[arg(long, default_value = "s")]
        prefix: String,
        /// Seed of the shared vocabulary; vary --seed for disjoint samples
        #[arg(long, default_value_t = 0)]
        vocab_seed: u64,
        #[arg(long, short)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn emit(out: &mut impl Write, value: &Value) -> Result<()> {
    writeln!(out, "{value}")?;
    Ok(())
}

fn require<'a>(path: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    match path {
        Some(p) => Ok(p),
        None => bail!("missing `{key}`: pass --{key} or set it in the config file"),
    }
}

/// Index, pool, encoder and templates shared by the serving commands.
struct Serving {
    index: ExampleIndex,
    pool: AdapterPool,
    encoder: TrigramEncoder,
    templates: PromptTemplates,
    router: RouterConfig,
}

impl Serving {
    fn open(cfg: &RunConfig) -> Result<Self> {
        let index_path = require(&cfg.index, "index")?;
        let pool_path = require(&cfg.pool, "pool")?;
        let index = load_index(index_path).with_context(|| format!("loading index {}", index_path.display()))?;
        let spec = index.spec();
        if spec.kind != EncoderKind::ReferenceTrigram {
            bail!("index was built with the `{}` encoder, which this binary cannot run", spec.kind);
        }
        let encoder = TrigramEncoder::new(spec.dim, spec.seed)?;
        let pool = AdapterPool::load_dir(pool_path)?;
        if pool.is_empty() {
            bail!("no *.{ADAPTER_FILE_EXTENSION} adapters in {}", pool_path.display());
        }
        let templates = match &cfg.templates {
            Some(path) => PromptTemplates::load(path)?,
            None => PromptTemplates::default(),
        };
        Ok(Self {
            index,
            pool,
            encoder,
            templates,
            router: RouterConfig {
                retrieval: cfg.retrieval,
                default_language: cfg.default_language.clone(),
            },
        })
    }

    fn backend(&self, cfg: &RunConfig) -> Result<GenerationBackend> {
        Ok(cfg.backend.build(cfg.corruption_rate, cfg.seed)?)
    }
}

fn decision_json(d: &RoutingDecision) -> Value {
    json!({
        "language": d.language,
        "adapter_id": d.adapter_id,
        "votes": d.votes,
        "fallback_used": d.fallback_used,
    })
}

fn annotations_json(annotations: &[Annotation]) -> Value {
    annotations
        .iter()
        .map(|a| json!({"type": a.entity_type, "entities": a.entities}))
        .collect()
}

fn cmd_index_build(corpus: &Path, out_path: &Path, cfg: &RunConfig, out: &mut impl Write) -> Result<()> {
    let corpus = read_corpus(corpus)?;
    let encoder = TrigramEncoder::new(cfg.encoder.dim, cfg.encoder.seed)?;
    let index = ExampleIndex::build(&corpus, &encoder)?;
    save_index(&index, out_path)?;
    let counts = index.counts();
    emit(
        out,
        &json!({"contexts": counts.contexts, "entities": counts.entities, "dim": index.dim()}),
    )
}

fn cmd_route(text: Option<String>, stdin: bool, cfg: &RunConfig, out: &mut impl Write) -> Result<()> {
    let serving = Serving::open(cfg)?;
    let route_one = |text: &str, out: &mut dyn Write| -> Result<()> {
        let query = serving.encoder.encode(text)?;
        let decision = route(&serving.pool, &serving.index, &query, &serving.router)?;
        writeln!(out, "{}", decision_json(&decision))?;
        Ok(())
    };
    match (text, stdin) {
        (Some(text), false) => route_one(&text, out),
        (None, true) => {
            for line in io::stdin().lock().lines() {
                let line = line?;
                if !line.trim().is_empty() {
                    route_one(&line, out)?;
                }
            }
            Ok(())
        }
        _ => bail!("give either a text argument or --stdin"),
    }
}

type Input = (String, String, Option<Vec<EntityMention>>);

/// Inference inputs: JSONL objects with `id` and `text`, plus `entities` when
/// gold labels are available.
fn read_inputs(path: &Path) -> Result<Vec<Input>> {
    let file = std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut inputs = Vec::new();
    for (n, line) in io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let where_ = || format!("{}:{}", path.display(), n + 1);
        let v: Value = serde_json::from_str(&line).with_context(where_)?;
        let field = |k: &str| v.get(k).and_then(Value::as_str).map(str::to_string);
        let (Some(id), Some(text)) = (field("id"), field("text")) else {
            bail!("{}: expected string fields `id` and `text`", where_());
        };
        let gold = match v.get("entities") {
            None | Some(Value::Null) => None,
            Some(list) => Some(
                serde_json::from_value::<Vec<EntityMention>>(list.clone()).with_context(where_)?,
            ),
        };
        inputs.push((id, text, gold));
    }
    Ok(inputs)
}

fn outcome_json(o: &SampleOutcome) -> Value {
    let (parsed, error) = match &o.parsed {
        Ok(a) => (annotations_json(a), Value::Null),
        Err(e) => (Value::Null, json!(e.to_string())),
    };
    json!({
        "id": o.sample_id,
        "language": o.decision.language,
        "adapter_id": o.decision.adapter_id,
        "fallback_used": o.decision.fallback_used,
        "prompt_bytes": o.bundle.input_text.len(),
        "output": o.output,
        "parsed": parsed,
        "parse_error": error,
    })
}

fn cmd_infer(corpus: &Path, cfg: &RunConfig, out: &mut impl Write) -> Result<()> {
    let serving = Serving::open(cfg)?;
    let backend = serving.backend(cfg)?;
    let pipe = Pipeline::new(
        &serving.pool,
        &serving.index,
        &serving.encoder,
        &serving.templates,
        &backend,
        serving.router.clone(),
    )?;
    for chunk in read_inputs(corpus)?.chunks(cfg.batch_size) {
        let (_, outcomes) = pipe.process_batch(chunk)?;
        for o in &outcomes {
            emit(out, &outcome_json(o))?;
        }
    }
    Ok(())
}

fn cmd_eval(corpus: &Path, csv: bool, cfg: &RunConfig, out: &mut impl Write) -> Result<()> {
    let serving = Serving::open(cfg)?;
    let backend = serving.backend(cfg)?;
    let corpus = read_corpus(corpus)?;
    let pipe = Pipeline::new(
        &serving.pool,
        &serving.index,
        &serving.encoder,
        &serving.templates,
        &backend,
        serving.router.clone(),
    )?;
    let mut outcomes = Vec::with_capacity(corpus.len());
    for chunk in corpus.chunks(cfg.batch_size) {
        let inputs: Vec<Input> = chunk
            .iter()
            .map(|s| (s.sample_id.clone(), s.text.clone(), Some(s.entities.clone())))
            .collect();
        outcomes.extend(pipe.process_batch(&inputs)?.1);
    }
    let report = report_from_outcomes(&corpus, &outcomes)?;
    if csv {
        write!(out, "{}", report.to_csv())?;
    } else {
        writeln!(out, "{}", serde_json::to_string_pretty(&report)?)?;
    }
    Ok(())
}

fn cmd_adapter_info(paths: &[PathBuf], out: &mut impl Write) -> Result<()> {
    for path in paths {
        let files: Vec<PathBuf> = if path.is_dir() {
            // Loading the pool first rejects directories with clashing adapters.
            let pool = AdapterPool::load_dir(path)?;
            let mut files = Vec::with_capacity(pool.len());
            for entry in std::fs::read_dir(path)? {
                let p = entry?.path();
                if p.is_file() && p.extension().and_then(|e| e.to_str()) == Some(ADAPTER_FILE_EXTENSION) {
                    files.push(p);
                }
            }
            files.sort();
            files
        } else {
            vec![path.clone()]
        };
        for file in files {
            let a = load_adapter(&file)?;
            emit(
                out,
                &json!({
                    "path": file.display().to_string(),
                    "id": a.id(),
                    "language": a.language(),
                    "rank": a.rank(),
                    "dim": a.dim(),
                    "alpha": a.scale(),
                    "scaling": a.scaling(),
                }),
            )?;
        }
    }
    Ok(())
}

fn cmd_adapter_init(
    languages: &[String],
    rank: usize,
    dim: usize,
    dir: &Path,
    cfg: &RunConfig,
    out: &mut impl Write,
) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let bound = 1.0 / (dim as f32).sqrt();
    for lang in languages {
        let adapter = LoraAdapter::random(format!("lora-{lang}"), lang.as_str(), rank, dim, bound, &mut rng)?;
        let path = dir.join(format!("{lang}.{ADAPTER_FILE_EXTENSION}"));
        save_adapter(&adapter, &path)?;
        emit(out, &json!({"path": path.display().to_string(), "id": adapter.id()}))?;
    }
    Ok(())
}

fn run(cli: Cli, out: &mut impl Write) -> Result<()> {
    match cli.command {
        Command::IndexBuild { corpus, out: path, cfg } => cmd_index_build(&corpus, &path, &cfg.resolve()?, out),
        Command::Route { text, stdin, cfg } => cmd_route(text, stdin, &cfg.resolve()?, out),
        Command::Infer { corpus, cfg } => cmd_infer(&corpus, &cfg.resolve()?, out),
        Command::Eval { corpus, csv, cfg } => cmd_eval(&corpus, csv, &cfg.resolve()?, out),
        Command::Bench {
            d,
            r,
            b,
            l,
            p,
            repeats,
            cfg,
        } => {
            let seed = cfg.resolve()?.seed;
            let report = run_bench(&BenchParams {
                d,
                r,
                b,
                l,
                p,
                repeats,
                seed,
            })?;
            emit(
                out,
                &json!({
                    "batched_ns": report.batched_ns,
                    "sequential_ns": report.sequential_ns,
                    "speedup": report.speedup,
                    "max_abs_diff": report.max_abs_diff,
                    "params": report.params,
                }),
            )
        }
        Command::AdapterInfo { paths } => cmd_adapter_info(&paths, out),
        Command::AdapterInit {
            languages,
            rank,
            dim,
            out: dir,
            cfg,
        } => cmd_adapter_init(&languages, rank, dim, &dir, &cfg.resolve()?, out),
        Command::SynthCorpus {
            languages,
            per_language,
            prefix,
            vocab_seed,
            out: path,
            cfg,
        } => {
            let codes: Vec<&str> = languages.iter().map(String::as_str).collect();
            let corpus = CorpusGenerator::new(&codes, vocab_seed)?.corpus(per_language, &prefix, cfg.resolve()?.seed);
            write_corpus(&path, &corpus)?;
            emit(out, &json!({"samples": corpus.len(), "path": path.display().to_string()}))
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let stdout = io::stdout();
    let mut out = BufWriter::new(stdout.lock());
    let result = run(cli, &mut out).and_then(|()| out.flush().map_err(Into::into));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if is_broken_pipe(&e) => ExitCode::SUCCESS,
        Err(e) => {
            let _ = out.flush();
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn is_broken_pipe(e: &anyhow::Error) -> bool {
    e.chain()
        .filter_map(|c| c.downcast_ref::<io::Error>())
        .any(|io| io.kind() == io::ErrorKind::BrokenPipe)
}
