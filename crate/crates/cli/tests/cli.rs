use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use serde_json::Value;

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_retrieveall"));
    cmd.env_remove("RETRIEVEALL_CONFIG");
    cmd
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(out.stderr.is_empty(), "unexpected stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn json_lines(s: &str) -> Vec<Value> {
    s.lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Self {
        let f = Self {
            dir: tempfile::tempdir().unwrap(),
        };
        let langs = "en,ru,zh,ja,ko";
        ok(&["synth-corpus", "-l", langs, "--per-language", "30", "--prefix", "train", "--seed", "1", "-o", &f.p("train.jsonl")]);
        ok(&["synth-corpus", "-l", langs, "--per-language", "4", "--prefix", "test", "--seed", "2", "-o", &f.p("test.jsonl")]);
        ok(&["adapter-init", "-l", langs, "--rank", "4", "--dim", "32", "-o", &f.p("pool")]);
        ok(&["index-build", &f.p("train.jsonl"), "-o", &f.p("train.idx")]);
        f
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn p(&self, name: &str) -> String {
        self.path(name).display().to_string()
    }
}

#[test]
fn index_build_reports_counts() {
    let f = Fixture::new();
    let out = ok(&["index-build", &f.p("train.jsonl"), "-o", &f.p("again.idx"), "--encoder.dim", "64"]);
    let v = &json_lines(&out)[0];
    assert_eq!(v["contexts"], 150);
    assert_eq!(v["dim"], 64);
    assert!(v["entities"].as_u64().unwrap() > 0);
    // Same inputs, same bytes.
    ok(&["index-build", &f.p("train.jsonl"), "-o", &f.p("twice.idx"), "--encoder.dim", "64"]);
    assert_eq!(std::fs::read(f.path("again.idx")).unwrap(), std::fs::read(f.path("twice.idx")).unwrap());
}

#[test]
fn route_text_and_stdin() {
    let f = Fixture::new();
    let first: Value = serde_json::from_str(std::fs::read_to_string(f.path("test.jsonl")).unwrap().lines().next().unwrap()).unwrap();
    let text = first["text"].as_str().unwrap();
    let out = ok(&["route", text, "--index", &f.p("train.idx"), "--pool", &f.p("pool")]);
    let d = &json_lines(&out)[0];
    assert_eq!(d["language"], first["lang"]);
    assert_eq!(d["adapter_id"], format!("lora-{}", first["lang"].as_str().unwrap()));
    assert!(d["votes"].is_object());
    assert!(d["fallback_used"].is_boolean());

    let mut child = bin()
        .args(["route", "--stdin", "--index", &f.p("train.idx"), "--pool", &f.p("pool")])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    {
        use std::io::Write;
        let mut stdin = child.stdin.take().unwrap();
        writeln!(stdin, "{text}\n\n{text}").unwrap();
    }
    let out = child.wait_with_output().unwrap();
    assert!(out.status.success());
    assert_eq!(json_lines(&String::from_utf8(out.stdout).unwrap()).len(), 2);
}

#[test]
fn infer_streams_one_line_per_sample_deterministically() {
    let f = Fixture::new();
    let args = ["infer", &f.p("test.jsonl"), "--index", &f.p("train.idx"), "--pool", &f.p("pool"), "--batch_size", "7"];
    let out = ok(&args);
    let lines = json_lines(&out);
    assert_eq!(lines.len(), 20);
    for line in &lines {
        for key in ["id", "language", "prompt_bytes", "output", "parsed"] {
            assert!(line.get(key).is_some(), "missing {key} in {line}");
        }
        assert!(line["parsed"].is_array());
    }
    assert_eq!(lines[0]["id"], "test-en-00000");
    assert_eq!(out, ok(&args));
}

#[test]
fn infer_without_gold_needs_a_non_oracle_backend() {
    let f = Fixture::new();
    std::fs::write(f.path("raw.jsonl"), "{\"id\":\"x\",\"text\":\"hello there\"}\n").unwrap();
    let out = run(&["infer", &f.p("raw.jsonl"), "--index", &f.p("train.idx"), "--pool", &f.p("pool")]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("x"));

    std::fs::write(f.path("table.jsonl"), "{\"id\":\"x\",\"text\":\"(PER: [hello])\"}\n").unwrap();
    let backend = format!("table:{}", f.p("table.jsonl"));
    let out = ok(&["infer", &f.p("raw.jsonl"), "--index", &f.p("train.idx"), "--pool", &f.p("pool"), "--backend", &backend]);
    let v = &json_lines(&out)[0];
    assert_eq!(v["parsed"][0]["type"], "PER");
    assert_eq!(v["parsed"][0]["entities"][0], "hello");
}

#[test]
fn infer_through_an_external_stdio_backend() {
    let f = Fixture::new();
    // The stand-in model echoes its prompt as the completion.
    let out = ok(&[
        "infer",
        &f.p("test.jsonl"),
        "--index",
        &f.p("train.idx"),
        "--pool",
        &f.p("pool"),
        "--backend",
        "stdio:sed -u s/\"prompt\"/\"text\"/",
    ]);
    let lines = json_lines(&out);
    assert_eq!(lines.len(), 20);
    for line in &lines {
        assert_eq!(line["output"].as_str().unwrap().len() as u64, line["prompt_bytes"].as_u64().unwrap());
        assert!(line["parsed"].is_null());
        assert!(line["parse_error"].is_string());
    }
}

#[test]
fn eval_oracle_is_perfect_and_corruption_is_not() {
    let f = Fixture::new();
    let base = ["eval", &f.p("test.jsonl"), "--index", &f.p("train.idx"), "--pool", &f.p("pool")];
    let report: Value = serde_json::from_str(&ok(&base)).unwrap();
    assert_eq!(report["micro"]["f1"], 1.0);
    assert_eq!(report["parse_failures"], 0);
    assert_eq!(report["routing_accuracy"], 1.0);
    assert_eq!(report["per_language"].as_object().unwrap().len(), 5);

    let mut noisy = base.to_vec();
    noisy.extend(["--backend.corruption_rate", "0.5", "--seed", "3"]);
    let a = ok(&noisy);
    assert_eq!(a, ok(&noisy));
    let report: Value = serde_json::from_str(&a).unwrap();
    assert!(report["micro"]["f1"].as_f64().unwrap() < 1.0);
    assert!(report["parse_failures"].as_u64().unwrap() > 0);

    let mut csv = base.to_vec();
    csv.push("--csv");
    let table = ok(&csv);
    let rows: Vec<&str> = table.lines().collect();
    assert!(rows[0].starts_with("language,"));
    assert_eq!(rows.len(), 7);
    assert!(rows[6].starts_with("ALL,20,"));
}

#[test]
fn config_file_and_environment() {
    let f = Fixture::new();
    let conf = f.path("run.conf");
    std::fs::write(
        &conf,
        format!("# serving\nindex={}\npool={}\nretrieval.k=3\n", f.p("train.idx"), f.p("pool")),
    )
    .unwrap();
    let out = bin()
        .args(["eval", &f.p("test.jsonl"), "--csv"])
        .env("RETRIEVEALL_CONFIG", &conf)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    // Flags override file values.
    let out = run(&["eval", &f.p("test.jsonl"), "--config", &conf.display().to_string(), "--retrieval.k", "0"]);
    assert_eq!(out.status.code(), Some(1));

    std::fs::write(&conf, "no equals sign\n").unwrap();
    let out = run(&["eval", &f.p("test.jsonl"), "--config", &conf.display().to_string()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("run.conf:1"));
}

#[test]
fn unserved_language_uses_default_language_flag() {
    let f = Fixture::new();
    std::fs::create_dir(f.path("small")).unwrap();
    std::fs::copy(f.path("pool/en.lora"), f.path("small/en.lora")).unwrap();
    let ko = json_lines(&std::fs::read_to_string(f.path("test.jsonl")).unwrap())
        .into_iter()
        .find(|v| v["lang"] == "ko")
        .unwrap();
    let text = ko["text"].as_str().unwrap();
    let out = run(&["route", text, "--index", &f.p("train.idx"), "--pool", &f.p("small")]);
    assert_eq!(out.status.code(), Some(1));
    assert!(out.stdout.is_empty());
    assert!(String::from_utf8_lossy(&out.stderr).contains("ko"));
    let out = ok(&["route", text, "--index", &f.p("train.idx"), "--pool", &f.p("small"), "--default_language", "en"]);
    let d = &json_lines(&out)[0];
    assert_eq!(d["language"], "ko");
    assert_eq!(d["adapter_id"], "lora-en");
    assert_eq!(d["fallback_used"], true);
}

#[test]
fn bench_reports_and_validates() {
    let out = ok(&["bench", "--d", "32", "--r", "4", "--b", "8", "--l", "2", "--p", "3", "--repeats", "3"]);
    let v = &json_lines(&out)[0];
    for key in ["batched_ns", "sequential_ns", "speedup"] {
        assert!(v[key].as_f64().unwrap() > 0.0, "{key}");
    }
    assert!(v["max_abs_diff"].as_f64().unwrap() <= 1e-5);

    let out = run(&["bench", "--b", "2", "--p", "3"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(out.stdout.is_empty());
    assert!(String::from_utf8_lossy(&out.stderr).contains("p=3"));
}

#[test]
fn bench_single_row_has_no_batching_advantage() {
    // One sample with one position leaves nothing to group or block.
    let out = ok(&["bench", "--b", "1", "--p", "1", "--l", "1", "--repeats", "50"]);
    let speedup = json_lines(&out)[0]["speedup"].as_f64().unwrap();
    assert!((0.7..=1.3).contains(&speedup), "speedup {speedup}");
}

#[test]
fn adapter_info_reads_the_golden_adapter() {
    let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/golden/adapter.lora");
    let out = ok(&["adapter-info", &golden.display().to_string()]);
    let v = &json_lines(&out)[0];
    assert_eq!(v["id"], "golden-en");
    assert_eq!(v["language"], "en");
    assert_eq!(v["rank"], 2);
    assert_eq!(v["dim"], 4);
    assert_eq!(v["alpha"], 4.0);
    assert_eq!(v["scaling"], 2.0);
}

#[test]
fn adapter_info_lists_a_pool_directory() {
    let f = Fixture::new();
    let out = ok(&["adapter-info", &f.p("pool")]);
    let ids: Vec<String> = json_lines(&out).iter().map(|v| v["id"].as_str().unwrap().to_string()).collect();
    assert_eq!(ids, ["lora-en", "lora-ja", "lora-ko", "lora-ru", "lora-zh"]);
}

#[test]
fn errors_exit_one_with_diagnostics_on_stderr() {
    let f = Fixture::new();
    for args in [
        vec!["index-build", "/nonexistent/corpus.jsonl", "-o", "/tmp/x.idx"],
        vec!["adapter-info", "/nonexistent/a.lora"],
        vec!["route", "hello"],
        vec!["no-such-command"],
    ] {
        let out = run(&args);
        assert_eq!(out.status.code(), Some(1), "{args:?}");
        assert!(out.stdout.is_empty(), "{args:?}");
        assert!(!out.stderr.is_empty(), "{args:?}");
    }
    std::fs::write(f.path("empty.jsonl"), "").unwrap();
    let out = run(&["index-build", &f.p("empty.jsonl"), "-o", &f.p("e.idx")]);
    assert_eq!(out.status.code(), Some(1));
    std::fs::write(f.path("bad.idx"), "{}\n").unwrap();
    let out = run(&["route", "hi", "--index", &f.p("bad.idx"), "--pool", &f.p("pool")]);
    assert_eq!(out.status.code(), Some(1));
}
