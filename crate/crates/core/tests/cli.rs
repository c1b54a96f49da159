use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use clonerec::corpus::load_corpus;
use clonerec::eval::{read_rows, summarize, Summary};
use clonerec::lm::{LanguageModel, NGramModel};
use tempfile::TempDir;

const SUM_A: &str = "public int sumAll(int[] values) {
    int total = 0;
    for (int v : values) total += v;
    return total;
}";
const SUM_B: &str = "static long addUp(java.util.List<Long> items) {
    long acc = 0L;
    for (Long x : items) { acc = acc + x; }
    return acc;
}";
const GREET: &str = "String greet(String who) {
    return \"hello \" + who.trim();
}";
const MAX: &str = "int largest(int first, int second) {
    if (first > second) {
        return first;
    }
    // tie goes to the second argument
    return second;
}";

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    /// Source tree with three files, a reference table with one duplicate
    /// method and one out-of-range reference.
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let src = dir.path().join("src");
        fs::create_dir_all(src.join("sub")).unwrap();
        fs::write(src.join("A.java"), format!("{SUM_A}\n\n{SUM_B}\n")).unwrap();
        fs::write(src.join("B.java"), format!("{GREET}\n")).unwrap();
        fs::write(src.join("C.java"), format!("{MAX}\n")).unwrap();
        fs::write(src.join("sub/D.java"), format!("{GREET}\n")).unwrap();
        fs::write(
            dir.path().join("refs.csv"),
            "record_id,functionality_id,file_path,start_line,end_line\n\
             1,1,A.java,1,5\n\
             2,1,A.java,7,11\n\
             3,2,B.java,1,3\n\
             4,3,C.java,1,7\n\
             5,2,sub/D.java,1,3\n\
             6,3,C.java,40,50\n",
        )
        .unwrap();
        // the corpus methods back to back, in record order
        let stream: String = [SUM_A, SUM_B, GREET, MAX]
            .iter()
            .map(|m| format!("<soc> {m} <eoc>\n"))
            .collect();
        fs::write(dir.path().join("stream.java"), stream).unwrap();
        Fixture { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn arg(&self, name: &str) -> String {
        self.path(name).to_string_lossy().into_owned()
    }

    fn run(&self, args: &[&str]) -> Output {
        run_with(args, None, &[])
    }

    fn build_corpus(&self) -> Output {
        let out = self.run(&[
            "build-corpus",
            "--reference-table",
            &self.arg("refs.csv"),
            "--source-root",
            &self.arg("src"),
            "--out",
            &self.arg("corpus.jsonl"),
        ]);
        assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
        out
    }

    fn train(&self, order: usize) {
        let out = self.run(&[
            "train-lm",
            "--corpus",
            &self.arg("corpus.jsonl"),
            "--order",
            &order.to_string(),
            "--out",
            &self.arg("model.json"),
        ]);
        assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    }
}

fn run_with(args: &[&str], stdin: Option<&str>, env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_clonerec"));
    cmd.args(args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped());
    for (k, v) in env {
        cmd.env(k, v);
    }
    let mut child = cmd.spawn().unwrap();
    let mut pipe = child.stdin.take().unwrap();
    if let Some(input) = stdin {
        pipe.write_all(input.as_bytes()).unwrap();
    }
    drop(pipe);
    child.wait_with_output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ranking_lines(o: &Output) -> Vec<String> {
    stdout(o)
        .lines()
        .filter(|l| l.chars().next().is_some_and(|c| c.is_ascii_digit()))
        .map(String::from)
        .collect()
}

#[test]
fn build_corpus_collapses_duplicates_and_reports_skips() {
    let fx = Fixture::new();
    let out = fx.build_corpus();
    assert!(stdout(&out).contains("6 references, 4 records, 1 skipped, 1 duplicates collapsed"));

    let corpus = load_corpus(&fx.path("corpus.jsonl")).unwrap();
    let ids: Vec<u64> = corpus.records().iter().map(|r| r.record_id).collect();
    assert_eq!(ids, [1, 2, 3, 4]);
    let greet = corpus.get(3).unwrap();
    assert_eq!(greet.functionality_id, 2);
    assert_eq!(
        greet.tokens.to_string(),
        "<soc> String greet ( String who ) { return <str_val> + who . trim ( ) ; } <eoc>"
    );
    // the comment inside MAX leaves no trace
    assert!(!corpus.get(4).unwrap().tokens.to_string().contains("tie"));

    let skipped = fs::read_to_string(fx.path("corpus.jsonl.skipped.jsonl")).unwrap();
    assert_eq!(skipped.lines().count(), 1);
    assert!(skipped.contains("\"record_id\":6"));

    // rebuilding is byte-identical
    let first = fs::read(fx.path("corpus.jsonl")).unwrap();
    fx.build_corpus();
    assert_eq!(fs::read(fx.path("corpus.jsonl")).unwrap(), first);
}

#[test]
fn missing_inputs_exit_with_input_error() {
    let fx = Fixture::new();
    let out = fx.run(&[
        "build-corpus",
        "--reference-table",
        &fx.arg("refs.csv"),
        "--source-root",
        &fx.arg("nowhere"),
        "--out",
        &fx.arg("corpus.jsonl"),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("nowhere"));

    let out = fx.run(&[
        "train-lm",
        "--corpus",
        &fx.arg("absent.jsonl"),
        "--out",
        &fx.arg("m.json"),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn usage_errors_exit_one() {
    let fx = Fixture::new();
    assert_eq!(fx.run(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(fx.run(&["recommend"]).status.code(), Some(1));
    assert_eq!(fx.run(&["--help"]).status.code(), Some(0));
    fx.build_corpus();
    fx.train(3);
    let out = fx.run(&[
        "generate",
        "--model",
        &fx.arg("model.json"),
        "--test-stream",
        &fx.arg("stream.java"),
        "--out",
        &fx.arg("gen.jsonl"),
        "--nucleus-threshold",
        "1.5",
    ]);
    assert_eq!(out.status.code(), Some(1), "{}", stderr(&out));
    assert!(stderr(&out).contains("nucleus-threshold"));
}

#[test]
fn all_references_failing_is_fatal() {
    let fx = Fixture::new();
    fs::write(
        fx.path("bad.csv"),
        "record_id,functionality_id,file_path,start_line,end_line\n1,1,Missing.java,1,2\n",
    )
    .unwrap();
    let out = fx.run(&[
        "build-corpus",
        "--reference-table",
        &fx.arg("bad.csv"),
        "--source-root",
        &fx.arg("src"),
        "--out",
        &fx.arg("empty.jsonl"),
    ]);
    assert_eq!(out.status.code(), Some(2));
    // an empty corpus cannot train a model
    let out = fx.run(&[
        "train-lm",
        "--corpus",
        &fx.arg("empty.jsonl"),
        "--out",
        &fx.arg("m.json"),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("empty"));
}

#[test]
fn trained_model_round_trips_and_keeps_order() {
    let fx = Fixture::new();
    fx.build_corpus();
    fx.train(3);
    let model = NGramModel::load(&fx.path("model.json")).unwrap();
    assert_eq!(model.order(), 3);
    let corpus = load_corpus(&fx.path("corpus.jsonl")).unwrap();
    let seqs: Vec<Vec<&str>> = corpus.records().iter().map(|r| r.tokens.texts()).collect();
    assert_eq!(model, NGramModel::train(&seqs, 3).unwrap());
    assert!(model.vocabulary().iter().any(|t| t == "<str_val>"));
}

#[test]
fn generate_is_deterministic_and_handles_streams_without_markers() {
    let fx = Fixture::new();
    fx.build_corpus();
    fx.train(3);
    let gen = |out: &str, seed: &str| {
        let o = fx.run(&[
            "generate",
            "--model",
            &fx.arg("model.json"),
            "--test-stream",
            &fx.arg("stream.java"),
            "--out",
            &fx.arg(out),
            "--window-len",
            "6",
            "--seed",
            seed,
        ]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        fs::read(fx.path(out)).unwrap()
    };
    let a = gen("g1.jsonl", "42");
    let b = gen("g2.jsonl", "42");
    assert_eq!(a, b);
    assert!(!a.is_empty());

    fs::write(fx.path("plain.java"), "int x = 1;").unwrap();
    let o = fx.run(&[
        "generate",
        "--model",
        &fx.arg("model.json"),
        "--test-stream",
        &fx.arg("plain.java"),
        "--out",
        &fx.arg("none.jsonl"),
    ]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stderr(&o).contains("warning"));
    assert_eq!(fs::read(fx.path("none.jsonl")).unwrap(), b"");
}

#[test]
fn recommend_from_corpus_and_snapshot() {
    let fx = Fixture::new();
    fx.build_corpus();
    let corpus = load_corpus(&fx.path("corpus.jsonl")).unwrap();
    let own = corpus.get(4).unwrap().tokens.to_string();

    let o = fx.run(&[
        "recommend",
        "--index",
        &fx.arg("corpus.jsonl"),
        "--tokens",
        &own,
        "--k",
        "1",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(ranking_lines(&o), ["1\t4\t3\t1.000000"]);

    // k beyond the corpus returns everything
    let o = fx.run(&[
        "recommend",
        "--index",
        &fx.arg("corpus.jsonl"),
        "--tokens",
        &own,
        "--k",
        "50",
    ]);
    assert_eq!(ranking_lines(&o).len(), 4);

    // unseen tokens: zero scores in id order
    let o = fx.run(&[
        "recommend",
        "--index",
        &fx.arg("corpus.jsonl"),
        "--tokens",
        "qqq zzz",
    ]);
    let lines = ranking_lines(&o);
    assert_eq!(
        lines,
        [
            "1\t1\t1\t0.000000",
            "2\t2\t1\t0.000000",
            "3\t3\t2\t0.000000",
            "4\t4\t3\t0.000000"
        ]
    );

    // a source file query; the snapshot gives the same ranking without labels
    fs::write(fx.path("q.java"), GREET).unwrap();
    let o = fx.run(&[
        "recommend",
        "--index",
        &fx.arg("corpus.jsonl"),
        "--query-file",
        &fx.arg("q.java"),
    ]);
    let from_corpus = ranking_lines(&o);
    assert!(from_corpus[0].starts_with("1\t3\t2\t1.0000"));
    let o = fx.run(&[
        "build-index",
        "--corpus",
        &fx.arg("corpus.jsonl"),
        "--out",
        &fx.arg("index.jsonl"),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let o = fx.run(&[
        "recommend",
        "--index",
        &fx.arg("index.jsonl"),
        "--query-file",
        &fx.arg("q.java"),
    ]);
    let from_snapshot = ranking_lines(&o);
    let strip = |l: &String| {
        let f: Vec<&str> = l.split('\t').collect();
        (f[0].to_string(), f[1].to_string(), f[3].to_string())
    };
    assert_eq!(
        from_corpus.iter().map(strip).collect::<Vec<_>>(),
        from_snapshot.iter().map(strip).collect::<Vec<_>>()
    );
    assert!(from_snapshot
        .iter()
        .all(|l| l.split('\t').nth(2) == Some("-")));
}

fn write_manifest(fx: &Fixture, k: usize) {
    let manifest = format!(
        "[paths]\ncorpus = {:?}\ntest_stream = {:?}\nreport_dir = {:?}\n\n[parameters]\nwindow_len = 12\nnucleus_threshold = 1e-9\norder = 8\nk = {k}\nseed = 3\n",
        fx.arg("corpus.jsonl"),
        fx.arg("stream.java"),
        fx.arg("report"),
    );
    fs::write(fx.path("run.toml"), manifest).unwrap();
}

#[test]
fn evaluate_greedy_fixture_end_to_end() {
    let fx = Fixture::new();
    fx.build_corpus();
    write_manifest(&fx, 10);
    let env = [("SOURCE_DATE_EPOCH", "1700000000")];
    let o = run_with(&["evaluate", "--manifest", &fx.arg("run.toml")], None, &env);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("Top-k accuracy and MRR"));

    let report = fx.path("report");
    let summary: Summary =
        serde_json::from_str(&fs::read_to_string(report.join("summary.json")).unwrap()).unwrap();
    assert!(summary.num_queries > 0);
    assert_eq!(summary.num_failures, 0);
    let exact = summary
        .accuracy
        .iter()
        .find(|a| a.matcher == clonerec::eval::Matcher::Exact)
        .unwrap();
    assert_eq!(exact.at(1), Some(1.0));
    assert_eq!(exact.mrr, 1.0);

    // aggregates are recomputable from the rows
    let rows = read_rows(
        fs::File::open(report.join("rows.jsonl"))
            .map(std::io::BufReader::new)
            .unwrap(),
    )
    .unwrap();
    assert_eq!(rows.len(), summary.num_queries);
    assert_eq!(summarize(&rows, 0), summary);

    let echoed = fs::read_to_string(report.join("manifest.toml")).unwrap();
    for needle in [
        "window_len = 12",
        "order = 8",
        "seed = 3",
        "max_tokens = 512",
        "started = 1700000000",
    ] {
        assert!(echoed.contains(needle), "{needle} missing from\n{echoed}");
    }

    // rerun is byte-identical
    let snapshot = |dir: &Path| -> Vec<(String, Vec<u8>)> {
        let mut files: Vec<_> = fs::read_dir(dir)
            .unwrap()
            .map(|e| e.unwrap().path())
            .map(|p| {
                (
                    p.file_name().unwrap().to_string_lossy().into_owned(),
                    fs::read(&p).unwrap(),
                )
            })
            .collect();
        files.sort();
        files
    };
    let before = snapshot(&report);
    let o = run_with(&["evaluate", "--manifest", &fx.arg("run.toml")], None, &env);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(snapshot(&report), before);

    // a flag overrides the manifest and is echoed
    let o = run_with(
        &["evaluate", "--manifest", &fx.arg("run.toml"), "--k", "2"],
        None,
        &env,
    );
    assert_eq!(o.status.code(), Some(0));
    let echoed = fs::read_to_string(report.join("manifest.toml")).unwrap();
    assert!(echoed.contains("k = 2"));
    let rows = read_rows(
        fs::File::open(report.join("rows.jsonl"))
            .map(std::io::BufReader::new)
            .unwrap(),
    )
    .unwrap();
    assert!(rows.iter().all(|r| r.recommendations.len() == 2));
}

#[test]
fn evaluate_scores_ingested_generations() {
    let fx = Fixture::new();
    fx.build_corpus();
    fx.train(8);
    let o = fx.run(&[
        "generate",
        "--model",
        &fx.arg("model.json"),
        "--test-stream",
        &fx.arg("stream.java"),
        "--out",
        &fx.arg("gen.jsonl"),
        "--window-len",
        "12",
        "--nucleus-threshold",
        "1e-9",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let o = fx.run(&[
        "evaluate",
        "--corpus",
        &fx.arg("corpus.jsonl"),
        "--model",
        &fx.arg("model.json"),
        "--test-stream",
        &fx.arg("stream.java"),
        "--generations",
        &fx.arg("gen.jsonl"),
        "--report-dir",
        &fx.arg("ingested"),
        "--window-len",
        "12",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let summary: Summary =
        serde_json::from_str(&fs::read_to_string(fx.path("ingested/summary.json")).unwrap())
            .unwrap();
    assert_eq!(summary.num_failures, 0);
    assert_eq!(summary.accuracy[0].at(1), Some(1.0));

    // generations made for other windows never line up; every query fails
    let o = fx.run(&[
        "evaluate",
        "--corpus",
        &fx.arg("corpus.jsonl"),
        "--test-stream",
        &fx.arg("stream.java"),
        "--generations",
        &fx.arg("gen.jsonl"),
        "--report-dir",
        &fx.arg("mismatch"),
        "--window-len",
        "11",
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(
        fs::read_to_string(fx.path("mismatch/failures.jsonl"))
            .unwrap()
            .lines()
            .count()
            > 0
    );
}

#[test]
fn query_matches_recommend_and_survives_bad_lines() {
    let fx = Fixture::new();
    fx.build_corpus();
    fx.train(8);
    let args = [
        "query",
        "--model",
        &fx.arg("model.json"),
        "--corpus",
        &fx.arg("corpus.jsonl"),
        "--nucleus-threshold",
        "1e-9",
    ];

    let o = run_with(&args, Some("<soc> String greet ( String who ) {\n"), &[]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let corpus = load_corpus(&fx.path("corpus.jsonl")).unwrap();
    let span = corpus.get(3).unwrap().tokens.to_string();
    let direct = fx.run(&[
        "recommend",
        "--index",
        &fx.arg("corpus.jsonl"),
        "--tokens",
        &span,
    ]);
    assert_eq!(ranking_lines(&o), ranking_lines(&direct));

    let o = run_with(
        &args,
        Some("x = \"unterminated\nno markers here\n<soc> int largest (\n"),
        &[],
    );
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert_eq!(text.matches("error:").count(), 2, "{text}");
    assert!(text.contains("# line 3\n1\t4\t3\t1.000000"), "{text}");

    let o = run_with(&args, Some(""), &[]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o), "");
}
