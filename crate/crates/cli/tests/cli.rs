use std::path::{Path, PathBuf};

use duel_cli::main_with;

struct Run {
    code: i32,
    stdout: String,
    stderr: String,
}

fn duel(args: &[&str]) -> Run {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = main_with(std::iter::once("duel").chain(args.iter().copied()), &mut out, &mut err);
    Run {
        code,
        stdout: String::from_utf8(out).unwrap(),
        stderr: String::from_utf8(err).unwrap(),
    }
}

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    /// Corpus, vocabulary and tabular model for `lines`.
    fn new(lines: &str) -> Self {
        let ws = Self {
            dir: tempfile::tempdir().unwrap(),
        };
        std::fs::write(ws.path("corpus.txt"), lines).unwrap();
        assert_eq!(duel(&["build-vocab", "--corpus", &ws.p("corpus.txt"), "--out", &ws.p("vocab.json")]).code, 0);
        let r = duel(&[
            "train", "--corpus", &ws.p("corpus.txt"), "--vocab", &ws.p("vocab.json"), "--out", &ws.p("tab.json"),
        ]);
        assert_eq!(r.code, 0, "{}", r.stderr);
        ws
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn p(&self, name: &str) -> String {
        self.path(name).to_string_lossy().into_owned()
    }

    fn eval_json(&self, extra: &[&str]) -> serde_json::Value {
        let (corpus, vocab, model) = (self.p("corpus.txt"), self.p("vocab.json"), self.p("tab.json"));
        let mut args = vec!["eval", "--corpus", &corpus, "--vocab", &vocab, "--model", &model];
        args.extend_from_slice(extra);
        let r = duel(&args);
        assert_eq!(r.code, 0, "{}", r.stderr);
        serde_json::from_str(&r.stdout).unwrap()
    }
}

const CORPUS: &str = "abab\nbbab\naabb\nabab\nbaba\n\nbbbb\n";

/// `exp(H / L)` of the empirical joint of [`CORPUS`]: counts 2, 1, 1, 1, 1 of 6.
fn empirical_ppl() -> f64 {
    let h: f64 = [2.0, 1.0, 1.0, 1.0, 1.0]
        .iter()
        .map(|c: &f64| -(c / 6.0) * (c / 6.0).ln())
        .sum();
    (h / 4.0).exp()
}

fn ppl(report: &serde_json::Value) -> f64 {
    report["aggregates"]["perplexity"].as_f64().unwrap()
}

#[test]
fn arm_exact_recovers_empirical_entropy() {
    let ws = Workspace::new(CORPUS);
    let arm = ws.eval_json(&["--method", "arm-exact"]);
    assert!((ppl(&arm) - empirical_ppl()).abs() < 1e-12);
    assert_eq!(arm["aggregates"]["token_count"], 24);
    assert_eq!(arm["config"]["seed"], 0);
    assert_eq!(arm["config"]["command"], "eval");
}

#[test]
fn sequential_duel_matches_arm_exact() {
    let ws = Workspace::new(CORPUS);
    let arm = ppl(&ws.eval_json(&["--method", "arm-exact"]));
    assert_eq!(ppl(&ws.eval_json(&["--rule", "l2r:k=1"])), arm);
    let greedy = ppl(&ws.eval_json(&["--rule", "greedy", "--k", "1", "--parallel"]));
    assert!((greedy - arm).abs() / arm < 1e-12);
}

#[test]
fn usage_errors_exit_one() {
    let ws = Workspace::new(CORPUS);
    let base = ["eval", "--corpus", "c", "--vocab", "v", "--model", "m"];
    let with = |extra: &[&str]| {
        let mut a = base.to_vec();
        a.extend_from_slice(extra);
        duel(&a).code
    };
    assert_eq!(with(&["--method", "elbo-mc", "--mc-samples", "0"]), 1);
    assert_eq!(with(&["--method", "bogus"]), 1);
    assert_eq!(with(&["--format", "xml"]), 1);
    let mixed = duel(&[
        "eval", "--corpus", &ws.p("corpus.txt"), "--vocab", &ws.p("vocab.json"), "--model", &ws.p("tab.json"),
        "--method", "arm-exact", "--rule", "l2r",
    ]);
    assert_eq!(mixed.code, 1);
    assert!(mixed.stderr.contains("arm-exact"));
    let no_mc = duel(&[
        "eval", "--corpus", &ws.p("corpus.txt"), "--vocab", &ws.p("vocab.json"), "--model", &ws.p("tab.json"),
        "--method", "elbo-mc",
    ]);
    assert_eq!(no_mc.code, 1);
}

#[test]
fn data_errors_exit_two() {
    let ws = Workspace::new(CORPUS);
    std::fs::write(ws.path("empty.txt"), "\n\n").unwrap();
    let r = duel(&["build-vocab", "--corpus", &ws.p("empty.txt")]);
    assert_eq!(r.code, 2);
    assert!(r.stderr.contains("empty"), "{}", r.stderr);

    std::fs::write(ws.path("ragged.txt"), "ab\nba\n\nabc\n").unwrap();
    let r = duel(&["build-vocab", "--corpus", &ws.p("ragged.txt")]);
    assert_eq!(r.code, 2);
    assert!(r.stderr.contains("line 4"), "{}", r.stderr);

    std::fs::write(ws.path("short.txt"), "ab\nba\n").unwrap();
    let r = duel(&[
        "eval", "--corpus", &ws.p("short.txt"), "--vocab", &ws.p("vocab.json"), "--model", &ws.p("tab.json"),
        "--rule", "l2r",
    ]);
    assert_eq!(r.code, 2);

    std::fs::write(ws.path("unknown.txt"), "abcd\n").unwrap();
    let r = duel(&[
        "eval", "--corpus", &ws.p("unknown.txt"), "--vocab", &ws.p("vocab.json"), "--model", &ws.p("tab.json"),
        "--rule", "l2r",
    ]);
    assert_eq!(r.code, 2);
    assert!(r.stderr.contains("line 1"), "{}", r.stderr);
}

#[test]
fn build_vocab_char_and_whitespace() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("c.txt");
    std::fs::write(&corpus, "ab\nba\n").unwrap();
    let r = duel(&["build-vocab", "--corpus", corpus.to_str().unwrap()]);
    let v: serde_json::Value = serde_json::from_str(&r.stdout).unwrap();
    assert_eq!(v["symbols"], serde_json::json!(["a", "b"]));

    std::fs::write(&corpus, "the cat\na dog\n").unwrap();
    let r = duel(&["build-vocab", "--corpus", corpus.to_str().unwrap(), "--mode", "whitespace"]);
    let v: serde_json::Value = serde_json::from_str(&r.stdout).unwrap();
    assert_eq!(v["symbols"], serde_json::json!(["a", "cat", "dog", "the"]));
}

#[test]
fn sample_is_deterministic_and_on_support() {
    let ws = Workspace::new(CORPUS);
    let run = || {
        duel(&[
            "sample", "--vocab", &ws.p("vocab.json"), "--model", &ws.p("tab.json"), "--rule", "greedy:k=1",
            "--num", "20", "--seed", "5", "--reference", &ws.p("tab.json"),
        ])
    };
    let (a, b) = (run(), run());
    assert_eq!(a.code, 0, "{}", a.stderr);
    assert_eq!(a.stdout, b.stdout);
    let v: serde_json::Value = serde_json::from_str(&a.stdout).unwrap();
    let support: Vec<&str> = CORPUS.lines().filter(|l| !l.is_empty()).collect();
    for s in v["samples"].as_array().unwrap() {
        assert!(support.contains(&s["text"].as_str().unwrap()));
        assert_eq!(s["nfe"], 4);
    }
    assert!(v["generative_perplexity"].as_f64().unwrap() >= 1.0);
}

#[test]
fn oracle_search_json_shape() {
    let ws = Workspace::new(CORPUS);
    let r = duel(&[
        "oracle-search", "--corpus", &ws.p("corpus.txt"), "--vocab", &ws.p("vocab.json"), "--model",
        &ws.p("tab.json"), "--block", "2",
    ]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let v: serde_json::Value = serde_json::from_str(&r.stdout).unwrap();
    let first = &v["sequences"][0];
    assert_eq!(first["blocks"].as_array().unwrap().len(), 2);
    assert_eq!(first["blocks"][1]["index"], 2);
    assert_eq!(first["blocks"][1]["best_perm"].as_array().unwrap().len(), 2);
    // exact denoiser: every order attains the joint, so the oracle equals ARM
    assert!((v["perplexity"].as_f64().unwrap() - empirical_ppl()).abs() < 1e-12);

    let bad = duel(&[
        "oracle-search", "--corpus", &ws.p("corpus.txt"), "--vocab", &ws.p("vocab.json"), "--model",
        &ws.p("tab.json"), "--block", "3",
    ]);
    assert_eq!(bad.code, 2);
}

#[test]
fn compare_rules_csv_columns() {
    let ws = Workspace::new(CORPUS);
    let r = duel(&[
        "compare-rules", "--corpus", &ws.p("corpus.txt"), "--vocab", &ws.p("vocab.json"), "--model",
        &ws.p("tab.json"), "--families", "l2r,thresh", "--k", "1,2,4", "--mu", "0.9", "--seed", "3",
    ]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let mut lines = r.stdout.lines();
    assert_eq!(lines.next().unwrap(), "method,rule,k,mu,nu,nfe_target,nfe_realized,nll,ppl,gap_closed");
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 2 + 3 + 1);
    assert!(rows[0].starts_with("elbo-exhaustive,"));
    assert!(rows[1].starts_with("arm-exact,"));
    assert!(rows[4].starts_with("duel,l2r:k=4,4,,,1.0,1.0,"));
}

#[test]
fn verify_variants() {
    let r = duel(&["verify"]);
    assert_eq!(r.code, 0, "{}{}", r.stdout, r.stderr);
    assert_eq!(r.stdout.lines().count(), 12);
    assert!(r.stdout.lines().all(|l| l.starts_with("PASS")));

    let r = duel(&["verify", "--inject-faulty-rule"]);
    assert_eq!(r.code, 3);
    let progress = r.stdout.lines().find(|l| l.contains("progress")).unwrap();
    assert!(progress.starts_with("FAIL") && progress.contains("empty"), "{progress}");
}

#[test]
fn verify_writes_summary_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("summary.json");
    assert_eq!(duel(&["verify", "--out", out.to_str().unwrap()]).code, 0);
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(Path::new(&out)).unwrap()).unwrap();
    assert_eq!(v["checks"].as_array().unwrap().len(), 12);
    assert_eq!(v["caps"]["max_len"], 6);
}
