//! End-to-end runs of the `rtp` binary against the scripted backend.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rtp_core::corpus::to_jsonl;
use rtp_core::synthetic::{fixture_rules, planted_corpus};
use rtp_core::taxonomy::deserialize_tree;

const FEATURES: u32 = 6;

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

fn corpus_fixture() -> PathBuf {
    fixtures().join("planted.jsonl")
}

fn rules_fixture() -> PathBuf {
    fixtures().join("planted_rules.jsonl")
}

/// Runs `rtp` in `dir` with a clean provider environment.
fn rtp(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rtp"))
        .args(args)
        .current_dir(dir)
        .env_remove("RTP_API_KEY")
        .env_remove("RTP_API_BASE")
        .env_remove("RTP_BACKEND")
        .env_remove("RTP_RULES")
        .env_remove("RTP_SEED")
        .env_remove("RTP_CONFIG")
        .env_remove("RTP_MAX_INFLIGHT")
        .output()
        .expect("binary runs")
}

fn text(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).into_owned()
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        text(&out.stdout),
        text(&out.stderr)
    );
}

fn scripted<'a>(rules: &'a str, rest: &[&'a str]) -> Vec<&'a str> {
    let mut v = vec!["--backend", "scripted", "--rules", rules];
    v.extend_from_slice(rest);
    v
}

/// Builds a tree from the fixtures into `dir/tree.rtp.json`.
fn build(dir: &Path, extra: &[&str]) -> (PathBuf, Output) {
    let tree = dir.join("tree.rtp.json");
    let rules = rules_fixture();
    let corpus = corpus_fixture();
    let mut args = scripted(rules.to_str().unwrap(), &["build", "--input", corpus.to_str().unwrap()]);
    args.extend(["--out", tree.to_str().unwrap(), "--sample-size", "64", "--seed", "11"]);
    args.extend_from_slice(extra);
    let out = rtp(dir, &args);
    (tree, out)
}

#[test]
fn fixtures_are_current() {
    let corpus = to_jsonl(&planted_corpus(64, FEATURES).documents);
    let rules = fixture_rules(FEATURES).to_rules_jsonl().unwrap();
    if std::env::var_os("RTP_BLESS").is_some() {
        std::fs::create_dir_all(fixtures()).unwrap();
        std::fs::write(corpus_fixture(), &corpus).unwrap();
        std::fs::write(rules_fixture(), &rules).unwrap();
    }
    assert_eq!(std::fs::read_to_string(corpus_fixture()).unwrap(), corpus, "rerun with RTP_BLESS=1");
    assert_eq!(std::fs::read_to_string(rules_fixture()).unwrap(), rules, "rerun with RTP_BLESS=1");
}

#[test]
fn build_writes_tree_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let (tree_path, out) = build(dir.path(), &["--max-depth", "3"]);
    assert_ok(&out);
    let tree = deserialize_tree(&std::fs::read(&tree_path).unwrap()).unwrap();
    assert_eq!(tree.root_node().question.as_deref(), Some("Is the text about sports?"));
    assert_eq!(tree.max_depth(), 3);
    assert_eq!(tree.config.seed, 11);

    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("tree.rtp.json.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "build");
    assert_eq!(manifest["seed"], 11);
    assert_eq!(manifest["backend"], "scripted");
    assert_eq!(manifest["config"]["max_depth"], 3);
    assert!(manifest["ledger"]["answer_stage"].as_u64().unwrap() > 0);

    let stderr = text(&out.stderr);
    assert!(stderr.contains("Q") && stderr.contains("Total"), "{stderr}");
}

#[test]
fn identical_runs_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (ta, oa) = build(a.path(), &["--max-depth", "4"]);
    let (tb, ob) = build(b.path(), &["--max-inflight", "2", "--max-depth", "4"]);
    assert_ok(&oa);
    assert_ok(&ob);
    assert_eq!(std::fs::read(ta).unwrap(), std::fs::read(tb).unwrap());
}

#[test]
fn live_backend_without_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = corpus_fixture();
    let out = rtp(
        dir.path(),
        &["--backend", "live", "build", "--input", corpus.to_str().unwrap(), "--out", "t.json"],
    );
    assert_eq!(out.status.code(), Some(3), "{}", text(&out.stderr));
    assert!(text(&out.stderr).contains("RTP_API_KEY"));
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(rtp(dir.path(), &["frobnicate"]).status.code(), Some(2));
    assert_eq!(rtp(dir.path(), &["build", "--input", "x.jsonl"]).status.code(), Some(2));
    let corpus = corpus_fixture();
    let out = rtp(
        dir.path(),
        &["--backend", "scripted", "build", "--input", corpus.to_str().unwrap(), "--out", "t.json"],
    );
    assert_eq!(out.status.code(), Some(2), "{}", text(&out.stderr));
    let (_, out) = build(dir.path(), &["--votes", "0"]);
    assert_eq!(out.status.code(), Some(2), "{}", text(&out.stderr));
}

#[test]
fn export_dot_and_json() {
    let dir = tempfile::tempdir().unwrap();
    let (tree, out) = build(dir.path(), &["--max-depth", "1"]);
    assert_ok(&out);
    let out = rtp(dir.path(), &["export", "--tree", tree.to_str().unwrap(), "--format", "dot"]);
    assert_ok(&out);
    let dot = text(&out.stdout);
    assert!(dot.starts_with("digraph"), "{dot}");
    assert!(dot.contains("Is the text about sports?"));
    assert_eq!(dot.matches("->").count(), 2);

    let out = rtp(dir.path(), &["export", "--tree", tree.to_str().unwrap(), "--format", "json"]);
    assert_ok(&out);
    assert_eq!(out.stdout, std::fs::read(&tree).unwrap());
}

#[test]
fn report_and_classify() {
    let dir = tempfile::tempdir().unwrap();
    let (tree, out) = build(dir.path(), &["--max-depth", "1"]);
    assert_ok(&out);
    let corpus = corpus_fixture();
    let csv = dir.path().join("align.csv");
    let out = rtp(
        dir.path(),
        &["report", "--tree", tree.to_str().unwrap(), "--labels", corpus.to_str().unwrap(), "--out", csv.to_str().unwrap()],
    );
    assert_ok(&out);
    let body = std::fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = body.lines().collect();
    assert_eq!(lines[0], "node_id,depth,n,entropy_bits,purity,majority_label");
    assert_eq!(lines[1], "r,0,64,1.000000,0.500000,finance");
    assert_eq!(lines[2], "ry,1,32,0.000000,1.000000,sports");
    assert!(dir.path().join("align.csv.manifest.json").exists());

    let rules = rules_fixture();
    let preds = dir.path().join("preds.jsonl");
    let out = rtp(
        dir.path(),
        &scripted(
            rules.to_str().unwrap(),
            &[
                "classify",
                "--tree",
                tree.to_str().unwrap(),
                "--input",
                corpus.to_str().unwrap(),
                "--labels",
                corpus.to_str().unwrap(),
                "--out",
                preds.to_str().unwrap(),
            ],
        ),
    );
    assert_ok(&out);
    let rows: Vec<serde_json::Value> = std::fs::read_to_string(&preds)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(rows.len(), 64);
    assert!(rows.iter().all(|r| r["predicted"] == r["label"]));
    assert!(text(&out.stderr).contains("accuracy 1.0000"));
}

#[test]
fn generate_and_evaluate_batches() {
    let dir = tempfile::tempdir().unwrap();
    let (tree, out) = build(dir.path(), &["--max-depth", "2"]);
    assert_ok(&out);
    let rules = rules_fixture();
    let corpus = corpus_fixture();
    let batch = dir.path().join("gen.jsonl");
    let out = rtp(
        dir.path(),
        &scripted(
            rules.to_str().unwrap(),
            &[
                "generate",
                "--tree",
                tree.to_str().unwrap(),
                "--leaf",
                "ryy",
                "--context",
                "a synthetic note",
                "--count",
                "4",
                "--eval",
                "node",
                "--out",
                batch.to_str().unwrap(),
            ],
        ),
    );
    assert_ok(&out);
    let lines: Vec<serde_json::Value> = std::fs::read_to_string(&batch)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 4);
    assert_eq!(lines[0]["strategy"], "ctg");
    assert_eq!(lines[0]["leaf"], "ryy");
    assert!(text(&out.stderr).contains("node accuracy 1.0000"), "{}", text(&out.stderr));
    assert!(dir.path().join("gen.jsonl.manifest.json").exists());

    let out = rtp(
        dir.path(),
        &scripted(
            rules.to_str().unwrap(),
            &[
                "generate",
                "--tree",
                tree.to_str().unwrap(),
                "--strategy",
                "uncontrolled",
                "--context",
                "a synthetic note",
                "--count",
                "2",
                "--eval",
                "centroid",
                "--reference",
                corpus.to_str().unwrap(),
            ],
        ),
    );
    assert_ok(&out);
    assert_eq!(text(&out.stdout).lines().count(), 2);
    assert!(text(&out.stderr).contains("centroid cosine similarity 0.7071"), "{}", text(&out.stderr));

    let out = rtp(
        dir.path(),
        &scripted(
            rules.to_str().unwrap(),
            &["generate", "--tree", tree.to_str().unwrap(), "--strategy", "fewshot", "--context", "c"],
        ),
    );
    assert_eq!(out.status.code(), Some(2), "fewshot without --leaf");
}

#[test]
fn evaluate_reports_mean_and_two_sigma() {
    let dir = tempfile::tempdir().unwrap();
    let rules = rules_fixture();
    let corpus = corpus_fixture();
    let report = dir.path().join("eval.json");
    let out = rtp(
        dir.path(),
        &scripted(
            rules.to_str().unwrap(),
            &[
                "evaluate",
                "--input",
                corpus.to_str().unwrap(),
                "--repetitions",
                "2",
                "--sample-size",
                "32",
                "--test-size",
                "16",
                "--max-depth",
                "1",
                "--out",
                report.to_str().unwrap(),
            ],
        ),
    );
    assert_ok(&out);
    assert!(text(&out.stdout).contains("accuracy 1.0000 ± 0.0000"), "{}", text(&out.stdout));
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(json["accuracies"].as_array().unwrap().len(), 2);
    assert_eq!(json["variant"], "plain");
}

#[test]
fn config_file_layers_under_flags() {
    let dir = tempfile::tempdir().unwrap();
    let rules = rules_fixture();
    std::fs::write(
        dir.path().join("rtp.toml"),
        format!(
            "backend = \"scripted\"\nrules = {:?}\nseed = 5\n[build]\nmax_depth = 1\nsample_size = 64\n",
            rules.to_str().unwrap()
        ),
    )
    .unwrap();
    let corpus = corpus_fixture();
    let out = rtp(dir.path(), &["build", "--input", corpus.to_str().unwrap(), "--out", "a.json"]);
    assert_ok(&out);
    let tree = deserialize_tree(&std::fs::read(dir.path().join("a.json")).unwrap()).unwrap();
    assert_eq!(tree.max_depth(), 1);
    assert_eq!(tree.config.seed, 5);

    let out = Command::new(env!("CARGO_BIN_EXE_rtp"))
        .args(["build", "--input", corpus.to_str().unwrap(), "--out", "b.json", "--max-depth", "2"])
        .current_dir(dir.path())
        .env("RTP_SEED", "8")
        .env_remove("RTP_CONFIG")
        .output()
        .unwrap();
    assert_ok(&out);
    let tree = deserialize_tree(&std::fs::read(dir.path().join("b.json")).unwrap()).unwrap();
    assert_eq!(tree.max_depth(), 2);
    assert_eq!(tree.config.seed, 8);

    std::fs::write(dir.path().join("bad.toml"), "[build]\nmax_dept = 1\n").unwrap();
    let out = rtp(dir.path(), &["--config", "bad.toml", "export", "--tree", "a.json"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out.stderr).contains("max_dept"));
}
