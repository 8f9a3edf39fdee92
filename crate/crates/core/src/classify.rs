//! Using a built tree as a decision path over unseen documents, and the
//! repeated-sample evaluation protocol built on top of it.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{sample_corpus, Corpus, CorpusError, Document};
use crate::partition::{answer_by_vote, build_tree, summarize_document, BuildConfig, BuildError, VoteRecord};
use crate::provider::{Gateway, ProviderError};
use crate::taxonomy::{assign_leaf_labels, labels_from_documents, ThematicTree, TreeError};

#[derive(Debug, Error)]
pub enum ClassifyError {
    #[error("document `{doc_id}` is unclassifiable: {reason}")]
    Unclassifiable { doc_id: String, reason: String },
    #[error("leaf `{0}` has no labeled documents")]
    NoLabeledDocs(String),
    #[error("document `{0}` has no label")]
    Unlabeled(String),
    #[error("invalid evaluation settings: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Build(#[from] BuildError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Tree(#[from] TreeError),
}

impl ClassifyError {
    fn from_path_error(doc_id: &str, err: BuildError) -> Self {
        match err {
            BuildError::Provider(ProviderError::Refusal(reason)) => ClassifyError::Unclassifiable {
                doc_id: doc_id.to_string(),
                reason: format!("refusal: {reason}"),
            },
            other => ClassifyError::Build(other),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Route {
    pub leaf_id: String,
    /// One record per internal node on the path, root first.
    pub path_votes: Vec<VoteRecord>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassificationOutcome {
    pub doc_id: String,
    pub leaf_id: String,
    pub predicted_label: String,
    pub path_votes: Vec<VoteRecord>,
}

/// The text the tree should see for `doc`: summarized first when `summarize_eval` is set.
fn prepare(doc: &Document, cfg: &BuildConfig, gw: &Gateway) -> Result<Document, ClassifyError> {
    let mut doc = doc.clone();
    if cfg.summarize_eval && doc.summary.is_none() {
        let summary = summarize_document(&doc, cfg, gw).map_err(|e| ClassifyError::from_path_error(&doc.id, e))?;
        doc.summary = Some(summary);
    }
    Ok(doc)
}

/// Walk from the root, answering each node's question by majority vote.
pub fn route_document(tree: &ThematicTree, doc: &Document, cfg: &BuildConfig, gw: &Gateway) -> Result<Route, ClassifyError> {
    let doc = prepare(doc, cfg, gw)?;
    let mut node = tree.root_node();
    let mut path_votes = Vec::with_capacity(node.depth as usize);
    while let (Some(question), Some(yes), Some(no)) = (&node.question, &node.yes_child, &node.no_child) {
        let record = answer_by_vote(&doc, question, cfg, gw).map_err(|e| ClassifyError::from_path_error(&doc.id, e))?;
        let next = if record.decision { yes } else { no };
        path_votes.push(record);
        node = tree.node(next)?;
    }
    Ok(Route {
        leaf_id: node.node_id.clone(),
        path_votes,
    })
}

/// Route a document and predict its leaf's majority training label.
pub fn classify_document(
    tree: &ThematicTree,
    doc: &Document,
    cfg: &BuildConfig,
    gw: &Gateway,
) -> Result<ClassificationOutcome, ClassifyError> {
    let route = route_document(tree, doc, cfg, gw)?;
    let predicted_label = tree
        .node(&route.leaf_id)?
        .majority_label
        .clone()
        .ok_or_else(|| ClassifyError::NoLabeledDocs(route.leaf_id.clone()))?;
    Ok(ClassificationOutcome {
        doc_id: doc.id.clone(),
        leaf_id: route.leaf_id,
        predicted_label,
        path_votes: route.path_votes,
    })
}

/// Which stages use summaries: none, training (T), evaluation (E) or both (TE).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "plain")]
    Plain,
    T,
    E,
    TE,
}

impl Variant {
    pub fn apply(self, cfg: &BuildConfig) -> BuildConfig {
        let (train, eval) = match self {
            Variant::Plain => (false, false),
            Variant::T => (true, false),
            Variant::E => (false, true),
            Variant::TE => (true, true),
        };
        BuildConfig {
            summarize_train: train,
            summarize_eval: eval,
            ..cfg.clone()
        }
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "plain" => Ok(Variant::Plain),
            "T" | "t" => Ok(Variant::T),
            "E" | "e" => Ok(Variant::E),
            "TE" | "te" => Ok(Variant::TE),
            other => Err(format!("unknown variant `{other}` (expected plain, T, E or TE)")),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Plain => "plain",
            Variant::T => "T",
            Variant::E => "E",
            Variant::TE => "TE",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepetitionFailure {
    pub repetition: u32,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepetitionStats {
    pub repetition: u32,
    pub seed: u64,
    pub classified: u64,
    pub correct: u64,
    pub unclassifiable: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: Variant,
    pub repetitions: u32,
    /// Accuracy of each repetition that completed.
    pub accuracies: Vec<f64>,
    pub mean: f64,
    /// Twice the sample standard deviation of `accuracies`.
    pub two_sigma: f64,
    pub interval: String,
    pub per_repetition: Vec<RepetitionStats>,
    pub failed: Vec<RepetitionFailure>,
}

/// Mixed into the repetition seed when drawing the held-out split.
const TEST_SPLIT_SALT: u64 = 0x5eed_7e57;

pub const INTERVAL_NOTE: &str = "mean ± 2·s, s = sample standard deviation (n−1 denominator)";

/// Mean and two-sigma (sample standard deviation) of a set of accuracies.
pub fn mean_two_sigma(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, 2.0 * var.sqrt())
}

impl EvalReport {
    pub fn from_runs(variant: Variant, repetitions: u32, per_repetition: Vec<RepetitionStats>, failed: Vec<RepetitionFailure>) -> Self {
        let accuracies: Vec<f64> = per_repetition
            .iter()
            .map(|r| r.correct as f64 / r.classified as f64)
            .collect();
        let (mean, two_sigma) = mean_two_sigma(&accuracies);
        Self {
            variant,
            repetitions,
            accuracies,
            mean,
            two_sigma,
            interval: INTERVAL_NOTE.to_string(),
            per_repetition,
            failed,
        }
    }

    pub fn table(&self) -> String {
        let mut out = format!("variant {}  ({})\n", self.variant, self.interval);
        out.push_str("rep  seed        classified  correct  unclassifiable  accuracy\n");
        for r in &self.per_repetition {
            out.push_str(&format!(
                "{:<4} {:<11} {:<11} {:<8} {:<15} {:.4}\n",
                r.repetition,
                r.seed,
                r.classified,
                r.correct,
                r.unclassifiable,
                r.correct as f64 / r.classified as f64
            ));
        }
        for f in &self.failed {
            out.push_str(&format!("{:<4} failed: {}\n", f.repetition, f.reason));
        }
        out.push_str(&format!("accuracy {:.4} ± {:.4}\n", self.mean, self.two_sigma));
        out
    }
}

fn run_repetition(
    corpus: &Corpus,
    cfg: &BuildConfig,
    gw: &Gateway,
) -> Result<(u64, u64, u64), ClassifyError> {
    let sample = sample_corpus(corpus, cfg.sample_size, cfg.seed)?;
    let tree = build_tree(&sample, cfg, gw)?;
    let tree = assign_leaf_labels(&tree, &labels_from_documents(&tree.documents))?;

    let sampled: HashSet<&str> = sample.ids().into_iter().collect();
    let mut pool: Vec<&Document> = corpus
        .documents
        .iter()
        .filter(|d| !sampled.contains(d.id.as_str()))
        .collect();
    if pool.is_empty() {
        return Err(ClassifyError::InvalidConfig(
            "no held-out documents outside the build sample".into(),
        ));
    }
    pool.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed ^ TEST_SPLIT_SALT));
    pool.truncate(cfg.test_size.max(1));

    let outcomes: Vec<Result<ClassificationOutcome, ClassifyError>> = pool
        .par_iter()
        .map(|doc| classify_document(&tree, doc, cfg, gw))
        .collect();
    let (mut classified, mut correct, mut unclassifiable) = (0u64, 0u64, 0u64);
    for (doc, outcome) in pool.iter().zip(outcomes) {
        match outcome {
            Ok(o) => {
                classified += 1;
                if doc.label.as_deref() == Some(o.predicted_label.as_str()) {
                    correct += 1;
                }
            }
            Err(ClassifyError::Unclassifiable { .. }) => unclassifiable += 1,
            Err(e) => return Err(e),
        }
    }
    if classified == 0 {
        return Err(ClassifyError::InvalidConfig(
            "every held-out document was unclassifiable".into(),
        ));
    }
    Ok((classified, correct, unclassifiable))
}

/// Repeat build → label → classify on fresh samples (seed, seed+1, ...). A
/// repetition whose build or labeling fails is recorded in `failed` and skipped.
pub fn evaluate_classifier(
    corpus: &Corpus,
    cfg: &BuildConfig,
    gw: &Gateway,
    repetitions: u32,
    variant: Variant,
) -> Result<EvalReport, ClassifyError> {
    if repetitions < 1 {
        return Err(ClassifyError::InvalidConfig("repetitions must be at least 1".into()));
    }
    if let Some(doc) = corpus.documents.iter().find(|d| d.label.is_none()) {
        return Err(ClassifyError::Unlabeled(doc.id.clone()));
    }
    let base = variant.apply(cfg);
    base.validate()?;
    let mut stats = Vec::new();
    let mut failed = Vec::new();
    for i in 0..repetitions {
        let rep_cfg = BuildConfig {
            seed: base.seed.wrapping_add(u64::from(i)),
            ..base.clone()
        };
        match run_repetition(corpus, &rep_cfg, gw) {
            Ok((classified, correct, unclassifiable)) => stats.push(RepetitionStats {
                repetition: i,
                seed: rep_cfg.seed,
                classified,
                correct,
                unclassifiable,
            }),
            Err(e) => {
                log::warn!("repetition {i} failed: {e}");
                failed.push(RepetitionFailure {
                    repetition: i,
                    reason: e.to_string(),
                });
            }
        }
    }
    Ok(EvalReport::from_runs(variant, repetitions, stats, failed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::provider::{Matcher, ScriptedBackend, ScriptedReply, ScriptedRule};

    fn theme_rules() -> Vec<ScriptedRule> {
        vec![
            ScriptedRule::new(
                Matcher::UserContains("gore".into()),
                ScriptedReply::Refuse("content_filter".into()),
            ),
            ScriptedRule::text(
                Matcher::SystemContains("Summarize".into()),
                r#"{"summary": "short red summary"}"#,
            ),
            ScriptedRule::text(
                Matcher::all([
                    Matcher::SystemContains("propose one yes/no question".into()),
                    Matcher::UserContains("red".into()),
                    Matcher::UserContains("blue".into()),
                ]),
                r#"{"question": "Is it red?"}"#,
            ),
            ScriptedRule::text(
                Matcher::SystemContains("propose one yes/no question".into()),
                r#"{"question": "Is it odd?"}"#,
            ),
            ScriptedRule::text(
                Matcher::all([
                    Matcher::UserContains("Question: Is it red?".into()),
                    Matcher::UserContains("Text: red".into()),
                ]),
                r#"{"answer": true}"#,
            ),
            ScriptedRule::text(
                Matcher::all([
                    Matcher::UserContains("Question: Is it red?".into()),
                    Matcher::UserContains("Text: short red".into()),
                ]),
                r#"{"answer": true}"#,
            ),
            ScriptedRule::text(Matcher::Always, r#"{"answer": false}"#),
        ]
    }

    fn labeled_corpus(n: usize) -> Corpus {
        let docs = (0..n)
            .map(|i| {
                let (color, label) = if i % 2 == 0 { ("red", "R") } else { ("blue", "B") };
                Document::new(format!("d{i:03}"), format!("{color} item {i}")).with_label(label)
            })
            .collect();
        Corpus::from_documents(docs, "mem").unwrap()
    }

    fn gw() -> Gateway {
        Gateway::scripted(ScriptedBackend::new(theme_rules()))
    }

    fn small_cfg() -> BuildConfig {
        BuildConfig {
            sample_size: 20,
            max_depth: 2,
            ..BuildConfig::default()
        }
    }

    #[test]
    fn stats_examples() {
        let (m, s) = mean_two_sigma(&[0.9; 5]);
        assert!((m - 0.9).abs() < 1e-12 && s.abs() < 1e-12);
        let (m, s) = mean_two_sigma(&[1.0, 1.0, 1.0, 1.0, 0.0]);
        assert!((m - 0.8).abs() < 1e-12);
        assert!((s - 2.0 * 0.2f64.sqrt()).abs() < 1e-12);
        assert!((s - 0.894).abs() < 1e-3);
        assert_eq!(mean_two_sigma(&[0.5]), (0.5, 0.0));
    }

    #[test]
    fn routes_by_theme() {
        let corpus = labeled_corpus(20);
        let cfg = small_cfg();
        let g = gw();
        let sample = sample_corpus(&corpus, 20, 0).unwrap();
        let tree = build_tree(&sample, &cfg, &g).unwrap();
        let tree = assign_leaf_labels(&tree, &labels_from_documents(&tree.documents)).unwrap();
        let out = classify_document(&tree, &Document::new("new", "red fresh text"), &cfg, &g).unwrap();
        assert_eq!(out.leaf_id, "ry");
        assert_eq!(out.predicted_label, "R");
        assert_eq!(out.path_votes.len(), 1);
        let out = classify_document(&tree, &Document::new("new2", "blue fresh"), &cfg, &g).unwrap();
        assert_eq!(out.predicted_label, "B");

        let err = classify_document(&tree, &Document::new("bad", "red gore"), &cfg, &g).unwrap_err();
        assert!(matches!(err, ClassifyError::Unclassifiable { .. }));
    }

    #[test]
    fn summarize_eval_feeds_summary_to_answers() {
        let corpus = labeled_corpus(20);
        let g = gw();
        let cfg = small_cfg();
        let sample = sample_corpus(&corpus, 20, 0).unwrap();
        let tree = build_tree(&sample, &cfg, &g).unwrap();
        let tree = assign_leaf_labels(&tree, &labels_from_documents(&tree.documents)).unwrap();
        // the raw text is blue, but the scripted summary says red
        let doc = Document::new("x", "blue text");
        let plain = route_document(&tree, &doc, &cfg, &g).unwrap();
        assert_eq!(plain.leaf_id, "rn");
        let eval_cfg = BuildConfig {
            summarize_eval: true,
            ..cfg
        };
        let summarized = route_document(&tree, &doc, &eval_cfg, &g).unwrap();
        assert_eq!(summarized.leaf_id, "ry");
    }

    #[test]
    fn tie_takes_yes_branch() {
        let corpus = labeled_corpus(10);
        let g = gw();
        let cfg = BuildConfig {
            max_depth: 1,
            ..small_cfg()
        };
        let tree = build_tree(&sample_corpus(&corpus, 10, 0).unwrap(), &cfg, &g).unwrap();
        let tree = assign_leaf_labels(&tree, &labels_from_documents(&tree.documents)).unwrap();
        let t = r#"{"answer": true}"#.to_string();
        let f = r#"{"answer": false}"#.to_string();
        let tie = Gateway::scripted(ScriptedBackend::new(vec![ScriptedRule::new(
            Matcher::Always,
            ScriptedReply::Sequence(vec![t.clone(), t, f.clone(), f]),
        )]));
        let out = classify_document(&tree, &Document::new("x", "blue"), &cfg, &tie).unwrap();
        assert!(out.path_votes[0].tie_broken);
        assert_eq!(out.leaf_id, "ry");
    }

    #[test]
    fn perfect_oracle_evaluation() {
        let corpus = labeled_corpus(60);
        let report = evaluate_classifier(&corpus, &small_cfg(), &gw(), 5, Variant::Plain).unwrap();
        assert_eq!(report.accuracies, vec![1.0; 5]);
        assert_eq!(report.mean, 1.0);
        assert_eq!(report.two_sigma, 0.0);
        assert!(report.failed.is_empty());
        let seeds: Vec<u64> = report.per_repetition.iter().map(|r| r.seed).collect();
        assert_eq!(seeds, [0, 1, 2, 3, 4]);
        assert!(report.per_repetition.iter().all(|r| r.classified == 40));
        assert!(report.table().contains("accuracy 1.0000 ± 0.0000"));
    }

    #[test]
    fn evaluation_requires_labels_and_reps() {
        let mut corpus = labeled_corpus(10);
        assert!(matches!(
            evaluate_classifier(&corpus, &small_cfg(), &gw(), 0, Variant::Plain),
            Err(ClassifyError::InvalidConfig(_))
        ));
        corpus.documents[3].label = None;
        assert!(matches!(
            evaluate_classifier(&corpus, &small_cfg(), &gw(), 1, Variant::Plain),
            Err(ClassifyError::Unlabeled(_))
        ));
    }

    #[test]
    fn repetition_without_holdout_is_flagged() {
        let corpus = labeled_corpus(10);
        let report = evaluate_classifier(&corpus, &small_cfg(), &gw(), 2, Variant::Plain).unwrap();
        assert_eq!(report.failed.len(), 2);
        assert!(report.accuracies.is_empty());
    }

    #[test]
    fn variants_set_flags() {
        let cfg = BuildConfig::default();
        assert!(Variant::TE.apply(&cfg).summarize_train && Variant::TE.apply(&cfg).summarize_eval);
        assert!(!Variant::Plain.apply(&cfg).summarize_train);
        assert_eq!("TE".parse::<Variant>().unwrap(), Variant::TE);
        assert!("X".parse::<Variant>().is_err());
        assert_eq!(serde_json::to_string(&Variant::Plain).unwrap(), "\"plain\"");
    }
}
