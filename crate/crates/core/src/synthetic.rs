//! Planted-theme corpora and rule tables for running the whole pipeline offline.
//!
//! A planted corpus gives document `i` one binary feature per bit of `i`.
//! Feature 0 is the labeled theme (sports or finance); the others are marker
//! tokens. The matching rule table asks about the first feature that still
//! varies inside a node and answers by token lookup, so the built tree is
//! fully predictable.

use crate::corpus::{Corpus, Document};
use crate::prompts::{render_answer_prompt, render_generation_prompt};
use crate::provider::{Matcher, ScriptedBackend, ScriptedEmbedding, ScriptedReply, ScriptedRule};
use crate::taxonomy::{extract_signature, ThematicTree, TreeError};

pub const SPORTS: &str = "sports";
pub const FINANCE: &str = "finance";

/// Marker unique to the question-generation system prompt.
pub const QUESTION_MARKER: &str = "You are an analyst.";
/// Marker unique to the answer system prompt.
pub const ANSWER_MARKER: &str = "You will receive a text and a question about it.";
/// Marker unique to the summarization system prompt.
pub const SUMMARY_MARKER: &str = "Summarize the following text";
/// Marker unique to the generation system prompt.
pub const GENERATION_MARKER: &str = "You are a skillful writer.";

const MAX_FEATURES: u32 = 16;

/// Token present when feature `k` is on (`true`) or off.
pub fn feature_token(k: u32, on: bool) -> String {
    match (k, on) {
        (0, true) => format!("theme-{SPORTS}"),
        (0, false) => format!("theme-{FINANCE}"),
        (k, true) => format!("feat{k:02}-on"),
        (k, false) => format!("feat{k:02}-off"),
    }
}

/// All planted questions have five words so answer prompts have equal length.
pub fn feature_question(k: u32) -> String {
    if k == 0 {
        "Is the text about sports?".to_string()
    } else {
        format!("Does the text show feat{k:02}?")
    }
}

fn json_field(field: &str, value: impl serde::Serialize) -> String {
    serde_json::json!({ field: value }).to_string()
}

/// `n_docs` documents over `features` planted features; every text has the same word count.
pub fn planted_corpus(n_docs: usize, features: u32) -> Corpus {
    assert!((1..=MAX_FEATURES).contains(&features), "features must be in 1..={MAX_FEATURES}");
    let docs = (0..n_docs).map(|i| {
        let mut words = vec![format!("Document d{i:05}")];
        for k in 0..features {
            words.push(feature_token(k, (i >> k) & 1 == 1));
        }
        let label = if i & 1 == 1 { SPORTS } else { FINANCE };
        Document::new(format!("d{i:05}"), words.join(" ")).with_label(label)
    });
    Corpus::from_documents(docs.collect(), "planted").expect("planted ids are unique")
}

/// Question and answer rules for a planted corpus with `features` features.
pub fn planted_rules(features: u32) -> ScriptedBackend {
    let mut rules = Vec::new();
    for k in 0..features {
        rules.push(ScriptedRule::text(
            Matcher::all([
                Matcher::SystemContains(QUESTION_MARKER.into()),
                Matcher::UserContains(feature_token(k, true)),
                Matcher::UserContains(feature_token(k, false)),
            ]),
            json_field("question", feature_question(k)),
        ));
    }
    rules.push(ScriptedRule::text(
        Matcher::SystemContains(QUESTION_MARKER.into()),
        json_field("question", "Is this text number {digest}?"),
    ));
    for k in 0..features {
        let asked = format!("Question: {}", feature_question(k));
        rules.push(ScriptedRule::text(
            Matcher::all([
                Matcher::SystemContains(ANSWER_MARKER.into()),
                Matcher::UserContains(asked),
                Matcher::UserContains(feature_token(k, true)),
            ]),
            json_field("answer", true),
        ));
    }
    rules.push(ScriptedRule::text(
        Matcher::SystemContains(ANSWER_MARKER.into()),
        json_field("answer", false),
    ));
    rules.push(ScriptedRule::text(
        Matcher::SystemContains(SUMMARY_MARKER.into()),
        json_field("summary", "summary {digest}"),
    ));
    ScriptedBackend::new(rules)
}

/// Random questions and coin-flip answers keyed on `salt`; trees vary with the salt.
pub fn random_rules(salt: u64) -> ScriptedBackend {
    ScriptedBackend::new(vec![
        ScriptedRule::text(
            Matcher::SystemContains(QUESTION_MARKER.into()),
            json_field("question", format!("Is this random question {salt}-{{digest}}?")),
        ),
        ScriptedRule::new(
            Matcher::SystemContains(ANSWER_MARKER.into()),
            ScriptedReply::Choice {
                options: vec![json_field("answer", true), json_field("answer", false)],
                salt,
            },
        ),
        ScriptedRule::text(
            Matcher::SystemContains(SUMMARY_MARKER.into()),
            json_field("summary", "summary {digest}"),
        ),
    ])
}

/// Answers every recorded (document, question) pair with its build-time decision.
pub fn replay_rules(tree: &ThematicTree) -> ScriptedBackend {
    let mut rules = Vec::new();
    for record in &tree.vote_records {
        let Some(doc) = tree.document(&record.doc_id) else {
            continue;
        };
        let Ok(prompt) = render_answer_prompt(doc.working_text(), &record.question) else {
            continue;
        };
        rules.push(ScriptedRule::text(
            Matcher::all([
                Matcher::SystemContains(ANSWER_MARKER.into()),
                Matcher::UserEquals(prompt.user),
            ]),
            json_field("answer", record.decision),
        ));
    }
    ScriptedBackend::new(rules)
}

/// First non-discarded member text of a leaf.
fn member_text(tree: &ThematicTree, leaf_id: &str) -> Option<String> {
    let leaf = tree.node(leaf_id).ok()?;
    leaf.doc_ids
        .iter()
        .filter(|id| !leaf.discarded_ids.contains(id))
        .find_map(|id| tree.document(id))
        .map(|d| d.working_text().to_string())
}

/// Generation rules that answer each leaf's CTG prompt with a member text of
/// that leaf, or with `anti`, of a leaf on the other side of the root split.
pub fn generation_rules(tree: &ThematicTree, context: &str, anti: bool) -> Result<Vec<ScriptedRule>, TreeError> {
    let leaves = tree.leaves();
    let mut rules = Vec::new();
    for leaf in &leaves {
        let source = if anti {
            let first_branch = leaf.node_id.chars().nth(1);
            leaves
                .iter()
                .find(|other| other.node_id.chars().nth(1) != first_branch)
                .map(|other| other.node_id.as_str())
        } else {
            Some(leaf.node_id.as_str())
        };
        let Some(text) = source.and_then(|id| member_text(tree, id)) else {
            continue;
        };
        let signature = extract_signature(tree, &leaf.node_id)?;
        let Ok(prompt) = render_generation_prompt(context, &signature) else {
            continue;
        };
        rules.push(ScriptedRule::text(
            Matcher::all([
                Matcher::SystemContains(GENERATION_MARKER.into()),
                Matcher::UserEquals(prompt.user),
            ]),
            json_field("material", text),
        ));
    }
    Ok(rules)
}

/// Theme tokens embed to orthogonal unit vectors.
pub fn planted_embeddings() -> Vec<ScriptedEmbedding> {
    vec![
        ScriptedEmbedding {
            token: feature_token(0, true),
            vector: vec![1.0, 0.0],
        },
        ScriptedEmbedding {
            token: feature_token(0, false),
            vector: vec![0.0, 1.0],
        },
    ]
}

/// Planted rules plus a generation fallback and theme embeddings, for end-to-end CLI runs.
pub fn fixture_rules(features: u32) -> ScriptedBackend {
    let mut backend = planted_rules(features).with_embeddings(planted_embeddings());
    let text: Vec<String> = std::iter::once("Generated g{sample}".to_string())
        .chain((0..features).map(|k| feature_token(k, true)))
        .collect();
    backend.push_rule(ScriptedRule::text(
        Matcher::SystemContains(GENERATION_MARKER.into()),
        json_field("material", text.join(" ")),
    ));
    backend
}
