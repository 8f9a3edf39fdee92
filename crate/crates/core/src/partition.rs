//! Recursive tree construction: summarize, ask, vote, split, recurse.

use std::collections::{BTreeMap, VecDeque};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Discard, Document, SampleSet};
use crate::prompts::{
    parse_structured_reply, render_answer_prompt, render_question_prompt, render_summarize_prompt,
    ParsedReply, PromptError, ReplySchema,
};
use crate::provider::{ChatRequest, Gateway, ProviderError, Stage};
use crate::taxonomy::{
    no_child_id, yes_child_id, StopReason, ThematicTree, TreeNode, FORMAT_VERSION, ROOT_ID,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Temperatures {
    pub question: f64,
    pub answer: f64,
    pub summary: f64,
    pub generation: f64,
}

impl Default for Temperatures {
    fn default() -> Self {
        Self {
            question: 0.7,
            answer: 0.7,
            summary: 0.3,
            generation: 0.9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BuildConfig {
    /// S: documents in the global sample.
    pub sample_size: usize,
    /// D: maximum depth; the root is depth 0.
    pub max_depth: u32,
    /// K: nodes with fewer documents become leaves.
    pub min_leaf: usize,
    /// N: answer draws per (document, question).
    pub votes: u32,
    pub summarize_train: bool,
    pub summarize_eval: bool,
    pub max_words: u32,
    pub seed: u64,
    pub temperatures: Temperatures,
    /// Regenerations allowed when a question sends every document one way.
    pub question_retries: u32,
    /// Tries per call when the reply does not parse.
    pub parse_attempts: u32,
    /// Network attempts per call (transient failures).
    pub max_attempts: u32,
    /// Character budget for a question-generation prompt.
    pub question_char_budget: usize,
    /// Character budget for a few-shot generation prompt.
    pub fewshot_char_budget: usize,
    /// Held-out documents classified per evaluation repetition.
    pub test_size: usize,
    /// Leading characters of each text sent for embedding.
    pub embed_max_chars: usize,
}

impl Default for BuildConfig {
    fn default() -> Self {
        Self {
            sample_size: 100,
            max_depth: 5,
            min_leaf: 3,
            votes: 4,
            summarize_train: false,
            summarize_eval: false,
            max_words: 50,
            seed: 0,
            temperatures: Temperatures::default(),
            question_retries: 3,
            parse_attempts: 3,
            max_attempts: 5,
            question_char_budget: 400_000,
            fewshot_char_budget: 200_000,
            test_size: 200,
            embed_max_chars: 2_000,
        }
    }
}

impl BuildConfig {
    pub fn validate(&self) -> Result<(), BuildError> {
        let bad = |what: &str| Err(BuildError::InvalidConfig(format!("{what} must be at least 1")));
        if self.sample_size < 1 {
            return bad("sample_size");
        }
        if self.max_depth < 1 {
            return bad("max_depth");
        }
        if self.min_leaf < 1 {
            return bad("min_leaf");
        }
        if self.votes < 1 {
            return bad("votes");
        }
        if self.max_words < 1 {
            return bad("max_words");
        }
        if self.parse_attempts < 1 {
            return bad("parse_attempts");
        }
        let t = &self.temperatures;
        if [t.question, t.answer, t.summary, t.generation]
            .iter()
            .any(|x| !x.is_finite() || *x < 0.0)
        {
            return Err(BuildError::InvalidConfig(
                "temperatures must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum BuildError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("sample size must be at least 1")]
    InvalidSize,
    #[error("the build sample is empty")]
    EmptySample,
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error("no parseable {schema} reply after {attempts} attempts")]
    Unparseable { schema: &'static str, attempts: u32 },
    #[error("build stopped early: {source}")]
    Partial {
        tree: Box<ThematicTree>,
        #[source]
        source: Box<BuildError>,
    },
}

impl BuildError {
    pub fn is_refusal(&self) -> bool {
        matches!(self, BuildError::Provider(ProviderError::Refusal(_)))
    }
}

/// The N raw answers for one (document, question) pair and their majority.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoteRecord {
    pub doc_id: String,
    pub question: String,
    pub votes: Vec<bool>,
    pub decision: bool,
    pub tie_broken: bool,
}

/// Majority decision over votes; an exact tie resolves to yes.
/// Returns `(decision, tie_broken)`.
pub fn majority(votes: &[bool]) -> (bool, bool) {
    let yes = votes.iter().filter(|v| **v).count();
    let no = votes.len() - yes;
    (yes >= no, yes == no)
}

/// ⌊log2 S⌋ + 1: depth of a balanced tree over S documents.
pub fn balanced_depth_bound(sample_size: u64) -> Result<u32, BuildError> {
    if sample_size < 1 {
        return Err(BuildError::InvalidSize);
    }
    Ok(u64::BITS - sample_size.leading_zeros())
}

fn request(prompt: crate::prompts::PromptPair, stage: Stage, temperature: f64, schema: ReplySchema, cfg: &BuildConfig) -> ChatRequest {
    ChatRequest::new(prompt.system, prompt.user, stage)
        .temperature(temperature)
        .schema_hint(schema.schema_str())
        .max_attempts(cfg.max_attempts)
}

/// Summarize one document; parse failures are retried `parse_attempts` times.
pub fn summarize_document(doc: &Document, cfg: &BuildConfig, gw: &Gateway) -> Result<String, BuildError> {
    let prompt = render_summarize_prompt(&doc.text, cfg.max_words)?;
    let base = request(prompt, Stage::Summarize, cfg.temperatures.summary, ReplySchema::Summary, cfg);
    for attempt in 0..cfg.parse_attempts {
        let reply = gw.chat_complete(&base.clone().sample(attempt))?;
        if let Ok(ParsedReply::Summary(s)) = parse_structured_reply(&reply.raw_text, ReplySchema::Summary) {
            return Ok(s);
        }
    }
    Err(BuildError::Unparseable {
        schema: "summary",
        attempts: cfg.parse_attempts,
    })
}

/// Attach summaries to every sampled document that lacks one. Refused, exhausted
/// or unparseable documents move to the discard list; other provider errors abort.
pub fn summarize_sample(sample: &SampleSet, cfg: &BuildConfig, gw: &Gateway) -> Result<SampleSet, BuildError> {
    if !cfg.summarize_train {
        return Ok(sample.clone());
    }
    let outcomes: Vec<Result<Option<String>, BuildError>> = sample
        .documents
        .par_iter()
        .map(|doc| {
            if doc.summary.is_some() {
                return Ok(None);
            }
            summarize_document(doc, cfg, gw).map(Some)
        })
        .collect();
    let mut out = sample.clone();
    let mut discards = Vec::new();
    for (doc, outcome) in out.documents.iter_mut().zip(outcomes) {
        match outcome {
            Ok(Some(summary)) => doc.summary = Some(summary),
            Ok(None) => {}
            Err(e) => match discard_reason(&e) {
                Some(reason) => discards.push((doc.id.clone(), reason)),
                None => return Err(e),
            },
        }
    }
    for (id, reason) in discards {
        out.discard(&id, reason);
    }
    Ok(out)
}

fn discard_reason(err: &BuildError) -> Option<String> {
    match err {
        BuildError::Provider(ProviderError::Refusal(m)) => Some(format!("refusal: {m}")),
        BuildError::Provider(e @ ProviderError::Exhausted { .. }) => Some(format!("exhausted: {e}")),
        BuildError::Unparseable { .. } => Some(err.to_string()),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GeneratedQuestion {
    pub text: String,
    /// Calls spent, including unparseable replies.
    pub attempts: u32,
    /// True when the node's texts did not fit the budget and were subsampled.
    pub subsampled: bool,
}

fn stable_hash(parts: impl IntoIterator<Item = impl AsRef<[u8]>>) -> u64 {
    // FNV-1a
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for part in parts {
        for b in part.as_ref() {
            h ^= u64::from(*b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        h ^= 0xff;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Texts to show the question generator: all of them when the prompt fits the
/// budget, else a seeded random subset (at least two) that does.
fn question_texts<'a>(docs: &[&'a Document], cfg: &BuildConfig) -> (Vec<&'a str>, bool) {
    let texts: Vec<&str> = docs.iter().map(|d| d.working_text()).collect();
    let fits = |ts: &[&str]| {
        render_question_prompt(ts)
            .map(|p| p.system.len() + p.user.len() <= cfg.question_char_budget)
            .unwrap_or(true)
    };
    if fits(&texts) {
        return (texts, false);
    }
    let seed = cfg.seed ^ stable_hash(docs.iter().map(|d| d.id.as_bytes()));
    let mut order: Vec<usize> = (0..texts.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut chosen: Vec<usize> = Vec::new();
    for idx in order {
        chosen.push(idx);
        let picked: Vec<&str> = chosen.iter().map(|&i| texts[i]).collect();
        if chosen.len() > 2 && !fits(&picked) {
            chosen.pop();
        }
    }
    chosen.sort_unstable();
    (chosen.into_iter().map(|i| texts[i]).collect(), true)
}

/// Ask for one splitting question over the node's documents. `round` numbers
/// regenerations so each draws a distinct sample.
pub fn generate_question(
    docs: &[&Document],
    cfg: &BuildConfig,
    gw: &Gateway,
    round: u32,
) -> Result<GeneratedQuestion, BuildError> {
    if docs.len() < 2 {
        return Err(PromptError::TooFewTexts(docs.len()).into());
    }
    let (texts, subsampled) = question_texts(docs, cfg);
    let prompt = render_question_prompt(&texts)?;
    let base = request(prompt, Stage::Question, cfg.temperatures.question, ReplySchema::Question, cfg);
    for attempt in 0..cfg.parse_attempts {
        let sample = round * cfg.parse_attempts + attempt;
        let reply = gw.chat_complete(&base.clone().sample(sample))?;
        match parse_structured_reply(&reply.raw_text, ReplySchema::Question) {
            Ok(ParsedReply::Question(q)) => {
                return Ok(GeneratedQuestion {
                    text: q,
                    attempts: attempt + 1,
                    subsampled,
                })
            }
            Ok(_) | Err(_) => log::debug!("unparseable question reply: {}", reply.raw_text),
        }
    }
    Err(BuildError::Unparseable {
        schema: "question",
        attempts: cfg.parse_attempts,
    })
}

fn one_vote(base: &ChatRequest, vote: u32, cfg: &BuildConfig, gw: &Gateway) -> Result<bool, ProviderError> {
    for attempt in 0..cfg.parse_attempts {
        let sample = vote + cfg.votes * attempt;
        let reply = gw.chat_complete(&base.clone().sample(sample))?;
        if let Ok(ParsedReply::Answer(b)) = parse_structured_reply(&reply.raw_text, ReplySchema::Answer) {
            return Ok(b);
        }
    }
    // An answer that never parses falls back to "false", as the answer prompt instructs.
    Ok(false)
}

/// N answer draws for one document, decided by majority (ties to yes). A refusal
/// on any draw is returned as an error so the caller can discard the document.
pub fn answer_by_vote(doc: &Document, question: &str, cfg: &BuildConfig, gw: &Gateway) -> Result<VoteRecord, BuildError> {
    let prompt = render_answer_prompt(doc.working_text(), question)?;
    let base = request(prompt, Stage::Answer, cfg.temperatures.answer, ReplySchema::Answer, cfg);
    let results: Vec<Result<bool, ProviderError>> = (0..cfg.votes.max(1))
        .into_par_iter()
        .map(|i| one_vote(&base, i, cfg, gw))
        .collect();
    if let Some(Err(refusal)) = results
        .iter()
        .find(|r| matches!(r, Err(ProviderError::Refusal(_))))
    {
        return Err(refusal.clone().into());
    }
    let votes = results.into_iter().collect::<Result<Vec<bool>, _>>()?;
    let (decision, tie_broken) = majority(&votes);
    Ok(VoteRecord {
        doc_id: doc.id.clone(),
        question: question.to_string(),
        votes,
        decision,
        tie_broken,
    })
}

struct PendingNode {
    id: String,
    depth: u32,
    doc_ids: Vec<String>,
}

enum NodeOutcome {
    Leaf(TreeNode),
    Split {
        node: TreeNode,
        yes: Vec<String>,
        no: Vec<String>,
        records: Vec<VoteRecord>,
    },
}

struct Builder<'a> {
    cfg: &'a BuildConfig,
    gw: &'a Gateway,
    docs: BTreeMap<String, Document>,
    discarded: Vec<Discard>,
}

impl Builder<'_> {
    fn expand(&mut self, pending: &PendingNode) -> Result<NodeOutcome, BuildError> {
        let cfg = self.cfg;
        if pending.depth >= cfg.max_depth {
            return Ok(NodeOutcome::Leaf(TreeNode::leaf(
                &pending.id,
                pending.depth,
                pending.doc_ids.clone(),
                StopReason::Depth,
            )));
        }
        if pending.doc_ids.len() < cfg.min_leaf.max(2) {
            return Ok(NodeOutcome::Leaf(TreeNode::leaf(
                &pending.id,
                pending.depth,
                pending.doc_ids.clone(),
                StopReason::MinLeaf,
            )));
        }

        let mut node = TreeNode::leaf(&pending.id, pending.depth, pending.doc_ids.clone(), StopReason::Degenerate);
        let mut alive: Vec<String> = pending.doc_ids.clone();
        for round in 0..=cfg.question_retries {
            if alive.len() < 2 {
                break;
            }
            let members: Vec<&Document> = alive.iter().map(|id| &self.docs[id]).collect();
            let question = generate_question(&members, cfg, self.gw, round)?;
            node.question_attempts += question.attempts;
            let outcomes: Vec<Result<VoteRecord, BuildError>> = members
                .par_iter()
                .map(|doc| answer_by_vote(doc, &question.text, cfg, self.gw))
                .collect();

            let mut records = Vec::with_capacity(outcomes.len());
            let mut refused = Vec::new();
            for (id, outcome) in alive.iter().zip(outcomes) {
                match outcome {
                    Ok(r) => records.push(r),
                    Err(BuildError::Provider(ProviderError::Refusal(reason))) => {
                        refused.push((id.clone(), format!("refusal: {reason}")))
                    }
                    Err(e) => return Err(e),
                }
            }
            for (id, reason) in refused {
                alive.retain(|a| a != &id);
                node.discarded_ids.push(id.clone());
                self.discarded.push(Discard { doc_id: id, reason });
            }

            let (yes, no): (Vec<&VoteRecord>, Vec<&VoteRecord>) = records.iter().partition(|r| r.decision);
            if !yes.is_empty() && !no.is_empty() {
                let yes = yes.iter().map(|r| r.doc_id.clone()).collect();
                let no = no.iter().map(|r| r.doc_id.clone()).collect();
                node.question = Some(question.text);
                node.yes_child = Some(yes_child_id(&pending.id));
                node.no_child = Some(no_child_id(&pending.id));
                node.stop_reason = StopReason::None;
                return Ok(NodeOutcome::Split { node, yes, no, records });
            }
            log::debug!("node {} round {round}: degenerate question {:?}", pending.id, question.text);
        }
        Ok(NodeOutcome::Leaf(node))
    }
}

/// Build the thematic tree over a sample. Provider failures mid-build return
/// [`BuildError::Partial`] carrying every node completed so far.
pub fn build_tree(sample: &SampleSet, cfg: &BuildConfig, gw: &Gateway) -> Result<ThematicTree, BuildError> {
    cfg.validate()?;
    if sample.documents.is_empty() {
        return Err(BuildError::EmptySample);
    }
    let ledger_before = gw.ledger_snapshot();
    let sample = summarize_sample(sample, cfg, gw)?;
    if sample.documents.is_empty() {
        return Err(BuildError::EmptySample);
    }

    let mut builder = Builder {
        cfg,
        gw,
        docs: sample.documents.iter().map(|d| (d.id.clone(), d.clone())).collect(),
        discarded: sample.discarded.clone(),
    };
    let mut nodes = BTreeMap::new();
    let mut vote_records = Vec::new();
    let mut queue = VecDeque::from([PendingNode {
        id: ROOT_ID.to_string(),
        depth: 0,
        doc_ids: sample.documents.iter().map(|d| d.id.clone()).collect(),
    }]);
    let mut failure = None;

    while let Some(pending) = queue.pop_front() {
        if failure.is_some() {
            nodes.insert(
                pending.id.clone(),
                TreeNode::leaf(&pending.id, pending.depth, pending.doc_ids, StopReason::Aborted),
            );
            continue;
        }
        match builder.expand(&pending) {
            Ok(NodeOutcome::Leaf(node)) => {
                nodes.insert(node.node_id.clone(), node);
            }
            Ok(NodeOutcome::Split { node, yes, no, records }) => {
                queue.push_back(PendingNode {
                    id: yes_child_id(&node.node_id),
                    depth: node.depth + 1,
                    doc_ids: yes,
                });
                queue.push_back(PendingNode {
                    id: no_child_id(&node.node_id),
                    depth: node.depth + 1,
                    doc_ids: no,
                });
                vote_records.extend(records);
                nodes.insert(node.node_id.clone(), node);
            }
            Err(e) => {
                log::warn!("build aborted at node {}: {e}", pending.id);
                nodes.insert(
                    pending.id.clone(),
                    TreeNode::leaf(&pending.id, pending.depth, pending.doc_ids, StopReason::Aborted),
                );
                failure = Some(e);
            }
        }
    }

    let tree = ThematicTree {
        format_version: FORMAT_VERSION,
        root: ROOT_ID.to_string(),
        nodes,
        config: cfg.clone(),
        ledger: gw.ledger_snapshot().since(&ledger_before),
        vote_records,
        discarded: builder.discarded,
        documents: sample.documents,
    };
    match failure {
        None => Ok(tree),
        Some(source) => Err(BuildError::Partial {
            tree: Box::new(tree),
            source: Box::new(source),
        }),
    }
}
