//! Thematic generation from leaf signatures, the two baseline strategies, and
//! the two batch evaluations (node accuracy, embedding-centroid similarity).

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classify::{route_document, ClassifyError};
use crate::corpus::Document;
use crate::partition::BuildConfig;
use crate::prompts::{
    parse_structured_reply, render_fewshot_prompt, render_generation_prompt,
    render_uncontrolled_prompt, ParsedReply, PromptError, PromptPair, ReplySchema,
};
use crate::provider::{ChatRequest, Gateway, ProviderError, Stage};
use crate::taxonomy::{extract_signature, ThematicTree, TreeError};

#[derive(Debug, Error)]
pub enum GenerationError {
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Classify(#[from] ClassifyError),
    #[error("leaf `{0}` has no documents to use as examples")]
    EmptyLeaf(String),
    #[error("batch has no target leaf; supply a reference leaf")]
    MissingTargetLeaf,
    #[error("batch is empty")]
    EmptyBatch,
    #[error("embedding input is empty")]
    EmptyInput,
    #[error("centroid has zero norm; cosine similarity is undefined")]
    ZeroCentroid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Ctg,
    Fewshot,
    Uncontrolled,
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ctg" => Ok(Strategy::Ctg),
            "fewshot" => Ok(Strategy::Fewshot),
            "uncontrolled" => Ok(Strategy::Uncontrolled),
            other => Err(format!("unknown strategy `{other}`")),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Ctg => "ctg",
            Strategy::Fewshot => "fewshot",
            Strategy::Uncontrolled => "uncontrolled",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemFailure {
    pub index: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationBatch {
    pub strategy: Strategy,
    pub target_leaf: Option<String>,
    /// Generated texts in item order; failed items are absent and listed in `failures`.
    pub texts: Vec<String>,
    pub context: String,
    pub requested: usize,
    pub failures: Vec<ItemFailure>,
    /// Few-shot only: the leaf's examples did not fit and were subsampled.
    pub subsampled: bool,
    /// The prompt every item was drawn from.
    pub prompt: PromptPair,
}

impl GenerationBatch {
    pub fn is_partial(&self) -> bool {
        !self.failures.is_empty()
    }

    /// One `{"strategy", "leaf", "text"}` object per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for text in &self.texts {
            let line = serde_json::json!({
                "strategy": self.strategy,
                "leaf": self.target_leaf,
                "text": text,
            });
            out.push_str(&line.to_string());
            out.push('\n');
        }
        out
    }
}

#[allow(clippy::too_many_arguments)]
fn draw_batch(
    prompt: PromptPair,
    strategy: Strategy,
    target_leaf: Option<String>,
    context: &str,
    count: usize,
    subsampled: bool,
    cfg: &BuildConfig,
    gw: &Gateway,
) -> GenerationBatch {
    let base = ChatRequest::new(prompt.system.clone(), prompt.user.clone(), Stage::Generation)
        .temperature(cfg.temperatures.generation)
        .schema_hint(ReplySchema::Material.schema_str())
        .max_attempts(cfg.max_attempts);
    let attempts = cfg.parse_attempts.max(1);
    let results: Vec<Result<String, String>> = (0..count)
        .into_par_iter()
        .map(|i| {
            for attempt in 0..attempts {
                let sample = i as u32 * attempts + attempt;
                let reply = gw
                    .chat_complete(&base.clone().sample(sample))
                    .map_err(|e| e.to_string())?;
                if let Ok(ParsedReply::Material(text)) =
                    parse_structured_reply(&reply.raw_text, ReplySchema::Material)
                {
                    return Ok(text);
                }
            }
            Err(format!("no parseable material after {attempts} attempts"))
        })
        .collect();
    let mut texts = Vec::with_capacity(count);
    let mut failures = Vec::new();
    for (index, r) in results.into_iter().enumerate() {
        match r {
            Ok(t) => texts.push(t),
            Err(reason) => failures.push(ItemFailure { index, reason }),
        }
    }
    GenerationBatch {
        strategy,
        target_leaf,
        texts,
        context: context.to_string(),
        requested: count,
        failures,
        subsampled,
        prompt,
    }
}

/// Controllable generation: the leaf's root-to-leaf questions and answers are the constraints.
pub fn generate_thematic(
    tree: &ThematicTree,
    leaf_id: &str,
    context: &str,
    count: usize,
    cfg: &BuildConfig,
    gw: &Gateway,
) -> Result<GenerationBatch, GenerationError> {
    let signature = extract_signature(tree, leaf_id)?;
    let prompt = render_generation_prompt(context, &signature)?;
    Ok(draw_batch(prompt, Strategy::Ctg, Some(leaf_id.to_string()), context, count, false, cfg, gw))
}

/// Texts of the documents that ended in a leaf, summaries when the tree was built with them.
pub fn leaf_examples<'a>(tree: &'a ThematicTree, leaf_id: &str) -> Result<Vec<&'a str>, GenerationError> {
    let leaf = tree.node(leaf_id)?;
    if !leaf.is_leaf() {
        return Err(TreeError::NotALeaf(leaf_id.to_string()).into());
    }
    Ok(leaf
        .doc_ids
        .iter()
        .filter(|id| !leaf.discarded_ids.contains(id))
        .filter_map(|id| tree.document(id))
        .map(Document::working_text)
        .collect())
}

/// Few-shot baseline: every leaf document as an example, seeded subsample when over budget.
pub fn generate_fewshot(
    tree: &ThematicTree,
    leaf_id: &str,
    context: &str,
    count: usize,
    cfg: &BuildConfig,
    gw: &Gateway,
) -> Result<GenerationBatch, GenerationError> {
    let examples = leaf_examples(tree, leaf_id)?;
    if examples.is_empty() {
        return Err(GenerationError::EmptyLeaf(leaf_id.to_string()));
    }
    let (examples, subsampled) = fit_examples(&examples, context, leaf_id, cfg)?;
    let prompt = render_fewshot_prompt(context, &examples)?;
    Ok(draw_batch(prompt, Strategy::Fewshot, Some(leaf_id.to_string()), context, count, subsampled, cfg, gw))
}

fn fit_examples<'a>(
    examples: &[&'a str],
    context: &str,
    leaf_id: &str,
    cfg: &BuildConfig,
) -> Result<(Vec<&'a str>, bool), GenerationError> {
    let size = |ex: &[&str]| -> Result<usize, GenerationError> {
        let p = render_fewshot_prompt(context, ex)?;
        Ok(p.system.len() + p.user.len())
    };
    if size(examples)? <= cfg.fewshot_char_budget {
        return Ok((examples.to_vec(), false));
    }
    let seed = cfg.seed ^ leaf_id.bytes().fold(0u64, |h, b| h.rotate_left(5) ^ u64::from(b));
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut chosen: Vec<usize> = Vec::new();
    for idx in order {
        chosen.push(idx);
        let picked: Vec<&str> = chosen.iter().map(|&i| examples[i]).collect();
        if chosen.len() > 1 && size(&picked)? > cfg.fewshot_char_budget {
            chosen.pop();
        }
    }
    chosen.sort_unstable();
    Ok((chosen.into_iter().map(|i| examples[i]).collect(), true))
}

/// Baseline with no corpus information: the generation prompt with an empty question list.
pub fn generate_uncontrolled(
    context: &str,
    count: usize,
    cfg: &BuildConfig,
    gw: &Gateway,
) -> Result<GenerationBatch, GenerationError> {
    let prompt = render_uncontrolled_prompt(context)?;
    Ok(draw_batch(prompt, Strategy::Uncontrolled, None, context, count, false, cfg, gw))
}

/// Fraction of generated texts the tree routes back to the target leaf. Texts
/// the provider refuses to answer about count as misses.
pub fn eval_node_accuracy(
    batch: &GenerationBatch,
    tree: &ThematicTree,
    cfg: &BuildConfig,
    gw: &Gateway,
    reference_leaf: Option<&str>,
) -> Result<f64, GenerationError> {
    let target = batch
        .target_leaf
        .as_deref()
        .or(reference_leaf)
        .ok_or(GenerationError::MissingTargetLeaf)?;
    tree.node(target)?;
    if batch.texts.is_empty() {
        return Err(GenerationError::EmptyBatch);
    }
    let hits: Vec<Result<bool, ClassifyError>> = batch
        .texts
        .par_iter()
        .enumerate()
        .map(|(i, text)| {
            let doc = Document::new(format!("generated-{i}"), text.as_str());
            match route_document(tree, &doc, cfg, gw) {
                Ok(route) => Ok(route.leaf_id == target),
                Err(ClassifyError::Unclassifiable { .. }) => Ok(false),
                Err(e) => Err(e),
            }
        })
        .collect();
    let mut correct = 0usize;
    for h in hits {
        if h? {
            correct += 1;
        }
    }
    Ok(correct as f64 / batch.texts.len() as f64)
}

fn truncate_chars(text: &str, max_chars: usize) -> String {
    match text.char_indices().nth(max_chars) {
        Some((byte, _)) => text[..byte].to_string(),
        None => text.to_string(),
    }
}

fn centroid(vectors: &[Vec<f64>]) -> Vec<f64> {
    let dim = vectors[0].len();
    let mut c = vec![0.0; dim];
    for v in vectors {
        for (acc, x) in c.iter_mut().zip(v) {
            *acc += x;
        }
    }
    let n = vectors.len() as f64;
    c.iter_mut().for_each(|x| *x /= n);
    c
}

pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    (na > 0.0 && nb > 0.0).then(|| (dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Cosine similarity between the embedding centroids of two text sets. Each
/// text is cut to its first `cfg.embed_max_chars` characters before embedding.
pub fn eval_centroid_similarity(
    texts: &[String],
    reference: &[String],
    cfg: &BuildConfig,
    gw: &Gateway,
) -> Result<f64, GenerationError> {
    if texts.is_empty() || reference.is_empty() {
        return Err(GenerationError::EmptyInput);
    }
    let cut = |ts: &[String]| -> Vec<String> {
        ts.iter().map(|t| truncate_chars(t, cfg.embed_max_chars)).collect()
    };
    let a = gw.embed_texts(&cut(texts))?;
    let b = gw.embed_texts(&cut(reference))?;
    if a[0].len() != b[0].len() {
        return Err(ProviderError::DimensionMismatch {
            expected: a[0].len(),
            got: b[0].len(),
        }
        .into());
    }
    cosine(&centroid(&a), &centroid(&b)).ok_or(GenerationError::ZeroCentroid)
}
