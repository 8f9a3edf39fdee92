//! The thematic tree: data model, persistence, DOT export, signatures and leaf labels.

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::corpus::{Discard, Document};
use crate::partition::{BuildConfig, VoteRecord};
use crate::provider::TokenLedger;

pub const FORMAT_VERSION: u64 = 1;
pub const ROOT_ID: &str = "r";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TreeError {
    #[error("unknown tree format version {0}")]
    UnknownVersion(u64),
    #[error("corrupt tree payload: {0}")]
    CorruptPayload(String),
    #[error("node `{0}` is not a leaf")]
    NotALeaf(String),
    #[error("unknown node `{0}`")]
    UnknownNode(String),
    #[error("leaf `{0}` has no labeled documents")]
    NoLabeledDocs(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// Internal node.
    None,
    Depth,
    MinLeaf,
    Degenerate,
    /// Expansion stopped because the provider failed during the build.
    Aborted,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeNode {
    pub node_id: String,
    pub depth: u32,
    pub question: Option<String>,
    pub doc_ids: Vec<String>,
    pub yes_child: Option<String>,
    pub no_child: Option<String>,
    /// Documents dropped while answering this node's question.
    #[serde(default)]
    pub discarded_ids: Vec<String>,
    #[serde(default)]
    pub label_histogram: Option<BTreeMap<String, u64>>,
    #[serde(default)]
    pub majority_label: Option<String>,
    pub stop_reason: StopReason,
    /// Question-generation calls spent on this node, including regenerations.
    #[serde(default)]
    pub question_attempts: u32,
}

impl TreeNode {
    pub fn leaf(node_id: impl Into<String>, depth: u32, doc_ids: Vec<String>, reason: StopReason) -> Self {
        Self {
            node_id: node_id.into(),
            depth,
            question: None,
            doc_ids,
            yes_child: None,
            no_child: None,
            discarded_ids: Vec::new(),
            label_histogram: None,
            majority_label: None,
            stop_reason: reason,
            question_attempts: 0,
        }
    }

    pub fn is_leaf(&self) -> bool {
        self.question.is_none()
    }
}

pub fn yes_child_id(parent: &str) -> String {
    format!("{parent}y")
}

pub fn no_child_id(parent: &str) -> String {
    format!("{parent}n")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThematicTree {
    pub format_version: u64,
    pub root: String,
    pub nodes: BTreeMap<String, TreeNode>,
    pub config: BuildConfig,
    pub ledger: TokenLedger,
    pub vote_records: Vec<VoteRecord>,
    pub discarded: Vec<Discard>,
    /// The build sample as the model saw it (summaries included).
    pub documents: Vec<Document>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignatureStep {
    pub question: String,
    pub answer: bool,
}

/// Root-first (question, answer) pairs leading to one leaf.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThematicSignature {
    pub leaf_id: String,
    pub steps: Vec<SignatureStep>,
}

impl ThematicTree {
    pub fn node(&self, id: &str) -> Result<&TreeNode, TreeError> {
        self.nodes
            .get(id)
            .ok_or_else(|| TreeError::UnknownNode(id.to_string()))
    }

    pub fn root_node(&self) -> &TreeNode {
        &self.nodes[&self.root]
    }

    /// Node ids in root-first breadth order, yes-child before no-child.
    pub fn breadth_first(&self) -> Vec<&TreeNode> {
        let mut out = Vec::with_capacity(self.nodes.len());
        let mut queue = VecDeque::from([self.root.as_str()]);
        while let Some(id) = queue.pop_front() {
            let Some(node) = self.nodes.get(id) else { continue };
            out.push(node);
            if let (Some(y), Some(n)) = (&node.yes_child, &node.no_child) {
                queue.push_back(y);
                queue.push_back(n);
            }
        }
        out
    }

    pub fn leaves(&self) -> Vec<&TreeNode> {
        self.breadth_first()
            .into_iter()
            .filter(|n| n.is_leaf())
            .collect()
    }

    pub fn max_depth(&self) -> u32 {
        self.nodes.values().map(|n| n.depth).max().unwrap_or(0)
    }

    pub fn document(&self, id: &str) -> Option<&Document> {
        self.documents.iter().find(|d| d.id == id)
    }

    /// Follow a sequence of answers from the root; stops early at a leaf.
    pub fn replay(&self, answers: &[bool]) -> &TreeNode {
        let mut node = self.root_node();
        for &yes in answers {
            let next = if yes { &node.yes_child } else { &node.no_child };
            match next.as_ref().and_then(|id| self.nodes.get(id)) {
                Some(child) => node = child,
                None => break,
            }
        }
        node
    }

    /// Structural invariants: single root, acyclic, every non-root referenced
    /// exactly once, internal nodes have a question and two children, and
    /// children partition the parent's surviving documents.
    pub fn validate(&self) -> Result<(), TreeError> {
        let corrupt = |msg: String| Err(TreeError::CorruptPayload(msg));
        let Some(root) = self.nodes.get(&self.root) else {
            return corrupt(format!("root `{}` missing", self.root));
        };
        if root.depth != 0 {
            return corrupt("root depth must be 0".into());
        }
        let mut referenced: HashMap<&str, usize> = HashMap::new();
        for (id, node) in &self.nodes {
            if id != &node.node_id {
                return corrupt(format!("node key `{id}` does not match id `{}`", node.node_id));
            }
            match (&node.question, &node.yes_child, &node.no_child) {
                (Some(_), Some(y), Some(n)) => {
                    for child_id in [y, n] {
                        *referenced.entry(child_id.as_str()).or_default() += 1;
                        let Some(child) = self.nodes.get(child_id) else {
                            return corrupt(format!("`{id}` points at missing child `{child_id}`"));
                        };
                        if child.depth != node.depth + 1 {
                            return corrupt(format!("child `{child_id}` has wrong depth"));
                        }
                    }
                    let yes = &self.nodes[y].doc_ids;
                    let no = &self.nodes[n].doc_ids;
                    let mut union: Vec<&String> =
                        yes.iter().chain(no).chain(&node.discarded_ids).collect();
                    let mut parent: Vec<&String> = node.doc_ids.iter().collect();
                    union.sort();
                    parent.sort();
                    if union != parent {
                        return corrupt(format!("children of `{id}` do not partition its documents"));
                    }
                }
                (None, None, None) => {}
                _ => return corrupt(format!("node `{id}` has inconsistent question/children")),
            }
        }
        if referenced.contains_key(self.root.as_str()) {
            return corrupt("root is referenced as a child".into());
        }
        for id in self.nodes.keys() {
            if id != &self.root && referenced.get(id.as_str()) != Some(&1) {
                return corrupt(format!("node `{id}` is not referenced exactly once"));
            }
        }
        if self.breadth_first().len() != self.nodes.len() {
            return corrupt("unreachable nodes present".into());
        }
        Ok(())
    }
}

pub fn serialize_tree(tree: &ThematicTree) -> Vec<u8> {
    let mut bytes = serde_json::to_vec_pretty(tree).expect("tree serialization is infallible");
    bytes.push(b'\n');
    bytes
}

pub fn deserialize_tree(bytes: &[u8]) -> Result<ThematicTree, TreeError> {
    let value: Value =
        serde_json::from_slice(bytes).map_err(|e| TreeError::CorruptPayload(e.to_string()))?;
    let version = value
        .get("format_version")
        .and_then(Value::as_u64)
        .ok_or_else(|| TreeError::CorruptPayload("missing format_version".into()))?;
    if version != FORMAT_VERSION {
        return Err(TreeError::UnknownVersion(version));
    }
    let tree: ThematicTree =
        serde_json::from_value(value).map_err(|e| TreeError::CorruptPayload(e.to_string()))?;
    tree.validate()?;
    Ok(tree)
}

fn dot_escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => {}
            c => out.push(c),
        }
    }
    out
}

fn purity_of(hist: &BTreeMap<String, u64>) -> Option<f64> {
    let total: u64 = hist.values().sum();
    let max = hist.values().copied().max()?;
    (total > 0).then(|| max as f64 / total as f64)
}

pub fn export_dot(tree: &ThematicTree) -> String {
    let mut out = String::from("digraph thematic_tree {\n  node [fontname=\"Helvetica\"];\n");
    let order = tree.breadth_first();
    for node in &order {
        let id = dot_escape(&node.node_id);
        match &node.question {
            Some(q) => {
                let _ = writeln!(out, "  \"{id}\" [shape=box, label=\"{}\"];", dot_escape(q));
            }
            None => {
                let mut label = format!("{} (n={})", node.node_id, node.doc_ids.len());
                if let (Some(major), Some(hist)) = (&node.majority_label, &node.label_histogram) {
                    if let Some(p) = purity_of(hist) {
                        label.push_str(&format!("\n{major} (purity {p:.2})"));
                    }
                }
                let _ = writeln!(out, "  \"{id}\" [shape=ellipse, label=\"{}\"];", dot_escape(&label));
            }
        }
    }
    for node in &order {
        if let (Some(y), Some(n)) = (&node.yes_child, &node.no_child) {
            let id = dot_escape(&node.node_id);
            let _ = writeln!(out, "  \"{id}\" -> \"{}\" [label=\"yes\"];", dot_escape(y));
            let _ = writeln!(out, "  \"{id}\" -> \"{}\" [label=\"no\"];", dot_escape(n));
        }
    }
    out.push_str("}\n");
    out
}

pub fn extract_signature(tree: &ThematicTree, leaf_id: &str) -> Result<ThematicSignature, TreeError> {
    let leaf = tree.node(leaf_id)?;
    if !leaf.is_leaf() {
        return Err(TreeError::NotALeaf(leaf_id.to_string()));
    }
    let mut parent_of: HashMap<&str, (&TreeNode, bool)> = HashMap::new();
    for node in tree.nodes.values() {
        if let (Some(y), Some(n)) = (&node.yes_child, &node.no_child) {
            parent_of.insert(y.as_str(), (node, true));
            parent_of.insert(n.as_str(), (node, false));
        }
    }
    let mut steps = Vec::with_capacity(leaf.depth as usize);
    let mut cursor = leaf_id;
    while let Some((parent, answer)) = parent_of.get(cursor) {
        steps.push(SignatureStep {
            question: parent.question.clone().unwrap_or_default(),
            answer: *answer,
        });
        cursor = &parent.node_id;
    }
    steps.reverse();
    Ok(ThematicSignature {
        leaf_id: leaf_id.to_string(),
        steps,
    })
}

/// Map of document id to label for every labeled document.
pub fn labels_from_documents<'a>(docs: impl IntoIterator<Item = &'a Document>) -> BTreeMap<String, String> {
    docs.into_iter()
        .filter_map(|d| d.label.as_ref().map(|l| (d.id.clone(), l.clone())))
        .collect()
}

/// Majority label of a histogram; ties go to the lexicographically smallest label.
pub fn majority_label(hist: &BTreeMap<String, u64>) -> Option<&str> {
    // BTreeMap iterates in ascending key order, so keeping the first maximum
    // implements the tie-break.
    let mut best: Option<(&str, u64)> = None;
    for (label, &count) in hist {
        if count > 0 && best.is_none_or(|(_, c)| count > c) {
            best = Some((label, count));
        }
    }
    best.map(|(l, _)| l)
}

pub fn assign_leaf_labels(
    tree: &ThematicTree,
    labels: &BTreeMap<String, String>,
) -> Result<ThematicTree, TreeError> {
    let mut labeled = tree.clone();
    for node in labeled.nodes.values_mut() {
        let mut hist = BTreeMap::new();
        for id in &node.doc_ids {
            if let Some(label) = labels.get(id) {
                *hist.entry(label.clone()).or_insert(0u64) += 1;
            }
        }
        node.majority_label = None;
        if node.is_leaf() {
            match majority_label(&hist) {
                Some(l) => node.majority_label = Some(l.to_string()),
                None => return Err(TreeError::NoLabeledDocs(node.node_id.clone())),
            }
        }
        node.label_histogram = Some(hist);
    }
    Ok(labeled)
}

/// Every document id that ever entered the tree, with the leaf it ended in.
pub fn leaf_assignments(tree: &ThematicTree) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    for leaf in tree.leaves() {
        for id in &leaf.doc_ids {
            out.insert(id.clone(), leaf.node_id.clone());
        }
    }
    out
}

/// Ids of documents that appear in more than one leaf; empty for a valid tree.
pub fn duplicated_leaf_members(tree: &ThematicTree) -> Vec<String> {
    let mut seen = HashSet::new();
    let mut dups = Vec::new();
    for leaf in tree.leaves() {
        for id in &leaf.doc_ids {
            if !seen.insert(id.as_str()) {
                dups.push(id.clone());
            }
        }
    }
    dups
}
