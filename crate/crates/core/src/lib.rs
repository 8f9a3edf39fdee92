//! Recursive thematic partitioning.
//!
//! Builds an interpretable binary tree over a text corpus: every internal node
//! is a model-generated yes/no question, documents are routed by majority vote
//! over repeated answers, and the finished tree is reused for label-alignment
//! metrics, classification and signature-controlled text generation.
//!
//! Module map:
//! - [`corpus`]: loading and sampling documents
//! - [`provider`]: chat/embedding gateway (live HTTP or scripted)
//! - [`prompts`]: prompt rendering and reply parsing
//! - [`partition`]: the tree-building recursion
//! - [`taxonomy`]: tree model, persistence, DOT, signatures, labels
//! - [`metrics`]: entropy and purity
//! - [`classify`]: tree-as-classifier and its evaluation protocol
//! - [`generation`]: thematic generation and its evaluations
//! - [`synthetic`]: planted-theme corpora and rule tables for offline runs

pub mod classify;
pub mod corpus;
pub mod generation;
pub mod metrics;
pub mod partition;
pub mod prompts;
pub mod provider;
pub mod synthetic;
pub mod taxonomy;

pub use corpus::{load_corpus, sample_corpus, Corpus, CorpusFormat, Document, SampleSet};
pub use partition::{build_tree, BuildConfig, BuildError, VoteRecord};
pub use provider::{Gateway, TokenLedger};
pub use taxonomy::{ThematicSignature, ThematicTree, TreeNode};
