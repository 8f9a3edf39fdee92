//! Corpus ingestion and the single global sample a tree is built from.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("malformed record at line {line}: {reason}")]
    MalformedRecord { line: usize, reason: String },
    #[error("duplicate document id `{0}`")]
    DuplicateId(String),
    #[error("sample size must be at least 1")]
    InvalidSize,
    #[error("unknown corpus format `{0}` (expected jsonl or csv)")]
    UnknownFormat(String),
    #[error("io error reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// One corpus item. `summary` is only filled in once summarization ran.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summary: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

impl Document {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            text: text.into(),
            summary: None,
            label: None,
        }
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = Some(label.into());
        self
    }

    /// The text shown to the model: the summary when one exists, else the raw text.
    pub fn working_text(&self) -> &str {
        self.summary.as_deref().unwrap_or(&self.text)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorpusFormat {
    Jsonl,
    Csv,
}

impl CorpusFormat {
    /// Guess the format from a file extension; `.csv` is csv, everything else jsonl.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => CorpusFormat::Csv,
            _ => CorpusFormat::Jsonl,
        }
    }
}

impl FromStr for CorpusFormat {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "jsonl" | "json" => Ok(CorpusFormat::Jsonl),
            "csv" => Ok(CorpusFormat::Csv),
            other => Err(CorpusError::UnknownFormat(other.to_string())),
        }
    }
}

impl fmt::Display for CorpusFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CorpusFormat::Jsonl => f.write_str("jsonl"),
            CorpusFormat::Csv => f.write_str("csv"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Corpus {
    pub documents: Vec<Document>,
    pub source: String,
}

impl Corpus {
    /// Build a corpus from in-memory documents, enforcing the same invariants as loading.
    pub fn from_documents(
        documents: Vec<Document>,
        source: impl Into<String>,
    ) -> Result<Self, CorpusError> {
        if documents.is_empty() {
            return Err(CorpusError::EmptyCorpus);
        }
        let mut seen = HashSet::with_capacity(documents.len());
        for doc in &documents {
            if !seen.insert(doc.id.as_str()) {
                return Err(CorpusError::DuplicateId(doc.id.clone()));
            }
        }
        Ok(Self {
            documents,
            source: source.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Document> {
        self.documents.iter().find(|d| d.id == id)
    }
}

pub fn load_corpus(path: &Path, format: CorpusFormat) -> Result<Corpus, CorpusError> {
    let raw = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let source = format!("{} ({format})", path.display());
    match format {
        CorpusFormat::Jsonl => parse_jsonl(&raw, source),
        CorpusFormat::Csv => parse_csv(&raw, source),
    }
}

pub fn parse_jsonl(raw: &str, source: impl Into<String>) -> Result<Corpus, CorpusError> {
    let mut documents = Vec::new();
    for (idx, line) in raw.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value =
            serde_json::from_str(line).map_err(|e| CorpusError::MalformedRecord {
                line: line_no,
                reason: e.to_string(),
            })?;
        let obj = value.as_object().ok_or_else(|| CorpusError::MalformedRecord {
            line: line_no,
            reason: "expected a JSON object".into(),
        })?;
        let field = |name: &str| -> Result<Option<String>, CorpusError> {
            match obj.get(name) {
                None | Some(serde_json::Value::Null) => Ok(None),
                Some(serde_json::Value::String(s)) => Ok(Some(s.clone())),
                Some(serde_json::Value::Number(n)) => Ok(Some(n.to_string())),
                Some(serde_json::Value::Bool(b)) => Ok(Some(b.to_string())),
                Some(_) => Err(CorpusError::MalformedRecord {
                    line: line_no,
                    reason: format!("field `{name}` must be a scalar"),
                }),
            }
        };
        let text = field("text")?;
        documents.push(make_document(line_no, field("id")?, text, field("label")?)?);
    }
    Corpus::from_documents(documents, source)
}

/// One `{"id", "text", "label"}` object per line; inverse of [`parse_jsonl`].
pub fn to_jsonl(documents: &[Document]) -> String {
    let mut out = String::new();
    for d in documents {
        let mut obj = serde_json::Map::new();
        obj.insert("id".into(), d.id.clone().into());
        obj.insert("text".into(), d.text.clone().into());
        if let Some(label) = &d.label {
            obj.insert("label".into(), label.clone().into());
        }
        out.push_str(&serde_json::Value::Object(obj).to_string());
        out.push('\n');
    }
    out
}

pub fn parse_csv(raw: &str, source: impl Into<String>) -> Result<Corpus, CorpusError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(raw.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| CorpusError::MalformedRecord {
            line: 1,
            reason: e.to_string(),
        })?
        .clone();
    let column = |name: &str| headers.iter().position(|h| h.trim() == name);
    let (id_col, text_col, label_col) = (column("id"), column("text"), column("label"));

    let mut documents = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| CorpusError::MalformedRecord {
            line: e.position().map(|p| p.line() as usize).unwrap_or(0),
            reason: e.to_string(),
        })?;
        let line_no = record.position().map(|p| p.line() as usize).unwrap_or(0);
        let get = |col: Option<usize>| {
            col.and_then(|c| record.get(c))
                .filter(|s| !s.is_empty())
                .map(str::to_string)
        };
        documents.push(make_document(
            line_no,
            get(id_col),
            get(text_col),
            get(label_col),
        )?);
    }
    Corpus::from_documents(documents, source)
}

fn make_document(
    line: usize,
    id: Option<String>,
    text: Option<String>,
    label: Option<String>,
) -> Result<Document, CorpusError> {
    let text = match text {
        Some(t) if !t.trim().is_empty() => t,
        Some(_) => {
            return Err(CorpusError::MalformedRecord {
                line,
                reason: "`text` is empty".into(),
            })
        }
        None => {
            return Err(CorpusError::MalformedRecord {
                line,
                reason: "missing `text`".into(),
            })
        }
    };
    Ok(Document {
        id: id.unwrap_or_else(|| format!("row-{line}")),
        text,
        summary: None,
        label,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Discard {
    pub doc_id: String,
    pub reason: String,
}

/// The global random sample the whole recursion operates on.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleSet {
    pub documents: Vec<Document>,
    pub seed: u64,
    pub requested_size: usize,
    /// Set when the corpus was smaller than `requested_size`.
    pub clamped: bool,
    pub discarded: Vec<Discard>,
}

impl SampleSet {
    /// Move a document from the surviving set into the discard list.
    pub fn discard(&mut self, doc_id: &str, reason: impl Into<String>) {
        if let Some(pos) = self.documents.iter().position(|d| d.id == doc_id) {
            self.documents.remove(pos);
            self.discarded.push(Discard {
                doc_id: doc_id.to_string(),
                reason: reason.into(),
            });
        }
    }

    pub fn ids(&self) -> Vec<&str> {
        self.documents.iter().map(|d| d.id.as_str()).collect()
    }
}

/// Uniform sample without replacement: a seeded permutation of the corpus, first `size` taken.
pub fn sample_corpus(corpus: &Corpus, size: usize, seed: u64) -> Result<SampleSet, CorpusError> {
    if size < 1 {
        return Err(CorpusError::InvalidSize);
    }
    let mut order: Vec<usize> = (0..corpus.documents.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let clamped = corpus.documents.len() < size;
    let documents = order
        .into_iter()
        .take(size)
        .map(|i| corpus.documents[i].clone())
        .collect();
    Ok(SampleSet {
        documents,
        seed,
        requested_size: size,
        clamped,
        discarded: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus_of(n: usize) -> Corpus {
        let docs = (0..n)
            .map(|i| Document::new(format!("d{i}"), format!("text {i}")))
            .collect();
        Corpus::from_documents(docs, "mem").unwrap()
    }

    #[test]
    fn jsonl_three_records() {
        let raw = r#"{"id": "a", "text": "first", "label": "x"}
{"id": "b", "text": "second", "label": "y"}
{"id": "c", "text": "third"}
"#;
        let corpus = parse_jsonl(raw, "mem").unwrap();
        assert_eq!(corpus.len(), 3);
        assert_eq!(corpus.documents[0].label.as_deref(), Some("x"));
        assert_eq!(corpus.documents[2].label, None);
        assert_eq!(corpus.documents[1].text, "second");
    }

    #[test]
    fn empty_file_is_empty_corpus() {
        assert!(matches!(parse_jsonl("", "mem"), Err(CorpusError::EmptyCorpus)));
        assert!(matches!(parse_jsonl("\n\n", "mem"), Err(CorpusError::EmptyCorpus)));
        assert!(matches!(parse_csv("id,text,label\n", "mem"), Err(CorpusError::EmptyCorpus)));
    }

    #[test]
    fn missing_text_reports_line() {
        let raw = "{\"id\": \"a\", \"text\": \"ok\"}\n{\"id\": \"b\"}\n";
        match parse_jsonl(raw, "mem") {
            Err(CorpusError::MalformedRecord { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        let csv = "id,text\na,ok\nb,\n";
        match parse_csv(csv, "mem") {
            Err(CorpusError::MalformedRecord { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_ids_rejected() {
        let raw = "{\"id\": \"a\", \"text\": \"x\"}\n{\"id\": \"a\", \"text\": \"y\"}\n";
        assert!(matches!(parse_jsonl(raw, "mem"), Err(CorpusError::DuplicateId(id)) if id == "a"));
    }

    #[test]
    fn missing_id_is_synthesized() {
        let raw = "{\"text\": \"x\"}\n\n{\"text\": \"y\", \"id\": 7}\n";
        let corpus = parse_jsonl(raw, "mem").unwrap();
        assert_eq!(corpus.documents[0].id, "row-1");
        assert_eq!(corpus.documents[1].id, "7");
    }

    #[test]
    fn csv_with_quoted_fields() {
        let raw = "id,text,label\n1,\"hello, world\",pos\n2,\"say \"\"hi\"\"\",neg\n";
        let corpus = parse_csv(raw, "mem").unwrap();
        assert_eq!(corpus.documents[0].text, "hello, world");
        assert_eq!(corpus.documents[1].text, "say \"hi\"");
        assert_eq!(corpus.documents[1].label.as_deref(), Some("neg"));
    }

    #[test]
    fn sample_is_reproducible_and_distinct() {
        let corpus = corpus_of(1000);
        let a = sample_corpus(&corpus, 100, 42).unwrap();
        let b = sample_corpus(&corpus, 100, 42).unwrap();
        assert_eq!(a.documents.len(), 100);
        assert!(!a.clamped);
        let ids: HashSet<_> = a.ids().into_iter().collect();
        assert_eq!(ids.len(), 100);
        assert_eq!(a.ids(), b.ids());
        assert_eq!(
            serde_json::to_vec(&a).unwrap(),
            serde_json::to_vec(&b).unwrap()
        );
        let c = sample_corpus(&corpus, 100, 43).unwrap();
        assert_ne!(a.ids(), c.ids());
    }

    #[test]
    fn sample_clamps_small_corpus() {
        let corpus = corpus_of(50);
        let s = sample_corpus(&corpus, 100, 1).unwrap();
        assert_eq!(s.documents.len(), 50);
        assert!(s.clamped);
    }

    #[test]
    fn sample_zero_is_invalid() {
        assert!(matches!(
            sample_corpus(&corpus_of(3), 0, 1),
            Err(CorpusError::InvalidSize)
        ));
    }

    #[test]
    fn discard_moves_document() {
        let mut s = sample_corpus(&corpus_of(5), 5, 0).unwrap();
        let victim = s.documents[2].id.clone();
        s.discard(&victim, "refused");
        assert_eq!(s.documents.len(), 4);
        assert!(s.documents.iter().all(|d| d.id != victim));
        assert_eq!(s.discarded[0].doc_id, victim);
    }

    proptest::proptest! {
        #[test]
        fn sampled_ids_are_distinct_subset(n in 1usize..200, size in 1usize..250, seed in 0u64..1000) {
            let corpus = corpus_of(n);
            let s = sample_corpus(&corpus, size, seed).unwrap();
            proptest::prop_assert_eq!(s.documents.len(), size.min(n));
            let ids: HashSet<_> = s.ids().into_iter().collect();
            proptest::prop_assert_eq!(ids.len(), s.documents.len());
            proptest::prop_assert!(ids.iter().all(|id| corpus.get(id).is_some()));
        }
    }

    #[test]
    fn jsonl_writer_round_trips() {
        let docs = vec![
            Document::new("a", "line one\nquote \"x\"").with_label("L"),
            Document::new("b", "plain"),
        ];
        let back = parse_jsonl(&to_jsonl(&docs), "mem").unwrap();
        assert_eq!(back.documents, docs);
    }
}
