//! Deterministic rule-table backend used for offline runs and tests.
//!
//! A reply is a pure function of the rule table and the request (system text,
//! user text and sample index), so identical requests always get identical
//! replies no matter how calls interleave across threads.

use std::time::Duration;

use serde::Deserialize;
use sha2::{Digest, Sha256};

use super::{word_count, AttemptError, ChatBackend, ChatRequest, RawReply};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Matcher {
    Always,
    UserContains(String),
    SystemContains(String),
    UserEquals(String),
    All(Vec<Matcher>),
    Not(Box<Matcher>),
}

impl Matcher {
    pub fn matches(&self, system: &str, user: &str) -> bool {
        match self {
            Matcher::Always => true,
            Matcher::UserContains(s) => user.contains(s.as_str()),
            Matcher::SystemContains(s) => system.contains(s.as_str()),
            Matcher::UserEquals(s) => user == s,
            Matcher::All(ms) => ms.iter().all(|m| m.matches(system, user)),
            Matcher::Not(m) => !m.matches(system, user),
        }
    }

    pub fn all(ms: impl IntoIterator<Item = Matcher>) -> Self {
        Matcher::All(ms.into_iter().collect())
    }
}

/// Reply templates may contain `{digest}` (a stable hex hash of the request)
/// and `{sample}` (the request's sample index).
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ScriptedReply {
    Text(String),
    /// Indexed by the request's sample number; the last entry repeats.
    Sequence(Vec<String>),
    /// Picks one option by hashing the request with `salt`.
    Choice { options: Vec<String>, salt: u64 },
    Refuse(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScriptedRule {
    pub matcher: Matcher,
    pub reply: ScriptedReply,
    pub latency: Option<Duration>,
}

impl ScriptedRule {
    pub fn new(matcher: Matcher, reply: ScriptedReply) -> Self {
        Self {
            matcher,
            reply,
            latency: None,
        }
    }

    pub fn text(matcher: Matcher, reply: impl Into<String>) -> Self {
        Self::new(matcher, ScriptedReply::Text(reply.into()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScriptedEmbedding {
    pub token: String,
    pub vector: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct ScriptedBackend {
    rules: Vec<ScriptedRule>,
    embeddings: Vec<ScriptedEmbedding>,
}

impl ScriptedBackend {
    pub fn new(rules: Vec<ScriptedRule>) -> Self {
        Self {
            rules,
            embeddings: Vec::new(),
        }
    }

    pub fn with_embeddings(mut self, table: Vec<ScriptedEmbedding>) -> Self {
        self.embeddings = table;
        self
    }

    pub fn push_rule(&mut self, rule: ScriptedRule) {
        self.rules.push(rule);
    }

    pub fn rules(&self) -> &[ScriptedRule] {
        &self.rules
    }

    /// First matching rule's reply, or `None` when nothing matched.
    pub fn reply_for(&self, req: &ChatRequest) -> Option<Result<String, AttemptError>> {
        let rule = self
            .rules
            .iter()
            .find(|r| r.matcher.matches(&req.system, &req.user))?;
        if let Some(latency) = rule.latency {
            std::thread::sleep(latency);
        }
        let template = match &rule.reply {
            ScriptedReply::Text(t) => t.as_str(),
            ScriptedReply::Sequence(seq) => {
                match seq.get(req.sample as usize).or_else(|| seq.last()) {
                    Some(t) => t.as_str(),
                    None => return Some(Err(AttemptError::Fatal("empty reply sequence".into()))),
                }
            }
            ScriptedReply::Choice { options, salt } => {
                if options.is_empty() {
                    return Some(Err(AttemptError::Fatal("empty choice list".into())));
                }
                let h = request_hash(req, *salt);
                let idx = (u64::from_le_bytes(h[..8].try_into().unwrap()) % options.len() as u64)
                    as usize;
                options[idx].as_str()
            }
            ScriptedReply::Refuse(reason) => return Some(Err(AttemptError::Refusal(reason.clone()))),
        };
        Some(Ok(expand(template, req)))
    }

    fn embed_one(&self, text: &str, dim: usize) -> Vec<f64> {
        let mut v = vec![0.0; dim];
        for entry in &self.embeddings {
            if text.contains(entry.token.as_str()) {
                for (acc, x) in v.iter_mut().zip(&entry.vector) {
                    *acc += x;
                }
            }
        }
        v
    }
}

fn request_hash(req: &ChatRequest, salt: u64) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(salt.to_le_bytes());
    hasher.update(req.system.as_bytes());
    hasher.update([0u8]);
    hasher.update(req.user.as_bytes());
    hasher.update([0u8]);
    hasher.update(req.sample.to_le_bytes());
    hasher.finalize().into()
}

fn expand(template: &str, req: &ChatRequest) -> String {
    let mut out = template.to_string();
    if out.contains("{digest}") {
        let h = request_hash(req, 0);
        let hex: String = h[..6].iter().map(|b| format!("{b:02x}")).collect();
        out = out.replace("{digest}", &hex);
    }
    if out.contains("{sample}") {
        out = out.replace("{sample}", &req.sample.to_string());
    }
    out
}

impl ChatBackend for ScriptedBackend {
    fn complete(&self, req: &ChatRequest) -> Result<RawReply, AttemptError> {
        match self.reply_for(req) {
            Some(Ok(text)) => Ok(RawReply {
                prompt_tokens: word_count(&req.system) + word_count(&req.user),
                completion_tokens: word_count(&text),
                text,
            }),
            Some(Err(e)) => Err(e),
            None => Err(AttemptError::Fatal(format!(
                "no scripted rule matched request (stage {}, sample {})",
                req.stage, req.sample
            ))),
        }
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, AttemptError> {
        let dim = self
            .embeddings
            .iter()
            .map(|e| e.vector.len())
            .max()
            .ok_or_else(|| AttemptError::Fatal("scripted backend has no embedding table".into()))?;
        Ok(texts.iter().map(|t| self.embed_one(t, dim)).collect())
    }

    fn name(&self) -> &str {
        "scripted"
    }
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum OneOrMany {
    One(String),
    Many(Vec<String>),
}

impl OneOrMany {
    fn into_vec(self) -> Vec<String> {
        match self {
            OneOrMany::One(s) => vec![s],
            OneOrMany::Many(v) => v,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RuleLine {
    when_contains: Option<OneOrMany>,
    when_system_contains: Option<OneOrMany>,
    when_user_equals: Option<String>,
    reply: Option<String>,
    replies: Option<Vec<String>>,
    choices: Option<Vec<String>>,
    #[serde(default)]
    salt: u64,
    refuse: Option<String>,
    latency_ms: Option<u64>,
    embed_token: Option<String>,
    vector: Option<Vec<f64>>,
}

/// Parse a rules file: one JSON object per line, matched in file order.
///
/// Chat rules use `when_contains` (string or list, all must occur in the user
/// prompt), optional `when_system_contains` / `when_user_equals`, and one of
/// `reply`, `replies`, `choices` or `refuse`. Embedding entries use
/// `embed_token` and `vector`.
pub fn parse_rules_jsonl(raw: &str) -> Result<ScriptedBackend, String> {
    let mut backend = ScriptedBackend::default();
    for (idx, line) in raw.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: RuleLine =
            serde_json::from_str(line).map_err(|e| format!("rules line {line_no}: {e}"))?;
        if let Some(token) = parsed.embed_token {
            let vector = parsed
                .vector
                .ok_or_else(|| format!("rules line {line_no}: embed_token without vector"))?;
            backend.embeddings.push(ScriptedEmbedding { token, vector });
            continue;
        }
        let mut conds = Vec::new();
        if let Some(c) = parsed.when_contains {
            conds.extend(c.into_vec().into_iter().map(Matcher::UserContains));
        }
        if let Some(c) = parsed.when_system_contains {
            conds.extend(c.into_vec().into_iter().map(Matcher::SystemContains));
        }
        if let Some(u) = parsed.when_user_equals {
            conds.push(Matcher::UserEquals(u));
        }
        let matcher = match conds.len() {
            0 => Matcher::Always,
            1 => conds.pop().unwrap(),
            _ => Matcher::All(conds),
        };
        let reply = match (parsed.reply, parsed.replies, parsed.choices, parsed.refuse) {
            (Some(r), None, None, None) => ScriptedReply::Text(r),
            (None, Some(rs), None, None) => ScriptedReply::Sequence(rs),
            (None, None, Some(options), None) => ScriptedReply::Choice {
                options,
                salt: parsed.salt,
            },
            (None, None, None, Some(reason)) => ScriptedReply::Refuse(reason),
            _ => {
                return Err(format!(
                    "rules line {line_no}: exactly one of reply, replies, choices, refuse is required"
                ))
            }
        };
        backend.rules.push(ScriptedRule {
            matcher,
            reply,
            latency: parsed.latency_ms.map(Duration::from_millis),
        });
    }
    Ok(backend)
}

fn flatten_matcher(m: &Matcher, line: &mut serde_json::Map<String, serde_json::Value>) -> Result<(), String> {
    let push = |line: &mut serde_json::Map<String, serde_json::Value>, key: &str, v: &str| {
        let entry = line
            .entry(key.to_string())
            .or_insert_with(|| serde_json::Value::Array(Vec::new()));
        if let serde_json::Value::Array(items) = entry {
            items.push(v.into());
        }
    };
    match m {
        Matcher::Always => {}
        Matcher::UserContains(s) => push(line, "when_contains", s),
        Matcher::SystemContains(s) => push(line, "when_system_contains", s),
        Matcher::UserEquals(s) => {
            if line.insert("when_user_equals".into(), s.as_str().into()).is_some() {
                return Err("two user-equality conditions in one rule".into());
            }
        }
        Matcher::All(ms) => {
            for inner in ms {
                flatten_matcher(inner, line)?;
            }
        }
        Matcher::Not(_) => return Err("negated matchers have no rules-file form".into()),
    }
    Ok(())
}

impl ScriptedBackend {
    /// Inverse of [`parse_rules_jsonl`] for rules built from plain conjunctions.
    pub fn to_rules_jsonl(&self) -> Result<String, String> {
        use serde_json::{json, Map, Value};
        let mut out = String::new();
        for rule in &self.rules {
            let mut line = Map::new();
            flatten_matcher(&rule.matcher, &mut line)?;
            match &rule.reply {
                ScriptedReply::Text(t) => {
                    line.insert("reply".into(), t.as_str().into());
                }
                ScriptedReply::Sequence(seq) => {
                    line.insert("replies".into(), json!(seq));
                }
                ScriptedReply::Choice { options, salt } => {
                    line.insert("choices".into(), json!(options));
                    line.insert("salt".into(), json!(salt));
                }
                ScriptedReply::Refuse(reason) => {
                    line.insert("refuse".into(), reason.as_str().into());
                }
            }
            if let Some(latency) = rule.latency {
                line.insert("latency_ms".into(), json!(latency.as_millis() as u64));
            }
            out.push_str(&Value::Object(line).to_string());
            out.push('\n');
        }
        for e in &self.embeddings {
            out.push_str(&json!({"embed_token": e.token, "vector": e.vector}).to_string());
            out.push('\n');
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::provider::{Gateway, Stage};

    #[test]
    fn first_matching_rule_wins() {
        let backend = ScriptedBackend::new(vec![
            ScriptedRule::text(Matcher::UserContains("football".into()), r#"{"answer": true}"#),
            ScriptedRule::text(Matcher::Always, r#"{"answer": false}"#),
        ]);
        let gw = Gateway::scripted(backend);
        let reply = gw
            .chat_complete(&ChatRequest::new(
                "sys",
                "Text: a football match report",
                Stage::Answer,
            ))
            .unwrap();
        assert_eq!(reply.raw_text, r#"{"answer": true}"#);
        let reply = gw
            .chat_complete(&ChatRequest::new("sys", "Text: stocks", Stage::Answer))
            .unwrap();
        assert_eq!(reply.raw_text, r#"{"answer": false}"#);
    }

    #[test]
    fn word_count_tokens_feed_ledger() {
        let backend = ScriptedBackend::new(vec![ScriptedRule::text(
            Matcher::Always,
            "one two three four five",
        )]);
        let gw = Gateway::scripted(backend);
        assert_eq!(gw.ledger_snapshot().total, 0);
        gw.chat_complete(&ChatRequest::new(
            "a b c d",
            "e f g h i j",
            Stage::Question,
        ))
        .unwrap();
        let ledger = gw.ledger_snapshot();
        assert_eq!(ledger.question_stage, 15);
        assert_eq!(ledger.total, 15);
        gw.chat_complete(&ChatRequest::new("a", "b", Stage::Answer))
            .unwrap();
        gw.chat_complete(&ChatRequest::new("a", "b", Stage::Generation))
            .unwrap();
        let ledger = gw.ledger_snapshot();
        assert_eq!(
            ledger.total,
            ledger.question_stage + ledger.answer_stage + ledger.summarize_stage + ledger.generation_stage
        );
        assert_eq!(ledger.answer_stage, 7);
    }

    #[test]
    fn sequence_indexed_by_sample() {
        let backend = ScriptedBackend::new(vec![ScriptedRule::new(
            Matcher::Always,
            ScriptedReply::Sequence(vec!["a".into(), "b".into()]),
        )]);
        let req = ChatRequest::new("s", "u", Stage::Answer);
        assert_eq!(backend.complete(&req.clone().sample(0)).unwrap().text, "a");
        assert_eq!(backend.complete(&req.clone().sample(1)).unwrap().text, "b");
        assert_eq!(backend.complete(&req.sample(7)).unwrap().text, "b");
    }

    #[test]
    fn choice_and_digest_are_pure() {
        let backend = ScriptedBackend::new(vec![
            ScriptedRule::text(Matcher::SystemContains("q".into()), "Q-{digest}-{sample}"),
            ScriptedRule::new(
                Matcher::Always,
                ScriptedReply::Choice {
                    options: vec!["x".into(), "y".into()],
                    salt: 9,
                },
            ),
        ]);
        let req = ChatRequest::new("q", "payload", Stage::Question).sample(2);
        let a = backend.complete(&req).unwrap().text;
        assert_eq!(a, backend.complete(&req).unwrap().text);
        assert!(a.starts_with("Q-") && a.ends_with("-2"));
        let mut seen = std::collections::HashSet::new();
        for i in 0..32 {
            let r = ChatRequest::new("s", format!("u{i}"), Stage::Answer);
            seen.insert(backend.complete(&r).unwrap().text);
        }
        assert_eq!(seen.len(), 2);
    }

    #[test]
    fn refusal_and_no_match() {
        let backend = ScriptedBackend::new(vec![ScriptedRule::new(
            Matcher::UserContains("violent".into()),
            ScriptedReply::Refuse("content_filter".into()),
        )]);
        let err = backend
            .complete(&ChatRequest::new("s", "violent text", Stage::Answer))
            .unwrap_err();
        assert!(matches!(err, AttemptError::Refusal(_)));
        let err = backend
            .complete(&ChatRequest::new("s", "calm", Stage::Answer))
            .unwrap_err();
        assert!(matches!(err, AttemptError::Fatal(_)));
    }

    #[test]
    fn embedding_table_lookup() {
        let backend = ScriptedBackend::default().with_embeddings(vec![
            ScriptedEmbedding {
                token: "sports".into(),
                vector: vec![1.0, 0.0],
            },
            ScriptedEmbedding {
                token: "finance".into(),
                vector: vec![0.0, 1.0],
            },
        ]);
        let gw = Gateway::scripted(backend);
        let v = gw.embed_texts(&["sports".to_string()]).unwrap();
        assert_eq!(v, vec![vec![1.0, 0.0]]);
        let v = gw
            .embed_texts(&["finance news".to_string(), "sports".to_string()])
            .unwrap();
        assert_eq!(v, vec![vec![0.0, 1.0], vec![1.0, 0.0]]);
    }

    #[test]
    fn rules_file_parsing() {
        let raw = r#"
{"when_contains": "football", "reply": "{\"answer\": true}"}
{"when_contains": ["a", "b"], "when_system_contains": "analyst", "replies": ["x", "y"]}
{"when_contains": "bad", "refuse": "content_filter"}
{"choices": ["1", "2"], "salt": 3}
{"embed_token": "sports", "vector": [1, 0]}
"#;
        let backend = parse_rules_jsonl(raw).unwrap();
        assert_eq!(backend.rules().len(), 4);
        assert_eq!(backend.embeddings.len(), 1);
        assert!(matches!(backend.rules()[1].matcher, Matcher::All(ref v) if v.len() == 3));
        assert!(parse_rules_jsonl(r#"{"when_contains": "x"}"#).is_err());
        assert!(parse_rules_jsonl(r#"{"reply": "x", "bogus": 1}"#).is_err());
    }

    #[test]
    fn rules_file_round_trip() {
        let backend = ScriptedBackend::new(vec![
            ScriptedRule::text(
                Matcher::all([
                    Matcher::SystemContains("sys".into()),
                    Matcher::UserContains("a".into()),
                    Matcher::UserContains("b".into()),
                ]),
                "x",
            ),
            ScriptedRule::new(
                Matcher::UserEquals("exact".into()),
                ScriptedReply::Choice {
                    options: vec!["p".into(), "q".into()],
                    salt: 7,
                },
            ),
            ScriptedRule::new(Matcher::Always, ScriptedReply::Refuse("no".into())),
        ])
        .with_embeddings(vec![ScriptedEmbedding {
            token: "t".into(),
            vector: vec![1.0, 2.0],
        }]);
        let text = backend.to_rules_jsonl().unwrap();
        let back = parse_rules_jsonl(&text).unwrap();
        assert_eq!(back.rules().len(), 3);
        assert_eq!(back.rules()[1], backend.rules()[1]);
        assert_eq!(back.rules()[2], backend.rules()[2]);
        assert_eq!(back.to_rules_jsonl().unwrap(), text);
        let neg = ScriptedBackend::new(vec![ScriptedRule::text(Matcher::Not(Box::new(Matcher::Always)), "x")]);
        assert!(neg.to_rules_jsonl().is_err());
    }
}
