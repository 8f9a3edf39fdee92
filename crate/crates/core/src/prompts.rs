//! Prompt templates and schema-constrained reply parsing.
//!
//! Templates are filled in a single pass, so substituted content is never
//! rescanned for placeholders.

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::taxonomy::ThematicSignature;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PromptError {
    #[error("max_words must be at least 1")]
    InvalidMaxWords,
    #[error("question generation needs at least two texts, got {0}")]
    TooFewTexts(usize),
    #[error("field `{0}` must be non-empty")]
    EmptyField(&'static str),
    #[error("generation context must be non-empty")]
    EmptyContext,
    #[error("no JSON object with field `{field}` in reply: {snippet}")]
    ParseFailure { field: &'static str, snippet: String },
    #[error("field `{field}` has the wrong type: expected {expected}")]
    WrongType {
        field: &'static str,
        expected: &'static str,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptPair {
    pub system: String,
    pub user: String,
}

const SUMMARIZE_SYSTEM: &str = "Summarize the following text into summary with a maximum of {max_words} words.
The summary should be concise and capture the main points of the text.
Reply solely with the summary, without any additional text or formatting.
Your answer should be a JSON object following the schema: {schema_str}";

const QUESTION_SYSTEM: &str = "You are an analyst.
    You will receive a list of texts formated as a list.
    You will propose one yes/no question whose answer can be determined from each individual text.
    The question must be answerable \"yes\" to half of these texts, and \"no\" to the other half.
    The question must be concise and clear, allowing for a straightforward yes/no answer for each text.
    Do not use any external knowledge or assumptions. Your answer must be determined only from the texts provided.
    You must reply following a json in the schema: {schema_str}";

const ANSWER_SYSTEM: &str = "You will receive a text and a question about it. 
    Answer the question as yes (true) or no (false) based solely on the text. Do NOT
    use any external knowledge or assumptions. Your answer must be determined only
    from the text provided. If the question is not answerable from the text, respond with \"false\".
    Ignore assumptions or implications not explicitly stated in the text.
    Reply with a JSON object following the schema: {schema_str}";

const GENERATION_SYSTEM: &str = "You are a skillful writer.
You are writing under the following context:
{context}
Ensure the material is coherent and relevant to the questions asked.
You will be asked to generate material based on questions and answers
Reply with a json string that containing the generated material in the following schema:
{schema_str}";

const SUMMARIZE_USER: &str = "Text: {text}";
const QUESTION_USER: &str = "Texts: {texts}";
const ANSWER_USER: &str = "Text: {text}\n\nQuestion: {question}";

pub const QA_HEADER: &str = "Questions and answers:";
pub const EXAMPLES_HEADER: &str = "Examples:";
/// Prefix of every question/answer line in a generation prompt.
pub const QA_LINE_PREFIX: &str = "- Q: ";

/// Names of every placeholder any template uses.
pub const PLACEHOLDERS: [&str; 6] = [
    "{schema_str}",
    "{max_words}",
    "{texts}",
    "{text}",
    "{question}",
    "{context}",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ReplySchema {
    Summary,
    Question,
    Answer,
    Material,
}

impl ReplySchema {
    pub fn field(self) -> &'static str {
        match self {
            ReplySchema::Summary => "summary",
            ReplySchema::Question => "question",
            ReplySchema::Answer => "answer",
            ReplySchema::Material => "material",
        }
    }

    fn json_type(self) -> &'static str {
        match self {
            ReplySchema::Answer => "boolean",
            _ => "string",
        }
    }

    /// Compact one-line JSON schema substituted for `{schema_str}`.
    pub fn schema_str(self) -> String {
        format!(
            r#"{{"type": "object", "properties": {{"{f}": {{"type": "{t}"}}}}, "required": ["{f}"]}}"#,
            f = self.field(),
            t = self.json_type()
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParsedReply {
    Summary(String),
    Question(String),
    Answer(bool),
    Material(String),
}

impl ParsedReply {
    pub fn schema(&self) -> ReplySchema {
        match self {
            ParsedReply::Summary(_) => ReplySchema::Summary,
            ParsedReply::Question(_) => ReplySchema::Question,
            ParsedReply::Answer(_) => ReplySchema::Answer,
            ParsedReply::Material(_) => ReplySchema::Material,
        }
    }

    /// The reply a well-behaved model would send for this value.
    pub fn to_json(&self) -> String {
        let value = match self {
            ParsedReply::Answer(b) => Value::Bool(*b),
            ParsedReply::Summary(s) | ParsedReply::Question(s) | ParsedReply::Material(s) => {
                Value::String(s.clone())
            }
        };
        let mut obj = serde_json::Map::new();
        obj.insert(self.schema().field().to_string(), value);
        Value::Object(obj).to_string()
    }

    pub fn into_text(self) -> Option<String> {
        match self {
            ParsedReply::Summary(s) | ParsedReply::Question(s) | ParsedReply::Material(s) => Some(s),
            ParsedReply::Answer(_) => None,
        }
    }
}

/// Single-pass `{name}` substitution. Unknown braces are copied through verbatim.
fn fill(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len() + 64);
    let mut rest = template;
    while let Some(start) = rest.find('{') {
        out.push_str(&rest[..start]);
        let tail = &rest[start..];
        let hit = vars.iter().find(|(name, _)| {
            tail.len() > name.len() + 1
                && tail[1..].starts_with(name)
                && tail.as_bytes()[name.len() + 1] == b'}'
        });
        match hit {
            Some((name, value)) => {
                out.push_str(value);
                rest = &tail[name.len() + 2..];
            }
            None => {
                out.push('{');
                rest = &tail[1..];
            }
        }
    }
    out.push_str(rest);
    out
}

pub fn render_summarize_prompt(text: &str, max_words: u32) -> Result<PromptPair, PromptError> {
    if max_words < 1 {
        return Err(PromptError::InvalidMaxWords);
    }
    if text.trim().is_empty() {
        return Err(PromptError::EmptyField("text"));
    }
    let schema = ReplySchema::Summary.schema_str();
    let max_words = max_words.to_string();
    Ok(PromptPair {
        system: fill(
            SUMMARIZE_SYSTEM,
            &[("max_words", &max_words), ("schema_str", &schema)],
        ),
        user: fill(SUMMARIZE_USER, &[("text", text)]),
    })
}

/// Render texts as a Python-style list: `['a', 'b']`, with backslash escapes.
pub fn python_list<S: AsRef<str>>(texts: &[S]) -> String {
    let mut out = String::from("[");
    for (i, t) in texts.iter().enumerate() {
        if i > 0 {
            out.push_str(", ");
        }
        out.push('\'');
        for c in t.as_ref().chars() {
            match c {
                '\\' => out.push_str("\\\\"),
                '\'' => out.push_str("\\'"),
                '\n' => out.push_str("\\n"),
                '\r' => out.push_str("\\r"),
                '\t' => out.push_str("\\t"),
                c => out.push(c),
            }
        }
        out.push('\'');
    }
    out.push(']');
    out
}

pub fn render_question_prompt<S: AsRef<str>>(texts: &[S]) -> Result<PromptPair, PromptError> {
    if texts.len() < 2 {
        return Err(PromptError::TooFewTexts(texts.len()));
    }
    let schema = ReplySchema::Question.schema_str();
    let list = python_list(texts);
    Ok(PromptPair {
        system: fill(QUESTION_SYSTEM, &[("schema_str", &schema)]),
        user: fill(QUESTION_USER, &[("texts", &list)]),
    })
}

pub fn render_answer_prompt(text: &str, question: &str) -> Result<PromptPair, PromptError> {
    if text.trim().is_empty() {
        return Err(PromptError::EmptyField("text"));
    }
    if question.trim().is_empty() {
        return Err(PromptError::EmptyField("question"));
    }
    let schema = ReplySchema::Answer.schema_str();
    Ok(PromptPair {
        system: fill(ANSWER_SYSTEM, &[("schema_str", &schema)]),
        user: fill(ANSWER_USER, &[("text", text), ("question", question)]),
    })
}

fn generation_system(context: &str) -> Result<String, PromptError> {
    if context.trim().is_empty() {
        return Err(PromptError::EmptyContext);
    }
    let schema = ReplySchema::Material.schema_str();
    Ok(fill(
        GENERATION_SYSTEM,
        &[("context", context), ("schema_str", &schema)],
    ))
}

/// One line per signature step, root first.
pub fn qa_line(question: &str, answer: bool) -> String {
    format!(
        "{QA_LINE_PREFIX}{} A: {}",
        question.replace('\n', " "),
        if answer { "yes" } else { "no" }
    )
}

pub fn render_generation_prompt(
    context: &str,
    signature: &ThematicSignature,
) -> Result<PromptPair, PromptError> {
    let system = generation_system(context)?;
    let mut user = String::from(QA_HEADER);
    for step in &signature.steps {
        user.push('\n');
        user.push_str(&qa_line(&step.question, step.answer));
    }
    Ok(PromptPair { system, user })
}

/// Same system prompt as CTG, with the question/answer block replaced by numbered examples.
pub fn render_fewshot_prompt<S: AsRef<str>>(
    context: &str,
    examples: &[S],
) -> Result<PromptPair, PromptError> {
    let system = generation_system(context)?;
    let mut user = String::from(EXAMPLES_HEADER);
    for (i, ex) in examples.iter().enumerate() {
        user.push_str(&format!("\n\n{}. {}", i + 1, ex.as_ref()));
    }
    Ok(PromptPair { system, user })
}

/// Generic generation prompt carrying no corpus information.
pub fn render_uncontrolled_prompt(context: &str) -> Result<PromptPair, PromptError> {
    render_generation_prompt(context, &ThematicSignature::default())
}

/// Drop surrounding code fences, keeping the fenced body.
fn strip_fences(raw: &str) -> &str {
    let trimmed = raw.trim();
    let Some(open) = trimmed.find("```") else {
        return trimmed;
    };
    let after = &trimmed[open + 3..];
    // skip an info string such as `json`
    let body_start = after.find('\n').map(|i| i + 1).unwrap_or(0);
    let body = &after[body_start..];
    match body.find("```") {
        Some(close) => body[..close].trim(),
        None => body.trim(),
    }
}

/// Byte ranges of balanced `{...}` spans, respecting JSON string literals.
fn object_candidates(text: &str) -> Vec<&str> {
    let bytes = text.as_bytes();
    let mut found = Vec::new();
    for (start, _) in text.match_indices('{') {
        let mut depth = 0usize;
        let mut in_string = false;
        let mut escaped = false;
        for (offset, &b) in bytes[start..].iter().enumerate() {
            if in_string {
                match b {
                    _ if escaped => escaped = false,
                    b'\\' => escaped = true,
                    b'"' => in_string = false,
                    _ => {}
                }
                continue;
            }
            match b {
                b'"' => in_string = true,
                b'{' => depth += 1,
                b'}' => {
                    depth -= 1;
                    if depth == 0 {
                        found.push(&text[start..start + offset + 1]);
                        break;
                    }
                }
                _ => {}
            }
        }
    }
    found
}

/// Tolerant extraction: strip fences and prose, then require the schema's field with the right type.
pub fn parse_structured_reply(raw: &str, schema: ReplySchema) -> Result<ParsedReply, PromptError> {
    let field = schema.field();
    let body = strip_fences(raw);
    let mut objects: Vec<serde_json::Map<String, Value>> = Vec::new();
    if let Ok(Value::Object(map)) = serde_json::from_str::<Value>(body) {
        objects.push(map);
    } else {
        for candidate in object_candidates(body) {
            if let Ok(Value::Object(map)) = serde_json::from_str::<Value>(candidate) {
                objects.push(map);
            }
        }
    }
    let value = objects
        .into_iter()
        .find_map(|mut m| m.remove(field))
        .ok_or_else(|| PromptError::ParseFailure {
            field,
            snippet: raw.chars().take(120).collect(),
        })?;
    let wrong = PromptError::WrongType {
        field,
        expected: schema.json_type(),
    };
    match schema {
        ReplySchema::Answer => value.as_bool().map(ParsedReply::Answer).ok_or(wrong),
        _ => {
            let s = value.as_str().ok_or(wrong)?.trim().to_string();
            if s.is_empty() {
                return Err(PromptError::ParseFailure {
                    field,
                    snippet: raw.chars().take(120).collect(),
                });
            }
            Ok(match schema {
                ReplySchema::Summary => ParsedReply::Summary(s),
                ReplySchema::Question => ParsedReply::Question(s),
                _ => ParsedReply::Material(s),
            })
        }
    }
}
