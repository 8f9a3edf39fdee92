//! Chat-completion and embedding gateway.
//!
//! A [`Gateway`] wraps one [`ChatBackend`] and adds the behavior every caller
//! needs: retries with exponential backoff for transient failures, a bound on
//! in-flight requests, refusal mapping and a per-stage token ledger.

mod http;
mod retry;
mod scripted;

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use http::{HttpBackend, HttpConfig};
pub use retry::RetryPolicy;
pub use scripted::{
    parse_rules_jsonl, Matcher, ScriptedBackend, ScriptedEmbedding, ScriptedReply, ScriptedRule,
};

/// Which pipeline stage a request is billed to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Question,
    Answer,
    Summarize,
    Generation,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Question => "question",
            Stage::Answer => "answer",
            Stage::Summarize => "summarize",
            Stage::Generation => "generation",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub system: String,
    pub user: String,
    pub temperature: f64,
    pub schema_hint: String,
    pub max_attempts: u32,
    pub stage: Stage,
    /// Index of this draw among repeated draws of the same prompt (vote number,
    /// regeneration number). Live providers ignore it; scripted rules may key on it.
    pub sample: u32,
}

impl ChatRequest {
    pub fn new(system: impl Into<String>, user: impl Into<String>, stage: Stage) -> Self {
        Self {
            system: system.into(),
            user: user.into(),
            temperature: 0.0,
            schema_hint: String::new(),
            max_attempts: RetryPolicy::DEFAULT_MAX_ATTEMPTS,
            stage,
            sample: 0,
        }
    }

    pub fn temperature(mut self, t: f64) -> Self {
        self.temperature = t;
        self
    }

    pub fn sample(mut self, sample: u32) -> Self {
        self.sample = sample;
        self
    }

    pub fn max_attempts(mut self, n: u32) -> Self {
        self.max_attempts = n;
        self
    }

    pub fn schema_hint(mut self, hint: impl Into<String>) -> Self {
        self.schema_hint = hint.into();
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatReply {
    pub raw_text: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub attempts_used: u32,
}

/// What a backend returns for a single successful attempt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawReply {
    pub text: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

/// Failure of a single backend attempt, classified for the retry loop.
#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum AttemptError {
    #[error("refused by provider safety filter: {0}")]
    Refusal(String),
    #[error("transient failure (status {status:?}): {message}")]
    Transient { status: Option<u16>, message: String },
    #[error("fatal provider error: {0}")]
    Fatal(String),
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum ProviderError {
    #[error("refused by provider safety filter: {0}")]
    Refusal(String),
    #[error("gave up after {attempts} attempts: {last}")]
    Exhausted { attempts: u32, last: String },
    #[error("provider configuration error: {0}")]
    Config(String),
    #[error("provider error: {0}")]
    Fatal(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("embedding input is empty")]
    EmptyInput,
    #[error("embedding dimensions differ: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

/// A single chat/embedding endpoint. Implementations make exactly one attempt per call.
pub trait ChatBackend: Send + Sync {
    fn complete(&self, req: &ChatRequest) -> Result<RawReply, AttemptError>;
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, AttemptError>;
    fn name(&self) -> &str;
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenLedger {
    pub question_stage: u64,
    pub answer_stage: u64,
    pub summarize_stage: u64,
    pub generation_stage: u64,
    pub total: u64,
}

impl TokenLedger {
    pub fn from_stages(question: u64, answer: u64, summarize: u64, generation: u64) -> Self {
        Self {
            question_stage: question,
            answer_stage: answer,
            summarize_stage: summarize,
            generation_stage: generation,
            total: question + answer + summarize + generation,
        }
    }

    /// Counters accrued between `earlier` and `self`.
    pub fn since(&self, earlier: &TokenLedger) -> TokenLedger {
        TokenLedger::from_stages(
            self.question_stage - earlier.question_stage,
            self.answer_stage - earlier.answer_stage,
            self.summarize_stage - earlier.summarize_stage,
            self.generation_stage - earlier.generation_stage,
        )
    }

    /// Token table in the Q / A / Total layout, with the auxiliary stages alongside.
    pub fn table(&self) -> String {
        format!(
            "{:>10} {:>10} {:>10} {:>10} {:>10}\n{:>10} {:>10} {:>10} {:>10} {:>10}\n",
            "Q",
            "A",
            "Summary",
            "Generation",
            "Total",
            self.question_stage,
            self.answer_stage,
            self.summarize_stage,
            self.generation_stage,
            self.total
        )
    }
}

#[derive(Debug, Default)]
struct AtomicLedger {
    question: AtomicU64,
    answer: AtomicU64,
    summarize: AtomicU64,
    generation: AtomicU64,
}

impl AtomicLedger {
    fn add(&self, stage: Stage, tokens: u64) {
        let slot = match stage {
            Stage::Question => &self.question,
            Stage::Answer => &self.answer,
            Stage::Summarize => &self.summarize,
            Stage::Generation => &self.generation,
        };
        slot.fetch_add(tokens, Ordering::Relaxed);
    }

    fn snapshot(&self) -> TokenLedger {
        TokenLedger::from_stages(
            self.question.load(Ordering::Relaxed),
            self.answer.load(Ordering::Relaxed),
            self.summarize.load(Ordering::Relaxed),
            self.generation.load(Ordering::Relaxed),
        )
    }
}

/// Counting semaphore bounding concurrent in-flight requests.
#[derive(Debug)]
struct Slots {
    free: Mutex<usize>,
    cv: Condvar,
}

struct SlotGuard<'a>(&'a Slots);

impl Slots {
    fn new(n: usize) -> Self {
        Self {
            free: Mutex::new(n.max(1)),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> SlotGuard<'_> {
        let mut free = self.free.lock().unwrap_or_else(|e| e.into_inner());
        while *free == 0 {
            free = self.cv.wait(free).unwrap_or_else(|e| e.into_inner());
        }
        *free -= 1;
        SlotGuard(self)
    }
}

impl Drop for SlotGuard<'_> {
    fn drop(&mut self) {
        let mut free = self.0.free.lock().unwrap_or_else(|e| e.into_inner());
        *free += 1;
        self.0.cv.notify_one();
    }
}

pub const DEFAULT_MAX_INFLIGHT: usize = 8;

/// Thread-safe front door to a backend. Cheap to share by reference across threads.
pub struct Gateway {
    backend: Arc<dyn ChatBackend>,
    retry: RetryPolicy,
    ledger: AtomicLedger,
    slots: Slots,
}

impl fmt::Debug for Gateway {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Gateway")
            .field("backend", &self.backend.name())
            .field("retry", &self.retry)
            .field("ledger", &self.ledger.snapshot())
            .finish()
    }
}

impl Gateway {
    pub fn new(backend: Arc<dyn ChatBackend>) -> Self {
        Self {
            backend,
            retry: RetryPolicy::default(),
            ledger: AtomicLedger::default(),
            slots: Slots::new(DEFAULT_MAX_INFLIGHT),
        }
    }

    pub fn scripted(backend: ScriptedBackend) -> Self {
        Self::new(Arc::new(backend))
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_max_inflight(mut self, n: usize) -> Self {
        self.slots = Slots::new(n);
        self
    }

    pub fn backend_name(&self) -> &str {
        self.backend.name()
    }

    pub fn chat_complete(&self, req: &ChatRequest) -> Result<ChatReply, ProviderError> {
        if req.system.trim().is_empty() || req.user.trim().is_empty() {
            return Err(ProviderError::InvalidRequest(
                "system and user prompts must be non-empty".into(),
            ));
        }
        if !req.temperature.is_finite() || req.temperature < 0.0 {
            return Err(ProviderError::InvalidRequest(format!(
                "temperature {} is not a finite non-negative number",
                req.temperature
            )));
        }
        let max_attempts = req.max_attempts.max(1);
        let mut attempt = 0;
        loop {
            attempt += 1;
            let outcome = {
                let _slot = self.slots.acquire();
                self.backend.complete(req)
            };
            match outcome {
                Ok(raw) => {
                    self.ledger
                        .add(req.stage, raw.prompt_tokens + raw.completion_tokens);
                    return Ok(ChatReply {
                        raw_text: raw.text,
                        prompt_tokens: raw.prompt_tokens,
                        completion_tokens: raw.completion_tokens,
                        attempts_used: attempt,
                    });
                }
                Err(AttemptError::Refusal(msg)) => return Err(ProviderError::Refusal(msg)),
                Err(AttemptError::Fatal(msg)) => return Err(ProviderError::Fatal(msg)),
                Err(err @ AttemptError::Transient { .. }) => {
                    if attempt >= max_attempts {
                        return Err(ProviderError::Exhausted {
                            attempts: attempt,
                            last: err.to_string(),
                        });
                    }
                    log::debug!("attempt {attempt} failed ({err}); backing off");
                    std::thread::sleep(self.retry.delay(attempt));
                }
            }
        }
    }

    /// One vector per input text, order preserved; all vectors share a dimension.
    pub fn embed_texts(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, ProviderError> {
        if texts.is_empty() {
            return Err(ProviderError::EmptyInput);
        }
        let max_attempts = self.retry.max_attempts.max(1);
        let mut attempt = 0;
        let vectors = loop {
            attempt += 1;
            let outcome = {
                let _slot = self.slots.acquire();
                self.backend.embed(texts)
            };
            match outcome {
                Ok(v) => break v,
                Err(AttemptError::Refusal(msg)) => return Err(ProviderError::Refusal(msg)),
                Err(AttemptError::Fatal(msg)) => return Err(ProviderError::Fatal(msg)),
                Err(err @ AttemptError::Transient { .. }) => {
                    if attempt >= max_attempts {
                        return Err(ProviderError::Exhausted {
                            attempts: attempt,
                            last: err.to_string(),
                        });
                    }
                    std::thread::sleep(self.retry.delay(attempt));
                }
            }
        };
        if vectors.len() != texts.len() {
            return Err(ProviderError::Fatal(format!(
                "provider returned {} embeddings for {} inputs",
                vectors.len(),
                texts.len()
            )));
        }
        let expected = vectors[0].len();
        if let Some(bad) = vectors.iter().find(|v| v.len() != expected) {
            return Err(ProviderError::DimensionMismatch {
                expected,
                got: bad.len(),
            });
        }
        Ok(vectors)
    }

    pub fn ledger_snapshot(&self) -> TokenLedger {
        self.ledger.snapshot()
    }
}

/// Whitespace-delimited word count; the scripted backend's token proxy.
pub fn word_count(text: &str) -> u64 {
    text.split_whitespace().count() as u64
}
