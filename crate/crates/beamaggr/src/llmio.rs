//! LLM backend abstraction: a live OpenAI-compatible completions client, a
//! deterministic record/replay fixture store, a scripted backend for tests
//! and fixture authoring, and token accounting.

use std::collections::BTreeMap;
use std::fs;
use std::ops::AddAssign;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Default completion budget for reasoning calls.
pub const REASONING_MAX_TOKENS: u32 = 512;
/// Default completion budget for knowledge-generation calls.
pub const KNOWLEDGE_MAX_TOKENS: u32 = 256;

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("backend error after {attempts} attempt(s): {message}")]
    Backend { message: String, attempts: u32 },
    #[error("no fixture for key {key}")]
    FixtureMiss { key: String },
    #[error("fixture io: {0}")]
    Io(#[from] std::io::Error),
    #[error("fixture parse ({path}): {message}")]
    Parse { path: String, message: String },
}

/// A completion request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prompt {
    pub text: String,
    pub temperature: f64,
    pub n: usize,
    pub max_tokens: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop: Option<Vec<String>>,
}

impl Prompt {
    pub fn new(text: impl Into<String>, temperature: f64, n: usize, max_tokens: u32) -> Self {
        assert!(n >= 1, "a prompt requests at least one sample");
        Self {
            text: text.into(),
            temperature,
            n,
            max_tokens,
            stop: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinishReason {
    Stop,
    Length,
    ContentFilter,
}

/// Prompt/completion token counts. Additive under accumulation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenUsage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

impl TokenUsage {
    pub fn new(prompt_tokens: u64, completion_tokens: u64) -> Self {
        Self {
            prompt_tokens,
            completion_tokens,
        }
    }

    pub fn total(&self) -> u64 {
        self.prompt_tokens + self.completion_tokens
    }
}

impl AddAssign for TokenUsage {
    fn add_assign(&mut self, rhs: Self) {
        self.prompt_tokens += rhs.prompt_tokens;
        self.completion_tokens += rhs.completion_tokens;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    pub finish_reason: FinishReason,
    pub usage: TokenUsage,
}

impl Completion {
    pub fn is_filtered(&self) -> bool {
        self.finish_reason == FinishReason::ContentFilter
    }
}

/// Deterministic approximate token count: one token per four characters,
/// rounded up. Backend-reported usage always takes precedence over this.
pub fn count_tokens(text: &str) -> u64 {
    (text.chars().count() as u64).div_ceil(4)
}

/// Approximate usage for one sample of a call. The prompt is charged to the
/// first sample only so that per-call totals stay exact under accumulation.
pub fn approximate_usage(
    prompt_text: &str,
    completion_text: &str,
    sample_index: usize,
) -> TokenUsage {
    TokenUsage {
        prompt_tokens: if sample_index == 0 {
            count_tokens(prompt_text)
        } else {
            0
        },
        completion_tokens: count_tokens(completion_text),
    }
}

fn canonical_prompt_text(text: &str) -> String {
    text.replace("\r\n", "\n").replace('\r', "\n")
}

/// Stable digest of a prompt's text alone.
pub fn prompt_digest(text: &str) -> String {
    hex::encode(Sha256::digest(canonical_prompt_text(text).as_bytes()))
}

/// Fixture lookup key: digest of the prompt text (LF line endings), the
/// temperature rounded to two decimals, and the sample index.
pub fn fixture_key(prompt_text: &str, temperature: f64, sample_index: usize) -> String {
    let mut hasher = Sha256::new();
    hasher.update(canonical_prompt_text(prompt_text).as_bytes());
    hasher.update([0]);
    hasher.update(format!("{temperature:.2}").as_bytes());
    hasher.update([0]);
    hasher.update(sample_index.to_string().as_bytes());
    hex::encode(hasher.finalize())
}

/// One recorded completion, stored as `<key>.json` in a fixture directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureRecord {
    pub key: String,
    pub prompt_digest: String,
    pub text: String,
    pub finish_reason: FinishReason,
    pub usage: TokenUsage,
}

/// An LLM capable of drawing `n` samples for a prompt. Implementations must
/// tolerate concurrent calls.
pub trait LlmBackend: Send + Sync {
    fn complete_n(&self, prompt: &Prompt) -> Result<Vec<Completion>, LlmError>;
}

/// Replays recorded fixtures; any unknown `(prompt, temperature, index)`
/// triple is an error naming the missing key.
pub struct ReplayBackend {
    dir: PathBuf,
}

impl ReplayBackend {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }
}

impl LlmBackend for ReplayBackend {
    fn complete_n(&self, prompt: &Prompt) -> Result<Vec<Completion>, LlmError> {
        (0..prompt.n)
            .map(|i| {
                let key = fixture_key(&prompt.text, prompt.temperature, i);
                let path = self.dir.join(format!("{key}.json"));
                let raw = fs::read_to_string(&path)
                    .map_err(|_| LlmError::FixtureMiss { key: key.clone() })?;
                let record: FixtureRecord =
                    serde_json::from_str(&raw).map_err(|e| LlmError::Parse {
                        path: path.display().to_string(),
                        message: e.to_string(),
                    })?;
                Ok(Completion {
                    text: record.text,
                    finish_reason: record.finish_reason,
                    usage: record.usage,
                })
            })
            .collect()
    }
}

/// Wraps another backend and persists every completion it returns as a
/// fixture file, one per key, last writer wins.
pub struct RecordingBackend<B> {
    inner: B,
    dir: PathBuf,
}

impl<B: LlmBackend> RecordingBackend<B> {
    pub fn new(inner: B, dir: impl Into<PathBuf>) -> Self {
        Self {
            inner,
            dir: dir.into(),
        }
    }
}

impl<B: LlmBackend> LlmBackend for RecordingBackend<B> {
    fn complete_n(&self, prompt: &Prompt) -> Result<Vec<Completion>, LlmError> {
        let completions = self.inner.complete_n(prompt)?;
        fs::create_dir_all(&self.dir)?;
        for (i, completion) in completions.iter().enumerate() {
            let key = fixture_key(&prompt.text, prompt.temperature, i);
            let record = FixtureRecord {
                key: key.clone(),
                prompt_digest: prompt_digest(&prompt.text),
                text: completion.text.clone(),
                finish_reason: completion.finish_reason,
                usage: completion.usage,
            };
            let path = self.dir.join(format!("{key}.json"));
            fs::write(
                &path,
                serde_json::to_string_pretty(&record).expect("record serializes"),
            )?;
        }
        Ok(completions)
    }
}

/// Text responses a [`ScriptedBackend`] replies with. Usage is filled in by
/// the backend using the approximate counter unless overridden.
#[derive(Debug, Clone)]
pub struct ScriptedCompletion {
    pub text: String,
    pub finish_reason: FinishReason,
    pub usage: Option<TokenUsage>,
}

impl ScriptedCompletion {
    pub fn stop(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            finish_reason: FinishReason::Stop,
            usage: None,
        }
    }

    pub fn filtered() -> Self {
        Self {
            text: String::new(),
            finish_reason: FinishReason::ContentFilter,
            usage: None,
        }
    }
}

type Responder = dyn Fn(&Prompt, usize) -> Option<ScriptedCompletion> + Send + Sync;

/// A backend driven by a response function, used for tests and for authoring
/// fixture sets. Returning `None` for a sample is a scripting error.
pub struct ScriptedBackend {
    responder: Box<Responder>,
}

impl ScriptedBackend {
    pub fn new<F>(responder: F) -> Self
    where
        F: Fn(&Prompt, usize) -> Option<ScriptedCompletion> + Send + Sync + 'static,
    {
        Self {
            responder: Box::new(responder),
        }
    }
}

impl LlmBackend for ScriptedBackend {
    fn complete_n(&self, prompt: &Prompt) -> Result<Vec<Completion>, LlmError> {
        (0..prompt.n)
            .map(|i| {
                let scripted = (self.responder)(prompt, i).ok_or_else(|| LlmError::Backend {
                    message: format!(
                        "no scripted completion for sample {i} of prompt starting {:?}",
                        prompt.text.lines().last().unwrap_or("")
                    ),
                    attempts: 1,
                })?;
                let usage = scripted
                    .usage
                    .unwrap_or_else(|| approximate_usage(&prompt.text, &scripted.text, i));
                Ok(Completion {
                    text: scripted.text,
                    finish_reason: scripted.finish_reason,
                    usage,
                })
            })
            .collect()
    }
}

/// Tag for one accumulation into the usage ledger: the node being reasoned
/// and the knowledge source (strategy label, `knowledge_gen`, `decompose`).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LedgerTag {
    pub node: String,
    pub source: String,
}

impl LedgerTag {
    pub fn new(node: impl Into<String>, source: impl Into<String>) -> Self {
        Self {
            node: node.into(),
            source: source.into(),
        }
    }
}

/// Serialized view of a ledger: per-tag entries plus grand totals.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct UsageSnapshot {
    pub entries: BTreeMap<String, TokenUsage>,
    pub total: TokenUsage,
}

/// Thread-safe accumulation point for token usage. Adds are atomic with
/// respect to each other; totals always equal the sum over tags.
#[derive(Debug, Default)]
pub struct UsageLedger {
    inner: Mutex<BTreeMap<LedgerTag, TokenUsage>>,
}

impl UsageLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&self, tag: LedgerTag, usage: TokenUsage) {
        let mut inner = self.inner.lock().expect("ledger lock");
        *inner.entry(tag).or_default() += usage;
    }

    pub fn total(&self) -> TokenUsage {
        let inner = self.inner.lock().expect("ledger lock");
        let mut total = TokenUsage::default();
        for usage in inner.values() {
            total += *usage;
        }
        total
    }

    /// Totals grouped by knowledge source.
    pub fn by_source(&self) -> BTreeMap<String, TokenUsage> {
        let inner = self.inner.lock().expect("ledger lock");
        let mut out: BTreeMap<String, TokenUsage> = BTreeMap::new();
        for (tag, usage) in inner.iter() {
            *out.entry(tag.source.clone()).or_default() += *usage;
        }
        out
    }

    /// Totals grouped by node.
    pub fn by_node(&self) -> BTreeMap<String, TokenUsage> {
        let inner = self.inner.lock().expect("ledger lock");
        let mut out: BTreeMap<String, TokenUsage> = BTreeMap::new();
        for (tag, usage) in inner.iter() {
            *out.entry(tag.node.clone()).or_default() += *usage;
        }
        out
    }

    pub fn snapshot(&self) -> UsageSnapshot {
        let inner = self.inner.lock().expect("ledger lock");
        let mut entries = BTreeMap::new();
        let mut total = TokenUsage::default();
        for (tag, usage) in inner.iter() {
            entries.insert(format!("{}/{}", tag.node, tag.source), *usage);
            total += *usage;
        }
        UsageSnapshot { entries, total }
    }
}

/// Settings for the live OpenAI-compatible completions endpoint.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LiveLlmSettings {
    /// Full completions URL, e.g. `https://api.openai.com/v1/completions`.
    pub endpoint: String,
    pub model: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key: Option<String>,
    /// Extra sampling parameters passed through verbatim (top_p and friends).
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, serde_json::Value>,
}

impl LiveLlmSettings {
    /// Resolve the key from the settings or the `LLM_API_KEY` environment
    /// variable; the endpoint falls back to `LLM_ENDPOINT`.
    pub fn resolved(mut self) -> Self {
        if self.api_key.is_none() {
            self.api_key = std::env::var("LLM_API_KEY").ok();
        }
        if self.endpoint.is_empty() {
            if let Ok(endpoint) = std::env::var("LLM_ENDPOINT") {
                self.endpoint = endpoint;
            }
        }
        self
    }
}

#[cfg(feature = "live")]
pub use live::LiveBackend;

#[cfg(feature = "live")]
mod live {
    use super::*;
    use std::time::Duration;

    const MAX_ATTEMPTS: u32 = 3;
    const INITIAL_BACKOFF: Duration = Duration::from_secs(1);

    /// Blocking client for an OpenAI-compatible `/completions` endpoint with
    /// retry on transport errors and HTTP 429/5xx. Content-filtered finishes
    /// are successes and are never retried.
    pub struct LiveBackend {
        settings: LiveLlmSettings,
        client: reqwest::blocking::Client,
    }

    #[derive(Deserialize)]
    struct WireChoice {
        #[serde(default)]
        text: String,
        #[serde(default)]
        finish_reason: Option<String>,
    }

    #[derive(Deserialize)]
    struct WireUsage {
        #[serde(default)]
        prompt_tokens: u64,
        #[serde(default)]
        completion_tokens: u64,
    }

    #[derive(Deserialize)]
    struct WireResponse {
        choices: Vec<WireChoice>,
        #[serde(default)]
        usage: Option<WireUsage>,
    }

    impl LiveBackend {
        pub fn new(settings: LiveLlmSettings) -> Self {
            Self {
                settings,
                client: reqwest::blocking::Client::new(),
            }
        }

        fn request_body(&self, prompt: &Prompt) -> serde_json::Value {
            let mut body = serde_json::json!({
                "model": self.settings.model,
                "prompt": prompt.text,
                "n": prompt.n,
                "temperature": prompt.temperature,
                "max_tokens": prompt.max_tokens,
            });
            if let Some(stop) = &prompt.stop {
                body["stop"] = serde_json::json!(stop);
            }
            for (key, value) in &self.settings.extra {
                body[key] = value.clone();
            }
            body
        }
    }

    impl LlmBackend for LiveBackend {
        fn complete_n(&self, prompt: &Prompt) -> Result<Vec<Completion>, LlmError> {
            let body = self.request_body(prompt);
            let mut last_error = String::new();
            for attempt in 1..=MAX_ATTEMPTS {
                let mut request = self
                    .client
                    .post(&self.settings.endpoint)
                    .json(&body)
                    .header("content-type", "application/json");
                if let Some(key) = &self.settings.api_key {
                    request = request.bearer_auth(key);
                }
                match request.send() {
                    Ok(response) => {
                        let status = response.status();
                        if status.is_success() {
                            let wire: WireResponse =
                                response.json().map_err(|e| LlmError::Backend {
                                    message: format!("invalid response body: {e}"),
                                    attempts: attempt,
                                })?;
                            return Ok(assemble(prompt, wire));
                        }
                        last_error = format!("http status {status}");
                        let retryable = status.as_u16() == 429 || status.is_server_error();
                        if !retryable {
                            return Err(LlmError::Backend {
                                message: last_error,
                                attempts: attempt,
                            });
                        }
                    }
                    Err(e) => last_error = format!("transport: {e}"),
                }
                if attempt < MAX_ATTEMPTS {
                    std::thread::sleep(INITIAL_BACKOFF * 2u32.pow(attempt - 1));
                }
            }
            Err(LlmError::Backend {
                message: last_error,
                attempts: MAX_ATTEMPTS,
            })
        }
    }

    fn assemble(prompt: &Prompt, wire: WireResponse) -> Vec<Completion> {
        let reported = wire.usage;
        wire.choices
            .into_iter()
            .enumerate()
            .map(|(i, choice)| {
                let finish_reason = match choice.finish_reason.as_deref() {
                    Some("length") => FinishReason::Length,
                    Some("content_filter") => FinishReason::ContentFilter,
                    _ => FinishReason::Stop,
                };
                // The wire reports one usage for the whole call; charging it
                // to the first choice keeps ledger totals exact.
                let usage = match (&reported, i) {
                    (Some(u), 0) => TokenUsage::new(u.prompt_tokens, u.completion_tokens),
                    (Some(_), _) => TokenUsage::default(),
                    (None, _) => approximate_usage(&prompt.text, &choice.text, i),
                };
                Completion {
                    text: choice.text,
                    finish_reason,
                    usage,
                }
            })
            .collect()
    }
}

/// Open a backend for the given mode rooted at a fixture directory.
pub fn replay_backend(dir: &Path) -> ReplayBackend {
    ReplayBackend::new(dir)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn echo_backend() -> ScriptedBackend {
        ScriptedBackend::new(|prompt, i| {
            Some(ScriptedCompletion::stop(format!(
                "sample {i} for {} chars",
                prompt.text.len()
            )))
        })
    }

    #[test]
    fn count_tokens_rounds_up() {
        assert_eq!(count_tokens(""), 0);
        assert_eq!(count_tokens("12345678"), 2);
        assert_eq!(count_tokens("123456789"), 3);
    }

    #[test]
    fn fixture_key_is_stable_across_line_endings() {
        let a = fixture_key("a\nb", 0.7, 0);
        let b = fixture_key("a\r\nb", 0.7, 0);
        assert_eq!(a, b);
    }

    #[test]
    fn fixture_key_buckets_temperature() {
        assert_eq!(fixture_key("x", 0.7, 0), fixture_key("x", 0.70, 0));
        assert_ne!(fixture_key("x", 0.7, 0), fixture_key("x", 0.71, 0));
        assert_ne!(fixture_key("x", 0.7, 0), fixture_key("x", 0.7, 1));
    }

    #[test]
    fn record_then_replay_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let recorder = RecordingBackend::new(echo_backend(), dir.path());
        let prompt = Prompt::new("What is the capital of France?", 0.7, 5, 64);
        let recorded = recorder.complete_n(&prompt).unwrap();
        assert_eq!(recorded.len(), 5);

        let replay = ReplayBackend::new(dir.path());
        let replayed = replay.complete_n(&prompt).unwrap();
        assert_eq!(recorded, replayed);
        let again = replay.complete_n(&prompt).unwrap();
        assert_eq!(replayed, again);
    }

    #[test]
    fn replay_missing_sample_names_key() {
        let dir = tempfile::tempdir().unwrap();
        let recorder = RecordingBackend::new(echo_backend(), dir.path());
        let prompt = Prompt::new("q", 0.7, 2, 64);
        recorder.complete_n(&prompt).unwrap();

        let bigger = Prompt::new("q", 0.7, 4, 64);
        let replay = ReplayBackend::new(dir.path());
        match replay.complete_n(&bigger).unwrap_err() {
            LlmError::FixtureMiss { key } => {
                assert_eq!(key, fixture_key("q", 0.7, 2));
            }
            other => panic!("expected fixture miss, got {other:?}"),
        }
    }

    #[test]
    fn scripted_filtered_completion_has_empty_text() {
        let backend = ScriptedBackend::new(|_, _| Some(ScriptedCompletion::filtered()));
        let out = backend.complete_n(&Prompt::new("q", 0.0, 1, 8)).unwrap();
        assert!(out[0].is_filtered());
        assert!(out[0].text.is_empty());
    }

    #[test]
    fn reported_usage_wins_over_approximation() {
        let backend = ScriptedBackend::new(|_, _| {
            Some(ScriptedCompletion {
                text: "a very long completion that would approximate differently".into(),
                finish_reason: FinishReason::Stop,
                usage: Some(TokenUsage::new(37, 12)),
            })
        });
        let out = backend.complete_n(&Prompt::new("q", 0.0, 1, 8)).unwrap();
        assert_eq!(out[0].usage, TokenUsage::new(37, 12));

        let ledger = UsageLedger::new();
        ledger.add(LedgerTag::new("q1", "closebook"), out[0].usage);
        assert_eq!(ledger.total(), TokenUsage::new(37, 12));
    }

    #[test]
    fn ledger_accumulates_per_tag_and_total() {
        let ledger = UsageLedger::new();
        let tag = LedgerTag::new("q1", "closebook");
        ledger.add(tag.clone(), TokenUsage::new(10, 5));
        ledger.add(tag, TokenUsage::new(10, 5));
        assert_eq!(ledger.total(), TokenUsage::new(20, 10));
        assert_eq!(ledger.by_source()["closebook"], TokenUsage::new(20, 10));
    }

    #[test]
    fn empty_ledger_is_zero() {
        let ledger = UsageLedger::new();
        assert_eq!(ledger.total(), TokenUsage::default());
        assert!(ledger.snapshot().entries.is_empty());
    }

    #[test]
    fn ledger_total_matches_independent_sum() {
        let ledger = UsageLedger::new();
        let mut expected = TokenUsage::default();
        for i in 0..50u64 {
            let usage = TokenUsage::new(i * 3 % 17, i * 7 % 13);
            expected += usage;
            let tag = LedgerTag::new(format!("q{}", i % 5), format!("s{}", i % 4));
            ledger.add(tag, usage);
        }
        assert_eq!(ledger.total(), expected);
        let by_source_sum =
            ledger
                .by_source()
                .values()
                .fold(TokenUsage::default(), |mut acc, u| {
                    acc += *u;
                    acc
                });
        assert_eq!(by_source_sum, expected);
    }

    #[test]
    fn approximate_usage_charges_prompt_once() {
        let first = approximate_usage("12345678", "abcd", 0);
        let second = approximate_usage("12345678", "abcd", 1);
        assert_eq!(first, TokenUsage::new(2, 1));
        assert_eq!(second, TokenUsage::new(0, 1));
    }
}
