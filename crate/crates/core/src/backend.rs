//! Text-generation backends.
//!
//! [`MockBackend`] is a deterministic rule-table "model" used by tests and
//! offline runs. [`RemoteChatBackend`] speaks the OpenAI-compatible
//! `chat/completions` JSON protocol.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::annotation::AttributePair;
use crate::prompts::ResponseFormat;

/// Everything a backend sees for one call.
#[derive(Debug, Clone, Copy)]
pub struct ChatRequest<'a> {
    pub template_id: &'a str,
    pub format: ResponseFormat,
    pub payload: &'a str,
    pub prompt: &'a str,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BackendError {
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("model refused: {0}")]
    Refusal(String),
}

/// A text-generation backend. Implementations must tolerate concurrent calls.
pub trait ChatBackend: Send + Sync {
    fn complete(&self, request: &ChatRequest<'_>) -> Result<String, BackendError>;
}

impl<T: ChatBackend + ?Sized> ChatBackend for Arc<T> {
    fn complete(&self, request: &ChatRequest<'_>) -> Result<String, BackendError> {
        (**self).complete(request)
    }
}

/// Adapts a closure into a backend.
pub struct FnBackend<F>(pub F);

impl<F> ChatBackend for FnBackend<F>
where
    F: Fn(&ChatRequest<'_>) -> Result<String, BackendError> + Send + Sync,
{
    fn complete(&self, request: &ChatRequest<'_>) -> Result<String, BackendError> {
        (self.0)(request)
    }
}

/// Always answers with the same text.
#[derive(Debug, Clone)]
pub struct StaticBackend(pub String);

impl ChatBackend for StaticBackend {
    fn complete(&self, _request: &ChatRequest<'_>) -> Result<String, BackendError> {
        Ok(self.0.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("rule table line {line}: {message}")]
pub struct RuleTableError {
    pub line: usize,
    pub message: String,
}

/// Keyword → attribute pairs used by [`MockBackend`].
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MockRules {
    rules: BTreeMap<String, Vec<AttributePair>>,
    refuse: BTreeSet<String>,
    capture_proper_nouns: bool,
}

impl MockRules {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Small built-in table: sentiment words, genres, life events and
    /// activities, with proper-noun capture enabled.
    pub fn builtin() -> Self {
        let mut r = Self::empty().with_proper_nouns(true);
        for w in [
            "love", "loved", "like", "liked", "enjoy", "enjoyed", "great", "amazing",
        ] {
            r.add(w, "sentiment", "positive");
        }
        for w in [
            "hate", "hated", "dislike", "disliked", "boring", "awful", "terrible",
        ] {
            r.add(w, "sentiment", "negative");
        }
        for g in [
            "action",
            "adventure",
            "animation",
            "comedy",
            "crime",
            "documentary",
            "drama",
            "fantasy",
            "horror",
            "musical",
            "mystery",
            "noir",
            "romance",
            "sci-fi",
            "thriller",
            "western",
        ] {
            r.add(g, "genre", g);
        }
        for (w, v) in [
            ("wedding", "wedding"),
            ("married", "wedding"),
            ("graduated", "graduation"),
            ("graduation", "graduation"),
            ("promotion", "promotion"),
            ("promoted", "promotion"),
            ("moved", "relocation"),
            ("adopted", "adoption"),
            ("pregnant", "pregnancy"),
        ] {
            r.add(w, "life event", v);
        }
        for (w, v) in [
            ("marathon", "running"),
            ("running", "running"),
            ("hiking", "hiking"),
            ("camping", "camping"),
            ("painting", "painting"),
            ("volunteering", "volunteering"),
            ("concert", "concert"),
        ] {
            r.add(w, "activity", v);
        }
        for (w, v) in [
            ("excited", "excited"),
            ("nervous", "nervous"),
            ("proud", "proud"),
        ] {
            r.add(w, "emotion", v);
        }
        r
    }

    pub fn with_proper_nouns(mut self, enabled: bool) -> Self {
        self.capture_proper_nouns = enabled;
        self
    }

    /// Adds a rule; keywords are case-folded. Invalid pairs are ignored.
    pub fn add(&mut self, keyword: &str, attribute: &str, value: &str) -> &mut Self {
        if let Ok(pair) = AttributePair::new(attribute, value) {
            let entry = self.rules.entry(keyword.to_lowercase()).or_default();
            if !entry.contains(&pair) {
                entry.push(pair);
            }
        }
        self
    }

    /// Any payload containing this keyword makes the mock refuse.
    pub fn refuse_on(&mut self, keyword: &str) -> &mut Self {
        self.refuse.insert(keyword.to_lowercase());
        self
    }

    /// Parses a tab-separated table: `keyword<TAB>attribute<TAB>value`.
    /// `#` starts a comment line; `!refuse<TAB>keyword` adds a refusal
    /// trigger; `!proper_nouns<TAB>on|off` toggles capture.
    pub fn parse_tsv(text: &str) -> Result<Self, RuleTableError> {
        let mut r = Self::empty();
        for (idx, line) in text.lines().enumerate() {
            let line_no = idx + 1;
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').map(str::trim).collect();
            let err = |message: &str| RuleTableError {
                line: line_no,
                message: message.to_string(),
            };
            match cols.as_slice() {
                ["!refuse", kw] => {
                    r.refuse_on(kw);
                }
                ["!proper_nouns", flag] => {
                    r.capture_proper_nouns = match *flag {
                        "on" | "true" => true,
                        "off" | "false" => false,
                        _ => return Err(err("expected on/off")),
                    };
                }
                [kw, attr, value] => {
                    if kw.is_empty() {
                        return Err(err("empty keyword"));
                    }
                    AttributePair::new(attr, value).map_err(|e| err(&e.to_string()))?;
                    r.add(kw, attr, value);
                }
                _ => return Err(err("expected keyword<TAB>attribute<TAB>value")),
            }
        }
        Ok(r)
    }

    /// Inverse of [`parse_tsv`](Self::parse_tsv).
    pub fn to_tsv(&self) -> String {
        let mut out = format!(
            "!proper_nouns\t{}\n",
            if self.capture_proper_nouns {
                "on"
            } else {
                "off"
            }
        );
        for kw in &self.refuse {
            out.push_str(&format!("!refuse\t{kw}\n"));
        }
        for (kw, pairs) in &self.rules {
            for p in pairs {
                out.push_str(&format!("{kw}\t{}\t{}\n", p.name(), p.value()));
            }
        }
        out
    }

    pub fn load(path: &Path) -> Result<Self, RuleTableError> {
        let text = std::fs::read_to_string(path).map_err(|e| RuleTableError {
            line: 0,
            message: format!("{}: {e}", path.display()),
        })?;
        Self::parse_tsv(&text)
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    /// Runs the table over `text`: rule pairs in token order, plus
    /// `(person, Token)` for capitalized words that do not start a sentence.
    pub fn apply(&self, text: &str) -> Vec<AttributePair> {
        let mut out: Vec<AttributePair> = Vec::new();
        let mut push = |p: &AttributePair| {
            if !out.contains(p) {
                out.push(p.clone());
            }
        };
        for tok in tokens(text) {
            let folded = tok.word.to_lowercase();
            if let Some(pairs) = self.rules.get(&folded) {
                pairs.iter().for_each(&mut push);
            } else if self.capture_proper_nouns && !tok.sentence_start && is_proper_noun(tok.word) {
                let name = tok.word.strip_suffix("'s").unwrap_or(tok.word);
                if let Ok(p) = AttributePair::new("person", name) {
                    push(&p);
                }
            }
        }
        out
    }

    fn persons(&self, text: &str) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for p in self.apply(text) {
            if p.name() == "person" && !out.iter().any(|n| n == p.value()) {
                out.push(p.value().to_string());
            }
        }
        out
    }

    fn refuses(&self, text: &str) -> bool {
        !self.refuse.is_empty()
            && tokens(text).any(|t| self.refuse.contains(&t.word.to_lowercase()))
    }
}

struct Token<'a> {
    word: &'a str,
    sentence_start: bool,
}

/// Whitespace tokens with surrounding punctuation stripped.
fn tokens(text: &str) -> impl Iterator<Item = Token<'_>> {
    text.lines().flat_map(|line| {
        let mut start = true;
        line.split_whitespace().filter_map(move |raw| {
            let word = raw.trim_matches(|c: char| !c.is_alphanumeric());
            let sentence_start = start;
            start = raw.ends_with(['.', '!', '?']);
            (!word.is_empty()).then_some(Token {
                word,
                sentence_start,
            })
        })
    })
}

fn is_proper_noun(word: &str) -> bool {
    word.chars().next().is_some_and(char::is_uppercase) && word.chars().any(char::is_lowercase)
}

/// Deterministic stand-in for an LLM: a pure function of `(template, payload)`.
///
/// | format              | reply                                                   |
/// |---------------------|---------------------------------------------------------|
/// | `PairList`          | rule pairs found in the payload                         |
/// | `TurnScopedPairList`| one `{speaker:[id]:pairs}` group per `[id] speaker: text` line |
/// | `PersonAttributes`  | captured persons, names of matched rule attributes      |
/// | `RankedList`        | titles of `- title | ...` candidate lines, in order     |
/// | `Scores`            | `3` for every criterion                                 |
/// | `FreeText`          | the payload, unchanged                                  |
#[derive(Debug, Clone, Default)]
pub struct MockBackend {
    rules: MockRules,
}

impl MockBackend {
    pub fn new(rules: MockRules) -> Self {
        Self { rules }
    }

    pub fn rules(&self) -> &MockRules {
        &self.rules
    }
}

fn render_pairs(pairs: &[AttributePair]) -> String {
    pairs
        .iter()
        .map(AttributePair::render)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Splits `[D1:3] Ana: text` into `(Some("D1:3"), Some("Ana"), "text")`.
pub fn split_turn_line(line: &str) -> (Option<&str>, Option<&str>, &str) {
    let mut rest = line.trim();
    let mut id = None;
    if let Some(after) = rest.strip_prefix('[') {
        if let Some(end) = after.find(']') {
            id = Some(after[..end].trim());
            rest = after[end + 1..].trim_start();
        }
    }
    let mut speaker = None;
    if let Some(colon) = rest.find(':') {
        let cand = rest[..colon].trim();
        if !cand.is_empty() && !cand.contains(char::is_whitespace) {
            speaker = Some(cand);
            rest = rest[colon + 1..].trim_start();
        }
    }
    (id, speaker, rest)
}

impl ChatBackend for MockBackend {
    fn complete(&self, req: &ChatRequest<'_>) -> Result<String, BackendError> {
        if self.rules.refuses(req.payload) {
            return Err(BackendError::Refusal(format!(
                "mock refused template {}",
                req.template_id
            )));
        }
        let reply = match req.format {
            ResponseFormat::PairList => render_pairs(&self.rules.apply(req.payload)),
            ResponseFormat::TurnScopedPairList => req
                .payload
                .lines()
                .enumerate()
                .filter_map(|(i, line)| {
                    let pairs = self.rules.apply(line);
                    if pairs.is_empty() {
                        return None;
                    }
                    let (id, speaker, _) = split_turn_line(line);
                    let id = id.map_or_else(|| (i + 1).to_string(), str::to_string);
                    Some(format!(
                        "{{{}:[{}]:{}}}",
                        speaker.unwrap_or("unknown"),
                        id,
                        render_pairs(&pairs)
                    ))
                })
                .collect::<Vec<_>>()
                .join("\n"),
            ResponseFormat::PersonAttributes => {
                let persons = self.rules.persons(req.payload);
                let mut attrs: Vec<String> = Vec::new();
                for p in self.rules.apply(req.payload) {
                    if p.name() != "person" && !attrs.iter().any(|a| a == p.name()) {
                        attrs.push(p.name().to_string());
                    }
                }
                format!(
                    "Person:[{}]Attributes:[{}]",
                    persons.join(", "),
                    attrs.join(", ")
                )
            }
            ResponseFormat::RankedList => req
                .payload
                .lines()
                .filter_map(|l| l.trim_start().strip_prefix("- "))
                .map(|l| l.split(" | ").next().unwrap_or(l).trim())
                .collect::<Vec<_>>()
                .join("\n"),
            ResponseFormat::Scores => "Relevance: 3\nCoherence: 3\nConsistency: 3".to_string(),
            ResponseFormat::FreeText => req.payload.to_string(),
        };
        Ok(reply)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum BackendKind {
    #[default]
    Mock,
    RemoteChat,
}

impl fmt::Display for BackendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackendKind::Mock => "mock",
            BackendKind::RemoteChat => "remote",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProfileError {
    #[error("remote backend requires an endpoint")]
    MissingEndpoint,
    #[error("mock backend must not set an endpoint")]
    UnexpectedEndpoint,
    #[error("invalid endpoint {0:?}: {1}")]
    InvalidEndpoint(String, String),
    #[error("failed to build http client: {0}")]
    Client(String),
}

/// Backbone model choice as configuration. The API key is read from the
/// environment variable named by `api_key_env`, never stored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendProfile {
    pub kind: BackendKind,
    pub model_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    pub max_retries: u32,
    pub timeout_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    pub api_key_env: String,
}

pub const DEFAULT_API_KEY_ENV: &str = "ATTRMEM_API_KEY";

impl Default for BackendProfile {
    fn default() -> Self {
        Self::mock()
    }
}

impl BackendProfile {
    pub fn mock() -> Self {
        Self {
            kind: BackendKind::Mock,
            model_id: "mock".into(),
            endpoint: None,
            max_retries: 2,
            timeout_ms: 60_000,
            temperature: None,
            api_key_env: DEFAULT_API_KEY_ENV.into(),
        }
    }

    pub fn remote(model_id: impl Into<String>, endpoint: impl Into<String>) -> Self {
        Self {
            kind: BackendKind::RemoteChat,
            model_id: model_id.into(),
            endpoint: Some(endpoint.into()),
            ..Self::mock()
        }
    }

    pub fn validate(&self) -> Result<(), ProfileError> {
        match (self.kind, &self.endpoint) {
            (BackendKind::RemoteChat, None) => Err(ProfileError::MissingEndpoint),
            (BackendKind::Mock, Some(_)) => Err(ProfileError::UnexpectedEndpoint),
            (BackendKind::RemoteChat, Some(url)) => reqwest::Url::parse(url)
                .map(|_| ())
                .map_err(|e| ProfileError::InvalidEndpoint(url.clone(), e.to_string())),
            (BackendKind::Mock, None) => Ok(()),
        }
    }

    /// Instantiates the backend; `rules` is only used for the mock.
    pub fn connect(&self, rules: &MockRules) -> Result<Arc<dyn ChatBackend>, ProfileError> {
        self.validate()?;
        Ok(match self.kind {
            BackendKind::Mock => Arc::new(MockBackend::new(rules.clone())),
            BackendKind::RemoteChat => Arc::new(RemoteChatBackend::new(self)?),
        })
    }
}

/// OpenAI-compatible chat-completions client.
pub struct RemoteChatBackend {
    client: reqwest::blocking::Client,
    endpoint: String,
    model: String,
    temperature: Option<f64>,
    api_key: Option<String>,
}

impl RemoteChatBackend {
    pub fn new(profile: &BackendProfile) -> Result<Self, ProfileError> {
        let endpoint = profile
            .endpoint
            .clone()
            .ok_or(ProfileError::MissingEndpoint)?;
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(profile.timeout_ms))
            .build()
            .map_err(|e| ProfileError::Client(e.to_string()))?;
        Ok(Self {
            client,
            endpoint,
            model: profile.model_id.clone(),
            temperature: profile.temperature,
            api_key: std::env::var(&profile.api_key_env).ok(),
        })
    }

    fn request_body(&self, prompt: &str) -> serde_json::Value {
        let mut body = json!({
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
        });
        if let Some(t) = self.temperature {
            body["temperature"] = json!(t);
        }
        body
    }
}

/// Extracts the first choice's text, mapping refusals and content filters.
pub fn parse_chat_response(body: &serde_json::Value) -> Result<String, BackendError> {
    let choice = body
        .get("choices")
        .and_then(|c| c.get(0))
        .ok_or_else(|| BackendError::Transport("response has no choices".into()))?;
    let message = choice.get("message");
    if let Some(refusal) = message
        .and_then(|m| m.get("refusal"))
        .and_then(|r| r.as_str())
    {
        return Err(BackendError::Refusal(refusal.to_string()));
    }
    if choice.get("finish_reason").and_then(|f| f.as_str()) == Some("content_filter") {
        return Err(BackendError::Refusal("content filter".into()));
    }
    message
        .and_then(|m| m.get("content"))
        .and_then(|c| c.as_str())
        .map(str::to_string)
        .ok_or_else(|| BackendError::Transport("response has no message content".into()))
}

impl ChatBackend for RemoteChatBackend {
    fn complete(&self, req: &ChatRequest<'_>) -> Result<String, BackendError> {
        let mut call = self
            .client
            .post(&self.endpoint)
            .json(&self.request_body(req.prompt));
        if let Some(key) = &self.api_key {
            call = call.bearer_auth(key);
        }
        let resp = call
            .send()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let status = resp.status();
        let text = resp
            .text()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        if !status.is_success() {
            let snippet: String = text.chars().take(200).collect();
            return Err(BackendError::Transport(format!("HTTP {status}: {snippet}")));
        }
        let body: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| BackendError::Transport(e.to_string()))?;
        parse_chat_response(&body)
    }
}
