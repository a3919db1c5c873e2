//! Embeddings, a flat exact cosine index, and the three retrieval modes
//! (everything, attribute filter, vector similarity).

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashSet};
use std::fs;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::annotation::{render_annotation, Annotation};
use crate::augment::QueryAnnotation;
use crate::backend::{BackendKind, BackendProfile, ProfileError};
use crate::store::{MatchPolicy, MemoryStore};

/// Dimension of the mock embedder unless configured otherwise.
pub const DEFAULT_MOCK_DIM: usize = 8;
const UNIT_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EmbedError {
    #[error("cannot embed empty text")]
    EmptyText,
    #[error("embedding normalizes a zero vector")]
    ZeroVector,
    #[error("embedding has non-finite entries")]
    NonFinite,
    #[error("expected dimension {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("embedding backend failure: {0}")]
    Transport(String),
}

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error("annotation has no pairs to embed")]
    EmptyAnnotation,
    #[error("query has no attributes")]
    EmptyQuery,
    #[error("k must be at least 1")]
    InvalidK,
    #[error("index built with {index:?} cannot serve a {query:?} query")]
    StrategyMismatch {
        index: EmbeddingStrategy,
        query: EmbeddingStrategy,
    },
    #[error("{0:?} cannot embed an annotation")]
    UnsupportedStrategy(EmbeddingStrategy),
    #[error("embedding mode requires a vector index")]
    MissingIndex,
    #[error("duplicate index entry {0:?}")]
    DuplicateEntry(String),
    #[error("index file {path}: {message}")]
    IndexFile { path: String, message: String },
    #[error(transparent)]
    Profile(#[from] ProfileError),
}

/// A finite real vector of fixed dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector {
    values: Vec<f64>,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self, EmbedError> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(EmbedError::NonFinite);
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_unit(&self) -> bool {
        (self.norm() - 1.0).abs() <= UNIT_TOLERANCE
    }

    pub fn normalized(&self) -> Result<Self, EmbedError> {
        let n = self.norm();
        if n == 0.0 {
            return Err(EmbedError::ZeroVector);
        }
        Self::new(self.values.iter().map(|v| v / n).collect())
    }

    pub fn dot(&self, other: &Self) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .sum()
    }

    /// Cosine similarity clamped to `[-1, 1]`; zero vectors score 0.
    pub fn cosine(&self, other: &Self) -> f64 {
        let denom = self.norm() * other.norm();
        if denom == 0.0 {
            return 0.0;
        }
        (self.dot(other) / denom).clamp(-1.0, 1.0)
    }

    /// Arithmetic mean followed by L2 normalization.
    pub fn mean_normalized(vectors: &[Self]) -> Result<Self, EmbedError> {
        let first = vectors.first().ok_or(EmbedError::EmptyText)?;
        let dim = first.dim();
        let mut acc = vec![0.0; dim];
        for v in vectors {
            if v.dim() != dim {
                return Err(EmbedError::DimensionMismatch {
                    expected: dim,
                    found: v.dim(),
                });
            }
            for (a, x) in acc.iter_mut().zip(&v.values) {
                *a += x;
            }
        }
        let n = vectors.len() as f64;
        Self::new(acc.into_iter().map(|a| a / n).collect())?.normalized()
    }
}

pub trait Embedder: Send + Sync {
    /// Fixed output dimension, when known up front.
    fn dimension(&self) -> Option<usize>;
    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbedError>;
}

impl<T: Embedder + ?Sized> Embedder for Arc<T> {
    fn dimension(&self) -> Option<usize> {
        (**self).dimension()
    }
    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbedError> {
        (**self).embed(text)
    }
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Expands `seed` into `dim` reals in `[-1, 1)` with the splitmix64 sequence.
pub fn splitmix_expand(seed: u64, dim: usize) -> Vec<f64> {
    let mut state = seed;
    (0..dim)
        .map(|_| {
            state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
            let mut z = state;
            z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
            z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
            z ^= z >> 31;
            (z >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
        })
        .collect()
}

/// Hash-based bag-of-tokens embedder. Text is lowercased and split on
/// whitespace and the annotation brackets `[ ] < >`, so `[genre]` and
/// `[genre]<drama>` share the `genre` token.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MockEmbedder {
    dim: usize,
}

impl Default for MockEmbedder {
    fn default() -> Self {
        Self::new(DEFAULT_MOCK_DIM)
    }
}

impl MockEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self { dim }
    }

    pub fn tokens(text: &str) -> Vec<String> {
        text.to_lowercase()
            .split(|c: char| c.is_whitespace() || matches!(c, '[' | ']' | '<' | '>'))
            .filter(|t| !t.is_empty())
            .map(str::to_string)
            .collect()
    }

    pub fn token_vector(&self, token: &str) -> Vec<f64> {
        splitmix_expand(fnv1a64(token.as_bytes()), self.dim)
    }
}

impl Embedder for MockEmbedder {
    fn dimension(&self) -> Option<usize> {
        Some(self.dim)
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbedError> {
        let tokens = Self::tokens(text);
        if tokens.is_empty() {
            return Err(EmbedError::EmptyText);
        }
        let vectors: Vec<EmbeddingVector> = tokens
            .iter()
            .map(|t| EmbeddingVector::new(self.token_vector(t)))
            .collect::<Result<_, _>>()?;
        EmbeddingVector::mean_normalized(&vectors)
    }
}

/// OpenAI-compatible `embeddings` client.
pub struct RemoteEmbedder {
    client: reqwest::blocking::Client,
    endpoint: String,
    model: String,
    dim: Option<usize>,
    api_key: Option<String>,
}

impl RemoteEmbedder {
    pub fn new(profile: &BackendProfile, dim: Option<usize>) -> Result<Self, ProfileError> {
        profile.validate()?;
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
            dim,
            api_key: std::env::var(&profile.api_key_env).ok(),
        })
    }
}

/// Reads `data[0].embedding` from an embeddings response.
pub fn parse_embedding_response(body: &serde_json::Value) -> Result<Vec<f64>, EmbedError> {
    body.get("data")
        .and_then(|d| d.get(0))
        .and_then(|d| d.get("embedding"))
        .and_then(|e| e.as_array())
        .ok_or_else(|| EmbedError::Transport("response has no embedding".into()))?
        .iter()
        .map(|v| {
            v.as_f64()
                .ok_or_else(|| EmbedError::Transport("non-numeric embedding entry".into()))
        })
        .collect()
}

impl Embedder for RemoteEmbedder {
    fn dimension(&self) -> Option<usize> {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbedError> {
        if text.trim().is_empty() {
            return Err(EmbedError::EmptyText);
        }
        let mut call = self
            .client
            .post(&self.endpoint)
            .json(&json!({"model": self.model, "input": text}));
        if let Some(key) = &self.api_key {
            call = call.bearer_auth(key);
        }
        let resp = call
            .send()
            .map_err(|e| EmbedError::Transport(e.to_string()))?;
        let status = resp.status();
        if !status.is_success() {
            return Err(EmbedError::Transport(format!("HTTP {status}")));
        }
        let body: serde_json::Value = resp
            .json()
            .map_err(|e| EmbedError::Transport(e.to_string()))?;
        let v = EmbeddingVector::new(parse_embedding_response(&body)?)?;
        if let Some(expected) = self.dim {
            if v.dim() != expected {
                return Err(EmbedError::DimensionMismatch {
                    expected,
                    found: v.dim(),
                });
            }
        }
        v.normalized()
    }
}

/// Builds the embedder described by `profile`; `dim` sizes the mock.
pub fn connect_embedder(
    profile: &BackendProfile,
    dim: usize,
) -> Result<Arc<dyn Embedder>, ProfileError> {
    profile.validate()?;
    Ok(match profile.kind {
        BackendKind::Mock => Arc::new(MockEmbedder::new(dim)),
        BackendKind::RemoteChat => Arc::new(RemoteEmbedder::new(profile, None)?),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum EmbeddingStrategy {
    /// Mean of per-pair embeddings, renormalized.
    #[default]
    AveragedPairs,
    /// One embedding of the rendered annotation.
    WholeAnnotation,
    /// One embedding of the raw item content.
    RawContent,
}

pub fn embed_text(text: &str, embedder: &dyn Embedder) -> Result<EmbeddingVector, EmbedError> {
    if text.trim().is_empty() {
        return Err(EmbedError::EmptyText);
    }
    embedder.embed(text)
}

pub fn embed_annotation(
    ann: &Annotation,
    strategy: EmbeddingStrategy,
    embedder: &dyn Embedder,
) -> Result<EmbeddingVector, RetrievalError> {
    if ann.is_empty() {
        return Err(RetrievalError::EmptyAnnotation);
    }
    match strategy {
        EmbeddingStrategy::AveragedPairs => {
            let vectors = ann
                .pairs()
                .iter()
                .map(|p| embed_text(&p.render(), embedder))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(EmbeddingVector::mean_normalized(&vectors)?)
        }
        EmbeddingStrategy::WholeAnnotation => Ok(embed_text(&render_annotation(ann), embedder)?),
        EmbeddingStrategy::RawContent => Err(RetrievalError::UnsupportedStrategy(strategy)),
    }
}

/// A query vector tagged with the strategy that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddedQuery {
    pub strategy: EmbeddingStrategy,
    pub vector: EmbeddingVector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct IndexEntry {
    id: String,
    vector: EmbeddingVector,
}

/// Flat exact cosine index. Immutable once built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VectorIndex {
    strategy: EmbeddingStrategy,
    dimension: usize,
    entries: Vec<IndexEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedItem {
    pub id: String,
    pub reason: String,
}

impl VectorIndex {
    pub fn from_entries(
        strategy: EmbeddingStrategy,
        dimension: usize,
        entries: Vec<(String, EmbeddingVector)>,
    ) -> Result<Self, RetrievalError> {
        let mut seen = HashSet::new();
        for (id, v) in &entries {
            if !seen.insert(id.as_str()) {
                return Err(RetrievalError::DuplicateEntry(id.clone()));
            }
            if v.dim() != dimension {
                return Err(EmbedError::DimensionMismatch {
                    expected: dimension,
                    found: v.dim(),
                }
                .into());
            }
        }
        Ok(Self {
            strategy,
            dimension,
            entries: entries
                .into_iter()
                .map(|(id, vector)| IndexEntry { id, vector })
                .collect(),
        })
    }

    pub fn strategy(&self) -> EmbeddingStrategy {
        self.strategy
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &EmbeddingVector)> {
        self.entries.iter().map(|e| (e.id.as_str(), &e.vector))
    }

    pub fn get(&self, id: &str) -> Option<&EmbeddingVector> {
        self.entries.iter().find(|e| e.id == id).map(|e| &e.vector)
    }

    pub fn save(&self, path: &Path) -> Result<(), RetrievalError> {
        let err = |message: String| RetrievalError::IndexFile {
            path: path.display().to_string(),
            message,
        };
        let text = serde_json::to_string(self).map_err(|e| err(e.to_string()))?;
        fs::write(path, text + "\n").map_err(|e| err(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, RetrievalError> {
        let err = |message: String| RetrievalError::IndexFile {
            path: path.display().to_string(),
            message,
        };
        let text = fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let raw: VectorIndex = serde_json::from_str(&text).map_err(|e| err(e.to_string()))?;
        let entries = raw.entries.into_iter().map(|e| (e.id, e.vector)).collect();
        Self::from_entries(raw.strategy, raw.dimension, entries)
    }
}

/// Embeds every eligible item. Items without an annotation (or without
/// content, for `RawContent`) and items whose embedding fails are skipped
/// and reported; a dimension change mid-build is an error.
pub fn build_index(
    store: &MemoryStore,
    strategy: EmbeddingStrategy,
    embedder: &dyn Embedder,
) -> Result<(VectorIndex, Vec<SkippedItem>), RetrievalError> {
    let embedded: Vec<(String, Result<EmbeddingVector, String>)> = store
        .records()
        .par_iter()
        .map(|rec| {
            let res = match (strategy, &rec.annotation) {
                (EmbeddingStrategy::RawContent, _) => {
                    embed_text(&rec.item.content, embedder).map_err(|e| e.to_string())
                }
                (_, None) => Err("no annotation".to_string()),
                (_, Some(ann)) => {
                    embed_annotation(ann, strategy, embedder).map_err(|e| e.to_string())
                }
            };
            (rec.item.id.clone(), res)
        })
        .collect();
    let mut dimension = embedder.dimension();
    let mut entries = Vec::new();
    let mut skipped = Vec::new();
    for (id, res) in embedded {
        match res {
            Ok(v) => {
                let expected = *dimension.get_or_insert(v.dim());
                if v.dim() != expected {
                    return Err(EmbedError::DimensionMismatch {
                        expected,
                        found: v.dim(),
                    }
                    .into());
                }
                entries.push((id, v));
            }
            Err(reason) => skipped.push(SkippedItem { id, reason }),
        }
    }
    let index = VectorIndex::from_entries(strategy, dimension.unwrap_or(0), entries)?;
    Ok((index, skipped))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum RetrievalMode {
    Comprehensive,
    AttributeBased,
    #[default]
    EmbeddingBased,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub id: String,
    pub score: f64,
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub mode: RetrievalMode,
    pub ranked: Vec<Hit>,
}

impl RetrievalResult {
    fn from_scored(mode: RetrievalMode, scored: Vec<(String, f64)>) -> Self {
        Self {
            mode,
            ranked: scored
                .into_iter()
                .enumerate()
                .map(|(i, (id, score))| Hit {
                    id,
                    score,
                    rank: i + 1,
                })
                .collect(),
        }
    }

    pub fn ids(&self) -> Vec<&str> {
        self.ranked.iter().map(|h| h.id.as_str()).collect()
    }

    pub fn len(&self) -> usize {
        self.ranked.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranked.is_empty()
    }
}

/// Heap element ordered so that the *worst* candidate is the max.
struct Candidate<'a> {
    score: f64,
    id: &'a str,
}

impl Ord for Candidate<'_> {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .score
            .total_cmp(&self.score)
            .then_with(|| self.id.cmp(other.id))
    }
}

impl PartialOrd for Candidate<'_> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl PartialEq for Candidate<'_> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Candidate<'_> {}

/// Exact top-k by cosine over every entry; ties go to the smaller id.
pub fn search(
    index: &VectorIndex,
    query: &EmbeddedQuery,
    k: usize,
) -> Result<RetrievalResult, RetrievalError> {
    if k == 0 {
        return Err(RetrievalError::InvalidK);
    }
    if query.strategy != index.strategy {
        return Err(RetrievalError::StrategyMismatch {
            index: index.strategy,
            query: query.strategy,
        });
    }
    if query.vector.dim() != index.dimension {
        return Err(EmbedError::DimensionMismatch {
            expected: index.dimension,
            found: query.vector.dim(),
        }
        .into());
    }
    let mut heap: BinaryHeap<Candidate<'_>> = BinaryHeap::with_capacity(k + 1);
    for e in &index.entries {
        let cand = Candidate {
            score: query.vector.cosine(&e.vector),
            id: &e.id,
        };
        if heap.len() < k {
            heap.push(cand);
        } else if heap.peek().is_some_and(|worst| cand < *worst) {
            heap.pop();
            heap.push(cand);
        }
    }
    let scored = heap
        .into_sorted_vec()
        .into_iter()
        .map(|c| (c.id.to_string(), c.score))
        .collect();
    Ok(RetrievalResult::from_scored(
        RetrievalMode::EmbeddingBased,
        scored,
    ))
}

/// One query criterion: an attribute name, optionally with a value.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryTerm {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<String>,
}

impl QueryTerm {
    pub fn render(&self) -> String {
        match &self.value {
            Some(v) => format!("[{}]<{}>", self.name, v),
            None => format!("[{}]", self.name),
        }
    }
}

/// The task context a retrieval answers: raw text plus mined criteria.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct QueryContext {
    pub text: String,
    pub terms: Vec<QueryTerm>,
}

impl QueryContext {
    /// Question form: each attribute name is a term, each person a
    /// `(person, name)` term.
    pub fn from_question(text: &str, q: &QueryAnnotation) -> Self {
        let mut terms: Vec<QueryTerm> = q
            .attributes
            .iter()
            .map(|a| QueryTerm {
                name: a.clone(),
                value: None,
            })
            .collect();
        terms.extend(q.persons.iter().map(|p| QueryTerm {
            name: "person".into(),
            value: Some(p.clone()),
        }));
        Self {
            text: text.to_string(),
            terms,
        }
    }

    /// Annotation form: every pair is a term carrying its value.
    pub fn from_annotation(text: &str, ann: &Annotation) -> Self {
        Self {
            text: text.to_string(),
            terms: ann
                .pairs()
                .iter()
                .map(|p| QueryTerm {
                    name: p.name().to_string(),
                    value: Some(p.value().to_string()),
                })
                .collect(),
        }
    }
}

/// Which parts of a [`QueryContext`] feed the query embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryComponents {
    pub text: bool,
    pub terms: bool,
}

impl Default for QueryComponents {
    fn default() -> Self {
        Self {
            text: true,
            terms: true,
        }
    }
}

pub fn embed_query(
    ctx: &QueryContext,
    strategy: EmbeddingStrategy,
    components: QueryComponents,
    embedder: &dyn Embedder,
) -> Result<EmbeddedQuery, RetrievalError> {
    let vector = if strategy == EmbeddingStrategy::RawContent {
        embed_text(&ctx.text, embedder)?
    } else {
        let mut parts: Vec<String> = Vec::new();
        if components.text && !ctx.text.trim().is_empty() {
            parts.push(ctx.text.clone());
        }
        if components.terms {
            parts.extend(ctx.terms.iter().map(QueryTerm::render));
        }
        if parts.is_empty() {
            return Err(RetrievalError::EmptyQuery);
        }
        match strategy {
            EmbeddingStrategy::AveragedPairs => {
                let vectors = parts
                    .iter()
                    .map(|p| embed_text(p, embedder))
                    .collect::<Result<Vec<_>, _>>()?;
                EmbeddingVector::mean_normalized(&vectors)?
            }
            _ => embed_text(&parts.join(" "), embedder)?,
        }
    };
    Ok(EmbeddedQuery { strategy, vector })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalConfig {
    pub mode: RetrievalMode,
    pub k: usize,
    pub policy: MatchPolicy,
    pub components: QueryComponents,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            mode: RetrievalMode::EmbeddingBased,
            k: 5,
            policy: MatchPolicy::NameAndValue,
            components: QueryComponents::default(),
        }
    }
}

/// Attribute filter: each term selects matching ids; under `NameAndValue`
/// the intersection is used when non-empty, otherwise the union. Hits are
/// ranked by matched-term count, then id, and cut to `k`.
pub fn attribute_search(
    store: &MemoryStore,
    terms: &[QueryTerm],
    policy: MatchPolicy,
    k: usize,
) -> Result<RetrievalResult, RetrievalError> {
    if k == 0 {
        return Err(RetrievalError::InvalidK);
    }
    if terms.is_empty() {
        return Err(RetrievalError::EmptyQuery);
    }
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    let mut intersection: Option<BTreeSet<String>> = None;
    for term in terms {
        let hits = match policy {
            MatchPolicy::NameOnly => store.lookup_by_attribute(&term.name, None, policy),
            MatchPolicy::NameAndValue => {
                store.lookup_by_attribute(&term.name, term.value.as_deref(), policy)
            }
        };
        for id in &hits {
            *counts.entry(id.clone()).or_default() += 1;
        }
        intersection = Some(match intersection {
            None => hits,
            Some(acc) => acc.intersection(&hits).cloned().collect(),
        });
    }
    let intersection = intersection.unwrap_or_default();
    let mut scored: Vec<(String, usize)> =
        if policy == MatchPolicy::NameAndValue && !intersection.is_empty() {
            intersection
                .into_iter()
                .map(|id| {
                    let c = counts[&id];
                    (id, c)
                })
                .collect()
        } else {
            counts.into_iter().collect()
        };
    scored.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    scored.truncate(k);
    let n = terms.len() as f64;
    Ok(RetrievalResult::from_scored(
        RetrievalMode::AttributeBased,
        scored
            .into_iter()
            .map(|(id, c)| (id, c as f64 / n))
            .collect(),
    ))
}

/// Runs one retrieval in the configured mode. Comprehensive ignores `k`
/// and returns every item in store order with score 0.
pub fn retrieve(
    store: &MemoryStore,
    index: Option<&VectorIndex>,
    embedder: &dyn Embedder,
    ctx: &QueryContext,
    config: &RetrievalConfig,
) -> Result<RetrievalResult, RetrievalError> {
    match config.mode {
        RetrievalMode::Comprehensive => Ok(RetrievalResult::from_scored(
            RetrievalMode::Comprehensive,
            store.ids().map(|id| (id.to_string(), 0.0)).collect(),
        )),
        RetrievalMode::AttributeBased => {
            attribute_search(store, &ctx.terms, config.policy, config.k)
        }
        RetrievalMode::EmbeddingBased => {
            let index = index.ok_or(RetrievalError::MissingIndex)?;
            let query = embed_query(ctx, index.strategy(), config.components, embedder)?;
            search(index, &query, config.k)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotation::{AttributePair, Modes, Prioritization};
    use crate::store::MemoryItem;

    // Frozen from an independent script implementing the same hash chain.
    const GENRE_RAW: [f64; 8] = [
        0.37515070412488205,
        0.25085570647207645,
        -0.44392864563788725,
        -0.30712249935920655,
        0.019354125280263368,
        -0.28939167381206654,
        0.5293153771790173,
        0.9811495539118524,
    ];
    const GENRE_UNIT: [f64; 8] = [
        0.27792640519628786,
        0.18584377946296168,
        -0.32887981093785595,
        -0.22752843394208128,
        0.014338297664694239,
        -0.2143927406025888,
        0.3921376619501441,
        0.7268742014352959,
    ];

    fn close(a: &[f64], b: &[f64]) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < 1e-12, "{x} vs {y}");
        }
    }

    fn ann(pairs: &[(&str, &str)]) -> Annotation {
        Annotation::from_pairs(pairs.iter().map(|(n, v)| AttributePair::new(n, v).unwrap()))
    }

    #[test]
    fn golden_token_vector() {
        assert_eq!(fnv1a64(b"genre"), 0x4bf8_f99a_7333_3900);
        let m = MockEmbedder::new(8);
        close(&m.token_vector("genre"), &GENRE_RAW);
        close(m.embed("genre").unwrap().values(), &GENRE_UNIT);
        close(m.embed("  GENRE ").unwrap().values(), &GENRE_UNIT);
    }

    #[test]
    fn self_similarity_and_errors() {
        let m = MockEmbedder::default();
        let a = m.embed("crime thriller").unwrap();
        assert_eq!(a, m.embed("crime thriller").unwrap());
        assert!((a.cosine(&a) - 1.0).abs() < 1e-6);
        assert!(a.is_unit());
        assert_eq!(embed_text("  ", &m), Err(EmbedError::EmptyText));
        assert_eq!(
            EmbeddingVector::new(vec![0.0, 0.0]).unwrap().normalized(),
            Err(EmbedError::ZeroVector)
        );
    }

    #[test]
    fn averaged_pairs_of_one_is_the_pair() {
        let m = MockEmbedder::default();
        let a = ann(&[("genre", "drama")]);
        let v = embed_annotation(&a, EmbeddingStrategy::AveragedPairs, &m).unwrap();
        assert!(v.cosine(&m.embed("[genre]<drama>").unwrap()) >= 1.0 - 1e-9);
        assert!(matches!(
            embed_annotation(&Annotation::default(), EmbeddingStrategy::AveragedPairs, &m),
            Err(RetrievalError::EmptyAnnotation)
        ));
    }

    #[test]
    fn search_self_match_and_orthogonal() {
        let e = |v: Vec<f64>| EmbeddingVector::new(v).unwrap();
        let idx = VectorIndex::from_entries(
            EmbeddingStrategy::RawContent,
            2,
            vec![
                ("a".into(), e(vec![1.0, 0.0])),
                ("b".into(), e(vec![-2.0, 0.0])),
            ],
        )
        .unwrap();
        let q = EmbeddedQuery {
            strategy: EmbeddingStrategy::RawContent,
            vector: e(vec![0.0, 1.0]),
        };
        let r = search(&idx, &q, 5).unwrap();
        assert_eq!(r.ids(), vec!["a", "b"]);
        assert!(r.ranked.iter().all(|h| h.score == 0.0));
        let q = EmbeddedQuery {
            strategy: EmbeddingStrategy::RawContent,
            vector: e(vec![1.0, 0.0]),
        };
        let r = search(&idx, &q, 1).unwrap();
        assert_eq!(r.ranked[0].id, "a");
        assert!((r.ranked[0].score - 1.0).abs() < 1e-6);
        let wrong = EmbeddedQuery {
            strategy: EmbeddingStrategy::AveragedPairs,
            vector: e(vec![1.0, 0.0]),
        };
        assert!(matches!(
            search(&idx, &wrong, 1),
            Err(RetrievalError::StrategyMismatch { .. })
        ));
        assert!(matches!(search(&idx, &q, 0), Err(RetrievalError::InvalidK)));
    }

    fn five_item_store() -> MemoryStore {
        let mut s = MemoryStore::new();
        for i in 0..5 {
            let a = if i == 3 {
                None
            } else {
                Some(
                    ann(&[
                        ("genre", if i % 2 == 0 { "drama" } else { "action" }),
                        ("k", &format!("v{i}")),
                    ])
                    .with_modes(Modes::entity(Prioritization::Basic)),
                )
            };
            s.write(MemoryItem::entity(format!("m{i}"), format!("movie {i}")), a)
                .unwrap();
        }
        s
    }

    #[test]
    fn build_index_skips_unannotated() {
        let s = five_item_store();
        let m = MockEmbedder::default();
        let (idx, skipped) = build_index(&s, EmbeddingStrategy::AveragedPairs, &m).unwrap();
        assert_eq!(idx.len(), 4);
        assert_eq!(idx.dimension(), 8);
        assert_eq!(skipped.len(), 1);
        assert_eq!(skipped[0].id, "m3");
        let (raw, skipped) = build_index(&s, EmbeddingStrategy::RawContent, &m).unwrap();
        assert_eq!(raw.len(), 5);
        assert!(skipped.is_empty());
    }

    #[test]
    fn index_file_round_trip() {
        let s = five_item_store();
        let (idx, _) = build_index(
            &s,
            EmbeddingStrategy::WholeAnnotation,
            &MockEmbedder::default(),
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("idx.json");
        idx.save(&p).unwrap();
        assert_eq!(VectorIndex::load(&p).unwrap(), idx);
    }

    #[test]
    fn retrieval_modes() {
        let s = five_item_store();
        let m = MockEmbedder::default();
        let (idx, _) = build_index(&s, EmbeddingStrategy::AveragedPairs, &m).unwrap();
        let ctx = QueryContext {
            text: String::new(),
            terms: vec![QueryTerm {
                name: "genre".into(),
                value: None,
            }],
        };
        let mut cfg = RetrievalConfig {
            mode: RetrievalMode::Comprehensive,
            k: 2,
            ..Default::default()
        };
        assert_eq!(retrieve(&s, Some(&idx), &m, &ctx, &cfg).unwrap().len(), 5);
        cfg.mode = RetrievalMode::AttributeBased;
        cfg.k = 10;
        let r = retrieve(&s, Some(&idx), &m, &ctx, &cfg).unwrap();
        assert_eq!(r.ids(), vec!["m0", "m1", "m2", "m4"]);
        cfg.mode = RetrievalMode::EmbeddingBased;
        cfg.k = 3;
        let r = retrieve(&s, Some(&idx), &m, &ctx, &cfg).unwrap();
        assert_eq!(r.len(), 3);
        assert!(r.ranked.windows(2).all(|w| w[0].score >= w[1].score));
        cfg.mode = RetrievalMode::AttributeBased;
        let empty = QueryContext::default();
        assert!(matches!(
            retrieve(&s, Some(&idx), &m, &empty, &cfg),
            Err(RetrievalError::EmptyQuery)
        ));
    }

    #[test]
    fn name_and_value_prefers_intersection() {
        let s = five_item_store();
        let terms = vec![
            QueryTerm {
                name: "genre".into(),
                value: Some("Drama".into()),
            },
            QueryTerm {
                name: "k".into(),
                value: Some("v2".into()),
            },
        ];
        let r = attribute_search(&s, &terms, MatchPolicy::NameAndValue, 10).unwrap();
        assert_eq!(r.ids(), vec!["m2"]);
        assert_eq!(r.ranked[0].score, 1.0);
        let terms = vec![
            QueryTerm {
                name: "genre".into(),
                value: Some("Action".into()),
            },
            QueryTerm {
                name: "k".into(),
                value: Some("v2".into()),
            },
        ];
        let r = attribute_search(&s, &terms, MatchPolicy::NameAndValue, 10).unwrap();
        assert_eq!(r.ids(), vec!["m1", "m2"]);
    }
}
