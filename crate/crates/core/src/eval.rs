//! Evaluation: ranking and answer metrics, recommendation-dialogue masking,
//! the generic dataset schema, and the QA, recommendation and event
//! summarization pipelines.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation::{
    normalize_name, render_annotation, Annotation, Granularity, Modes, Perspective, Prioritization,
};
use crate::augment::{AugmentError, Augmenter};
use crate::prompts::{EVENT_SUMMARY, GEVAL_JUDGE, QA_ANSWER, RECOMMEND};
use crate::retrieval::{
    retrieve, Embedder, QueryComponents, QueryContext, RetrievalConfig, RetrievalError,
    RetrievalMode, VectorIndex,
};
use crate::store::{session_payload, ItemKind, MatchPolicy, MemoryItem, MemoryStore};

pub const MASK_TOKEN: &str = "[MASKED]";
pub const REC_CUTOFFS: [usize; 3] = [1, 5, 10];
pub const DEFAULT_EVENT_NAMES: [&str; 3] = ["event", "life event", "activity"];
/// Category label used by single-category reports.
pub const ALL: &str = "all";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricError {
    #[error("gold set is empty")]
    EmptyGold,
    #[error("k must be at least 1")]
    InvalidK,
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("cannot read dataset {path}: {message}")]
    Io { path: String, message: String },
    #[error("dataset schema violations:\n  {}", .0.join("\n  "))]
    Schema(Vec<String>),
    #[error("requested {requested} dialogues but the dataset has {available}")]
    SampleTooLarge { requested: usize, available: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("no label occurs in the dialogue")]
    LabelNotFound,
    #[error("session {0:?} has no event attributes")]
    NoEventAttributes(String),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

fn top_k_distinct<S: AsRef<str>>(retrieved: &[S], k: usize) -> Vec<&str> {
    let mut seen = HashSet::new();
    retrieved
        .iter()
        .take(k)
        .map(AsRef::as_ref)
        .filter(|id| seen.insert(*id))
        .collect()
}

/// Fraction of gold ids found in the first `k` retrieved.
pub fn recall_at_k<S: AsRef<str>, G: AsRef<str>>(
    retrieved: &[S],
    gold: &[G],
    k: usize,
) -> Result<f64, MetricError> {
    if k == 0 {
        return Err(MetricError::InvalidK);
    }
    let gold: HashSet<&str> = gold.iter().map(AsRef::as_ref).collect();
    if gold.is_empty() {
        return Err(MetricError::EmptyGold);
    }
    let hits = top_k_distinct(retrieved, k)
        .into_iter()
        .filter(|id| gold.contains(id))
        .count();
    Ok(hits as f64 / gold.len() as f64)
}

/// Binary-relevance NDCG; an empty gold set scores 0.
pub fn ndcg_at_k<S: AsRef<str>, G: AsRef<str>>(
    retrieved: &[S],
    gold: &[G],
    k: usize,
) -> Result<f64, MetricError> {
    if k == 0 {
        return Err(MetricError::InvalidK);
    }
    let gold: HashSet<&str> = gold.iter().map(AsRef::as_ref).collect();
    if gold.is_empty() {
        return Ok(0.0);
    }
    let mut seen = HashSet::new();
    let dcg: f64 = retrieved
        .iter()
        .take(k)
        .map(AsRef::as_ref)
        .enumerate()
        .filter(|&(_, id)| gold.contains(id) && seen.insert(id))
        .map(|(i, _)| 1.0 / ((i + 2) as f64).log2())
        .sum();
    let ideal: f64 = (0..gold.len().min(k))
        .map(|i| 1.0 / ((i + 2) as f64).log2())
        .sum();
    Ok(dcg / ideal)
}

fn answer_tokens(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_lowercase).collect()
}

/// Multiset token F1 over lowercased whitespace tokens.
pub fn token_f1(prediction: &str, gold: &str) -> Result<f64, MetricError> {
    let gold = answer_tokens(gold);
    if gold.is_empty() {
        return Err(MetricError::EmptyGold);
    }
    let pred = answer_tokens(prediction);
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in &gold {
        *counts.entry(t).or_default() += 1;
    }
    let mut common = 0usize;
    for t in &pred {
        if let Some(c) = counts.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return Ok(0.0);
    }
    let p = common as f64 / pred.len() as f64;
    let r = common as f64 / gold.len() as f64;
    Ok(2.0 * p * r / (p + r))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Metric {
    F1,
    RecallAtK,
    NDCGAtK,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryScore {
    pub count: usize,
    pub score: f64,
}

/// Per-category and overall means; overall is the micro-average over all
/// scored examples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: Metric,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    pub per_category: BTreeMap<String, CategoryScore>,
    pub overall: f64,
    pub count: usize,
}

impl MetricReport {
    pub fn from_scores<C: AsRef<str>>(
        metric: Metric,
        k: Option<usize>,
        scores: &[(C, f64)],
    ) -> Self {
        let mut sums: BTreeMap<String, (usize, f64)> = BTreeMap::new();
        for (c, s) in scores {
            let e = sums.entry(c.as_ref().to_string()).or_default();
            e.0 += 1;
            e.1 += s;
        }
        let total: f64 = scores.iter().map(|(_, s)| s).sum();
        Self {
            metric,
            k,
            per_category: sums
                .into_iter()
                .map(|(c, (n, s))| {
                    (
                        c,
                        CategoryScore {
                            count: n,
                            score: s / n as f64,
                        },
                    )
                })
                .collect(),
            overall: if scores.is_empty() {
                0.0
            } else {
                total / scores.len() as f64
            },
            count: scores.len(),
        }
    }

    pub fn label(&self) -> String {
        let base = match self.metric {
            Metric::F1 => "F1",
            Metric::RecallAtK => "Recall",
            Metric::NDCGAtK => "NDCG",
        };
        match self.k {
            Some(k) if self.metric != Metric::F1 => format!("{base}@{k}"),
            _ => base.to_string(),
        }
    }
}

/// Aligned plain-text table: one row per report, one column per category,
/// then the overall score. Scores are percentages with two decimals.
pub fn render_table(reports: &[MetricReport]) -> String {
    let cats: BTreeSet<&str> = reports
        .iter()
        .flat_map(|r| r.per_category.keys().map(String::as_str))
        .collect();
    let mut header = vec!["metric".to_string()];
    header.extend(cats.iter().map(|c| c.to_string()));
    header.push("overall".into());
    header.push("n".into());
    let mut rows = vec![header];
    for r in reports {
        let mut row = vec![r.label()];
        for c in &cats {
            row.push(
                r.per_category
                    .get(*c)
                    .map_or("-".to_string(), |s| format!("{:.2}", s.score * 100.0)),
            );
        }
        row.push(format!("{:.2}", r.overall * 100.0));
        row.push(r.count.to_string());
        rows.push(row);
    }
    let widths: Vec<usize> = (0..rows[0].len())
        .map(|i| rows.iter().map(|r| r[i].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in &rows {
        let cells: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(i, c)| {
                if i == 0 {
                    format!("{c:<w$}", w = widths[i])
                } else {
                    format!("{c:>w$}", w = widths[i])
                }
            })
            .collect();
        let _ = writeln!(out, "{}", cells.join("  ").trim_end());
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueTurn {
    pub speaker: String,
    pub text: String,
}

impl DialogueTurn {
    pub fn new(speaker: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            speaker: speaker.into(),
            text: text.into(),
        }
    }
}

/// A recommendation dialogue after masking and cut-off.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecDialogue {
    pub turns: Vec<DialogueTurn>,
    pub gold_labels: Vec<String>,
    pub masked: bool,
    /// Turns removed by the cut-off, unmodified.
    pub held_out: Vec<DialogueTurn>,
}

impl RecDialogue {
    pub fn text(&self) -> String {
        self.turns
            .iter()
            .map(|t| format!("{}: {}", t.speaker, t.text))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

/// Replaces every occurrence of any label (ASCII case-insensitive,
/// leftmost-longest) with the mask token. Returns the count replaced.
pub fn mask_text(text: &str, labels: &[&str]) -> (String, usize) {
    let mut labels: Vec<&str> = labels.iter().copied().filter(|l| !l.is_empty()).collect();
    labels.sort_by(|a, b| b.len().cmp(&a.len()).then_with(|| a.cmp(b)));
    let bytes = text.as_bytes();
    let mut out = String::with_capacity(text.len());
    let mut count = 0;
    let mut pos = 0;
    let mut copied = 0;
    while pos < bytes.len() {
        let hit = labels.iter().find(|l| {
            let lb = l.as_bytes();
            bytes.len() - pos >= lb.len() && bytes[pos..pos + lb.len()].eq_ignore_ascii_case(lb)
        });
        match hit {
            Some(l) => {
                out.push_str(&text[copied..pos]);
                out.push_str(MASK_TOKEN);
                pos += l.len();
                copied = pos;
                count += 1;
            }
            None => {
                pos += text[pos..].chars().next().map_or(1, char::len_utf8);
            }
        }
    }
    out.push_str(&text[copied..]);
    (out, count)
}

/// Masks gold labels and drops every turn after the first masked one.
pub fn mask_dialogue(turns: &[DialogueTurn], labels: &[String]) -> Result<RecDialogue, EvalError> {
    let label_refs: Vec<&str> = labels.iter().map(String::as_str).collect();
    for (i, turn) in turns.iter().enumerate() {
        let (masked, n) = mask_text(&turn.text, &label_refs);
        if n > 0 {
            let mut kept = turns[..i].to_vec();
            kept.push(DialogueTurn::new(turn.speaker.clone(), masked));
            return Ok(RecDialogue {
                turns: kept,
                gold_labels: labels.to_vec(),
                masked: true,
                held_out: turns[i + 1..].to_vec(),
            });
        }
    }
    Err(EvalError::LabelNotFound)
}

/// Lowercased, punctuation-stripped, whitespace-collapsed title.
pub fn normalize_title(title: &str) -> String {
    title
        .chars()
        .map(|c| {
            if c.is_alphanumeric() {
                c.to_lowercase().next().unwrap_or(c)
            } else if c.is_whitespace() {
                ' '
            } else {
                '\u{0}'
            }
        })
        .filter(|c| *c != '\u{0}')
        .collect::<String>()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QaCategory {
    SingleHop,
    MultiHop,
    Temporal,
    OpenDomain,
    Adversarial,
}

impl QaCategory {
    pub fn as_str(self) -> &'static str {
        match self {
            QaCategory::SingleHop => "single_hop",
            QaCategory::MultiHop => "multi_hop",
            QaCategory::Temporal => "temporal",
            QaCategory::OpenDomain => "open_domain",
            QaCategory::Adversarial => "adversarial",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnRecord {
    pub id: String,
    pub speaker: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub date: Option<String>,
    pub turns: Vec<TurnRecord>,
    /// Reference events per speaker, used by the summary judge.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub events: BTreeMap<String, Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaExample {
    pub question: String,
    pub category: QaCategory,
    #[serde(default)]
    pub gold_turn_ids: Vec<String>,
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CatalogItem {
    pub id: String,
    pub title: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecRecord {
    pub id: String,
    pub turns: Vec<DialogueTurn>,
    pub labels: Vec<String>,
}

/// Generic evaluation dataset; every section is optional.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dataset {
    #[serde(default)]
    pub sessions: Vec<SessionRecord>,
    #[serde(default)]
    pub qa: Vec<QaExample>,
    #[serde(default)]
    pub items: Vec<CatalogItem>,
    #[serde(default)]
    pub dialogues: Vec<RecRecord>,
}

impl Dataset {
    pub fn load(path: &Path) -> Result<Self, EvalError> {
        let text = std::fs::read_to_string(path).map_err(|e| EvalError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let ds: Dataset = serde_json::from_str(&text)
            .map_err(|e| EvalError::Schema(vec![format!("{}: {e}", path.display())]))?;
        ds.validate()?;
        Ok(ds)
    }

    /// Checks ids, references and required fields; reports every violation.
    pub fn validate(&self) -> Result<(), EvalError> {
        let mut issues = Vec::new();
        let mut ids = HashSet::new();
        for s in &self.sessions {
            if s.id.trim().is_empty() {
                issues.push("session with empty id".to_string());
            }
            if !ids.insert(s.id.as_str()) {
                issues.push(format!("duplicate id {:?}", s.id));
            }
            for t in &s.turns {
                if t.id.trim().is_empty() {
                    issues.push(format!("session {:?}: turn with empty id", s.id));
                }
                if !ids.insert(t.id.as_str()) {
                    issues.push(format!("duplicate id {:?}", t.id));
                }
                if t.text.trim().is_empty() {
                    issues.push(format!("turn {:?}: empty text", t.id));
                }
            }
        }
        for (i, q) in self.qa.iter().enumerate() {
            if q.question.trim().is_empty() {
                issues.push(format!("qa[{i}]: empty question"));
            }
            if q.answer.trim().is_empty() {
                issues.push(format!("qa[{i}]: empty answer"));
            }
            if q.gold_turn_ids.is_empty() && q.category != QaCategory::Adversarial {
                issues.push(format!("qa[{i}]: no gold turns"));
            }
            for g in &q.gold_turn_ids {
                if !ids.contains(g.as_str()) {
                    issues.push(format!("qa[{i}]: unknown gold turn {g:?}"));
                }
            }
        }
        let mut item_ids = HashSet::new();
        for it in &self.items {
            if !item_ids.insert(it.id.as_str()) {
                issues.push(format!("duplicate item id {:?}", it.id));
            }
            if it.title.trim().is_empty() {
                issues.push(format!("item {:?}: empty title", it.id));
            }
        }
        let mut dialogue_ids = HashSet::new();
        for d in &self.dialogues {
            if !dialogue_ids.insert(d.id.as_str()) {
                issues.push(format!("duplicate dialogue id {:?}", d.id));
            }
            if d.labels.iter().all(|l| l.trim().is_empty()) {
                issues.push(format!("dialogue {:?}: no labels", d.id));
            }
        }
        if issues.is_empty() {
            Ok(())
        } else {
            Err(EvalError::Schema(issues))
        }
    }

    /// Every dialogue turn as a memory item, stamped with its session date.
    pub fn turn_items(&self) -> Vec<MemoryItem> {
        self.sessions
            .iter()
            .flat_map(|s| {
                s.turns.iter().map(move |t| {
                    let mut item = MemoryItem::turn(&t.id, &s.id, &t.speaker, &t.text);
                    item.timestamp = s.date.clone();
                    item
                })
            })
            .collect()
    }

    /// One item per session holding the speaker-prefixed transcript.
    pub fn session_items(&self) -> Vec<MemoryItem> {
        self.sessions
            .iter()
            .map(|s| {
                let turns: Vec<MemoryItem> = s
                    .turns
                    .iter()
                    .map(|t| MemoryItem::turn(&t.id, &s.id, &t.speaker, &t.text))
                    .collect();
                let mut item = MemoryItem::session(&s.id, session_payload(&turns));
                item.timestamp = s.date.clone();
                item
            })
            .collect()
    }

    /// Catalog entries as entity items: the title, followed by the
    /// description when there is one.
    pub fn entity_items(&self) -> Vec<MemoryItem> {
        self.items
            .iter()
            .map(|i| match &i.description {
                Some(d) => MemoryItem::entity(&i.id, format!("{}. {d}", i.title)),
                None => MemoryItem::entity(&i.id, &i.title),
            })
            .collect()
    }
}

fn par_map<T: Sync, R: Send>(
    parallelism: usize,
    items: &[T],
    f: impl Fn(usize, &T) -> R + Sync + Send,
) -> Vec<R> {
    if parallelism <= 1 {
        return items.iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism)
        .build()
        .expect("thread pool");
    pool.install(|| items.par_iter().enumerate().map(|(i, t)| f(i, t)).collect())
}

fn memory_line(store: &MemoryStore, id: &str) -> Option<String> {
    let rec = store.get(id)?;
    let mut line = match &rec.item.speaker {
        Some(s) => format!("[{}] {s}: {}", rec.item.id, rec.item.content),
        None => format!("[{}] {}", rec.item.id, rec.item.content),
    };
    if let Some(ann) = rec.annotation.as_ref().filter(|a| !a.is_empty()) {
        let _ = write!(line, " {}", render_annotation(ann));
    }
    Some(line)
}

/// Retrieval outcome that treats "nothing to match on" as an empty hit list.
fn retrieve_or_empty(
    store: &MemoryStore,
    index: Option<&VectorIndex>,
    embedder: &dyn Embedder,
    ctx: &QueryContext,
    config: &RetrievalConfig,
) -> Result<Vec<String>, RetrievalError> {
    match retrieve(store, index, embedder, ctx, config) {
        Ok(r) => Ok(r.ranked.into_iter().map(|h| h.id).collect()),
        Err(RetrievalError::EmptyQuery) => Ok(Vec::new()),
        Err(e) => Err(e),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QaConfig {
    pub retrieval: RetrievalConfig,
    pub parallelism: usize,
}

impl Default for QaConfig {
    fn default() -> Self {
        Self {
            retrieval: RetrievalConfig {
                mode: RetrievalMode::EmbeddingBased,
                k: 5,
                policy: MatchPolicy::NameAndValue,
                components: QueryComponents::default(),
            },
            parallelism: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaExampleResult {
    pub question: String,
    pub category: QaCategory,
    pub retrieved: Vec<String>,
    /// `None` for examples without gold turns.
    pub recall: Option<f64>,
    pub f1: f64,
    pub answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaOutcome {
    pub recall: MetricReport,
    pub f1: MetricReport,
    /// Questions for which retrieval returned nothing.
    pub empty_retrievals: usize,
    pub failures: usize,
    pub examples: Vec<QaExampleResult>,
}

/// Backends used by the QA pipeline.
pub struct QaBackends<'a> {
    /// Mines question attributes.
    pub question: &'a Augmenter,
    /// Produces the answer from retrieved memory.
    pub answer: &'a Augmenter,
}

fn qa_answer_payload(store: &MemoryStore, retrieved: &[String], question: &str) -> String {
    let lines: Vec<String> = retrieved
        .iter()
        .filter_map(|id| memory_line(store, id))
        .collect();
    let memory = if lines.is_empty() {
        "(none)".to_string()
    } else {
        lines.join("\n")
    };
    format!("Memory:\n{memory}\nQuestion: {question}")
}

fn run_qa_example(
    ex: &QaExample,
    store: &MemoryStore,
    index: Option<&VectorIndex>,
    embedder: &dyn Embedder,
    backends: &QaBackends<'_>,
    config: &QaConfig,
) -> QaExampleResult {
    let mut result = QaExampleResult {
        question: ex.question.clone(),
        category: ex.category,
        retrieved: Vec::new(),
        recall: (!ex.gold_turn_ids.is_empty()).then_some(0.0),
        f1: 0.0,
        answer: String::new(),
        error: None,
    };
    let steps = || -> Result<(Vec<String>, String), EvalError> {
        let ctx = if config.retrieval.mode == RetrievalMode::Comprehensive {
            QueryContext {
                text: ex.question.clone(),
                terms: Vec::new(),
            }
        } else {
            let q = backends.question.augment_question(&ex.question)?;
            QueryContext::from_question(&ex.question, &q)
        };
        let retrieved = retrieve_or_empty(store, index, embedder, &ctx, &config.retrieval)?;
        let payload = qa_answer_payload(store, &retrieved, &ex.question);
        let answer = backends
            .answer
            .call_with_retries(QA_ANSWER, &payload, |r, _| {
                (!r.trim().is_empty()).then(|| r.trim().to_string())
            })?;
        Ok((retrieved, answer))
    };
    match steps() {
        Ok((retrieved, answer)) => {
            if !ex.gold_turn_ids.is_empty() {
                result.recall = recall_at_k(&retrieved, &ex.gold_turn_ids, config.retrieval.k).ok();
            }
            result.f1 = token_f1(&answer, &ex.answer).unwrap_or(0.0);
            result.retrieved = retrieved;
            result.answer = answer;
        }
        Err(e) => {
            log::warn!("qa example {:?} failed: {e}", ex.question);
            result.error = Some(e.to_string());
        }
    }
    result
}

/// Question augmentation, retrieval, answer generation and scoring for
/// every QA example. Failed examples score 0; examples without gold turns
/// are left out of recall.
pub fn run_qa_task(
    dataset: &Dataset,
    store: &MemoryStore,
    index: Option<&VectorIndex>,
    embedder: &dyn Embedder,
    backends: &QaBackends<'_>,
    config: &QaConfig,
) -> Result<QaOutcome, EvalError> {
    if config.retrieval.k == 0 {
        return Err(EvalError::InvalidConfig("k must be at least 1".into()));
    }
    if config.retrieval.mode == RetrievalMode::EmbeddingBased && index.is_none() {
        return Err(RetrievalError::MissingIndex.into());
    }
    let examples = par_map(config.parallelism, &dataset.qa, |_, ex| {
        run_qa_example(ex, store, index, embedder, backends, config)
    });
    let recall_scores: Vec<(&str, f64)> = examples
        .iter()
        .filter_map(|e| e.recall.map(|r| (e.category.as_str(), r)))
        .collect();
    let f1_scores: Vec<(&str, f64)> = examples
        .iter()
        .map(|e| (e.category.as_str(), e.f1))
        .collect();
    Ok(QaOutcome {
        recall: MetricReport::from_scores(
            Metric::RecallAtK,
            Some(config.retrieval.k),
            &recall_scores,
        ),
        f1: MetricReport::from_scores(Metric::F1, None, &f1_scores),
        empty_retrievals: examples
            .iter()
            .filter(|e| e.error.is_none() && e.retrieved.is_empty())
            .count(),
        failures: examples.iter().filter(|e| e.error.is_some()).count(),
        examples,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecConfig {
    pub retrieval: RetrievalConfig,
    pub n: usize,
    pub seed: u64,
    pub parallelism: usize,
}

impl Default for RecConfig {
    fn default() -> Self {
        Self {
            retrieval: RetrievalConfig {
                mode: RetrievalMode::EmbeddingBased,
                k: 10,
                policy: MatchPolicy::NameOnly,
                components: QueryComponents {
                    text: false,
                    terms: true,
                },
            },
            n: 200,
            seed: 0,
            parallelism: 1,
        }
    }
}

/// Seeded choice of `n` distinct indices below `len`, ascending.
pub fn sample_indices(len: usize, n: usize, seed: u64) -> Result<Vec<usize>, EvalError> {
    if n == 0 {
        return Err(EvalError::InvalidConfig("n must be at least 1".into()));
    }
    if n > len {
        return Err(EvalError::SampleTooLarge {
            requested: n,
            available: len,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = rand::seq::index::sample(&mut rng, len, n).into_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// Titles from a ranked-list reply, one per line, list markers removed.
pub fn parse_ranked_titles(reply: &str) -> Vec<String> {
    reply
        .lines()
        .map(|l| {
            let l = l.trim();
            let l = l.trim_start_matches(|c: char| c.is_ascii_digit());
            let l = l
                .strip_prefix('.')
                .or_else(|| l.strip_prefix(')'))
                .unwrap_or(l);
            let l = l.trim_start().trim_start_matches(['-', '*']).trim();
            l.split(" | ").next().unwrap_or(l).trim().to_string()
        })
        .filter(|l| !l.is_empty())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecExampleResult {
    pub dialogue_id: String,
    pub mined: String,
    pub candidates: Vec<String>,
    pub recommended: Vec<String>,
    pub hit_rank: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecOutcome {
    pub sampled: usize,
    /// `(dialogue id, reason)` for dialogues dropped before scoring.
    pub skipped: Vec<(String, String)>,
    pub avg_items_retrieved: f64,
    pub reports: Vec<MetricReport>,
    pub examples: Vec<RecExampleResult>,
}

impl RecOutcome {
    pub fn report(&self, metric: Metric, k: usize) -> Option<&MetricReport> {
        self.reports
            .iter()
            .find(|r| r.metric == metric && r.k == Some(k))
    }
}

/// Backends used by the recommendation pipeline.
pub struct RecBackends<'a> {
    /// Mines the dialogue's attributes.
    pub dialogue: &'a Augmenter,
    /// Ranks candidate titles.
    pub recommender: &'a Augmenter,
}

/// Sample, mask, mine dialogue attributes, retrieve candidates, ask for a
/// ranking, then score titles against the held-out labels.
pub fn run_rec_task(
    dataset: &Dataset,
    store: &MemoryStore,
    index: Option<&VectorIndex>,
    embedder: &dyn Embedder,
    backends: &RecBackends<'_>,
    config: &RecConfig,
) -> Result<RecOutcome, EvalError> {
    if config.retrieval.k == 0 {
        return Err(EvalError::InvalidConfig("k must be at least 1".into()));
    }
    let picked = sample_indices(dataset.dialogues.len(), config.n, config.seed)?;
    if config.retrieval.mode == RetrievalMode::EmbeddingBased && index.is_none() {
        return Err(RetrievalError::MissingIndex.into());
    }
    let titles: HashMap<&str, &str> = dataset
        .items
        .iter()
        .map(|i| (i.id.as_str(), i.title.as_str()))
        .collect();
    let title_of = |id: &str| -> String {
        titles
            .get(id)
            .map(|t| t.to_string())
            .or_else(|| store.get(id).map(|r| r.item.content.clone()))
            .unwrap_or_else(|| id.to_string())
    };
    let dialogues: Vec<&RecRecord> = picked.iter().map(|&i| &dataset.dialogues[i]).collect();
    let modes = Modes::new(
        Perspective::ConversationCentric,
        Granularity::NotApplicable,
        Prioritization::Basic,
    );
    let outcomes = par_map(config.parallelism, &dialogues, |_, d| {
        let masked = match mask_dialogue(&d.turns, &d.labels) {
            Ok(m) => m,
            Err(e) => return Err((d.id.clone(), e.to_string())),
        };
        let text = masked.text();
        let mut res = RecExampleResult {
            dialogue_id: d.id.clone(),
            mined: String::new(),
            candidates: Vec::new(),
            recommended: Vec::new(),
            hit_rank: None,
            error: None,
        };
        let mut steps = || -> Result<(), EvalError> {
            let ann = if config.retrieval.mode == RetrievalMode::Comprehensive {
                Annotation::default()
            } else {
                backends.dialogue.augment_text(&text, modes)?
            };
            res.mined = render_annotation(&ann);
            let ctx = QueryContext::from_annotation(&text, &ann);
            res.candidates = retrieve_or_empty(store, index, embedder, &ctx, &config.retrieval)?;
            let lines: Vec<String> = res
                .candidates
                .iter()
                .map(|id| {
                    let ann = store
                        .get(id)
                        .and_then(|r| r.annotation.as_ref())
                        .map(render_annotation)
                        .unwrap_or_default();
                    format!("- {} | {}", title_of(id), ann)
                })
                .collect();
            let payload = format!("Dialogue:\n{text}\n\nCandidates:\n{}", lines.join("\n"));
            res.recommended =
                backends
                    .recommender
                    .call_with_retries(RECOMMEND, &payload, |r, _| {
                        let t = parse_ranked_titles(r);
                        (!t.is_empty()).then_some(t)
                    })?;
            Ok(())
        };
        if let Err(e) = steps() {
            log::warn!("rec dialogue {} failed: {e}", d.id);
            res.error = Some(e.to_string());
        }
        Ok(res)
    });
    let mut skipped = Vec::new();
    let mut examples = Vec::new();
    for o in outcomes {
        match o {
            Ok(r) => examples.push(r),
            Err(s) => skipped.push(s),
        }
    }
    let mut reports = Vec::new();
    type Scores<'a> = Vec<(&'a str, f64)>;
    let mut per_metric: Vec<(Metric, usize, Scores<'_>)> = Vec::new();
    for &k in &REC_CUTOFFS {
        per_metric.push((Metric::RecallAtK, k, Vec::new()));
    }
    for &k in &REC_CUTOFFS {
        per_metric.push((Metric::NDCGAtK, k, Vec::new()));
    }
    for ex in examples.iter_mut() {
        let d = dataset
            .dialogues
            .iter()
            .find(|d| d.id == ex.dialogue_id)
            .expect("sampled dialogue");
        let gold: Vec<String> = d.labels.iter().map(|l| normalize_title(l)).collect();
        let mut seen = HashSet::new();
        let ranked: Vec<String> = ex
            .recommended
            .iter()
            .map(|t| normalize_title(t))
            .filter(|t| seen.insert(t.clone()))
            .collect();
        ex.hit_rank = ranked.iter().position(|t| gold.contains(t)).map(|p| p + 1);
        for (metric, k, scores) in per_metric.iter_mut() {
            let s = match metric {
                Metric::RecallAtK => recall_at_k(&ranked, &gold, *k)?,
                _ => ndcg_at_k(&ranked, &gold, *k)?,
            };
            scores.push((ALL, s));
        }
    }
    for (metric, k, scores) in &per_metric {
        reports.push(MetricReport::from_scores(*metric, Some(*k), scores));
    }
    let avg_items_retrieved = if examples.is_empty() {
        0.0
    } else {
        examples.iter().map(|e| e.candidates.len()).sum::<usize>() as f64 / examples.len() as f64
    };
    Ok(RecOutcome {
        sampled: picked.len(),
        skipped,
        avg_items_retrieved,
        reports,
        examples,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum SummaryLevel {
    #[default]
    TurnLevel,
    SessionLevel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum SummaryInput {
    #[default]
    AnnotationsOnly,
    AnnotationsPlusDialogues,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventConfig {
    pub level: SummaryLevel,
    pub input: SummaryInput,
    pub event_names: Vec<String>,
    pub parallelism: usize,
}

impl Default for EventConfig {
    fn default() -> Self {
        Self {
            level: SummaryLevel::TurnLevel,
            input: SummaryInput::AnnotationsOnly,
            event_names: DEFAULT_EVENT_NAMES.iter().map(|s| s.to_string()).collect(),
            parallelism: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JudgeScores {
    pub relevance: f64,
    pub coherence: f64,
    pub consistency: f64,
}

/// Reads `Relevance: n`, `Coherence: n`, `Consistency: n` lines.
pub fn parse_judge_scores(reply: &str) -> Option<JudgeScores> {
    let mut found: HashMap<String, f64> = HashMap::new();
    for line in reply.lines() {
        if let Some((name, value)) = line.split_once(':') {
            let name = name.trim().trim_matches('*').trim().to_lowercase();
            let num: String = value
                .trim()
                .chars()
                .take_while(|c| c.is_ascii_digit() || *c == '.')
                .collect();
            if let Ok(v) = num.parse::<f64>() {
                found.entry(name).or_insert(v);
            }
        }
    }
    Some(JudgeScores {
        relevance: *found.get("relevance")?,
        coherence: *found.get("coherence")?,
        consistency: *found.get("consistency")?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub session_id: String,
    pub event_pairs: usize,
    pub prompt_payload: String,
    pub summary: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<JudgeScores>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventOutcome {
    pub level: SummaryLevel,
    pub input: SummaryInput,
    pub summaries: Vec<SessionSummary>,
    /// `(session id, reason)`; includes sessions without event attributes.
    pub skipped: Vec<(String, String)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_scores: Option<JudgeScores>,
}

fn is_event_name(name: &str, names: &[String]) -> bool {
    names.iter().any(|n| normalize_name(n) == name)
}

/// Event-attribute lines for one session (`speaker: pairs` per turn for
/// turn level, one line for session level) and the number of pairs kept.
pub fn event_lines(
    session: &SessionRecord,
    store: &MemoryStore,
    level: SummaryLevel,
    event_names: &[String],
) -> (Vec<String>, usize) {
    let keep = |ann: &Annotation| ann.filtered(|p| is_event_name(p.name(), event_names));
    let mut lines = Vec::new();
    let mut count = 0;
    match level {
        SummaryLevel::TurnLevel => {
            for t in &session.turns {
                let Some(ann) = store
                    .get(&t.id)
                    .filter(|r| r.item.kind == ItemKind::DialogueTurn)
                    .and_then(|r| r.annotation.as_ref())
                else {
                    continue;
                };
                let ev = keep(ann);
                if !ev.is_empty() {
                    count += ev.len();
                    lines.push(format!("{}: {}", t.speaker, render_annotation(&ev)));
                }
            }
        }
        SummaryLevel::SessionLevel => {
            if let Some(ann) = store
                .get(&session.id)
                .filter(|r| r.item.kind == ItemKind::Session)
                .and_then(|r| r.annotation.as_ref())
            {
                let ev = keep(ann);
                if !ev.is_empty() {
                    count += ev.len();
                    lines.push(render_annotation(&ev));
                }
            }
        }
    }
    (lines, count)
}

/// Payload for the event-summary prompt.
pub fn event_payload(session: &SessionRecord, lines: &[String], input: SummaryInput) -> String {
    let annotations = lines.join("\n");
    match input {
        SummaryInput::AnnotationsOnly => annotations,
        SummaryInput::AnnotationsPlusDialogues => {
            let dialogue: Vec<String> = session
                .turns
                .iter()
                .map(|t| format!("{}: {}", t.speaker, t.text))
                .collect();
            format!("{annotations}\n\nDialogue:\n{}", dialogue.join("\n"))
        }
    }
}

fn reference_events(session: &SessionRecord) -> String {
    if session.events.is_empty() {
        return session
            .turns
            .iter()
            .map(|t| format!("{}: {}", t.speaker, t.text))
            .collect::<Vec<_>>()
            .join("\n");
    }
    session
        .events
        .iter()
        .map(|(speaker, evs)| format!("{speaker}: {}", evs.join("; ")))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Summarizes the event attributes of every dataset session and, with a
/// judge, scores each summary against the session's reference events.
pub fn run_event_summarization(
    dataset: &Dataset,
    store: &MemoryStore,
    config: &EventConfig,
    summarizer: &Augmenter,
    judge: Option<&Augmenter>,
) -> Result<EventOutcome, EvalError> {
    let results = par_map(config.parallelism, &dataset.sessions, |_, s| {
        let (lines, count) = event_lines(s, store, config.level, &config.event_names);
        if count == 0 {
            return Err((
                s.id.clone(),
                EvalError::NoEventAttributes(s.id.clone()).to_string(),
            ));
        }
        let payload = event_payload(s, &lines, config.input);
        let summary = summarizer
            .call_with_retries(EVENT_SUMMARY, &payload, |r, _| {
                (!r.trim().is_empty()).then(|| r.trim().to_string())
            })
            .map_err(|e| (s.id.clone(), e.to_string()))?;
        let scores = match judge {
            Some(j) => {
                let judge_payload = format!(
                    "Reference events:\n{}\n\nGenerated summary:\n{summary}",
                    reference_events(s)
                );
                match j.call_with_retries(GEVAL_JUDGE, &judge_payload, |r, _| parse_judge_scores(r))
                {
                    Ok(sc) => Some(sc),
                    Err(e) => {
                        log::warn!("judge failed for session {}: {e}", s.id);
                        None
                    }
                }
            }
            None => None,
        };
        Ok(SessionSummary {
            session_id: s.id.clone(),
            event_pairs: count,
            prompt_payload: payload,
            summary,
            scores,
        })
    });
    let mut summaries = Vec::new();
    let mut skipped = Vec::new();
    for r in results {
        match r {
            Ok(s) => summaries.push(s),
            Err(s) => skipped.push(s),
        }
    }
    let scored: Vec<JudgeScores> = summaries.iter().filter_map(|s| s.scores).collect();
    let mean_scores = (!scored.is_empty()).then(|| {
        let n = scored.len() as f64;
        JudgeScores {
            relevance: scored.iter().map(|s| s.relevance).sum::<f64>() / n,
            coherence: scored.iter().map(|s| s.coherence).sum::<f64>() / n,
            consistency: scored.iter().map(|s| s.consistency).sum::<f64>() / n,
        }
    });
    Ok(EventOutcome {
        level: config.level,
        input: config.input,
        summaries,
        skipped,
        mean_scores,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recall_examples() {
        assert_eq!(recall_at_k(&["a", "b", "c"], &["a"], 5).unwrap(), 1.0);
        assert_eq!(
            recall_at_k(&["a", "x", "y", "z", "w"], &["a", "b"], 5).unwrap(),
            0.5
        );
        assert_eq!(recall_at_k(&["x", "y"], &["a"], 5).unwrap(), 0.0);
        assert_eq!(
            recall_at_k::<&str, &str>(&["a"], &[], 5),
            Err(MetricError::EmptyGold)
        );
    }

    #[test]
    fn ndcg_examples() {
        assert_eq!(ndcg_at_k(&["a"], &["a"], 1).unwrap(), 1.0);
        let v = ndcg_at_k(&["x", "a", "y"], &["a"], 5).unwrap();
        assert!((v - 1.0 / 3f64.log2()).abs() < 1e-12);
        assert!((v - 0.6309).abs() < 1e-4);
        assert_eq!(ndcg_at_k(&["x", "y", "z"], &["a"], 3).unwrap(), 0.0);
    }

    #[test]
    fn f1_examples() {
        assert_eq!(token_f1("paris", "paris").unwrap(), 1.0);
        assert_eq!(token_f1("london", "paris").unwrap(), 0.0);
        let v = token_f1("paris france", "paris").unwrap();
        assert!((v - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(token_f1("x", " "), Err(MetricError::EmptyGold));
    }

    fn turns(texts: &[&str]) -> Vec<DialogueTurn> {
        texts
            .iter()
            .enumerate()
            .map(|(i, t)| DialogueTurn::new(if i % 2 == 0 { "user" } else { "bot" }, *t))
            .collect()
    }

    #[test]
    fn masking_examples() {
        let d = turns(&[
            "hi",
            "what do you like",
            "I saw Heat last week",
            "nice",
            "and heat 2?",
            "bye",
        ]);
        let m = mask_dialogue(&d, &["Heat".into()]).unwrap();
        assert_eq!(m.turns.len(), 3);
        assert_eq!(m.turns[2].text, "I saw [MASKED] last week");
        assert_eq!(m.held_out.len(), 3);
        let d = turns(&["Heat is great", "ok"]);
        assert_eq!(mask_dialogue(&d, &["Heat".into()]).unwrap().turns.len(), 1);
        assert!(matches!(
            mask_dialogue(&turns(&["nothing"]), &["Heat".into()]),
            Err(EvalError::LabelNotFound)
        ));
    }

    #[test]
    fn mask_prefers_longest_label() {
        let (t, n) = mask_text("I liked Heat 2 and Heat", &["Heat", "Heat 2"]);
        assert_eq!(t, "I liked [MASKED] and [MASKED]");
        assert_eq!(n, 2);
    }

    #[test]
    fn micro_average() {
        let r = MetricReport::from_scores(Metric::F1, None, &[("a", 1.0), ("a", 0.0), ("b", 1.0)]);
        assert_eq!(r.per_category["a"].score, 0.5);
        assert!((r.overall - 2.0 / 3.0).abs() < 1e-12);
        assert!(render_table(&[r]).contains("66.67"));
    }

    #[test]
    fn seeded_sampling() {
        let a = sample_indices(50, 10, 7).unwrap();
        assert_eq!(a, sample_indices(50, 10, 7).unwrap());
        assert_eq!(a.len(), 10);
        assert!(matches!(
            sample_indices(5, 6, 0),
            Err(EvalError::SampleTooLarge { .. })
        ));
    }

    #[test]
    fn titles_and_scores() {
        assert_eq!(normalize_title("  The  Dark-Knight! "), "the darkknight");
        assert_eq!(
            parse_ranked_titles("1. Heat\n- Alien | x\n\n* Up"),
            vec!["Heat", "Alien", "Up"]
        );
        let s = parse_judge_scores("Relevance: 4\nCoherence: 3/5\nConsistency: 5").unwrap();
        assert_eq!((s.relevance, s.coherence, s.consistency), (4.0, 3.0, 5.0));
        assert!(parse_judge_scores("Relevance: 4").is_none());
    }
}
