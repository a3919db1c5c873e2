//! Attribute mining: prompt selection by mode, backend calls with retries,
//! lenient parsing of the reply, and per-corpus failure accounting.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation::{
    is_null_value, normalize_name, parse_annotation_lenient, parse_turn_annotations_lenient,
    Annotation, Granularity, Modes, Perspective, Prioritization,
};
use crate::backend::{BackendError, ChatBackend, ChatRequest};
use crate::prompts::{
    build_prompt, PromptError, ResponseFormat, TemplateRegistry, DEFAULT_PAYLOAD_BUDGET, QUESTION,
};
use crate::store::{ItemKind, MemoryItem, MemoryStore, StoreError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FailureReason {
    Transport,
    Refusal,
    Unparseable,
}

impl fmt::Display for FailureReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FailureReason::Transport => "transport",
            FailureReason::Refusal => "refusal",
            FailureReason::Unparseable => "unparseable",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{reason} after {attempts} attempt(s): {detail}")]
pub struct AugmentFailure {
    pub reason: FailureReason,
    pub attempts: u32,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AugmentError {
    #[error("invalid mode combination {0:?}")]
    InvalidModes(Modes),
    #[error("no template registered for {0:?}")]
    MissingTemplate(String),
    #[error("item {0:?} has empty content")]
    EmptyContent(String),
    #[error("duplicate item id {0:?} in corpus")]
    DuplicateId(String),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Failure(#[from] AugmentFailure),
}

impl AugmentError {
    /// Short reason recorded in an [`AugmentationReport`].
    pub fn reason(&self) -> String {
        match self {
            AugmentError::Failure(f) => f.reason.to_string(),
            AugmentError::Prompt(e) => format!("prompt: {e}"),
            other => format!("invalid input: {other}"),
        }
    }
}

/// Counts for one augmentation pass over a corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct AugmentationReport {
    pub total: usize,
    pub succeeded: usize,
    pub failed: usize,
    pub failure_rate: f64,
    /// `(item id, reason)`, sorted by id.
    pub failures: Vec<(String, String)>,
}

impl AugmentationReport {
    pub fn new(total: usize, mut failures: Vec<(String, String)>) -> Self {
        failures.sort();
        let failed = failures.len();
        assert!(failed <= total, "more failures than items");
        Self {
            total,
            succeeded: total - failed,
            failed,
            failure_rate: if total == 0 {
                0.0
            } else {
                failed as f64 / total as f64
            },
            failures,
        }
    }

    pub fn is_consistent(&self) -> bool {
        self.succeeded + self.failed == self.total && self.failures.len() == self.failed
    }
}

/// Result of [`augment_question`](Augmenter::augment_question).
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct QueryAnnotation {
    pub persons: Vec<String>,
    /// Normalized attribute names.
    pub attributes: Vec<String>,
}

fn bracket_list(text: &str, label: &str) -> Option<Vec<String>> {
    let lower = text.to_ascii_lowercase();
    let start = lower.find(&label.to_ascii_lowercase())? + label.len();
    let rest = text[start..].trim_start();
    let inner = rest.strip_prefix('[')?;
    let end = inner.find(']')?;
    Some(
        inner[..end]
            .split(',')
            .map(str::trim)
            .filter(|s| !is_null_value(s))
            .map(str::to_string)
            .collect(),
    )
}

/// Parses `Person:[a, b]Attributes:[x, y]`; either segment may be missing,
/// but not both.
pub fn parse_query_annotation(text: &str) -> Option<QueryAnnotation> {
    let persons = bracket_list(text, "Person:");
    let attributes = bracket_list(text, "Attributes:");
    if persons.is_none() && attributes.is_none() {
        return None;
    }
    let mut seen = HashSet::new();
    let persons: Vec<String> = persons
        .unwrap_or_default()
        .into_iter()
        .filter(|p| seen.insert(p.clone()))
        .collect();
    let mut seen = HashSet::new();
    let attributes = attributes
        .unwrap_or_default()
        .iter()
        .map(|a| normalize_name(a))
        .filter(|a| !a.is_empty() && seen.insert(a.clone()))
        .collect();
    Some(QueryAnnotation {
        persons,
        attributes,
    })
}

/// Payload sent for one item: turns carry their id and speaker so
/// turn-scoped replies can point back at them.
pub fn item_payload(item: &MemoryItem) -> String {
    match item.kind {
        ItemKind::DialogueTurn => {
            let id = item.turn_id.as_deref().unwrap_or(&item.id);
            match &item.speaker {
                Some(s) => format!("[{id}] {s}: {}", item.content),
                None => format!("[{id}] {}", item.content),
            }
        }
        ItemKind::Entity | ItemKind::Session => item.content.clone(),
    }
}

/// Modes implied by an item's kind.
pub fn modes_for_kind(kind: ItemKind, prioritization: Prioritization) -> Modes {
    match kind {
        ItemKind::Entity => Modes::entity(prioritization),
        ItemKind::DialogueTurn => Modes::turn(prioritization),
        ItemKind::Session => Modes::session(prioritization),
    }
}

fn parse_reply(text: &str, format: ResponseFormat) -> Annotation {
    if format == ResponseFormat::TurnScopedPairList {
        let groups = parse_turn_annotations_lenient(text).value;
        if !groups.is_empty() {
            let mut merged = Annotation::default();
            for g in &groups {
                merged.extend_from(&g.annotation);
            }
            return merged;
        }
    }
    parse_annotation_lenient(text).value
}

pub struct AugmentOutcome {
    /// Successful annotations in input order.
    pub annotations: Vec<(String, Annotation)>,
    pub report: AugmentationReport,
}

impl AugmentOutcome {
    /// Writes `items` (in order) with their annotations into a fresh store
    /// and records the report.
    pub fn into_store(self, items: &[MemoryItem]) -> Result<MemoryStore, StoreError> {
        let mut anns: HashMap<String, Annotation> = self.annotations.into_iter().collect();
        let mut store = MemoryStore::new();
        for item in items {
            let ann = anns.remove(&item.id);
            store.write(item.clone(), ann)?;
        }
        store.record_augmentation(self.report);
        Ok(store)
    }
}

/// Drives a [`ChatBackend`] with the registry's templates.
#[derive(Clone)]
pub struct Augmenter {
    registry: TemplateRegistry,
    backend: Arc<dyn ChatBackend>,
    max_retries: u32,
    payload_budget: usize,
    parallelism: usize,
}

impl Augmenter {
    pub fn new(backend: Arc<dyn ChatBackend>) -> Self {
        Self {
            registry: TemplateRegistry::with_defaults(),
            backend,
            max_retries: 2,
            payload_budget: DEFAULT_PAYLOAD_BUDGET,
            parallelism: 1,
        }
    }

    pub fn with_registry(mut self, registry: TemplateRegistry) -> Self {
        self.registry = registry;
        self
    }

    pub fn with_max_retries(mut self, max_retries: u32) -> Self {
        self.max_retries = max_retries;
        self
    }

    pub fn with_payload_budget(mut self, budget: usize) -> Self {
        self.payload_budget = budget;
        self
    }

    pub fn with_parallelism(mut self, width: usize) -> Self {
        self.parallelism = width.max(1);
        self
    }

    pub fn registry(&self) -> &TemplateRegistry {
        &self.registry
    }

    pub fn backend(&self) -> &Arc<dyn ChatBackend> {
        &self.backend
    }

    /// Calls template `template_id` with `payload`, resending the same
    /// prompt until `accept` yields a value. Refusals are final.
    pub fn call_with_retries<T>(
        &self,
        template_id: &str,
        payload: &str,
        mut accept: impl FnMut(&str, ResponseFormat) -> Option<T>,
    ) -> Result<T, AugmentError> {
        let template = self
            .registry
            .get(template_id)
            .ok_or_else(|| AugmentError::MissingTemplate(template_id.to_string()))?;
        let prompt = build_prompt(template, payload, self.payload_budget)?;
        let request = ChatRequest {
            template_id,
            format: template.format(),
            payload,
            prompt: &prompt,
        };
        let mut last = (FailureReason::Unparseable, String::new());
        let mut attempts = 0;
        while attempts <= self.max_retries {
            attempts += 1;
            match self.backend.complete(&request) {
                Ok(reply) => match accept(&reply, template.format()) {
                    Some(v) => return Ok(v),
                    None => {
                        let snippet: String = reply.chars().take(80).collect();
                        last = (FailureReason::Unparseable, format!("reply {snippet:?}"));
                    }
                },
                Err(BackendError::Refusal(msg)) => {
                    return Err(AugmentFailure {
                        reason: FailureReason::Refusal,
                        attempts,
                        detail: msg,
                    }
                    .into())
                }
                Err(BackendError::Transport(msg)) => last = (FailureReason::Transport, msg),
            }
            log::debug!("{template_id}: attempt {attempts} failed ({})", last.0);
        }
        Err(AugmentFailure {
            reason: last.0,
            attempts,
            detail: last.1,
        }
        .into())
    }

    /// Mines an annotation for free text under `modes`.
    pub fn augment_text(&self, payload: &str, modes: Modes) -> Result<Annotation, AugmentError> {
        if modes.perspective == Perspective::EntityCentric
            && modes.granularity != Granularity::NotApplicable
        {
            return Err(AugmentError::InvalidModes(modes));
        }
        let template_id =
            TemplateRegistry::template_for(modes).ok_or(AugmentError::InvalidModes(modes))?;
        self.call_with_retries(template_id, payload, |reply, format| {
            let ann = parse_reply(reply, format);
            (!ann.is_empty()).then(|| ann.with_modes(modes))
        })
    }

    pub fn mine_attributes(
        &self,
        item: &MemoryItem,
        modes: Modes,
    ) -> Result<Annotation, AugmentError> {
        if item.content.trim().is_empty() {
            return Err(AugmentError::EmptyContent(item.id.clone()));
        }
        self.augment_text(&item_payload(item), modes)
    }

    pub fn augment_question(&self, question: &str) -> Result<QueryAnnotation, AugmentError> {
        self.call_with_retries(QUESTION, question, |reply, _| parse_query_annotation(reply))
    }

    /// Augments every item under the same modes.
    pub fn augment_corpus(
        &self,
        items: &[MemoryItem],
        modes: Modes,
    ) -> Result<AugmentOutcome, AugmentError> {
        self.augment_corpus_with(items, |_| modes)
    }

    /// Augments every item under `modes_of(item)`. Individual failures are
    /// recorded in the report; only duplicate ids abort.
    pub fn augment_corpus_with(
        &self,
        items: &[MemoryItem],
        modes_of: impl Fn(&MemoryItem) -> Modes + Sync,
    ) -> Result<AugmentOutcome, AugmentError> {
        let mut seen = HashSet::new();
        for item in items {
            if !seen.insert(item.id.as_str()) {
                return Err(AugmentError::DuplicateId(item.id.clone()));
            }
        }
        let work = |item: &MemoryItem| self.mine_attributes(item, modes_of(item));
        let results: Vec<Result<Annotation, AugmentError>> = if self.parallelism > 1 {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(self.parallelism)
                .build()
                .expect("thread pool");
            pool.install(|| items.par_iter().map(work).collect())
        } else {
            items.iter().map(work).collect()
        };
        let mut annotations = Vec::new();
        let mut failures = Vec::new();
        for (item, res) in items.iter().zip(results) {
            match res {
                Ok(ann) => annotations.push((item.id.clone(), ann)),
                Err(e) => {
                    log::warn!("augmentation failed for {}: {e}", item.id);
                    failures.push((item.id.clone(), e.reason()));
                }
            }
        }
        Ok(AugmentOutcome {
            annotations,
            report: AugmentationReport::new(items.len(), failures),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotation::AttributePair;
    use crate::backend::{FnBackend, MockBackend, MockRules, StaticBackend};
    use std::sync::atomic::{AtomicU32, Ordering};

    fn mock() -> Augmenter {
        Augmenter::new(Arc::new(MockBackend::new(MockRules::builtin())))
    }

    fn pair(n: &str, v: &str) -> AttributePair {
        AttributePair::new(n, v).unwrap()
    }

    #[test]
    fn mine_turn_with_mock() {
        let item = MemoryItem::turn("D1:1", "S1", "Ana", "I loved the thriller Heat");
        let ann = mock()
            .mine_attributes(&item, Modes::turn(Prioritization::Basic))
            .unwrap();
        assert!(ann.pairs().contains(&pair("sentiment", "positive")));
        assert!(ann.pairs().contains(&pair("genre", "thriller")));
        assert_eq!(ann.modes(), Modes::turn(Prioritization::Basic));
    }

    #[test]
    fn empty_reply_exhausts_retries() {
        let calls = Arc::new(AtomicU32::new(0));
        let c = calls.clone();
        let backend = FnBackend(move |_: &ChatRequest<'_>| {
            c.fetch_add(1, Ordering::SeqCst);
            Ok(String::new())
        });
        let aug = Augmenter::new(Arc::new(backend)).with_max_retries(2);
        let err = aug
            .mine_attributes(
                &MemoryItem::entity("m1", "Heat"),
                Modes::entity(Prioritization::Basic),
            )
            .unwrap_err();
        match err {
            AugmentError::Failure(f) => {
                assert_eq!(f.reason, FailureReason::Unparseable);
                assert_eq!(f.attempts, 3);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(calls.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn refusal_is_not_retried() {
        let calls = Arc::new(AtomicU32::new(0));
        let c = calls.clone();
        let backend = FnBackend(move |_: &ChatRequest<'_>| {
            c.fetch_add(1, Ordering::SeqCst);
            Err(BackendError::Refusal("no".into()))
        });
        let err = Augmenter::new(Arc::new(backend))
            .augment_text("Heat", Modes::entity(Prioritization::Basic))
            .unwrap_err();
        assert!(matches!(
            err,
            AugmentError::Failure(AugmentFailure {
                reason: FailureReason::Refusal,
                attempts: 1,
                ..
            })
        ));
        assert_eq!(calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn entity_with_granularity_rejected() {
        let modes = Modes::new(
            Perspective::EntityCentric,
            Granularity::TurnLevel,
            Prioritization::Basic,
        );
        assert_eq!(
            mock().augment_text("Heat", modes),
            Err(AugmentError::InvalidModes(modes))
        );
    }

    #[test]
    fn question_formats() {
        assert_eq!(
            parse_query_annotation("Person:[Ana]Attributes:[job, city]").unwrap(),
            QueryAnnotation {
                persons: vec!["Ana".into()],
                attributes: vec!["job".into(), "city".into()],
            }
        );
        assert_eq!(
            parse_query_annotation("Attributes:[genre]").unwrap(),
            QueryAnnotation {
                persons: vec![],
                attributes: vec!["genre".into()],
            }
        );
        assert_eq!(parse_query_annotation("no idea"), None);
        let aug = Augmenter::new(Arc::new(StaticBackend("no idea".into())));
        assert!(matches!(
            aug.augment_question("who?"),
            Err(AugmentError::Failure(AugmentFailure {
                reason: FailureReason::Unparseable,
                ..
            }))
        ));
    }

    #[test]
    fn corpus_report_counts() {
        let items: Vec<MemoryItem> = ["a drama", "a comedy", "a horror film"]
            .iter()
            .enumerate()
            .map(|(i, c)| MemoryItem::entity(format!("m{i}"), *c))
            .collect();
        let out = mock()
            .augment_corpus(&items, Modes::entity(Prioritization::Basic))
            .unwrap();
        assert_eq!(out.report.total, 3);
        assert_eq!(out.report.failed, 0);
        assert_eq!(out.report.failure_rate, 0.0);
        assert_eq!(out.annotations.len(), 3);
    }

    #[test]
    fn forced_failure_rate() {
        let mut items: Vec<MemoryItem> = (0..1000)
            .map(|i| MemoryItem::entity(format!("m{i:04}"), "a drama"))
            .collect();
        items[500].content = "untitled".into();
        let out = mock()
            .with_parallelism(4)
            .augment_corpus(&items, Modes::entity(Prioritization::Basic))
            .unwrap();
        assert_eq!(out.report.failure_rate, 0.001);
        assert_eq!(
            out.report.failures,
            vec![("m0500".into(), "unparseable".into())]
        );
        assert!(out.report.is_consistent());
        assert_eq!(out.annotations[500].0, "m0501");
    }

    #[test]
    fn duplicate_ids_rejected() {
        let items = vec![
            MemoryItem::entity("a", "drama"),
            MemoryItem::entity("a", "comedy"),
        ];
        assert!(matches!(
            mock().augment_corpus(&items, Modes::entity(Prioritization::Basic)),
            Err(AugmentError::DuplicateId(_))
        ));
    }
}
