//! Memory items, their annotations, and the attribute inverted index.
//!
//! The on-disk format is JSONL, one [`AugmentedMemory`] per line, in insertion
//! order. An optional `<path>.report.json` sidecar keeps the augmentation
//! report that produced the annotations so corpus statistics can quote its
//! failure rate.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation::{Annotation, Granularity};
use crate::augment::AugmentationReport;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ItemKind {
    Entity,
    DialogueTurn,
    Session,
}

impl ItemKind {
    /// The only annotation granularity an item of this kind may carry.
    pub fn granularity(self) -> Granularity {
        match self {
            ItemKind::Entity => Granularity::NotApplicable,
            ItemKind::DialogueTurn => Granularity::TurnLevel,
            ItemKind::Session => Granularity::SessionLevel,
        }
    }
}

/// One unit of memory: an entity, a dialogue turn, or a whole session.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryItem {
    pub id: String,
    pub kind: ItemKind,
    pub content: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speaker: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub session_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub turn_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<String>,
}

impl MemoryItem {
    pub fn entity(id: impl Into<String>, content: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            kind: ItemKind::Entity,
            content: content.into(),
            speaker: None,
            session_id: None,
            turn_id: None,
            timestamp: None,
        }
    }

    /// A dialogue turn; `id` doubles as the turn id.
    pub fn turn(
        id: impl Into<String>,
        session_id: impl Into<String>,
        speaker: impl Into<String>,
        content: impl Into<String>,
    ) -> Self {
        let id = id.into();
        Self {
            turn_id: Some(id.clone()),
            id,
            kind: ItemKind::DialogueTurn,
            content: content.into(),
            speaker: Some(speaker.into()),
            session_id: Some(session_id.into()),
            timestamp: None,
        }
    }

    pub fn session(id: impl Into<String>, content: impl Into<String>) -> Self {
        let id = id.into();
        Self {
            session_id: Some(id.clone()),
            id,
            kind: ItemKind::Session,
            content: content.into(),
            speaker: None,
            turn_id: None,
            timestamp: None,
        }
    }

    pub fn validate(&self) -> Result<(), StoreError> {
        if self.id.is_empty() {
            return Err(StoreError::InvalidItem {
                id: self.id.clone(),
                reason: "empty id".into(),
            });
        }
        let missing = match self.kind {
            ItemKind::DialogueTurn if self.session_id.is_none() => Some("session_id"),
            ItemKind::DialogueTurn if self.turn_id.is_none() => Some("turn_id"),
            ItemKind::Session if self.session_id.is_none() => Some("session_id"),
            _ => None,
        };
        match missing {
            Some(field) => Err(StoreError::InvalidItem {
                id: self.id.clone(),
                reason: format!("{:?} item without {field}", self.kind),
            }),
            None => Ok(()),
        }
    }
}

/// Concatenates session turns as `speaker: text` lines.
pub fn session_payload<'a>(turns: impl IntoIterator<Item = &'a MemoryItem>) -> String {
    turns
        .into_iter()
        .map(|t| match &t.speaker {
            Some(s) => format!("{s}: {}", t.content),
            None => t.content.clone(),
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// An item plus its (optional) annotation; one JSONL line on disk.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentedMemory {
    #[serde(flatten)]
    pub item: MemoryItem,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotation: Option<Annotation>,
}

impl AugmentedMemory {
    pub fn validate(&self) -> Result<(), StoreError> {
        self.item.validate()?;
        if let Some(ann) = &self.annotation {
            let expected = self.item.kind.granularity();
            if ann.granularity != expected {
                return Err(StoreError::GranularityMismatch {
                    id: self.item.id.clone(),
                    kind: self.item.kind,
                    granularity: ann.granularity,
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("item id {0:?} already present")]
    DuplicateId(String),
    #[error("item {id:?} of kind {kind:?} cannot carry a {granularity:?} annotation")]
    GranularityMismatch {
        id: String,
        kind: ItemKind,
        granularity: Granularity,
    },
    #[error("invalid item {id:?}: {reason}")]
    InvalidItem { id: String, reason: String },
    #[error("{path}: not found")]
    NotFound { path: PathBuf },
    #[error("{path}:{line}: {message}")]
    Schema {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

impl StoreError {
    fn io(path: &Path, source: io::Error) -> Self {
        if source.kind() == io::ErrorKind::NotFound {
            StoreError::NotFound {
                path: path.to_path_buf(),
            }
        } else {
            StoreError::Io {
                path: path.to_path_buf(),
                source,
            }
        }
    }
}

/// How `lookup_by_attribute` compares query terms with stored pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum MatchPolicy {
    NameOnly,
    #[default]
    NameAndValue,
}

pub fn fold_value(value: &str) -> String {
    value.trim().to_lowercase()
}

/// In-memory store with an inverted index over attribute names and `(name, value)` keys.
#[derive(Debug, Clone, Default)]
pub struct MemoryStore {
    records: Vec<AugmentedMemory>,
    positions: HashMap<String, usize>,
    by_name: HashMap<String, BTreeSet<String>>,
    by_pair: HashMap<(String, String), BTreeSet<String>>,
    report: Option<AugmentationReport>,
}

impl PartialEq for MemoryStore {
    fn eq(&self, other: &Self) -> bool {
        self.records == other.records && self.report == other.report
    }
}

impl MemoryStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[AugmentedMemory] {
        &self.records
    }

    pub fn get(&self, id: &str) -> Option<&AugmentedMemory> {
        self.positions.get(id).map(|&i| &self.records[i])
    }

    pub fn contains(&self, id: &str) -> bool {
        self.positions.contains_key(id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.records.iter().map(|r| r.item.id.as_str())
    }

    pub fn augmentation_report(&self) -> Option<&AugmentationReport> {
        self.report.as_ref()
    }

    pub fn record_augmentation(&mut self, report: AugmentationReport) {
        self.report = Some(report);
    }

    /// Number of distinct attribute names in the index.
    pub fn indexed_names(&self) -> usize {
        self.by_name.len()
    }

    pub fn write(
        &mut self,
        item: MemoryItem,
        annotation: Option<Annotation>,
    ) -> Result<String, StoreError> {
        self.write_record(AugmentedMemory { item, annotation }, false)
    }

    /// Writes a record. With `overwrite`, an existing record of the same id is
    /// replaced in place (keeping its position) and its index keys are dropped.
    pub fn write_record(
        &mut self,
        record: AugmentedMemory,
        overwrite: bool,
    ) -> Result<String, StoreError> {
        record.validate()?;
        let id = record.item.id.clone();
        match self.positions.get(&id).copied() {
            Some(_) if !overwrite => Err(StoreError::DuplicateId(id)),
            Some(pos) => {
                let old = std::mem::replace(&mut self.records[pos], record);
                if let Some(ann) = &old.annotation {
                    self.unindex(&id, ann);
                }
                if let Some(ann) = self.records[pos].annotation.clone() {
                    self.index(&id, &ann);
                }
                Ok(id)
            }
            None => {
                if let Some(ann) = &record.annotation {
                    self.index(&id, ann);
                }
                self.positions.insert(id.clone(), self.records.len());
                self.records.push(record);
                Ok(id)
            }
        }
    }

    fn index(&mut self, id: &str, ann: &Annotation) {
        for pair in ann.pairs() {
            self.by_name
                .entry(pair.name().to_string())
                .or_default()
                .insert(id.to_string());
            self.by_pair
                .entry((pair.name().to_string(), fold_value(pair.value())))
                .or_default()
                .insert(id.to_string());
        }
    }

    fn unindex(&mut self, id: &str, ann: &Annotation) {
        for pair in ann.pairs() {
            if let Some(set) = self.by_name.get_mut(pair.name()) {
                set.remove(id);
                if set.is_empty() {
                    self.by_name.remove(pair.name());
                }
            }
            let key = (pair.name().to_string(), fold_value(pair.value()));
            if let Some(set) = self.by_pair.get_mut(&key) {
                set.remove(id);
                if set.is_empty() {
                    self.by_pair.remove(&key);
                }
            }
        }
    }

    /// Ids whose annotation has a pair named `name` (and, under
    /// `NameAndValue`, a case-folded equal value). A `NameAndValue` lookup
    /// without a value falls back to name matching.
    pub fn lookup_by_attribute(
        &self,
        name: &str,
        value: Option<&str>,
        policy: MatchPolicy,
    ) -> BTreeSet<String> {
        let hits = match (policy, value) {
            (MatchPolicy::NameAndValue, Some(v)) => {
                self.by_pair.get(&(name.to_string(), fold_value(v)))
            }
            _ => self.by_name.get(name),
        };
        hits.cloned().unwrap_or_default()
    }

    pub fn compute_stats(&self) -> CorpusStats {
        let mut annotated = 0usize;
        let mut pair_total = 0usize;
        let mut freq: BTreeMap<&str, usize> = BTreeMap::new();
        for ann in self.records.iter().filter_map(|r| r.annotation.as_ref()) {
            annotated += 1;
            pair_total += ann.len();
            for name in ann.names() {
                *freq.entry(name).or_default() += 1;
            }
        }
        let mut top_attributes: Vec<(String, usize)> =
            freq.into_iter().map(|(n, c)| (n.to_string(), c)).collect();
        // BTreeMap order is name-ascending; stable sort keeps it for ties
        top_attributes.sort_by_key(|a| std::cmp::Reverse(a.1));
        CorpusStats {
            total_items: self.records.len(),
            annotated_items: annotated,
            avg_attributes: if annotated == 0 {
                0.0
            } else {
                pair_total as f64 / annotated as f64
            },
            failure_rate: self.report.as_ref().map_or(0.0, |r| r.failure_rate),
            top_attributes,
        }
    }
}

/// Corpus-level annotation statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub total_items: usize,
    pub annotated_items: usize,
    pub avg_attributes: f64,
    pub failure_rate: f64,
    /// Sorted by frequency desc, then name asc. Each item counts once per name.
    pub top_attributes: Vec<(String, usize)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LoadMode {
    #[default]
    Strict,
    Lenient,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoadWarning {
    pub line: usize,
    pub message: String,
}

fn report_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".report.json");
    PathBuf::from(name)
}

/// Reads a JSONL store, rebuilding the index. Blank lines are ignored.
pub fn load_store(
    path: &Path,
    mode: LoadMode,
) -> Result<(MemoryStore, Vec<LoadWarning>), StoreError> {
    let file = File::open(path).map_err(|e| StoreError::io(path, e))?;
    let mut store = MemoryStore::new();
    let mut warnings = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| StoreError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let outcome = serde_json::from_str::<AugmentedMemory>(&line)
            .map_err(|e| e.to_string())
            .and_then(|rec| store.write_record(rec, false).map_err(|e| e.to_string()));
        if let Err(message) = outcome {
            match mode {
                LoadMode::Strict => {
                    return Err(StoreError::Schema {
                        path: path.to_path_buf(),
                        line: line_no,
                        message,
                    })
                }
                LoadMode::Lenient => {
                    log::warn!("{}:{line_no}: skipping record: {message}", path.display());
                    warnings.push(LoadWarning {
                        line: line_no,
                        message,
                    });
                }
            }
        }
    }
    let sidecar = report_path(path);
    if sidecar.exists() {
        let text = fs::read_to_string(&sidecar).map_err(|e| StoreError::io(&sidecar, e))?;
        let report = serde_json::from_str(&text).map_err(|e| StoreError::Schema {
            path: sidecar.clone(),
            line: e.line(),
            message: e.to_string(),
        })?;
        store.record_augmentation(report);
    }
    Ok((store, warnings))
}

/// Writes the store as JSONL via a temp file and rename.
pub fn save_store(store: &MemoryStore, path: &Path) -> Result<(), StoreError> {
    let tmp = {
        let mut name = path.as_os_str().to_owned();
        name.push(".tmp");
        PathBuf::from(name)
    };
    {
        let file = File::create(&tmp).map_err(|e| StoreError::io(&tmp, e))?;
        let mut out = BufWriter::new(file);
        for rec in &store.records {
            let line = serde_json::to_string(rec).expect("records always serialize");
            writeln!(out, "{line}").map_err(|e| StoreError::io(&tmp, e))?;
        }
        out.flush().map_err(|e| StoreError::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| StoreError::io(path, e))?;
    let sidecar = report_path(path);
    match &store.report {
        Some(report) => {
            let text = serde_json::to_string_pretty(report).expect("report serializes");
            fs::write(&sidecar, text + "\n").map_err(|e| StoreError::io(&sidecar, e))?;
        }
        None if sidecar.exists() => {
            fs::remove_file(&sidecar).map_err(|e| StoreError::io(&sidecar, e))?;
        }
        None => {}
    }
    Ok(())
}

/// Reads plain `MemoryItem` JSONL (no annotations), reporting errors with line numbers.
pub fn load_items(path: &Path) -> Result<Vec<MemoryItem>, StoreError> {
    let file = File::open(path).map_err(|e| StoreError::io(path, e))?;
    let mut items = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| StoreError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let item: MemoryItem = serde_json::from_str(&line)
            .map_err(|e| e.to_string())
            .and_then(|it: MemoryItem| it.validate().map(|_| it).map_err(|e| e.to_string()))
            .map_err(|message| StoreError::Schema {
                path: path.to_path_buf(),
                line: idx + 1,
                message,
            })?;
        items.push(item);
    }
    Ok(items)
}

/// Single-writer, many-reader wrapper. Readers take an immutable snapshot;
/// each write batch publishes a new one.
#[derive(Debug, Default)]
pub struct SharedStore {
    current: RwLock<Arc<MemoryStore>>,
    writer: Mutex<()>,
}

impl SharedStore {
    pub fn new(store: MemoryStore) -> Self {
        Self {
            current: RwLock::new(Arc::new(store)),
            writer: Mutex::new(()),
        }
    }

    pub fn snapshot(&self) -> Arc<MemoryStore> {
        self.current.read().expect("store lock poisoned").clone()
    }

    /// Applies every record or none: the batch is staged on a copy and
    /// published only if all writes succeed.
    pub fn write_batch(
        &self,
        records: impl IntoIterator<Item = AugmentedMemory>,
        overwrite: bool,
    ) -> Result<usize, StoreError> {
        let _guard = self.writer.lock().expect("writer lock poisoned");
        let mut staged = (*self.snapshot()).clone();
        let mut written = 0;
        for rec in records {
            staged.write_record(rec, overwrite)?;
            written += 1;
        }
        *self.current.write().expect("store lock poisoned") = Arc::new(staged);
        Ok(written)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotation::{AttributePair, Modes, Prioritization};

    fn ann(pairs: &[(&str, &str)], modes: Modes) -> Annotation {
        Annotation::from_pairs(pairs.iter().map(|(n, v)| AttributePair::new(n, v).unwrap()))
            .with_modes(modes)
    }

    fn entity_ann(pairs: &[(&str, &str)]) -> Annotation {
        ann(pairs, Modes::entity(Prioritization::Basic))
    }

    fn lookup_store() -> MemoryStore {
        let mut s = MemoryStore::new();
        s.write(
            MemoryItem::entity("A", "a"),
            Some(entity_ann(&[("genre", "Drama")])),
        )
        .unwrap();
        s.write(
            MemoryItem::entity("B", "b"),
            Some(entity_ann(&[("genre", "Action")])),
        )
        .unwrap();
        s
    }

    fn set(ids: &[&str]) -> BTreeSet<String> {
        ids.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn write_counts_and_index() {
        let mut s = MemoryStore::new();
        s.write(
            MemoryItem::entity("m1", "Heat"),
            Some(entity_ann(&[("genre", "crime"), ("year", "1995")])),
        )
        .unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s.indexed_names(), 2);
    }

    #[test]
    fn duplicate_id_rejected() {
        let mut s = MemoryStore::new();
        s.write(MemoryItem::entity("m1", "Heat"), None).unwrap();
        assert!(matches!(
            s.write(MemoryItem::entity("m1", "Heat"), None),
            Err(StoreError::DuplicateId(_))
        ));
    }

    #[test]
    fn granularity_mismatch_rejected() {
        let mut s = MemoryStore::new();
        let err = s
            .write(
                MemoryItem::turn("D1:1", "S1", "Ana", "hi"),
                Some(ann(&[("a", "1")], Modes::session(Prioritization::Basic))),
            )
            .unwrap_err();
        assert!(matches!(err, StoreError::GranularityMismatch { .. }));
    }

    #[test]
    fn turn_without_session_rejected() {
        let mut item = MemoryItem::turn("D1:1", "S1", "Ana", "hi");
        item.session_id = None;
        assert!(matches!(
            MemoryStore::new().write(item, None),
            Err(StoreError::InvalidItem { .. })
        ));
    }

    #[test]
    fn lookup_examples() {
        let s = lookup_store();
        assert_eq!(
            s.lookup_by_attribute("genre", None, MatchPolicy::NameOnly),
            set(&["A", "B"])
        );
        assert_eq!(
            s.lookup_by_attribute("genre", Some("drama"), MatchPolicy::NameAndValue),
            set(&["A"])
        );
        assert!(s
            .lookup_by_attribute("director", None, MatchPolicy::NameOnly)
            .is_empty());
    }

    #[test]
    fn overwrite_reindexes() {
        let mut s = lookup_store();
        s.write_record(
            AugmentedMemory {
                item: MemoryItem::entity("A", "a"),
                annotation: Some(entity_ann(&[("director", "Mann")])),
            },
            true,
        )
        .unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s.records()[0].item.id, "A");
        assert_eq!(
            s.lookup_by_attribute("genre", None, MatchPolicy::NameOnly),
            set(&["B"])
        );
        assert_eq!(
            s.lookup_by_attribute("director", None, MatchPolicy::NameOnly),
            set(&["A"])
        );
    }

    #[test]
    fn stats_examples() {
        let mut s = MemoryStore::new();
        s.write(
            MemoryItem::entity("a", "a"),
            Some(entity_ann(&[("genre", "x"), ("year", "1")])),
        )
        .unwrap();
        s.write(
            MemoryItem::entity("b", "b"),
            Some(entity_ann(&[
                ("genre", "y"),
                ("genre", "z"),
                ("mood", "dark"),
            ])),
        )
        .unwrap();
        s.write(
            MemoryItem::entity("c", "c"),
            Some(entity_ann(&[
                ("a", "1"),
                ("b", "2"),
                ("c", "3"),
                ("d", "4"),
            ])),
        )
        .unwrap();
        s.write(MemoryItem::entity("d", "d"), None).unwrap();
        let st = s.compute_stats();
        assert_eq!(st.total_items, 4);
        assert_eq!(st.avg_attributes, 3.0);
        assert_eq!(st.top_attributes[0], ("genre".to_string(), 2));
        assert_eq!(st.top_attributes[1], ("a".to_string(), 1));
        assert_eq!(st.failure_rate, 0.0);

        let empty = MemoryStore::new().compute_stats();
        assert_eq!(empty.avg_attributes, 0.0);
        assert!(empty.top_attributes.is_empty());
    }

    #[test]
    fn jsonl_field_order() {
        let rec = AugmentedMemory {
            item: MemoryItem::turn("D1:1", "S1", "Ana", "hello"),
            annotation: Some(ann(
                &[("emotion", "happy")],
                Modes::turn(Prioritization::Basic),
            )),
        };
        let line = serde_json::to_string(&rec).unwrap();
        assert_eq!(
            line,
            r#"{"id":"D1:1","kind":"DialogueTurn","content":"hello","speaker":"Ana","session_id":"S1","turn_id":"D1:1","annotation":{"pairs":[{"name":"emotion","value":"happy"}],"perspective":"ConversationCentric","granularity":"TurnLevel","prioritization":"Basic"}}"#
        );
    }

    #[test]
    fn missing_file_is_not_found() {
        let err = load_store(Path::new("/nonexistent/store.jsonl"), LoadMode::Strict).unwrap_err();
        assert!(matches!(err, StoreError::NotFound { .. }));
    }

    #[test]
    fn shared_store_snapshots_are_immutable() {
        let shared = SharedStore::new(lookup_store());
        let before = shared.snapshot();
        shared
            .write_batch(
                [AugmentedMemory {
                    item: MemoryItem::entity("C", "c"),
                    annotation: None,
                }],
                false,
            )
            .unwrap();
        assert_eq!(before.len(), 2);
        assert_eq!(shared.snapshot().len(), 3);

        // failed batch publishes nothing
        let err = shared.write_batch(
            [
                AugmentedMemory {
                    item: MemoryItem::entity("D", "d"),
                    annotation: None,
                },
                AugmentedMemory {
                    item: MemoryItem::entity("A", "a"),
                    annotation: None,
                },
            ],
            false,
        );
        assert!(err.is_err());
        assert_eq!(shared.snapshot().len(), 3);
    }
}
