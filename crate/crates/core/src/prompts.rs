//! Prompt templates and the registry that selects them by augmentation mode.
//!
//! Every template body holds exactly one `{}` placeholder which receives the
//! payload (an entity title, a dialogue turn, a question, ...). Templates can
//! be overridden from a directory holding one plain-text file per template;
//! the file stem is the template id.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation::{Granularity, Modes, Perspective, Prioritization};

pub const PLACEHOLDER: &str = "{}";
/// Default payload budget, in characters.
pub const DEFAULT_PAYLOAD_BUDGET: usize = 100_000;

pub const QUESTION: &str = "question";
pub const TURN_BASIC: &str = "turn_basic";
pub const TURN_PRIORITY: &str = "turn_priority";
pub const SESSION_BASIC: &str = "session_basic";
pub const SESSION_PRIORITY: &str = "session_priority";
pub const ENTITY_BASIC: &str = "entity_basic";
pub const ENTITY_PRIORITY: &str = "entity_priority";
pub const DIALOGUE_RECOMMENDATION: &str = "dialogue_recommendation";
pub const QA_ANSWER: &str = "qa_answer";
pub const RECOMMEND: &str = "recommend";
pub const EVENT_SUMMARY: &str = "event_summary";
pub const GEVAL_JUDGE: &str = "geval_judge";
pub const PERSUASIVENESS_JUDGE: &str = "persuasiveness_judge";
pub const RELATEDNESS_JUDGE: &str = "relatedness_judge";

/// What a template asks the model to emit, and so how the reply is parsed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ResponseFormat {
    /// `[attribute]<value> ...`
    PairList,
    /// `{speaker:[dialog id]:[attribute]<value>}`
    TurnScopedPairList,
    /// `Person:[names]Attributes:[names]`
    PersonAttributes,
    /// One title per line, best first.
    RankedList,
    /// `Relevance: n` / `Coherence: n` / `Consistency: n`
    Scores,
    FreeText,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TemplateError {
    #[error("template {id:?} must contain exactly one `{{}}` placeholder, found {found}")]
    Placeholder { id: String, found: usize },
    #[error("template id {0:?} already registered")]
    DuplicateId(String),
    #[error("template id must be non-empty")]
    EmptyId,
    #[error("cannot read template {path}: {message}")]
    Io { path: PathBuf, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PromptError {
    #[error("payload is empty")]
    EmptyPayload,
    #[error("payload of {len} characters exceeds the budget of {budget}")]
    LengthBudgetExceeded { len: usize, budget: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PromptTemplate {
    id: String,
    body: String,
    format: ResponseFormat,
}

impl PromptTemplate {
    pub fn new(
        id: impl Into<String>,
        body: impl Into<String>,
        format: ResponseFormat,
    ) -> Result<Self, TemplateError> {
        let id = id.into();
        let body = body.into();
        if id.is_empty() {
            return Err(TemplateError::EmptyId);
        }
        let found = body.matches(PLACEHOLDER).count();
        if found != 1 {
            return Err(TemplateError::Placeholder { id, found });
        }
        Ok(Self { id, body, format })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn body(&self) -> &str {
        &self.body
    }

    pub fn format(&self) -> ResponseFormat {
        self.format
    }
}

/// Substitutes `payload` for the placeholder; the rest of the body is untouched.
pub fn build_prompt(
    template: &PromptTemplate,
    payload: &str,
    budget: usize,
) -> Result<String, PromptError> {
    if payload.trim().is_empty() {
        return Err(PromptError::EmptyPayload);
    }
    if payload.len() > budget {
        let len = payload.chars().count();
        if len > budget {
            return Err(PromptError::LengthBudgetExceeded { len, budget });
        }
    }
    Ok(template.body.replacen(PLACEHOLDER, payload, 1))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateRegistry {
    templates: BTreeMap<String, PromptTemplate>,
}

impl Default for TemplateRegistry {
    fn default() -> Self {
        Self::with_defaults()
    }
}

impl TemplateRegistry {
    pub fn empty() -> Self {
        Self {
            templates: BTreeMap::new(),
        }
    }

    pub fn with_defaults() -> Self {
        let mut reg = Self::empty();
        for (id, body, format) in DEFAULTS {
            let template = PromptTemplate::new(*id, *body, *format)
                .expect("built-in templates are well formed");
            reg.register(template).expect("built-in ids are unique");
        }
        reg
    }

    pub fn register(&mut self, template: PromptTemplate) -> Result<(), TemplateError> {
        if self.templates.contains_key(template.id()) {
            return Err(TemplateError::DuplicateId(template.id.clone()));
        }
        self.templates.insert(template.id.clone(), template);
        Ok(())
    }

    /// Inserts or replaces a template.
    pub fn replace(&mut self, template: PromptTemplate) {
        self.templates.insert(template.id.clone(), template);
    }

    pub fn get(&self, id: &str) -> Option<&PromptTemplate> {
        self.templates.get(id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.templates.keys().map(String::as_str)
    }

    /// Overrides templates from `dir`. A file replacing a known id keeps that
    /// id's response format; new ids are parsed as pair lists.
    pub fn load_dir(&mut self, dir: &Path) -> Result<usize, TemplateError> {
        let io_err = |path: &Path, e: std::io::Error| TemplateError::Io {
            path: path.to_path_buf(),
            message: e.to_string(),
        };
        let mut entries: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| io_err(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        entries.sort();
        let mut loaded = 0;
        for path in entries {
            let Some(id) = path.file_stem().and_then(|s| s.to_str()) else {
                continue;
            };
            if id.starts_with('.') {
                continue;
            }
            let body = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
            let body = body.strip_suffix('\n').unwrap_or(&body);
            let format = self
                .get(id)
                .map_or(ResponseFormat::PairList, PromptTemplate::format);
            self.replace(PromptTemplate::new(id, body, format)?);
            loaded += 1;
        }
        Ok(loaded)
    }

    /// Template id used to mine attributes under `modes`, or `None` for
    /// combinations that are not meaningful (entity-centric with a granularity).
    pub fn template_for(modes: Modes) -> Option<&'static str> {
        use Granularity::*;
        use Perspective::*;
        use Prioritization::*;
        match (modes.perspective, modes.granularity, modes.prioritization) {
            (EntityCentric, NotApplicable, Basic) => Some(ENTITY_BASIC),
            (EntityCentric, NotApplicable, Priority) => Some(ENTITY_PRIORITY),
            (EntityCentric, _, _) => None,
            (ConversationCentric, TurnLevel, Basic) => Some(TURN_BASIC),
            (ConversationCentric, TurnLevel, Priority) => Some(TURN_PRIORITY),
            (ConversationCentric, SessionLevel, Basic) => Some(SESSION_BASIC),
            (ConversationCentric, SessionLevel, Priority) => Some(SESSION_PRIORITY),
            (ConversationCentric, NotApplicable, _) => Some(DIALOGUE_RECOMMENDATION),
        }
    }
}

const DEFAULTS: &[(&str, &str, ResponseFormat)] = &[
    (
        QUESTION,
        "Given the following question, determine what are the main inquiry attribute to look \
for and the person the question is for. Respond in the format: Person:[names]Attributes:[].\n\
Question: {}",
        ResponseFormat::PersonAttributes,
    ),
    (
        TURN_BASIC,
        "You are an expert annotator who generates the most relevant attributes in a \
conversation. Given the conversation below, identify the key attributes and their values on a \
turn by turn level.\n\
Attributes should be specific with most relevant values only. Don't include speaker name. \
Include value information that you find relevant and their names if mentioned. Each dialogue \
turn contains a dialogue id between [ ]. Make sure to include the dialogue the attributes and \
values are extracted form. Important: Respond only in the format \
[{speaker name:[Dialog id]:[attribute]<value>}].\n\
Dialogue Turn:{}",
        ResponseFormat::TurnScopedPairList,
    ),
    (
        TURN_PRIORITY,
        "You are an expert dialogue annotator, given the following dialogue turn generate a list \
of attributes and values for relevant information in the text.\n\
Generate the annotations in the format: [attribute]<value> where attribute is the attribute \
name and value is its corresponding value from the text.\n\
and values for relevant information in this dialogue turn with respect to each person. Be \
concise and direct.\n\
Include person name as an attribute and value pair.\n\
Please make sure you read and understand these instructions carefully.\n\
1- Identify the key attributes in the dialogue turn and their corresponding values.\n\
2- Arrange attributes descendingly with respect to relevance from left to right.\n\
3- Generate the sorted annotations list in the format: [attribute]<value> where attribute is \
the attribute name and value is its corresponding value from the text.\n\
4- Skip all attributes with none vales\n\
Important: YOU MUST put attribute name is between [ ] and value between < >. Only return a \
list of [attribute]<value> nothing else. Dialogue Turn: {}",
        ResponseFormat::PairList,
    ),
    (
        SESSION_BASIC,
        "You are an expert dialogue annotator. Given the following dialogue session, generate a \
list of attributes and values that capture the relevant information across the whole session \
for each speaker.\n\
Generate the annotations in the format: [attribute]<value>. Skip attributes with none values.\n\
Only return a list of [attribute]<value> nothing else. Dialogue Session:\n{}",
        ResponseFormat::PairList,
    ),
    (
        SESSION_PRIORITY,
        "You are an expert dialogue annotator. Given the following dialogue session, generate a \
list of attributes and values that capture the relevant information across the whole session \
for each speaker.\n\
Arrange attributes descendingly with respect to relevance from left to right.\n\
Generate the annotations in the format: [attribute]<value>. Skip attributes with none values.\n\
Only return a list of [attribute]<value> nothing else. Dialogue Session:\n{}",
        ResponseFormat::PairList,
    ),
    (
        ENTITY_BASIC,
        "For the following movie identify the most important attributes independently. \
Determine all attributes that describe the movie \n\
based on your knowledge of this movie. Choose attribute names that are common characteristics \
of movies in general.\n\
Respond in the following format:\n\
[attribute]<value of attribute>.\n\
The Movie is: {}",
        ResponseFormat::PairList,
    ),
    (
        ENTITY_PRIORITY,
        "You are a movie annotation expert tasked with analyzing movies and generating \
key-attribute pairs.\n\
For the following movie identify the most important. Determine all attribute that describe the \
movie based on your knowledge of this movie.\n\
Choose attribute names that are common characteristics of movies in general.\n\
Respond in the following format:\n\
[attribute]<value of attribute>.\n\
Sort attributes from left to right based on their relevance.\n\
The Movie is:{}",
        ResponseFormat::PairList,
    ),
    (
        DIALOGUE_RECOMMENDATION,
        "Identify the key attributes that best describe the movie the user wants for \
recommendation in the dialogue.\n\
These attributes should encompass movie features that are relevant to the user sorted \
descendingly with respect to user interest.\n\
Respond in the format: [attribute]<value>.\n\
Dialogue:\n{}",
        ResponseFormat::PairList,
    ),
    (
        QA_ANSWER,
        "Answer the question using only the conversation memory below. Reply with a short \
phrase. If the memory does not contain the answer, reply with: no answer\n{}",
        ResponseFormat::FreeText,
    ),
    (
        RECOMMEND,
        "You are a movie recommendation assistant. In the dialogue below the movie the user \
settled on is hidden behind [MASKED]. Using the candidate movies and their attributes, \
recommend the movies that best fit the masked position. Return a ranked list of movie titles, \
one per line, most likely first, and nothing else.\n{}",
        ResponseFormat::RankedList,
    ),
    (
        EVENT_SUMMARY,
        "Given the following attributes and values that annotate a dialogue for every speaker \
in the format [attribute]<value>, generate a summary for the event attributes only to describe \
the main and important events represented in these annotations. Refrain from mentioning any \
minimal event. Include any event-related details and speaker. Format: a bullet paragraph for \
major life events for every speaker with no special characters. Don't include anything else in \
your response or extra text or lines. Don't include bullets. Input annotations: {}",
        ResponseFormat::FreeText,
    ),
    (
        GEVAL_JUDGE,
        "You will be given a reference summary of the events in a dialogue and a generated \
summary. Rate the generated summary on three criteria, each from 1 (worst) to 5 (best):\n\
Relevance: selection of the important events from the reference.\n\
Coherence: the summary is well structured and organized.\n\
Consistency: every event in the summary is supported by the reference.\n\
Respond exactly in the format:\nRelevance: <score>\nCoherence: <score>\nConsistency: <score>\n\
{}",
        ResponseFormat::Scores,
    ),
    (
        PERSUASIVENESS_JUDGE,
        "Given the dialogue, the recommended movie and the movie the user actually chose, judge \
how persuasive the recommendation is. Answer with one of: unpersuasive, partially persuasive, \
highly persuasive.\n{}",
        ResponseFormat::FreeText,
    ),
    (
        RELATEDNESS_JUDGE,
        "Compare the attributes of the recommended movie with those of the movie the user \
actually chose. Answer with one of: not comparable, comparable, highly comparable.\n{}",
        ResponseFormat::FreeText,
    ),
];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn substitution() {
        let t = PromptTemplate::new("m", "Movie is: {}", ResponseFormat::PairList).unwrap();
        assert_eq!(build_prompt(&t, "Heat", 100).unwrap(), "Movie is: Heat");
    }

    #[test]
    fn placeholder_count_checked_at_construction() {
        assert_eq!(
            PromptTemplate::new("m", "no placeholder", ResponseFormat::PairList),
            Err(TemplateError::Placeholder {
                id: "m".into(),
                found: 0
            })
        );
        assert!(PromptTemplate::new("m", "{} and {}", ResponseFormat::PairList).is_err());
    }

    #[test]
    fn budget_enforced() {
        let t = PromptTemplate::new("m", "x {}", ResponseFormat::PairList).unwrap();
        let payload = "a".repeat(10_000_000);
        assert_eq!(
            build_prompt(&t, &payload, 100_000),
            Err(PromptError::LengthBudgetExceeded {
                len: 10_000_000,
                budget: 100_000
            })
        );
        assert_eq!(build_prompt(&t, "  ", 10), Err(PromptError::EmptyPayload));
    }

    #[test]
    fn payload_with_braces_is_inserted_verbatim() {
        let t = PromptTemplate::new("m", "a {} b", ResponseFormat::PairList).unwrap();
        assert_eq!(build_prompt(&t, "{}", 10).unwrap(), "a {} b");
    }

    #[test]
    fn defaults_cover_every_mode() {
        let reg = TemplateRegistry::with_defaults();
        for p in [Perspective::EntityCentric, Perspective::ConversationCentric] {
            for g in [
                Granularity::TurnLevel,
                Granularity::SessionLevel,
                Granularity::NotApplicable,
            ] {
                for pr in [Prioritization::Basic, Prioritization::Priority] {
                    if let Some(id) = TemplateRegistry::template_for(Modes::new(p, g, pr)) {
                        assert!(reg.get(id).is_some(), "{id}");
                    }
                }
            }
        }
        assert_eq!(
            reg.get(TURN_BASIC).unwrap().format(),
            ResponseFormat::TurnScopedPairList
        );
        assert!(TemplateRegistry::template_for(Modes::new(
            Perspective::EntityCentric,
            Granularity::TurnLevel,
            Prioritization::Basic
        ))
        .is_none());
    }

    #[test]
    fn duplicate_register_rejected() {
        let mut reg = TemplateRegistry::with_defaults();
        let t = PromptTemplate::new(QUESTION, "{}", ResponseFormat::FreeText).unwrap();
        assert_eq!(
            reg.register(t),
            Err(TemplateError::DuplicateId(QUESTION.into()))
        );
    }

    #[test]
    fn load_dir_overrides() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("question.txt"), "Q? {}\n").unwrap();
        fs::write(dir.path().join("custom"), "Custom {}").unwrap();
        let mut reg = TemplateRegistry::with_defaults();
        assert_eq!(reg.load_dir(dir.path()).unwrap(), 2);
        let q = reg.get(QUESTION).unwrap();
        assert_eq!(q.body(), "Q? {}");
        assert_eq!(q.format(), ResponseFormat::PersonAttributes);
        assert_eq!(
            reg.get("custom").unwrap().format(),
            ResponseFormat::PairList
        );

        fs::write(dir.path().join("bad"), "nothing").unwrap();
        assert!(matches!(
            reg.load_dir(dir.path()),
            Err(TemplateError::Placeholder { .. })
        ));
    }
}
