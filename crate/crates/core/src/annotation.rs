//! Attribute–value annotations and their `[attribute]<value>` surface syntax.
//!
//! An [`Annotation`] is an ordered list of [`AttributePair`]s tagged with the
//! perspective, granularity and prioritization that produced it. The textual
//! form is the one every prompt asks the model to emit:
//!
//! ```text
//! [genre]<Crime thriller> [director]<Michael Mann>
//! ```
//!
//! Turn-scoped output wraps pairs in `{speaker:[dialog id]:...}` groups.
//!
//! Parsing comes in two flavours. The strict parser rejects anything outside
//! the grammar and reports the byte offset of the problem. The lenient parser
//! skips unparseable spans, records a [`ParseWarning`] for each, and is what
//! ingestion of model output uses.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize};
use thiserror::Error;

/// Characters that may never appear in an attribute name.
const NAME_FORBIDDEN: [char; 4] = ['[', ']', '<', '>'];
/// Characters that may never appear in a value.
const VALUE_FORBIDDEN: [char; 2] = ['<', '>'];

/// Trim, case-fold and collapse inner whitespace runs to a single space.
pub fn normalize_name(raw: &str) -> String {
    raw.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Values the model uses to say "nothing here"; pairs carrying them are dropped.
pub fn is_null_value(value: &str) -> bool {
    let v = value.trim();
    v.is_empty() || v.eq_ignore_ascii_case("none")
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PairError {
    #[error("attribute name is empty after normalization")]
    EmptyName,
    #[error("attribute name {0:?} contains a structural character")]
    ForbiddenNameChar(String),
    #[error("value {0:?} contains '<' or '>'")]
    ForbiddenValueChar(String),
    #[error("value for attribute {0:?} is empty or none")]
    NullValue(String),
}

/// One `⟨attribute, value⟩` entry.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
pub struct AttributePair {
    name: String,
    value: String,
}

impl AttributePair {
    pub fn new(name: &str, value: &str) -> Result<Self, PairError> {
        let name = normalize_name(name);
        if name.is_empty() {
            return Err(PairError::EmptyName);
        }
        if name.contains(NAME_FORBIDDEN) {
            return Err(PairError::ForbiddenNameChar(name));
        }
        let value = value.trim();
        if value.contains(VALUE_FORBIDDEN) {
            return Err(PairError::ForbiddenValueChar(value.to_string()));
        }
        if is_null_value(value) {
            return Err(PairError::NullValue(name));
        }
        Ok(Self {
            name,
            value: value.to_string(),
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &str {
        &self.value
    }

    /// `[name]<value>`
    pub fn render(&self) -> String {
        format!("[{}]<{}>", self.name, self.value)
    }
}

impl<'de> Deserialize<'de> for AttributePair {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            name: String,
            value: String,
        }
        let raw = Raw::deserialize(deserializer)?;
        AttributePair::new(&raw.name, &raw.value).map_err(serde::de::Error::custom)
    }
}

impl fmt::Display for AttributePair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}]<{}>", self.name, self.value)
    }
}

/// Whether attributes describe a stored entity or the interaction itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum Perspective {
    #[default]
    EntityCentric,
    ConversationCentric,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum Granularity {
    TurnLevel,
    SessionLevel,
    #[default]
    NotApplicable,
}

/// `Basic` pairs carry no meaningful order; `Priority` pairs are most relevant first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum Prioritization {
    #[default]
    Basic,
    Priority,
}

/// The three mode flags an annotation is produced under.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub struct Modes {
    pub perspective: Perspective,
    pub granularity: Granularity,
    pub prioritization: Prioritization,
}

impl Modes {
    pub fn new(
        perspective: Perspective,
        granularity: Granularity,
        prioritization: Prioritization,
    ) -> Self {
        Self {
            perspective,
            granularity,
            prioritization,
        }
    }

    pub fn entity(prioritization: Prioritization) -> Self {
        Self::new(
            Perspective::EntityCentric,
            Granularity::NotApplicable,
            prioritization,
        )
    }

    pub fn turn(prioritization: Prioritization) -> Self {
        Self::new(
            Perspective::ConversationCentric,
            Granularity::TurnLevel,
            prioritization,
        )
    }

    pub fn session(prioritization: Prioritization) -> Self {
        Self::new(
            Perspective::ConversationCentric,
            Granularity::SessionLevel,
            prioritization,
        )
    }
}

/// Ordered attribute–value pairs attached to one memory.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct Annotation {
    pairs: Vec<AttributePair>,
    pub perspective: Perspective,
    pub granularity: Granularity,
    pub prioritization: Prioritization,
}

impl<'de> Deserialize<'de> for Annotation {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            #[serde(default)]
            pairs: Vec<AttributePair>,
            #[serde(default)]
            perspective: Perspective,
            #[serde(default)]
            granularity: Granularity,
            #[serde(default)]
            prioritization: Prioritization,
        }
        let raw = Raw::deserialize(deserializer)?;
        Ok(Annotation::from_pairs(raw.pairs).with_modes(Modes::new(
            raw.perspective,
            raw.granularity,
            raw.prioritization,
        )))
    }
}

impl Annotation {
    /// Builds an annotation with default mode flags, dropping exact duplicate pairs.
    pub fn from_pairs(pairs: impl IntoIterator<Item = AttributePair>) -> Self {
        let mut ann = Self::default();
        for pair in pairs {
            ann.push(pair);
        }
        ann
    }

    /// Appends a pair unless an identical `(name, value)` is already present.
    /// Returns whether the pair was added.
    pub fn push(&mut self, pair: AttributePair) -> bool {
        if self.pairs.contains(&pair) {
            return false;
        }
        self.pairs.push(pair);
        true
    }

    pub fn with_modes(mut self, modes: Modes) -> Self {
        self.perspective = modes.perspective;
        self.granularity = modes.granularity;
        self.prioritization = modes.prioritization;
        self
    }

    pub fn modes(&self) -> Modes {
        Modes::new(self.perspective, self.granularity, self.prioritization)
    }

    pub fn pairs(&self) -> &[AttributePair] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Distinct attribute names in first-appearance order.
    pub fn names(&self) -> Vec<&str> {
        let mut seen = HashSet::new();
        self.pairs
            .iter()
            .map(AttributePair::name)
            .filter(|n| seen.insert(*n))
            .collect()
    }

    pub fn values_of<'a>(&'a self, name: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.pairs
            .iter()
            .filter(move |p| p.name == name)
            .map(AttributePair::value)
    }

    /// Keeps only pairs matching `keep`, preserving order and mode flags.
    pub fn filtered(&self, mut keep: impl FnMut(&AttributePair) -> bool) -> Self {
        Self {
            pairs: self.pairs.iter().filter(|p| keep(p)).cloned().collect(),
            ..self.clone()
        }
    }

    /// Appends all pairs of `other` (deduplicated), keeping this annotation's flags.
    pub fn extend_from(&mut self, other: &Annotation) {
        for pair in &other.pairs {
            self.push(pair.clone());
        }
    }
}

impl fmt::Display for Annotation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&render_annotation(self))
    }
}

/// Pairs emitted for one dialogue turn in the `{speaker:[id]:...}` format.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnScopedAnnotation {
    pub speaker: String,
    pub dialog_id: String,
    pub annotation: Annotation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParseReason {
    UnclosedAttribute,
    UnclosedValue,
    MissingValue,
    StrayText,
    EmptyName,
    InvalidPair,
    UnclosedGroup,
    MissingSpeaker,
    MissingDialogId,
}

impl fmt::Display for ParseReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::UnclosedAttribute => "unclosed attribute bracket",
            Self::UnclosedValue => "unclosed value bracket",
            Self::MissingValue => "attribute not followed by <value>",
            Self::StrayText => "stray text between pairs",
            Self::EmptyName => "empty attribute name",
            Self::InvalidPair => "invalid attribute pair",
            Self::UnclosedGroup => "unclosed turn group",
            Self::MissingSpeaker => "missing speaker segment",
            Self::MissingDialogId => "missing dialog id segment",
        };
        f.write_str(s)
    }
}

/// Byte offset into the parsed text plus what went wrong there.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("parse error at byte {position}: {reason}")]
pub struct ParseError {
    pub position: usize,
    pub reason: ParseReason,
}

/// A span the lenient parser skipped.
pub type ParseWarning = ParseError;

/// Output of the lenient parsers.
#[derive(Debug, Clone, PartialEq)]
pub struct Lenient<T> {
    pub value: T,
    pub warnings: Vec<ParseWarning>,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Mode {
    Strict,
    Lenient,
}

/// Cursor over the raw text. Positions are byte offsets into the original input.
struct Cursor<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(src: &'a str) -> Self {
        Self { src, pos: 0 }
    }

    fn rest(&self) -> &'a str {
        &self.src[self.pos..]
    }

    fn peek(&self) -> Option<char> {
        self.rest().chars().next()
    }

    fn bump(&mut self) -> Option<char> {
        let c = self.peek()?;
        self.pos += c.len_utf8();
        Some(c)
    }

    fn skip_ws(&mut self) {
        while self.peek().is_some_and(char::is_whitespace) {
            self.bump();
        }
    }

    /// Advances to the next occurrence of any char in `stops` (or end), without consuming it.
    fn skip_until(&mut self, stops: &[char]) {
        match self.rest().find(stops) {
            Some(off) => self.pos += off,
            None => self.pos = self.src.len(),
        }
    }
}

/// Reads one `[name]<value>` pair starting at `[`. On failure the cursor is
/// left just past the offending opening bracket.
fn read_pair(cur: &mut Cursor<'_>) -> Result<Option<AttributePair>, ParseError> {
    let start = cur.pos;
    debug_assert_eq!(cur.peek(), Some('['));
    cur.bump();
    let name_start = cur.pos;
    let name_end = loop {
        match cur.peek() {
            Some(']') => {
                let end = cur.pos;
                cur.bump();
                break end;
            }
            Some('[' | '<' | '>') | None => {
                cur.pos = start + 1;
                return Err(ParseError {
                    position: start,
                    reason: ParseReason::UnclosedAttribute,
                });
            }
            Some(_) => {
                cur.bump();
            }
        }
    };
    let raw_name = &cur.src[name_start..name_end];
    // inline spaces between `]` and `<` are tolerated
    while cur.peek().is_some_and(|c| c == ' ' || c == '\t') {
        cur.bump();
    }
    if cur.peek() != Some('<') {
        return Err(ParseError {
            position: cur.pos,
            reason: ParseReason::MissingValue,
        });
    }
    let value_open = cur.pos;
    cur.bump();
    let value_start = cur.pos;
    let value_end = loop {
        match cur.peek() {
            Some('>') => {
                let end = cur.pos;
                cur.bump();
                break end;
            }
            Some('<') | None => {
                cur.pos = value_open + 1;
                return Err(ParseError {
                    position: value_open,
                    reason: ParseReason::UnclosedValue,
                });
            }
            Some(_) => {
                cur.bump();
            }
        }
    };
    let raw_value = &cur.src[value_start..value_end];
    if normalize_name(raw_name).is_empty() {
        return Err(ParseError {
            position: start,
            reason: ParseReason::EmptyName,
        });
    }
    if is_null_value(raw_value) {
        return Ok(None);
    }
    AttributePair::new(raw_name, raw_value)
        .map(Some)
        .map_err(|_| ParseError {
            position: start,
            reason: ParseReason::InvalidPair,
        })
}

/// Parses a run of pairs until end of input or an unmatched `terminator`.
fn parse_pairs(
    cur: &mut Cursor<'_>,
    mode: Mode,
    terminator: Option<char>,
    warnings: &mut Vec<ParseWarning>,
) -> Result<Annotation, ParseError> {
    let mut ann = Annotation::default();
    loop {
        cur.skip_ws();
        match cur.peek() {
            None => break,
            Some(c) if Some(c) == terminator => break,
            Some('[') => match read_pair(cur) {
                Ok(Some(pair)) => {
                    ann.push(pair);
                }
                Ok(None) => {}
                Err(err) if mode == Mode::Strict => return Err(err),
                Err(err) => {
                    warnings.push(err);
                    let mut stops = vec!['['];
                    stops.extend(terminator);
                    cur.skip_until(&stops);
                }
            },
            Some(_) => {
                let err = ParseError {
                    position: cur.pos,
                    reason: ParseReason::StrayText,
                };
                if mode == Mode::Strict {
                    return Err(err);
                }
                // separators such as commas or trailing periods are common noise
                let noise_only = {
                    let before = cur.pos;
                    let mut stops = vec!['['];
                    stops.extend(terminator);
                    cur.skip_until(&stops);
                    cur.src[before..cur.pos]
                        .chars()
                        .all(|c| c.is_whitespace() || matches!(c, ',' | ';' | '.'))
                };
                if !noise_only {
                    warnings.push(err);
                }
            }
        }
    }
    Ok(ann)
}

/// Strict parse of `[attribute]<value>` pairs.
pub fn parse_annotation(text: &str) -> Result<Annotation, ParseError> {
    let mut cur = Cursor::new(text);
    parse_pairs(&mut cur, Mode::Strict, None, &mut Vec::new())
}

/// Lenient parse: malformed spans are skipped and reported as warnings.
pub fn parse_annotation_lenient(text: &str) -> Lenient<Annotation> {
    let mut cur = Cursor::new(text);
    let mut warnings = Vec::new();
    let value = parse_pairs(&mut cur, Mode::Lenient, None, &mut warnings)
        .expect("lenient parsing never fails");
    Lenient { value, warnings }
}

fn read_group(
    cur: &mut Cursor<'_>,
    mode: Mode,
    warnings: &mut Vec<ParseWarning>,
) -> Result<TurnScopedAnnotation, ParseError> {
    let open = cur.pos;
    cur.bump(); // '{'
    let speaker_start = cur.pos;
    cur.skip_until(&[':', '}', '[']);
    let speaker = cur.src[speaker_start..cur.pos].trim().to_string();
    if cur.peek() != Some(':') || speaker.is_empty() {
        return Err(ParseError {
            position: open,
            reason: ParseReason::MissingSpeaker,
        });
    }
    cur.bump();
    cur.skip_ws();
    if cur.peek() != Some('[') {
        return Err(ParseError {
            position: cur.pos,
            reason: ParseReason::MissingDialogId,
        });
    }
    let id_open = cur.pos;
    cur.bump();
    let id_start = cur.pos;
    cur.skip_until(&[']', '}', '<']);
    let dialog_id = cur.src[id_start..cur.pos].trim().to_string();
    if cur.peek() != Some(']') || dialog_id.is_empty() {
        return Err(ParseError {
            position: id_open,
            reason: ParseReason::MissingDialogId,
        });
    }
    cur.bump();
    cur.skip_ws();
    match cur.peek() {
        Some(':') => {
            cur.bump();
        }
        // `{Ana:[a]<1>}`: the bracket was an attribute, not a dialog id
        Some('<') => {
            return Err(ParseError {
                position: id_open,
                reason: ParseReason::MissingDialogId,
            })
        }
        _ => {}
    }
    let annotation = parse_pairs(cur, mode, Some('}'), warnings)?;
    if cur.peek() != Some('}') {
        return Err(ParseError {
            position: open,
            reason: ParseReason::UnclosedGroup,
        });
    }
    cur.bump();
    Ok(TurnScopedAnnotation {
        speaker,
        dialog_id,
        annotation: annotation.with_modes(Modes::turn(Prioritization::Basic)),
    })
}

fn parse_groups(
    text: &str,
    mode: Mode,
    warnings: &mut Vec<ParseWarning>,
) -> Result<Vec<TurnScopedAnnotation>, ParseError> {
    let mut cur = Cursor::new(text);
    let mut out = Vec::new();
    loop {
        cur.skip_ws();
        match cur.peek() {
            None => break,
            Some('{') => {
                let open = cur.pos;
                match read_group(&mut cur, mode, warnings) {
                    Ok(group) => out.push(group),
                    Err(err) if mode == Mode::Strict => return Err(err),
                    Err(err) => {
                        warnings.push(err);
                        cur.pos = open + 1;
                        cur.skip_until(&['{']);
                    }
                }
            }
            // the list may be wrapped in `[ ... ]` and separated by commas
            Some('[' | ']' | ',') => {
                cur.bump();
            }
            Some(_) => {
                let err = ParseError {
                    position: cur.pos,
                    reason: ParseReason::StrayText,
                };
                if mode == Mode::Strict {
                    return Err(err);
                }
                warnings.push(err);
                cur.skip_until(&['{']);
            }
        }
    }
    Ok(out)
}

/// Strict parse of `{speaker:[dialog id]:[attribute]<value>...}` groups.
pub fn parse_turn_annotations(text: &str) -> Result<Vec<TurnScopedAnnotation>, ParseError> {
    parse_groups(text, Mode::Strict, &mut Vec::new())
}

pub fn parse_turn_annotations_lenient(text: &str) -> Lenient<Vec<TurnScopedAnnotation>> {
    let mut warnings = Vec::new();
    let value =
        parse_groups(text, Mode::Lenient, &mut warnings).expect("lenient parsing never fails");
    Lenient { value, warnings }
}

/// Canonical text form: pairs in order, single-space separated.
pub fn render_annotation(ann: &Annotation) -> String {
    ann.pairs
        .iter()
        .map(AttributePair::render)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Moves pairs named in `ranking` to the front, in ranking order; the rest keep
/// their relative order. Always flags the result as `Priority`.
pub fn reorder_by_priority(ann: &Annotation, ranking: &[&str]) -> Annotation {
    let ranking: Vec<String> = ranking.iter().map(|n| normalize_name(n)).collect();
    let mut pairs = Vec::with_capacity(ann.len());
    for name in &ranking {
        pairs.extend(ann.pairs.iter().filter(|p| &p.name == name).cloned());
    }
    pairs.extend(
        ann.pairs
            .iter()
            .filter(|p| !ranking.contains(&p.name))
            .cloned(),
    );
    Annotation {
        pairs,
        prioritization: Prioritization::Priority,
        ..ann.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(n: &str, v: &str) -> AttributePair {
        AttributePair::new(n, v).unwrap()
    }

    fn names_values(ann: &Annotation) -> Vec<(&str, &str)> {
        ann.pairs().iter().map(|p| (p.name(), p.value())).collect()
    }

    #[test]
    fn single_pair() {
        let ann = parse_annotation("[genre]<Drama>").unwrap();
        assert_eq!(names_values(&ann), vec![("genre", "Drama")]);
    }

    #[test]
    fn names_are_case_folded_and_order_kept() {
        let ann = parse_annotation("[Genre]<Drama> [director]<X>").unwrap();
        assert_eq!(
            names_values(&ann),
            vec![("genre", "Drama"), ("director", "X")]
        );
    }

    #[test]
    fn unclosed_attribute_bracket() {
        let err = parse_annotation("[genre<Drama>").unwrap_err();
        assert_eq!(err.position, 0);
        assert_eq!(err.reason, ParseReason::UnclosedAttribute);
    }

    #[test]
    fn missing_value_and_stray_text() {
        let err = parse_annotation("[genre] drama").unwrap_err();
        assert_eq!(err.reason, ParseReason::MissingValue);
        assert_eq!(err.position, 8);

        let err = parse_annotation("[a]<1> and [b]<2>").unwrap_err();
        assert_eq!(err.reason, ParseReason::StrayText);
        assert_eq!(err.position, 7);

        let err = parse_annotation("[a]<1").unwrap_err();
        assert_eq!(err.reason, ParseReason::UnclosedValue);
        assert_eq!(err.position, 3);
    }

    #[test]
    fn empty_and_blank_input() {
        assert!(parse_annotation("").unwrap().is_empty());
        assert!(parse_annotation("  \n\n ").unwrap().is_empty());
        let ann = parse_annotation("\n[a]<1>\n\n[b]<2>\n").unwrap();
        assert_eq!(ann.len(), 2);
    }

    #[test]
    fn none_values_dropped_and_duplicates_removed() {
        let ann = parse_annotation("[a]<none> [b]<> [c]<x> [C]<x> [c]<y>").unwrap();
        assert_eq!(names_values(&ann), vec![("c", "x"), ("c", "y")]);
    }

    #[test]
    fn name_whitespace_collapsed() {
        let ann = parse_annotation("[  Life   Event ]< moved to Paris >").unwrap();
        assert_eq!(names_values(&ann), vec![("life event", "moved to Paris")]);
    }

    #[test]
    fn lenient_skips_noise() {
        let out = parse_annotation_lenient("Sure! [genre]<Drama>, [year<1995> [mood]<dark>.");
        assert_eq!(
            names_values(&out.value),
            vec![("genre", "Drama"), ("mood", "dark")]
        );
        assert_eq!(out.warnings.len(), 2);
        assert_eq!(out.warnings[0].reason, ParseReason::StrayText);
        assert_eq!(out.warnings[1].reason, ParseReason::UnclosedAttribute);
    }

    #[test]
    fn render_cases() {
        assert_eq!(
            render_annotation(&Annotation::from_pairs([pair("genre", "Drama")])),
            "[genre]<Drama>"
        );
        assert_eq!(render_annotation(&Annotation::default()), "");
        assert_eq!(
            render_annotation(&Annotation::from_pairs([pair("a", "1"), pair("b", "2")])),
            "[a]<1> [b]<2>"
        );
    }

    #[test]
    fn turn_groups() {
        let out = parse_turn_annotations("{Ana:[D1]:[emotion]<happy>}").unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].speaker, "Ana");
        assert_eq!(out[0].dialog_id, "D1");
        assert_eq!(names_values(&out[0].annotation), vec![("emotion", "happy")]);
        assert_eq!(out[0].annotation.granularity, Granularity::TurnLevel);

        assert!(parse_turn_annotations("").unwrap().is_empty());

        let out = parse_turn_annotations("{Ana:[D1]:[a]<1>}{Bob:[D2]:[b]<2>}").unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out[1].speaker, "Bob");
        assert_eq!(out[1].dialog_id, "D2");
    }

    #[test]
    fn turn_groups_wrapped_and_multi_pair() {
        let out =
            parse_turn_annotations("[{Ana:[D1:3]:[a]<1>[b]<2>}, {Bob:[D1:4]:[c]<x}y>}]").unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].annotation.len(), 2);
        assert_eq!(out[0].dialog_id, "D1:3");
        assert_eq!(names_values(&out[1].annotation), vec![("c", "x}y")]);
    }

    #[test]
    fn turn_group_errors() {
        let err = parse_turn_annotations("{[D1]:[a]<1>}").unwrap_err();
        assert_eq!(err.reason, ParseReason::MissingSpeaker);
        let err = parse_turn_annotations("{Ana:[a]<1>}").unwrap_err();
        assert_eq!(err.reason, ParseReason::MissingDialogId);
        let err = parse_turn_annotations("{Ana:[D1]:[a]<1>").unwrap_err();
        assert_eq!(err.reason, ParseReason::UnclosedGroup);

        let out = parse_turn_annotations_lenient("{Ana:[a]<1>} {Bob:[D2]:[b]<2>}");
        assert_eq!(out.value.len(), 1);
        assert_eq!(out.value[0].speaker, "Bob");
        assert_eq!(out.warnings.len(), 1);
    }

    #[test]
    fn reorder_examples() {
        let ann = Annotation::from_pairs([pair("b", "2"), pair("a", "1")]);
        let out = reorder_by_priority(&ann, &["a", "b"]);
        assert_eq!(names_values(&out), vec![("a", "1"), ("b", "2")]);

        let ann = Annotation::from_pairs([pair("a", "1")]);
        let out = reorder_by_priority(&ann, &[]);
        assert_eq!(names_values(&out), vec![("a", "1")]);
        assert_eq!(out.prioritization, Prioritization::Priority);

        let ann = Annotation::from_pairs([pair("a", "1"), pair("b", "2"), pair("c", "3")]);
        let out = reorder_by_priority(&ann, &["c", "zz"]);
        assert_eq!(names_values(&out), vec![("c", "3"), ("a", "1"), ("b", "2")]);
    }

    #[test]
    fn pair_constructor_rejects_invalid() {
        assert_eq!(AttributePair::new("  ", "x"), Err(PairError::EmptyName));
        assert!(matches!(
            AttributePair::new("a[b", "x"),
            Err(PairError::ForbiddenNameChar(_))
        ));
        assert!(matches!(
            AttributePair::new("a", "x>y"),
            Err(PairError::ForbiddenValueChar(_))
        ));
        assert!(matches!(
            AttributePair::new("a", "None"),
            Err(PairError::NullValue(_))
        ));
    }

    #[test]
    fn json_form() {
        let ann = Annotation::from_pairs([pair("genre", "Drama")])
            .with_modes(Modes::turn(Prioritization::Priority));
        let json = serde_json::to_string(&ann).unwrap();
        assert_eq!(
            json,
            r#"{"pairs":[{"name":"genre","value":"Drama"}],"perspective":"ConversationCentric","granularity":"TurnLevel","prioritization":"Priority"}"#
        );
        let back: Annotation = serde_json::from_str(&json).unwrap();
        assert_eq!(back, ann);
        assert!(
            serde_json::from_str::<Annotation>(r#"{"pairs":[{"name":"","value":"x"}]}"#).is_err()
        );
    }
}
