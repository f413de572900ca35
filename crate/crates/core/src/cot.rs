//! Four-stage forgery reasoning documents.
//!
//! Canonical serialized form (single spaces, stages in fixed order):
//!
//! ```text
//! <SUMMARY> ... </SUMMARY> <CAPTION> ... </CAPTION> <REASONING> Low-level: texture: ... High-level: geometry: ... </REASONING> <CONCLUSION> This image is fake. </CONCLUSION>
//! ```
//!
//! The grammar is strict: each of the eight tags appears exactly once and in
//! order, with only whitespace outside the tagged stages. Anything else is a
//! [`CotError::Format`], which the evaluation harness counts as a failed
//! output.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const ANSWER_TEMPLATE: &str = "This image is";
pub const SUMMARY_TEMPLATE: &str = "Check low-level and high-level clues, then decide real or fake.";
pub const LOW_MARKER: &str = "Low-level:";
pub const HIGH_MARKER: &str = "High-level:";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Real,
    Fake,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Real => "real",
            Label::Fake => "fake",
        }
    }

    pub fn parse(word: &str) -> Option<Self> {
        match word {
            w if w.eq_ignore_ascii_case("real") => Some(Label::Real),
            w if w.eq_ignore_ascii_case("fake") => Some(Label::Fake),
            _ => None,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Verdict extracted from a model output; `Fail` when none can be read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Real,
    Fake,
    Fail,
}

impl From<Label> for Outcome {
    fn from(l: Label) -> Self {
        match l {
            Label::Real => Outcome::Real,
            Label::Fake => Outcome::Fake,
        }
    }
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Outcome::Real => "real",
            Outcome::Fake => "fake",
            Outcome::Fail => "fail",
        })
    }
}

impl Outcome {
    pub fn label(self) -> Option<Label> {
        match self {
            Outcome::Real => Some(Label::Real),
            Outcome::Fake => Some(Label::Fake),
            Outcome::Fail => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Low,
    High,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Summary,
    Caption,
    Reasoning,
    Conclusion,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Summary, Stage::Caption, Stage::Reasoning, Stage::Conclusion];

    pub fn open_tag(self) -> &'static str {
        match self {
            Stage::Summary => "<SUMMARY>",
            Stage::Caption => "<CAPTION>",
            Stage::Reasoning => "<REASONING>",
            Stage::Conclusion => "<CONCLUSION>",
        }
    }

    pub fn close_tag(self) -> &'static str {
        match self {
            Stage::Summary => "</SUMMARY>",
            Stage::Caption => "</CAPTION>",
            Stage::Reasoning => "</REASONING>",
            Stage::Conclusion => "</CONCLUSION>",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Summary => "summary",
            Stage::Caption => "caption",
            Stage::Reasoning => "reasoning",
            Stage::Conclusion => "conclusion",
        })
    }
}

/// The eight tags in canonical order, each with its stage.
pub fn all_tags() -> [(&'static str, Stage); 8] {
    let mut out = [("", Stage::Summary); 8];
    for (i, s) in Stage::ALL.iter().enumerate() {
        out[2 * i] = (s.open_tag(), *s);
        out[2 * i + 1] = (s.close_tag(), *s);
    }
    out
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CotError {
    #[error("format error in {stage} stage: {reason}")]
    Format { stage: Stage, reason: String },
    #[error("conclusion does not state a real/fake verdict: {text:?}")]
    Verdict { text: String },
    #[error("contract violation: {0}")]
    Contract(String),
}

pub type Result<T> = std::result::Result<T, CotError>;

fn format_err(stage: Stage, reason: impl Into<String>) -> CotError {
    CotError::Format {
        stage,
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReasoningStep {
    pub attribute: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Reasoning {
    pub low_level: Vec<ReasoningStep>,
    pub high_level: Vec<ReasoningStep>,
}

impl Reasoning {
    pub fn len(&self) -> usize {
        self.low_level.len() + self.high_level.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn steps(&self) -> impl Iterator<Item = (Level, &ReasoningStep)> {
        self.low_level
            .iter()
            .map(|s| (Level::Low, s))
            .chain(self.high_level.iter().map(|s| (Level::High, s)))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conclusion {
    pub verdict: Label,
    pub text: String,
}

impl Conclusion {
    pub fn for_label(label: Label) -> Self {
        Self {
            verdict: label,
            text: format!("{ANSWER_TEMPLATE} {label}."),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoTDocument {
    pub summary: String,
    pub caption: String,
    pub reasoning: Reasoning,
    pub conclusion: Conclusion,
}

/// One interpreted forgery attribute, prior to CoT assembly.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InterpretationRecord {
    pub attribute: String,
    pub level: Level,
    pub description: String,
    pub label: Label,
}

/// Closed set of attribute names with their reasoning level.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttributeRegistry {
    entries: Vec<(&'static str, Level)>,
}

impl AttributeRegistry {
    pub fn standard() -> Self {
        Self {
            entries: vec![
                ("texture", Level::Low),
                ("edges", Level::Low),
                ("lighting", Level::Low),
                ("noise pattern", Level::Low),
                ("compression artifact", Level::Low),
                ("anatomy", Level::High),
                ("geometry", Level::High),
                ("physics plausibility", Level::High),
                ("text rendering", Level::High),
                ("semantic consistency", Level::High),
            ],
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.entries.iter().map(|(n, _)| *n)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn level(&self, name: &str) -> Option<Level> {
        self.entries.iter().find(|(n, _)| *n == name).map(|(_, l)| *l)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.level(name).is_some()
    }
}

impl Default for AttributeRegistry {
    fn default() -> Self {
        Self::standard()
    }
}

pub fn normalize_ws(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn contains_reserved(s: &str) -> Option<&'static str> {
    all_tags()
        .iter()
        .map(|(t, _)| *t)
        .chain([LOW_MARKER, HIGH_MARKER])
        .find(|t| s.contains(t))
}

fn check_free_text(stage: Stage, what: &str, s: &str) -> Result<()> {
    if normalize_ws(s).is_empty() {
        return Err(CotError::Contract(format!("{stage} {what} is empty")));
    }
    if let Some(t) = contains_reserved(s) {
        return Err(CotError::Contract(format!(
            "{stage} {what} contains reserved token {t}"
        )));
    }
    Ok(())
}

/// Reads the verdict from a conclusion body of the form
/// `This image is <real|fake>...`.
pub fn conclusion_verdict(body: &str) -> Result<Label> {
    let body = normalize_ws(body);
    let rest = body
        .strip_prefix(ANSWER_TEMPLATE)
        .and_then(|r| r.strip_prefix(' '))
        .ok_or_else(|| CotError::Verdict { text: body.clone() })?;
    let word = rest.split(' ').next().unwrap_or("");
    let word = word.trim_end_matches(|c: char| c.is_ascii_punctuation());
    Label::parse(word).ok_or(CotError::Verdict { text: body })
}

fn parse_reasoning(body: &str) -> Result<Reasoning> {
    let body = normalize_ws(body);
    let mut markers: Vec<(usize, Level)> = Vec::new();
    for (marker, level) in [(LOW_MARKER, Level::Low), (HIGH_MARKER, Level::High)] {
        markers.extend(
            body.match_indices(marker)
                .filter(|(i, _)| *i == 0 || body.as_bytes()[i - 1] == b' ')
                .map(|(i, _)| (i, level)),
        );
    }
    markers.sort_unstable();
    match markers.first() {
        None => return Err(format_err(Stage::Reasoning, "no reasoning steps")),
        Some((0, _)) => {}
        Some(_) => return Err(format_err(Stage::Reasoning, "text before the first step marker")),
    }
    let mut reasoning = Reasoning::default();
    for (k, &(start, level)) in markers.iter().enumerate() {
        let end = markers.get(k + 1).map_or(body.len(), |m| m.0);
        let marker_len = if level == Level::Low {
            LOW_MARKER.len()
        } else {
            HIGH_MARKER.len()
        };
        let segment = body[start + marker_len..end].trim();
        let (attribute, text) = segment
            .split_once(':')
            .ok_or_else(|| format_err(Stage::Reasoning, format!("step without attribute: {segment:?}")))?;
        let (attribute, text) = (attribute.trim(), text.trim());
        if attribute.is_empty() || text.is_empty() {
            return Err(format_err(
                Stage::Reasoning,
                format!("empty attribute or description: {segment:?}"),
            ));
        }
        let step = ReasoningStep {
            attribute: attribute.to_string(),
            text: text.to_string(),
        };
        match level {
            Level::Low => reasoning.low_level.push(step),
            Level::High => reasoning.high_level.push(step),
        }
    }
    Ok(reasoning)
}

/// Locates the eight tags, enforcing one occurrence each in canonical
/// order, and returns the raw body of each stage.
pub fn split_stages(text: &str) -> Result<[&str; 4]> {
    let tags = all_tags();
    let mut positions = [0usize; 8];
    for (i, (tag, stage)) in tags.iter().enumerate() {
        let mut hits = text.match_indices(tag);
        let first = hits
            .next()
            .ok_or_else(|| format_err(*stage, format!("missing {tag}")))?;
        if hits.next().is_some() {
            return Err(format_err(*stage, format!("duplicated {tag}")));
        }
        positions[i] = first.0;
    }
    for i in 1..8 {
        if positions[i] <= positions[i - 1] {
            let (tag, stage) = tags[i];
            return Err(format_err(stage, format!("{tag} out of order")));
        }
    }
    let end_of = |i: usize| positions[i] + tags[i].0.len();
    if !text[..positions[0]].trim().is_empty() {
        return Err(format_err(Stage::Summary, "text before <SUMMARY>"));
    }
    for s in 0..3 {
        if !text[end_of(2 * s + 1)..positions[2 * s + 2]].trim().is_empty() {
            return Err(format_err(Stage::ALL[s + 1], "text between stages"));
        }
    }
    if !text[end_of(7)..].trim().is_empty() {
        return Err(format_err(Stage::Conclusion, "text after </CONCLUSION>"));
    }
    Ok([0, 1, 2, 3].map(|s| &text[end_of(2 * s)..positions[2 * s + 1]]))
}

/// Strict parse of a serialized document.
pub fn parse(text: &str) -> Result<CoTDocument> {
    let [summary, caption, reasoning, conclusion] = split_stages(text)?;
    let summary = normalize_ws(summary);
    if summary.is_empty() {
        return Err(format_err(Stage::Summary, "empty stage"));
    }
    let caption = normalize_ws(caption);
    if caption.is_empty() {
        return Err(format_err(Stage::Caption, "empty stage"));
    }
    let reasoning = parse_reasoning(reasoning)?;
    let conclusion_text = normalize_ws(conclusion);
    let verdict = conclusion_verdict(&conclusion_text)?;
    Ok(CoTDocument {
        summary,
        caption,
        reasoning,
        conclusion: Conclusion {
            verdict,
            text: conclusion_text,
        },
    })
}

fn reasoning_body(r: &Reasoning) -> String {
    r.steps()
        .map(|(level, s)| {
            let marker = if level == Level::Low { LOW_MARKER } else { HIGH_MARKER };
            format!("{marker} {}: {}", normalize_ws(&s.attribute), normalize_ws(&s.text))
        })
        .collect::<Vec<_>>()
        .join(" ")
}

fn validate(doc: &CoTDocument) -> Result<()> {
    check_free_text(Stage::Summary, "text", &doc.summary)?;
    check_free_text(Stage::Caption, "text", &doc.caption)?;
    if doc.reasoning.is_empty() {
        return Err(CotError::Contract("reasoning needs at least one step".into()));
    }
    for (_, step) in doc.reasoning.steps() {
        check_free_text(Stage::Reasoning, "attribute", &step.attribute)?;
        check_free_text(Stage::Reasoning, "description", &step.text)?;
        if step.attribute.contains(':') {
            return Err(CotError::Contract(format!(
                "attribute {:?} contains ':'",
                step.attribute
            )));
        }
    }
    check_free_text(Stage::Conclusion, "text", &doc.conclusion.text)?;
    match conclusion_verdict(&doc.conclusion.text) {
        Ok(v) if v == doc.conclusion.verdict => Ok(()),
        _ => Err(CotError::Contract(format!(
            "conclusion {:?} does not state verdict {}",
            doc.conclusion.text, doc.conclusion.verdict
        ))),
    }
}

/// Canonical single-spaced text. Fails if the document breaks its
/// invariants (empty stages, no steps, reserved tokens inside text,
/// conclusion disagreeing with the verdict).
pub fn serialize(doc: &CoTDocument) -> Result<String> {
    validate(doc)?;
    Ok(format!(
        "<SUMMARY> {} </SUMMARY> <CAPTION> {} </CAPTION> <REASONING> {} </REASONING> <CONCLUSION> {} </CONCLUSION>",
        normalize_ws(&doc.summary),
        normalize_ws(&doc.caption),
        reasoning_body(&doc.reasoning),
        normalize_ws(&doc.conclusion.text)
    ))
}

/// Total verdict extraction for evaluation: never fails, never panics.
pub fn extract_verdict(text: &str) -> Outcome {
    parse(text).map_or(Outcome::Fail, |d| d.conclusion.verdict.into())
}

pub fn extract_verdict_bytes(bytes: &[u8]) -> Outcome {
    extract_verdict(&String::from_utf8_lossy(bytes))
}

/// Verdict from the first `This image is <word>` anywhere in untagged text.
/// Used for outputs trained without the staged format.
pub fn extract_template_verdict(text: &str) -> Outcome {
    let norm = normalize_ws(text);
    match norm.find(ANSWER_TEMPLATE) {
        Some(i) => conclusion_verdict(&norm[i..]).map_or(Outcome::Fail, Outcome::from),
        None => Outcome::Fail,
    }
}

/// Assembles a document from interpreted attributes. Records are routed to
/// the low/high lists by level, preserving order.
pub fn build_annotation(
    records: &[InterpretationRecord],
    caption: &str,
    label: Label,
    registry: &AttributeRegistry,
) -> Result<CoTDocument> {
    if records.is_empty() {
        return Err(CotError::Contract(
            "at least one interpretation record is required".into(),
        ));
    }
    let mut reasoning = Reasoning::default();
    for r in records {
        if r.label != label {
            return Err(CotError::Contract(format!(
                "record {:?} labelled {} in a {label} annotation",
                r.attribute, r.label
            )));
        }
        if !registry.contains(&r.attribute) {
            return Err(CotError::Contract(format!("unknown attribute {:?}", r.attribute)));
        }
        let step = ReasoningStep {
            attribute: r.attribute.clone(),
            text: normalize_ws(&r.description),
        };
        match r.level {
            Level::Low => reasoning.low_level.push(step),
            Level::High => reasoning.high_level.push(step),
        }
    }
    let doc = CoTDocument {
        summary: SUMMARY_TEMPLATE.to_string(),
        caption: normalize_ws(caption),
        reasoning,
        conclusion: Conclusion::for_label(label),
    };
    validate(&doc)?;
    Ok(doc)
}

/// Reasoning stage text as it appears in the canonical form.
pub fn reasoning_text(doc: &CoTDocument) -> String {
    reasoning_body(&doc.reasoning)
}

/// Interpretations as plain sentences (`attribute: description`), with no
/// stage tags or level markers.
pub fn interpretation_text(doc: &CoTDocument) -> String {
    doc.reasoning
        .steps()
        .map(|(_, s)| format!("{}: {}", s.attribute, s.text))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Best-effort body of `stage`, for scoring outputs that fail the strict
/// grammar. Returns the text between the first open tag and the following
/// close tag, if both exist.
pub fn lenient_stage_body(text: &str, stage: Stage) -> Option<String> {
    let start = text.find(stage.open_tag())? + stage.open_tag().len();
    let len = text[start..].find(stage.close_tag())?;
    Some(normalize_ws(&text[start..start + len]))
}
