//! Stimulation prompt templates.
//!
//! Templates are plain text with the placeholders `{head}`, `{relation}`,
//! `{tail}`, `{head_desc}` and `{tail_desc}`. Four defaults ship built in:
//! PT1/PT2 for triple classification (names only / names plus descriptions)
//! and PT3/PT4 for relation prediction, where the relation is the class and
//! is never rendered. Any of them can be replaced from a TOML file.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kg::{EntityId, KnowledgeGraph, RelationId, Triple};

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("template {id}: unknown placeholder {{{name}}}")]
    UnknownPlaceholder { id: String, name: String },
    #[error("template {id}: relation-prediction templates must not contain {{relation}}")]
    RelationInRelationPrediction { id: String },
    #[error("template {id}: {reason}")]
    Invalid { id: String, reason: String },
    #[error("template {template}: no description for entity {entity:?}")]
    MissingDescription { template: String, entity: String },
    #[error("template {template}: needs a full triple, got a (head, tail) pair")]
    NeedsTriple { template: String },
    #[error("unknown template id {0:?}")]
    UnknownTemplate(String),
    #[error("template file {path}: {message}")]
    File { path: String, message: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptStyle {
    TripleClassification,
    RelationPrediction,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Slot {
    Head,
    Relation,
    Tail,
    HeadDesc,
    TailDesc,
}

impl Slot {
    fn parse(name: &str) -> Option<Slot> {
        Some(match name {
            "head" => Slot::Head,
            "relation" => Slot::Relation,
            "tail" => Slot::Tail,
            "head_desc" => Slot::HeadDesc,
            "tail_desc" => Slot::TailDesc,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Piece {
    Text(String),
    Slot(Slot),
}

/// A validated prompt template.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptTemplate {
    id: String,
    style: PromptStyle,
    body: String,
    pieces: Vec<Piece>,
}

pub const PT1_BODY: &str = "Is it true that {head} {relation} {tail}?";
pub const PT3_BODY: &str = "What is the relationship between {head} and {tail}?";
const DESC_SUFFIX: &str =
    " {head} is described as: {head_desc}. {tail} is described as: {tail_desc}.";

impl PromptTemplate {
    pub fn new(
        id: impl Into<String>,
        style: PromptStyle,
        body: impl Into<String>,
    ) -> Result<Self, PromptError> {
        let id = id.into();
        let body = body.into();
        let pieces = parse_body(&id, &body)?;
        let has = |s: Slot| pieces.contains(&Piece::Slot(s));
        if style == PromptStyle::RelationPrediction && has(Slot::Relation) {
            return Err(PromptError::RelationInRelationPrediction { id });
        }
        let descs = [has(Slot::HeadDesc), has(Slot::TailDesc)];
        let check = |want: bool| -> Result<(), PromptError> {
            if descs != [want, want] {
                let reason = if want {
                    "must contain both {head_desc} and {tail_desc}"
                } else {
                    "must not contain description placeholders"
                };
                return Err(PromptError::Invalid {
                    id: id.clone(),
                    reason: reason.into(),
                });
            }
            Ok(())
        };
        match id.as_str() {
            "PT1" | "PT3" => check(false)?,
            "PT2" | "PT4" => check(true)?,
            _ => {}
        }
        Ok(PromptTemplate {
            id,
            style,
            body,
            pieces,
        })
    }

    pub fn pt1() -> Self {
        Self::new("PT1", PromptStyle::TripleClassification, PT1_BODY).unwrap()
    }

    pub fn pt2() -> Self {
        Self::new(
            "PT2",
            PromptStyle::TripleClassification,
            format!("{PT1_BODY}{DESC_SUFFIX}"),
        )
        .unwrap()
    }

    pub fn pt3() -> Self {
        Self::new("PT3", PromptStyle::RelationPrediction, PT3_BODY).unwrap()
    }

    pub fn pt4() -> Self {
        Self::new(
            "PT4",
            PromptStyle::RelationPrediction,
            format!("{PT3_BODY}{DESC_SUFFIX}"),
        )
        .unwrap()
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn style(&self) -> PromptStyle {
        self.style
    }

    pub fn body(&self) -> &str {
        &self.body
    }

    pub fn uses_descriptions(&self) -> bool {
        self.pieces
            .iter()
            .any(|p| matches!(p, Piece::Slot(Slot::HeadDesc | Slot::TailDesc)))
    }

    /// Renders the template for `subject`.
    ///
    /// Descriptions are looked up in `descriptions` only when the template
    /// uses them; a missing or empty description is an error.
    pub fn render(
        &self,
        g: &KnowledgeGraph,
        subject: PromptSubject,
        descriptions: Option<&dyn Descriptions>,
    ) -> Result<RenderedPrompt, PromptError> {
        let (head, relation, tail) = subject.parts();
        let describe = |e: EntityId| -> Result<&str, PromptError> {
            descriptions
                .and_then(|d| d.description(e))
                .filter(|s| !s.is_empty())
                .ok_or_else(|| PromptError::MissingDescription {
                    template: self.id.clone(),
                    entity: g.entity_name(e).to_owned(),
                })
        };
        let mut text = String::new();
        let mut spans = Vec::new();
        for piece in &self.pieces {
            let value: String = match piece {
                Piece::Text(s) => {
                    text.push_str(s);
                    continue;
                }
                Piece::Slot(Slot::Head) => entity_surface(g.entity_name(head)),
                Piece::Slot(Slot::Tail) => entity_surface(g.entity_name(tail)),
                Piece::Slot(Slot::Relation) => {
                    let r = relation.ok_or_else(|| PromptError::NeedsTriple {
                        template: self.id.clone(),
                    })?;
                    relation_phrase(g.relation_name(r))
                }
                Piece::Slot(Slot::HeadDesc) => describe(head)?.to_owned(),
                Piece::Slot(Slot::TailDesc) => describe(tail)?.to_owned(),
            };
            let start = text.len();
            text.push_str(&value);
            spans.push(start..text.len());
        }
        Ok(RenderedPrompt {
            text,
            source: subject,
            template_id: self.id.clone(),
            spans,
        })
    }
}

fn parse_body(id: &str, body: &str) -> Result<Vec<Piece>, PromptError> {
    let mut pieces = Vec::new();
    let mut rest = body;
    let mut literal = String::new();
    while let Some(open) = rest.find('{') {
        literal.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let close = after.find('}');
        let name = close.map(|c| &after[..c]);
        match name {
            Some(n) if !n.is_empty() && n.chars().all(|c| c.is_ascii_lowercase() || c == '_') => {
                let slot = Slot::parse(n).ok_or_else(|| PromptError::UnknownPlaceholder {
                    id: id.to_owned(),
                    name: n.to_owned(),
                })?;
                if !literal.is_empty() {
                    pieces.push(Piece::Text(std::mem::take(&mut literal)));
                }
                pieces.push(Piece::Slot(slot));
                rest = &after[n.len() + 1..];
            }
            _ => {
                // not a placeholder, keep the brace literally
                literal.push('{');
                rest = after;
            }
        }
    }
    literal.push_str(rest);
    if !literal.is_empty() {
        pieces.push(Piece::Text(literal));
    }
    Ok(pieces)
}

/// Surface form of an entity name: underscores become spaces.
pub fn entity_surface(name: &str) -> String {
    name.replace('_', " ")
}

/// Surface form of a relation name: underscores and slashes become spaces,
/// runs of whitespace collapse.
pub fn relation_phrase(name: &str) -> String {
    name.replace(['_', '/'], " ")
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

/// Turns a triple into a sentence: `"<head> <relation phrase> <tail>."`.
pub fn transform_triple(t: &Triple, g: &KnowledgeGraph) -> String {
    format!(
        "{} {} {}.",
        entity_surface(g.entity_name(t.head)),
        relation_phrase(g.relation_name(t.relation)),
        entity_surface(g.entity_name(t.tail))
    )
}

/// Source of entity descriptions for rendering.
pub trait Descriptions {
    fn description(&self, e: EntityId) -> Option<&str>;
}

impl Descriptions for KnowledgeGraph {
    fn description(&self, e: EntityId) -> Option<&str> {
        self.entity_description(e)
    }
}

impl Descriptions for HashMap<EntityId, String> {
    fn description(&self, e: EntityId) -> Option<&str> {
        self.get(&e).map(String::as_str)
    }
}

impl Descriptions for BTreeMap<EntityId, String> {
    fn description(&self, e: EntityId) -> Option<&str> {
        self.get(&e).map(String::as_str)
    }
}

/// What a prompt is rendered from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PromptSubject {
    Triple(Triple),
    Pair { head: EntityId, tail: EntityId },
}

impl PromptSubject {
    fn parts(&self) -> (EntityId, Option<RelationId>, EntityId) {
        match *self {
            PromptSubject::Triple(t) => (t.head, Some(t.relation), t.tail),
            PromptSubject::Pair { head, tail } => (head, None, tail),
        }
    }
}

impl From<Triple> for PromptSubject {
    fn from(t: Triple) -> Self {
        PromptSubject::Triple(t)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderedPrompt {
    pub text: String,
    pub source: PromptSubject,
    pub template_id: String,
    /// Byte ranges of substituted values within `text`, in template order.
    pub spans: Vec<Range<usize>>,
}

impl RenderedPrompt {
    /// The text with every substituted value removed.
    pub fn scaffold(&self) -> String {
        let mut out = String::new();
        let mut pos = 0;
        for s in &self.spans {
            out.push_str(&self.text[pos..s.start]);
            pos = s.end;
        }
        out.push_str(&self.text[pos..]);
        out
    }

    pub fn substituted(&self) -> Vec<&str> {
        self.spans.iter().map(|s| &self.text[s.clone()]).collect()
    }
}

impl fmt::Display for RenderedPrompt {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text)
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TemplateFile {
    #[serde(default)]
    template: Vec<TemplateEntry>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TemplateEntry {
    id: String,
    style: PromptStyle,
    body: String,
}

/// Built-in templates plus any loaded overrides, keyed by id.
#[derive(Clone, Debug)]
pub struct TemplateSet {
    templates: BTreeMap<String, PromptTemplate>,
}

impl Default for TemplateSet {
    fn default() -> Self {
        let mut templates = BTreeMap::new();
        for t in [
            PromptTemplate::pt1(),
            PromptTemplate::pt2(),
            PromptTemplate::pt3(),
            PromptTemplate::pt4(),
        ] {
            templates.insert(t.id.clone(), t);
        }
        TemplateSet { templates }
    }
}

impl TemplateSet {
    /// Parses TOML of the form
    ///
    /// ```toml
    /// [[template]]
    /// id = "PT1"
    /// style = "triple_classification"
    /// body = "Is it true that {head} {relation} {tail}?"
    /// ```
    ///
    /// Entries replace built-ins with the same id.
    pub fn from_toml(text: &str) -> Result<Self, PromptError> {
        let file: TemplateFile = toml::from_str(text).map_err(|e| PromptError::File {
            path: "<inline>".into(),
            message: e.to_string(),
        })?;
        let mut set = TemplateSet::default();
        for entry in file.template {
            let t = PromptTemplate::new(entry.id, entry.style, entry.body)?;
            set.templates.insert(t.id.clone(), t);
        }
        Ok(set)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PromptError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| PromptError::File {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::from_toml(&text).map_err(|e| match e {
            PromptError::File { message, .. } => PromptError::File {
                path: path.display().to_string(),
                message,
            },
            other => other,
        })
    }

    pub fn get(&self, id: &str) -> Result<&PromptTemplate, PromptError> {
        self.templates
            .get(id)
            .ok_or_else(|| PromptError::UnknownTemplate(id.to_owned()))
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.templates.keys().map(String::as_str)
    }
}
