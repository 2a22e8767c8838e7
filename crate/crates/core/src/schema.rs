//! Schema object model, the field DSL (`name::type::description`), and the
//! canonical JSON document format.

use std::collections::HashSet;
use std::fmt;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Task name under which the entity task is addressed in prompts and results.
pub const ENTITY_TASK: &str = "entities";

/// Current schema document version.
pub const SCHEMA_VERSION: u32 = 1;

const FORBIDDEN_NAME_CHARS: [char; 5] = ['(', ')', '[', ']', '|'];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldKind {
    /// At most one value per instance.
    Str,
    /// Zero or more values per instance.
    List,
}

impl FieldKind {
    pub fn as_str(self) -> &'static str {
        match self {
            FieldKind::Str => "str",
            FieldKind::List => "list",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldSpec {
    pub name: String,
    pub kind: FieldKind,
    pub description: Option<String>,
    pub choices: Option<Vec<String>>,
}

impl FieldSpec {
    pub fn new(name: impl Into<String>) -> Self {
        FieldSpec {
            name: name.into(),
            kind: FieldKind::Str,
            description: None,
            choices: None,
        }
    }

    pub fn with_kind(mut self, kind: FieldKind) -> Self {
        self.kind = kind;
        self
    }

    pub fn with_description(mut self, description: impl Into<String>) -> Self {
        self.description = Some(description.into());
        self
    }

    pub fn with_choices<I, S>(mut self, choices: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.choices = Some(choices.into_iter().map(Into::into).collect());
        self
    }

    /// Renders the canonical DSL form: `name[::[a|b]]::kind[::description]`.
    pub fn to_dsl(&self) -> String {
        let mut out = self.name.clone();
        if let Some(choices) = &self.choices {
            out.push_str("::[");
            out.push_str(&choices.join("|"));
            out.push(']');
        }
        out.push_str("::");
        out.push_str(self.kind.as_str());
        if let Some(desc) = &self.description {
            out.push_str("::");
            out.push_str(desc);
        }
        out
    }
}

impl fmt::Display for FieldSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_dsl())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EntitySpec {
    pub label: String,
    pub description: Option<String>,
}

impl EntitySpec {
    pub fn new(label: impl Into<String>) -> Self {
        EntitySpec {
            label: label.into(),
            description: None,
        }
    }

    pub fn described(label: impl Into<String>, description: impl Into<String>) -> Self {
        EntitySpec {
            label: label.into(),
            description: Some(description.into()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSpec {
    pub label: String,
    pub description: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassificationSpec {
    pub task_name: String,
    pub labels: Vec<LabelSpec>,
    pub multi_label: bool,
    /// Decision threshold on per-label sigmoid probabilities; ignored for
    /// single-label tasks.
    pub threshold: f64,
}

impl ClassificationSpec {
    pub fn single_label<I, S>(task_name: impl Into<String>, labels: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        ClassificationSpec {
            task_name: task_name.into(),
            labels: labels
                .into_iter()
                .map(|l| LabelSpec {
                    label: l.into(),
                    description: None,
                })
                .collect(),
            multi_label: false,
            threshold: 0.5,
        }
    }

    pub fn multi_label<I, S>(task_name: impl Into<String>, labels: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        ClassificationSpec {
            multi_label: true,
            ..Self::single_label(task_name, labels)
        }
    }

    pub fn label_names(&self) -> impl Iterator<Item = &str> {
        self.labels.iter().map(|l| l.label.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StructureSpec {
    pub parent_name: String,
    pub fields: Vec<FieldSpec>,
}

impl StructureSpec {
    pub fn new(parent_name: impl Into<String>, fields: Vec<FieldSpec>) -> Self {
        StructureSpec {
            parent_name: parent_name.into(),
            fields,
        }
    }

    /// Builds a structure from DSL field strings.
    pub fn from_dsl<'a>(
        parent_name: impl Into<String>,
        fields: impl IntoIterator<Item = &'a str>,
    ) -> Result<Self, DslError> {
        let fields = fields.into_iter().map(parse_field_dsl).collect::<Result<Vec<_>, _>>()?;
        Ok(StructureSpec::new(parent_name, fields))
    }
}

/// A declarative bundle of extraction tasks executed together.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Schema {
    pub entities: Option<Vec<EntitySpec>>,
    pub classifications: Vec<ClassificationSpec>,
    pub structures: Vec<StructureSpec>,
}

impl Schema {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_entities<I, S>(mut self, labels: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.entities = Some(labels.into_iter().map(EntitySpec::new).collect());
        self
    }

    pub fn with_entity_specs(mut self, specs: Vec<EntitySpec>) -> Self {
        self.entities = Some(specs);
        self
    }

    pub fn with_classification(mut self, spec: ClassificationSpec) -> Self {
        self.classifications.push(spec);
        self
    }

    pub fn with_structure(mut self, spec: StructureSpec) -> Self {
        self.structures.push(spec);
        self
    }

    pub fn task_count(&self) -> usize {
        usize::from(self.entities.is_some()) + self.classifications.len() + self.structures.len()
    }

    pub fn to_doc(&self) -> SchemaDoc {
        SchemaDoc {
            version: SCHEMA_VERSION,
            entities: self
                .entities
                .as_ref()
                .map(|ents| ents.iter().map(|e| (e.label.clone(), e.description.clone())).collect()),
            classifications: if self.classifications.is_empty() {
                None
            } else {
                Some(
                    self.classifications
                        .iter()
                        .map(|c| ClassificationDoc {
                            task: c.task_name.clone(),
                            labels: c
                                .labels
                                .iter()
                                .map(|l| (l.label.clone(), l.description.clone()))
                                .collect(),
                            multi_label: c.multi_label,
                            threshold: Some(c.threshold),
                        })
                        .collect(),
                )
            },
            structures: if self.structures.is_empty() {
                None
            } else {
                Some(
                    self.structures
                        .iter()
                        .map(|s| StructureDoc {
                            name: s.parent_name.clone(),
                            fields: s.fields.iter().map(FieldSpec::to_dsl).collect(),
                        })
                        .collect(),
                )
            },
        }
    }

    /// Converts a parsed document into a validated schema.
    pub fn from_doc(doc: SchemaDoc) -> Result<Self, SchemaError> {
        if doc.version != SCHEMA_VERSION {
            return Err(SchemaError::UnsupportedVersion(doc.version));
        }
        let mut violations = Vec::new();
        let entities = doc.entities.map(|map| {
            map.into_iter()
                .map(|(label, description)| EntitySpec { label, description })
                .collect()
        });
        let classifications = doc
            .classifications
            .unwrap_or_default()
            .into_iter()
            .map(|c| ClassificationSpec {
                task_name: c.task,
                labels: c
                    .labels
                    .into_iter()
                    .map(|(label, description)| LabelSpec { label, description })
                    .collect(),
                multi_label: c.multi_label,
                threshold: c.threshold.unwrap_or(0.5),
            })
            .collect();
        let mut structures = Vec::new();
        for (si, s) in doc.structures.unwrap_or_default().into_iter().enumerate() {
            let mut fields = Vec::with_capacity(s.fields.len());
            for (fi, raw) in s.fields.iter().enumerate() {
                match parse_field_dsl(raw) {
                    Ok(f) => fields.push(f),
                    Err(e) => violations.push(Violation::new(format!("structures[{si}].fields[{fi}]"), e.to_string())),
                }
            }
            structures.push(StructureSpec {
                parent_name: s.name,
                fields,
            });
        }
        let schema = Schema {
            entities,
            classifications,
            structures,
        };
        violations.extend(validate_schema(&schema));
        if violations.is_empty() {
            Ok(schema)
        } else {
            Err(SchemaError::Invalid(violations))
        }
    }
}

/// Wire form of a [`Schema`]. Field entries are DSL strings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemaDoc {
    pub version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entities: Option<IndexMap<String, Option<String>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classifications: Option<Vec<ClassificationDoc>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub structures: Option<Vec<StructureDoc>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassificationDoc {
    pub task: String,
    pub labels: IndexMap<String, Option<String>>,
    #[serde(default)]
    pub multi_label: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StructureDoc {
    pub name: String,
    pub fields: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DslError {
    #[error("field name is empty")]
    EmptyName,
    #[error("invalid field name {0:?}")]
    InvalidName(String),
    #[error("unknown type token {0:?}")]
    UnknownTypeToken(String),
    #[error("malformed choices: {0}")]
    MalformedChoices(String),
    #[error("segment {0:?} repeats an already-set type or choice list")]
    DuplicateSegment(String),
}

impl DslError {
    /// Stable name of the error variant.
    pub fn kind(&self) -> &'static str {
        match self {
            DslError::EmptyName => "EmptyName",
            DslError::InvalidName(_) => "InvalidName",
            DslError::UnknownTypeToken(_) => "UnknownTypeToken",
            DslError::MalformedChoices(_) => "MalformedChoices",
            DslError::DuplicateSegment(_) => "DuplicateSegment",
        }
    }
}

/// One invariant violation found by [`validate_schema`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub path: String,
    pub message: String,
}

impl Violation {
    fn new(path: impl Into<String>, message: impl Into<String>) -> Self {
        Violation {
            path: path.into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.path.is_empty() {
            write!(f, "<schema>: {}", self.message)
        } else {
            write!(f, "{}: {}", self.path, self.message)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SchemaError {
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("unsupported schema version {0}")]
    UnsupportedVersion(u32),
    #[error("schema invalid: {}", display_violations(.0))]
    Invalid(Vec<Violation>),
}

fn display_violations(vs: &[Violation]) -> String {
    vs.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
}

impl From<serde_json::Error> for SchemaError {
    fn from(e: serde_json::Error) -> Self {
        SchemaError::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        }
    }
}

enum Segment<'a> {
    Kind(FieldKind),
    Choices(&'a str),
    Other,
}

fn classify_segment(seg: &str) -> Segment<'_> {
    let t = seg.trim();
    match t {
        "str" => Segment::Kind(FieldKind::Str),
        "list" => Segment::Kind(FieldKind::List),
        _ if t.len() >= 2 && t.starts_with('[') && t.ends_with(']') => Segment::Choices(&t[1..t.len() - 1]),
        _ => Segment::Other,
    }
}

fn parse_choices(inner: &str) -> Result<Vec<String>, DslError> {
    let options: Vec<String> = inner.split('|').map(|o| o.trim().to_string()).collect();
    if options.iter().any(String::is_empty) {
        return Err(DslError::MalformedChoices(format!("empty option in [{inner}]")));
    }
    if options.len() < 2 {
        return Err(DslError::MalformedChoices(format!(
            "need at least 2 options, got [{inner}]"
        )));
    }
    let mut seen = HashSet::new();
    for o in &options {
        if !seen.insert(o.as_str()) {
            return Err(DslError::MalformedChoices(format!("duplicate option {o:?}")));
        }
    }
    Ok(options)
}

fn check_field_name(name: &str) -> Result<(), DslError> {
    if name.is_empty() {
        return Err(DslError::EmptyName);
    }
    // A trailing ':' would merge with the "::" separator on re-render.
    if name.contains("::") || name.ends_with(':') || name.contains(FORBIDDEN_NAME_CHARS) {
        return Err(DslError::InvalidName(name.to_string()));
    }
    Ok(())
}

/// Parses one field specification.
///
/// Grammar: `name (:: (str|list|[opt|opt...]))* (:: description)?`. Type and
/// choice segments may appear in either order; everything after the last
/// recognised segment is the description, verbatim (it may contain `::`).
pub fn parse_field_dsl(spec: &str) -> Result<FieldSpec, DslError> {
    let mut segments = spec.split("::");
    let name = segments.next().unwrap_or_default().trim();
    check_field_name(name)?;
    let rest: Vec<&str> = segments.collect();

    let typed = rest
        .iter()
        .rposition(|s| !matches!(classify_segment(s), Segment::Other))
        .map_or(0, |i| i + 1);

    let mut kind = None;
    let mut choices = None;
    for seg in &rest[..typed] {
        match classify_segment(seg) {
            Segment::Kind(k) => {
                if kind.replace(k).is_some() {
                    return Err(DslError::DuplicateSegment(seg.to_string()));
                }
            }
            Segment::Choices(inner) => {
                let parsed = parse_choices(inner)?;
                if choices.replace(parsed).is_some() {
                    return Err(DslError::DuplicateSegment(seg.to_string()));
                }
            }
            Segment::Other => return Err(DslError::UnknownTypeToken(seg.to_string())),
        }
    }

    let description = if typed < rest.len() {
        let d = rest[typed..].join("::");
        (!d.trim().is_empty()).then_some(d)
    } else {
        None
    };

    Ok(FieldSpec {
        name: name.to_string(),
        kind: kind.unwrap_or(FieldKind::Str),
        description,
        choices,
    })
}

const GOLDEN_INPUTS: &[&str] = &[
    "name::str::product name",
    "category::[electronics|software|hardware]::str",
    "category::str::[electronics|software|hardware]",
    "tags",
    "tags::list",
    "features::list::key product features",
    "price::[x]::str",
    "price::[a|]::str",
    "price::[a|a]",
    "::str",
    "",
    "   ",
    "a(b)::str",
    "a|b",
    "a::weird::str",
    "a::str::list",
    "a::[p|q]::[r|s]",
    "note::str::see a::b for details",
    "note::some text",
    "note::str::  ",
    " padded :: list ",
    "size::[ S | M | L ]",
    "x:::str",
    "date::list::[",
    "émoji✓::str::naïve déscription",
];

/// Reference inputs for the field DSL with their parse outcomes, exported
/// so other implementations of the grammar can be checked against this one.
pub fn dsl_golden_vectors() -> serde_json::Value {
    let vectors: Vec<serde_json::Value> = GOLDEN_INPUTS
        .iter()
        .map(|input| match parse_field_dsl(input) {
            Ok(f) => serde_json::json!({
                "input": input,
                "ok": {
                    "name": f.name,
                    "kind": f.kind.as_str(),
                    "description": f.description,
                    "choices": f.choices,
                    "canonical": f.to_dsl(),
                },
            }),
            Err(e) => serde_json::json!({ "input": input, "error": e.kind() }),
        })
        .collect();
    serde_json::json!({ "version": SCHEMA_VERSION, "vectors": vectors })
}

fn check_unique<'a>(
    items: impl Iterator<Item = &'a str>,
    path: impl Fn(usize) -> String,
    what: &str,
    out: &mut Vec<Violation>,
) {
    let mut seen = HashSet::new();
    for (i, item) in items.enumerate() {
        if !seen.insert(item) {
            out.push(Violation::new(path(i), format!("duplicate {what} {item:?}")));
        }
    }
}

/// Returns every invariant violation in `schema`; empty means valid.
pub fn validate_schema(schema: &Schema) -> Vec<Violation> {
    let mut out = Vec::new();
    if schema.task_count() == 0 {
        out.push(Violation::new("", "schema declares no tasks"));
    }

    let mut task_names: Vec<(String, String)> = Vec::new();

    if let Some(entities) = &schema.entities {
        task_names.push(("entities".into(), ENTITY_TASK.into()));
        if entities.is_empty() {
            out.push(Violation::new("entities", "entity task has no entity types"));
        }
        for (i, e) in entities.iter().enumerate() {
            if e.label.trim().is_empty() {
                out.push(Violation::new(format!("entities[{i}]"), "empty entity label"));
            }
        }
        check_unique(
            entities.iter().map(|e| e.label.as_str()),
            |i| format!("entities[{i}]"),
            "entity label",
            &mut out,
        );
    }

    for (ci, c) in schema.classifications.iter().enumerate() {
        let path = format!("classifications[{ci}]");
        task_names.push((path.clone(), c.task_name.clone()));
        if c.task_name.trim().is_empty() {
            out.push(Violation::new(&path, "empty task name"));
        }
        if c.labels.len() < 2 {
            out.push(Violation::new(
                &path,
                format!("need at least 2 labels, got {}", c.labels.len()),
            ));
        }
        for (li, l) in c.labels.iter().enumerate() {
            if l.label.trim().is_empty() {
                out.push(Violation::new(format!("{path}.labels[{li}]"), "empty label"));
            }
        }
        check_unique(c.label_names(), |li| format!("{path}.labels[{li}]"), "label", &mut out);
        if !(0.0..=1.0).contains(&c.threshold) {
            out.push(Violation::new(
                &path,
                format!("threshold {} outside [0, 1]", c.threshold),
            ));
        }
    }

    for (si, s) in schema.structures.iter().enumerate() {
        let path = format!("structures[{si}]");
        task_names.push((path.clone(), s.parent_name.clone()));
        if s.parent_name.trim().is_empty() {
            out.push(Violation::new(&path, "empty structure name"));
        }
        if s.fields.is_empty() {
            out.push(Violation::new(&path, "structure has no fields"));
        }
        for (fi, f) in s.fields.iter().enumerate() {
            let fpath = format!("{path}.fields[{fi}]");
            if let Err(e) = check_field_name(&f.name) {
                out.push(Violation::new(&fpath, e.to_string()));
            } else if f.name.trim() != f.name {
                out.push(Violation::new(&fpath, "field name has surrounding whitespace"));
            }
            if let Some(choices) = &f.choices {
                let rendered = choices.join("|");
                match parse_choices(&rendered) {
                    Ok(parsed) if parsed == *choices => {}
                    Ok(_) => out.push(Violation::new(&fpath, "choice options not trimmed")),
                    Err(e) => out.push(Violation::new(&fpath, e.to_string())),
                }
            }
        }
        check_unique(
            s.fields.iter().map(|f| f.name.as_str()),
            |fi| format!("{path}.fields[{fi}]"),
            "field name",
            &mut out,
        );
    }

    let mut seen = HashSet::new();
    for (path, name) in &task_names {
        if !seen.insert(name.as_str()) {
            out.push(Violation::new(path, format!("duplicate task name {name:?}")));
        }
    }
    out
}

/// Serializes to canonical JSON (field entries in canonical DSL form).
pub fn schema_to_json(schema: &Schema) -> String {
    serde_json::to_string_pretty(&schema.to_doc()).expect("schema document serializes")
}

/// Parses and validates a JSON schema document.
pub fn json_to_schema(doc: &str) -> Result<Schema, SchemaError> {
    let parsed: SchemaDoc = serde_json::from_str(doc)?;
    Schema::from_doc(parsed)
}
