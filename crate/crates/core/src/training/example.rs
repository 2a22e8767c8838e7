use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::schema::{Schema, SchemaDoc, SchemaError};
use crate::tokenizer::slice_chars;

/// Character span of a gold annotation, end exclusive.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldSpan {
    pub start: usize,
    pub end: usize,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldEntity {
    pub label: String,
    #[serde(flatten)]
    pub span: GoldSpan,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldStructure {
    pub name: String,
    /// One map per instance, in text order: field name → values.
    pub instances: Vec<IndexMap<String, Vec<GoldSpan>>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldClassification {
    pub task: String,
    pub labels: Vec<String>,
}

/// One annotated training or evaluation example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ExampleDoc", into = "ExampleDoc")]
pub struct Example {
    pub text: String,
    pub schema: Schema,
    pub entities: Vec<GoldEntity>,
    pub structures: Vec<GoldStructure>,
    pub classifications: Vec<GoldClassification>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ExampleDoc {
    text: String,
    schema: SchemaDoc,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    entities: Vec<GoldEntity>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    structures: Vec<GoldStructure>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    classifications: Vec<GoldClassification>,
}

impl TryFrom<ExampleDoc> for Example {
    type Error = SchemaError;

    fn try_from(doc: ExampleDoc) -> Result<Self, Self::Error> {
        Ok(Example {
            text: doc.text,
            schema: Schema::from_doc(doc.schema)?,
            entities: doc.entities,
            structures: doc.structures,
            classifications: doc.classifications,
        })
    }
}

impl From<Example> for ExampleDoc {
    fn from(e: Example) -> Self {
        ExampleDoc {
            text: e.text,
            schema: e.schema.to_doc(),
            entities: e.entities,
            structures: e.structures,
            classifications: e.classifications,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CorpusError {
    #[error("line {line}: {source}")]
    Json {
        line: usize,
        #[source]
        source: SchemaError,
    },
    #[error("example invalid: {0}")]
    Invalid(String),
}

impl Example {
    /// Checks that every gold annotation refers to declared tasks and that
    /// every span's text is the source slice at its offsets.
    pub fn check(&self) -> Result<(), CorpusError> {
        let bad = |m: String| Err(CorpusError::Invalid(m));
        let span_ok = |s: &GoldSpan| slice_chars(&self.text, s.start, s.end) == Some(s.text.as_str());
        let labels: Vec<&str> = self
            .schema
            .entities
            .iter()
            .flatten()
            .map(|e| e.label.as_str())
            .collect();
        for e in &self.entities {
            if !labels.contains(&e.label.as_str()) {
                return bad(format!("entity label {:?} not in schema", e.label));
            }
            if !span_ok(&e.span) {
                return bad(format!("entity span {:?} does not match text", e.span));
            }
        }
        for g in &self.structures {
            let Some(spec) = self.schema.structures.iter().find(|s| s.parent_name == g.name) else {
                return bad(format!("structure {:?} not in schema", g.name));
            };
            if g.instances.len() > 19 {
                return bad(format!("structure {:?} has more than 19 instances", g.name));
            }
            for inst in &g.instances {
                for (field, spans) in inst {
                    let Some(f) = spec.fields.iter().find(|f| &f.name == field) else {
                        return bad(format!("field {field:?} not in structure {:?}", g.name));
                    };
                    if f.kind == crate::schema::FieldKind::Str && spans.len() > 1 {
                        return bad(format!("str field {field:?} has {} values", spans.len()));
                    }
                    if let Some(s) = spans.iter().find(|s| !span_ok(s)) {
                        return bad(format!("field span {s:?} does not match text"));
                    }
                }
            }
        }
        for c in &self.classifications {
            let Some(spec) = self.schema.classifications.iter().find(|s| s.task_name == c.task) else {
                return bad(format!("classification task {:?} not in schema", c.task));
            };
            if !spec.multi_label && c.labels.len() != 1 {
                return bad(format!("single-label task {:?} needs exactly one label", c.task));
            }
            if let Some(l) = c.labels.iter().find(|l| !spec.label_names().any(|n| n == *l)) {
                return bad(format!("label {l:?} not in task {:?}", c.task));
            }
        }
        Ok(())
    }
}

/// Parses a JSON-lines corpus, one example per non-empty line.
pub fn read_jsonl(data: &str) -> Result<Vec<Example>, CorpusError> {
    data.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let ex: Example = serde_json::from_str(line).map_err(|e| CorpusError::Json {
                line: i + 1,
                source: e.into(),
            })?;
            ex.check()?;
            Ok(ex)
        })
        .collect()
}

pub fn write_jsonl(examples: &[Example]) -> String {
    let mut out = String::new();
    for e in examples {
        out.push_str(&serde_json::to_string(e).expect("example serializes"));
        out.push('\n');
    }
    out
}
