//! Compiles a [`Schema`] and input text into one token sequence:
//! `task_1 [SEP] task_2 [SEP] ... task_n [SEP] text`, recording which schema
//! element every marker token stands for.

use std::fmt;

use serde::Serialize;
use thiserror::Error;

use crate::schema::{ClassificationSpec, EntitySpec, Schema, StructureSpec, ENTITY_TASK};
use crate::tokenizer::{Special, TokenId, TokenSeq, Vocabulary};

pub const DEFAULT_MAX_LEN: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Role {
    P,
    E,
    C,
    L,
}

/// Which schema element a marker token belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Owner {
    EntityTask,
    Entity { index: usize },
    Classification { task: usize },
    Label { task: usize, label: usize },
    Structure { structure: usize },
    Field { structure: usize, field: usize },
}

impl fmt::Display for Owner {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Owner::EntityTask => write!(f, "entities"),
            Owner::Entity { index } => write!(f, "entities[{index}]"),
            Owner::Classification { task } => write!(f, "classifications[{task}]"),
            Owner::Label { task, label } => write!(f, "classifications[{task}].labels[{label}]"),
            Owner::Structure { structure } => write!(f, "structures[{structure}]"),
            Owner::Field { structure, field } => {
                write!(f, "structures[{structure}].fields[{field}]")
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Binding {
    pub position: usize,
    pub role: Role,
    pub owner: Owner,
}

/// A compiled task prompt; binding positions are relative to `ids`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PromptSegment {
    pub ids: Vec<TokenId>,
    pub bindings: Vec<Binding>,
}

impl PromptSegment {
    fn marker(&mut self, special: Special, role: Role, owner: Owner) {
        self.bindings.push(Binding {
            position: self.ids.len(),
            role,
            owner,
        });
        self.ids.push(special.id());
    }

    fn words(&mut self, v: &Vocabulary, text: &str) -> usize {
        let ids = v.encode_words(text);
        let n = ids.len();
        self.ids.extend(ids);
        n
    }

    fn named_item(&mut self, v: &Vocabulary, name: &str, description: Option<&str>) -> Result<(), PromptError> {
        if self.words(v, name) == 0 {
            return Err(PromptError::EmptyLabel(name.to_string()));
        }
        if let Some(desc) = description {
            self.words(v, ":");
            self.words(v, desc);
        }
        Ok(())
    }

    fn open(&mut self, v: &Vocabulary, owner: Owner, name: &str) -> Result<(), PromptError> {
        self.marker(Special::Prompt, Role::P, owner);
        if self.words(v, name) == 0 {
            return Err(PromptError::EmptyLabel(name.to_string()));
        }
        self.words(v, "(");
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PromptError {
    #[error("label {0:?} produces no tokens")]
    EmptyLabel(String),
    #[error("prompt needs {needed} tokens but the limit is {max_len}")]
    ContextOverflow { needed: usize, max_len: usize },
}

/// `[P] entities ( [E] e1 [: desc] [E] e2 ... )`
pub fn compile_entity_prompt(entities: &[EntitySpec], v: &Vocabulary) -> Result<PromptSegment, PromptError> {
    if entities.is_empty() {
        return Err(PromptError::EmptyLabel(String::new()));
    }
    let mut seg = PromptSegment::default();
    seg.open(v, Owner::EntityTask, ENTITY_TASK)?;
    for (index, e) in entities.iter().enumerate() {
        seg.marker(Special::Entity, Role::E, Owner::Entity { index });
        seg.named_item(v, &e.label, e.description.as_deref())?;
    }
    seg.words(v, ")");
    Ok(seg)
}

/// `[P] parent ( [C] field [ a | b ] [: desc] ... )`
pub fn compile_structure_prompt(
    s: &StructureSpec,
    structure: usize,
    v: &Vocabulary,
) -> Result<PromptSegment, PromptError> {
    let mut seg = PromptSegment::default();
    seg.open(v, Owner::Structure { structure }, &s.parent_name)?;
    for (field, f) in s.fields.iter().enumerate() {
        seg.marker(Special::Child, Role::C, Owner::Field { structure, field });
        if seg.words(v, &f.name) == 0 {
            return Err(PromptError::EmptyLabel(f.name.clone()));
        }
        if let Some(choices) = &f.choices {
            seg.words(v, "[");
            for (i, c) in choices.iter().enumerate() {
                if i > 0 {
                    seg.words(v, "|");
                }
                seg.words(v, c);
            }
            seg.words(v, "]");
        }
        if let Some(desc) = &f.description {
            seg.words(v, ":");
            seg.words(v, desc);
        }
    }
    seg.words(v, ")");
    Ok(seg)
}

/// `[P] task ( [L] l1 [: desc] [L] l2 ... )`
pub fn compile_classification_prompt(
    c: &ClassificationSpec,
    task: usize,
    v: &Vocabulary,
) -> Result<PromptSegment, PromptError> {
    let mut seg = PromptSegment::default();
    seg.open(v, Owner::Classification { task }, &c.task_name)?;
    for (label, l) in c.labels.iter().enumerate() {
        seg.marker(Special::Label, Role::L, Owner::Label { task, label });
        seg.named_item(v, &l.label, l.description.as_deref())?;
    }
    seg.words(v, ")");
    Ok(seg)
}

/// Compiled model input for one (schema, text) pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PromptPlan {
    pub ids: Vec<TokenId>,
    pub bindings: Vec<Binding>,
    pub text_start: usize,
    pub text_len: usize,
    pub text: TokenSeq,
}

impl PromptPlan {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn position_of(&self, owner: Owner) -> Option<usize> {
        self.bindings.iter().find(|b| b.owner == owner).map(|b| b.position)
    }

    pub fn positions(&self, role: Role) -> impl Iterator<Item = &Binding> {
        self.bindings.iter().filter(move |b| b.role == role)
    }

    /// Marker positions of the entity types, in schema order.
    pub fn entity_positions(&self) -> Vec<usize> {
        self.positions(Role::E).map(|b| b.position).collect()
    }

    pub fn label_positions(&self, task: usize) -> Vec<usize> {
        self.bindings
            .iter()
            .filter(|b| matches!(b.owner, Owner::Label { task: t, .. } if t == task))
            .map(|b| b.position)
            .collect()
    }

    pub fn field_positions(&self, structure: usize) -> Vec<usize> {
        self.bindings
            .iter()
            .filter(|b| matches!(b.owner, Owner::Field { structure: s, .. } if s == structure))
            .map(|b| b.position)
            .collect()
    }

    /// JSON dump with token surfaces, for debugging and golden tests.
    pub fn to_debug_json(&self, v: &Vocabulary) -> serde_json::Value {
        let tokens: Vec<&str> = self.ids.iter().map(|&id| v.token(id).unwrap_or("[?]")).collect();
        let bindings: Vec<_> = self
            .bindings
            .iter()
            .map(|b| {
                serde_json::json!({
                    "position": b.position,
                    "role": b.role,
                    "owner": b.owner.to_string(),
                })
            })
            .collect();
        serde_json::json!({
            "ids": self.ids,
            "tokens": tokens,
            "bindings": bindings,
            "text_start": self.text_start,
            "text_len": self.text_len,
            "offsets": self.text.offsets,
        })
    }
}

/// Concatenates segments, each followed by `[SEP]`, then the text tokens.
pub fn assemble(segments: Vec<PromptSegment>, text: TokenSeq, max_len: usize) -> Result<PromptPlan, PromptError> {
    let prompt_len: usize = segments.iter().map(|s| s.ids.len() + 1).sum();
    let needed = prompt_len + text.len();
    if needed > max_len {
        return Err(PromptError::ContextOverflow { needed, max_len });
    }
    let mut ids = Vec::with_capacity(needed);
    let mut bindings = Vec::new();
    for seg in segments {
        let base = ids.len();
        bindings.extend(seg.bindings.into_iter().map(|b| Binding {
            position: b.position + base,
            ..b
        }));
        ids.extend(seg.ids);
        ids.push(Special::Sep.id());
    }
    let text_start = ids.len();
    ids.extend_from_slice(&text.ids);
    Ok(PromptPlan {
        ids,
        bindings,
        text_start,
        text_len: text.len(),
        text,
    })
}

/// Compiles every task in schema order (entities, classifications,
/// structures) followed by the input text.
pub fn compose_tasks(schema: &Schema, text: &str, v: &Vocabulary, max_len: usize) -> Result<PromptPlan, PromptError> {
    let mut segments = Vec::with_capacity(schema.task_count());
    if let Some(entities) = &schema.entities {
        segments.push(compile_entity_prompt(entities, v)?);
    }
    for (i, c) in schema.classifications.iter().enumerate() {
        segments.push(compile_classification_prompt(c, i, v)?);
    }
    for (i, s) in schema.structures.iter().enumerate() {
        segments.push(compile_structure_prompt(s, i, v)?);
    }
    assemble(segments, v.tokenize(text), max_len)
}

/// Strings that must be in a vocabulary for prompts of `schema` to compile
/// without unknown tokens.
pub fn prompt_corpus(schema: &Schema) -> Vec<String> {
    let mut out = vec![format!("{ENTITY_TASK} ( ) [ | ] :")];
    if let Some(entities) = &schema.entities {
        for e in entities {
            out.push(e.label.clone());
            out.extend(e.description.clone());
        }
    }
    for c in &schema.classifications {
        out.push(c.task_name.clone());
        for l in &c.labels {
            out.push(l.label.clone());
            out.extend(l.description.clone());
        }
    }
    for s in &schema.structures {
        out.push(s.parent_name.clone());
        for f in &s.fields {
            out.push(f.name.clone());
            out.extend(f.choices.iter().flatten().cloned());
            out.extend(f.description.clone());
        }
    }
    out
}
