//! Turns head outputs into extraction results, and runs a whole schema
//! through a single encoder pass.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::ModelError;
use crate::heads::{
    classification_logits, entity_scores, occurrence_conditioned_fields, predict_count, span_representations,
    spans_for_len, PromptEmbeds, SpanCandidate,
};
use crate::model::Model;
use crate::prompt::{compose_tasks, PromptError, DEFAULT_MAX_LEN};
use crate::schema::{validate_schema, ClassificationSpec, FieldKind, Schema, StructureSpec, Violation};
use crate::tensor::{argmax, sigmoid, softmax, Tensor};
use crate::tokenizer::TokenSeq;

/// Version of the [`ExtractionResult`] JSON layout.
pub const FORMAT_VERSION: u32 = 1;

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpanHit {
    pub text: String,
    /// Character offsets into the input, end exclusive.
    pub start: usize,
    pub end: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FieldValue {
    One(SpanHit),
    Many(Vec<SpanHit>),
}

impl FieldValue {
    pub fn hits(&self) -> &[SpanHit] {
        match self {
            FieldValue::One(h) => std::slice::from_ref(h),
            FieldValue::Many(hs) => hs,
        }
    }

    /// Surface text of a single-valued field.
    pub fn text(&self) -> Option<&str> {
        match self {
            FieldValue::One(h) => Some(&h.text),
            FieldValue::Many(_) => None,
        }
    }
}

pub type Instance = IndexMap<String, FieldValue>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationResult {
    pub labels: Vec<String>,
    pub probabilities: IndexMap<String, f64>,
    pub multi_label: bool,
}

impl ClassificationResult {
    /// The chosen label of a single-label task.
    pub fn label(&self) -> Option<&str> {
        self.labels.first().map(String::as_str)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionResult {
    pub format_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entities: Option<IndexMap<String, Vec<SpanHit>>>,
    #[serde(default, skip_serializing_if = "IndexMap::is_empty")]
    pub classifications: IndexMap<String, ClassificationResult>,
    #[serde(default, skip_serializing_if = "IndexMap::is_empty")]
    pub structures: IndexMap<String, Vec<Instance>>,
    /// Encoder forward passes used to produce this result.
    pub encoder_passes: u64,
}

impl ExtractionResult {
    fn empty() -> Self {
        ExtractionResult {
            format_version: FORMAT_VERSION,
            entities: None,
            classifications: IndexMap::new(),
            structures: IndexMap::new(),
            encoder_passes: 0,
        }
    }

    /// Every span reported anywhere in the result.
    pub fn all_hits(&self) -> Vec<&SpanHit> {
        let mut out: Vec<&SpanHit> = self.entities.iter().flat_map(|m| m.values().flatten()).collect();
        for instances in self.structures.values() {
            for inst in instances {
                out.extend(inst.values().flat_map(FieldValue::hits));
            }
        }
        out
    }

    /// Surface texts extracted for one entity type.
    pub fn entity_texts(&self, label: &str) -> Vec<&str> {
        self.entities
            .as_ref()
            .and_then(|m| m.get(label))
            .map(|hits| hits.iter().map(|h| h.text.as_str()).collect())
            .unwrap_or_default()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeOptions {
    /// Span acceptance threshold for entities and structure fields.
    pub threshold: f64,
    pub max_len: usize,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        DecodeOptions {
            threshold: DEFAULT_THRESHOLD,
            max_len: DEFAULT_MAX_LEN,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExtractError {
    #[error("schema invalid: {0:?}")]
    SchemaInvalid(Vec<Violation>),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn hit(tokens: &TokenSeq, span: &SpanCandidate, score: f64) -> SpanHit {
    SpanHit {
        text: tokens.surface(span.start_token, span.end_token).to_string(),
        start: span.char_start,
        end: span.char_end,
        score,
    }
}

/// Every `(span, type)` pair scoring above `threshold`; overlapping and
/// nested spans are all kept. Per type, hits are ordered by start offset,
/// then by descending score.
pub fn decode_entities(
    scores: &[Vec<f64>],
    spans: &[SpanCandidate],
    labels: &[&str],
    tokens: &TokenSeq,
    threshold: f64,
) -> IndexMap<String, Vec<SpanHit>> {
    labels
        .iter()
        .enumerate()
        .map(|(j, &label)| {
            let mut hits: Vec<SpanHit> = spans
                .iter()
                .zip(scores)
                .filter(|(_, row)| row[j] > threshold)
                .map(|(s, row)| hit(tokens, s, row[j]))
                .collect();
            hits.sort_by(|a, b| a.start.cmp(&b.start).then_with(|| b.score.total_cmp(&a.score)));
            (label.to_string(), hits)
        })
        .collect()
}

/// `scores[i][j][s]`: instance `i`, field `j`, span `s`.
pub fn decode_structures(
    scores: &[Vec<Vec<f64>>],
    spans: &[SpanCandidate],
    spec: &StructureSpec,
    tokens: &TokenSeq,
    threshold: f64,
) -> Vec<Instance> {
    let mut instances = Vec::new();
    for per_field in scores {
        let mut inst = Instance::new();
        for (field, field_scores) in spec.fields.iter().zip(per_field) {
            let allowed = |s: &SpanCandidate| match &field.choices {
                None => true,
                Some(options) => {
                    let surface = tokens.surface(s.start_token, s.end_token).to_lowercase();
                    options.iter().any(|o| o.to_lowercase() == surface)
                }
            };
            let mut candidates: Vec<(&SpanCandidate, f64)> = spans
                .iter()
                .zip(field_scores.iter().copied())
                .filter(|(s, score)| *score > threshold && allowed(s))
                .collect();
            match field.kind {
                FieldKind::Str => {
                    // earliest start wins ties
                    let best = candidates
                        .iter()
                        .fold(None::<(&SpanCandidate, f64)>, |acc, &(s, sc)| match acc {
                            Some((b, bs)) if bs > sc || (bs == sc && b.char_start <= s.char_start) => Some((b, bs)),
                            _ => Some((s, sc)),
                        });
                    if let Some((s, sc)) = best {
                        inst.insert(field.name.clone(), FieldValue::One(hit(tokens, s, sc)));
                    }
                }
                FieldKind::List => {
                    candidates.sort_by(|a, b| a.0.char_start.cmp(&b.0.char_start).then_with(|| b.1.total_cmp(&a.1)));
                    if !candidates.is_empty() {
                        inst.insert(
                            field.name.clone(),
                            FieldValue::Many(candidates.iter().map(|&(s, sc)| hit(tokens, s, sc)).collect()),
                        );
                    }
                }
            }
        }
        if !inst.is_empty() {
            instances.push(inst);
        }
    }
    instances
}

/// Softmax + argmax for single-label tasks, per-label sigmoid against the
/// task threshold (inclusive) for multi-label tasks.
pub fn decode_classification(logits: &[f64], spec: &ClassificationSpec) -> ClassificationResult {
    let names: Vec<String> = spec.label_names().map(String::from).collect();
    if spec.multi_label {
        let probs: Vec<f64> = logits.iter().map(|&z| sigmoid(z)).collect();
        ClassificationResult {
            labels: names
                .iter()
                .zip(&probs)
                .filter(|(_, &p)| p >= spec.threshold)
                .map(|(n, _)| n.clone())
                .collect(),
            probabilities: names.into_iter().zip(probs).collect(),
            multi_label: true,
        }
    } else {
        let probs = softmax(logits);
        let best = argmax(&probs);
        ClassificationResult {
            labels: vec![names[best].clone()],
            probabilities: names.into_iter().zip(probs).collect(),
            multi_label: false,
        }
    }
}

/// Rows of a `[k, m, d]` conditioned tensor dotted with span
/// representations: `out[i][j][s] = sigmoid(span_s · cond[i][j])`.
fn conditioned_scores(cond: &Tensor, spans: &[SpanCandidate]) -> Vec<Vec<Vec<f64>>> {
    let (k, m) = (cond.shape()[0], cond.shape()[1]);
    let d = cond.shape()[2];
    (0..k)
        .map(|i| {
            (0..m)
                .map(|j| {
                    let v = &cond.data()[(i * m + j) * d..(i * m + j + 1) * d];
                    let p = entity_scores(spans, &[v.to_vec()]);
                    p.into_iter().map(|row| row[0]).collect()
                })
                .collect()
        })
        .collect()
}

/// Runs every task of `schema` on `text` from one encoder pass.
pub fn run_schema(model: &Model, schema: &Schema, text: &str) -> Result<ExtractionResult, ExtractError> {
    run_schema_with(model, schema, text, &DecodeOptions::default())
}

pub fn run_schema_with(
    model: &Model,
    schema: &Schema,
    text: &str,
    opts: &DecodeOptions,
) -> Result<ExtractionResult, ExtractError> {
    let violations = validate_schema(schema);
    if !violations.is_empty() {
        return Err(ExtractError::SchemaInvalid(violations));
    }
    let max_len = opts.max_len.min(model.config.max_positions);
    let plan = compose_tasks(schema, text, &model.vocab, max_len)?;
    let hidden = model.encode(&plan)?;
    let params = &model.params;
    let embeds = PromptEmbeds::gather(&hidden, &plan, schema.classifications.len(), schema.structures.len());

    let needs_spans = schema.entities.is_some() || !schema.structures.is_empty();
    let spans = if needs_spans {
        let pairs = spans_for_len(plan.text_len, model.config.max_span_width);
        span_representations(&hidden, &plan, &pairs, &params.span)
    } else {
        Vec::new()
    };

    let mut result = ExtractionResult::empty();
    result.encoder_passes = 1;

    if let Some(entities) = &schema.entities {
        let scores = entity_scores(&spans, &embeds.entity_embeds);
        let labels: Vec<&str> = entities.iter().map(|e| e.label.as_str()).collect();
        result.entities = Some(decode_entities(&scores, &spans, &labels, &plan.text, opts.threshold));
    }

    for (t, spec) in schema.classifications.iter().enumerate() {
        let logits = classification_logits(&embeds.label_embeds[t], &params.classifier);
        result
            .classifications
            .insert(spec.task_name.clone(), decode_classification(&logits, spec));
    }

    for (s, spec) in schema.structures.iter().enumerate() {
        let count = predict_count(&embeds.structure_prompts[s], &params.count);
        let cond = occurrence_conditioned_fields(
            &embeds.field_embeds[s],
            count.k_hat,
            &params.occurrence,
            &params.occurrence_ffn,
        )
        .expect("argmax count is below 20");
        let scores = conditioned_scores(&cond, &spans);
        result.structures.insert(
            spec.parent_name.clone(),
            decode_structures(&scores, &spans, spec, &plan.text, opts.threshold),
        );
    }
    Ok(result)
}
