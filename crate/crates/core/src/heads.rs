//! Task heads over encoder states: span representations, span/type
//! scoring, instance counting, occurrence-conditioned field vectors and
//! per-label classification logits.

use serde::Serialize;
use thiserror::Error;

use crate::encoder::{Mlp, MAX_COUNT};
use crate::prompt::PromptPlan;
use crate::tensor::{argmax, dot, sigmoid, Tensor};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum HeadError {
    #[error("instance count {0} exceeds the supported maximum of 20")]
    CountOutOfRange(usize),
}

/// A contiguous range of text tokens with its representation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpanCandidate {
    /// Inclusive token indices relative to the start of the text region.
    pub start_token: usize,
    pub end_token: usize,
    pub char_start: usize,
    pub char_end: usize,
    #[serde(skip)]
    pub rep: Vec<f64>,
}

/// All `(start, end)` pairs with `end - start + 1 <= max_width`, in
/// lexicographic order.
pub fn spans_for_len(text_len: usize, max_width: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for start in 0..text_len {
        let last = (start + max_width).min(text_len);
        out.extend((start..last).map(|end| (start, end)));
    }
    out
}

pub fn enumerate_spans(plan: &PromptPlan, max_width: usize) -> Vec<(usize, usize)> {
    spans_for_len(plan.text_len, max_width)
}

/// Endpoint concatenation `[H[start] ; H[end]]` per span, as rows of a
/// `|spans| × 2d` matrix.
pub(crate) fn span_inputs(hidden: &Tensor, text_start: usize, spans: &[(usize, usize)]) -> Vec<f64> {
    let d = hidden.cols();
    let mut x = Vec::with_capacity(spans.len() * 2 * d);
    for &(s, e) in spans {
        x.extend_from_slice(hidden.row(text_start + s));
        x.extend_from_slice(hidden.row(text_start + e));
    }
    x
}

pub fn span_representations(
    hidden: &Tensor,
    plan: &PromptPlan,
    spans: &[(usize, usize)],
    span_head: &Mlp,
) -> Vec<SpanCandidate> {
    let d = span_head.output_dim();
    let reps = span_head.apply(&span_inputs(hidden, plan.text_start, spans));
    spans
        .iter()
        .zip(reps.chunks_exact(d.max(1)))
        .map(|(&(s, e), rep)| {
            let (char_start, char_end) = plan.text.char_span(s, e);
            SpanCandidate {
                start_token: s,
                end_token: e,
                char_start,
                char_end,
                rep: rep.to_vec(),
            }
        })
        .collect()
}

/// Span/type matching logit `span · type`.
pub fn span_logit(rep: &[f64], type_embed: &[f64]) -> f64 {
    dot(rep, type_embed)
}

/// `P[i][j] = sigmoid(span_logit(span_i, type_j))`.
pub fn entity_scores(spans: &[SpanCandidate], type_embeds: &[Vec<f64>]) -> Vec<Vec<f64>> {
    spans
        .iter()
        .map(|s| type_embeds.iter().map(|e| sigmoid(span_logit(&s.rep, e))).collect())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CountPrediction {
    pub logits: Vec<f64>,
    pub k_hat: usize,
}

impl CountPrediction {
    pub fn from_logits(logits: Vec<f64>) -> Self {
        let k_hat = argmax(&logits);
        CountPrediction { logits, k_hat }
    }
}

pub fn predict_count(prompt_state: &[f64], count_head: &Mlp) -> CountPrediction {
    CountPrediction::from_logits(count_head.apply(prompt_state))
}

/// `field + occurrence[i]` for every instance `i < k` and field, as rows of
/// a `(k·m) × d` matrix in instance-major order.
pub(crate) fn occurrence_inputs(field_embeds: &[Vec<f64>], k: usize, occurrence: &Tensor) -> Vec<f64> {
    let d = occurrence.cols();
    let mut x = Vec::with_capacity(k * field_embeds.len() * d);
    for i in 0..k {
        let occ = occurrence.row(i);
        for f in field_embeds {
            x.extend(f.iter().zip(occ).map(|(a, b)| a + b));
        }
    }
    x
}

/// Conditioned field vectors, shape `[k, m, d]`.
pub fn occurrence_conditioned_fields(
    field_embeds: &[Vec<f64>],
    k: usize,
    occurrence: &Tensor,
    combiner: &Mlp,
) -> Result<Tensor, HeadError> {
    if k > MAX_COUNT {
        return Err(HeadError::CountOutOfRange(k));
    }
    let d = combiner.output_dim();
    let m = field_embeds.len();
    let out = if k == 0 || m == 0 {
        Vec::new()
    } else {
        combiner.apply(&occurrence_inputs(field_embeds, k, occurrence))
    };
    Ok(Tensor::from_vec(&[k, m, d], out).expect("conditioned shape"))
}

/// One logit per label from a shared MLP.
pub fn classification_logits(label_embeds: &[Vec<f64>], classifier: &Mlp) -> Vec<f64> {
    if label_embeds.is_empty() {
        return Vec::new();
    }
    let x: Vec<f64> = label_embeds.iter().flatten().copied().collect();
    classifier.apply(&x)
}

/// Hidden-state rows at the marker positions of a plan.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptEmbeds {
    pub entity_embeds: Vec<Vec<f64>>,
    /// Per structure, in field order.
    pub field_embeds: Vec<Vec<Vec<f64>>>,
    /// Per classification task, in label order.
    pub label_embeds: Vec<Vec<Vec<f64>>>,
    /// Per structure, the [P] state.
    pub structure_prompts: Vec<Vec<f64>>,
}

impl PromptEmbeds {
    pub fn gather(hidden: &Tensor, plan: &PromptPlan, classifications: usize, structures: usize) -> Self {
        use crate::prompt::Owner;
        let rows = |ps: Vec<usize>| ps.into_iter().map(|p| hidden.row(p).to_vec()).collect();
        PromptEmbeds {
            entity_embeds: rows(plan.entity_positions()),
            field_embeds: (0..structures).map(|s| rows(plan.field_positions(s))).collect(),
            label_embeds: (0..classifications).map(|t| rows(plan.label_positions(t))).collect(),
            structure_prompts: (0..structures)
                .map(|s| {
                    let p = plan
                        .position_of(Owner::Structure { structure: s })
                        .expect("structure prompt bound");
                    hidden.row(p).to_vec()
                })
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{EncoderParams, ModelConfig};
    use approx::assert_relative_eq;

    fn cand(rep: Vec<f64>) -> SpanCandidate {
        SpanCandidate {
            start_token: 0,
            end_token: 0,
            char_start: 0,
            char_end: 1,
            rep,
        }
    }

    #[test]
    fn span_enumeration() {
        assert_eq!(
            spans_for_len(4, 2),
            vec![(0, 0), (0, 1), (1, 1), (1, 2), (2, 2), (2, 3), (3, 3)]
        );
        assert!(spans_for_len(0, 8).is_empty());
        assert_eq!(spans_for_len(5, 12).len(), 15);
    }

    #[test]
    fn dot_sigmoid_scores() {
        let p = entity_scores(&[cand(vec![1.0, 0.0])], &[vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert_relative_eq!(p[0][0], 0.731_06, epsilon = 1e-5);
        assert_eq!(p[0][1], 0.5);
        let spans: Vec<_> = (0..7).map(|_| cand(vec![0.3, 0.1])).collect();
        let p = entity_scores(&spans, &[vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert_eq!((p.len(), p[0].len()), (7, 2));
    }

    fn params() -> EncoderParams {
        EncoderParams::init(&ModelConfig {
            max_positions: 16,
            ..ModelConfig::desk(16)
        })
    }

    #[test]
    fn count_argmax() {
        let mut logits = vec![0.0; 20];
        logits[2] = 1.0;
        assert_eq!(CountPrediction::from_logits(logits).k_hat, 2);
        assert_eq!(CountPrediction::from_logits(vec![0.3; 20]).k_hat, 0);
        let p = params();
        assert_eq!(predict_count(&[0.1; 64], &p.count).logits.len(), 20);
    }

    #[test]
    fn conditioned_fields_shape_and_separation() {
        let p = params();
        let fields = vec![vec![0.2; 64], vec![-0.1; 64]];
        let empty = occurrence_conditioned_fields(&fields, 0, &p.occurrence, &p.occurrence_ffn).unwrap();
        assert_eq!(empty.shape(), &[0, 2, 64]);
        let c = occurrence_conditioned_fields(&fields, 2, &p.occurrence, &p.occurrence_ffn).unwrap();
        assert_eq!(c.shape(), &[2, 2, 64]);
        // same field, occurrence 0 vs 1
        let a = &c.data()[0..64];
        let b = &c.data()[128..192];
        let dist: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
        assert!(dist > 0.0);
        assert_eq!(
            occurrence_conditioned_fields(&fields, 21, &p.occurrence, &p.occurrence_ffn),
            Err(HeadError::CountOutOfRange(21))
        );
    }

    #[test]
    fn classification_logit_shapes() {
        let p = params();
        let l = classification_logits(&[vec![0.1; 64], vec![0.2; 64], vec![0.1; 64]], &p.classifier);
        assert_eq!(l.len(), 3);
        assert_eq!(l[0], l[2]);
        let mut zeroed = p.classifier.clone();
        zeroed.w1.fill(0.0);
        zeroed.w2.fill(0.0);
        zeroed.b2.fill(1.5);
        assert_eq!(
            classification_logits(&[vec![0.4; 64], vec![-2.0; 64]], &zeroed),
            vec![1.5, 1.5]
        );
    }
}
