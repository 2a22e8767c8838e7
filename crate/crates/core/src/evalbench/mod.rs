//! Span F1 and accuracy metrics, corpus evaluation and the latency harness
//! comparing one composed pass against one pass per label.

mod bench;

use std::collections::HashSet;

use serde::Serialize;
use thiserror::Error;

pub use bench::{latency_bench, BenchReport, BenchRow, BENCH_TEXT_TOKENS, WARMUP_RUNS};

use crate::decode::{run_schema, ExtractError, ExtractionResult};
use crate::model::Model;
use crate::training::Example;

/// A typed span `(label, char_start, char_end)`.
pub type TypedSpan = (String, usize, usize);

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SpanScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub true_positives: usize,
    pub predicted: usize,
    pub gold: usize,
}

impl SpanScores {
    fn from_counts(tp: usize, predicted: usize, gold: usize) -> Self {
        let (precision, recall, f1) = match (predicted, gold) {
            (0, 0) => (1.0, 1.0, 1.0),
            (0, _) | (_, 0) => (0.0, 0.0, 0.0),
            _ => {
                let p = tp as f64 / predicted as f64;
                let r = tp as f64 / gold as f64;
                let f = if tp == 0 { 0.0 } else { 2.0 * p * r / (p + r) };
                (p, r, f)
            }
        };
        SpanScores {
            precision,
            recall,
            f1,
            true_positives: tp,
            predicted,
            gold,
        }
    }
}

/// Exact-match scores over typed spans. Both sets empty scores 1.0; exactly
/// one empty scores 0.
pub fn span_f1(predicted: &[TypedSpan], gold: &[TypedSpan]) -> SpanScores {
    let p: HashSet<&TypedSpan> = predicted.iter().collect();
    let g: HashSet<&TypedSpan> = gold.iter().collect();
    SpanScores::from_counts(p.intersection(&g).count(), p.len(), g.len())
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EvalError {
    #[error("{predicted} predictions for {gold} gold labels")]
    LengthMismatch { predicted: usize, gold: usize },
    #[error("example {index}: {message}")]
    Extract { index: usize, message: String },
}

/// Fraction of positions where prediction equals gold. Empty input scores 1.0.
pub fn accuracy<T: PartialEq>(predicted: &[T], gold: &[T]) -> Result<f64, EvalError> {
    if predicted.len() != gold.len() {
        return Err(EvalError::LengthMismatch {
            predicted: predicted.len(),
            gold: gold.len(),
        });
    }
    if gold.is_empty() {
        return Ok(1.0);
    }
    let hits = predicted.iter().zip(gold).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / gold.len() as f64)
}

/// Typed spans of an extraction result. Entities use their label, structure
/// fields use `parent[i].field`.
pub fn result_spans(result: &ExtractionResult) -> Vec<TypedSpan> {
    let mut out = Vec::new();
    for (label, hits) in result.entities.iter().flatten() {
        out.extend(hits.iter().map(|h| (label.clone(), h.start, h.end)));
    }
    for (parent, instances) in &result.structures {
        for (i, inst) in instances.iter().enumerate() {
            for (field, value) in inst {
                let key = format!("{parent}[{i}].{field}");
                out.extend(value.hits().iter().map(|h| (key.clone(), h.start, h.end)));
            }
        }
    }
    out
}

pub fn gold_spans(ex: &Example) -> Vec<TypedSpan> {
    let mut out: Vec<TypedSpan> = ex
        .entities
        .iter()
        .map(|e| (e.label.clone(), e.span.start, e.span.end))
        .collect();
    for s in &ex.structures {
        for (i, inst) in s.instances.iter().enumerate() {
            for (field, spans) in inst {
                let key = format!("{}[{i}].{field}", s.name);
                out.extend(spans.iter().map(|g| (key.clone(), g.start, g.end)));
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub examples: usize,
    pub spans: SpanScores,
    pub classification_accuracy: f64,
    pub classification_decisions: usize,
}

/// Runs every example's schema and scores predictions against its gold
/// annotations. Span counts are micro-averaged over the corpus; each
/// classification task instance counts once, matched as an exact label set.
pub fn evaluate(model: &Model, corpus: &[Example]) -> Result<EvalReport, EvalError> {
    let (mut tp, mut np, mut ng) = (0, 0, 0);
    let mut pred_labels = Vec::new();
    let mut gold_labels = Vec::new();
    for (index, ex) in corpus.iter().enumerate() {
        let result = run_schema(model, &ex.schema, &ex.text).map_err(|e: ExtractError| EvalError::Extract {
            index,
            message: e.to_string(),
        })?;
        let p: HashSet<TypedSpan> = result_spans(&result).into_iter().collect();
        let g: HashSet<TypedSpan> = gold_spans(ex).into_iter().collect();
        tp += p.intersection(&g).count();
        np += p.len();
        ng += g.len();
        for spec in &ex.schema.classifications {
            let mut predicted: Vec<String> = result
                .classifications
                .get(&spec.task_name)
                .map(|c| c.labels.clone())
                .unwrap_or_default();
            let mut gold: Vec<String> = ex
                .classifications
                .iter()
                .find(|c| c.task == spec.task_name)
                .map(|c| c.labels.clone())
                .unwrap_or_default();
            predicted.sort();
            gold.sort();
            pred_labels.push(predicted);
            gold_labels.push(gold);
        }
    }
    Ok(EvalReport {
        examples: corpus.len(),
        spans: SpanScores::from_counts(tp, np, ng),
        classification_accuracy: accuracy(&pred_labels, &gold_labels)?,
        classification_decisions: gold_labels.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn s(label: &str, a: usize, b: usize) -> TypedSpan {
        (label.to_string(), a, b)
    }

    #[test]
    fn f1_cases() {
        let gold = vec![s("a", 0, 1), s("a", 2, 3), s("b", 4, 5), s("b", 6, 7)];
        assert_eq!(span_f1(&gold, &gold).f1, 1.0);
        assert_eq!(span_f1(&[s("c", 0, 1)], &gold).f1, 0.0);
        let pred = vec![s("a", 0, 1), s("a", 2, 3), s("a", 4, 5)];
        let r = span_f1(&pred, &gold);
        assert_relative_eq!(r.precision, 2.0 / 3.0);
        assert_relative_eq!(r.recall, 0.5);
        assert_relative_eq!(r.f1, 4.0 / 7.0);
        assert_eq!(span_f1(&[], &[]).f1, 1.0);
        assert_eq!(span_f1(&[], &gold).f1, 0.0);
        assert_eq!(span_f1(&gold, &[]).f1, 0.0);
    }

    #[test]
    fn accuracy_cases() {
        assert_eq!(accuracy(&[1, 2, 3], &[1, 2, 3]), Ok(1.0));
        assert_eq!(accuracy(&[1, 2], &[3, 4]), Ok(0.0));
        assert_eq!(accuracy(&[1, 2, 3, 4], &[1, 2, 3, 0]), Ok(0.75));
        assert_eq!(
            accuracy(&[1], &[1, 2]),
            Err(EvalError::LengthMismatch { predicted: 1, gold: 2 })
        );
    }
}
