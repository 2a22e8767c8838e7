//! Joint training objective and its analytic gradient.
//!
//! All terms are weighted equally: span/type BCE for entities, count
//! cross-entropy plus field BCE (teacher forced on the gold count) per
//! structure, softmax cross-entropy for single-label and per-label BCE for
//! multi-label classification. BCE terms are class-balanced means, so the
//! few gold spans are not drowned out by the quadratic number of negatives.

use serde::Serialize;
use thiserror::Error;

use super::example::{Example, GoldSpan};
use crate::encoder::{encode_backward, encode_cached, EncoderParams, ModelConfig, ModelError};
use crate::heads::{occurrence_inputs, span_inputs, span_logit, spans_for_len};
use crate::prompt::{compose_tasks, Owner, PromptError, PromptPlan};
use crate::schema::Schema;
use crate::tensor::{axpy, sigmoid, softmax, softplus};
use crate::tokenizer::Vocabulary;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PrepareError {
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("span {start}..{end} does not align with token boundaries")]
    Misaligned { start: usize, end: usize },
    #[error("span {start}..{end} is {width} tokens wide, maximum is {max}")]
    TooWide {
        start: usize,
        end: usize,
        width: usize,
        max: usize,
    },
}

#[derive(Debug, Clone)]
pub(crate) struct StructureTarget {
    /// Gold instance count, clamped to the count head's range.
    pub count: usize,
    /// Number of instances supervised at field level.
    pub k: usize,
    /// `[S × (k·m)]` binary targets, column `i·m + j` is field `j` of
    /// instance `i`.
    pub fields: Vec<f64>,
}

#[derive(Debug, Clone)]
pub(crate) enum ClassTarget {
    Single(usize),
    Multi(Vec<f64>),
}

/// An example compiled against a vocabulary, with dense targets.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub(crate) plan: PromptPlan,
    pub(crate) schema: Schema,
    pub(crate) spans: Vec<(usize, usize)>,
    /// `[S × E]` entity targets.
    pub(crate) entities: Vec<f64>,
    pub(crate) structures: Vec<StructureTarget>,
    pub(crate) classes: Vec<ClassTarget>,
}

impl Prepared {
    pub fn plan(&self) -> &PromptPlan {
        &self.plan
    }
}

fn span_index(
    plan: &PromptPlan,
    spans: &[(usize, usize)],
    gold: &GoldSpan,
    max_width: usize,
) -> Result<usize, PrepareError> {
    let offsets = &plan.text.offsets;
    let misaligned = PrepareError::Misaligned {
        start: gold.start,
        end: gold.end,
    };
    let s = offsets
        .iter()
        .position(|o| o.0 == gold.start)
        .ok_or(misaligned.clone())?;
    let e = offsets.iter().position(|o| o.1 == gold.end).ok_or(misaligned.clone())?;
    if e < s {
        return Err(misaligned);
    }
    if e - s + 1 > max_width {
        return Err(PrepareError::TooWide {
            start: gold.start,
            end: gold.end,
            width: e - s + 1,
            max: max_width,
        });
    }
    Ok(spans.binary_search(&(s, e)).expect("enumerated span"))
}

/// Compiles `ex` and turns its annotations into dense targets.
pub fn prepare(ex: &Example, vocab: &Vocabulary, cfg: &ModelConfig) -> Result<Prepared, PrepareError> {
    let plan = compose_tasks(&ex.schema, &ex.text, vocab, cfg.max_positions)?;
    let w = cfg.max_span_width;
    let spans = spans_for_len(plan.text_len, w);
    let n = spans.len();

    let labels: Vec<&str> = ex.schema.entities.iter().flatten().map(|e| e.label.as_str()).collect();
    let ne = labels.len();
    let mut entities = vec![0.0; n * ne];
    for g in &ex.entities {
        let j = labels.iter().position(|l| *l == g.label).expect("checked label");
        let s = span_index(&plan, &spans, &g.span, w)?;
        entities[s * ne + j] = 1.0;
    }

    let mut structures = Vec::with_capacity(ex.schema.structures.len());
    for spec in &ex.schema.structures {
        let gold = ex.structures.iter().find(|g| g.name == spec.parent_name);
        let instances = gold.map(|g| g.instances.as_slice()).unwrap_or(&[]);
        let count = instances.len().min(cfg.max_count - 1);
        let k = count;
        let m = spec.fields.len();
        let mut fields = vec![0.0; n * k * m];
        for (i, inst) in instances.iter().take(k).enumerate() {
            for (j, f) in spec.fields.iter().enumerate() {
                for g in inst.get(&f.name).into_iter().flatten() {
                    let s = span_index(&plan, &spans, g, w)?;
                    fields[s * k * m + i * m + j] = 1.0;
                }
            }
        }
        structures.push(StructureTarget { count, k, fields });
    }

    let classes = ex
        .schema
        .classifications
        .iter()
        .map(|spec| {
            let gold = ex.classifications.iter().find(|c| c.task == spec.task_name);
            let names: Vec<&str> = spec.label_names().collect();
            let has = |l: &str| gold.is_some_and(|g| g.labels.iter().any(|x| x == l));
            if spec.multi_label {
                ClassTarget::Multi(names.iter().map(|l| f64::from(u8::from(has(l)))).collect())
            } else {
                ClassTarget::Single(names.iter().position(|l| has(l)).unwrap_or(0))
            }
        })
        .collect();

    Ok(Prepared {
        plan,
        schema: ex.schema.clone(),
        spans,
        entities,
        structures,
        classes,
    })
}

/// Per-task loss values of one example.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub entities: Option<f64>,
    pub classifications: Vec<f64>,
    /// `(count, fields)` per structure.
    pub structures: Vec<(f64, f64)>,
}

/// Class-balanced mean BCE-with-logits: positives and negatives each carry
/// half the weight (all of it when only one class is present). Adds
/// `scale · dL/dz` into `dz`.
fn bce(logits: &[f64], targets: &[f64], dz: &mut [f64], scale: f64) -> f64 {
    let pos = targets.iter().filter(|&&y| y > 0.5).count();
    let neg = targets.len() - pos;
    let weight = |y: f64| match (pos, neg) {
        (0, n) | (n, 0) => 1.0 / n as f64,
        _ if y > 0.5 => 0.5 / pos as f64,
        _ => 0.5 / neg as f64,
    };
    let mut loss = 0.0;
    for ((z, y), g) in logits.iter().zip(targets).zip(dz.iter_mut()) {
        let w = weight(*y);
        loss += w * (softplus(*z) - y * z);
        *g += scale * w * (sigmoid(*z) - y);
    }
    loss
}

/// Softmax cross-entropy; adds `scale · dL/dz` into `dz`.
fn cross_entropy(logits: &[f64], target: usize, dz: &mut [f64], scale: f64) -> f64 {
    let p = softmax(logits);
    for (i, (g, pi)) in dz.iter_mut().zip(&p).enumerate() {
        *g += scale * (pi - f64::from(u8::from(i == target)));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    lse - logits[target]
}

/// Class-balanced mean BCE of `logits` against 0/1 `targets`.
pub fn balanced_bce(logits: &[f64], targets: &[f64]) -> f64 {
    bce(logits, targets, &mut vec![0.0; logits.len()], 0.0)
}

/// Softmax cross-entropy of `logits` against class `target`.
pub fn softmax_cross_entropy(logits: &[f64], target: usize) -> f64 {
    cross_entropy(logits, target, &mut vec![0.0; logits.len()], 0.0)
}

fn rows(hidden: &[f64], d: usize, positions: &[usize]) -> Vec<f64> {
    positions
        .iter()
        .flat_map(|&p| hidden[p * d..(p + 1) * d].iter().copied())
        .collect()
}

fn scatter(dh: &mut [f64], d: usize, positions: &[usize], drows: &[f64]) {
    for (&p, r) in positions.iter().zip(drows.chunks_exact(d)) {
        axpy(1.0, r, &mut dh[p * d..(p + 1) * d]);
    }
}

/// `logits[s][c] = span_logit(a_s, b_c)` over row-major `d`-wide rows.
fn pair_logits(a: &[f64], b: &[f64], d: usize) -> Vec<f64> {
    let nb = b.len() / d;
    let mut out = Vec::with_capacity(a.len() / d * nb);
    for ar in a.chunks_exact(d) {
        out.extend(b.chunks_exact(d).map(|br| span_logit(ar, br)));
    }
    out
}

fn pair_backward(a: &[f64], b: &[f64], d: usize, dz: &[f64], da: &mut [f64], db: &mut [f64]) {
    let nb = b.len() / d;
    for (s, ar) in a.chunks_exact(d).enumerate() {
        for (c, br) in b.chunks_exact(d).enumerate() {
            let g = dz[s * nb + c];
            if g != 0.0 {
                axpy(g, br, &mut da[s * d..(s + 1) * d]);
                axpy(g, ar, &mut db[c * d..(c + 1) * d]);
            }
        }
    }
}

/// Loss of one prepared example. When `grads` is given, `scale` times the
/// gradient is accumulated into it.
pub fn accumulate(
    params: &EncoderParams,
    cfg: &ModelConfig,
    ex: &Prepared,
    grads: Option<&mut EncoderParams>,
    scale: f64,
) -> Result<LossBreakdown, ModelError> {
    let d = cfg.hidden_dim;
    let plan = &ex.plan;
    let (hidden, enc_cache) = encode_cached(params, cfg, &plan.ids)?;
    let h = hidden.data();
    let mut dh = vec![0.0; h.len()];
    let mut out = LossBreakdown::default();
    let want = grads.is_some();
    let mut g_local = grads;

    let n = ex.spans.len();
    let needs_spans = n > 0 && (ex.schema.entities.is_some() || !ex.schema.structures.is_empty());
    let span_fwd = needs_spans.then(|| params.span.forward(&span_inputs(&hidden, plan.text_start, &ex.spans)));
    let mut dr = vec![0.0; n * d];

    if ex.schema.entities.is_some() {
        let pos = plan.entity_positions();
        if let (Some((r, _)), false) = (&span_fwd, pos.is_empty()) {
            let e = rows(h, d, &pos);
            let z = pair_logits(r, &e, d);
            let mut dz = vec![0.0; z.len()];
            let l = bce(&z, &ex.entities, &mut dz, scale);
            if want {
                let mut de = vec![0.0; e.len()];
                pair_backward(r, &e, d, &dz, &mut dr, &mut de);
                scatter(&mut dh, d, &pos, &de);
            }
            out.entities = Some(l);
        } else {
            out.entities = Some(0.0);
        }
    }

    for (t, target) in ex.classes.iter().enumerate() {
        let pos = plan.label_positions(t);
        let x = rows(h, d, &pos);
        let (z, cache) = params.classifier.forward(&x);
        let mut dz = vec![0.0; z.len()];
        let l = match target {
            ClassTarget::Single(y) => cross_entropy(&z, *y, &mut dz, scale),
            ClassTarget::Multi(ys) => bce(&z, ys, &mut dz, scale),
        };
        if let Some(g) = g_local.as_deref_mut() {
            let dx = params.classifier.backward(&cache, &dz, &mut g.classifier);
            scatter(&mut dh, d, &pos, &dx);
        }
        out.classifications.push(l);
    }

    for (s, target) in ex.structures.iter().enumerate() {
        let p = plan
            .position_of(Owner::Structure { structure: s })
            .expect("structure prompt bound");
        let (cz, ccache) = params.count.forward(&h[p * d..(p + 1) * d]);
        let mut dcz = vec![0.0; cz.len()];
        let count_loss = cross_entropy(&cz, target.count, &mut dcz, scale);
        if let Some(g) = g_local.as_deref_mut() {
            let dp = params.count.backward(&ccache, &dcz, &mut g.count);
            scatter(&mut dh, d, &[p], &dp);
        }

        let fpos = plan.field_positions(s);
        let m = fpos.len();
        let mut field_loss = 0.0;
        if let (Some((r, _)), true) = (&span_fwd, target.k > 0 && m > 0) {
            let fields: Vec<Vec<f64>> = fpos.iter().map(|&q| h[q * d..(q + 1) * d].to_vec()).collect();
            let x = occurrence_inputs(&fields, target.k, &params.occurrence);
            let (c, ocache) = params.occurrence_ffn.forward(&x);
            let z = pair_logits(r, &c, d);
            let mut dz = vec![0.0; z.len()];
            field_loss = bce(&z, &target.fields, &mut dz, scale);
            if let Some(g) = g_local.as_deref_mut() {
                let mut dc = vec![0.0; c.len()];
                pair_backward(r, &c, d, &dz, &mut dr, &mut dc);
                let dx = params.occurrence_ffn.backward(&ocache, &dc, &mut g.occurrence_ffn);
                for i in 0..target.k {
                    for j in 0..m {
                        let row = &dx[(i * m + j) * d..(i * m + j + 1) * d];
                        axpy(1.0, row, g.occurrence.row_mut(i));
                        axpy(1.0, row, &mut dh[fpos[j] * d..(fpos[j] + 1) * d]);
                    }
                }
            }
        }
        out.structures.push((count_loss, field_loss));
    }

    out.total = out.entities.unwrap_or(0.0)
        + out.classifications.iter().sum::<f64>()
        + out.structures.iter().map(|(a, b)| a + b).sum::<f64>();

    if let Some(g) = g_local {
        if let Some((_, cache)) = &span_fwd {
            let dx = params.span.backward(cache, &dr, &mut g.span);
            for (&(a, b), row) in ex.spans.iter().zip(dx.chunks_exact(2 * d)) {
                let (ra, rb) = (plan.text_start + a, plan.text_start + b);
                axpy(1.0, &row[..d], &mut dh[ra * d..(ra + 1) * d]);
                axpy(1.0, &row[d..], &mut dh[rb * d..(rb + 1) * d]);
            }
        }
        encode_backward(params, cfg, &enc_cache, &dh, g);
    }
    Ok(out)
}

/// Loss of one example without gradients.
pub fn example_loss(params: &EncoderParams, cfg: &ModelConfig, ex: &Prepared) -> Result<LossBreakdown, ModelError> {
    accumulate(params, cfg, ex, None, 1.0)
}
