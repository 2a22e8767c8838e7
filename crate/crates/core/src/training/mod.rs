//! Losses, backpropagation, AdamW with per-group learning rates, the
//! synthetic corpus and the finite-difference gradient oracle.

mod example;
mod loss;
mod optim;
mod synth;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use example::{
    read_jsonl, write_jsonl, CorpusError, Example, GoldClassification, GoldEntity, GoldSpan, GoldStructure,
};
pub use loss::{
    accumulate, balanced_bce, example_loss, prepare, softmax_cross_entropy, LossBreakdown, PrepareError, Prepared,
};
pub use optim::{clip_grad_norm, grad_norm, AdamW};
pub use synth::{canonical_examples, generate_synthetic};

use crate::encoder::{EncoderParams, ModelConfig, ModelError};
use crate::model::Model;
use crate::prompt::{prompt_corpus, PromptError};
use crate::tokenizer::Vocabulary;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr_backbone: f64,
    pub lr_heads: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub grad_clip: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Decay of the exponential moving average of the weights kept after
    /// warmup; the average is what training returns. 0 disables it.
    #[serde(default)]
    pub ema_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            lr_backbone: 5e-4,
            lr_heads: 1e-3,
            weight_decay: 0.01,
            warmup_steps: 100,
            grad_clip: 1.0,
            batch_size: 1,
            seed: 1,
            ema_decay: 0.995,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrainError {
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("example {index}: {source}")]
    Example {
        index: usize,
        #[source]
        source: PrepareError,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainReport {
    /// Mean example loss per epoch, measured during the epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
    /// Examples skipped because their prompt overflowed the context.
    pub skipped: usize,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.into()));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive");
        }
        let rates = [self.lr_backbone, self.lr_heads, self.grad_clip];
        if rates.iter().any(|v| !v.is_finite() || *v <= 0.0) {
            return bad("learning rates and grad_clip must be positive");
        }
        if !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            return bad("weight_decay must be non-negative");
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return bad("ema_decay must be in [0, 1)");
        }
        Ok(())
    }
}

/// Vocabulary over every text and every prompt string of a corpus.
pub fn build_training_vocab(corpus: &[Example]) -> Vocabulary {
    let mut docs: Vec<String> = Vec::new();
    for ex in corpus {
        docs.push(ex.text.clone());
        docs.extend(prompt_corpus(&ex.schema));
    }
    Vocabulary::build(&docs, 1 << 16)
}

/// Compiles a corpus, dropping examples whose prompt does not fit.
pub fn prepare_corpus(
    corpus: &[Example],
    vocab: &Vocabulary,
    cfg: &ModelConfig,
) -> Result<(Vec<Prepared>, usize), TrainError> {
    let mut out = Vec::with_capacity(corpus.len());
    let mut skipped = 0;
    for (index, ex) in corpus.iter().enumerate() {
        match prepare(ex, vocab, cfg) {
            Ok(p) => out.push(p),
            Err(PrepareError::Prompt(e @ PromptError::ContextOverflow { .. })) => {
                log::warn!("skipping example {index}: {e}");
                skipped += 1;
            }
            Err(source) => return Err(TrainError::Example { index, source }),
        }
    }
    Ok((out, skipped))
}

/// Loss and gradient of one example under the model's parameters.
pub fn backward(model: &Model, ex: &Example) -> Result<(LossBreakdown, EncoderParams), TrainError> {
    let p = prepare(ex, &model.vocab, &model.config).map_err(|source| TrainError::Example { index: 0, source })?;
    let mut grads = model.params.zeros_like();
    let loss = accumulate(&model.params, &model.config, &p, Some(&mut grads), 1.0)?;
    Ok((loss, grads))
}

pub fn total_loss(model: &Model, ex: &Example) -> Result<LossBreakdown, TrainError> {
    let p = prepare(ex, &model.vocab, &model.config).map_err(|source| TrainError::Example { index: 0, source })?;
    Ok(example_loss(&model.params, &model.config, &p)?)
}

/// Trains all parameters in place. Examples are shuffled each epoch with a
/// generator seeded from `cfg.seed`, so runs are reproducible.
pub fn train(model: &mut Model, corpus: &[Example], cfg: &TrainConfig) -> Result<TrainReport, TrainError> {
    train_with(model, corpus, cfg, |_, _, _| {})
}

/// [`train`] with a hook called after every epoch with the epoch index, its
/// mean loss and the current model (the weight average once it exists).
pub fn train_with<F>(
    model: &mut Model,
    corpus: &[Example],
    cfg: &TrainConfig,
    mut on_epoch: F,
) -> Result<TrainReport, TrainError>
where
    F: FnMut(usize, f64, &Model),
{
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let (prepared, skipped) = prepare_corpus(corpus, &model.vocab, &model.config)?;
    if prepared.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(
        &model.params,
        cfg.lr_backbone,
        cfg.lr_heads,
        cfg.weight_decay,
        cfg.warmup_steps,
    );
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let mut grads = model.params.zeros_like();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut ema: Option<EncoderParams> = None;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            for (_, t) in grads.named_mut() {
                t.fill(0.0);
            }
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let l = accumulate(&model.params, &model.config, &prepared[i], Some(&mut grads), scale)?;
                sum += l.total;
            }
            clip_grad_norm(&mut grads, cfg.grad_clip);
            opt.update(&mut model.params, &grads);
            if cfg.ema_decay > 0.0 && opt.steps() >= cfg.warmup_steps {
                match ema.as_mut() {
                    Some(avg) => blend(avg, &model.params, cfg.ema_decay),
                    None => ema = Some(model.params.clone()),
                }
            }
        }
        let mean = sum / prepared.len() as f64;
        log::info!("epoch {} loss {mean:.5}", epoch + 1);
        epoch_losses.push(mean);
        match ema.as_mut() {
            Some(avg) => {
                std::mem::swap(&mut model.params, avg);
                on_epoch(epoch, mean, model);
                std::mem::swap(&mut model.params, avg);
            }
            None => on_epoch(epoch, mean, model),
        }
    }
    if let Some(avg) = ema {
        model.params = avg;
    }
    Ok(TrainReport {
        epoch_losses,
        steps: opt.steps(),
        skipped,
    })
}

/// `avg <- decay * avg + (1 - decay) * params`.
fn blend(avg: &mut EncoderParams, params: &EncoderParams, decay: f64) {
    for ((_, a), (_, p)) in avg.named_mut().into_iter().zip(params.named()) {
        for (a, &p) in a.data_mut().iter_mut().zip(p.data()) {
            *a = decay * *a + (1.0 - decay) * p;
        }
    }
}

/// Builds a vocabulary and a freshly initialised model of configuration
/// `base` (vocabulary size is filled in), then trains it.
pub fn fit(corpus: &[Example], base: ModelConfig, cfg: &TrainConfig) -> Result<(Model, TrainReport), TrainError> {
    let vocab = build_training_vocab(corpus);
    let mut model = Model::new(base, vocab)?;
    let report = train(&mut model, corpus, cfg)?;
    Ok((model, report))
}

/// One checked coordinate of a gradient check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradSample {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub samples: Vec<GradSample>,
    /// Worst relative error over coordinates with a non-negligible gradient.
    pub max_rel_error: f64,
    /// Worst absolute error over coordinates whose gradient is negligible
    /// (for example attention key biases, which softmax makes exactly zero).
    pub max_abs_error_near_zero: f64,
}

/// Gradients below this magnitude in both estimates are compared by
/// absolute rather than relative error; central differences at `eps = 1e-5`
/// carry roughly `1e-10` of round-off.
pub const GRAD_NEAR_ZERO: f64 = 1e-7;

fn coord_mut<'a>(p: &'a mut EncoderParams, name: &str, index: usize) -> &'a mut f64 {
    let (_, t) = p
        .named_mut()
        .into_iter()
        .find(|(n, _)| n == name)
        .expect("known tensor");
    &mut t.data_mut()[index]
}

/// Central finite differences against [`accumulate`] on `per_tensor`
/// sampled coordinates of every parameter tensor. Embedding rows are
/// sampled only among rows the examples actually touch.
pub fn gradient_check(
    model: &Model,
    examples: &[Example],
    per_tensor: usize,
    eps: f64,
    seed: u64,
) -> Result<GradCheckReport, TrainError> {
    let (prepared, _) = prepare_corpus(examples, &model.vocab, &model.config)?;
    let cfg = &model.config;
    let mut grads = model.params.zeros_like();
    for p in &prepared {
        accumulate(&model.params, cfg, p, Some(&mut grads), 1.0)?;
    }
    let loss_at = |params: &EncoderParams| -> Result<f64, TrainError> {
        let mut s = 0.0;
        for p in &prepared {
            s += example_loss(params, cfg, p)?.total;
        }
        Ok(s)
    };

    let d = cfg.hidden_dim;
    let mut tokens: Vec<usize> = prepared
        .iter()
        .flat_map(|p| p.plan.ids.iter().map(|&t| t as usize))
        .collect();
    tokens.sort_unstable();
    tokens.dedup();
    let max_len = prepared.iter().map(|p| p.plan.ids.len()).max().unwrap_or(0);
    let max_k = prepared
        .iter()
        .flat_map(|p| p.structures.iter().map(|s| s.k))
        .max()
        .unwrap_or(0)
        .max(1);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut coords: Vec<(String, usize)> = Vec::new();
    for (name, t) in model.params.named() {
        let candidates = match name.as_str() {
            "encoder.token_embeddings" => tokens.len() * d,
            "encoder.position_embeddings" => max_len * d,
            "heads.occurrence.table" => max_k * d,
            _ => t.len(),
        };
        for i in rand::seq::index::sample(&mut rng, candidates, per_tensor.min(candidates)) {
            let index = match name.as_str() {
                "encoder.token_embeddings" => tokens[i / d] * d + i % d,
                _ => i,
            };
            coords.push((name.clone(), index));
        }
    }

    let analytic: Vec<(String, &crate::tensor::Tensor)> = grads.named();
    let mut work = model.params.clone();
    let mut samples = Vec::with_capacity(coords.len());
    for (name, index) in coords {
        let orig = *coord_mut(&mut work, &name, index);
        *coord_mut(&mut work, &name, index) = orig + eps;
        let plus = loss_at(&work)?;
        *coord_mut(&mut work, &name, index) = orig - eps;
        let minus = loss_at(&work)?;
        *coord_mut(&mut work, &name, index) = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, t)| t.data()[index])
            .expect("gradient tensor");
        let rel_error = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_NEAR_ZERO);
        samples.push(GradSample {
            tensor: name,
            index,
            analytic: a,
            numeric,
            rel_error,
        });
    }
    let near_zero = |s: &GradSample| s.analytic.abs().max(s.numeric.abs()) < GRAD_NEAR_ZERO;
    let max_rel_error = samples
        .iter()
        .filter(|s| !near_zero(s))
        .map(|s| s.rel_error)
        .fold(0.0, f64::max);
    let max_abs_error_near_zero = samples
        .iter()
        .filter(|s| near_zero(s))
        .map(|s| (s.analytic - s.numeric).abs())
        .fold(0.0, f64::max);
    Ok(GradCheckReport {
        samples,
        max_rel_error,
        max_abs_error_near_zero,
    })
}
