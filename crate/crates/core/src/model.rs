use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::encoder::{self, load_model, save_model, EncoderParams, ModelConfig, ModelError, ModelFileError};
use crate::prompt::PromptPlan;
use crate::tensor::Tensor;
use crate::tokenizer::Vocabulary;

/// A vocabulary, configuration and parameter set, plus a counter of encoder
/// forward passes run through [`Model::encode`].
#[derive(Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub params: EncoderParams,
    passes: AtomicU64,
}

impl Clone for Model {
    fn clone(&self) -> Self {
        Model {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            params: self.params.clone(),
            passes: AtomicU64::new(0),
        }
    }
}

impl Model {
    /// Freshly initialised model for `vocab` using `config` (whose
    /// `vocab_size` is overwritten to match).
    pub fn new(mut config: ModelConfig, vocab: Vocabulary) -> Result<Self, ModelError> {
        config.vocab_size = vocab.len();
        config.validate()?;
        let params = EncoderParams::init(&config);
        Ok(Self::from_parts(params, config, vocab))
    }

    pub fn from_parts(params: EncoderParams, config: ModelConfig, vocab: Vocabulary) -> Self {
        Model {
            config,
            vocab,
            params,
            passes: AtomicU64::new(0),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelFileError> {
        let (params, config, vocab) = load_model(path)?;
        Ok(Self::from_parts(params, config, vocab))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ModelFileError> {
        save_model(&self.params, &self.config, &self.vocab, path)
    }

    /// One encoder forward pass over a compiled plan.
    pub fn encode(&self, plan: &PromptPlan) -> Result<Tensor, ModelError> {
        self.passes.fetch_add(1, Ordering::Relaxed);
        encoder::encode(&self.params, &self.config, &plan.ids)
    }

    /// Total encoder passes served by this instance.
    pub fn passes(&self) -> u64 {
        self.passes.load(Ordering::Relaxed)
    }
}
