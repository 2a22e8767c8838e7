//! Pre-layer-norm bidirectional transformer encoder and the parameter set
//! shared with the task heads.

mod io;
pub mod layers;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{axpy, dot, linear, linear_backward, softmax_in_place, Tensor};
use crate::tokenizer::TokenId;
pub use io::{load_model, read_model, save_model, write_model, ModelFileError, MODEL_MAGIC};
pub use layers::{LayerNorm, LnCache, Mlp, MlpCache, LN_EPS};

/// Number of count classes (instance counts 0..=19).
pub const MAX_COUNT: usize = 20;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub hidden_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub max_positions: usize,
    pub max_span_width: usize,
    pub max_count: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Desk-scale defaults for a given vocabulary size.
    pub fn desk(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            hidden_dim: 64,
            layers: 2,
            heads: 4,
            ffn_dim: 128,
            max_positions: 512,
            max_span_width: 8,
            max_count: MAX_COUNT,
            seed: 7,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |why: &str| Err(ModelError::InvalidConfig(why.to_string()));
        if self.hidden_dim == 0 || self.heads == 0 || !self.hidden_dim.is_multiple_of(self.heads) {
            return bad("hidden_dim must be a positive multiple of heads");
        }
        if self.max_span_width == 0 {
            return bad("max_span_width must be at least 1");
        }
        if self.max_count != MAX_COUNT {
            return bad("max_count must be 20");
        }
        if self.vocab_size <= crate::tokenizer::NUM_SPECIAL {
            return bad("vocab_size must exceed the special-token block");
        }
        if self.max_positions == 0 || self.ffn_dim == 0 || self.layers == 0 {
            return bad("max_positions, ffn_dim and layers must be positive");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.heads
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("sequence of {len} tokens exceeds {max} positions")]
    SequenceTooLong { len: usize, max: usize },
    #[error("token id {0} outside the vocabulary")]
    UnknownTokenId(TokenId),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub ln1: LayerNorm,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln2: LayerNorm,
    pub ffn: Mlp,
}

/// Every learnable tensor: backbone (`encoder.*`) and heads (`heads.*`).
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub token_embeddings: Tensor,
    pub position_embeddings: Tensor,
    pub blocks: Vec<Block>,
    pub final_ln: LayerNorm,
    /// Span representation over concatenated endpoint states: 2d → d → d.
    pub span: Mlp,
    /// Instance-count classifier on the structure's [P] state: d → d → 20.
    pub count: Mlp,
    /// One learned vector per instance index, shared by all structures.
    pub occurrence: Tensor,
    /// Combines a field's [C] state with an occurrence vector: d → d → d.
    pub occurrence_ffn: Mlp,
    /// Per-label logit MLP on [L] states: d → d → 1.
    pub classifier: Mlp,
}

pub const HEAD_PREFIX: &str = "heads.";

impl EncoderParams {
    /// All-zero parameters with the shapes implied by `cfg`.
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.hidden_dim;
        let block = || Block {
            ln1: LayerNorm::new(d).zeros_like(),
            wq: Tensor::zeros(&[d, d]),
            bq: Tensor::zeros(&[d]),
            wk: Tensor::zeros(&[d, d]),
            bk: Tensor::zeros(&[d]),
            wv: Tensor::zeros(&[d, d]),
            bv: Tensor::zeros(&[d]),
            wo: Tensor::zeros(&[d, d]),
            bo: Tensor::zeros(&[d]),
            ln2: LayerNorm::new(d).zeros_like(),
            ffn: Mlp::zeros(d, cfg.ffn_dim, d),
        };
        EncoderParams {
            token_embeddings: Tensor::zeros(&[cfg.vocab_size, d]),
            position_embeddings: Tensor::zeros(&[cfg.max_positions, d]),
            blocks: (0..cfg.layers).map(|_| block()).collect(),
            final_ln: LayerNorm::new(d).zeros_like(),
            span: Mlp::zeros(2 * d, d, d),
            count: Mlp::zeros(d, d, cfg.max_count),
            occurrence: Tensor::zeros(&[cfg.max_count, d]),
            occurrence_ffn: Mlp::zeros(d, d, d),
            classifier: Mlp::zeros(d, d, 1),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, t) in z.named_mut() {
            t.fill(0.0);
        }
        z
    }

    /// Seeded initialisation: weights ~ N(0, 1/sqrt(d)), layer-norm gains 1,
    /// biases 0.
    pub fn init(cfg: &ModelConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut p = Self::zeros(cfg);
        let std = 1.0 / (cfg.hidden_dim as f64).sqrt();
        for (name, t) in p.named_mut() {
            let leaf = name.rsplit('.').next().unwrap_or_default();
            if leaf == "gain" {
                t.fill(1.0);
            } else if leaf.starts_with('b') {
                // biases stay zero
            } else {
                *t = Tensor::randn(t.shape(), std, &mut rng);
            }
        }
        p
    }

    /// `(name, tensor)` pairs in a fixed order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("encoder.token_embeddings".into(), &self.token_embeddings),
            ("encoder.position_embeddings".into(), &self.position_embeddings),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            let p = format!("encoder.blocks.{i}");
            out.extend([
                (format!("{p}.ln1.gain"), &b.ln1.gain),
                (format!("{p}.ln1.bias"), &b.ln1.bias),
                (format!("{p}.attn.wq"), &b.wq),
                (format!("{p}.attn.bq"), &b.bq),
                (format!("{p}.attn.wk"), &b.wk),
                (format!("{p}.attn.bk"), &b.bk),
                (format!("{p}.attn.wv"), &b.wv),
                (format!("{p}.attn.bv"), &b.bv),
                (format!("{p}.attn.wo"), &b.wo),
                (format!("{p}.attn.bo"), &b.bo),
                (format!("{p}.ln2.gain"), &b.ln2.gain),
                (format!("{p}.ln2.bias"), &b.ln2.bias),
            ]);
            push_mlp(&mut out, &format!("{p}.ffn"), &b.ffn);
        }
        out.push(("encoder.final_ln.gain".into(), &self.final_ln.gain));
        out.push(("encoder.final_ln.bias".into(), &self.final_ln.bias));
        push_mlp(&mut out, "heads.span", &self.span);
        push_mlp(&mut out, "heads.count", &self.count);
        out.push(("heads.occurrence.table".into(), &self.occurrence));
        push_mlp(&mut out, "heads.occurrence_ffn", &self.occurrence_ffn);
        push_mlp(&mut out, "heads.classifier", &self.classifier);
        out
    }

    /// Mutable counterpart of [`EncoderParams::named`], same order.
    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![
            ("encoder.token_embeddings".into(), &mut self.token_embeddings),
            ("encoder.position_embeddings".into(), &mut self.position_embeddings),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let p = format!("encoder.blocks.{i}");
            out.extend([
                (format!("{p}.ln1.gain"), &mut b.ln1.gain),
                (format!("{p}.ln1.bias"), &mut b.ln1.bias),
                (format!("{p}.attn.wq"), &mut b.wq),
                (format!("{p}.attn.bq"), &mut b.bq),
                (format!("{p}.attn.wk"), &mut b.wk),
                (format!("{p}.attn.bk"), &mut b.bk),
                (format!("{p}.attn.wv"), &mut b.wv),
                (format!("{p}.attn.bv"), &mut b.bv),
                (format!("{p}.attn.wo"), &mut b.wo),
                (format!("{p}.attn.bo"), &mut b.bo),
                (format!("{p}.ln2.gain"), &mut b.ln2.gain),
                (format!("{p}.ln2.bias"), &mut b.ln2.bias),
            ]);
            push_mlp_mut(&mut out, &format!("{p}.ffn"), &mut b.ffn);
        }
        out.push(("encoder.final_ln.gain".into(), &mut self.final_ln.gain));
        out.push(("encoder.final_ln.bias".into(), &mut self.final_ln.bias));
        push_mlp_mut(&mut out, "heads.span", &mut self.span);
        push_mlp_mut(&mut out, "heads.count", &mut self.count);
        out.push(("heads.occurrence.table".into(), &mut self.occurrence));
        push_mlp_mut(&mut out, "heads.occurrence_ffn", &mut self.occurrence_ffn);
        push_mlp_mut(&mut out, "heads.classifier", &mut self.classifier);
        out
    }

    pub fn is_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.is_finite())
    }

    pub fn num_parameters(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }
}

fn push_mlp<'a>(out: &mut Vec<(String, &'a Tensor)>, prefix: &str, m: &'a Mlp) {
    out.extend([
        (format!("{prefix}.w1"), &m.w1),
        (format!("{prefix}.b1"), &m.b1),
        (format!("{prefix}.w2"), &m.w2),
        (format!("{prefix}.b2"), &m.b2),
    ]);
}

fn push_mlp_mut<'a>(out: &mut Vec<(String, &'a mut Tensor)>, prefix: &str, m: &'a mut Mlp) {
    out.extend([
        (format!("{prefix}.w1"), &mut m.w1),
        (format!("{prefix}.b1"), &mut m.b1),
        (format!("{prefix}.w2"), &mut m.w2),
        (format!("{prefix}.b2"), &mut m.b2),
    ]);
}

#[derive(Debug, Clone, Default)]
struct BlockCache {
    ln1: LnCache,
    a: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// `heads × len × len` attention weights.
    probs: Vec<f64>,
    ctx: Vec<f64>,
    ln2: LnCache,
    ffn: MlpCache,
}

/// Activations kept from [`encode_cached`] for [`encode_backward`].
#[derive(Debug, Clone, Default)]
pub struct EncoderCache {
    ids: Vec<TokenId>,
    blocks: Vec<BlockCache>,
    final_ln: LnCache,
}

impl EncoderCache {
    /// Attention weights of block `layer`, head `head`, as a `len × len`
    /// row-major matrix.
    pub fn attention(&self, layer: usize, head: usize) -> &[f64] {
        let len = self.ids.len();
        &self.blocks[layer].probs[head * len * len..(head + 1) * len * len]
    }
}

/// Hidden states `[len × d]` for a token sequence. Keeps no activations, so
/// attention needs one score row of scratch instead of the full matrix.
pub fn encode(params: &EncoderParams, cfg: &ModelConfig, ids: &[TokenId]) -> Result<Tensor, ModelError> {
    forward(params, cfg, ids, false).map(|(h, _)| h)
}

/// Like [`encode`], also returning the activations backprop needs.
pub fn encode_cached(
    params: &EncoderParams,
    cfg: &ModelConfig,
    ids: &[TokenId],
) -> Result<(Tensor, EncoderCache), ModelError> {
    forward(params, cfg, ids, true).map(|(h, c)| (h, c.expect("cache was requested")))
}

fn forward(
    params: &EncoderParams,
    cfg: &ModelConfig,
    ids: &[TokenId],
    keep: bool,
) -> Result<(Tensor, Option<EncoderCache>), ModelError> {
    let len = ids.len();
    let d = cfg.hidden_dim;
    if len > cfg.max_positions {
        return Err(ModelError::SequenceTooLong {
            len,
            max: cfg.max_positions,
        });
    }
    let mut x = Vec::with_capacity(len * d);
    for (pos, &id) in ids.iter().enumerate() {
        if id as usize >= cfg.vocab_size {
            return Err(ModelError::UnknownTokenId(id));
        }
        let tok = params.token_embeddings.row(id as usize);
        let p = params.position_embeddings.row(pos);
        x.extend(tok.iter().zip(p).map(|(a, b)| a + b));
    }

    let heads = cfg.heads;
    let hd = cfg.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();
    let mut caches = Vec::with_capacity(if keep { params.blocks.len() } else { 0 });
    let mut scratch = vec![0.0; if keep { 0 } else { len }];
    for block in &params.blocks {
        let (a, ln1) = block.ln1.forward(&x);
        let q = linear(&a, len, &block.wq, &block.bq);
        let k = linear(&a, len, &block.wk, &block.bk);
        let v = linear(&a, len, &block.wv, &block.bv);
        let mut probs = vec![0.0; if keep { heads * len * len } else { 0 }];
        let mut ctx = vec![0.0; len * d];
        // keys transposed per head so a score row is a sum of axpys
        let mut kt = vec![0.0; hd * len];
        for h in 0..heads {
            let hs = h * hd..(h + 1) * hd;
            for (j, kj) in k.chunks_exact(d).enumerate() {
                for (c, &kc) in kj[hs.clone()].iter().enumerate() {
                    kt[c * len + j] = kc;
                }
            }
            for i in 0..len {
                let row = if keep {
                    &mut probs[(h * len + i) * len..(h * len + i + 1) * len]
                } else {
                    &mut scratch[..]
                };
                row.fill(0.0);
                for (&qc, ktc) in q[i * d..][hs.clone()].iter().zip(kt.chunks_exact(len)) {
                    axpy(qc * scale, ktc, row);
                }
                softmax_in_place(row);
                let ci = &mut ctx[i * d..][hs.clone()];
                for (j, &p) in row.iter().enumerate() {
                    axpy(p, &v[j * d..][hs.clone()], ci);
                }
            }
        }
        let o = linear(&ctx, len, &block.wo, &block.bo);
        for (xi, oi) in x.iter_mut().zip(&o) {
            *xi += oi;
        }
        let (b, ln2) = block.ln2.forward(&x);
        let (f, ffn) = block.ffn.forward(&b);
        for (xi, fi) in x.iter_mut().zip(&f) {
            *xi += fi;
        }
        if !keep {
            continue;
        }
        caches.push(BlockCache {
            ln1,
            a,
            q,
            k,
            v,
            probs,
            ctx,
            ln2,
            ffn,
        });
    }
    let (out, final_ln) = params.final_ln.forward(&x);
    let hidden = Tensor::from_vec(&[len, d], out).expect("hidden shape");
    let cache = keep.then(|| EncoderCache {
        ids: ids.to_vec(),
        blocks: caches,
        final_ln,
    });
    Ok((hidden, cache))
}

/// Accumulates parameter gradients of the encoder given `d_hidden`.
pub fn encode_backward(
    params: &EncoderParams,
    cfg: &ModelConfig,
    cache: &EncoderCache,
    d_hidden: &[f64],
    grads: &mut EncoderParams,
) {
    let len = cache.ids.len();
    let d = cfg.hidden_dim;
    let heads = cfg.heads;
    let hd = cfg.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();

    let mut dx = params.final_ln.backward(&cache.final_ln, d_hidden, &mut grads.final_ln);

    for (bi, block) in params.blocks.iter().enumerate().rev() {
        let c = &cache.blocks[bi];
        let g = &mut grads.blocks[bi];

        // x2 = x1 + ffn(ln2(x1))
        let db = block.ffn.backward(&c.ffn, &dx, &mut g.ffn);
        let dx1 = block.ln2.backward(&c.ln2, &db, &mut g.ln2);
        for (a, b) in dx.iter_mut().zip(&dx1) {
            *a += b;
        }

        // x1 = x + wo(attn(ln1(x)))
        let dctx = linear_backward(&c.ctx, len, &block.wo, &dx, &mut g.wo, &mut g.bo);
        let mut dq = vec![0.0; len * d];
        let mut dk = vec![0.0; len * d];
        let mut dv = vec![0.0; len * d];
        let mut dp = vec![0.0; len];
        for h in 0..heads {
            let hs = h * hd..(h + 1) * hd;
            for i in 0..len {
                let p = &c.probs[(h * len + i) * len..(h * len + i + 1) * len];
                let dci = &dctx[i * d..][hs.clone()];
                for j in 0..len {
                    dp[j] = dot(dci, &c.v[j * d..][hs.clone()]);
                    axpy(p[j], dci, &mut dv[j * d..][hs.clone()]);
                }
                let weighted: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                let qi = &c.q[i * d..][hs.clone()];
                for j in 0..len {
                    let ds = p[j] * (dp[j] - weighted) * scale;
                    if ds != 0.0 {
                        axpy(ds, &c.k[j * d..][hs.clone()], &mut dq[i * d..][hs.clone()]);
                        axpy(ds, qi, &mut dk[j * d..][hs.clone()]);
                    }
                }
            }
        }
        let mut da = linear_backward(&c.a, len, &block.wq, &dq, &mut g.wq, &mut g.bq);
        let dak = linear_backward(&c.a, len, &block.wk, &dk, &mut g.wk, &mut g.bk);
        let dav = linear_backward(&c.a, len, &block.wv, &dv, &mut g.wv, &mut g.bv);
        for ((a, b), c) in da.iter_mut().zip(&dak).zip(&dav) {
            *a += b + c;
        }
        let dx0 = block.ln1.backward(&c.ln1, &da, &mut g.ln1);
        for (a, b) in dx.iter_mut().zip(&dx0) {
            *a += b;
        }
    }

    for (pos, &id) in cache.ids.iter().enumerate() {
        let row = &dx[pos * d..(pos + 1) * d];
        axpy(1.0, row, grads.token_embeddings.row_mut(id as usize));
        axpy(1.0, row, grads.position_embeddings.row_mut(pos));
    }
}
