use crate::encoder::{EncoderParams, HEAD_PREFIX};

/// AdamW with decoupled weight decay, linear warmup and separate learning
/// rates for backbone and head tensors.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr_backbone: f64,
    pub lr_heads: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: usize,
    m: EncoderParams,
    v: EncoderParams,
}

impl AdamW {
    pub fn new(
        params: &EncoderParams,
        lr_backbone: f64,
        lr_heads: f64,
        weight_decay: f64,
        warmup_steps: usize,
    ) -> Self {
        AdamW {
            lr_backbone,
            lr_heads,
            weight_decay,
            warmup_steps,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn steps(&self) -> usize {
        self.step
    }

    /// Warmup factor for the step about to be taken.
    pub fn warmup_factor(&self) -> f64 {
        if self.warmup_steps == 0 {
            1.0
        } else {
            ((self.step + 1) as f64 / self.warmup_steps as f64).min(1.0)
        }
    }

    pub fn update(&mut self, params: &mut EncoderParams, grads: &EncoderParams) {
        let factor = self.warmup_factor();
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let gs = grads.named();
        let ms = self.m.named_mut();
        let vs = self.v.named_mut();
        for ((((name, p), (_, g)), (_, m)), (_, v)) in params.named_mut().into_iter().zip(gs).zip(ms).zip(vs) {
            let lr = factor
                * if name.starts_with(HEAD_PREFIX) {
                    self.lr_heads
                } else {
                    self.lr_backbone
                };
            for (((p, &g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let update = (*m / c1) / ((*v / c2).sqrt() + self.eps);
                *p -= lr * (update + self.weight_decay * *p);
            }
        }
    }
}

/// Global L2 norm of all gradients.
pub fn grad_norm(grads: &EncoderParams) -> f64 {
    grads.named().iter().map(|(_, t)| t.sq_norm()).sum::<f64>().sqrt()
}

/// Rescales gradients to norm at most `max_norm`; returns the norm before
/// clipping.
pub fn clip_grad_norm(grads: &mut EncoderParams, max_norm: f64) -> f64 {
    let norm = grad_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for (_, t) in grads.named_mut() {
            t.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}
