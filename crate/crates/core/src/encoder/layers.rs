//! Building blocks with explicit forward caches and backward passes.

use crate::tensor::{gelu, gelu_grad, linear, linear_backward, Tensor};

/// Variance floor inside layer norm.
pub const LN_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gain: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, Default)]
pub struct LnCache {
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        LayerNorm {
            gain: Tensor::filled(&[dim], 1.0),
            bias: Tensor::zeros(&[dim]),
        }
    }

    pub fn zeros_like(&self) -> Self {
        LayerNorm {
            gain: Tensor::zeros(self.gain.shape()),
            bias: Tensor::zeros(self.bias.shape()),
        }
    }

    /// Normalised rows before gain/bias.
    pub fn normalize(x: &[f64], dim: usize) -> LnCache {
        let n = x.len() / dim;
        let mut xhat = Vec::with_capacity(x.len());
        let mut inv_std = Vec::with_capacity(n);
        for row in x.chunks_exact(dim) {
            let mean = row.iter().sum::<f64>() / dim as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / dim as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            xhat.extend(row.iter().map(|v| (v - mean) * inv));
            inv_std.push(inv);
        }
        LnCache { xhat, inv_std }
    }

    pub fn forward(&self, x: &[f64]) -> (Vec<f64>, LnCache) {
        let dim = self.gain.len();
        let cache = Self::normalize(x, dim);
        let (g, b) = (self.gain.data(), self.bias.data());
        let y = cache
            .xhat
            .chunks_exact(dim)
            .flat_map(|row| row.iter().zip(g).zip(b).map(|((h, g), b)| h * g + b))
            .collect();
        (y, cache)
    }

    pub fn backward(&self, cache: &LnCache, dy: &[f64], grad: &mut LayerNorm) -> Vec<f64> {
        let dim = self.gain.len();
        let g = self.gain.data();
        let mut dx = vec![0.0; dy.len()];
        let mut dxhat = vec![0.0; dim];
        for (r, (dyr, xh)) in dy.chunks_exact(dim).zip(cache.xhat.chunks_exact(dim)).enumerate() {
            {
                let gg = grad.gain.data_mut();
                for i in 0..dim {
                    gg[i] += dyr[i] * xh[i];
                }
            }
            {
                let gb = grad.bias.data_mut();
                for i in 0..dim {
                    gb[i] += dyr[i];
                }
            }
            for i in 0..dim {
                dxhat[i] = dyr[i] * g[i];
            }
            let mean_d = dxhat.iter().sum::<f64>() / dim as f64;
            let mean_dx = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / dim as f64;
            let inv = cache.inv_std[r];
            for i in 0..dim {
                dx[r * dim + i] = inv * (dxhat[i] - mean_d - xh[i] * mean_dx);
            }
        }
        dx
    }
}

/// Two-layer perceptron `W2 · gelu(W1 x + b1) + b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

#[derive(Debug, Clone, Default)]
pub struct MlpCache {
    pub x: Vec<f64>,
    pub pre: Vec<f64>,
    pub act: Vec<f64>,
    pub rows: usize,
}

impl Mlp {
    pub fn zeros(input: usize, hidden: usize, output: usize) -> Self {
        Mlp {
            w1: Tensor::zeros(&[input, hidden]),
            b1: Tensor::zeros(&[hidden]),
            w2: Tensor::zeros(&[hidden, output]),
            b2: Tensor::zeros(&[output]),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Mlp {
            w1: Tensor::zeros(self.w1.shape()),
            b1: Tensor::zeros(self.b1.shape()),
            w2: Tensor::zeros(self.w2.shape()),
            b2: Tensor::zeros(self.b2.shape()),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.w2.shape()[1]
    }

    pub fn forward(&self, x: &[f64]) -> (Vec<f64>, MlpCache) {
        let rows = x.len() / self.input_dim();
        let pre = linear(x, rows, &self.w1, &self.b1);
        let act: Vec<f64> = pre.iter().map(|&v| gelu(v)).collect();
        let out = linear(&act, rows, &self.w2, &self.b2);
        (
            out,
            MlpCache {
                x: x.to_vec(),
                pre,
                act,
                rows,
            },
        )
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.forward(x).0
    }

    pub fn backward(&self, cache: &MlpCache, dout: &[f64], grad: &mut Mlp) -> Vec<f64> {
        let dact = linear_backward(&cache.act, cache.rows, &self.w2, dout, &mut grad.w2, &mut grad.b2);
        let dpre: Vec<f64> = dact.iter().zip(&cache.pre).map(|(d, &p)| d * gelu_grad(p)).collect();
        linear_backward(&cache.x, cache.rows, &self.w1, &dpre, &mut grad.w1, &mut grad.b1)
    }
}
