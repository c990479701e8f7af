//! Small parameter-holding building blocks shared by the model modules.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::Tensor;

/// Uniform init in [-1/sqrt(fan_in), 1/sqrt(fan_in)], seeded.
pub fn init_uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::from_vec(data, shape).requires_grad()
}

pub fn zeros_param(shape: &[usize]) -> Tensor {
    Tensor::zeros(shape).requires_grad()
}

pub fn ones_param(shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::from_vec(vec![1.0; n], shape).requires_grad()
}

/// Dense projection with optional bias.
#[derive(Clone)]
pub struct Linear {
    pub w: Tensor,
    pub b: Option<Tensor>,
}

impl Linear {
    pub fn new(rng: &mut ChaCha8Rng, d_in: usize, d_out: usize, bias: bool) -> Linear {
        Linear {
            w: init_uniform(rng, &[d_in, d_out], d_in),
            b: bias.then(|| zeros_param(&[d_out])),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.matmul(&self.w)?;
        match &self.b {
            Some(b) => y.add_rowvec(b),
            None => Ok(y),
        }
    }

    pub fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.w"), self.w.clone()));
        if let Some(b) = &self.b {
            out.push((format!("{prefix}.b"), b.clone()));
        }
    }
}

/// Layer-norm affine pair.
#[derive(Clone)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(d: usize) -> LayerNorm {
        LayerNorm {
            gamma: ones_param(&[d]),
            beta: zeros_param(&[d]),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.layer_norm(&self.gamma, &self.beta, self.eps)
    }

    pub fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.gamma"), self.gamma.clone()));
        out.push((format!("{prefix}.beta"), self.beta.clone()));
    }
}

/// 3x3 conv kernel plus bias over an [H,W,C] grid.
#[derive(Clone)]
pub struct Conv3x3 {
    pub w: Tensor,
    pub b: Tensor,
}

impl Conv3x3 {
    pub fn new(rng: &mut ChaCha8Rng, c_in: usize, c_out: usize) -> Conv3x3 {
        Conv3x3 {
            w: init_uniform(rng, &[3, 3, c_in, c_out], 9 * c_in),
            b: zeros_param(&[c_out]),
        }
    }

    /// Applies the conv to tokens [L,D] laid out on an (h, w) grid.
    pub fn forward_tokens(&self, x: &Tensor, grid: (usize, usize)) -> Result<Tensor> {
        let (h, w) = grid;
        let d = x.shape()[1];
        let y = x.reshape(&[h, w, d])?.conv3x3(&self.w, &self.b)?;
        let d_out = y.shape()[2];
        y.reshape(&[h * w, d_out])
    }

    pub fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.w"), self.w.clone()));
        out.push((format!("{prefix}.b"), self.b.clone()));
    }
}
