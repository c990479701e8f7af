//! Forward kernels and the vector-Jacobian products for every op.

use std::collections::HashMap;
use std::rc::Rc;

use super::{add_into, Op, Scalar, Tensor};
use crate::error::{HisemError, Result};

// ── raw matmul kernels ───────────────────────────────────────────────

/// C[m×n] = A[m×k] · B[k×n]
pub(crate) fn matmul_raw(a: &[Scalar], b: &[Scalar], m: usize, k: usize, n: usize) -> Vec<Scalar> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for t in 0..k {
            let av = a[i * k + t];
            if av == 0.0 {
                continue;
            }
            let brow = &b[t * n..(t + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    c
}

/// C[m×k] = A[m×n] · B[k×n]ᵀ
fn matmul_nt(a: &[Scalar], b: &[Scalar], m: usize, n: usize, k: usize) -> Vec<Scalar> {
    let mut c = vec![0.0; m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for t in 0..k {
            let brow = &b[t * n..(t + 1) * n];
            let mut acc = 0.0;
            for j in 0..n {
                acc += arow[j] * brow[j];
            }
            c[i * k + t] = acc;
        }
    }
    c
}

/// C[k×n] = A[m×k]ᵀ · B[m×n]
fn matmul_tn(a: &[Scalar], b: &[Scalar], m: usize, k: usize, n: usize) -> Vec<Scalar> {
    let mut c = vec![0.0; k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for t in 0..k {
            let av = a[i * k + t];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[t * n..(t + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    c
}

fn sigmoid(x: Scalar) -> Scalar {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn dims2(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [m, n] => Ok((*m, *n)),
        s => Err(HisemError::ShapeMismatch {
            op,
            lhs: s.to_vec(),
            rhs: vec![],
        }),
    }
}

// im2col for a zero-padded stride-1 3x3 conv over an [H,W,C] grid.
fn im2col(x: &[Scalar], h: usize, w: usize, c: usize) -> Vec<Scalar> {
    let kc = 9 * c;
    let mut cols = vec![0.0; h * w * kc];
    for i in 0..h {
        for j in 0..w {
            let row = &mut cols[(i * w + j) * kc..(i * w + j + 1) * kc];
            for (tap, (di, dj)) in TAPS.iter().enumerate() {
                let ii = i as isize + di;
                let jj = j as isize + dj;
                if ii < 0 || jj < 0 || ii >= h as isize || jj >= w as isize {
                    continue;
                }
                let src = ((ii as usize) * w + jj as usize) * c;
                row[tap * c..(tap + 1) * c].copy_from_slice(&x[src..src + c]);
            }
        }
    }
    cols
}

fn col2im_add(cols: &[Scalar], h: usize, w: usize, c: usize, out: &mut [Scalar]) {
    let kc = 9 * c;
    for i in 0..h {
        for j in 0..w {
            let row = &cols[(i * w + j) * kc..(i * w + j + 1) * kc];
            for (tap, (di, dj)) in TAPS.iter().enumerate() {
                let ii = i as isize + di;
                let jj = j as isize + dj;
                if ii < 0 || jj < 0 || ii >= h as isize || jj >= w as isize {
                    continue;
                }
                let dst = ((ii as usize) * w + jj as usize) * c;
                for cc in 0..c {
                    out[dst + cc] += row[tap * c + cc];
                }
            }
        }
    }
}

const TAPS: [(isize, isize); 9] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, -1),
    (0, 0),
    (0, 1),
    (1, -1),
    (1, 0),
    (1, 1),
];

// ── public op surface ────────────────────────────────────────────────

impl Tensor {
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (m, k) = dims2(self, "matmul")?;
        let (k2, n) = dims2(rhs, "matmul")?;
        if k != k2 {
            return Err(HisemError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape().to_vec(),
                rhs: rhs.shape().to_vec(),
            });
        }
        let out = self.with_data(|a| rhs.with_data(|b| matmul_raw(a, b, m, k, n)));
        Ok(Tensor::from_op(out, vec![m, n], Op::Matmul(self.clone(), rhs.clone())))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = dims2(self, "transpose")?;
        let out = self.with_data(|a| {
            let mut t = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    t[j * m + i] = a[i * n + j];
                }
            }
            t
        });
        Ok(Tensor::from_op(out, vec![n, m], Op::Transpose(self.clone())))
    }

    fn binary(
        &self,
        rhs: &Tensor,
        name: &'static str,
        f: impl Fn(Scalar, Scalar) -> Scalar,
        op: Op,
    ) -> Result<Tensor> {
        if self.shape() != rhs.shape() {
            return Err(HisemError::ShapeMismatch {
                op: name,
                lhs: self.shape().to_vec(),
                rhs: rhs.shape().to_vec(),
            });
        }
        let out = self.with_data(|a| rhs.with_data(|b| a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()));
        Ok(Tensor::from_op(out, self.shape().to_vec(), op))
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary(rhs, "add", |a, b| a + b, Op::Add(self.clone(), rhs.clone()))
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary(rhs, "sub", |a, b| a - b, Op::Sub(self.clone(), rhs.clone()))
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary(rhs, "mul", |a, b| a * b, Op::Mul(self.clone(), rhs.clone()))
    }

    fn unary(&self, f: impl Fn(Scalar) -> Scalar, op: Op) -> Tensor {
        let out = self.with_data(|a| a.iter().map(|&x| f(x)).collect());
        Tensor::from_op(out, self.shape().to_vec(), op)
    }

    pub fn abs(&self) -> Tensor {
        self.unary(|x| x.abs(), Op::Abs(self.clone()))
    }

    pub fn relu(&self) -> Tensor {
        self.unary(|x| x.max(0.0), Op::Relu(self.clone()))
    }

    pub fn sigmoid(&self) -> Tensor {
        self.unary(sigmoid, Op::Sigmoid(self.clone()))
    }

    pub fn silu(&self) -> Tensor {
        self.unary(|x| x * sigmoid(x), Op::Silu(self.clone()))
    }

    /// a*x + b with constants.
    pub fn affine(&self, a: Scalar, b: Scalar) -> Tensor {
        self.unary(|x| a * x + b, Op::Affine(self.clone(), a))
    }

    pub fn scale(&self, a: Scalar) -> Tensor {
        self.affine(a, 0.0)
    }

    /// x * s with a one-element tensor `s` (learnable scalar coefficients).
    pub fn mul_scalar_t(&self, s: &Tensor) -> Result<Tensor> {
        if s.len() != 1 {
            return Err(HisemError::ShapeMismatch {
                op: "mul_scalar_t",
                lhs: self.shape().to_vec(),
                rhs: s.shape().to_vec(),
            });
        }
        let sv = s.item();
        let out = self.with_data(|a| a.iter().map(|&x| x * sv).collect());
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            Op::MulScalarT(self.clone(), s.clone()),
        ))
    }

    /// Numerically stable softmax over the last axis.
    pub fn softmax_lastdim(&self) -> Tensor {
        let n = *self.shape().last().expect("softmax on rank-0 tensor");
        let out = self.with_data(|a| {
            let mut y = vec![0.0; a.len()];
            for (xs, ys) in a.chunks(n).zip(y.chunks_mut(n)) {
                let max = xs.iter().cloned().fold(Scalar::NEG_INFINITY, Scalar::max);
                let mut sum = 0.0;
                for (x, y) in xs.iter().zip(ys.iter_mut()) {
                    *y = (x - max).exp();
                    sum += *y;
                }
                for y in ys.iter_mut() {
                    *y /= sum;
                }
            }
            y
        });
        Tensor::from_op(out, self.shape().to_vec(), Op::SoftmaxLast(self.clone()))
    }

    /// Per-slice normalization over the last axis, then `gamma * xhat + beta`.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: Scalar) -> Result<Tensor> {
        let d = *self.shape().last().unwrap_or(&0);
        if gamma.len() != d || beta.len() != d || d == 0 {
            return Err(HisemError::ShapeMismatch {
                op: "layer_norm",
                lhs: self.shape().to_vec(),
                rhs: gamma.shape().to_vec(),
            });
        }
        let out = self.with_data(|a| {
            gamma.with_data(|g| {
                beta.with_data(|b| {
                    let mut y = vec![0.0; a.len()];
                    for (xs, ys) in a.chunks(d).zip(y.chunks_mut(d)) {
                        let mean = xs.iter().sum::<Scalar>() / d as Scalar;
                        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<Scalar>() / d as Scalar;
                        let inv = 1.0 / (var + eps).sqrt();
                        for i in 0..d {
                            ys[i] = g[i] * (xs[i] - mean) * inv + b[i];
                        }
                    }
                    y
                })
            })
        });
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            Op::LayerNorm {
                x: self.clone(),
                gamma: gamma.clone(),
                beta: beta.clone(),
                eps,
            },
        ))
    }

    /// Zero-padded stride-1 3x3 convolution over an [H,W,Cin] grid with
    /// kernel [3,3,Cin,Cout] and bias [Cout].
    pub fn conv3x3(&self, w: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (h, wid, cin) = match self.shape() {
            [h, w, c] => (*h, *w, *c),
            s => {
                return Err(HisemError::ShapeMismatch {
                    op: "conv3x3",
                    lhs: s.to_vec(),
                    rhs: w.shape().to_vec(),
                })
            }
        };
        let cout = match w.shape() {
            [3, 3, ci, co] if *ci == cin => *co,
            s => {
                return Err(HisemError::ShapeMismatch {
                    op: "conv3x3",
                    lhs: self.shape().to_vec(),
                    rhs: s.to_vec(),
                })
            }
        };
        if b.len() != cout {
            return Err(HisemError::ShapeMismatch {
                op: "conv3x3",
                lhs: w.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let out = self.with_data(|x| {
            w.with_data(|wd| {
                b.with_data(|bd| {
                    let cols = im2col(x, h, wid, cin);
                    let mut y = matmul_raw(&cols, wd, h * wid, 9 * cin, cout);
                    for row in y.chunks_mut(cout) {
                        for (v, bias) in row.iter_mut().zip(bd) {
                            *v += bias;
                        }
                    }
                    y
                })
            })
        });
        Ok(Tensor::from_op(
            out,
            vec![h, wid, cout],
            Op::Conv3x3 {
                x: self.clone(),
                w: w.clone(),
                b: b.clone(),
            },
        ))
    }

    pub fn sum_all(&self) -> Tensor {
        let s = self.with_data(|a| a.iter().sum::<Scalar>());
        Tensor::from_op(vec![s], vec![1], Op::SumAll(self.clone()))
    }

    /// Adds a row vector `b[D]` to every row of `self[L,D]`.
    pub fn add_rowvec(&self, b: &Tensor) -> Result<Tensor> {
        let (_, d) = dims2(self, "add_rowvec")?;
        if b.len() != d {
            return Err(HisemError::ShapeMismatch {
                op: "add_rowvec",
                lhs: self.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let out = self.with_data(|a| {
            b.with_data(|bv| {
                let mut y = a.to_vec();
                for row in y.chunks_mut(d) {
                    for (v, add) in row.iter_mut().zip(bv) {
                        *v += add;
                    }
                }
                y
            })
        });
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            Op::AddRowVec(self.clone(), b.clone()),
        ))
    }

    /// [L,D1] ++ [L,D2] → [L,D1+D2] along the channel axis.
    pub fn concat_cols(&self, rhs: &Tensor) -> Result<Tensor> {
        let (l, d1) = dims2(self, "concat_cols")?;
        let (l2, d2) = dims2(rhs, "concat_cols")?;
        if l != l2 {
            return Err(HisemError::ShapeMismatch {
                op: "concat_cols",
                lhs: self.shape().to_vec(),
                rhs: rhs.shape().to_vec(),
            });
        }
        let out = self.with_data(|a| {
            rhs.with_data(|b| {
                let mut y = Vec::with_capacity(l * (d1 + d2));
                for i in 0..l {
                    y.extend_from_slice(&a[i * d1..(i + 1) * d1]);
                    y.extend_from_slice(&b[i * d2..(i + 1) * d2]);
                }
                y
            })
        });
        Ok(Tensor::from_op(
            out,
            vec![l, d1 + d2],
            Op::ConcatCols(self.clone(), rhs.clone()),
        ))
    }

    /// Column means: [L,D] → [1,D] (global average pooling over tokens).
    pub fn mean_rows(&self) -> Result<Tensor> {
        let (l, d) = dims2(self, "mean_rows")?;
        let out = self.with_data(|a| {
            let mut y = vec![0.0; d];
            for row in a.chunks(d) {
                for (acc, v) in y.iter_mut().zip(row) {
                    *acc += v;
                }
            }
            for v in &mut y {
                *v /= l as Scalar;
            }
            y
        });
        Ok(Tensor::from_op(out, vec![1, d], Op::MeanRows(self.clone())))
    }

    /// Diagonal matrix [L,L] from a length-L vector (shape [L] or [L,1]).
    pub fn diag(&self) -> Result<Tensor> {
        let l = self.len();
        let ok = matches!(self.shape(), [_] | [_, 1]);
        if !ok {
            return Err(HisemError::ShapeMismatch {
                op: "diag",
                lhs: self.shape().to_vec(),
                rhs: vec![],
            });
        }
        let out = self.with_data(|a| {
            let mut y = vec![0.0; l * l];
            for (i, &v) in a.iter().enumerate() {
                y[i * l + i] = v;
            }
            y
        });
        Ok(Tensor::from_op(out, vec![l, l], Op::Diag(self.clone())))
    }

    /// Row sums: [L,E] → [L,1].
    pub fn sum_lastdim(&self) -> Result<Tensor> {
        let (l, e) = dims2(self, "sum_lastdim")?;
        let out = self.with_data(|a| a.chunks(e).map(|r| r.iter().sum()).collect());
        Ok(Tensor::from_op(out, vec![l, 1], Op::SumLast(self.clone())))
    }

    /// Divides each row of [L,E] by the matching entry of r[L,1].
    pub fn div_colvec(&self, r: &Tensor) -> Result<Tensor> {
        let (l, e) = dims2(self, "div_colvec")?;
        if r.len() != l {
            return Err(HisemError::ShapeMismatch {
                op: "div_colvec",
                lhs: self.shape().to_vec(),
                rhs: r.shape().to_vec(),
            });
        }
        let out = self.with_data(|a| {
            r.with_data(|rv| {
                let mut y = vec![0.0; a.len()];
                for i in 0..l {
                    for j in 0..e {
                        y[i * e + j] = a[i * e + j] / rv[i];
                    }
                }
                y
            })
        });
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            Op::DivColVec(self.clone(), r.clone()),
        ))
    }

    /// Scales each row of [L,D] by the matching entry of c[L,1].
    pub fn mul_colvec(&self, c: &Tensor) -> Result<Tensor> {
        let (l, d) = dims2(self, "mul_colvec")?;
        if c.len() != l {
            return Err(HisemError::ShapeMismatch {
                op: "mul_colvec",
                lhs: self.shape().to_vec(),
                rhs: c.shape().to_vec(),
            });
        }
        let out = self.with_data(|a| {
            c.with_data(|cv| {
                let mut y = vec![0.0; a.len()];
                for i in 0..l {
                    for j in 0..d {
                        y[i * d + j] = a[i * d + j] * cv[i];
                    }
                }
                y
            })
        });
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            Op::MulColVec(self.clone(), c.clone()),
        ))
    }

    /// Column `j` of [L,E] as [L,1].
    pub fn slice_col(&self, j: usize) -> Result<Tensor> {
        let (l, e) = dims2(self, "slice_col")?;
        if j >= e {
            return Err(HisemError::InvalidArgument(format!(
                "slice_col: column {j} out of range for {e} columns"
            )));
        }
        let out = self.with_data(|a| (0..l).map(|i| a[i * e + j]).collect());
        Ok(Tensor::from_op(out, vec![l, 1], Op::SliceCol(self.clone(), j)))
    }

    /// Elementwise product with a constant mask (no gradient to the mask).
    pub fn mul_const(&self, mask: &[Scalar]) -> Result<Tensor> {
        if mask.len() != self.len() {
            return Err(HisemError::ShapeMismatch {
                op: "mul_const",
                lhs: self.shape().to_vec(),
                rhs: vec![mask.len()],
            });
        }
        let mask = Rc::new(mask.to_vec());
        let out = self.with_data(|a| a.iter().zip(mask.iter()).map(|(x, m)| x * m).collect());
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            Op::MulConst(self.clone(), mask),
        ))
    }

    /// Elementwise sum with a constant (attention masks; gradient passes through).
    pub fn add_const(&self, c: &[Scalar]) -> Result<Tensor> {
        if c.len() != self.len() {
            return Err(HisemError::ShapeMismatch {
                op: "add_const",
                lhs: self.shape().to_vec(),
                rhs: vec![c.len()],
            });
        }
        let c = Rc::new(c.to_vec());
        let out = self.with_data(|a| a.iter().zip(c.iter()).map(|(x, m)| x + m).collect());
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            Op::AddConst(self.clone()),
        ))
    }

    /// Row gather from an embedding table [V,D] → [N,D].
    pub fn embedding(&self, ids: &[usize]) -> Result<Tensor> {
        let (v, d) = dims2(self, "embedding")?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(HisemError::InvalidArgument(format!(
                "embedding: id {bad} out of range for vocabulary of {v}"
            )));
        }
        let out = self.with_data(|t| {
            let mut y = Vec::with_capacity(ids.len() * d);
            for &i in ids {
                y.extend_from_slice(&t[i * d..(i + 1) * d]);
            }
            y
        });
        Ok(Tensor::from_op(
            out,
            vec![ids.len(), d],
            Op::Embedding {
                table: self.clone(),
                ids: ids.to_vec(),
            },
        ))
    }

    /// Rows start..start+len of [N,D].
    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Tensor> {
        let (n, d) = dims2(self, "slice_rows")?;
        if start + len > n {
            return Err(HisemError::InvalidArgument(format!(
                "slice_rows: {start}..{} out of range for {n} rows",
                start + len
            )));
        }
        let out = self.with_data(|a| a[start * d..(start + len) * d].to_vec());
        Ok(Tensor::from_op(
            out,
            vec![len, d],
            Op::SliceRows {
                x: self.clone(),
                start,
            },
        ))
    }

    /// Σ_i w_i·(logsumexp(logits[i,:]) − logits[i, t_i]) as a scalar.
    /// The caller divides by the active-row count.
    pub fn cross_entropy_sum(&self, targets: &[usize], weights: &[Scalar]) -> Result<Tensor> {
        let (r, v) = dims2(self, "cross_entropy_sum")?;
        if targets.len() != r || weights.len() != r {
            return Err(HisemError::ShapeMismatch {
                op: "cross_entropy_sum",
                lhs: self.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(HisemError::InvalidArgument(format!(
                "cross_entropy_sum: target {bad} out of range for {v} classes"
            )));
        }
        let out = self.with_data(|a| {
            let mut total = 0.0;
            for i in 0..r {
                if weights[i] == 0.0 {
                    continue;
                }
                let row = &a[i * v..(i + 1) * v];
                let max = row.iter().cloned().fold(Scalar::NEG_INFINITY, Scalar::max);
                let lse = max + row.iter().map(|x| (x - max).exp()).sum::<Scalar>().ln();
                total += weights[i] * (lse - row[targets[i]]);
            }
            total
        });
        Ok(Tensor::from_op(
            vec![out],
            vec![1],
            Op::CeLogits {
                logits: self.clone(),
                targets: targets.to_vec(),
                weights: weights.to_vec(),
            },
        ))
    }

    /// Same data viewed under a different shape (row-major order preserved).
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.len() {
            return Err(HisemError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Tensor::from_op(
            self.to_vec(),
            shape.to_vec(),
            Op::Reshape(self.clone()),
        ))
    }
}

// ── backward ─────────────────────────────────────────────────────────

pub(crate) fn backward_op(
    op: &Op,
    out: &Tensor,
    g: &[Scalar],
    acc: &mut HashMap<u64, Vec<Scalar>>,
) {
    match op {
        Op::Matmul(a, b) => {
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let n = b.shape()[1];
            if a.is_requires_grad() {
                let da = b.with_data(|bd| matmul_nt(g, bd, m, n, k));
                add_into(acc, a, da);
            }
            if b.is_requires_grad() {
                let db = a.with_data(|ad| matmul_tn(ad, g, m, k, n));
                add_into(acc, b, db);
            }
        }
        Op::Transpose(a) => {
            let (n, m) = (out.shape()[0], out.shape()[1]);
            let mut da = vec![0.0; m * n];
            for i in 0..n {
                for j in 0..m {
                    da[j * n + i] = g[i * m + j];
                }
            }
            add_into(acc, a, da);
        }
        Op::Add(a, b) => {
            if a.is_requires_grad() {
                add_into(acc, a, g.to_vec());
            }
            if b.is_requires_grad() {
                add_into(acc, b, g.to_vec());
            }
        }
        Op::Sub(a, b) => {
            if a.is_requires_grad() {
                add_into(acc, a, g.to_vec());
            }
            if b.is_requires_grad() {
                add_into(acc, b, g.iter().map(|x| -x).collect());
            }
        }
        Op::Mul(a, b) => {
            if a.is_requires_grad() {
                let da = b.with_data(|bd| g.iter().zip(bd).map(|(g, b)| g * b).collect());
                add_into(acc, a, da);
            }
            if b.is_requires_grad() {
                let db = a.with_data(|ad| g.iter().zip(ad).map(|(g, a)| g * a).collect());
                add_into(acc, b, db);
            }
        }
        // abs gradient at exactly 0 is defined as 0 (subgradient choice).
        Op::Abs(a) => {
            let da = a.with_data(|ad| {
                g.iter()
                    .zip(ad)
                    .map(|(g, x)| {
                        if *x > 0.0 {
                            *g
                        } else if *x < 0.0 {
                            -*g
                        } else {
                            0.0
                        }
                    })
                    .collect()
            });
            add_into(acc, a, da);
        }
        Op::Relu(a) => {
            let da = a.with_data(|ad| {
                g.iter()
                    .zip(ad)
                    .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                    .collect()
            });
            add_into(acc, a, da);
        }
        Op::Sigmoid(a) => {
            let da = out.with_data(|y| g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect());
            add_into(acc, a, da);
        }
        Op::Silu(a) => {
            let da = a.with_data(|ad| {
                g.iter()
                    .zip(ad)
                    .map(|(g, &x)| {
                        let s = sigmoid(x);
                        g * (s + x * s * (1.0 - s))
                    })
                    .collect()
            });
            add_into(acc, a, da);
        }
        Op::Affine(a, scale) => {
            add_into(acc, a, g.iter().map(|g| g * scale).collect());
        }
        Op::MulScalarT(a, s) => {
            let sv = s.item();
            if a.is_requires_grad() {
                add_into(acc, a, g.iter().map(|g| g * sv).collect());
            }
            if s.is_requires_grad() {
                let ds = a.with_data(|ad| g.iter().zip(ad).map(|(g, a)| g * a).sum::<Scalar>());
                add_into(acc, s, vec![ds]);
            }
        }
        Op::SoftmaxLast(a) => {
            let n = *out.shape().last().unwrap();
            let da = out.with_data(|y| {
                let mut da = vec![0.0; y.len()];
                for ((ys, gs), ds) in y.chunks(n).zip(g.chunks(n)).zip(da.chunks_mut(n)) {
                    let dot: Scalar = ys.iter().zip(gs).map(|(y, g)| y * g).sum();
                    for i in 0..n {
                        ds[i] = ys[i] * (gs[i] - dot);
                    }
                }
                da
            });
            add_into(acc, a, da);
        }
        Op::LayerNorm { x, gamma, beta, eps } => {
            let d = *x.shape().last().unwrap();
            let (dx, dgamma, dbeta) = x.with_data(|xd| {
                gamma.with_data(|gm| {
                    let mut dx = vec![0.0; xd.len()];
                    let mut dgamma = vec![0.0; d];
                    let mut dbeta = vec![0.0; d];
                    for (slice, (gs, ds)) in xd
                        .chunks(d)
                        .zip(g.chunks(d).zip(dx.chunks_mut(d)))
                    {
                        let mean = slice.iter().sum::<Scalar>() / d as Scalar;
                        let var =
                            slice.iter().map(|x| (x - mean) * (x - mean)).sum::<Scalar>() / d as Scalar;
                        let inv = 1.0 / (var + eps).sqrt();
                        let xhat: Vec<Scalar> = slice.iter().map(|x| (x - mean) * inv).collect();
                        let dxhat: Vec<Scalar> = gs.iter().zip(gm).map(|(g, gm)| g * gm).collect();
                        let mean_dxhat = dxhat.iter().sum::<Scalar>() / d as Scalar;
                        let mean_dxhat_xhat =
                            dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<Scalar>() / d as Scalar;
                        for i in 0..d {
                            ds[i] = inv * (dxhat[i] - mean_dxhat - xhat[i] * mean_dxhat_xhat);
                            dgamma[i] += gs[i] * xhat[i];
                            dbeta[i] += gs[i];
                        }
                    }
                    (dx, dgamma, dbeta)
                })
            });
            if x.is_requires_grad() {
                add_into(acc, x, dx);
            }
            if gamma.is_requires_grad() {
                add_into(acc, gamma, dgamma);
            }
            if beta.is_requires_grad() {
                add_into(acc, beta, dbeta);
            }
        }
        Op::Conv3x3 { x, w, b } => {
            let (h, wid, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let cout = w.shape()[3];
            let l = h * wid;
            if b.is_requires_grad() {
                let mut db = vec![0.0; cout];
                for row in g.chunks(cout) {
                    for (d, v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                add_into(acc, b, db);
            }
            let cols = x.with_data(|xd| im2col(xd, h, wid, cin));
            if w.is_requires_grad() {
                let dw = matmul_tn(&cols, g, l, 9 * cin, cout);
                add_into(acc, w, dw);
            }
            if x.is_requires_grad() {
                let dcols = w.with_data(|wd| matmul_nt(g, wd, l, cout, 9 * cin));
                let mut dx = vec![0.0; l * cin];
                col2im_add(&dcols, h, wid, cin, &mut dx);
                add_into(acc, x, dx);
            }
        }
        Op::SumAll(a) => {
            add_into(acc, a, vec![g[0]; a.len()]);
        }
        Op::AddRowVec(a, b) => {
            let d = b.len();
            if a.is_requires_grad() {
                add_into(acc, a, g.to_vec());
            }
            if b.is_requires_grad() {
                let mut db = vec![0.0; d];
                for row in g.chunks(d) {
                    for (acc_v, v) in db.iter_mut().zip(row) {
                        *acc_v += v;
                    }
                }
                add_into(acc, b, db);
            }
        }
        Op::ConcatCols(a, b) => {
            let (l, d1) = (a.shape()[0], a.shape()[1]);
            let d2 = b.shape()[1];
            if a.is_requires_grad() {
                let mut da = vec![0.0; l * d1];
                for i in 0..l {
                    da[i * d1..(i + 1) * d1]
                        .copy_from_slice(&g[i * (d1 + d2)..i * (d1 + d2) + d1]);
                }
                add_into(acc, a, da);
            }
            if b.is_requires_grad() {
                let mut db = vec![0.0; l * d2];
                for i in 0..l {
                    db[i * d2..(i + 1) * d2]
                        .copy_from_slice(&g[i * (d1 + d2) + d1..(i + 1) * (d1 + d2)]);
                }
                add_into(acc, b, db);
            }
        }
        Op::MeanRows(a) => {
            let (l, d) = (a.shape()[0], a.shape()[1]);
            let mut da = vec![0.0; l * d];
            for row in da.chunks_mut(d) {
                for (v, gv) in row.iter_mut().zip(g) {
                    *v = gv / l as Scalar;
                }
            }
            add_into(acc, a, da);
        }
        Op::Diag(a) => {
            let l = a.len();
            let da: Vec<Scalar> = (0..l).map(|i| g[i * l + i]).collect();
            add_into(acc, a, da);
        }
        Op::SumLast(a) => {
            let (l, e) = (a.shape()[0], a.shape()[1]);
            let mut da = vec![0.0; l * e];
            for i in 0..l {
                for j in 0..e {
                    da[i * e + j] = g[i];
                }
            }
            add_into(acc, a, da);
        }
        Op::DivColVec(a, r) => {
            let (l, e) = (a.shape()[0], a.shape()[1]);
            let rv = r.to_vec();
            if a.is_requires_grad() {
                let mut da = vec![0.0; l * e];
                for i in 0..l {
                    for j in 0..e {
                        da[i * e + j] = g[i * e + j] / rv[i];
                    }
                }
                add_into(acc, a, da);
            }
            if r.is_requires_grad() {
                let dr = a.with_data(|ad| {
                    (0..l)
                        .map(|i| {
                            let mut s = 0.0;
                            for j in 0..e {
                                s += g[i * e + j] * (-ad[i * e + j] / (rv[i] * rv[i]));
                            }
                            s
                        })
                        .collect()
                });
                add_into(acc, r, dr);
            }
        }
        Op::MulColVec(a, c) => {
            let (l, d) = (a.shape()[0], a.shape()[1]);
            let cv = c.to_vec();
            if a.is_requires_grad() {
                let mut da = vec![0.0; l * d];
                for i in 0..l {
                    for j in 0..d {
                        da[i * d + j] = g[i * d + j] * cv[i];
                    }
                }
                add_into(acc, a, da);
            }
            if c.is_requires_grad() {
                let dc = a.with_data(|ad| {
                    (0..l)
                        .map(|i| (0..d).map(|j| g[i * d + j] * ad[i * d + j]).sum())
                        .collect()
                });
                add_into(acc, c, dc);
            }
        }
        Op::SliceCol(a, j) => {
            let (l, e) = (a.shape()[0], a.shape()[1]);
            let mut da = vec![0.0; l * e];
            for i in 0..l {
                da[i * e + j] = g[i];
            }
            add_into(acc, a, da);
        }
        Op::MulConst(a, mask) => {
            add_into(acc, a, g.iter().zip(mask.iter()).map(|(g, m)| g * m).collect());
        }
        Op::AddConst(a) => {
            add_into(acc, a, g.to_vec());
        }
        Op::Embedding { table, ids } => {
            let d = table.shape()[1];
            let mut dt = vec![0.0; table.len()];
            for (n, &i) in ids.iter().enumerate() {
                for j in 0..d {
                    dt[i * d + j] += g[n * d + j];
                }
            }
            add_into(acc, table, dt);
        }
        Op::SliceRows { x, start } => {
            let d = x.shape()[1];
            let len = out.shape()[0];
            let mut dx = vec![0.0; x.len()];
            dx[start * d..(start + len) * d].copy_from_slice(g);
            add_into(acc, x, dx);
        }
        Op::CeLogits {
            logits,
            targets,
            weights,
        } => {
            let (r, v) = (logits.shape()[0], logits.shape()[1]);
            let gv = g[0];
            let dl = logits.with_data(|ld| {
                let mut dl = vec![0.0; r * v];
                for i in 0..r {
                    if weights[i] == 0.0 {
                        continue;
                    }
                    let row = &ld[i * v..(i + 1) * v];
                    let max = row.iter().cloned().fold(Scalar::NEG_INFINITY, Scalar::max);
                    let exps: Vec<Scalar> = row.iter().map(|x| (x - max).exp()).collect();
                    let sum: Scalar = exps.iter().sum();
                    let drow = &mut dl[i * v..(i + 1) * v];
                    for j in 0..v {
                        drow[j] = gv * weights[i] * (exps[j] / sum);
                    }
                    drow[targets[i]] -= gv * weights[i];
                }
                dl
            });
            add_into(acc, logits, dl);
        }
        Op::Reshape(a) => {
            add_into(acc, a, g.to_vec());
        }
    }
}
