//! Bidirectional differential attention over bi-temporal token grids.
//!
//! Each layer runs two sublayers. The conditioning sublayer gates the
//! absolute difference of the two temporal streams channel-wise and
//! injects it additively next to a 3x3 conv of each stream. The
//! interaction sublayer turns the gated difference into a diagonal
//! attention bias, cross-attends in both temporal directions, and
//! subtracts the opposing attention map (scaled by a learnable λ in
//! [0,1]) before the value product, so symmetric responses cancel and
//! asymmetric ones survive. A gated convex blend folds the attended
//! features back into each stream.

use rand_chacha::ChaCha8Rng;

use crate::error::{HisemError, Result};
use crate::nn::{Conv3x3, LayerNorm, Linear};
use crate::tensor::Tensor;

/// Paired token grids for times T1/T2.
#[derive(Clone)]
pub struct BiTemporalFeatures {
    pub f_t1: Tensor,
    pub f_t2: Tensor,
    pub grid: (usize, usize),
}

impl BiTemporalFeatures {
    pub fn new(f_t1: Tensor, f_t2: Tensor, grid: (usize, usize)) -> Result<BiTemporalFeatures> {
        if f_t1.shape() != f_t2.shape() {
            return Err(HisemError::ShapeMismatch {
                op: "bi_temporal",
                lhs: f_t1.shape().to_vec(),
                rhs: f_t2.shape().to_vec(),
            });
        }
        let l = f_t1.shape()[0];
        if grid.0 * grid.1 != l {
            return Err(HisemError::InvalidArgument(format!(
                "grid {}x{} does not cover {} tokens",
                grid.0, grid.1, l
            )));
        }
        Ok(BiTemporalFeatures { f_t1, f_t2, grid })
    }

    pub fn swap(&self) -> BiTemporalFeatures {
        BiTemporalFeatures {
            f_t1: self.f_t2.clone(),
            f_t2: self.f_t1.clone(),
            grid: self.grid,
        }
    }

    pub fn dim(&self) -> usize {
        self.f_t1.shape()[1]
    }
}

/// One direction of the biased cross-attention: Q/K/V projections plus the
/// bias head (D→1 projection without constant term, and a scale α).
#[derive(Clone)]
pub struct DirectionParams {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub bias_proj: Linear,
    pub alpha: Tensor,
}

impl DirectionParams {
    fn new(rng: &mut ChaCha8Rng, d: usize) -> DirectionParams {
        DirectionParams {
            q: Linear::new(rng, d, d, false),
            k: Linear::new(rng, d, d, false),
            v: Linear::new(rng, d, d, false),
            // no bias term: zero discrepancy must give exactly zero bias
            bias_proj: Linear::new(rng, d, 1, false),
            alpha: crate::nn::ones_param(&[1]),
        }
    }

    fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.q.params(&format!("{prefix}.q"), out);
        self.k.params(&format!("{prefix}.k"), out);
        self.v.params(&format!("{prefix}.v"), out);
        self.bias_proj.params(&format!("{prefix}.bias_proj"), out);
        out.push((format!("{prefix}.alpha"), self.alpha.clone()));
    }
}

/// Parameters of one BDAM layer.
#[derive(Clone)]
pub struct BdamLayerParams {
    pub w1: Linear,
    pub w2: Linear,
    pub conv_t1: Conv3x3,
    pub conv_t2: Conv3x3,
    pub dir_12: DirectionParams,
    pub dir_21: DirectionParams,
    /// λ stored pre-sigmoid; the effective coefficient is sigmoid(raw),
    /// shared across both directions.
    pub lambda_raw: Tensor,
    pub gate_t1: Linear,
    pub gate_t2: Linear,
    pub ln_dfc_t1: LayerNorm,
    pub ln_dfc_t2: LayerNorm,
    pub ln_bdci_t1: LayerNorm,
    pub ln_bdci_t2: LayerNorm,
}

impl BdamLayerParams {
    pub fn new(rng: &mut ChaCha8Rng, d: usize, hidden: usize) -> BdamLayerParams {
        BdamLayerParams {
            w1: Linear::new(rng, 2 * d, hidden, true),
            w2: Linear::new(rng, hidden, d, true),
            conv_t1: Conv3x3::new(rng, d, d),
            conv_t2: Conv3x3::new(rng, d, d),
            dir_12: DirectionParams::new(rng, d),
            dir_21: DirectionParams::new(rng, d),
            lambda_raw: crate::nn::zeros_param(&[1]), // sigmoid(0) = 0.5
            gate_t1: Linear::new(rng, 2 * d, d, true),
            gate_t2: Linear::new(rng, 2 * d, d, true),
            ln_dfc_t1: LayerNorm::new(d),
            ln_dfc_t2: LayerNorm::new(d),
            ln_bdci_t1: LayerNorm::new(d),
            ln_bdci_t2: LayerNorm::new(d),
        }
    }

    /// Test mode: both temporal streams and both directions share one set
    /// of weights, so a symmetric input stays exactly symmetric.
    pub fn new_tied(rng: &mut ChaCha8Rng, d: usize, hidden: usize) -> BdamLayerParams {
        let mut p = BdamLayerParams::new(rng, d, hidden);
        p.conv_t2 = p.conv_t1.clone();
        p.dir_21 = p.dir_12.clone();
        p.gate_t2 = p.gate_t1.clone();
        p.ln_dfc_t2 = p.ln_dfc_t1.clone();
        p.ln_bdci_t2 = p.ln_bdci_t1.clone();
        p
    }

    pub fn lambda(&self) -> Result<Tensor> {
        Ok(self.lambda_raw.sigmoid())
    }

    pub fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.w1.params(&format!("{prefix}.w1"), out);
        self.w2.params(&format!("{prefix}.w2"), out);
        self.conv_t1.params(&format!("{prefix}.conv_t1"), out);
        self.conv_t2.params(&format!("{prefix}.conv_t2"), out);
        self.dir_12.params(&format!("{prefix}.dir_12"), out);
        self.dir_21.params(&format!("{prefix}.dir_21"), out);
        out.push((format!("{prefix}.lambda_raw"), self.lambda_raw.clone()));
        self.gate_t1.params(&format!("{prefix}.gate_t1"), out);
        self.gate_t2.params(&format!("{prefix}.gate_t2"), out);
        self.ln_dfc_t1.params(&format!("{prefix}.ln_dfc_t1"), out);
        self.ln_dfc_t2.params(&format!("{prefix}.ln_dfc_t2"), out);
        self.ln_bdci_t1.params(&format!("{prefix}.ln_bdci_t1"), out);
        self.ln_bdci_t2.params(&format!("{prefix}.ln_bdci_t2"), out);
    }
}

/// |F_T1 − F_T2| elementwise.
pub fn diff_features(x: &BiTemporalFeatures) -> Result<Tensor> {
    Ok(x.f_t1.sub(&x.f_t2)?.abs())
}

/// Conditioning sublayer: gate the difference channel-wise, conv each
/// stream, inject the gated difference additively next to a residual,
/// and post-norm.
pub fn feature_conditioning(
    x: &BiTemporalFeatures,
    p: &BdamLayerParams,
) -> Result<(BiTemporalFeatures, Tensor)> {
    let f_diff = diff_features(x)?;
    let cat = x.f_t1.concat_cols(&x.f_t2)?;
    let gate = p.w2.forward(&p.w1.forward(&cat)?.relu())?.sigmoid();
    let f_diff_hat = f_diff.mul(&gate)?;

    let cond_t1 = x
        .f_t1
        .add(&p.conv_t1.forward_tokens(&x.f_t1, x.grid)?)?
        .add(&f_diff_hat)?;
    let cond_t2 = x
        .f_t2
        .add(&p.conv_t2.forward_tokens(&x.f_t2, x.grid)?)?
        .add(&f_diff_hat)?;
    let out = BiTemporalFeatures::new(
        p.ln_dfc_t1.forward(&cond_t1)?,
        p.ln_dfc_t2.forward(&cond_t2)?,
        x.grid,
    )?;
    Ok((out, f_diff_hat))
}

/// Diagonal attention bias α·Diag(w(f̂_diff)); off-diagonal entries are
/// structurally zero.
pub fn attention_bias(f_diff_hat: &Tensor, proj: &Linear, alpha: &Tensor) -> Result<Tensor> {
    let scores = proj.forward(f_diff_hat)?;
    scores.diag()?.mul_scalar_t(alpha)
}

/// Both directional attention maps with bias, combined differentially:
/// o_12 = (A_12 − λA_21)·V_T2 and symmetrically for o_21.
pub fn bidirectional_diff_attention(
    xhat: &BiTemporalFeatures,
    f_diff_hat: &Tensor,
    p: &BdamLayerParams,
) -> Result<(Tensor, Tensor)> {
    let d = xhat.dim() as f64;
    let scale = 1.0 / d.sqrt();

    let attn = |dir: &DirectionParams, from: &Tensor, to: &Tensor| -> Result<Tensor> {
        let q = dir.q.forward(from)?;
        let k = dir.k.forward(to)?;
        let bias = attention_bias(f_diff_hat, &dir.bias_proj, &dir.alpha)?;
        let logits = q.matmul(&k.transpose()?)?.scale(scale).add(&bias)?;
        Ok(logits.softmax_lastdim())
    };

    let a_12 = attn(&p.dir_12, &xhat.f_t1, &xhat.f_t2)?;
    let a_21 = attn(&p.dir_21, &xhat.f_t2, &xhat.f_t1)?;
    let lambda = p.lambda()?;

    let v_t2 = p.dir_12.v.forward(&xhat.f_t2)?;
    let v_t1 = p.dir_21.v.forward(&xhat.f_t1)?;
    let o_12 = a_12.sub(&a_21.mul_scalar_t(&lambda)?)?.matmul(&v_t2)?;
    let o_21 = a_21.sub(&a_12.mul_scalar_t(&lambda)?)?.matmul(&v_t1)?;
    Ok((o_12, o_21))
}

/// g = σ(W_g[original; attended]); out = g⊙attended + (1−g)⊙original.
pub fn gated_fusion(original: &Tensor, attended: &Tensor, gate: &Linear) -> Result<Tensor> {
    if original.shape() != attended.shape() {
        return Err(HisemError::ShapeMismatch {
            op: "gated_fusion",
            lhs: original.shape().to_vec(),
            rhs: attended.shape().to_vec(),
        });
    }
    let g = gate.forward(&original.concat_cols(attended)?)?.sigmoid();
    g.mul(attended)?.add(&g.affine(-1.0, 1.0).mul(original)?)
}

/// One full layer: conditioning then biased differential interaction.
pub fn bdam_layer_forward(
    x: &BiTemporalFeatures,
    p: &BdamLayerParams,
) -> Result<BiTemporalFeatures> {
    let (xhat, f_diff_hat) = feature_conditioning(x, p)?;
    let (o_12, o_21) = bidirectional_diff_attention(&xhat, &f_diff_hat, p)?;
    let fused_t1 = gated_fusion(&xhat.f_t1, &o_12, &p.gate_t1)?;
    let fused_t2 = gated_fusion(&xhat.f_t2, &o_21, &p.gate_t2)?;
    BiTemporalFeatures::new(
        p.ln_bdci_t1.forward(&fused_t1)?,
        p.ln_bdci_t2.forward(&fused_t2)?,
        x.grid,
    )
}

/// Sequential stack; the default configuration uses three layers.
pub fn bdam_forward(
    x: &BiTemporalFeatures,
    layers: &[BdamLayerParams],
) -> Result<BiTemporalFeatures> {
    if layers.is_empty() {
        return Err(HisemError::InvalidArgument(
            "bdam_forward needs at least one layer".into(),
        ));
    }
    let mut cur = x.clone();
    for layer in layers {
        cur = bdam_layer_forward(&cur, layer)?;
    }
    Ok(cur)
}

/// Per-layer mean-absolute-difference maps |F̃_T1 − F̃_T2| for heatmap
/// dumps: entry 0 is the pre-stack baseline, one more per layer.
pub fn diff_magnitude_maps(
    x: &BiTemporalFeatures,
    layers: &[BdamLayerParams],
) -> Result<Vec<Vec<f64>>> {
    let mut maps = Vec::with_capacity(layers.len() + 1);
    let mut cur = x.clone();
    maps.push(token_diff_map(&cur)?);
    for layer in layers {
        cur = bdam_layer_forward(&cur, layer)?;
        maps.push(token_diff_map(&cur)?);
    }
    Ok(maps)
}

fn token_diff_map(x: &BiTemporalFeatures) -> Result<Vec<f64>> {
    let d = x.dim();
    let diff = diff_features(x)?;
    Ok(diff
        .to_vec()
        .chunks(d)
        .map(|row| row.iter().sum::<f64>() / d as f64)
        .collect())
}
