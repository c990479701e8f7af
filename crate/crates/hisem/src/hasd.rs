//! Hierarchical semantic routing: a coarse image-level changed/unchanged
//! router followed, on the changed path, by token-level group-constrained
//! mixture-of-experts dispatch. The unchanged path uses a plain FFN.

use rand_chacha::ChaCha8Rng;

use crate::bdam::BiTemporalFeatures;
use crate::error::{HisemError, Result};
use crate::nn::{Conv3x3, Linear};
use crate::tensor::{top_k, Tensor};

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum RoutePath {
    Unchanged = 0,
    Changed = 1,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum RouteSource {
    Predicted,
    GroundTruth,
}

/// Outcome of image- and token-level routing for one sample.
#[derive(Clone, Debug)]
pub struct RoutingDecision {
    pub path: RoutePath,
    /// Softmax over the two image-level logits.
    pub path_probs: Tensor,
    /// Per-token (expert index, weight) pairs; empty on the unchanged path.
    pub token_experts: Vec<Vec<(usize, f64)>>,
    pub source: RouteSource,
}

/// Sizing and sparsity knobs for the token-level expert layer.
#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct MoEConfig {
    pub num_experts: usize,
    pub num_groups: usize,
    pub groups_topk: usize,
    pub experts_topk: usize,
    pub num_shared_experts: usize,
    pub expert_hidden_dim: usize,
}

impl Default for MoEConfig {
    fn default() -> MoEConfig {
        MoEConfig {
            num_experts: 8,
            num_groups: 4,
            groups_topk: 2,
            experts_topk: 2,
            num_shared_experts: 1,
            expert_hidden_dim: 128,
        }
    }
}

impl MoEConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(HisemError::InvalidArgument(msg));
        if self.num_experts == 0 || self.num_groups == 0 {
            return bad("moe config: experts and groups must be nonzero".into());
        }
        if self.num_experts % self.num_groups != 0 {
            return bad(format!(
                "moe config: {} experts not divisible into {} groups",
                self.num_experts, self.num_groups
            ));
        }
        if self.groups_topk == 0 || self.groups_topk > self.num_groups {
            return bad(format!(
                "moe config: groups_topk {} out of range for {} groups",
                self.groups_topk, self.num_groups
            ));
        }
        let reachable = self.groups_topk * (self.num_experts / self.num_groups);
        if self.experts_topk == 0 || self.experts_topk > reachable {
            return bad(format!(
                "moe config: experts_topk {} exceeds {} reachable experts",
                self.experts_topk, reachable
            ));
        }
        Ok(())
    }
}

/// SwiGLU feed-forward: (SiLU(x W_gate) ⊙ x W_up) W_down.
#[derive(Clone)]
pub struct SwiGlu {
    pub gate: Linear,
    pub up: Linear,
    pub down: Linear,
}

impl SwiGlu {
    pub fn new(rng: &mut ChaCha8Rng, d: usize, hidden: usize) -> SwiGlu {
        SwiGlu {
            gate: Linear::new(rng, d, hidden, true),
            up: Linear::new(rng, d, hidden, true),
            down: Linear::new(rng, hidden, d, true),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let g = self.gate.forward(x)?.silu();
        let u = self.up.forward(x)?;
        self.down.forward(&g.mul(&u)?)
    }

    pub fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.gate.params(&format!("{prefix}.gate"), out);
        self.up.params(&format!("{prefix}.up"), out);
        self.down.params(&format!("{prefix}.down"), out);
    }
}

/// Fuses the two temporal streams into one token grid.
#[derive(Clone)]
pub struct FusionBlock {
    /// 1x1 conv over channels, realized as a per-token projection 2D→D.
    pub proj: Linear,
    pub conv: Conv3x3,
}

impl FusionBlock {
    pub fn new(rng: &mut ChaCha8Rng, d: usize) -> FusionBlock {
        FusionBlock {
            proj: Linear::new(rng, 2 * d, d, true),
            conv: Conv3x3::new(rng, d, d),
        }
    }

    pub fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.proj.params(&format!("{prefix}.proj"), out);
        self.conv.params(&format!("{prefix}.conv"), out);
    }
}

/// Every parameter of the routing stage.
#[derive(Clone)]
pub struct HasdParams {
    /// Image-level router, D→2, no bias.
    pub w_g: Tensor,
    pub fusion: FusionBlock,
    /// Token-level expert scorer, D→E, no bias.
    pub w_c: Tensor,
    pub experts: Vec<SwiGlu>,
    pub shared: Vec<SwiGlu>,
    pub ffn_w1: Linear,
    pub ffn_w2: Linear,
    pub cfg: MoEConfig,
}

impl HasdParams {
    pub fn new(rng: &mut ChaCha8Rng, d: usize, cfg: MoEConfig) -> Result<HasdParams> {
        cfg.validate()?;
        Ok(HasdParams {
            w_g: crate::nn::init_uniform(rng, &[d, 2], d),
            fusion: FusionBlock::new(rng, d),
            w_c: crate::nn::init_uniform(rng, &[d, cfg.num_experts], d),
            experts: (0..cfg.num_experts)
                .map(|_| SwiGlu::new(rng, d, cfg.expert_hidden_dim))
                .collect(),
            shared: (0..cfg.num_shared_experts)
                .map(|_| SwiGlu::new(rng, d, cfg.expert_hidden_dim))
                .collect(),
            ffn_w1: Linear::new(rng, d, cfg.expert_hidden_dim, true),
            ffn_w2: Linear::new(rng, cfg.expert_hidden_dim, d, true),
            cfg,
        })
    }

    pub fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.w_g"), self.w_g.clone()));
        self.fusion.params(&format!("{prefix}.fusion"), out);
        out.push((format!("{prefix}.w_c"), self.w_c.clone()));
        for (i, e) in self.experts.iter().enumerate() {
            e.params(&format!("{prefix}.expert{i}"), out);
        }
        for (i, e) in self.shared.iter().enumerate() {
            e.params(&format!("{prefix}.shared{i}"), out);
        }
        self.ffn_w1.params(&format!("{prefix}.ffn_w1"), out);
        self.ffn_w2.params(&format!("{prefix}.ffn_w2"), out);
    }
}

/// Pools the temporal difference into one vector and scores the two paths.
/// Ties resolve to unchanged (index 0). The top-1 route weight renormalizes
/// to exactly 1, so confidence never attenuates downstream features.
pub fn image_level_route(
    x: &BiTemporalFeatures,
    w_g: &Tensor,
) -> Result<(Tensor, RoutingDecision)> {
    let gap = x.f_t2.sub(&x.f_t1)?.mean_rows()?;
    let logits = gap.matmul(w_g)?;
    let probs = logits.softmax_lastdim();
    let lv = logits.to_vec();
    let path = if lv[1] > lv[0] {
        RoutePath::Changed
    } else {
        RoutePath::Unchanged
    };
    Ok((
        logits,
        RoutingDecision {
            path,
            path_probs: probs,
            token_experts: Vec::new(),
            source: RouteSource::Predicted,
        },
    ))
}

/// Cross-entropy of the image-level route against the change label.
pub fn routing_loss(logits: &Tensor, label: usize) -> Result<Tensor> {
    if label > 1 {
        return Err(HisemError::InvalidArgument(format!(
            "routing label {label} not in {{0,1}}"
        )));
    }
    logits.cross_entropy_sum(&[label], &[1.0])
}

/// Concat → 1x1 conv → 3x3 conv with residual → ReLU.
pub fn fusion_block(x: &BiTemporalFeatures, p: &FusionBlock) -> Result<Tensor> {
    let cat = x.f_t1.concat_cols(&x.f_t2)?;
    let z = p.proj.forward(&cat)?;
    let y = z.add(&p.conv.forward_tokens(&z, x.grid)?)?;
    Ok(y.relu())
}

/// Per-token expert affinities in (0,1).
pub fn expert_scores(f_h: &Tensor, w_c: &Tensor) -> Result<Tensor> {
    Ok(f_h.matmul(w_c)?.sigmoid())
}

/// Two-stage sparse selection: max-pool scores within each contiguous
/// group, keep the top-k_g groups, then take the top-k experts among the
/// survivors. Weights are the chosen scores normalized to sum 1. All ties
/// break toward the lower index.
pub fn group_constrained_select(
    s: &Tensor,
    cfg: &MoEConfig,
) -> Result<Vec<Vec<(usize, f64)>>> {
    cfg.validate()?;
    let shape = s.shape();
    if shape.len() != 2 || shape[1] != cfg.num_experts {
        return Err(HisemError::InvalidArgument(format!(
            "group_constrained_select: scores shape {shape:?} does not match E={}",
            cfg.num_experts
        )));
    }
    let (l, e) = (shape[0], shape[1]);
    let per_group = e / cfg.num_groups;
    let data = s.to_vec();
    let mut out = Vec::with_capacity(l);
    for row in data.chunks(e) {
        let group_scores: Vec<f64> = (0..cfg.num_groups)
            .map(|g| {
                row[g * per_group..(g + 1) * per_group]
                    .iter()
                    .cloned()
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect();
        let picked_groups = top_k(&group_scores, cfg.groups_topk)?;
        let mut masked = vec![f64::NEG_INFINITY; e];
        for &(g, _) in &picked_groups {
            masked[g * per_group..(g + 1) * per_group]
                .copy_from_slice(&row[g * per_group..(g + 1) * per_group]);
        }
        let mut chosen = top_k(&masked, cfg.experts_topk)?;
        let total: f64 = chosen.iter().map(|&(_, v)| v).sum();
        for c in &mut chosen {
            c.1 /= total;
        }
        out.push(chosen);
    }
    Ok(out)
}

/// Sparse expert mixture plus the always-on shared experts. The routing
/// weights are re-read from `scores` as graph nodes so the scorer trains
/// through them; `routing` supplies the selection and is checked against
/// the normalization constraint.
pub fn moe_forward(
    f_h: &Tensor,
    scores: &Tensor,
    routing: &[Vec<(usize, f64)>],
    p: &HasdParams,
) -> Result<Tensor> {
    let l = f_h.shape()[0];
    let d = f_h.shape()[1];
    if routing.len() != l {
        return Err(HisemError::InvalidArgument(format!(
            "moe_forward: {} routing rows for {} tokens",
            routing.len(),
            l
        )));
    }
    let mut rows: Option<Tensor> = None;
    for (n, picks) in routing.iter().enumerate() {
        let wsum: f64 = picks.iter().map(|&(_, w)| w).sum();
        if (wsum - 1.0).abs() > 1e-6 {
            return Err(HisemError::InvalidArgument(format!(
                "moe_forward: token {n} weights sum to {wsum}, expected 1"
            )));
        }
        let x = f_h.slice_rows(n, 1)?;
        let srow = scores.slice_rows(n, 1)?;
        // Renormalize the selected raw scores inside the graph.
        let mut raw: Option<Tensor> = None;
        for &(e, _) in picks {
            let v = srow.slice_col(e)?;
            raw = Some(match raw {
                Some(r) => r.concat_cols(&v)?,
                None => v,
            });
        }
        let raw = raw.ok_or_else(|| {
            HisemError::InvalidArgument(format!("moe_forward: token {n} selects no experts"))
        })?;
        let alpha = raw.div_colvec(&raw.sum_lastdim()?)?;
        let mut y: Option<Tensor> = None;
        for (j, &(e, _)) in picks.iter().enumerate() {
            let term = p.experts[e].forward(&x)?.mul_scalar_t(&alpha.slice_col(j)?)?;
            y = Some(match y {
                Some(acc) => acc.add(&term)?,
                None => term,
            });
        }
        let mut y = y.unwrap();
        for s in &p.shared {
            y = y.add(&s.forward(&x)?)?;
        }
        rows = Some(match rows {
            Some(r) => r.concat_cols(&y)?,
            None => y,
        });
    }
    rows.unwrap().reshape(&[l, d])
}

/// Residual two-layer ReLU FFN for the unchanged path.
pub fn unchanged_path_ffn(f_h: &Tensor, p: &HasdParams) -> Result<Tensor> {
    let h = p.ffn_w1.forward(f_h)?.relu();
    f_h.add(&p.ffn_w2.forward(&h)?)
}

/// Full routing stage: image-level route (optionally overridden by a
/// ground-truth label), fusion, then path-specific token processing.
pub fn hasd_forward(
    x: &BiTemporalFeatures,
    p: &HasdParams,
    routing_override: Option<usize>,
) -> Result<(Tensor, RoutingDecision, Tensor)> {
    let (logits, mut decision) = image_level_route(x, &p.w_g)?;
    if let Some(label) = routing_override {
        if label > 1 {
            return Err(HisemError::InvalidArgument(format!(
                "routing override {label} not in {{0,1}}"
            )));
        }
        decision.path = if label == 1 {
            RoutePath::Changed
        } else {
            RoutePath::Unchanged
        };
        decision.source = RouteSource::GroundTruth;
    }
    let f_h = fusion_block(x, &p.fusion)?;
    let out = match decision.path {
        RoutePath::Changed => {
            let s = expert_scores(&f_h, &p.w_c)?;
            let routing = group_constrained_select(&s, &p.cfg)?;
            let y = moe_forward(&f_h, &s, &routing, p)?;
            decision.token_experts = routing;
            y
        }
        RoutePath::Unchanged => unchanged_path_ffn(&f_h, p)?,
    };
    Ok((out, decision, logits))
}
