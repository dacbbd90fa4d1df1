//! Multi-head self-attention branch: per-pixel attention over a feature map,
//! attention-weighted head embeddings, identity feature regularization,
//! softmax feature fusion, and residual learning against the global feature.

use crate::autodiff::{Axis, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Shape bundle for the branch. `hidden` is the attention bottleneck width
/// (paper: 512 for C = 2048, i.e. C/4).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BranchDims {
    pub j: usize,
    pub c: usize,
    pub d: usize,
    pub k: usize,
    pub hidden: usize,
}

impl BranchDims {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.j == 0 || self.c == 0 || self.d == 0 || self.hidden == 0 {
            return Err(Error::Config("branch dimensions must be positive".into()));
        }
        if self.k > self.j {
            return Err(Error::Config(format!(
                "head count K={} exceeds pixel count J={}",
                self.k, self.j
            )));
        }
        if (self.d * self.k) % 8 != 0 {
            return Err(Error::Config(format!(
                "D*K = {} must be divisible by 8 for the fusion widths (DK -> DK/4 -> DK/8 -> K)",
                self.d * self.k
            )));
        }
        Ok(())
    }

    /// Fusion MLP widths follow the DK -> DK/4 -> DK/8 -> K ratio.
    pub fn fusion_widths(&self) -> (usize, usize, usize) {
        let dk = self.d * self.k;
        (dk, dk / 4, dk / 8)
    }
}

/// Learnable parameters of the branch as plain tensors.
/// Order is fixed; `FIELDS` names them for checkpointing and optimizers.
#[derive(Debug, Clone)]
pub struct BranchParams {
    pub w1: Tensor,
    pub w2: Tensor,
    pub w3: Tensor,
    pub b3: Tensor,
    pub w4: Tensor,
    pub w5: Tensor,
    pub w6: Tensor,
    pub ln_z_gain: Tensor,
    pub ln_z_bias: Tensor,
    pub ln_p_gain: Tensor,
    pub ln_p_bias: Tensor,
}

pub const FIELDS: [&str; 11] = [
    "w1", "w2", "w3", "b3", "w4", "w5", "w6", "ln_z_gain", "ln_z_bias", "ln_p_gain", "ln_p_bias",
];

impl BranchParams {
    /// Fan-in-scaled Gaussian init: sqrt(2/fan_in) ahead of a ReLU, sqrt(1/fan_in)
    /// elsewhere, zero biases, unit layer-norm gains.
    pub fn init(dims: &BranchDims, rng: &mut Rng) -> Self {
        let (dk, h1, h2) = dims.fusion_widths();
        let he = |fan_in: usize| (2.0 / fan_in as f64).sqrt();
        let xavier = |fan_in: usize| (1.0 / fan_in as f64).sqrt();
        BranchParams {
            w1: Tensor::randn(&[dims.hidden, dims.c], he(dims.c), rng),
            w2: Tensor::randn(&[dims.k, dims.hidden], xavier(dims.hidden), rng),
            w3: Tensor::randn(&[dims.c, dims.d], xavier(dims.c), rng),
            b3: Tensor::zeros(&[1, dims.d]),
            w4: Tensor::randn(&[dk, h1], he(dk), rng),
            w5: Tensor::randn(&[h1, h2], he(h1), rng),
            w6: Tensor::randn(&[h2, dims.k], xavier(h2), rng),
            ln_z_gain: Tensor::full(&[1, dims.d], 1.0),
            ln_z_bias: Tensor::zeros(&[1, dims.d]),
            ln_p_gain: Tensor::full(&[1, dims.d], 1.0),
            ln_p_bias: Tensor::zeros(&[1, dims.d]),
        }
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        vec![
            self.w1.clone(),
            self.w2.clone(),
            self.w3.clone(),
            self.b3.clone(),
            self.w4.clone(),
            self.w5.clone(),
            self.w6.clone(),
            self.ln_z_gain.clone(),
            self.ln_z_bias.clone(),
            self.ln_p_gain.clone(),
            self.ln_p_bias.clone(),
        ]
    }
}

/// The branch parameters registered on a tape.
#[derive(Debug, Clone, Copy)]
pub struct BranchVars {
    pub w1: Var,
    pub w2: Var,
    pub w3: Var,
    pub b3: Var,
    pub w4: Var,
    pub w5: Var,
    pub w6: Var,
    pub ln_z_gain: Var,
    pub ln_z_bias: Var,
    pub ln_p_gain: Var,
    pub ln_p_bias: Var,
}

impl BranchVars {
    pub fn from_slice(vars: &[Var]) -> Self {
        assert_eq!(vars.len(), FIELDS.len());
        BranchVars {
            w1: vars[0],
            w2: vars[1],
            w3: vars[2],
            b3: vars[3],
            w4: vars[4],
            w5: vars[5],
            w6: vars[6],
            ln_z_gain: vars[7],
            ln_z_bias: vars[8],
            ln_p_gain: vars[9],
            ln_p_bias: vars[10],
        }
    }

    pub fn register(tape: &mut Tape, params: &BranchParams, requires_grad: bool) -> Result<Self> {
        let vars: Vec<Var> = params
            .tensors()
            .into_iter()
            .map(|t| tape.leaf(t, requires_grad))
            .collect::<Result<_>>()?;
        Ok(Self::from_slice(&vars))
    }
}

pub const LN_EPS: f64 = 1e-5;

/// Per-pixel attention over the K heads:
/// alpha = softmax over K of (ReLU(w1 Q^T))^T w2^T, one row per pixel.
pub fn attention_weights(tape: &mut Tape, q: Var, params: &BranchVars, k: usize) -> Result<Var> {
    let (j, _) = tape.value(q).dims2()?;
    if k > j {
        return Err(Error::Config(format!(
            "head count K={k} exceeds pixel count J={j}"
        )));
    }
    let qt = tape.transpose(q)?; // [C, J]
    let hidden = tape.matmul(params.w1, qt)?; // [H', J]
    let act = tape.relu(hidden)?;
    let act_t = tape.transpose(act)?; // [J, H']
    let w2t = tape.transpose(params.w2)?; // [H', K]
    let logits = tape.matmul(act_t, w2t)?; // [J, K]
    tape.softmax_rows(logits)
}

/// K attention-weighted embeddings: P = (alpha^T Q) w3 + b3, one row per head.
pub fn head_embeddings(tape: &mut Tape, alpha: Var, q: Var, params: &BranchVars) -> Result<Var> {
    let (_, k) = tape.value(alpha).dims2()?;
    let alpha_t = tape.transpose(alpha)?; // [K, J]
    let pooled = tape.matmul(alpha_t, q)?; // [K, C]
    let projected = tape.matmul(pooled, params.w3)?; // [K, D]
    let bias = tape.repeat_row(params.b3, k)?;
    tape.add(projected, bias)
}

/// The regularization module's data path is the identity; its effect is
/// carried entirely by the diversity and triplet loss terms.
pub fn frm_transform(_tape: &mut Tape, p: Var) -> Var {
    p
}

/// Fusion weights and fused feature:
/// beta = softmax(ReLU(flat(P) w4 w5) w6), p* = layer_norm(beta P).
/// w4 and w5 compose with no intervening nonlinearity.
pub fn saffm_fuse(tape: &mut Tape, p_perp: Var, params: &BranchVars) -> Result<(Var, Var)> {
    let (k, d) = tape.value(p_perp).dims2()?;
    let flat = tape.reshape(p_perp, &[1, k * d])?;
    let h1 = tape.matmul(flat, params.w4)?;
    let h2 = tape.matmul(h1, params.w5)?;
    let act = tape.relu(h2)?;
    let logits = tape.matmul(act, params.w6)?; // [1, K]
    let beta = tape.softmax_rows(logits)?;
    let mixed = tape.matmul(beta, p_perp)?; // [1, D]
    let p_star = tape.layer_norm(mixed, params.ln_p_gain, params.ln_p_bias, LN_EPS)?;
    Ok((beta, p_star))
}

/// Residual learning: Z = layer_norm(broadcast(q*) + P_perp) row-wise,
/// z = sum of Z's K rows.
pub fn residual_learn(
    tape: &mut Tape,
    q_star: Var,
    p_perp: Var,
    params: &BranchVars,
) -> Result<(Var, Var)> {
    let (k, d) = tape.value(p_perp).dims2()?;
    let (one, dq) = tape.value(q_star).dims2()?;
    if one != 1 || dq != d {
        return Err(Error::Dim(format!(
            "residual_learn expects q* as [1,{d}], got {:?}",
            tape.value(q_star).shape()
        )));
    }
    let broadcast = tape.repeat_row(q_star, k)?;
    let summed = tape.add(broadcast, p_perp)?;
    let z_mat = tape.layer_norm(summed, params.ln_z_gain, params.ln_z_bias, LN_EPS)?;
    let z = tape.sum_axis(z_mat, Axis::Rows)?;
    Ok((z_mat, z))
}

/// How the K head embeddings collapse into the matching feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionMode {
    Saffm,
    Concat,
    Sum,
}

impl FusionMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "saffm" => Ok(FusionMode::Saffm),
            "concat" => Ok(FusionMode::Concat),
            "sum" => Ok(FusionMode::Sum),
            other => Err(Error::Config(format!(
                "unknown fusion mode '{other}' (expected saffm|concat|sum)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            FusionMode::Saffm => "saffm",
            FusionMode::Concat => "concat",
            FusionMode::Sum => "sum",
        }
    }

    /// Length of the fused local feature.
    pub fn feature_len(&self, d: usize, k: usize) -> usize {
        match self {
            FusionMode::Saffm | FusionMode::Sum => d,
            FusionMode::Concat => d * k,
        }
    }
}

/// Ablation fusion: saffm delegates to `saffm_fuse`, concat flattens the
/// heads, sum collapses them column-wise.
pub fn fuse_variant(
    tape: &mut Tape,
    p_perp: Var,
    mode: FusionMode,
    params: &BranchVars,
) -> Result<Var> {
    let (k, d) = tape.value(p_perp).dims2()?;
    match mode {
        FusionMode::Saffm => saffm_fuse(tape, p_perp, params).map(|(_, p_star)| p_star),
        FusionMode::Concat => tape.reshape(p_perp, &[1, k * d]),
        FusionMode::Sum => tape.sum_axis(p_perp, Axis::Rows),
    }
}

/// Everything a single image's branch pass produces.
pub struct BranchOutput {
    pub alpha: Var,
    pub heads: Var,
    pub p_perp: Var,
    pub beta: Option<Var>,
    pub fused: Var,
    pub z_mat: Option<Var>,
    pub z: Option<Var>,
}

/// Composed branch forward for one image with the default fusion.
pub fn forward_branch(
    tape: &mut Tape,
    q: Var,
    q_star: Var,
    params: &BranchVars,
    k: usize,
    rlm_enabled: bool,
) -> Result<BranchOutput> {
    forward_branch_with(tape, q, q_star, params, k, FusionMode::Saffm, rlm_enabled)
}

pub fn forward_branch_with(
    tape: &mut Tape,
    q: Var,
    q_star: Var,
    params: &BranchVars,
    k: usize,
    fusion: FusionMode,
    rlm_enabled: bool,
) -> Result<BranchOutput> {
    let alpha = attention_weights(tape, q, params, k)?;
    let heads = head_embeddings(tape, alpha, q, params)?;
    let p_perp = frm_transform(tape, heads);
    let (beta, fused) = match fusion {
        FusionMode::Saffm => {
            let (beta, p_star) = saffm_fuse(tape, p_perp, params)?;
            (Some(beta), p_star)
        }
        other => (None, fuse_variant(tape, p_perp, other, params)?),
    };
    let (z_mat, z) = if rlm_enabled {
        let (z_mat, z) = residual_learn(tape, q_star, p_perp, params)?;
        (Some(z_mat), Some(z))
    } else {
        (None, None)
    };
    Ok(BranchOutput { alpha, heads, p_perp, beta, fused, z_mat, z })
}
