//! The gradient-enhancing intra-class term.
//!
//! For each sample the term is a softplus hinge on the target logit,
//! `Get(z) = (1/α)·ln(1 + e^{α(β − z)})`, with `β = O_p − γ` sitting `γ`
//! below the largest target logit the margin scheme can produce. Each sample
//! is weighted by `1 − P_y`, and the batch by `w_intra = mean(P_y)`. Both
//! weights are treated as constants when differentiating, so the gradient
//! w.r.t. `z` is a weighted sigmoid in `[−1, 0]`.

use crate::error::{Error, Result};
use crate::geometry::Matrix;
use crate::margin::{LossResult, MarginConfig, MarginScheme};
use serde::{Deserialize, Serialize};

/// Largest target logit the scheme can produce (the value at θ = 0).
pub fn optimum_point(config: &MarginConfig) -> Result<f64> {
    let s = config.scale;
    match config.scheme {
        MarginScheme::Plain => Err(Error::UnsupportedScheme("plain")),
        MarginScheme::Norm => Ok(s),
        MarginScheme::MultiplicativeAngular => Ok(s * (0.0 * config.m1 as f64).cos()),
        MarginScheme::AdditiveCosine => Ok(s * (0f64.cos() - config.m2)),
        MarginScheme::AdditiveAngular => Ok(s * (0.0 + config.m3).cos()),
    }
}

/// User-facing IntraLoss hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IntraParams {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for IntraParams {
    fn default() -> Self {
        IntraParams { alpha: 5.0, gamma: 0.9 }
    }
}

/// IntraLoss configuration bound to a particular margin scheme.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntraConfig {
    pub alpha: f64,
    pub gamma: f64,
    pub optimum_point: f64,
    pub beta: f64,
}

impl IntraConfig {
    /// Derives `O_p` and `β = O_p − γ` from the margin configuration. Rebuild
    /// whenever the margin changes.
    pub fn new(params: IntraParams, margin: &MarginConfig) -> Result<Self> {
        if !(params.alpha > 0.0 && params.alpha.is_finite()) {
            return Err(Error::invalid("intra.alpha", format!("must be positive, got {}", params.alpha)));
        }
        if !(params.gamma > 0.0 && params.gamma.is_finite()) {
            return Err(Error::invalid("intra.gamma", format!("must be positive, got {}", params.gamma)));
        }
        let op = optimum_point(margin)?;
        Ok(IntraConfig {
            alpha: params.alpha,
            gamma: params.gamma,
            optimum_point: op,
            beta: op - params.gamma,
        })
    }
}

/// Hard hinge `max(β − z, 0)`. Kept as a reference for the smooth term; its
/// gradient is a constant −1 below β and 0 above, which is why it is not
/// used for training.
pub fn maxout_term(z: f64, config: &IntraConfig) -> f64 {
    (config.beta - z).max(0.0)
}

/// `(1/α)·softplus(α(β − z))`, evaluated without overflow.
pub fn get_term(z: f64, config: &IntraConfig) -> f64 {
    let gap = config.beta - z;
    gap.max(0.0) + (-config.alpha * gap.abs()).exp().ln_1p() / config.alpha
}

/// d Get / dz = −σ(α(β − z)).
pub fn get_gradient(z: f64, config: &IntraConfig) -> f64 {
    -sigmoid(config.alpha * (config.beta - z))
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntraResult {
    pub l_intra: f64,
    pub w_intra: f64,
    pub per_sample_get: Vec<f64>,
    /// ∂L_intra/∂z_i with the weights held fixed, including the 1/n batch mean.
    pub grad_target_logits: Vec<f64>,
}

pub fn intra_forward(target_logits: &[f64], target_probs: &[f64], config: &IntraConfig) -> Result<IntraResult> {
    let n = target_logits.len();
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    if target_probs.len() != n {
        return Err(Error::shape("target_probs", n, target_probs.len()));
    }
    if let Some(&p) = target_probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::Domain {
            what: "target probability",
            value: p,
            domain: "[0, 1]",
        });
    }
    let inv_n = 1.0 / n as f64;
    let w_intra = target_probs.iter().sum::<f64>() * inv_n;
    let per_sample_get: Vec<f64> = target_logits.iter().map(|&z| get_term(z, config)).collect();
    let weighted: f64 = target_probs
        .iter()
        .zip(&per_sample_get)
        .map(|(p, g)| (1.0 - p) * g)
        .sum();
    let grad_target_logits = target_logits
        .iter()
        .zip(target_probs)
        .map(|(&z, &p)| w_intra * (1.0 - p) * get_gradient(z, config) * inv_n)
        .collect();
    Ok(IntraResult {
        l_intra: w_intra * weighted * inv_n,
        w_intra,
        per_sample_get,
        grad_target_logits,
    })
}

/// `L_all = L_s + L_intra` and its gradient w.r.t. the logits.
pub fn combined_forward(base: &LossResult, intra: &IntraResult) -> Result<(f64, Matrix)> {
    let n = base.labels.len();
    if intra.grad_target_logits.len() != n {
        return Err(Error::shape("intra batch", n, intra.grad_target_logits.len()));
    }
    let mut grad = base.grad_logits.clone();
    for (i, (&y, &g)) in base.labels.iter().zip(&intra.grad_target_logits).enumerate() {
        grad.add_at(i, y, g);
    }
    Ok((base.loss + intra.l_intra, grad))
}

/// Gradient w.r.t. the logits when IntraLoss supervises alone.
pub fn intra_only_grad_logits(labels: &[usize], classes: usize, intra: &IntraResult) -> Result<Matrix> {
    if intra.grad_target_logits.len() != labels.len() {
        return Err(Error::shape("intra batch", labels.len(), intra.grad_target_logits.len()));
    }
    let mut grad = Matrix::zeros(labels.len(), classes);
    for (i, (&y, &g)) in labels.iter().zip(&intra.grad_target_logits).enumerate() {
        grad.set(i, y, g);
    }
    Ok(grad)
}
