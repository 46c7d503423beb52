//! Hypersphere classification losses.
//!
//! All margin schemes share the same shape: features and class weights are
//! L2-normalized, every logit is `s·cos θ_j`, and only the target logit is
//! replaced by a scheme-specific function of `cos θ_y`. The plain softmax keeps
//! raw inner products and applies no margin.
//!
//! [`MarginLayer`] holds the forward state so that an arbitrary logit gradient
//! (the softmax gradient, or the softmax gradient plus an extra target-logit
//! term) can be pushed back to features and class weights.

use crate::error::{Error, Result};
use crate::geometry::{clamp_cos, dot, l2_normalize_rows_with_norms, tangent_grad, Matrix};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarginScheme {
    /// Raw inner-product softmax, no normalization.
    Plain,
    /// Normalized softmax, `s·cos θ`.
    Norm,
    /// `s·ψ(θ)`, the monotone surrogate of `s·cos(m1·θ)`.
    MultiplicativeAngular,
    /// `s·(cos θ − m2)`.
    AdditiveCosine,
    /// `s·cos(θ + m3)`.
    AdditiveAngular,
}

impl MarginScheme {
    pub fn name(self) -> &'static str {
        match self {
            MarginScheme::Plain => "plain",
            MarginScheme::Norm => "norm",
            MarginScheme::MultiplicativeAngular => "multiplicative_angular",
            MarginScheme::AdditiveCosine => "additive_cosine",
            MarginScheme::AdditiveAngular => "additive_angular",
        }
    }

    pub fn is_normalized(self) -> bool {
        self != MarginScheme::Plain
    }
}

/// Hyperbolic annealing of the ψ mixing weight λ.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LambdaSchedule {
    pub base: f64,
    pub min: f64,
    pub decay: f64,
}

impl Default for LambdaSchedule {
    fn default() -> Self {
        LambdaSchedule {
            base: 1000.0,
            min: 5.0,
            decay: 0.1,
        }
    }
}

/// `max(min, base / (1 + decay·iteration))`.
pub fn lambda_at(iteration: usize, schedule: &LambdaSchedule) -> f64 {
    (schedule.base / (1.0 + schedule.decay * iteration as f64)).max(schedule.min)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MarginConfig {
    pub scheme: MarginScheme,
    pub scale: f64,
    pub m1: u32,
    pub m2: f64,
    pub m3: f64,
    pub lambda: LambdaSchedule,
}

impl Default for MarginConfig {
    fn default() -> Self {
        MarginConfig {
            scheme: MarginScheme::AdditiveCosine,
            scale: 30.0,
            m1: 4,
            m2: 0.35,
            m3: 0.5,
            lambda: LambdaSchedule::default(),
        }
    }
}

impl MarginConfig {
    pub fn with_scheme(scheme: MarginScheme) -> Self {
        MarginConfig {
            scheme,
            ..MarginConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::invalid("margin.scale", format!("must be positive, got {}", self.scale)));
        }
        if self.m1 < 1 {
            return Err(Error::invalid("margin.m1", "must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.m2) {
            return Err(Error::invalid("margin.m2", format!("must lie in [0, 1), got {}", self.m2)));
        }
        if !(0.0..PI / 2.0).contains(&self.m3) {
            return Err(Error::invalid("margin.m3", format!("must lie in [0, π/2), got {}", self.m3)));
        }
        let l = &self.lambda;
        if !(l.base >= 0.0 && l.min >= 0.0 && l.decay >= 0.0 && l.base.is_finite()) {
            return Err(Error::invalid("margin.lambda", "base, min and decay must be non-negative"));
        }
        Ok(())
    }

    /// Multiplier on non-target cosines (`s`, or 1 for the plain softmax).
    pub fn logit_scale(&self) -> f64 {
        match self.scheme {
            MarginScheme::Plain => 1.0,
            _ => self.scale,
        }
    }
}

fn check_cos(c: f64) -> Result<()> {
    if !(-1.0..=1.0).contains(&c) {
        return Err(Error::Domain {
            what: "cos θ",
            value: c,
            domain: "[-1, 1]",
        });
    }
    Ok(())
}

fn psi_segment(theta: f64, m1: u32) -> u32 {
    let k = (m1 as f64 * theta / PI).floor();
    (k.max(0.0) as u32).min(m1 - 1)
}

/// Monotone surrogate for `cos(m1·θ)` on [0, π], blended with `cos θ` by λ.
pub fn psi(theta: f64, m1: u32, lambda: f64) -> Result<f64> {
    if !(0.0..=PI).contains(&theta) {
        return Err(Error::Domain {
            what: "θ",
            value: theta,
            domain: "[0, π]",
        });
    }
    if m1 < 1 {
        return Err(Error::invalid("m1", "must be at least 1"));
    }
    if !(lambda >= 0.0) {
        return Err(Error::Domain {
            what: "λ",
            value: lambda,
            domain: "[0, ∞)",
        });
    }
    Ok(psi_unchecked(theta, m1, lambda))
}

fn psi_unchecked(theta: f64, m1: u32, lambda: f64) -> f64 {
    let k = psi_segment(theta, m1);
    let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
    (sign * (m1 as f64 * theta).cos() - 2.0 * k as f64 + lambda * theta.cos()) / (1.0 + lambda)
}

/// Chebyshev polynomial of the second kind, `U_n(cos θ) = sin((n+1)θ)/sin θ`.
fn chebyshev_u(n: u32, x: f64) -> f64 {
    let (mut prev, mut cur) = (1.0, 2.0 * x);
    if n == 0 {
        return prev;
    }
    for _ in 1..n {
        let next = 2.0 * x * cur - prev;
        prev = cur;
        cur = next;
    }
    cur
}

/// dψ/d(cos θ). Uses `sin(m1θ)/sin θ = U_{m1−1}(cos θ)`, which stays finite
/// at θ = 0 and θ = π.
fn psi_slope_wrt_cos(cos: f64, m1: u32, lambda: f64) -> f64 {
    let theta = cos.acos();
    let k = psi_segment(theta, m1);
    let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
    (sign * m1 as f64 * chebyshev_u(m1 - 1, cos) + lambda) / (1.0 + lambda)
}

/// Margin-transformed target logit for a given `cos θ_y`.
///
/// `lambda` only matters for the multiplicative scheme.
pub fn target_logit(cos_theta: f64, config: &MarginConfig, lambda: f64) -> Result<f64> {
    check_cos(cos_theta)?;
    Ok(target_logit_unchecked(cos_theta, config, lambda))
}

fn target_logit_unchecked(c: f64, config: &MarginConfig, lambda: f64) -> f64 {
    let s = config.scale;
    match config.scheme {
        MarginScheme::Plain => c,
        MarginScheme::Norm => s * c,
        MarginScheme::MultiplicativeAngular => s * psi_unchecked(c.acos(), config.m1, lambda),
        MarginScheme::AdditiveCosine => s * (c - config.m2),
        MarginScheme::AdditiveAngular => {
            let sin = (1.0 - c * c).max(0.0).sqrt();
            s * (c * config.m3.cos() - sin * config.m3.sin())
        }
    }
}

/// Derivative of [`target_logit`] with respect to `cos θ_y`.
fn target_slope(c: f64, config: &MarginConfig, lambda: f64) -> f64 {
    let s = config.scale;
    match config.scheme {
        MarginScheme::Plain => 1.0,
        MarginScheme::Norm | MarginScheme::AdditiveCosine => s,
        MarginScheme::MultiplicativeAngular => s * psi_slope_wrt_cos(c, config.m1, lambda),
        MarginScheme::AdditiveAngular => {
            // sin θ → 0 makes this blow up, but the normalization Jacobian
            // contributes a matching factor of sin θ downstream.
            let sin = (1.0 - c * c).max(0.0).sqrt().max(1e-12);
            s * (config.m3.cos() + config.m3.sin() * c / sin)
        }
    }
}

/// Left-hand side of the class-1 decision boundary in a two-class problem.
/// Zero on the boundary, positive when class 1 wins.
pub fn decision_boundary_residual(cos_t1: f64, cos_t2: f64, config: &MarginConfig) -> Result<f64> {
    check_cos(cos_t1)?;
    check_cos(cos_t2)?;
    let r = match config.scheme {
        MarginScheme::Plain | MarginScheme::Norm => cos_t1 - cos_t2,
        MarginScheme::MultiplicativeAngular => (config.m1 as f64 * cos_t1.acos()).cos() - cos_t2,
        MarginScheme::AdditiveCosine => (cos_t1 - config.m2) - cos_t2,
        MarginScheme::AdditiveAngular => (cos_t1.acos() + config.m3).cos() - cos_t2,
    };
    Ok(r)
}

/// Softmax cross-entropy statistics for a logit matrix.
#[derive(Debug, Clone)]
pub struct SoftmaxStats {
    pub loss: f64,
    pub probs: Matrix,
    pub target_probs: Vec<f64>,
    /// `(softmax − one_hot) / n`
    pub grad_logits: Matrix,
}

pub fn softmax_cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<SoftmaxStats> {
    let (n, c) = logits.shape();
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    check_labels(labels, n, c)?;
    let mut probs = Matrix::zeros(n, c);
    let mut target_probs = Vec::with_capacity(n);
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|z| (z - max).exp()).sum();
        let lse = max + sum.ln();
        for (p, z) in probs.row_mut(i).iter_mut().zip(row) {
            *p = (z - lse).exp();
        }
        loss += lse - row[y];
        target_probs.push(probs.get(i, y));
    }
    let inv_n = 1.0 / n as f64;
    let mut grad_logits = probs.clone();
    for (i, &y) in labels.iter().enumerate() {
        grad_logits.add_at(i, y, -1.0);
    }
    grad_logits.as_mut_slice().iter_mut().for_each(|g| *g *= inv_n);
    Ok(SoftmaxStats {
        loss: loss * inv_n,
        probs,
        target_probs,
        grad_logits,
    })
}

fn check_labels(labels: &[usize], n: usize, c: usize) -> Result<()> {
    if labels.len() != n {
        return Err(Error::shape("labels", n, labels.len()));
    }
    if let Some((sample, &label)) = labels.iter().enumerate().find(|(_, &y)| y >= c) {
        return Err(Error::LabelOutOfRange {
            sample,
            label,
            classes: c,
        });
    }
    Ok(())
}

/// Forward state of the classification layer for one batch.
#[derive(Debug, Clone)]
pub struct MarginLayer {
    scheme: MarginScheme,
    logit_scale: f64,
    labels: Vec<usize>,
    feats: Matrix,
    feat_norms: Vec<f64>,
    feats_unit: Matrix,
    /// Class weights stored transposed (c×d), one class per row.
    weights_t: Matrix,
    weight_norms: Vec<f64>,
    weights_unit_t: Matrix,
    cos: Matrix,
    target_slopes: Vec<f64>,
    logits: Matrix,
}

impl MarginLayer {
    /// `feats` is n×d, `weights` is d×c with one column per class.
    pub fn new(feats: &Matrix, weights: &Matrix, labels: &[usize], config: &MarginConfig, lambda: f64) -> Result<Self> {
        let (n, d) = feats.shape();
        if weights.rows() != d {
            return Err(Error::shape("class weights", format!("{d} rows"), weights.rows()));
        }
        let c = weights.cols();
        if n == 0 {
            return Err(Error::EmptyBatch);
        }
        check_labels(labels, n, c)?;
        if !(lambda >= 0.0) {
            return Err(Error::Domain {
                what: "λ",
                value: lambda,
                domain: "[0, ∞)",
            });
        }
        let weights_t = weights.transpose();
        let scheme = config.scheme;
        let (feats_unit, feat_norms, weights_unit_t, weight_norms) = if scheme.is_normalized() {
            let (fu, fnorms) = l2_normalize_rows_with_norms(feats)?;
            let (wu, wnorms) = l2_normalize_rows_with_norms(&weights_t)?;
            (fu, fnorms, wu, wnorms)
        } else {
            (feats.clone(), vec![1.0; n], weights_t.clone(), vec![1.0; c])
        };

        let mut cos = Matrix::zeros(n, c);
        for i in 0..n {
            for j in 0..c {
                let v = dot(feats_unit.row(i), weights_unit_t.row(j));
                cos.set(i, j, if scheme.is_normalized() { clamp_cos(v) } else { v });
            }
        }

        let logit_scale = config.logit_scale();
        let mut logits = cos.clone();
        logits.as_mut_slice().iter_mut().for_each(|v| *v *= logit_scale);
        let mut target_slopes = Vec::with_capacity(n);
        for (i, &y) in labels.iter().enumerate() {
            let c_y = cos.get(i, y);
            logits.set(i, y, target_logit_unchecked(c_y, config, lambda));
            target_slopes.push(target_slope(c_y, config, lambda));
        }

        Ok(MarginLayer {
            scheme,
            logit_scale,
            labels: labels.to_vec(),
            feats: feats.clone(),
            feat_norms,
            feats_unit,
            weights_t,
            weight_norms,
            weights_unit_t,
            cos,
            target_slopes,
            logits,
        })
    }

    pub fn logits(&self) -> &Matrix {
        &self.logits
    }

    pub fn cosines(&self) -> &Matrix {
        &self.cos
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn target_logits(&self) -> Vec<f64> {
        self.labels.iter().enumerate().map(|(i, &y)| self.logits.get(i, y)).collect()
    }

    pub fn target_cosines(&self) -> Vec<f64> {
        self.labels.iter().enumerate().map(|(i, &y)| self.cos.get(i, y)).collect()
    }

    /// Pushes a gradient w.r.t. the logits back to `(grad_features n×d,
    /// grad_weights d×c)`.
    pub fn backward(&self, grad_logits: &Matrix) -> Result<(Matrix, Matrix)> {
        grad_logits.same_shape(&self.logits, "grad_logits")?;
        let (n, c) = self.logits.shape();
        let d = self.feats.cols();

        // gradient w.r.t. cosines (or raw inner products for the plain scheme)
        let mut g_cos = grad_logits.clone();
        g_cos.as_mut_slice().iter_mut().for_each(|g| *g *= self.logit_scale);
        for (i, &y) in self.labels.iter().enumerate() {
            g_cos.set(i, y, grad_logits.get(i, y) * self.target_slopes[i]);
        }

        let mut grad_feats_unit = Matrix::zeros(n, d);
        let mut grad_weights_unit_t = Matrix::zeros(c, d);
        for i in 0..n {
            for j in 0..c {
                let g = g_cos.get(i, j);
                if g == 0.0 {
                    continue;
                }
                let f = self.feats_unit.row(i);
                let w = self.weights_unit_t.row(j);
                for k in 0..d {
                    grad_feats_unit.add_at(i, k, g * w[k]);
                    grad_weights_unit_t.add_at(j, k, g * f[k]);
                }
            }
        }

        if !self.scheme.is_normalized() {
            return Ok((grad_feats_unit, grad_weights_unit_t.transpose()));
        }

        let mut grad_feats = Matrix::zeros(n, d);
        for i in 0..n {
            let g = tangent_grad(self.feats.row(i), self.feat_norms[i], grad_feats_unit.row(i));
            grad_feats.row_mut(i).copy_from_slice(&g);
        }
        let mut grad_weights_t = Matrix::zeros(c, d);
        for j in 0..c {
            let g = tangent_grad(self.weights_t.row(j), self.weight_norms[j], grad_weights_unit_t.row(j));
            grad_weights_t.row_mut(j).copy_from_slice(&g);
        }
        Ok((grad_feats, grad_weights_t.transpose()))
    }
}

/// Result of a margin-softmax forward/backward pass over one batch.
#[derive(Debug, Clone)]
pub struct LossResult {
    pub loss: f64,
    pub labels: Vec<usize>,
    pub logits: Matrix,
    pub target_logits: Vec<f64>,
    /// Target-class probability under the margin-modified logits.
    pub target_probs: Vec<f64>,
    pub grad_logits: Matrix,
    pub grad_features: Matrix,
    pub grad_weights: Matrix,
}

/// Mean cross-entropy of the margin-modified logits, with gradients w.r.t.
/// the raw (unnormalized) features and class weights.
pub fn forward(
    feats: &Matrix,
    weights: &Matrix,
    labels: &[usize],
    config: &MarginConfig,
    lambda_now: f64,
) -> Result<LossResult> {
    config.validate()?;
    let layer = MarginLayer::new(feats, weights, labels, config, lambda_now)?;
    let stats = softmax_cross_entropy(layer.logits(), labels)?;
    let (grad_features, grad_weights) = layer.backward(&stats.grad_logits)?;
    Ok(LossResult {
        loss: stats.loss,
        labels: labels.to_vec(),
        target_logits: layer.target_logits(),
        logits: layer.logits,
        target_probs: stats.target_probs,
        grad_logits: stats.grad_logits,
        grad_features,
        grad_weights,
    })
}
