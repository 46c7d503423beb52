//! Finite-difference verification of every parameter gradient.

use super::{evaluate, Backbone, Batch, Objective, TrainConfig};
use crate::error::Result;
use crate::geometry::Matrix;
use crate::margin::{MarginLayer, MarginScheme};
use serde::Serialize;
use std::f64::consts::PI;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckOptions {
    /// Central-difference step.
    pub step: f64,
    pub tolerance: f64,
    /// Gradients smaller than this are compared on an absolute scale.
    pub abs_floor: f64,
    /// Samples whose target cosine (or ψ segment boundary) lies within this
    /// distance of a kink are dropped from the batch.
    pub kink_radius: f64,
    /// Scale the analytic gradient by `1 + 1e-3`; a negative control.
    pub corrupt: bool,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            step: 1e-6,
            tolerance: 1e-5,
            abs_floor: 1e-2,
            kink_radius: 1e-4,
            corrupt: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckEntry {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst: Option<GradcheckEntry>,
    /// Batch positions dropped as non-smooth points.
    pub skipped_samples: Vec<usize>,
    pub passed: bool,
}

/// Batch positions whose target logit sits on a non-differentiable point.
fn non_smooth_samples(backbone: &Backbone, weights: &Matrix, batch: &Batch, cfg: &TrainConfig, radius: f64) -> Result<Vec<usize>> {
    if !cfg.margin.scheme.is_normalized() {
        return Ok(Vec::new());
    }
    let feats = backbone.forward(batch)?.features;
    let layer = MarginLayer::new(&feats, weights, &batch.labels, &cfg.margin, 0.0)?;
    let m1 = cfg.margin.m1 as f64;
    Ok(layer
        .target_cosines()
        .iter()
        .enumerate()
        .filter(|(_, &c)| {
            if c.abs() > 1.0 - radius {
                return true;
            }
            if cfg.margin.scheme == MarginScheme::MultiplicativeAngular {
                let theta = c.acos();
                let nearest = (theta * m1 / PI).round() * PI / m1;
                return (theta - nearest).abs() < radius;
            }
            false
        })
        .map(|(i, _)| i)
        .collect())
}

/// Compares analytic gradients of the full objective (`L_s`, plus `L_intra`
/// when configured) w.r.t. every backbone parameter and every class weight
/// against central differences. The IntraLoss weights are frozen at the
/// unperturbed point on both sides.
pub fn gradcheck(
    backbone: &Backbone,
    weights: &Matrix,
    batch: &Batch,
    cfg: &TrainConfig,
    opts: &GradcheckOptions,
) -> Result<GradcheckReport> {
    let skipped = non_smooth_samples(backbone, weights, batch, cfg, opts.kink_radius)?;
    let batch = batch.without(&skipped);
    let mut report = GradcheckReport {
        checked: 0,
        max_rel_error: 0.0,
        worst: None,
        skipped_samples: skipped,
        passed: true,
    };
    if batch.is_empty() {
        return Ok(report);
    }

    let objective = match cfg.intra_config()? {
        Some(c) => Objective::Joint(c),
        None => Objective::Base,
    };
    let lambda = cfg.margin.lambda.min;
    let base = evaluate(backbone, weights, &batch, &cfg.margin, lambda, &objective, None)?;
    let frozen = base.frozen.clone();
    let value = |b: &Backbone, w: &Matrix| -> Result<f64> {
        Ok(evaluate(b, w, &batch, &cfg.margin, lambda, &objective, Some(&frozen))?.objective)
    };

    let corrupt = if opts.corrupt { 1.0 + 1e-3 } else { 1.0 };
    let mut record = |param: &str, index: usize, analytic: f64, numeric: f64| {
        let analytic = analytic * corrupt;
        let denom = analytic.abs().max(numeric.abs()).max(opts.abs_floor);
        let rel_error = (analytic - numeric).abs() / denom;
        report.checked += 1;
        if rel_error > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = rel_error.max(report.max_rel_error);
            report.worst = Some(GradcheckEntry {
                param: param.to_string(),
                index,
                analytic,
                numeric,
                rel_error,
            });
        }
    };

    let names = backbone.param_names();
    for (p, name) in names.iter().enumerate() {
        let analytic = &base.backbone_grads[p];
        // the lookup table only receives gradient on rows in the batch
        let indices: Vec<usize> = match backbone {
            Backbone::LookupTable { table } => {
                let mut rows = batch.ids.clone();
                rows.sort_unstable();
                rows.dedup();
                rows.iter().flat_map(|&r| (r * table.cols())..((r + 1) * table.cols())).collect()
            }
            Backbone::Mlp { .. } => (0..analytic.as_slice().len()).collect(),
        };
        for idx in indices {
            let mut plus = backbone.clone();
            plus.params_mut()[p].as_mut_slice()[idx] += opts.step;
            let mut minus = backbone.clone();
            minus.params_mut()[p].as_mut_slice()[idx] -= opts.step;
            let numeric = (value(&plus, weights)? - value(&minus, weights)?) / (2.0 * opts.step);
            record(name, idx, analytic.as_slice()[idx], numeric);
        }
    }
    for idx in 0..weights.as_slice().len() {
        let mut plus = weights.clone();
        plus.as_mut_slice()[idx] += opts.step;
        let mut minus = weights.clone();
        minus.as_mut_slice()[idx] -= opts.step;
        let numeric = (value(backbone, &plus)? - value(backbone, &minus)?) / (2.0 * opts.step);
        record("class_weights", idx, base.weight_grad.as_slice()[idx], numeric);
    }

    report.passed = report.max_rel_error < opts.tolerance;
    Ok(report)
}
