//! Geometry of trained embeddings: per-class radii and anisotropy, class
//! separation, pair verification and per-sample dumps.

mod sphere;
mod stats;
mod verification;

pub use sphere::{sphere_dump, SphereDump, SphereRow};
pub use stats::{anisotropy_index, class_statistics, percentile, separation, ClassStats, Separation, ANISOTROPY_RIDGE};
pub use verification::{fold_of, pair_scores, ten_fold_accuracy, verification_accuracy, VerificationResult, FOLDS};

use crate::data::Pair;
use crate::error::Result;
use crate::geometry::Matrix;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalStats {
    pub min_interclass_mean_angle_rad: f64,
    pub margin_proxy_rad: f64,
    pub mean_p95_radius_rad: f64,
    pub mean_anisotropy_index: f64,
    pub verification_accuracy: f64,
    pub best_threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionReport {
    pub per_class: Vec<ClassStats>,
    pub global: GlobalStats,
}

/// Full report for one set of embeddings. `pairs` index rows of `embeddings`.
pub fn distribution_report(embeddings: &Matrix, labels: &[usize], pairs: &[Pair]) -> Result<DistributionReport> {
    let per_class = class_statistics(embeddings, labels)?;
    let sep = separation(&per_class);
    let ver = verification_accuracy(embeddings, pairs)?;
    let k = per_class.len().max(1) as f64;
    Ok(DistributionReport {
        global: GlobalStats {
            min_interclass_mean_angle_rad: sep.min_interclass_mean_angle_rad,
            margin_proxy_rad: sep.margin_proxy_rad,
            mean_p95_radius_rad: per_class.iter().map(|c| c.angular_radius_p95_rad).sum::<f64>() / k,
            mean_anisotropy_index: per_class.iter().map(|c| c.anisotropy_index).sum::<f64>() / k,
            verification_accuracy: ver.accuracy,
            best_threshold: ver.best_threshold,
        },
        per_class,
    })
}

impl DistributionReport {
    pub fn p95_radii(&self) -> Vec<f64> {
        self.per_class.iter().map(|c| c.angular_radius_p95_rad).collect()
    }
}
