use crate::error::{Error, Result};
use crate::geometry::{dot, l2_normalize_rows, norm, unit_angle, Matrix, UnitVector};
use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

/// Added to the tangent covariance diagonal before taking the eigen-ratio.
pub const ANISOTROPY_RIDGE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub class: usize,
    pub count: usize,
    pub mean_direction: UnitVector,
    pub angular_radius_p50_rad: f64,
    pub angular_radius_p95_rad: f64,
    pub anisotropy_index: f64,
}

/// Linear-interpolation percentile of an ascending slice, `q` in [0, 1].
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn mean_direction(rows: &[&[f64]], class: usize) -> Result<UnitVector> {
    let d = rows[0].len();
    let mut mean = vec![0.0; d];
    for r in rows {
        mean.iter_mut().zip(r.iter()).for_each(|(m, x)| *m += x);
    }
    mean.iter_mut().for_each(|m| *m /= rows.len() as f64);
    let n = norm(&mean);
    if n < 1e-9 {
        return Err(Error::DegenerateClass { class, norm: n });
    }
    UnitVector::normalize(&mean)
}

/// Orthonormal basis of the hyperplane orthogonal to `mu`.
fn tangent_basis(mu: &[f64]) -> Vec<Vec<f64>> {
    let d = mu.len();
    let drop = (0..d)
        .max_by(|&a, &b| mu[a].abs().total_cmp(&mu[b].abs()))
        .unwrap_or(0);
    let mut basis: Vec<Vec<f64>> = vec![mu.to_vec()];
    for j in (0..d).filter(|&j| j != drop) {
        let mut v = vec![0.0; d];
        v[j] = 1.0;
        for b in &basis {
            let p = dot(&v, b);
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
        let n = norm(&v);
        v.iter_mut().for_each(|x| *x /= n);
        basis.push(v);
    }
    basis.remove(0);
    basis
}

/// Square root of the ratio between the largest and smallest eigenvalue of
/// the covariance of log-mapped samples in the tangent space at
/// `mean_direction`. 1 for an isotropic cloud.
pub fn anisotropy_index(samples: &[&[f64]], mean_direction: &UnitVector) -> Result<f64> {
    let d = mean_direction.dim();
    if samples.len() < d {
        return Err(Error::InsufficientData(format!(
            "anisotropy needs at least {d} samples, got {}",
            samples.len()
        )));
    }
    let mu = mean_direction.as_slice();
    let basis = tangent_basis(mu);
    let k = basis.len();
    let coords: Vec<Vec<f64>> = samples
        .iter()
        .map(|x| {
            let c = dot(x, mu).clamp(-1.0, 1.0);
            let theta = c.acos();
            let t: Vec<f64> = x.iter().zip(mu).map(|(xi, mi)| xi - c * mi).collect();
            let tn = norm(&t);
            if tn < 1e-15 {
                return vec![0.0; k];
            }
            basis.iter().map(|b| theta * dot(&t, b) / tn).collect()
        })
        .collect();

    let n = coords.len() as f64;
    let mut centre = vec![0.0; k];
    for c in &coords {
        centre.iter_mut().zip(c).for_each(|(m, v)| *m += v / n);
    }
    let mut cov = DMatrix::<f64>::zeros(k, k);
    for c in &coords {
        for a in 0..k {
            for b in 0..k {
                cov[(a, b)] += (c[a] - centre[a]) * (c[b] - centre[b]) / (n - 1.0).max(1.0);
            }
        }
    }
    for a in 0..k {
        cov[(a, a)] += ANISOTROPY_RIDGE;
    }
    let eig = SymmetricEigen::new(cov).eigenvalues;
    let max = eig.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = eig.iter().copied().fold(f64::INFINITY, f64::min).max(ANISOTROPY_RIDGE * 0.5);
    Ok((max / min).sqrt().max(1.0))
}

/// Per-class mean direction, angular radii and anisotropy. Rows are
/// normalized first; classes are those appearing in `labels`, in order.
pub fn class_statistics(embeddings: &Matrix, labels: &[usize]) -> Result<Vec<ClassStats>> {
    if labels.len() != embeddings.rows() {
        return Err(Error::shape("labels", embeddings.rows(), labels.len()));
    }
    let unit = l2_normalize_rows(embeddings)?;
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut out = Vec::new();
    for class in 0..classes {
        let rows: Vec<&[f64]> = (0..unit.rows()).filter(|&i| labels[i] == class).map(|i| unit.row(i)).collect();
        if rows.is_empty() {
            continue;
        }
        if rows.len() < 2 {
            return Err(Error::InsufficientData(format!("class {class} has a single sample")));
        }
        let mean = mean_direction(&rows, class)?;
        let mut radii: Vec<f64> = rows.iter().map(|r| unit_angle(r, mean.as_slice())).collect();
        radii.sort_by(f64::total_cmp);
        let anisotropy = anisotropy_index(&rows, &mean)?;
        out.push(ClassStats {
            class,
            count: rows.len(),
            angular_radius_p50_rad: percentile(&radii, 0.5),
            angular_radius_p95_rad: percentile(&radii, 0.95),
            anisotropy_index: anisotropy,
            mean_direction: mean,
        });
    }
    Ok(out)
}

/// Separation summary derived from per-class statistics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Separation {
    pub min_interclass_mean_angle_rad: f64,
    /// Minimum over class pairs of `angle(mean_a, mean_b) − p95_a − p95_b`.
    pub margin_proxy_rad: f64,
}

pub fn separation(stats: &[ClassStats]) -> Separation {
    let mut min_angle = f64::INFINITY;
    let mut margin = f64::INFINITY;
    for (i, a) in stats.iter().enumerate() {
        for b in &stats[i + 1..] {
            let angle = unit_angle(a.mean_direction.as_slice(), b.mean_direction.as_slice());
            min_angle = min_angle.min(angle);
            margin = margin.min(angle - a.angular_radius_p95_rad - b.angular_radius_p95_rad);
        }
    }
    Separation {
        min_interclass_mean_angle_rad: min_angle,
        margin_proxy_rad: margin,
    }
}
