//! Dense row-major matrices and hypersphere primitives.
//!
//! Everything here is `f64`. Matrices are small (a few thousand rows at most,
//! a handful of columns), so the implementations favour clarity over blocking
//! or SIMD.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Norms at or below this are treated as zero when normalizing.
pub const MIN_NORM: f64 = 1e-30;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Builds a matrix from row-major data, rejecting wrong lengths and
    /// non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape("Matrix::from_vec", rows * cols, data.len()));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain {
                what: "matrix entry",
                value: data[pos],
                domain: "finite",
            });
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::shape("Matrix::from_rows", format!("{cols} columns"), format!("row {i} with {}", r.len())));
            }
            data.extend_from_slice(r);
        }
        Matrix::from_vec(rows.len(), cols, data)
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn add_at(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] += v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn col(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.set(c, r, self.get(r, c));
            }
        }
        out
    }

    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.rows {
            return Err(Error::shape(
                "matmul",
                format!("lhs cols == rhs rows ({})", self.cols),
                rhs.rows,
            ));
        }
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            let lhs_row = self.row(i);
            let out_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
            for (k, &a) in lhs_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(rhs.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// Builds a matrix by gathering the given rows, in order.
    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn same_shape(&self, other: &Matrix, context: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(
                context,
                format!("{:?}", self.shape()),
                format!("{:?}", other.shape()),
            ));
        }
        Ok(())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// A direction on the unit sphere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct UnitVector(Vec<f64>);

impl UnitVector {
    /// Scales `v` to unit length.
    pub fn normalize(v: &[f64]) -> Result<Self> {
        let n = norm(v);
        if !(n > MIN_NORM) {
            return Err(Error::ZeroNormRow { row: 0, norm: n });
        }
        Ok(UnitVector(v.iter().map(|x| x / n).collect()))
    }

    /// Wraps components that are already unit length (within 1e-12).
    pub fn from_unit(v: Vec<f64>) -> Result<Self> {
        let n = norm(&v);
        if (n - 1.0).abs() > 1e-12 {
            return Err(Error::Domain {
                what: "unit vector norm",
                value: n,
                domain: "1 ± 1e-12",
            });
        }
        Ok(UnitVector(v))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Clamps a cosine into [-1, 1] before it is handed to `acos`.
#[inline]
pub fn clamp_cos(c: f64) -> f64 {
    c.clamp(-1.0, 1.0)
}

/// Returns a copy of `m` with every row scaled to unit norm.
pub fn l2_normalize_rows(m: &Matrix) -> Result<Matrix> {
    let (normalized, _) = l2_normalize_rows_with_norms(m)?;
    Ok(normalized)
}

/// Like [`l2_normalize_rows`] but also returns the original row norms, which
/// the backward pass needs.
pub fn l2_normalize_rows_with_norms(m: &Matrix) -> Result<(Matrix, Vec<f64>)> {
    let mut out = m.clone();
    let mut norms = Vec::with_capacity(m.rows());
    for r in 0..m.rows() {
        let n = norm(m.row(r));
        if !(n > MIN_NORM) {
            return Err(Error::ZeroNormRow { row: r, norm: n });
        }
        out.row_mut(r).iter_mut().for_each(|v| *v /= n);
        norms.push(n);
    }
    Ok((out, norms))
}

/// Backpropagates `upstream_grad` through `x ↦ x / ‖x‖`.
///
/// The Jacobian is `(I − x̃x̃ᵀ) / ‖x‖`, so the result is the component of the
/// upstream gradient tangent to the sphere at `x̃`, divided by the norm.
pub fn normalize_jacobian_apply(x: &[f64], upstream_grad: &[f64]) -> Result<Vec<f64>> {
    if x.len() != upstream_grad.len() {
        return Err(Error::shape("normalize_jacobian_apply", x.len(), upstream_grad.len()));
    }
    let n = norm(x);
    if !(n > MIN_NORM) {
        return Err(Error::ZeroNormRow { row: 0, norm: n });
    }
    Ok(tangent_grad(x, n, upstream_grad))
}

/// Jacobian product with a precomputed norm. `x` is the unnormalized vector.
pub(crate) fn tangent_grad(x: &[f64], x_norm: f64, g: &[f64]) -> Vec<f64> {
    let radial = dot(x, g) / (x_norm * x_norm);
    x.iter()
        .zip(g)
        .map(|(xi, gi)| (gi - radial * xi) / x_norm)
        .collect()
}

/// Cosine similarities between unit feature rows (n×d) and unit weight
/// columns (d×c). Entries are clamped into [-1, 1].
pub fn cosine_matrix(feats: &Matrix, weights: &Matrix) -> Result<Matrix> {
    if feats.cols() != weights.rows() {
        return Err(Error::shape(
            "cosine_matrix",
            format!("weights with {} rows", feats.cols()),
            weights.rows(),
        ));
    }
    let mut cos = feats.matmul(weights)?;
    cos.as_mut_slice().iter_mut().for_each(|v| *v = clamp_cos(*v));
    Ok(cos)
}

/// Angle in radians between two unit vectors, in [0, π].
pub fn angle_between(a: &UnitVector, b: &UnitVector) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::shape("angle_between", a.dim(), b.dim()));
    }
    Ok(unit_angle(a.as_slice(), b.as_slice()))
}

/// Angle between two slices assumed to be unit length.
#[inline]
pub fn unit_angle(a: &[f64], b: &[f64]) -> f64 {
    clamp_cos(dot(a, b)).acos()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        let data = (0..rows * cols).map(|_| rng.random_range(-2.0..2.0)).collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    #[test]
    fn normalizes_three_four_five() {
        let m = Matrix::from_rows(&[vec![3.0, 4.0], vec![1.0, 0.0]]).unwrap();
        let n = l2_normalize_rows(&m).unwrap();
        assert_abs_diff_eq!(n.get(0, 0), 0.6, epsilon = 1e-15);
        assert_abs_diff_eq!(n.get(0, 1), 0.8, epsilon = 1e-15);
        assert_eq!(n.row(1), &[1.0, 0.0]);

        let m = Matrix::from_rows(&[vec![1.0, 0.0, 0.0]]).unwrap();
        assert_eq!(l2_normalize_rows(&m).unwrap().row(0), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn random_rows_have_unit_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = random_matrix(&mut rng, 5, 4);
        let n = l2_normalize_rows(&m).unwrap();
        for r in 0..5 {
            assert!((norm(n.row(r)) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_row_is_rejected() {
        let m = Matrix::from_rows(&[vec![1.0, 1.0], vec![0.0, 0.0]]).unwrap();
        assert!(matches!(l2_normalize_rows(&m), Err(Error::ZeroNormRow { row: 1, .. })));
        assert!(normalize_jacobian_apply(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn from_vec_rejects_bad_input() {
        assert!(Matrix::from_vec(2, 2, vec![1.0; 3]).is_err());
        assert!(Matrix::from_vec(1, 2, vec![1.0, f64::NAN]).is_err());
    }

    #[test]
    fn jacobian_hand_cases() {
        let g = normalize_jacobian_apply(&[2.0, 0.0], &[0.0, 1.0]).unwrap();
        assert_eq!(g, vec![0.0, 0.5]);
        let g = normalize_jacobian_apply(&[2.0, 0.0], &[1.0, 0.0]).unwrap();
        assert_eq!(g, vec![0.0, 0.0]);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h = 1e-6;
        for _ in 0..20 {
            let x: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
            let g: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
            let analytic = normalize_jacobian_apply(&x, &g).unwrap();
            let f = |v: &[f64]| {
                let n = norm(v);
                v.iter().zip(&g).map(|(a, b)| a / n * b).sum::<f64>()
            };
            for k in 0..5 {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[k] += h;
                xm[k] -= h;
                let numeric = (f(&xp) - f(&xm)) / (2.0 * h);
                let scale = analytic[k].abs().max(numeric.abs()).max(1e-3);
                assert!(
                    (analytic[k] - numeric).abs() / scale < 1e-6,
                    "component {k}: {} vs {numeric}",
                    analytic[k]
                );
            }
        }
    }

    #[test]
    fn cosine_axis_aligned_and_identical() {
        let f = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let w = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let c = cosine_matrix(&f, &w).unwrap();
        assert_eq!(c.row(0), &[1.0, 0.0]);

        let u = [0.6, 0.8];
        let f = Matrix::from_rows(&[u.to_vec()]).unwrap();
        let w = Matrix::from_vec(2, 1, u.to_vec()).unwrap();
        assert_abs_diff_eq!(cosine_matrix(&f, &w).unwrap().get(0, 0), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn cosine_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let feats = l2_normalize_rows(&random_matrix(&mut rng, 6, 4)).unwrap();
        let weights = l2_normalize_rows(&random_matrix(&mut rng, 3, 4)).unwrap().transpose();
        let c = cosine_matrix(&feats, &weights).unwrap();
        for i in 0..6 {
            for j in 0..3 {
                let mut acc = 0.0;
                for k in 0..4 {
                    acc += feats.get(i, k) * weights.get(k, j);
                }
                assert!((c.get(i, j) - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cosine_shape_mismatch() {
        let f = Matrix::zeros(2, 3);
        let w = Matrix::zeros(2, 3);
        assert!(matches!(cosine_matrix(&f, &w), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn angle_cases() {
        let x = UnitVector::from_unit(vec![1.0, 0.0]).unwrap();
        let y = UnitVector::from_unit(vec![0.0, 1.0]).unwrap();
        let nx = UnitVector::from_unit(vec![-1.0, 0.0]).unwrap();
        assert_abs_diff_eq!(angle_between(&x, &y).unwrap(), PI / 2.0, epsilon = 1e-15);
        assert_eq!(angle_between(&x, &x).unwrap(), 0.0);
        assert_abs_diff_eq!(angle_between(&x, &nx).unwrap(), PI, epsilon = 1e-15);
        let z = UnitVector::from_unit(vec![0.0, 0.0, 1.0]).unwrap();
        assert!(angle_between(&x, &z).is_err());
        assert!(UnitVector::from_unit(vec![1.0, 1.0]).is_err());
    }

    fn matrix_strategy() -> impl Strategy<Value = Matrix> {
        (1usize..6, 1usize..6).prop_flat_map(|(r, c)| {
            prop::collection::vec(
                prop_oneof![-10.0..-0.1f64, 0.1..10.0f64],
                r * c,
            )
            .prop_map(move |d| Matrix::from_vec(r, c, d).unwrap())
        })
    }

    proptest! {
        #[test]
        fn normalization_is_idempotent(m in matrix_strategy()) {
            let once = l2_normalize_rows(&m).unwrap();
            let twice = l2_normalize_rows(&once).unwrap();
            for (a, b) in once.as_slice().iter().zip(twice.as_slice()) {
                prop_assert!((a - b).abs() < 1e-14);
            }
        }

        #[test]
        fn normalization_is_scale_invariant(m in matrix_strategy(), k in 1e-3..1e3f64) {
            let mut scaled = m.clone();
            scaled.as_mut_slice().iter_mut().for_each(|v| *v *= k);
            let a = l2_normalize_rows(&m).unwrap();
            let b = l2_normalize_rows(&scaled).unwrap();
            for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn jacobian_output_is_tangent(
            x in prop::collection::vec(-5.0..5.0f64, 4),
            g in prop::collection::vec(-5.0..5.0f64, 4),
        ) {
            prop_assume!(norm(&x) > 1e-3);
            let out = normalize_jacobian_apply(&x, &g).unwrap();
            let unit: Vec<f64> = x.iter().map(|v| v / norm(&x)).collect();
            prop_assert!(dot(&out, &unit).abs() < 1e-10);
        }

        #[test]
        fn cosines_stay_in_range(a in matrix_strategy(), seed in 0u64..1000) {
            let feats = l2_normalize_rows(&a).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w = l2_normalize_rows(&random_matrix(&mut rng, 3, a.cols())).unwrap().transpose();
            let c = cosine_matrix(&feats, &w).unwrap();
            prop_assert!(c.as_slice().iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }
}
