//! Small dense linear-algebra helpers shared by the filters, the realization
//! code and the Riccati recursions.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Eigenvalues below this are treated as zero when factoring a PSD matrix.
pub const EIGEN_FLOOR: f64 = 1e-12;

/// Replace `m` by `(m + m') / 2`.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

/// Largest absolute difference between `m` and its transpose.
pub fn asymmetry(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    let mut worst = 0.0_f64;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

/// Smallest eigenvalue of the symmetric part of `m`.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    let mut s = m.clone();
    symmetrize(&mut s);
    s.symmetric_eigenvalues().min()
}

/// A factor `F` with `F F' = cov` for a symmetric positive semi-definite
/// matrix. Cholesky is tried first; semi-definite inputs fall back to an
/// eigen-decomposition with eigenvalues below [`EIGEN_FLOOR`] dropped.
pub fn psd_factor(cov: &DMatrix<f64>) -> DMatrix<f64> {
    let n = cov.nrows();
    if cov.iter().all(|v| *v == 0.0) {
        return DMatrix::zeros(n, n);
    }
    if let Some(chol) = cov.clone().cholesky() {
        return chol.l();
    }
    let mut sym = cov.clone();
    symmetrize(&mut sym);
    let eig = SymmetricEigen::new(sym);
    let mut factor = eig.eigenvectors.clone();
    for (j, lambda) in eig.eigenvalues.iter().enumerate() {
        let scale = if *lambda < EIGEN_FLOOR { 0.0 } else { lambda.sqrt() };
        factor.column_mut(j).scale_mut(scale);
    }
    factor
}

/// Thin SVD with singular values sorted in decreasing order.
#[derive(Debug, Clone)]
pub struct SortedSvd {
    pub u: DMatrix<f64>,
    pub singular_values: DVector<f64>,
    pub v_t: DMatrix<f64>,
}

impl SortedSvd {
    /// Computed with faer: nalgebra's bidiagonal SVD can return a
    /// decomposition that does not reproduce `m` for some rank-deficient
    /// Hankel matrices.
    pub fn new(m: &DMatrix<f64>) -> Self {
        let (rows, cols) = m.shape();
        let k = rows.min(cols);
        if k == 0 {
            return Self {
                u: DMatrix::zeros(rows, 0),
                singular_values: DVector::zeros(0),
                v_t: DMatrix::zeros(0, cols),
            };
        }
        let fm = faer::Mat::<f64>::from_fn(rows, cols, |i, j| m[(i, j)]);
        let Ok(svd) = fm.thin_svd() else {
            // non-convergence: return NaNs so callers' finiteness checks fire
            return Self {
                u: DMatrix::from_element(rows, k, f64::NAN),
                singular_values: DVector::from_element(k, f64::NAN),
                v_t: DMatrix::from_element(k, cols, f64::NAN),
            };
        };
        let (fu, fs, fv) = (svd.U(), svd.S().column_vector(), svd.V());
        let mut order: Vec<usize> = (0..k).collect();
        order.sort_by(|&a, &b| fs[b].total_cmp(&fs[a]));
        Self {
            u: DMatrix::from_fn(rows, k, |i, d| fu[(i, order[d])]),
            singular_values: DVector::from_fn(k, |d, _| fs[order[d]]),
            v_t: DMatrix::from_fn(k, cols, |d, j| fv[(j, order[d])]),
        }
    }

    /// Number of singular values at or above `rel_tol * sigma_max`.
    pub fn rank(&self, rel_tol: f64) -> usize {
        let top = self.singular_values.get(0).copied().unwrap_or(0.0);
        if top <= 0.0 {
            return 0;
        }
        self.singular_values
            .iter()
            .filter(|s| **s >= rel_tol * top)
            .count()
    }
}

/// Moore-Penrose pseudo-inverse with a relative singular-value cutoff.
pub fn pinv(m: &DMatrix<f64>, rel_tol: f64) -> DMatrix<f64> {
    let svd = SortedSvd::new(m);
    let top = svd.singular_values.get(0).copied().unwrap_or(0.0);
    let mut out = DMatrix::zeros(m.ncols(), m.nrows());
    if top <= 0.0 {
        return out;
    }
    for (i, s) in svd.singular_values.iter().enumerate() {
        if *s < rel_tol * top {
            break;
        }
        let vi = svd.v_t.row(i).transpose();
        let ui = svd.u.column(i);
        out += (vi / *s) * ui.transpose();
    }
    out
}

/// Solve `x * a = b` for `x` where `a` is symmetric positive definite.
/// Returns `None` when `a` is not numerically positive definite.
pub fn right_solve_spd(b: &DMatrix<f64>, a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let chol = a.clone().cholesky()?;
    // x a = b  <=>  a x' = b'
    Some(chol.solve(&b.transpose()).transpose())
}

/// Relative Frobenius error `|a - b| / |b|`, falling back to the absolute
/// error when the reference is exactly zero.
pub fn rel_frobenius(a: &DMatrix<f64>, reference: &DMatrix<f64>) -> f64 {
    let diff = (a - reference).norm();
    let scale = reference.norm();
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Quadratic form `x' W x` that short-circuits diagonal weights, which is the
/// common case for the large tracking weights on the heat plant.
#[derive(Debug, Clone)]
pub struct QuadForm {
    diag: Option<Vec<f64>>,
    dense: DMatrix<f64>,
}

impl QuadForm {
    pub fn new(weight: &DMatrix<f64>) -> Self {
        let n = weight.nrows();
        let is_diag = (0..n).all(|i| (0..n).all(|j| i == j || weight[(i, j)] == 0.0));
        let diag = is_diag.then(|| (0..n).map(|i| weight[(i, i)]).collect());
        Self {
            diag,
            dense: weight.clone(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dense.nrows()
    }

    /// `(x - offset)' W (x - offset)`; `offset` may be empty for zero.
    pub fn eval(&self, x: &[f64], offset: &[f64]) -> f64 {
        let d = |i: usize| x[i] - offset.get(i).copied().unwrap_or(0.0);
        match &self.diag {
            Some(w) => w.iter().enumerate().map(|(i, wi)| wi * d(i) * d(i)).sum(),
            None => {
                let n = self.dim();
                let mut total = 0.0;
                for i in 0..n {
                    let di = d(i);
                    let mut row = 0.0;
                    for j in 0..n {
                        row += self.dense[(i, j)] * d(j);
                    }
                    total += di * row;
                }
                total
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn pinv_of_full_rank_is_inverse() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 3.0]);
        let p = pinv(&m, 1e-12);
        let eye = &m * &p;
        assert_relative_eq!(eye, DMatrix::identity(2, 2), epsilon = 1e-12);
    }

    #[test]
    fn pinv_drops_tiny_singular_values() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1e-14]);
        let p = pinv(&m, 1e-10);
        assert_relative_eq!(p[(0, 0)], 1.0);
        assert_eq!(p[(1, 1)], 0.0);
    }

    #[test]
    fn psd_factor_handles_semidefinite() {
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let f = psd_factor(&cov);
        assert_relative_eq!(&f * f.transpose(), cov, epsilon = 1e-12);
        let zero = DMatrix::<f64>::zeros(3, 3);
        assert!(psd_factor(&zero).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn sorted_svd_is_descending() {
        let m = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 0.0, 5.0, 0.0, 0.0, 0.0, 3.0]);
        let svd = SortedSvd::new(&m);
        assert_relative_eq!(svd.singular_values, DVector::from_vec(vec![5.0, 3.0, 1.0]), epsilon = 1e-12);
        let rebuilt = &svd.u * DMatrix::from_diagonal(&svd.singular_values) * &svd.v_t;
        assert_relative_eq!(rebuilt, m, epsilon = 1e-12);
        assert_eq!(svd.rank(0.25), 2);
    }

    #[test]
    fn quad_form_dense_matches_diag() {
        let w = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 3.0]);
        let mut dense = w.clone();
        dense[(0, 1)] = 1e-300; // forces the dense path
        let x = [1.0, 2.0];
        let t = [0.5, -1.0];
        let a = QuadForm::new(&w).eval(&x, &t);
        let b = QuadForm::new(&dense).eval(&x, &t);
        assert_relative_eq!(a, 2.0 * 0.25 + 3.0 * 9.0);
        assert_relative_eq!(a, b, epsilon = 1e-12);
    }
}
