//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{Complex, DMatrix, DVector, Schur, SymmetricEigen};

/// Eigenvalues of a general real square matrix via real Schur decomposition.
///
/// Returns `None` if the QR iteration does not converge.
pub fn eigenvalues(m: &DMatrix<f64>) -> Option<Vec<Complex<f64>>> {
    if m.nrows() == 0 {
        return Some(Vec::new());
    }
    let schur = Schur::try_new(m.clone(), f64::EPSILON, 10_000)?;
    Some(schur.complex_eigenvalues().iter().copied().collect())
}

/// Largest real part of the spectrum; `+inf` when the eigen-solver fails.
pub fn spectral_abscissa(m: &DMatrix<f64>) -> f64 {
    match eigenvalues(m) {
        Some(ev) => ev.iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max),
        None => f64::INFINITY,
    }
}

/// Eigenvalues of a symmetric matrix, ascending. The input is symmetrized first.
pub fn symmetric_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    if m.nrows() == 0 {
        return Vec::new();
    }
    let sym = (m + m.transpose()) * 0.5;
    let mut ev: Vec<f64> = SymmetricEigen::new(sym).eigenvalues.iter().copied().collect();
    ev.sort_by(|a, b| a.total_cmp(b));
    ev
}

/// Numerical rank with tolerance `rel_tol * sigma_max`.
pub fn rank(m: &DMatrix<f64>, rel_tol: f64) -> usize {
    if m.is_empty() {
        return 0;
    }
    let sv = m.clone().svd(false, false).singular_values;
    let smax = sv.iter().fold(0.0f64, |a, &b| a.max(b));
    if smax == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > rel_tol * smax).count()
}

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0f64, |a, &b| a.max(b.abs()))
}

/// Companion matrix of a polynomial given in descending coefficients with a
/// nonzero leading term. Its eigenvalues are the polynomial's roots.
pub fn companion(coeffs: &[f64]) -> DMatrix<f64> {
    let n = coeffs.len() - 1;
    let lead = coeffs[0];
    let mut c = DMatrix::zeros(n, n);
    for j in 0..n {
        c[(0, j)] = -coeffs[j + 1] / lead;
    }
    for i in 1..n {
        c[(i, i - 1)] = 1.0;
    }
    c
}

/// Row-major construction, the way the matrices appear on paper.
pub fn mat(rows: &[&[f64]]) -> DMatrix<f64> {
    let nr = rows.len();
    let nc = rows.first().map_or(0, |r| r.len());
    DMatrix::from_fn(nr, nc, |i, j| rows[i][j])
}

pub fn col(v: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(v)
}
