//! Algebraic feasibility certificates.
//!
//! The relative-degree-one laws reduce to a 2x2 inequality with a closed-form
//! answer. The output-feedback law needs a matrix inequality on the extended
//! `(x, eps)` system that depends affinely on the inverse Jacobian
//! `(dPhi/deps)^{-1}`; it is checked at the vertices of a truncated box of
//! inverse-Jacobian values.

use std::fmt;

use nalgebra::{DMatrix, DVector};

use crate::controllers::{is_hurwitz_matrix, OutputFeedbackGain};
use crate::linalg;
use crate::plants::SectorPlant;
use crate::transforms::Transform;

/// Largest eigenvalue accepted as "negative semidefinite".
pub const NSD_TOL: f64 = 1e-9;

pub const DEFAULT_JAC_INV_CAP: f64 = 1e3;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CertificateError {
    #[error("P is not positive definite (smallest eigenvalue {0:e})")]
    NonPositiveP(f64),
    #[error("extended system is not Hurwitz at the nominal vertex (spectral abscissa {0:e})")]
    NonHurwitzNominal(f64),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("inverse Jacobian entries must be positive")]
    NonPositiveJacobian,
}

/// Largest eigenvalue of a symmetric matrix.
pub fn sym_eig_max(m: &DMatrix<f64>) -> f64 {
    linalg::symmetric_eigenvalues(m).last().copied().unwrap_or(f64::NEG_INFINITY)
}

/// `[[alpha - K, 0.5], [0.5, -beta]]`
pub fn lmi_theorem2_matrix(alpha: f64, k: f64, beta: f64) -> DMatrix<f64> {
    DMatrix::from_row_slice(2, 2, &[alpha - k, 0.5, 0.5, -beta])
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalarLmi {
    pub feasible: bool,
    /// Smallest admissible `beta` when feasible.
    pub beta_min: Option<f64>,
}

/// Feasibility of `[[alpha - K, 0.5], [0.5, -beta]] <= 0` in `beta`.
///
/// The off-diagonal 0.5 forces `K > alpha`; then `beta >= 1 / (4 (K - alpha))`.
pub fn lmi_theorem2(alpha: f64, k: f64) -> ScalarLmi {
    if k > alpha {
        ScalarLmi { feasible: true, beta_min: Some(0.25 / (k - alpha)) }
    } else {
        ScalarLmi { feasible: false, beta_min: None }
    }
}

/// Stacked `(x, eps)` dynamics `x_e' = A_e x_e + G_e phi + D_e f_e` with
/// `f_e = (f, dPhi/dt, Phi)`, assembled at a fixed inverse Jacobian.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtendedSystem {
    pub a_e: DMatrix<f64>,
    pub g_e: DMatrix<f64>,
    pub d_e: DMatrix<f64>,
    /// `[I 0]`, selects `x` from `x_e`.
    pub e: DMatrix<f64>,
    pub jac_inv: Vec<f64>,
}

impl ExtendedSystem {
    pub fn n(&self) -> usize {
        self.e.nrows()
    }

    pub fn dim(&self) -> usize {
        self.a_e.nrows()
    }
}

pub fn build_extended_system(plant: &SectorPlant, gains: &OutputFeedbackGain, jac_inv: &[f64]) -> Result<ExtendedSystem, CertificateError> {
    let p = &plant.base;
    let (n, v, l, k) = (p.n(), p.v(), p.l_dim(), plant.k());
    if jac_inv.len() != v {
        return Err(CertificateError::Dimension(format!("{} inverse-Jacobian entries for {v} outputs", jac_inv.len())));
    }
    if gains.k1.shape() != (p.m(), v) || gains.t1.shape() != (n, v) || gains.t2.shape() != (v, v) {
        return Err(CertificateError::Dimension(format!(
            "gains K1 {:?}, T1 {:?}, T2 {:?} for n={n}, m={}, v={v}",
            gains.k1.shape(),
            gains.t1.shape(),
            gains.t2.shape(),
            p.m()
        )));
    }
    if jac_inv.iter().any(|&j| !(j > 0.0)) {
        return Err(CertificateError::NonPositiveJacobian);
    }
    let jm = DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(jac_inv));
    let k2 = gains.effective_k2();
    let (a, b, lm, d, g) = (&p.a, &p.b, &p.l, &p.d, &plant.g);

    let a11 = a + b * &gains.k1 * lm + &gains.t1 * lm;
    let a12 = b * &k2;
    let a21 = &jm * (lm * a + lm * b * &gains.k1 * lm + &gains.t2 * lm);
    let a22 = &jm * lm * b * &k2;
    let mut a_e = DMatrix::zeros(n + v, n + v);
    a_e.view_mut((0, 0), (n, n)).copy_from(&a11);
    a_e.view_mut((0, n), (n, v)).copy_from(&a12);
    a_e.view_mut((n, 0), (v, n)).copy_from(&a21);
    a_e.view_mut((n, n), (v, v)).copy_from(&a22);

    let mut g_e = DMatrix::zeros(n + v, k);
    g_e.view_mut((0, 0), (n, k)).copy_from(g);
    g_e.view_mut((n, 0), (v, k)).copy_from(&(&jm * lm * g));

    let mut d_e = DMatrix::zeros(n + v, l + 2 * v);
    d_e.view_mut((0, 0), (n, l)).copy_from(d);
    d_e.view_mut((0, l + v), (n, v)).copy_from(&(-&gains.t1));
    d_e.view_mut((n, 0), (v, l)).copy_from(&(&jm * lm * d));
    d_e.view_mut((n, l), (v, v)).copy_from(&(-&jm));
    d_e.view_mut((n, l + v), (v, v)).copy_from(&(-(&jm * &gains.t2)));

    let mut e = DMatrix::zeros(n, n + v);
    e.view_mut((0, 0), (n, n)).fill_with_identity();

    Ok(ExtendedSystem { a_e, g_e, d_e, e, jac_inv: jac_inv.to_vec() })
}

fn check_pd(p: &DMatrix<f64>) -> Result<(), CertificateError> {
    let min = linalg::symmetric_eigenvalues(p).first().copied().unwrap_or(0.0);
    if !(min > 0.0) {
        return Err(CertificateError::NonPositiveP(min));
    }
    Ok(())
}

/// The three blocks `(Psi11, P G_e, P D_e)` sharing every form below.
fn blocks(sys: &ExtendedSystem, p: &DMatrix<f64>, alpha: f64) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let lyap = sys.a_e.transpose() * p + p * &sys.a_e + p * alpha;
    (lyap, p * &sys.g_e, p * &sys.d_e)
}

fn assemble(top_left: &DMatrix<f64>, pg: &DMatrix<f64>, pd: &DMatrix<f64>, mid: f64, bottom: f64) -> DMatrix<f64> {
    let (nx, k, nf) = (top_left.nrows(), pg.ncols(), pd.ncols());
    let dim = nx + k + nf;
    let mut m = DMatrix::zeros(dim, dim);
    m.view_mut((0, 0), (nx, nx)).copy_from(top_left);
    m.view_mut((0, nx), (nx, k)).copy_from(pg);
    m.view_mut((nx, 0), (k, nx)).copy_from(&pg.transpose());
    m.view_mut((0, nx + k), (nx, nf)).copy_from(pd);
    m.view_mut((nx + k, 0), (nf, nx)).copy_from(&pd.transpose());
    for i in 0..k {
        m[(nx + i, nx + i)] = mid;
    }
    for i in 0..nf {
        m[(nx + k + i, nx + k + i)] = bottom;
    }
    m
}

/// `[[Psi11, P G_e, P D_e], [*, -I_k, 0], [*, *, -beta I]]` with
/// `Psi11 = A_e' P + P A_e + alpha P + C^2 E' E`.
pub fn theorem3_block_matrix(sys: &ExtendedSystem, p: &DMatrix<f64>, alpha: f64, beta: f64, c: f64) -> Result<DMatrix<f64>, CertificateError> {
    if p.shape() != (sys.dim(), sys.dim()) {
        return Err(CertificateError::Dimension(format!("P is {:?}, system has dimension {}", p.shape(), sys.dim())));
    }
    check_pd(p)?;
    let (lyap, pg, pd) = blocks(sys, p, alpha);
    let psi = lyap + sys.e.transpose() * &sys.e * (c * c);
    let m = assemble(&psi, &pg, &pd, -1.0, -beta);
    Ok((&m + m.transpose()) * 0.5)
}

/// The dissipation form and the sector form whose sum is the block matrix:
/// `z' M_decay z = V' + alpha V - beta |f_e|^2` and `z' M_sector z >= 0`
/// whenever `|phi| <= C |x|`.
pub fn sprocedure_pair(sys: &ExtendedSystem, p: &DMatrix<f64>, alpha: f64, beta: f64, c: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let (lyap, pg, pd) = blocks(sys, p, alpha);
    let decay = assemble(&lyap, &pg, &pd, 0.0, -beta);
    let ete = sys.e.transpose() * &sys.e * (c * c);
    let zeros_g = DMatrix::zeros(pg.nrows(), pg.ncols());
    let zeros_d = DMatrix::zeros(pd.nrows(), pd.ncols());
    let sector = assemble(&ete, &zeros_g, &zeros_d, -1.0, 0.0);
    ((&decay + decay.transpose()) * 0.5, sector)
}

/// Solves `A' P + P A = -Q` through the Kronecker-sum linear system.
pub fn solve_lyapunov(a: &DMatrix<f64>, q: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let n = a.nrows();
    let eye = DMatrix::<f64>::identity(n, n);
    let at = a.transpose();
    let kron = eye.kronecker(&at) + at.kronecker(&eye);
    let rhs = nalgebra::DVector::from_iterator(n * n, q.iter().map(|v| -v));
    let sol = kron.lu().solve(&rhs)?;
    let p = DMatrix::from_column_slice(n, n, sol.as_slice());
    Some((&p + p.transpose()) * 0.5)
}

/// One tested vertex of the inverse-Jacobian box.
#[derive(Debug, Clone, PartialEq)]
pub struct VertexResult {
    pub jac_inv: Vec<f64>,
    pub max_eig: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CertificateReport {
    pub feasible: bool,
    pub beta: Option<f64>,
    pub alpha: f64,
    pub sector_bound: f64,
    pub cap: f64,
    pub vertices: Vec<VertexResult>,
    pub p: DMatrix<f64>,
    pub hypothesis_flags: Vec<String>,
}

impl CertificateReport {
    pub fn worst_eig(&self) -> f64 {
        self.vertices.iter().map(|v| v.max_eig).fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn p_eigenvalues(&self) -> Vec<f64> {
        linalg::symmetric_eigenvalues(&self.p)
    }
}

impl fmt::Display for CertificateReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "extended-system matrix inequality")?;
        writeln!(f, "  feasible: {}", self.feasible)?;
        match self.beta {
            Some(b) => writeln!(f, "  beta: {b:.6e}")?,
            None => writeln!(f, "  beta: none")?,
        }
        writeln!(f, "  alpha: {}  C: {}", self.alpha, self.sector_bound)?;
        writeln!(f, "  inverse-Jacobian box truncated at {:.3e} (unbounded above)", self.cap)?;
        for v in &self.vertices {
            let j: Vec<String> = v.jac_inv.iter().map(|x| format!("{x:.4e}")).collect();
            writeln!(f, "  vertex [{}]: max eigenvalue {:.6e}", j.join(", "), v.max_eig)?;
        }
        let pe: Vec<String> = self.p_eigenvalues().iter().map(|x| format!("{x:.4e}")).collect();
        writeln!(f, "  eig(P): [{}]", pe.join(", "))?;
        for flag in &self.hypothesis_flags {
            writeln!(f, "  note: {flag}")?;
        }
        Ok(())
    }
}

/// Options for the vertex check.
#[derive(Debug, Clone, PartialEq)]
pub struct VertexOptions {
    pub cap: f64,
    /// Extra interior inverse-Jacobian values tested on every axis.
    pub extra: Vec<f64>,
    /// Candidate `beta` values, tried in ascending order.
    pub beta_grid: Vec<f64>,
}

impl Default for VertexOptions {
    fn default() -> Self {
        VertexOptions { cap: DEFAULT_JAC_INV_CAP, extra: Vec::new(), beta_grid: default_beta_grid() }
    }
}

/// `10^-3 .. 10^9`, eight points per decade.
pub fn default_beta_grid() -> Vec<f64> {
    (0..=96).map(|i| 10f64.powf(-3.0 + i as f64 / 8.0)).collect()
}

/// Smallest inverse Jacobian per output over the time grid, attained at `eps = 0`.
pub fn min_jac_inv(transform: &Transform, time_grid: &[f64]) -> Vec<f64> {
    transform
        .channels
        .iter()
        .map(|c| {
            time_grid
                .iter()
                .map(|&t| 1.0 / c.jacobian(0.0, t).abs())
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

/// Cartesian product of per-axis values.
fn vertex_set(axes: &[Vec<f64>]) -> Vec<Vec<f64>> {
    axes.iter().fold(vec![Vec::new()], |acc, axis| {
        acc.iter()
            .flat_map(|prefix| {
                axis.iter().map(move |&x| {
                    let mut p = prefix.clone();
                    p.push(x);
                    p
                })
            })
            .collect()
    })
}

pub fn vertex_axes(transform: &Transform, time_grid: &[f64], opts: &VertexOptions) -> Vec<Vec<f64>> {
    min_jac_inv(transform, time_grid)
        .into_iter()
        .map(|lo| {
            let mut axis = vec![lo];
            axis.extend(opts.extra.iter().copied().filter(|&x| x > lo && x < opts.cap));
            axis.push(opts.cap.max(lo));
            axis.sort_by(f64::total_cmp);
            axis.dedup();
            axis
        })
        .collect()
}

/// Worst-case largest eigenvalue over the vertices for fixed `(P, beta)`.
fn evaluate(systems: &[ExtendedSystem], p: &DMatrix<f64>, alpha: f64, beta: f64, c: f64) -> Result<Vec<f64>, CertificateError> {
    systems
        .iter()
        .map(|s| theorem3_block_matrix(s, p, alpha, beta, c).map(|m| sym_eig_max(&m)))
        .collect()
}

/// Smallest `beta` on the grid at which every vertex is NSD, with the per-vertex eigenvalues.
fn best_beta(systems: &[ExtendedSystem], p: &DMatrix<f64>, alpha: f64, c: f64, beta_grid: &[f64]) -> Result<(Option<f64>, Vec<f64>), CertificateError> {
    let Some(&top) = beta_grid.last() else {
        return Err(CertificateError::Dimension("empty beta grid".into()));
    };
    // the block matrix only gets more negative as beta grows
    let at_top = evaluate(systems, p, alpha, top, c)?;
    if at_top.iter().any(|&e| e > NSD_TOL) {
        return Ok((None, at_top));
    }
    let (mut lo, mut hi) = (0usize, beta_grid.len() - 1);
    if evaluate(systems, p, alpha, beta_grid[0], c)?.iter().all(|&e| e <= NSD_TOL) {
        hi = 0;
    }
    while hi > lo + 1 {
        let mid = (lo + hi) / 2;
        if evaluate(systems, p, alpha, beta_grid[mid], c)?.iter().all(|&e| e <= NSD_TOL) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let beta = beta_grid[hi];
    Ok((Some(beta), evaluate(systems, p, alpha, beta, c)?))
}

/// Candidate `P` from a Lyapunov equation at the nominal vertex, rescaled
/// until the block matrix is NSD at every vertex for some `beta` on the grid.
/// If no scale works, the Lyapunov solution seeds a quasi-Newton descent of a
/// smoothed maximum vertex eigenvalue over `P`.
///
/// Returns `(P, beta)` for the best scale found; `beta` is `None` if no scale
/// certifies all vertices.
pub fn search_p(systems: &[ExtendedSystem], alpha: f64, c: f64, beta_grid: &[f64]) -> Result<(DMatrix<f64>, Option<f64>), CertificateError> {
    let nominal = systems.first().ok_or_else(|| CertificateError::Dimension("no vertices".into()))?;
    let shifted = &nominal.a_e + DMatrix::identity(nominal.dim(), nominal.dim()) * (0.5 * alpha);
    let abscissa = linalg::spectral_abscissa(&shifted);
    if !is_hurwitz_matrix(&shifted) {
        return Err(CertificateError::NonHurwitzNominal(abscissa));
    }
    let mut q0 = DMatrix::identity(nominal.dim(), nominal.dim());
    q0 += nominal.e.transpose() * &nominal.e * (c * c);
    let base = solve_lyapunov(&shifted, &q0).ok_or(CertificateError::NonHurwitzNominal(abscissa))?;
    check_pd(&base)?;

    let top = *beta_grid.last().unwrap_or(&1e9);
    let worst = |scale: f64| -> Result<f64, CertificateError> {
        Ok(evaluate(systems, &(&base * scale), alpha, top, c)?.into_iter().fold(f64::NEG_INFINITY, f64::max))
    };
    // coarse log scan, then golden-section refinement around the best point
    let scales: Vec<f64> = (0..=48).map(|i| 10f64.powf(-4.0 + i as f64 / 6.0)).collect();
    let mut best = (f64::INFINITY, 1.0);
    for &s in &scales {
        let w = worst(s)?;
        if w < best.0 {
            best = (w, s);
        }
    }
    let (mut a, mut b) = (best.1.ln() - 1.0 / 6.0 * std::f64::consts::LN_10, best.1.ln() + 1.0 / 6.0 * std::f64::consts::LN_10);
    let phi = 0.5 * (5f64.sqrt() - 1.0);
    for _ in 0..40 {
        let x1 = b - phi * (b - a);
        let x2 = a + phi * (b - a);
        if worst(x1.exp())? < worst(x2.exp())? {
            b = x2;
        } else {
            a = x1;
        }
    }
    let s = (0.5 * (a + b)).exp();
    let scale = if worst(s)? < best.0 { s } else { best.1 };
    let mut p = &base * scale;
    let (mut beta, _) = best_beta(systems, &p, alpha, c, beta_grid)?;
    if beta.is_none() {
        let refined = refine_p(systems, &base, alpha, c, top)?;
        if worst_of(systems, &refined, alpha, top, c)? < worst_of(systems, &p, alpha, top, c)? {
            p = refined;
            beta = best_beta(systems, &p, alpha, c, beta_grid)?.0;
        }
    }
    Ok((p, beta))
}

/// Value and gradient in `P` of `tau * log sum exp(lambda / tau)` over the
/// spectra of all vertex matrices.
fn smoothed_max(systems: &[ExtendedSystem], p: &DMatrix<f64>, alpha: f64, beta: f64, c: f64, tau: f64) -> Result<(f64, f64, DMatrix<f64>), CertificateError> {
    let mut spectra = Vec::with_capacity(systems.len());
    for s in systems {
        let m = theorem3_block_matrix(s, p, alpha, beta, c)?;
        spectra.push(nalgebra::SymmetricEigen::new(m));
    }
    let top = spectra
        .iter()
        .flat_map(|e| e.eigenvalues.iter().copied())
        .fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = spectra
        .iter()
        .flat_map(|e| e.eigenvalues.iter().map(|l| ((l - top) / tau).exp()))
        .sum();
    let nx = p.nrows();
    let mut grad = DMatrix::zeros(nx, nx);
    for (s, eig) in systems.iter().zip(&spectra) {
        let k = s.g_e.ncols();
        let weights = eig.eigenvalues.map(|l| ((l - top) / tau).exp() / total);
        let z = &eig.eigenvectors * DMatrix::from_diagonal(&weights) * eig.eigenvectors.transpose();
        let z11 = z.view((0, 0), (nx, nx)).clone_owned();
        let z12 = z.view((0, nx), (nx, k)).clone_owned();
        let z13 = z.view((0, nx + k), (nx, s.d_e.ncols())).clone_owned();
        grad += &s.a_e * &z11 + &z11 * s.a_e.transpose() + &z11 * alpha;
        grad += &z12 * s.g_e.transpose() + &s.g_e * z12.transpose();
        grad += &z13 * s.d_e.transpose() + &s.d_e * z13.transpose();
    }
    let grad = (&grad + grad.transpose()) * 0.5;
    Ok((top + tau * total.ln(), top, grad))
}

/// How `P` is parametrised during refinement.
#[derive(Clone, Copy)]
enum Param {
    /// `P = R R'` with `R` lower triangular; positive semidefinite by construction.
    Cholesky,
    /// Upper-triangular entries of `P`; non-definite points are rejected.
    Entries,
}

impl Param {
    fn unpack(self, x: &DVector<f64>, n: usize) -> DMatrix<f64> {
        let m = lower_from(x, n);
        match self {
            Param::Cholesky => &m * m.transpose(),
            Param::Entries => {
                let d = DMatrix::from_diagonal(&m.diagonal());
                &m + m.transpose() - d
            }
        }
    }

    fn pack(self, p: &DMatrix<f64>) -> Option<DVector<f64>> {
        let n = p.nrows();
        let src = match self {
            Param::Cholesky => p.clone().cholesky()?.l(),
            Param::Entries => p.clone(),
        };
        Some(DVector::from_iterator(n * (n + 1) / 2, (0..n).flat_map(|i| (0..=i).map(move |j| (i, j))).map(|ij| src[ij])))
    }

    /// Chain rule from `d/dP` to the parameter vector.
    fn pull_back(self, x: &DVector<f64>, grad_p: &DMatrix<f64>) -> DVector<f64> {
        let n = grad_p.nrows();
        let g = match self {
            Param::Cholesky => {
                grad_p * lower_from(x, n) * 2.0
            }
            Param::Entries => grad_p * 2.0 - DMatrix::from_diagonal(&grad_p.diagonal()),
        };
        DVector::from_iterator(n * (n + 1) / 2, (0..n).flat_map(|i| (0..=i).map(move |j| (i, j))).map(|ij| g[ij]))
    }
}

/// Row-major lower triangle from a packed vector.
fn lower_from(x: &DVector<f64>, n: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(n, n);
    let mut k = 0;
    for i in 0..n {
        for j in 0..=i {
            m[(i, j)] = x[k];
            k += 1;
        }
    }
    m
}

/// Quasi-Newton minimisation. The line search backtracks until the Armijo
/// condition holds and expands while the value keeps dropping.
fn bfgs<F>(mut f: F, x0: DVector<f64>, max_iter: usize, gtol: f64) -> Result<DVector<f64>, CertificateError>
where
    F: FnMut(&DVector<f64>) -> Result<(f64, DVector<f64>), CertificateError>,
{
    let dim = x0.len();
    let eye = DMatrix::<f64>::identity(dim, dim);
    let mut x = x0;
    let (mut fx, mut gx) = f(&x)?;
    if !fx.is_finite() {
        return Ok(x);
    }
    let mut h = eye.clone();
    let mut fresh = true;
    for _ in 0..max_iter {
        if gx.amax() < gtol {
            break;
        }
        let mut d = -(&h * &gx);
        let mut slope = gx.dot(&d);
        if slope >= 0.0 {
            h = eye.clone();
            fresh = true;
            d = -gx.clone();
            slope = gx.dot(&d);
        }
        let armijo = |step: f64, fc: f64| fc.is_finite() && fc <= fx + 1e-4 * step * slope;
        let mut step = 1.0;
        let mut accepted = None;
        loop {
            let cand = &x + &d * step;
            let (fc, gc) = f(&cand)?;
            if armijo(step, fc) {
                accepted = Some((cand, fc, gc));
                break;
            }
            step *= 0.5;
            if step < 1e-16 {
                break;
            }
        }
        let Some((mut xn, mut fnew, mut gnew)) = accepted else { break };
        if step == 1.0 {
            for _ in 0..20 {
                step *= 2.0;
                let cand = &x + &d * step;
                let (fc, gc) = f(&cand)?;
                if !(armijo(step, fc) && fc < fnew) {
                    break;
                }
                (xn, fnew, gnew) = (cand, fc, gc);
            }
        }
        let s = &xn - &x;
        let y = &gnew - &gx;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            if fresh {
                h = &eye * (sy / y.norm_squared());
                fresh = false;
            }
            let rho = 1.0 / sy;
            let left = &eye - &s * y.transpose() * rho;
            let right = &eye - &y * s.transpose() * rho;
            h = &left * &h * &right + &s * s.transpose() * rho;
        }
        x = xn;
        fx = fnew;
        gx = gnew;
    }
    Ok(x)
}

fn worst_of(systems: &[ExtendedSystem], p: &DMatrix<f64>, alpha: f64, beta: f64, c: f64) -> Result<f64, CertificateError> {
    Ok(evaluate(systems, p, alpha, beta, c)?.into_iter().fold(f64::NEG_INFINITY, f64::max))
}

/// Minimises the worst vertex eigenvalue over `P`, starting from `start`,
/// with a shrinking smoothing parameter. Both parametrisations are tried and
/// the better result is returned.
fn refine_p(systems: &[ExtendedSystem], start: &DMatrix<f64>, alpha: f64, c: f64, beta: f64) -> Result<DMatrix<f64>, CertificateError> {
    let n = start.nrows();
    let mut best = (worst_of(systems, start, alpha, beta, c)?, start.clone());
    for param in [Param::Cholesky, Param::Entries] {
        let Some(mut x) = param.pack(start) else { continue };
        for tau in [1e-1, 1e-2, 1e-3] {
            let objective = |x: &DVector<f64>| -> Result<(f64, DVector<f64>), CertificateError> {
                let p = param.unpack(x, n);
                if linalg::symmetric_eigenvalues(&p).first().is_none_or(|&l| l <= 0.0) {
                    return Ok((f64::INFINITY, DVector::zeros(x.len())));
                }
                let (value, _, grad) = smoothed_max(systems, &p, alpha, beta, c, tau)?;
                Ok((value, param.pull_back(x, &grad)))
            };
            x = bfgs(objective, x, 400, 1e-10)?;
            let p = param.unpack(&x, n);
            if linalg::symmetric_eigenvalues(&p).first().is_some_and(|&l| l > 0.0)
                && worst_of(systems, &p, alpha, beta, c)? <= -1e-3
            {
                break;
            }
        }
        let p = param.unpack(&x, n);
        if linalg::symmetric_eigenvalues(&p).first().is_some_and(|&l| l > 0.0) {
            let w = worst_of(systems, &p, alpha, beta, c)?;
            if w < best.0 {
                best = (w, p);
            }
        }
        if best.0 <= -NSD_TOL {
            break;
        }
    }
    Ok(best.1)
}

/// Vertex verification of the extended-system inequality.
///
/// With `p = None` a candidate is produced by [`search_p`].
#[allow(clippy::too_many_arguments)]
pub fn verify_theorem3(
    plant: &SectorPlant,
    gains: &OutputFeedbackGain,
    transform: &Transform,
    alpha: f64,
    c: f64,
    time_grid: &[f64],
    opts: &VertexOptions,
    p: Option<DMatrix<f64>>,
) -> Result<CertificateReport, CertificateError> {
    let axes = vertex_axes(transform, time_grid, opts);
    let systems = vertex_set(&axes)
        .into_iter()
        .map(|j| build_extended_system(plant, gains, &j))
        .collect::<Result<Vec<_>, _>>()?;

    let mut flags = vec![format!(
        "inverse Jacobian is unbounded as |eps| grows; vertices truncated at {:.3e}, so the certificate holds only while (dPhi/deps)^-1 stays below it",
        opts.cap
    )];
    let (outer, inner) = gains.loop_checks(&plant.base);
    if !outer {
        flags.push("A + B K1 L is not Hurwitz".into());
    }
    if !inner {
        flags.push("L B gamma K2 is not Hurwitz".into());
    }

    let (p, beta) = match p {
        Some(p) => {
            check_pd(&p)?;
            let (beta, _) = best_beta(&systems, &p, alpha, c, &opts.beta_grid)?;
            (p, beta)
        }
        None => match search_p(&systems, alpha, c, &opts.beta_grid) {
            Ok(found) => found,
            Err(CertificateError::NonHurwitzNominal(abscissa)) => {
                flags.push(format!("A_e + alpha/2 I is not Hurwitz at the nominal vertex (abscissa {abscissa:.4e}); no Lyapunov candidate exists"));
                let dim = systems[0].dim();
                let p = DMatrix::identity(dim, dim);
                let (beta, _) = best_beta(&systems, &p, alpha, c, &opts.beta_grid)?;
                (p, beta)
            }
            Err(e) => return Err(e),
        },
    };
    let report_beta = beta.unwrap_or(*opts.beta_grid.last().unwrap_or(&0.0));
    let eigs = evaluate(&systems, &p, alpha, report_beta, c)?;
    let vertices = systems
        .iter()
        .zip(eigs)
        .map(|(s, max_eig)| VertexResult { jac_inv: s.jac_inv.clone(), max_eig })
        .collect::<Vec<_>>();
    let feasible = beta.is_some() && vertices.iter().all(|v| v.max_eig <= NSD_TOL);
    Ok(CertificateReport { feasible, beta, alpha, sector_bound: c, cap: opts.cap, vertices, p, hypothesis_flags: flags })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::mat;
    use crate::plants::{LinearPlant, Nonlinearity};

    #[test]
    fn scalar_lmi_examples() {
        let r = lmi_theorem2(0.5, 1.0);
        assert!(r.feasible);
        assert!((r.beta_min.unwrap() - 0.5).abs() < 1e-15);
        assert!(!lmi_theorem2(1.0, 1.0).feasible);
        let ev = linalg::symmetric_eigenvalues(&lmi_theorem2_matrix(0.5, 1.0, 0.5));
        assert!((ev[0] + 1.0).abs() < 1e-15 && ev[1].abs() < 1e-15);
    }

    #[test]
    fn sym_eig_max_examples() {
        let d = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![1.0, 2.0, 3.0]));
        assert!((sym_eig_max(&d) - 3.0).abs() < 1e-14);
        assert!((sym_eig_max(&mat(&[&[0.0, 1.0], &[1.0, 0.0]])) - 1.0).abs() < 1e-14);
    }

    fn small_plant() -> SectorPlant {
        let base = LinearPlant::new(
            mat(&[&[-1.0, 0.5], &[0.0, -2.0]]),
            mat(&[&[1.0], &[1.0]]),
            mat(&[&[1.0], &[0.0]]),
            mat(&[&[1.0, 0.0]]),
        )
        .unwrap();
        SectorPlant::new(base, DMatrix::zeros(2, 2), Nonlinearity::Zero, 0.0).unwrap()
    }

    fn zero_gains(n: usize, m: usize, v: usize) -> OutputFeedbackGain {
        OutputFeedbackGain::new(DMatrix::zeros(m, v), DMatrix::zeros(m, v), 1.0, DMatrix::zeros(n, v), DMatrix::zeros(v, v)).unwrap()
    }

    #[test]
    fn zero_gains_reduce_to_plant() {
        let sp = small_plant();
        let sys = build_extended_system(&sp, &zero_gains(2, 1, 1), &[1.0]).unwrap();
        let la = &sp.base.l * &sp.base.a;
        let want = mat(&[&[-1.0, 0.5, 0.0], &[0.0, -2.0, 0.0], &[la[(0, 0)], la[(0, 1)], 0.0]]);
        assert_eq!(sys.a_e, want);
        // D22 = -J in the eps rows
        let sys = build_extended_system(&sp, &zero_gains(2, 1, 1), &[7.5]).unwrap();
        assert_eq!(sys.d_e[(2, 1)], -7.5);
        assert!(build_extended_system(&sp, &zero_gains(2, 1, 1), &[0.0]).is_err());
        assert!(build_extended_system(&sp, &zero_gains(2, 1, 1), &[1.0, 2.0]).is_err());
    }

    #[test]
    fn lyapunov_identity_block() {
        let sp = small_plant();
        let mut g = zero_gains(2, 1, 1);
        // T2 = 1 cancels the first entry of LA; the spectrum is {-1, -1.5 +- 0.5i}
        g.k2 = mat(&[&[-1.0]]);
        g.t2 = mat(&[&[1.0]]);
        let sys = build_extended_system(&sp, &g, &[1.0]).unwrap();
        assert!(is_hurwitz_matrix(&sys.a_e));
        let p = solve_lyapunov(&sys.a_e, &DMatrix::identity(3, 3)).unwrap();
        let m = theorem3_block_matrix(&sys, &p, 0.0, 1.0, 0.0).unwrap();
        let psi = m.view((0, 0), (3, 3)).clone_owned();
        assert!((psi + DMatrix::<f64>::identity(3, 3)).abs().max() < 1e-12);
        assert_eq!(m, m.transpose());
    }

    #[test]
    fn non_pd_p_rejected() {
        let sp = small_plant();
        let sys = build_extended_system(&sp, &zero_gains(2, 1, 1), &[1.0]).unwrap();
        let p = -DMatrix::<f64>::identity(3, 3);
        assert!(matches!(theorem3_block_matrix(&sys, &p, 0.1, 1.0, 0.0), Err(CertificateError::NonPositiveP(_))));
    }

    #[test]
    fn search_diagonal_case() {
        // A_e = -I, alpha = 0.5, C = 0: P = c I works for any c > 0 with large beta
        let sys = ExtendedSystem {
            a_e: -DMatrix::identity(2, 2),
            g_e: DMatrix::zeros(2, 1),
            d_e: DMatrix::identity(2, 2),
            e: mat(&[&[1.0, 0.0]]),
            jac_inv: vec![1.0],
        };
        let (p, beta) = search_p(std::slice::from_ref(&sys), 0.5, 0.0, &default_beta_grid()).unwrap();
        let beta = beta.expect("diagonal case is feasible");
        assert!(sym_eig_max(&theorem3_block_matrix(&sys, &p, 0.5, beta, 0.0).unwrap()) <= NSD_TOL);
    }

    #[test]
    fn search_rejects_unstable_nominal() {
        let sys = ExtendedSystem {
            a_e: DMatrix::identity(2, 2),
            g_e: DMatrix::zeros(2, 1),
            d_e: DMatrix::identity(2, 2),
            e: mat(&[&[1.0, 0.0]]),
            jac_inv: vec![1.0],
        };
        assert!(matches!(search_p(&[sys], 0.5, 0.0, &default_beta_grid()), Err(CertificateError::NonHurwitzNominal(_))));
    }

    #[test]
    fn lyapunov_solution_satisfies_equation() {
        let a = mat(&[&[-1.0, 2.0, 0.0], &[0.0, -3.0, 1.0], &[0.5, 0.0, -2.0]]);
        let q = mat(&[&[2.0, 0.1, 0.0], &[0.1, 1.0, 0.0], &[0.0, 0.0, 3.0]]);
        let p = solve_lyapunov(&a, &q).unwrap();
        let resid = a.transpose() * &p + &p * &a + &q;
        assert!(resid.abs().max() < 1e-12);
    }

    #[test]
    fn vertex_product() {
        let v = vertex_set(&[vec![1.0, 2.0], vec![3.0, 4.0, 5.0]]);
        assert_eq!(v.len(), 6);
        assert_eq!(v[0], vec![1.0, 3.0]);
        assert_eq!(v[5], vec![2.0, 5.0]);
    }
}
