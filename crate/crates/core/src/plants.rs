//! Plant models and the polynomial machinery for transfer-operator form.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::linalg;
use crate::poly::Poly;

/// Largest state dimension accepted by [`char_poly_adjugate`].
pub const MAX_FADDEEV_DIM: usize = 12;

/// Leading-coefficient threshold for degree detection of transfer numerators.
pub const DEGREE_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PlantError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("matrix dimension {0} exceeds the supported maximum of {MAX_FADDEEV_DIM}")]
    TooLarge(usize),
    #[error("transfer numerator L adj(pI - A) B vanishes identically")]
    DegenerateTransfer,
    #[error("denominator polynomial is identically zero")]
    ZeroDenominator,
    #[error("numerator degree {num} exceeds denominator degree {den}")]
    Improper { num: usize, den: usize },
    #[error("nonlinearity violates the sector bound: |phi(x)| = {phi_norm} > {bound} |x| = {limit}")]
    SectorViolation { phi_norm: f64, bound: f64, limit: f64 },
}

/// `x' = A x + B u + D f`, `y = L x`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearPlant {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub d: DMatrix<f64>,
    pub l: DMatrix<f64>,
}

impl LinearPlant {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, d: DMatrix<f64>, l: DMatrix<f64>) -> Result<Self, PlantError> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(PlantError::Dimension(format!("A is {}x{}", a.nrows(), a.ncols())));
        }
        if b.nrows() != n || d.nrows() != n || l.ncols() != n {
            return Err(PlantError::Dimension(format!(
                "A is {n}x{n} but B has {} rows, D has {} rows, L has {} columns",
                b.nrows(),
                d.nrows(),
                l.ncols()
            )));
        }
        Ok(LinearPlant { a, b, d, l })
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn m(&self) -> usize {
        self.b.ncols()
    }

    pub fn l_dim(&self) -> usize {
        self.d.ncols()
    }

    pub fn v(&self) -> usize {
        self.l.nrows()
    }

    pub fn rhs(&self, x: &DVector<f64>, u: &DVector<f64>, f: &DVector<f64>) -> DVector<f64> {
        &self.a * x + &self.b * u + &self.d * f
    }

    pub fn output(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.l * x
    }

    /// Rank test on `[B, AB, ..., A^{n-1} B]`.
    pub fn is_controllable(&self) -> bool {
        let n = self.n();
        let mut blocks = Vec::with_capacity(n);
        let mut cur = self.b.clone();
        for _ in 0..n {
            blocks.push(cur.clone());
            cur = &self.a * cur;
        }
        let k = DMatrix::from_fn(n, n * self.m(), |i, j| blocks[j / self.m()][(i, j % self.m())]);
        linalg::rank(&k, 1e-8) == n
    }

    /// Rank test on `[L; LA; ...; L A^{n-1}]`.
    pub fn is_observable(&self) -> bool {
        let n = self.n();
        let v = self.v();
        let mut blocks = Vec::with_capacity(n);
        let mut cur = self.l.clone();
        for _ in 0..n {
            blocks.push(cur.clone());
            cur = &cur * &self.a;
        }
        let o = DMatrix::from_fn(n * v, n, |i, j| blocks[i / v][(i % v, j)]);
        linalg::rank(&o, 1e-8) == n
    }

    pub fn is_hurwitz(&self) -> bool {
        linalg::spectral_abscissa(&self.a) < -1e-10
    }
}

/// Built-in sector-bounded nonlinearities `phi(x, t)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Nonlinearity {
    Zero,
    /// `sin` applied to each state component (`k = n`).
    ElementwiseSine,
}

impl Nonlinearity {
    pub fn eval(self, x: &DVector<f64>, _t: f64) -> DVector<f64> {
        match self {
            Nonlinearity::Zero => DVector::zeros(x.len()),
            Nonlinearity::ElementwiseSine => x.map(f64::sin),
        }
    }
}

/// `x' = A x + G phi(x, t) + B u + D f` with `|phi(x, t)| <= C |x|`.
#[derive(Debug, Clone, PartialEq)]
pub struct SectorPlant {
    pub base: LinearPlant,
    pub g: DMatrix<f64>,
    pub nonlinearity: Nonlinearity,
    pub sector_bound: f64,
}

impl SectorPlant {
    /// Validates dimensions and checks the sector bound on random samples.
    pub fn new(base: LinearPlant, g: DMatrix<f64>, nonlinearity: Nonlinearity, sector_bound: f64) -> Result<Self, PlantError> {
        let n = base.n();
        if g.nrows() != n || g.ncols() != n {
            // both built-ins produce one output per state
            return Err(PlantError::Dimension(format!("G is {}x{}, expected {n}x{n}", g.nrows(), g.ncols())));
        }
        let plant = SectorPlant { base, g, nonlinearity, sector_bound };
        plant.check_sector(2000, 0x5ec7)?;
        Ok(plant)
    }

    pub fn k(&self) -> usize {
        self.g.ncols()
    }

    fn check_sector(&self, samples: usize, seed: u64) -> Result<(), PlantError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = self.base.n();
        for i in 0..samples {
            // mix of scales so both the linear region and large arguments are probed
            let scale = 10f64.powi((i % 7) as i32 - 3);
            let x = DVector::from_fn(n, |_, _| scale * rng.random_range(-1.0..1.0));
            let t = rng.random_range(0.0..100.0);
            let phi = self.nonlinearity.eval(&x, t).norm();
            let limit = self.sector_bound * x.norm();
            if phi > limit * (1.0 + 1e-12) {
                return Err(PlantError::SectorViolation { phi_norm: phi, bound: self.sector_bound, limit });
            }
        }
        Ok(())
    }

    pub fn rhs(&self, x: &DVector<f64>, u: &DVector<f64>, f: &DVector<f64>, t: f64) -> DVector<f64> {
        self.base.rhs(x, u, f) + &self.g * self.nonlinearity.eval(x, t)
    }
}

/// Characteristic polynomial and adjugate coefficients of `pI - A` by the
/// Faddeev-LeVerrier recursion.
///
/// Returns `q` (monic, descending) and `adj` with `adj(pI - A) = sum_j adj[j] p^j`.
pub fn char_poly_adjugate(a: &DMatrix<f64>) -> Result<(Poly, Vec<DMatrix<f64>>), PlantError> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(PlantError::Dimension(format!("A is {}x{}", a.nrows(), a.ncols())));
    }
    if n > MAX_FADDEEV_DIM {
        return Err(PlantError::TooLarge(n));
    }
    if n == 0 {
        return Ok((Poly::constant(1.0), Vec::new()));
    }
    let eye = DMatrix::<f64>::identity(n, n);
    // desc[k] multiplies p^{n-1-k}
    let mut desc = Vec::with_capacity(n);
    let mut q = vec![1.0];
    let mut m = eye.clone();
    for k in 1..=n {
        desc.push(m.clone());
        let am = a * &m;
        let c = -am.trace() / k as f64;
        q.push(c);
        m = am + &eye * c;
    }
    desc.reverse();
    Ok((Poly::new(q), desc))
}

/// SISO transfer-operator form `y = R(p)/Q(p) u + Dp(p)/Q(p) f`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferForm {
    pub q: Poly,
    pub r: Poly,
    pub dp: Poly,
    pub rho: usize,
}

fn adjugate_product(adj: &[DMatrix<f64>], left: &DMatrix<f64>, right: &DMatrix<f64>) -> Poly {
    let asc: Vec<f64> = adj.iter().map(|mj| (left * mj * right)[(0, 0)]).collect();
    Poly::from_ascending(asc)
}

pub fn transfer_from_state_space(plant: &LinearPlant) -> Result<TransferForm, PlantError> {
    if plant.m() != 1 || plant.v() != 1 || plant.l_dim() != 1 {
        return Err(PlantError::Dimension(format!(
            "transfer form needs a single input, output and disturbance channel, got m={}, v={}, l={}",
            plant.m(),
            plant.v(),
            plant.l_dim()
        )));
    }
    let (q, adj) = char_poly_adjugate(&plant.a)?;
    let r = adjugate_product(&adj, &plant.l, &plant.b).trimmed(DEGREE_TOL);
    if r.is_zero() {
        return Err(PlantError::DegenerateTransfer);
    }
    let dp = adjugate_product(&adj, &plant.l, &plant.d).trimmed(DEGREE_TOL);
    let rho = q.degree() - r.degree();
    Ok(TransferForm { q, r, dp, rho })
}

/// Controllable-canonical state-space realization of a proper SISO ratio.
#[derive(Debug, Clone, PartialEq)]
pub struct SisoRealization {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub c: DVector<f64>,
    pub d: f64,
}

impl SisoRealization {
    pub fn order(&self) -> usize {
        self.a.nrows()
    }

    /// `C (sI - A)^{-1} B + d`
    pub fn frequency_response(&self, s: nalgebra::Complex<f64>) -> nalgebra::Complex<f64> {
        use nalgebra::Complex;
        let n = self.order();
        if n == 0 {
            return Complex::new(self.d, 0.0);
        }
        let m = DMatrix::from_fn(n, n, |i, j| {
            let diag = if i == j { s } else { Complex::new(0.0, 0.0) };
            diag - Complex::new(self.a[(i, j)], 0.0)
        });
        let rhs = nalgebra::DVector::from_fn(n, |i, _| Complex::new(self.b[i], 0.0));
        let sol = m.lu().solve(&rhs).expect("sI - A singular at sample point");
        let cx: Complex<f64> = (0..n).map(|i| sol[i] * self.c[i]).sum();
        cx + self.d
    }

    pub fn state_rate(&self, xc: &DVector<f64>, input: f64) -> DVector<f64> {
        &self.a * xc + &self.b * input
    }

    pub fn output(&self, xc: &DVector<f64>, input: f64) -> f64 {
        self.c.dot(xc) + self.d * input
    }
}

pub fn realize_siso(num: &Poly, den: &Poly) -> Result<SisoRealization, PlantError> {
    let den = den.trimmed(0.0);
    if den.is_zero() {
        return Err(PlantError::ZeroDenominator);
    }
    let num = num.trimmed(0.0);
    let n = den.degree();
    if !num.is_zero() && num.degree() > n {
        return Err(PlantError::Improper { num: num.degree(), den: n });
    }
    let lead = den.lead();
    let den_monic = den.scale(1.0 / lead);
    let num_n = num.scale(1.0 / lead);
    // pad numerator to n + 1 coefficients
    let mut nc = vec![0.0; n + 1 - num_n.coeffs().len().min(n + 1)];
    nc.extend_from_slice(num_n.coeffs());
    let d = nc[0];
    // strictly proper remainder: num/lead - d * den_monic, degree < n
    let rem: Vec<f64> = (1..=n).map(|i| nc[i] - d * den_monic.coeffs()[i]).collect();
    let a = DMatrix::from_fn(n, n, |i, j| {
        if i + 1 < n {
            if j == i + 1 { 1.0 } else { 0.0 }
        } else {
            -den_monic.coeffs()[n - j]
        }
    });
    let mut b = DVector::zeros(n);
    if n > 0 {
        b[n - 1] = 1.0;
    }
    // rem is descending in p^{n-1}..p^0; state j carries p^j
    let c = DVector::from_fn(n, |j, _| rem[n - 1 - j]);
    Ok(SisoRealization { a, b, c, d })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{col, mat};
    use nalgebra::Complex;

    fn example5() -> LinearPlant {
        LinearPlant::new(
            mat(&[&[0.0, 1.0], &[1.0, 2.0]]),
            mat(&[&[0.0], &[1.0]]),
            mat(&[&[1.0], &[1.0]]),
            mat(&[&[1.0, 2.0]]),
        )
        .unwrap()
    }

    fn example7() -> LinearPlant {
        LinearPlant::new(
            mat(&[&[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0], &[-1.0, -3.0, -3.0]]),
            mat(&[&[0.0], &[0.0], &[1.0]]),
            mat(&[&[1.0], &[1.0], &[1.0]]),
            mat(&[&[1.0, 0.0, 0.0]]),
        )
        .unwrap()
    }

    #[test]
    fn linear_rhs_examples() {
        let p = example5();
        let z = DVector::zeros(1);
        assert_eq!(p.rhs(&DVector::zeros(2), &z, &z), DVector::zeros(2));
        assert_eq!(p.rhs(&col(&[2.0, 1.0]), &z, &z), col(&[1.0, 4.0]));
        assert!(p.is_controllable() && p.is_observable());
        assert!(!p.is_hurwitz());
    }

    #[test]
    fn input_cancellation() {
        let p = example5();
        // B = e2, so Ax in range(B) needs (Ax)_1 = x2 = 0
        let x = col(&[0.7, 0.0]);
        let ax2 = &p.a * &x;
        assert_eq!(ax2[0], 0.0);
        let pinv = p.b.clone().pseudo_inverse(1e-12).unwrap();
        let u = -(&pinv * &ax2);
        let xdot = p.rhs(&x, &u, &DVector::zeros(1));
        assert!(xdot.norm() < 1e-15);
    }

    #[test]
    fn dimension_errors() {
        let e = LinearPlant::new(DMatrix::zeros(2, 2), DMatrix::zeros(3, 1), DMatrix::zeros(2, 1), DMatrix::zeros(1, 2));
        assert!(matches!(e, Err(PlantError::Dimension(_))));
    }

    #[test]
    fn sector_plant_reduces_to_linear() {
        let base = example7();
        let sp = SectorPlant::new(base.clone(), DMatrix::from_element(3, 3, 0.2), Nonlinearity::Zero, 1.0).unwrap();
        let x = col(&[0.5, -0.1, 2.0]);
        let u = col(&[0.3]);
        let f = col(&[-1.0]);
        assert_eq!(sp.rhs(&x, &u, &f, 0.4), base.rhs(&x, &u, &f));
    }

    #[test]
    fn sine_violates_small_sector() {
        let e = SectorPlant::new(example7(), DMatrix::zeros(3, 3), Nonlinearity::ElementwiseSine, 0.5);
        assert!(matches!(e, Err(PlantError::SectorViolation { .. })));
        assert!(SectorPlant::new(example7(), DMatrix::zeros(3, 3), Nonlinearity::ElementwiseSine, 1.0).is_ok());
    }

    #[test]
    fn example7_char_poly() {
        let (q, adj) = char_poly_adjugate(&example7().a).unwrap();
        assert_eq!(q, Poly::new(vec![1.0, 3.0, 3.0, 1.0]));
        assert_eq!(adj.len(), 3);
        assert_eq!(adj[2], DMatrix::identity(3, 3));
    }

    #[test]
    fn identity_char_poly() {
        let (q, adj) = char_poly_adjugate(&DMatrix::identity(2, 2)).unwrap();
        assert_eq!(q, Poly::new(vec![1.0, -2.0, 1.0]));
        // adj(pI - I) = (p - 1) I
        assert_eq!(adj[1], DMatrix::identity(2, 2));
        assert_eq!(adj[0], -DMatrix::identity(2, 2));
    }

    #[test]
    fn too_large_rejected() {
        assert_eq!(char_poly_adjugate(&DMatrix::zeros(13, 13)), Err(PlantError::TooLarge(13)));
    }

    #[test]
    fn example7_transfer() {
        let tf = transfer_from_state_space(&example7()).unwrap();
        assert_eq!(tf.rho, 3);
        assert_eq!(tf.r, Poly::constant(1.0));
        assert_eq!(tf.q, Poly::new(vec![1.0, 3.0, 3.0, 1.0]));
        // eliminating x2, x3 from the companion equations gives p^2 + 4p + 7
        assert_eq!(tf.dp, Poly::new(vec![1.0, 4.0, 7.0]));
    }

    #[test]
    fn integrator_transfer() {
        let p = LinearPlant::new(mat(&[&[0.0]]), mat(&[&[1.0]]), mat(&[&[1.0]]), mat(&[&[1.0]])).unwrap();
        let tf = transfer_from_state_space(&p).unwrap();
        assert_eq!(tf.q, Poly::new(vec![1.0, 0.0]));
        assert_eq!(tf.r, Poly::constant(1.0));
        assert_eq!(tf.rho, 1);
    }

    #[test]
    fn degenerate_transfer() {
        let p = LinearPlant::new(mat(&[&[-1.0, 0.0], &[0.0, -2.0]]), mat(&[&[1.0], &[0.0]]), mat(&[&[1.0], &[1.0]]), mat(&[&[0.0, 1.0]])).unwrap();
        assert_eq!(transfer_from_state_space(&p), Err(PlantError::DegenerateTransfer));
    }

    #[test]
    fn first_order_lag_realization() {
        let r = realize_siso(&Poly::constant(1.0), &Poly::new(vec![1.0, 1.0])).unwrap();
        assert_eq!(r.order(), 1);
        assert_eq!(r.d, 0.0);
        assert_eq!(r.a[(0, 0)], -1.0);
    }

    #[test]
    fn identity_realization() {
        let p = Poly::new(vec![2.0, 3.0, 1.0]);
        let r = realize_siso(&p, &p).unwrap();
        assert_eq!(r.d, 1.0);
        for s in [Complex::new(1.0, 0.0), Complex::new(0.0, 2.0)] {
            assert!((r.frequency_response(s) - Complex::new(1.0, 0.0)).norm() < 1e-14);
        }
    }

    #[test]
    fn realization_errors() {
        assert_eq!(realize_siso(&Poly::constant(1.0), &Poly::new(vec![0.0, 0.0])), Err(PlantError::ZeroDenominator));
        assert_eq!(
            realize_siso(&Poly::new(vec![1.0, 0.0, 0.0]), &Poly::new(vec![1.0, 1.0])),
            Err(PlantError::Improper { num: 2, den: 1 })
        );
    }
}
