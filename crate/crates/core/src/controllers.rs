//! The three control laws and their validity checks.
//!
//! * [`StateFeedbackGain`]: `u = -(LB)^{-1} (L A x + K eps)` for relative degree one
//!   with measured state.
//! * [`OutputFeedbackGain`]: `u = K1 y + gamma K2 eps`, independent of the plant.
//! * [`FilteredController`]: `u = -K Q(p) / (R(p) (p (mu p + 1)^{rho-1} + a mu)) eps`
//!   for arbitrary relative degree.

use nalgebra::{Complex, DMatrix, DVector};

use crate::linalg;
use crate::plants::{realize_siso, LinearPlant, PlantError, SisoRealization};
use crate::poly::Poly;

/// Real parts must lie below `-HURWITZ_MARGIN`.
pub const HURWITZ_MARGIN: f64 = 1e-10;

/// `|LB|` at or below this is treated as singular.
pub const LB_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ControlError {
    #[error("LB = {0:e} is singular; the plant does not have relative degree one")]
    SingularLB(f64),
    #[error("state feedback needs a single input and output (m = {m}, v = {v})")]
    NotSiso { m: usize, v: usize },
    #[error("filter polynomial {0} is not Hurwitz; choose smaller mu or different a")]
    NonHurwitzFilter(Poly),
    #[error("invalid gain: {0}")]
    InvalidGain(String),
    #[error(transparent)]
    Plant(#[from] PlantError),
}

/// True iff every root has real part below `-HURWITZ_MARGIN`.
///
/// Roots are the eigenvalues of the companion matrix. Leading zeros are
/// rejected by returning `false`.
pub fn hurwitz_poly(coeffs: &[f64]) -> bool {
    if coeffs.is_empty() || coeffs[0] == 0.0 {
        return false;
    }
    if coeffs.len() == 1 {
        return true;
    }
    linalg::spectral_abscissa(&linalg::companion(coeffs)) < -HURWITZ_MARGIN
}

pub fn is_hurwitz_matrix(m: &DMatrix<f64>) -> bool {
    linalg::spectral_abscissa(m) < -HURWITZ_MARGIN
}

fn siso_lb(plant: &LinearPlant) -> Result<f64, ControlError> {
    if plant.m() != 1 || plant.v() != 1 {
        return Err(ControlError::NotSiso { m: plant.m(), v: plant.v() });
    }
    let lb = (&plant.l * &plant.b)[(0, 0)];
    if lb.abs() <= LB_TOL {
        return Err(ControlError::SingularLB(lb));
    }
    Ok(lb)
}

/// `A - B (LB)^{-1} L A - T L`
pub fn injected_matrix(plant: &LinearPlant, t: &DVector<f64>) -> Result<DMatrix<f64>, ControlError> {
    let lb = siso_lb(plant)?;
    let la = &plant.l * &plant.a;
    Ok(&plant.a - &plant.b * (&la / lb) - t * &plant.l)
}

/// `(I - (LB)^{-1} B L) A - T L`; equals [`injected_matrix`] for scalar `LB`.
pub fn injected_matrix_stated(plant: &LinearPlant, t: &DVector<f64>) -> Result<DMatrix<f64>, ControlError> {
    let lb = siso_lb(plant)?;
    let n = plant.n();
    let proj = DMatrix::<f64>::identity(n, n) - (&plant.b * &plant.l) / lb;
    Ok(proj * &plant.a - t * &plant.l)
}

/// Whether the injection vector `T` makes `A - B (LB)^{-1} L A - T L` Hurwitz.
pub fn check_t_matrix(plant: &LinearPlant, t: &DVector<f64>) -> Result<bool, ControlError> {
    Ok(is_hurwitz_matrix(&injected_matrix(plant, t)?))
}

/// State feedback for relative-degree-one SISO plants.
#[derive(Debug, Clone, PartialEq)]
pub struct StateFeedbackGain {
    pub k: f64,
    /// Injection vector used only in the closed-loop analysis.
    pub t: DVector<f64>,
}

impl StateFeedbackGain {
    pub fn new(k: f64, t: DVector<f64>) -> Result<Self, ControlError> {
        if !(k > 0.0 && k.is_finite()) {
            return Err(ControlError::InvalidGain(format!("K must be positive, got {k}")));
        }
        Ok(StateFeedbackGain { k, t })
    }

    pub fn control(&self, plant: &LinearPlant, x: &DVector<f64>, eps: f64) -> Result<f64, ControlError> {
        let lb = siso_lb(plant)?;
        let lax = (&plant.l * &plant.a * x)[0];
        Ok(-(lax + self.k * eps) / lb)
    }
}

/// Static output feedback `u = K1 y + gamma K2 eps`.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputFeedbackGain {
    pub k1: DMatrix<f64>,
    pub k2: DMatrix<f64>,
    pub gamma: f64,
    /// Analysis injections of the extended system, `n x v` and `v x v`.
    pub t1: DMatrix<f64>,
    pub t2: DMatrix<f64>,
}

impl OutputFeedbackGain {
    pub fn new(k1: DMatrix<f64>, k2: DMatrix<f64>, gamma: f64, t1: DMatrix<f64>, t2: DMatrix<f64>) -> Result<Self, ControlError> {
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(ControlError::InvalidGain(format!("gamma must be positive, got {gamma}")));
        }
        if k1.shape() != k2.shape() {
            return Err(ControlError::InvalidGain(format!("K1 is {:?} but K2 is {:?}", k1.shape(), k2.shape())));
        }
        let v = k1.ncols();
        if t1.ncols() != v || t2.shape() != (v, v) {
            return Err(ControlError::InvalidGain(format!("T1 {:?} / T2 {:?} do not match v = {v}", t1.shape(), t2.shape())));
        }
        if k1.iter().chain(k2.iter()).chain(t1.iter()).chain(t2.iter()).any(|x| !x.is_finite()) {
            return Err(ControlError::InvalidGain("non-finite entry".into()));
        }
        Ok(OutputFeedbackGain { k1, k2, gamma, t1, t2 })
    }

    pub fn control(&self, y: &DVector<f64>, eps: &DVector<f64>) -> DVector<f64> {
        &self.k1 * y + (&self.k2 * eps) * self.gamma
    }

    /// `gamma K2`, the gain the extended system actually sees.
    pub fn effective_k2(&self) -> DMatrix<f64> {
        &self.k2 * self.gamma
    }

    /// Hurwitz checks of `A + B K1 L` and `L B gamma K2` (reported, not enforced).
    pub fn loop_checks(&self, plant: &LinearPlant) -> (bool, bool) {
        let outer = &plant.a + &plant.b * &self.k1 * &plant.l;
        let inner = &plant.l * &plant.b * self.effective_k2();
        (is_hurwitz_matrix(&outer), is_hurwitz_matrix(&inner))
    }
}

/// Dynamic output feedback for plants of arbitrary relative degree. The
/// controller reads `eps` and produces `u`.
#[derive(Debug, Clone, PartialEq)]
pub struct FilteredController {
    pub k: f64,
    pub mu: f64,
    pub a: f64,
    pub rho: usize,
    /// `p (mu p + 1)^{rho-1} + a mu`
    pub filter: Poly,
    pub numerator: Poly,
    pub denominator: Poly,
    pub realization: SisoRealization,
}

impl FilteredController {
    pub fn build(q: &Poly, r: &Poly, k: f64, mu: f64, a: f64) -> Result<Self, ControlError> {
        for (name, val) in [("K", k), ("mu", mu), ("a", a)] {
            if !(val > 0.0 && val.is_finite()) {
                return Err(ControlError::InvalidGain(format!("{name} must be positive, got {val}")));
            }
        }
        let rho = q
            .degree()
            .checked_sub(r.degree())
            .filter(|&d| d >= 1)
            .ok_or_else(|| ControlError::InvalidGain(format!("deg Q = {} must exceed deg R = {}", q.degree(), r.degree())))?;
        let filter = filter_polynomial(mu, a, rho);
        if !hurwitz_poly(filter.coeffs()) {
            return Err(ControlError::NonHurwitzFilter(filter));
        }
        let numerator = q.scale(-k);
        let denominator = r.mul(&filter);
        let realization = realize_siso(&numerator, &denominator)?;
        Ok(FilteredController { k, mu, a, rho, filter, numerator, denominator, realization })
    }

    pub fn order(&self) -> usize {
        self.realization.order()
    }

    /// `-K Q(s) / (R(s) Delta(s))` evaluated directly from the polynomials.
    pub fn transfer(&self, s: Complex<f64>) -> Complex<f64> {
        self.numerator.eval(s) / self.denominator.eval(s)
    }
}

/// `p (mu p + 1)^{rho-1} + a mu`
pub fn filter_polynomial(mu: f64, a: f64, rho: usize) -> Poly {
    let lag = Poly::binomial(mu, rho.saturating_sub(1));
    &Poly::identity().mul(&lag) + &Poly::constant(a * mu)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{col, mat};

    fn example5() -> LinearPlant {
        LinearPlant::new(
            mat(&[&[0.0, 1.0], &[1.0, 2.0]]),
            mat(&[&[0.0], &[1.0]]),
            mat(&[&[1.0], &[1.0]]),
            mat(&[&[1.0, 2.0]]),
        )
        .unwrap()
    }

    #[test]
    fn state_feedback_examples() {
        let p = example5();
        let g = StateFeedbackGain::new(1.0, col(&[1.0, 1.0])).unwrap();
        assert_eq!(g.control(&p, &col(&[0.0, 0.0]), 0.0).unwrap(), 0.0);
        assert_eq!(g.control(&p, &col(&[2.0, 1.0]), 0.0).unwrap(), -4.5);
        assert_eq!(g.control(&p, &col(&[0.0, 0.0]), 1.0).unwrap(), -0.5);
        assert!(StateFeedbackGain::new(0.0, col(&[1.0, 1.0])).is_err());
    }

    #[test]
    fn singular_lb() {
        let p = LinearPlant::new(mat(&[&[0.0, 1.0], &[0.0, 0.0]]), mat(&[&[0.0], &[1.0]]), mat(&[&[0.0], &[1.0]]), mat(&[&[1.0, 0.0]])).unwrap();
        let g = StateFeedbackGain::new(1.0, col(&[1.0, 1.0])).unwrap();
        assert!(matches!(g.control(&p, &col(&[1.0, 1.0]), 0.0), Err(ControlError::SingularLB(_))));
        assert!(matches!(check_t_matrix(&p, &col(&[1.0, 1.0])), Err(ControlError::SingularLB(_))));
    }

    #[test]
    fn t_matrix_examples() {
        let p = example5();
        assert!(check_t_matrix(&p, &col(&[1.0, 1.0])).unwrap());
        // T = 0 leaves the eigenvalue 0 of the y-direction in place
        assert!(!check_t_matrix(&p, &col(&[0.0, 0.0])).unwrap());
        let m = injected_matrix(&p, &col(&[0.0, 0.0])).unwrap();
        assert_eq!(m, mat(&[&[0.0, 1.0], &[0.0, -0.5]]));
    }

    #[test]
    fn scalar_t_matrix() {
        for (t0, want) in [(2.0, true), (-1.0, false), (0.0, false)] {
            let p = LinearPlant::new(mat(&[&[0.7]]), mat(&[&[1.0]]), mat(&[&[1.0]]), mat(&[&[1.0]])).unwrap();
            // A - B A - T = -t0
            let m = injected_matrix(&p, &col(&[t0])).unwrap();
            assert!((m[(0, 0)] + t0).abs() < 1e-15);
            assert_eq!(check_t_matrix(&p, &col(&[t0])).unwrap(), want);
        }
    }

    #[test]
    fn stated_and_proof_forms_agree() {
        let p = example5();
        for t in [col(&[1.0, 1.0]), col(&[0.3, -2.0]), col(&[0.0, 0.0])] {
            let a = injected_matrix(&p, &t).unwrap();
            let b = injected_matrix_stated(&p, &t).unwrap();
            assert!((a - b).abs().max() < 1e-15);
        }
    }

    #[test]
    fn output_feedback_examples() {
        let k1 = mat(&[&[0.0, 0.0], &[-0.01, -0.01]]);
        let k2 = mat(&[&[1.5, -1.75], &[-1.0, 1.0]]);
        let g = OutputFeedbackGain::new(k1.clone(), k2.clone(), 1.0, DMatrix::zeros(3, 2), DMatrix::zeros(2, 2)).unwrap();
        assert_eq!(g.control(&col(&[0.0, 0.0]), &col(&[0.0, 0.0])), col(&[0.0, 0.0]));
        let u = g.control(&col(&[3.0, 2.0]), &col(&[0.0, 0.0]));
        assert!((u - col(&[0.0, -0.05])).norm() < 1e-16);
        let g10 = OutputFeedbackGain { gamma: 10.0, ..g.clone() };
        let (y, e) = (col(&[0.4, -1.0]), col(&[0.2, 0.9]));
        let diff = g10.control(&y, &e) - g.control(&y, &e);
        assert!((diff - (&k2 * &e) * 9.0).norm() < 1e-14);
        assert!(OutputFeedbackGain::new(k1, k2, -1.0, DMatrix::zeros(3, 2), DMatrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn hurwitz_examples() {
        assert!(hurwitz_poly(&[1.0, 3.0, 3.0, 1.0]));
        assert!(!hurwitz_poly(&[1.0, 0.0, 1.0]));
        assert!(hurwitz_poly(&[0.0001, 0.02, 1.0, 0.001]));
        assert!(!hurwitz_poly(&[1.0, -1.0]));
        assert!(!hurwitz_poly(&[0.0, 1.0]));
    }

    #[test]
    fn example7_filtered_controller() {
        let q = Poly::new(vec![1.0, 3.0, 3.0, 1.0]);
        let c = FilteredController::build(&q, &Poly::constant(1.0), 3.0, 0.01, 0.1).unwrap();
        let want = [0.0001, 0.02, 1.0, 0.001];
        for (a, b) in c.filter.coeffs().iter().zip(want) {
            assert!((a - b).abs() < 1e-18);
        }
        assert_eq!(c.order(), 3);
        assert!((c.realization.d + 30000.0).abs() < 1e-8);
    }

    #[test]
    fn first_order_filter_always_hurwitz() {
        for (mu, a) in [(0.01, 0.1), (5.0, 3.0), (1e-4, 1e-3)] {
            let f = filter_polynomial(mu, a, 1);
            assert_eq!(f, Poly::new(vec![1.0, a * mu]));
            assert!(hurwitz_poly(f.coeffs()));
        }
    }

    #[test]
    fn large_mu_rejected() {
        // 100 p^3 + 20 p^2 + p + 1: a2 a1 = 20 < a3 a0 = 100
        let q = Poly::new(vec![1.0, 3.0, 3.0, 1.0]);
        let e = FilteredController::build(&q, &Poly::constant(1.0), 3.0, 10.0, 0.1);
        assert!(matches!(e, Err(ControlError::NonHurwitzFilter(_))));
    }
}
