//! Coordinate changes `y = Phi(eps, t)` that map all of `R` onto the open band
//! `(g_lower(t), g_upper(t))`, applied independently per output.
//!
//! Every family is written as `Phi = c(t) + h(t) psi(eps)` where `psi` is an odd,
//! strictly increasing saturation onto `(-1, 1)`, `c` is the band midpoint and
//! `h` the signed half-width. Evaluation near the band edges goes through
//! `1 - |psi|` computed directly from `eps`, so the distance to the nearer
//! boundary keeps full relative precision.

use serde::{Deserialize, Serialize};

use crate::profile::{BoundaryProfile, BoundaryValue, Profile};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformKind {
    /// `g(t) (eps / (|eps| + 1) + r)`
    SaturatingRational,
    /// `g(t) (r_hi e^eps + r_lo) / (e^eps + 1)`
    ScaledLogistic,
    /// `(g_hi(t) e^eps + g_lo(t)) / (e^eps + 1)`
    LogisticBetween,
    /// exponential approach to either boundary, glued C1 at `eps = 0`
    PiecewiseExponential,
}

impl TransformKind {
    pub const ALL: [TransformKind; 4] = [
        TransformKind::SaturatingRational,
        TransformKind::ScaledLogistic,
        TransformKind::LogisticBetween,
        TransformKind::PiecewiseExponential,
    ];

    /// `(psi(eps), 1 - |psi(eps)|, psi'(eps))`
    fn shape(self, eps: f64) -> (f64, f64, f64) {
        let x = eps.abs();
        let (tail, slope) = match self {
            TransformKind::SaturatingRational => {
                let d = 1.0 / (1.0 + x);
                (d, d * d)
            }
            TransformKind::ScaledLogistic | TransformKind::LogisticBetween => {
                // psi = tanh(eps / 2)
                let e = (-x).exp();
                let q = 1.0 / (1.0 + e);
                (2.0 * e * q, 2.0 * e * q * q)
            }
            TransformKind::PiecewiseExponential => {
                let e = (-x).exp();
                (e, e)
            }
        };
        let mag = 1.0 - tail;
        (mag.copysign(eps), tail, slope)
    }

    /// `|eps|` from the tail `1 - |psi|`, accurate for small tails.
    fn abs_from_tail(self, tail: f64) -> f64 {
        match self {
            TransformKind::SaturatingRational => (1.0 - tail) / tail,
            TransformKind::ScaledLogistic | TransformKind::LogisticBetween => {
                ((2.0 - tail) / tail).ln()
            }
            TransformKind::PiecewiseExponential => -tail.ln(),
        }
    }

    /// `|eps|` from `|psi|`, accurate near the midpoint.
    fn abs_from_psi(self, psi: f64) -> f64 {
        match self {
            TransformKind::SaturatingRational => psi / (1.0 - psi),
            TransformKind::ScaledLogistic | TransformKind::LogisticBetween => 2.0 * psi.atanh(),
            TransformKind::PiecewiseExponential => -(-psi).ln_1p(),
        }
    }
}

/// One scalar coordinate change together with the band it targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Channel {
    pub kind: TransformKind,
    pub band: BoundaryProfile,
}

impl Channel {
    /// Band `((r - 1) g, (r + 1) g)`.
    pub fn saturating_rational(g: Profile, r: f64) -> Self {
        Channel { kind: TransformKind::SaturatingRational, band: BoundaryProfile::scaled(g, r - 1.0, r + 1.0) }
    }

    /// Band `(r_lower g, r_upper g)`.
    pub fn scaled_logistic(g: Profile, r_lower: f64, r_upper: f64) -> Self {
        Channel { kind: TransformKind::ScaledLogistic, band: BoundaryProfile::scaled(g, r_lower, r_upper) }
    }

    pub fn logistic_between(band: BoundaryProfile) -> Self {
        Channel { kind: TransformKind::LogisticBetween, band }
    }

    pub fn piecewise_exponential(band: BoundaryProfile) -> Self {
        Channel { kind: TransformKind::PiecewiseExponential, band }
    }

    pub fn forward(&self, eps: f64, t: f64) -> f64 {
        let (a, b, _, _) = self.band.endpoints(t);
        let half = 0.5 * (b - a);
        let (psi, tail, _) = self.kind.shape(eps);
        let y = if psi >= 0.0 { b - half * tail } else { a + half * tail };
        // keep the value strictly inside the band once the tail drops below one ulp
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        if y >= hi {
            hi.next_down().max(lo.next_up())
        } else if y <= lo {
            lo.next_up().min(hi.next_down())
        } else {
            y
        }
    }

    pub fn jacobian(&self, eps: f64, t: f64) -> f64 {
        let (a, b, _, _) = self.band.endpoints(t);
        0.5 * (b - a) * self.kind.shape(eps).2
    }

    pub fn partial_t(&self, eps: f64, t: f64) -> f64 {
        let (_, _, da, db) = self.band.endpoints(t);
        let (psi, tail, _) = self.kind.shape(eps);
        let dhalf = 0.5 * (db - da);
        if psi >= 0.0 {
            db - dhalf * tail
        } else {
            da + dhalf * tail
        }
    }

    /// Inverse with the strict-inclusion margin `rel_margin * width`.
    pub fn inverse(&self, y: f64, t: f64, rel_margin: f64) -> Option<f64> {
        let (a, b, _, _) = self.band.endpoints(t);
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let delta = rel_margin * (hi - lo);
        if !(lo < y && y < hi) || y - lo < delta || hi - y < delta {
            return None;
        }
        let half = 0.5 * (b - a);
        let to_b = (b - y) / half;
        let to_a = (y - a) / half;
        let (tail, sign) = if to_b <= to_a { (to_b, 1.0) } else { (to_a, -1.0) };
        let mag = if tail < 0.5 {
            self.kind.abs_from_tail(tail)
        } else {
            let mid = 0.5 * (a + b);
            self.kind.abs_from_psi(((y - mid) / half).abs())
        };
        Some(sign * mag)
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TransformError {
    #[error("output {channel} = {y} is outside the band ({lower}, {upper}) at t = {t}")]
    OutOfSet { channel: usize, t: f64, y: f64, lower: f64, upper: f64 },
    #[error("jacobian entry {channel} = {value:e} is below the floor {floor:e}")]
    JacobianUnderflow { channel: usize, value: f64, floor: f64 },
    #[error("tightening radius must be positive and finite, got {0}")]
    InvalidRadius(f64),
    #[error("expected {expected} components, got {got}")]
    Dimension { expected: usize, got: usize },
}

/// Numerical knobs of a [`Transform`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransformOptions {
    /// Relative width of the band edge strip that `inverse` rejects.
    pub inverse_margin: f64,
    /// Smallest admissible `|dPhi/deps|` in `epsilon_rate`.
    pub jacobian_floor: f64,
}

impl Default for TransformOptions {
    fn default() -> Self {
        TransformOptions { inverse_margin: 1e-9, jacobian_floor: 1e-30 }
    }
}

/// Diagonal coordinate change over `v` outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transform {
    pub channels: Vec<Channel>,
    #[serde(default)]
    pub options: TransformOptions,
}

impl Transform {
    pub fn new(channels: Vec<Channel>) -> Self {
        Transform { channels, options: TransformOptions::default() }
    }

    pub fn single(channel: Channel) -> Self {
        Self::new(vec![channel])
    }

    pub fn with_options(mut self, options: TransformOptions) -> Self {
        self.options = options;
        self
    }

    pub fn dim(&self) -> usize {
        self.channels.len()
    }

    fn check_dim(&self, got: usize) -> Result<(), TransformError> {
        if got != self.dim() {
            return Err(TransformError::Dimension { expected: self.dim(), got });
        }
        Ok(())
    }

    pub fn bounds(&self, t: f64) -> Vec<BoundaryValue> {
        self.channels.iter().map(|c| c.band.eval(t)).collect()
    }

    pub fn forward(&self, eps: &[f64], t: f64) -> Result<Vec<f64>, TransformError> {
        self.check_dim(eps.len())?;
        Ok(self.channels.iter().zip(eps).map(|(c, &e)| c.forward(e, t)).collect())
    }

    pub fn inverse(&self, y: &[f64], t: f64) -> Result<Vec<f64>, TransformError> {
        self.check_dim(y.len())?;
        self.channels
            .iter()
            .zip(y)
            .enumerate()
            .map(|(i, (c, &yi))| {
                c.inverse(yi, t, self.options.inverse_margin).ok_or_else(|| {
                    let b = c.band.eval(t);
                    TransformError::OutOfSet { channel: i, t, y: yi, lower: b.lower, upper: b.upper }
                })
            })
            .collect()
    }

    /// Diagonal of `dPhi/deps`.
    pub fn jacobian(&self, eps: &[f64], t: f64) -> Result<Vec<f64>, TransformError> {
        self.check_dim(eps.len())?;
        Ok(self.channels.iter().zip(eps).map(|(c, &e)| c.jacobian(e, t)).collect())
    }

    pub fn partial_t(&self, eps: &[f64], t: f64) -> Result<Vec<f64>, TransformError> {
        self.check_dim(eps.len())?;
        Ok(self.channels.iter().zip(eps).map(|(c, &e)| c.partial_t(e, t)).collect())
    }

    /// `(dPhi/deps)^{-1} (ydot - dPhi/dt)`.
    pub fn epsilon_rate(&self, eps: &[f64], ydot: &[f64], t: f64) -> Result<Vec<f64>, TransformError> {
        self.check_dim(eps.len())?;
        self.check_dim(ydot.len())?;
        let floor = self.options.jacobian_floor;
        self.channels
            .iter()
            .zip(eps.iter().zip(ydot))
            .enumerate()
            .map(|(i, (c, (&e, &yd)))| {
                let j = c.jacobian(e, t);
                if !(j.abs() >= floor) {
                    return Err(TransformError::JacobianUnderflow { channel: i, value: j, floor });
                }
                Ok((yd - c.partial_t(e, t)) / j)
            })
            .collect()
    }

    /// Range of `Phi` over `|eps| <= radius`, per output.
    pub fn tightened_bounds(&self, radius: f64, t: f64) -> Result<(Vec<f64>, Vec<f64>), TransformError> {
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(TransformError::InvalidRadius(radius));
        }
        Ok(self
            .channels
            .iter()
            .map(|c| {
                let lo = c.forward(-radius, t);
                let hi = c.forward(radius, t);
                (lo.min(hi), lo.max(hi))
            })
            .unzip())
    }
}
