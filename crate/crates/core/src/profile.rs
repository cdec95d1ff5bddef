//! Time-varying boundary profiles.
//!
//! A [`Profile`] is a scalar signal `g(t)` with an exact first derivative.
//! A [`BoundaryProfile`] pairs two of them into the open band
//! `g_lower(t) < y(t) < g_upper(t)`.

use serde::{Deserialize, Serialize};

/// One additive term of an analytic profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "term", rename_all = "snake_case")]
pub enum Term {
    Const { value: f64 },
    /// `amp * exp(-rate * t)`
    Exp { amp: f64, rate: f64 },
    /// `amp * cos(freq * t)`
    Cos { amp: f64, freq: f64 },
    /// `amp * sin(freq * t)`
    Sin { amp: f64, freq: f64 },
}

impl Term {
    fn eval(&self, t: f64) -> (f64, f64) {
        match *self {
            Term::Const { value } => (value, 0.0),
            Term::Exp { amp, rate } => {
                let e = (-rate * t).exp();
                (amp * e, -rate * amp * e)
            }
            Term::Cos { amp, freq } => {
                let (s, c) = (freq * t).sin_cos();
                (amp * c, -amp * freq * s)
            }
            Term::Sin { amp, freq } => {
                let (s, c) = (freq * t).sin_cos();
                (amp * s, amp * freq * c)
            }
        }
    }

    fn is_finite(&self) -> bool {
        match *self {
            Term::Const { value } => value.is_finite(),
            Term::Exp { amp, rate } => amp.is_finite() && rate.is_finite(),
            Term::Cos { amp, freq } | Term::Sin { amp, freq } => amp.is_finite() && freq.is_finite(),
        }
    }
}

/// Scalar boundary signal with value and time derivative.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Profile {
    Sum { terms: Vec<Term> },
    /// Follows `inner` up to `after`, then holds the value reached there.
    Frozen { inner: Box<Profile>, after: f64 },
    /// Linear interpolation of samples; held constant outside the table.
    Tabulated { times: Vec<f64>, values: Vec<f64> },
}

impl Profile {
    pub fn constant(value: f64) -> Self {
        Profile::Sum { terms: vec![Term::Const { value }] }
    }

    /// `(g0 - g_inf) e^{-k t} + g_inf`
    pub fn exp_decay(g0: f64, g_inf: f64, k: f64) -> Self {
        Profile::Sum {
            terms: vec![Term::Exp { amp: g0 - g_inf, rate: k }, Term::Const { value: g_inf }],
        }
    }

    /// `g0 sin(k t) + g0 + g_inf`
    pub fn sinusoid(g0: f64, g_inf: f64, k: f64) -> Self {
        Profile::Sum {
            terms: vec![Term::Sin { amp: g0, freq: k }, Term::Const { value: g0 + g_inf }],
        }
    }

    pub fn freeze_after(self, after: f64) -> Self {
        Profile::Frozen { inner: Box::new(self), after }
    }

    /// Appends an extra term to an analytic sum; `None` for other kinds.
    pub fn plus(self, term: Term) -> Option<Self> {
        match self {
            Profile::Sum { mut terms } => {
                terms.push(term);
                Some(Profile::Sum { terms })
            }
            _ => None,
        }
    }

    /// Returns `(g(t), dg/dt(t))`.
    pub fn eval(&self, t: f64) -> (f64, f64) {
        match self {
            Profile::Sum { terms } => terms.iter().fold((0.0, 0.0), |(v, d), term| {
                let (tv, td) = term.eval(t);
                (v + tv, d + td)
            }),
            Profile::Frozen { inner, after } => {
                if t <= *after {
                    inner.eval(t)
                } else {
                    (inner.eval(*after).0, 0.0)
                }
            }
            Profile::Tabulated { times, values } => tabulated(times, values, t),
        }
    }

    pub fn is_finite(&self) -> bool {
        match self {
            Profile::Sum { terms } => terms.iter().all(Term::is_finite),
            Profile::Frozen { inner, after } => after.is_finite() && inner.is_finite(),
            Profile::Tabulated { times, values } => {
                !times.is_empty()
                    && times.len() == values.len()
                    && times.windows(2).all(|w| w[0] < w[1])
                    && times.iter().chain(values).all(|v| v.is_finite())
            }
        }
    }
}

fn tabulated(times: &[f64], values: &[f64], t: f64) -> (f64, f64) {
    let last = times.len() - 1;
    if t <= times[0] {
        return (values[0], 0.0);
    }
    if t >= times[last] {
        return (values[last], 0.0);
    }
    // first index with times[i] > t
    let i = times.partition_point(|&s| s <= t);
    let (t0, t1) = (times[i - 1], times[i]);
    let slope = (values[i] - values[i - 1]) / (t1 - t0);
    (values[i - 1] + slope * (t - t0), slope)
}

/// Boundary values at one instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundaryValue {
    pub lower: f64,
    pub upper: f64,
    pub d_lower: f64,
    pub d_upper: f64,
}

impl BoundaryValue {
    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.upper + self.lower)
    }
}

/// The pair of limit curves a coordinate change maps `(-inf, +inf)` onto.
///
/// `Paired` names the two curves independently. `Scaled` is the single-signal
/// form `(c_lo g(t), c_hi g(t))` used by the multiplicative coordinate
/// changes; `g(t) < 0` is allowed, in which case the endpoints swap sides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BoundaryProfile {
    Paired { lower: Profile, upper: Profile },
    Scaled { g: Profile, lo_coef: f64, hi_coef: f64 },
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ProfileError {
    #[error("profile has non-finite parameters")]
    NonFinite,
    #[error("boundary band is empty at t = {t}: lower {lower} >= upper {upper}")]
    EmptyBand { t: f64, lower: f64, upper: f64 },
    #[error("profile value is non-finite at t = {t}")]
    NonFiniteValue { t: f64 },
}

impl BoundaryProfile {
    pub fn paired(lower: Profile, upper: Profile) -> Self {
        BoundaryProfile::Paired { lower, upper }
    }

    /// Band `(r_lower g, r_upper g)` for a scalar signal `g`.
    pub fn scaled(g: Profile, r_lower: f64, r_upper: f64) -> Self {
        BoundaryProfile::Scaled { g, lo_coef: r_lower, hi_coef: r_upper }
    }

    /// Oriented endpoints `(a, b, da, db)`: the limits of the coordinate change
    /// at `eps -> -inf` and `eps -> +inf` respectively. `a > b` is possible
    /// for a negative scaled signal.
    pub fn endpoints(&self, t: f64) -> (f64, f64, f64, f64) {
        match self {
            BoundaryProfile::Paired { lower, upper } => {
                let (a, da) = lower.eval(t);
                let (b, db) = upper.eval(t);
                (a, b, da, db)
            }
            BoundaryProfile::Scaled { g, lo_coef, hi_coef } => {
                let (gv, gd) = g.eval(t);
                (lo_coef * gv, hi_coef * gv, lo_coef * gd, hi_coef * gd)
            }
        }
    }

    /// Sorted band `(g_lower, g_upper)` with derivatives.
    pub fn eval(&self, t: f64) -> BoundaryValue {
        let (a, b, da, db) = self.endpoints(t);
        if a <= b {
            BoundaryValue { lower: a, upper: b, d_lower: da, d_upper: db }
        } else {
            BoundaryValue { lower: b, upper: a, d_lower: db, d_upper: da }
        }
    }

    /// Checks finiteness and `g_lower < g_upper` on `n` uniform points of `[0, horizon]`.
    pub fn validate(&self, horizon: f64, n: usize) -> Result<(), ProfileError> {
        let finite = match self {
            BoundaryProfile::Paired { lower, upper } => lower.is_finite() && upper.is_finite(),
            BoundaryProfile::Scaled { g, lo_coef, hi_coef } => {
                g.is_finite() && lo_coef.is_finite() && hi_coef.is_finite()
            }
        };
        if !finite {
            return Err(ProfileError::NonFinite);
        }
        let n = n.max(2);
        // the orientation of the endpoints must not change over time
        let orientation = match self {
            BoundaryProfile::Paired { .. } => 1.0,
            BoundaryProfile::Scaled { .. } => {
                let (a, b, _, _) = self.endpoints(0.0);
                (b - a).signum()
            }
        };
        for i in 0..n {
            let t = horizon * i as f64 / (n - 1) as f64;
            let (a, b, da, db) = self.endpoints(t);
            if ![a, b, da, db].iter().all(|v| v.is_finite()) {
                return Err(ProfileError::NonFiniteValue { t });
            }
            if !((b - a) * orientation > 0.0) {
                return Err(ProfileError::EmptyBand { t, lower: a.min(b), upper: a.max(b) });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn central_diff(p: &Profile, t: f64) -> f64 {
        let h = 1e-6;
        (p.eval(t + h).0 - p.eval(t - h).0) / (2.0 * h)
    }

    #[test]
    fn exp_decay_at_zero() {
        let g = Profile::exp_decay(4.01, 0.1, 0.5);
        let (v, d) = g.eval(0.0);
        assert!((v - 4.01).abs() < 1e-15);
        assert!((d + 1.955).abs() < 1e-12);
        assert!((d - central_diff(&g, 0.0)).abs() < 1e-7);
    }

    #[test]
    fn exp_decay_settles() {
        let g = Profile::exp_decay(4.01, 0.1, 0.5);
        assert!((g.eval(200.0).0 - 0.1).abs() < 1e-12);
    }

    #[test]
    fn sinusoid_derivative() {
        let g = Profile::sinusoid(4.01, 0.1, 0.5);
        for &t in &[0.0, 0.7, 3.3, 9.1] {
            assert!((g.eval(t).1 - central_diff(&g, t)).abs() < 1e-6);
        }
        assert!((g.eval(0.0).0 - 4.11).abs() < 1e-12);
    }

    #[test]
    fn frozen_cosine_band() {
        let upper = Profile::Sum {
            terms: vec![Term::Cos { amp: 2.0, freq: 1.0 }, Term::Const { value: 0.2 }],
        }
        .freeze_after(2.0 * PI);
        let lower = Profile::Sum {
            terms: vec![Term::Cos { amp: 2.0, freq: 1.0 }, Term::Const { value: -0.2 }],
        }
        .freeze_after(2.0 * PI);
        let b = BoundaryProfile::paired(lower, upper);
        let v0 = b.eval(0.0);
        assert!((v0.upper - 2.2).abs() < 1e-15 && (v0.lower - 1.8).abs() < 1e-15);
        let v = b.eval(3.0 * PI);
        assert!((v.upper - 2.2).abs() < 1e-12 && (v.lower - 1.8).abs() < 1e-12);
        assert_eq!(v.d_upper, 0.0);
        assert!(b.validate(12.0, 500).is_ok());
    }

    #[test]
    fn tabulated_interpolates() {
        let p = Profile::Tabulated { times: vec![0.0, 1.0, 3.0], values: vec![1.0, 3.0, 2.0] };
        assert_eq!(p.eval(0.5), (2.0, 2.0));
        assert_eq!(p.eval(2.0), (2.5, -0.5));
        assert_eq!(p.eval(5.0), (2.0, 0.0));
        assert_eq!(p.eval(-1.0), (1.0, 0.0));
        assert!(p.is_finite());
    }

    #[test]
    fn negative_scaled_band_is_sorted() {
        let b = BoundaryProfile::scaled(Profile::constant(-2.0), 0.5, 1.5);
        let v = b.eval(0.0);
        assert_eq!((v.lower, v.upper), (-3.0, -1.0));
    }

    #[test]
    fn empty_band_rejected() {
        let b = BoundaryProfile::paired(Profile::constant(1.0), Profile::exp_decay(2.0, 0.5, 1.0));
        assert!(matches!(b.validate(10.0, 100), Err(ProfileError::EmptyBand { .. })));
    }
}
