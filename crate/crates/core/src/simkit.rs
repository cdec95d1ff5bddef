//! Fixed-step closed-loop simulation, disturbances, constraint monitoring and
//! the built-in scenarios.

use std::f64::consts::PI;
use std::fmt;
use std::io::{self, Write};
use std::ops::{Add, Div, Mul};

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::certificates::{self, CertificateError, CertificateReport, ScalarLmi, VertexOptions};
use crate::controllers::{check_t_matrix, ControlError, FilteredController, OutputFeedbackGain, StateFeedbackGain};
use crate::linalg::{col, mat};
use crate::plants::{transfer_from_state_space, LinearPlant, Nonlinearity, PlantError, SectorPlant};
use crate::profile::{BoundaryProfile, Profile, ProfileError, Term};
use crate::transforms::{Channel, Transform};

pub const DEFAULT_STEP: f64 = 1e-3;
pub const DEFAULT_HORIZON: f64 = 10.0;
pub const EPS_GUARD: f64 = 1e6;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SimError {
    #[error("non-finite state at t = {t}")]
    NonFiniteState { t: f64 },
    #[error("initial output y{channel}(0) = {y} is not strictly inside ({lower}, {upper})")]
    OutsideSet { channel: usize, y: f64, lower: f64, upper: f64 },
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error(transparent)]
    Profile(#[from] ProfileError),
    #[error(transparent)]
    Plant(#[from] PlantError),
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error(transparent)]
    Certificate(#[from] CertificateError),
}

/// One classical Runge-Kutta step of `x' = f(t, x)` for any state type with
/// vector-space arithmetic.
pub fn rk4_advance<V, F>(mut f: F, x: &V, t: f64, h: f64) -> V
where
    V: Clone + Add<Output = V> + Mul<f64, Output = V> + Div<f64, Output = V>,
    F: FnMut(f64, &V) -> V,
{
    let k1 = f(t, x);
    let k2 = f(t + 0.5 * h, &(x.clone() + k1.clone() * (0.5 * h)));
    let k3 = f(t + 0.5 * h, &(x.clone() + k2.clone() * (0.5 * h)));
    let k4 = f(t + h, &(x.clone() + k3.clone() * h));
    x.clone() + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * h / 6.0
}

/// [`rk4_advance`] on dense vectors, rejecting non-finite results.
pub fn rk4_step<F>(f: F, x: &DVector<f64>, t: f64, h: f64) -> Result<DVector<f64>, SimError>
where
    F: FnMut(f64, &DVector<f64>) -> DVector<f64>,
{
    let next = rk4_advance(f, x, t, h);
    if next.iter().all(|v| v.is_finite()) {
        Ok(next)
    } else {
        Err(SimError::NonFiniteState { t: t + h })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DisturbanceSpec {
    Zero,
    /// `offset + sin(freq t) + sat(d(t) / scale)` with zero-order-hold
    /// Gaussian `d` of variance `noise_power / sample_time`.
    PaperMix {
        #[serde(default = "mix_offset")]
        offset: f64,
        #[serde(default = "mix_freq")]
        freq: f64,
        #[serde(default = "mix_scale")]
        scale: f64,
        #[serde(default = "mix_power")]
        noise_power: f64,
        #[serde(default = "mix_sample")]
        sample_time: f64,
        #[serde(default = "mix_seed")]
        seed: u64,
    },
    Constant { value: f64 },
    Sinusoid { amp: f64, freq: f64, #[serde(default)] offset: f64 },
    Tabulated { times: Vec<f64>, values: Vec<f64> },
}

fn mix_offset() -> f64 {
    0.1
}
fn mix_freq() -> f64 {
    3.0
}
fn mix_scale() -> f64 {
    0.3
}
fn mix_power() -> f64 {
    0.1
}
fn mix_sample() -> f64 {
    0.1
}
fn mix_seed() -> u64 {
    1
}

impl DisturbanceSpec {
    pub fn paper_mix(seed: u64) -> Self {
        DisturbanceSpec::PaperMix {
            offset: mix_offset(),
            freq: mix_freq(),
            scale: mix_scale(),
            noise_power: mix_power(),
            sample_time: mix_sample(),
            seed,
        }
    }

    pub fn with_seed(self, new_seed: u64) -> Self {
        match self {
            DisturbanceSpec::PaperMix { offset, freq, scale, noise_power, sample_time, .. } => {
                DisturbanceSpec::PaperMix { offset, freq, scale, noise_power, sample_time, seed: new_seed }
            }
            other => other,
        }
    }

    fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::Invalid(m.to_string()));
        match self {
            DisturbanceSpec::PaperMix { offset, freq, scale, noise_power, sample_time, .. } => {
                if !(scale.is_finite() && *scale > 0.0) || !(sample_time.is_finite() && *sample_time > 0.0) {
                    return bad("paper_mix needs positive scale and sample_time");
                }
                if !(noise_power.is_finite() && *noise_power >= 0.0) || !offset.is_finite() || !freq.is_finite() {
                    return bad("paper_mix parameters must be finite, noise_power >= 0");
                }
            }
            DisturbanceSpec::Constant { value } if !value.is_finite() => return bad("constant disturbance must be finite"),
            DisturbanceSpec::Sinusoid { amp, freq, offset } if ![amp, freq, offset].iter().all(|v| v.is_finite()) => {
                return bad("sinusoid disturbance must be finite")
            }
            DisturbanceSpec::Tabulated { times, values } => {
                if times.is_empty() || times.len() != values.len() || times.windows(2).any(|w| !(w[0] < w[1])) {
                    return bad("tabulated disturbance needs equal-length, strictly increasing times");
                }
            }
            _ => {}
        }
        Ok(())
    }
}

/// A disturbance with its noise sequence drawn up front.
#[derive(Debug, Clone)]
pub struct Disturbance {
    spec: DisturbanceSpec,
    noise: Vec<f64>,
    table: Option<Profile>,
}

impl Disturbance {
    pub fn new(spec: DisturbanceSpec, horizon: f64) -> Self {
        let mut noise = Vec::new();
        let mut table = None;
        match &spec {
            DisturbanceSpec::PaperMix { noise_power, sample_time, seed, .. } => {
                let count = (horizon.max(0.0) / sample_time).floor() as usize + 2;
                let sd = (noise_power / sample_time).sqrt();
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                noise = (0..count)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        sd * z
                    })
                    .collect();
            }
            DisturbanceSpec::Tabulated { times, values } => {
                table = Some(Profile::Tabulated { times: times.clone(), values: values.clone() });
            }
            _ => {}
        }
        Disturbance { spec, noise, table }
    }

    pub fn spec(&self) -> &DisturbanceSpec {
        &self.spec
    }

    /// Held noise sample `d(t)`.
    pub fn noise(&self, t: f64) -> f64 {
        match &self.spec {
            DisturbanceSpec::PaperMix { sample_time, .. } if !self.noise.is_empty() => {
                // relative slack so that t = k * sample_time lands on sample k
                let i = ((t.max(0.0) / sample_time * (1.0 + 1e-12)).floor() as usize).min(self.noise.len() - 1);
                self.noise[i]
            }
            _ => 0.0,
        }
    }

    pub fn eval(&self, t: f64) -> f64 {
        match &self.spec {
            DisturbanceSpec::Zero => 0.0,
            DisturbanceSpec::PaperMix { offset, freq, scale, .. } => offset + (freq * t).sin() + (self.noise(t) / scale).clamp(-1.0, 1.0),
            DisturbanceSpec::Constant { value } => *value,
            DisturbanceSpec::Sinusoid { amp, freq, offset } => offset + amp * (freq * t).sin(),
            DisturbanceSpec::Tabulated { .. } => self.table.as_ref().map_or(0.0, |p| p.eval(t).0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Controller {
    StateFeedback(StateFeedbackGain),
    OutputFeedback(OutputFeedbackGain),
    Filtered(FilteredController),
    /// `u = 0`.
    Open,
}

impl Controller {
    fn order(&self) -> usize {
        match self {
            Controller::Filtered(c) => c.order(),
            _ => 0,
        }
    }
}

/// Which certificate a scenario carries.
#[derive(Debug, Clone, PartialEq)]
pub enum CertificateSpec {
    None,
    /// The 2x2 inequality in `(alpha, K)`; `K` comes from the controller.
    Scalar { alpha: f64 },
    /// Vertex check of the extended-system inequality.
    Extended { alpha: f64, sector_bound: f64, cap: f64, grid_points: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpsMode {
    /// `eps` from inverting the transform at every evaluation.
    #[default]
    Direct,
    /// Additionally integrates the `eps` dynamics and records the gap to the inverted value.
    CrossCheck,
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub plant: SectorPlant,
    pub transform: Transform,
    pub controller: Controller,
    pub disturbance: DisturbanceSpec,
    pub x0: DVector<f64>,
    pub horizon: f64,
    pub step: f64,
    pub stride: usize,
    pub certificate: CertificateSpec,
    pub eps_mode: EpsMode,
}

impl Scenario {
    /// Checks dimensions, profiles and that `y(0)` lies strictly inside the set.
    pub fn validate(&self) -> Result<(), SimError> {
        let p = &self.plant.base;
        let (n, m, v) = (p.n(), p.m(), p.v());
        if self.x0.len() != n {
            return Err(SimError::Invalid(format!("x0 has {} entries, plant has {n} states", self.x0.len())));
        }
        if self.transform.dim() != v {
            return Err(SimError::Invalid(format!("transform has {} channels, plant has {v} outputs", self.transform.dim())));
        }
        if !(self.step > 0.0 && self.step.is_finite()) || !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(SimError::Invalid("step and horizon must be positive".into()));
        }
        if self.step > self.horizon {
            return Err(SimError::Invalid("step exceeds horizon".into()));
        }
        if self.stride == 0 {
            return Err(SimError::Invalid("stride must be at least 1".into()));
        }
        if self.x0.iter().any(|x| !x.is_finite()) {
            return Err(SimError::Invalid("x0 must be finite".into()));
        }
        match &self.controller {
            Controller::StateFeedback(g) => {
                if m != 1 || v != 1 {
                    return Err(ControlError::NotSiso { m, v }.into());
                }
                if g.t.len() != n {
                    return Err(SimError::Invalid(format!("T has {} entries, expected {n}", g.t.len())));
                }
                g.control(p, &self.x0, 0.0)?;
            }
            Controller::OutputFeedback(g) => {
                if g.k1.shape() != (m, v) || g.t1.nrows() != n {
                    return Err(SimError::Invalid(format!("gain shapes K1 {:?}, T1 {:?} do not fit m={m}, v={v}, n={n}", g.k1.shape(), g.t1.shape())));
                }
            }
            Controller::Filtered(_) => {
                if m != 1 || v != 1 {
                    return Err(ControlError::NotSiso { m, v }.into());
                }
            }
            Controller::Open => {}
        }
        self.disturbance.validate()?;
        let points = ((self.horizon / self.step).round() as usize).clamp(2, 20_000);
        for c in &self.transform.channels {
            c.band.validate(self.horizon, points)?;
        }
        let y0 = p.output(&self.x0);
        for (i, c) in self.transform.channels.iter().enumerate() {
            if c.inverse(y0[i], 0.0, self.transform.options.inverse_margin).is_none() {
                let b = c.band.eval(0.0);
                return Err(SimError::OutsideSet { channel: i, y: y0[i], lower: b.lower, upper: b.upper });
            }
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        (self.horizon / self.step).round() as usize
    }

    /// Uniform grid used for the inverse-Jacobian minimisation.
    pub fn time_grid(&self, points: usize) -> Vec<f64> {
        let points = points.max(2);
        (0..points).map(|i| self.horizon * i as f64 / (points - 1) as f64).collect()
    }
}

/// `eps` from `y`, pulling `y` back inside the band when it is outside or
/// within the inverse margin of an edge.
fn invert_clamped(transform: &Transform, y: &DVector<f64>, t: f64) -> DVector<f64> {
    let margin = transform.options.inverse_margin;
    DVector::from_iterator(
        y.len(),
        transform.channels.iter().zip(y.iter()).map(|(c, &yi)| {
            if let Some(e) = c.inverse(yi, t, margin) {
                return e;
            }
            let b = c.band.eval(t);
            let w = b.width();
            let lo = b.lower + margin.max(1e-15) * w;
            let hi = b.upper - margin.max(1e-15) * w;
            let yc = if yi.is_nan() { b.midpoint() } else { yi.clamp(lo, hi) };
            c.inverse(yc, t, 0.0).unwrap_or(if yi >= b.midpoint() { 1.0 } else { -1.0 } * EPS_GUARD)
        }),
    )
}

/// Everything the closed loop produces at one evaluation point.
struct Stage {
    rate: DVector<f64>,
    y: DVector<f64>,
    eps: DVector<f64>,
    u: DVector<f64>,
    f: f64,
}

struct Loop<'a> {
    s: &'a Scenario,
    dist: Disturbance,
    n: usize,
    nc: usize,
}

impl Loop<'_> {
    fn eval(&self, t: f64, z: &DVector<f64>) -> Stage {
        let s = self.s;
        let p = &s.plant.base;
        let x = z.rows(0, self.n).clone_owned();
        let y = p.output(&x);
        let eps = invert_clamped(&s.transform, &y, t);
        let mut rate = DVector::zeros(z.len());
        let u = match &s.controller {
            Controller::StateFeedback(g) => DVector::from_element(1, g.control(p, &x, eps[0]).unwrap_or(f64::NAN)),
            Controller::OutputFeedback(g) => g.control(&y, &eps),
            Controller::Filtered(c) => {
                let xc = z.rows(self.n, self.nc).clone_owned();
                rate.rows_mut(self.n, self.nc).copy_from(&c.realization.state_rate(&xc, eps[0]));
                DVector::from_element(1, c.realization.output(&xc, eps[0]))
            }
            Controller::Open => DVector::zeros(p.m()),
        };
        let f = self.dist.eval(t);
        let fv = DVector::from_element(p.l_dim(), f);
        let xdot = s.plant.rhs(&x, &u, &fv, t);
        if s.eps_mode == EpsMode::CrossCheck {
            let ydot = &p.l * &xdot;
            let off = self.n + self.nc;
            let ei = z.rows(off, p.v()).clone_owned();
            let er = s
                .transform
                .epsilon_rate(ei.as_slice(), ydot.as_slice(), t)
                .unwrap_or_else(|_| vec![f64::NAN; p.v()]);
            rate.rows_mut(off, p.v()).copy_from_slice(&er);
        }
        rate.rows_mut(0, self.n).copy_from(&xdot);
        Stage { rate, y, eps, u, f }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Event {
    ConstraintViolation { t: f64, channel: usize, y: f64, lower: f64, upper: f64 },
    EpsilonGuard { t: f64, channel: usize, eps: f64 },
    JacobianUnderflow { t: f64, channel: usize, value: f64 },
    NonFiniteState { t: f64 },
}

impl fmt::Display for Event {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Event::ConstraintViolation { t, channel, y, lower, upper } => {
                write!(f, "t={t:.6} constraint_violation y{}={y:.17e} outside ({lower:.17e}, {upper:.17e})", channel + 1)
            }
            Event::EpsilonGuard { t, channel, eps } => write!(f, "t={t:.6} epsilon_guard eps{}={eps:.17e}", channel + 1),
            Event::JacobianUnderflow { t, channel, value } => write!(f, "t={t:.6} jacobian_underflow channel {} value={value:.17e}", channel + 1),
            Event::NonFiniteState { t } => write!(f, "t={t:.6} non_finite_state"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub t: f64,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub eps: Vec<f64>,
    pub u: Vec<f64>,
    pub f: f64,
    pub g_lower: Vec<f64>,
    pub g_upper: Vec<f64>,
    /// Dynamic controller state; empty for static laws.
    pub xc: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    pub n: usize,
    pub v: usize,
    pub m: usize,
    pub samples: Vec<Sample>,
    pub events: Vec<Event>,
}

impl Trajectory {
    pub fn new(n: usize, v: usize, m: usize) -> Self {
        Trajectory { n, v, m, samples: Vec::new(), events: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn header(&self) -> String {
        let mut cols = vec!["t".to_string()];
        let mut push = |prefix: &str, k: usize| cols.extend((1..=k).map(|i| format!("{prefix}{i}")));
        push("x", self.n);
        push("y", self.v);
        push("eps", self.v);
        push("u", self.m);
        cols.push("f".into());
        let mut tail: Vec<String> = (1..=self.v).map(|i| format!("glo{i}")).collect();
        tail.extend((1..=self.v).map(|i| format!("ghi{i}")));
        cols.extend(tail);
        cols.join(",")
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "{}", self.header())?;
        for s in &self.samples {
            let mut row = Vec::with_capacity(2 + self.n + 4 * self.v + self.m);
            row.push(s.t);
            row.extend(&s.x);
            row.extend(&s.y);
            row.extend(&s.eps);
            row.extend(&s.u);
            row.push(s.f);
            row.extend(&s.g_lower);
            row.extend(&s.g_upper);
            let text: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
            writeln!(w, "{}", text.join(","))?;
        }
        if !self.events.is_empty() {
            writeln!(w, "# events")?;
            for e in &self.events {
                writeln!(w, "# {e}")?;
            }
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("ascii output")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarginReport {
    /// Per output, min over samples of `min(y - g_lower, g_upper - y)`.
    pub min_margin: Vec<f64>,
    pub violations: usize,
    pub first_violation: Option<f64>,
    pub max_abs_eps: f64,
    /// Tightened bounds `(lower, upper)` at every sample for the observed `N = max |eps|`.
    pub tightened: Vec<(Vec<f64>, Vec<f64>)>,
    /// Whether the tightened bounds sit strictly inside the profile at every sample.
    pub tightening_strict: bool,
    pub max_abs_u: f64,
    /// Largest gap between integrated and inverted `eps`, in cross-check mode.
    pub eps_drift: Option<f64>,
}

impl MarginReport {
    pub fn overall_min(&self) -> f64 {
        self.min_margin.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn clean(&self) -> bool {
        self.violations == 0
    }
}

impl fmt::Display for MarginReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "constraint margins")?;
        for (i, m) in self.min_margin.iter().enumerate() {
            writeln!(f, "  y{}: min margin {m:.6e}", i + 1)?;
        }
        writeln!(f, "  violations: {}", self.violations)?;
        if let Some(t) = self.first_violation {
            writeln!(f, "  first violation at t = {t:.6}")?;
        }
        writeln!(f, "  max |eps|: {:.6e}", self.max_abs_eps)?;
        writeln!(f, "  tightened bounds strictly inside: {}", self.tightening_strict)?;
        writeln!(f, "  max |u|: {:.6e}", self.max_abs_u)?;
        if let Some(d) = self.eps_drift {
            writeln!(f, "  integrated eps drift: {d:.6e}")?;
        }
        Ok(())
    }
}

/// Margins, violations and the tightened set for a recorded trajectory.
pub fn monitor(traj: &Trajectory, transform: &Transform) -> MarginReport {
    let v = traj.v;
    let mut min_margin = vec![f64::INFINITY; v];
    let mut violations = 0;
    let mut first_violation = None;
    let mut max_abs_eps = 0.0f64;
    let mut max_abs_u = 0.0f64;
    for s in &traj.samples {
        let mut bad = false;
        for i in 0..v {
            let m = (s.y[i] - s.g_lower[i]).min(s.g_upper[i] - s.y[i]);
            min_margin[i] = min_margin[i].min(if m.is_nan() { f64::NEG_INFINITY } else { m });
            bad |= !(m > 0.0);
        }
        if bad {
            violations += 1;
            first_violation.get_or_insert(s.t);
        }
        max_abs_eps = s.eps.iter().fold(max_abs_eps, |a, e| a.max(e.abs()));
        max_abs_u = s.u.iter().fold(max_abs_u, |a, e| a.max(e.abs()));
    }
    let mut tightened = Vec::new();
    let mut tightening_strict = false;
    if max_abs_eps > 0.0 && max_abs_eps.is_finite() {
        tightening_strict = true;
        for s in &traj.samples {
            let (lo, hi) = transform.tightened_bounds(max_abs_eps, s.t).expect("positive finite radius");
            for i in 0..v {
                tightening_strict &= lo[i] > s.g_lower[i] && hi[i] < s.g_upper[i];
            }
            tightened.push((lo, hi));
        }
    }
    MarginReport { min_margin, violations, first_violation, max_abs_eps, tightened, tightening_strict, max_abs_u, eps_drift: None }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub trajectory: Trajectory,
    pub margins: MarginReport,
    /// Set when integration stopped early; the trajectory holds what was computed.
    pub aborted: Option<SimError>,
}

/// Integrates the scenario with RK4 and records samples every `stride` steps.
pub fn run_scenario(s: &Scenario) -> Result<RunOutput, SimError> {
    s.validate()?;
    let p = &s.plant.base;
    let (n, v, m) = (p.n(), p.v(), p.m());
    let nc = s.controller.order();
    let cross = s.eps_mode == EpsMode::CrossCheck;
    let lp = Loop { s, dist: Disturbance::new(s.disturbance.clone(), s.horizon + s.step), n, nc };

    let mut z = DVector::zeros(n + nc + if cross { v } else { 0 });
    z.rows_mut(0, n).copy_from(&s.x0);
    if cross {
        let e0 = invert_clamped(&s.transform, &p.output(&s.x0), 0.0);
        z.rows_mut(n + nc, v).copy_from(&e0);
    }

    let mut traj = Trajectory::new(n, v, m);
    let mut flags = Flags::new(v);
    let mut drift = 0.0f64;
    let record = |t: f64, z: &DVector<f64>, traj: &mut Trajectory, flags: &mut Flags, drift: &mut f64| {
        let st = lp.eval(t, z);
        let bounds = s.transform.bounds(t);
        for i in 0..v {
            let b = &bounds[i];
            let outside = !(st.y[i] > b.lower && st.y[i] < b.upper);
            if flags.edge(i, Flag::Violation, outside) {
                traj.events.push(Event::ConstraintViolation { t, channel: i, y: st.y[i], lower: b.lower, upper: b.upper });
            }
            if flags.edge(i, Flag::Guard, st.eps[i].abs() > EPS_GUARD) {
                traj.events.push(Event::EpsilonGuard { t, channel: i, eps: st.eps[i] });
            }
            let jac = s.transform.channels[i].jacobian(st.eps[i], t);
            if flags.edge(i, Flag::Underflow, !(jac.abs() >= s.transform.options.jacobian_floor)) {
                traj.events.push(Event::JacobianUnderflow { t, channel: i, value: jac });
            }
            if cross && !outside {
                *drift = drift.max((z[n + nc + i] - st.eps[i]).abs());
            }
        }
        traj.samples.push(Sample {
            t,
            x: z.rows(0, n).iter().copied().collect(),
            y: st.y.iter().copied().collect(),
            eps: st.eps.iter().copied().collect(),
            u: st.u.iter().copied().collect(),
            f: st.f,
            g_lower: bounds.iter().map(|b| b.lower).collect(),
            g_upper: bounds.iter().map(|b| b.upper).collect(),
            xc: z.rows(n, nc).iter().copied().collect(),
        });
    };

    record(0.0, &z, &mut traj, &mut flags, &mut drift);
    let mut aborted = None;
    for k in 1..=s.steps() {
        let t0 = (k - 1) as f64 * s.step;
        match rk4_step(|t, x| lp.eval(t, x).rate, &z, t0, s.step) {
            Ok(next) => z = next,
            Err(e) => {
                traj.events.push(Event::NonFiniteState { t: k as f64 * s.step });
                aborted = Some(e);
                break;
            }
        }
        if k % s.stride == 0 {
            record(k as f64 * s.step, &z, &mut traj, &mut flags, &mut drift);
        }
    }
    let mut margins = monitor(&traj, &s.transform);
    if cross {
        margins.eps_drift = Some(drift);
    }
    Ok(RunOutput { trajectory: traj, margins, aborted })
}

/// Runs independent scenarios on separate threads, results in input order.
pub fn run_batch(scenarios: &[Scenario]) -> Vec<Result<RunOutput, SimError>> {
    std::thread::scope(|scope| {
        let handles: Vec<_> = scenarios.iter().map(|s| scope.spawn(move || run_scenario(s))).collect();
        handles.into_iter().map(|h| h.join().expect("simulation thread panicked")).collect()
    })
}

#[derive(Clone, Copy)]
enum Flag {
    Violation,
    Guard,
    Underflow,
}

/// Per-channel on/off state so events are logged once per episode.
struct Flags(Vec<[bool; 3]>);

impl Flags {
    fn new(v: usize) -> Self {
        Flags(vec![[false; 3]; v])
    }

    /// True on a rising edge.
    fn edge(&mut self, channel: usize, flag: Flag, on: bool) -> bool {
        let slot = &mut self.0[channel][flag as usize];
        let rising = on && !*slot;
        *slot = on;
        rising
    }
}

/// Outcome of the certificate attached to a scenario.
#[derive(Debug, Clone, PartialEq)]
pub enum CertificateOutcome {
    None,
    Scalar { alpha: f64, k: f64, lmi: ScalarLmi, structure_ok: bool, structure: String },
    Extended(Box<CertificateReport>),
}

impl CertificateOutcome {
    pub fn feasible(&self) -> bool {
        match self {
            CertificateOutcome::None => true,
            CertificateOutcome::Scalar { lmi, structure_ok, .. } => lmi.feasible && *structure_ok,
            CertificateOutcome::Extended(r) => r.feasible,
        }
    }
}

impl fmt::Display for CertificateOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CertificateOutcome::None => writeln!(f, "no certificate requested"),
            CertificateOutcome::Scalar { alpha, k, lmi, structure_ok, structure } => {
                writeln!(f, "scalar matrix inequality")?;
                writeln!(f, "  alpha: {alpha}  K: {k}")?;
                writeln!(f, "  feasible: {}", lmi.feasible)?;
                if let Some(b) = lmi.beta_min {
                    writeln!(f, "  beta_min: {b:.6e}")?;
                }
                writeln!(f, "  {structure}: {structure_ok}")
            }
            CertificateOutcome::Extended(r) => write!(f, "{r}"),
        }
    }
}

/// Evaluates the certificate a scenario carries.
pub fn certify(s: &Scenario) -> Result<CertificateOutcome, SimError> {
    match (&s.certificate, &s.controller) {
        (CertificateSpec::None, _) => Ok(CertificateOutcome::None),
        (CertificateSpec::Scalar { alpha }, Controller::StateFeedback(g)) => Ok(CertificateOutcome::Scalar {
            alpha: *alpha,
            k: g.k,
            lmi: certificates::lmi_theorem2(*alpha, g.k),
            structure_ok: check_t_matrix(&s.plant.base, &g.t)?,
            structure: "A - B (LB)^-1 LA - T L Hurwitz".into(),
        }),
        (CertificateSpec::Scalar { alpha }, Controller::Filtered(c)) => Ok(CertificateOutcome::Scalar {
            alpha: *alpha,
            k: c.k,
            lmi: certificates::lmi_theorem2(*alpha, c.k),
            structure_ok: crate::controllers::hurwitz_poly(c.filter.coeffs()),
            structure: format!("filter {} Hurwitz", c.filter),
        }),
        (CertificateSpec::Extended { alpha, sector_bound, cap, grid_points }, Controller::OutputFeedback(g)) => {
            let opts = VertexOptions { cap: *cap, ..VertexOptions::default() };
            let grid = s.time_grid(*grid_points);
            let report = certificates::verify_theorem3(&s.plant, g, &s.transform, *alpha, *sector_bound, &grid, &opts, None)?;
            Ok(CertificateOutcome::Extended(Box::new(report)))
        }
        _ => Err(SimError::Invalid("certificate kind does not match the controller".into())),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Example5Boundary {
    /// `(g0 - g_inf) e^{-kt} + g_inf`
    Decaying,
    /// `g0 sin(kt) + g0 + g_inf`
    Sine,
}

pub fn example5_plant() -> LinearPlant {
    LinearPlant::new(
        mat(&[&[0.0, 1.0], &[1.0, 2.0]]),
        mat(&[&[0.0], &[1.0]]),
        mat(&[&[1.0], &[1.0]]),
        mat(&[&[1.0, 2.0]]),
    )
    .expect("static data")
}

/// Second-order SISO plant under state feedback with `K = 1`, `T = [1, 1]`.
pub fn preset_example5(boundary: Example5Boundary, disturbed: bool) -> Scenario {
    let plant = example5_plant();
    let x0 = col(&[2.0, 1.0]);
    let (g0, g_inf, k) = (plant.output(&x0)[0] + 0.01, 0.1, 0.5);
    let g = match boundary {
        Example5Boundary::Decaying => Profile::exp_decay(g0, g_inf, k),
        Example5Boundary::Sine => Profile::sinusoid(g0, g_inf, k),
    };
    let n = plant.n();
    Scenario {
        name: format!(
            "example5{}{}",
            if boundary == Example5Boundary::Sine { "_sine" } else { "" },
            if disturbed { "" } else { "_nodist" }
        ),
        plant: SectorPlant::new(plant, DMatrix::zeros(n, n), Nonlinearity::Zero, 0.0).expect("static data"),
        transform: Transform::single(Channel::scaled_logistic(g, 0.8, 1.0)),
        controller: Controller::StateFeedback(StateFeedbackGain::new(1.0, col(&[1.0, 1.0])).expect("static data")),
        disturbance: if disturbed { DisturbanceSpec::paper_mix(1) } else { DisturbanceSpec::Zero },
        x0,
        horizon: DEFAULT_HORIZON,
        step: DEFAULT_STEP,
        stride: 1,
        certificate: CertificateSpec::Scalar { alpha: 0.5 },
        eps_mode: EpsMode::Direct,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Example6Start {
    /// `(5/3, 2/3, -1)`, `y(0) = (3, 2)`
    Nominal,
    /// `(10/3, -5/3, -1)`, `y(0) = (4, -1)`
    Shifted,
    /// `(1, 1, 0)`, used for the gamma comparison
    Sweep,
}

impl Example6Start {
    pub fn x0(self) -> DVector<f64> {
        match self {
            Example6Start::Nominal => col(&[5.0 / 3.0, 2.0 / 3.0, -1.0]),
            Example6Start::Shifted => col(&[10.0 / 3.0, -5.0 / 3.0, -1.0]),
            Example6Start::Sweep => col(&[1.0, 1.0, 0.0]),
        }
    }
}

/// How the analysis injections `T1`, `T2` of the extended system are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Injection {
    /// `T1 = [[1,1],[2,2],[1,1]]`, `T2 = [[1,2],[1,2]]`.
    Published,
    /// `T1 = -c B (LB)^{-1}`, `T2 = 0`: the output modes of the reduced slow
    /// dynamics are placed at `-c`.
    Structured { c: f64 },
}

impl Default for Injection {
    fn default() -> Self {
        Injection::Structured { c: 10.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example6Variant {
    pub start: Example6Start,
    /// Widen the initial band by `g6 e^{-k0 t}` on both sides.
    pub margin: bool,
    pub gamma: f64,
    /// Last row of `A`.
    pub a_row: [f64; 3],
    /// Last row of `G`.
    pub g_row: [f64; 3],
    pub injection: Injection,
}

impl Default for Example6Variant {
    fn default() -> Self {
        Example6Variant {
            start: Example6Start::Nominal,
            margin: false,
            gamma: 1.0,
            a_row: [0.1, -2.0, -3.0],
            g_row: [0.1, 0.1, 0.1],
            injection: Injection::default(),
        }
    }
}

pub fn example6_plant(a_row: [f64; 3], g_row: [f64; 3]) -> Result<SectorPlant, PlantError> {
    let base = LinearPlant::new(
        mat(&[&[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0], &a_row]),
        mat(&[&[1.0, 2.0], &[1.0, 1.0], &[1.0, 2.0]]),
        mat(&[&[1.0], &[1.0], &[1.0]]),
        mat(&[&[2.0, 1.0, 1.0], &[1.0, 2.0, 1.0]]),
    )?;
    let g = mat(&[&[0.0; 3], &[0.0; 3], &g_row]);
    SectorPlant::new(base, g, Nonlinearity::ElementwiseSine, 1.0)
}

pub fn example6_injection(plant: &LinearPlant, injection: Injection) -> Result<(DMatrix<f64>, DMatrix<f64>), SimError> {
    match injection {
        Injection::Published => Ok((mat(&[&[1.0, 1.0], &[2.0, 2.0], &[1.0, 1.0]]), mat(&[&[1.0, 2.0], &[1.0, 2.0]]))),
        Injection::Structured { c } => {
            if !(c.is_finite() && c > 0.0) {
                return Err(SimError::Invalid(format!("injection scale must be positive, got {c}")));
            }
            let lb = &plant.l * &plant.b;
            let inv = lb.try_inverse().ok_or(ControlError::SingularLB(0.0))?;
            Ok((-(&plant.b * inv) * c, DMatrix::zeros(plant.v(), plant.v())))
        }
    }
}

/// Two-channel band of the MIMO example, `g0 = |y(0)| + 0.01`.
pub fn example6_band(y0: &DVector<f64>, margin: bool) -> Vec<BoundaryProfile> {
    let g0 = y0.norm() + 0.01;
    let (g1, g2, g3, g4, g5, k) = (0.1, 2.0, -0.2, g0 - 0.1, 0.8, 0.5);
    let (g6, k0) = (3.0, 2.0);
    let widen = |p: Profile, sign: f64| -> Profile {
        if margin {
            p.plus(Term::Exp { amp: sign * g6, rate: k0 }).expect("sum profile")
        } else {
            p
        }
    };
    let sum = |terms: Vec<Term>| Profile::Sum { terms };
    let upper1 = widen(sum(vec![Term::Exp { amp: g0 - g1, rate: k }, Term::Const { value: g1 }]), 1.0);
    let lower1 = widen(sum(vec![Term::Exp { amp: g0 - g2, rate: k }, Term::Const { value: g3 }]), -1.0);
    let upper2 = widen(sum(vec![Term::Cos { amp: g0 - g2, freq: k }, Term::Const { value: g4 }]), 1.0);
    let lower2 = widen(sum(vec![Term::Cos { amp: 1.0, freq: k }, Term::Const { value: g5 }]), -1.0);
    vec![BoundaryProfile::paired(lower1, upper1), BoundaryProfile::paired(lower2, upper2)]
}

/// Three-state MIMO plant with a sine nonlinearity under `u = K1 y + gamma K2 eps`.
pub fn preset_example6(variant: &Example6Variant) -> Result<Scenario, SimError> {
    let plant = example6_plant(variant.a_row, variant.g_row)?;
    let x0 = variant.start.x0();
    let y0 = plant.base.output(&x0);
    let channels = example6_band(&y0, variant.margin).into_iter().map(Channel::logistic_between).collect();
    let (t1, t2) = example6_injection(&plant.base, variant.injection)?;
    let k1 = mat(&[&[0.0, 0.0], &[-1.0, -1.0]]) * 0.01;
    let k2 = mat(&[&[1.5, -1.75], &[-1.0, 1.0]]);
    let gains = OutputFeedbackGain::new(k1, k2, variant.gamma, t1, t2)?;
    let mut name = String::from("example6");
    if variant.margin {
        name.push_str("_margin");
    }
    match variant.start {
        Example6Start::Nominal => {}
        Example6Start::Shifted => name.push_str("_shifted"),
        Example6Start::Sweep => name.push_str("_sweep"),
    }
    Ok(Scenario {
        name,
        plant,
        transform: Transform::new(channels),
        controller: Controller::OutputFeedback(gains),
        disturbance: DisturbanceSpec::paper_mix(1),
        x0,
        horizon: DEFAULT_HORIZON,
        step: DEFAULT_STEP,
        stride: 1,
        certificate: CertificateSpec::Extended { alpha: 0.01, sector_bound: 1.0, cap: certificates::DEFAULT_JAC_INV_CAP, grid_points: 2000 },
        eps_mode: EpsMode::Direct,
    })
}

/// Corners of the parameter box the MIMO loop is claimed to tolerate:
/// `a1 in [-5, 0.1]`, `a2 in [-5, -2]`, `a3 in [-5, -3]`, `g_phi in [-3, 3]`.
pub fn example6_robustness_corners() -> Vec<Example6Variant> {
    let mut out = Vec::new();
    for a1 in [-5.0, 0.1] {
        for a2 in [-5.0, -2.0] {
            for a3 in [-5.0, -3.0] {
                for gp in [-3.0, 3.0] {
                    out.push(Example6Variant { a_row: [a1, a2, a3], g_row: [gp; 3], ..Example6Variant::default() });
                }
            }
        }
    }
    out
}

pub fn example7_plant(nonhurwitz: bool) -> LinearPlant {
    let last: &[f64] = if nonhurwitz { &[1.0, 3.0, 3.0] } else { &[-1.0, -3.0, -3.0] };
    LinearPlant::new(
        mat(&[&[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0], last]),
        mat(&[&[0.0], &[0.0], &[1.0]]),
        mat(&[&[1.0], &[1.0], &[1.0]]),
        mat(&[&[1.0, 0.0, 0.0]]),
    )
    .expect("static data")
}

/// `2 cos t -+ 0.2` until `2 pi`, then frozen at `[1.8, 2.2]`.
pub fn example7_band() -> BoundaryProfile {
    let side = |c: f64| {
        Profile::Sum { terms: vec![Term::Cos { amp: 2.0, freq: 1.0 }, Term::Const { value: c }] }.freeze_after(2.0 * PI)
    };
    BoundaryProfile::paired(side(-0.2), side(0.2))
}

/// Relative-degree-three plant under the filtered law. The controller is
/// designed from the nominal (Hurwitz) model in both variants.
pub fn preset_example7(nonhurwitz: bool, k: f64, mu: f64, a: f64) -> Result<Scenario, SimError> {
    let nominal = transfer_from_state_space(&example7_plant(false))?;
    let ctrl = FilteredController::build(&nominal.q, &nominal.r, k, mu, a)?;
    let plant = example7_plant(nonhurwitz);
    let n = plant.n();
    Ok(Scenario {
        name: if nonhurwitz { "example7_nonhurwitz".into() } else { "example7".into() },
        plant: SectorPlant::new(plant, DMatrix::zeros(n, n), Nonlinearity::Zero, 0.0)?,
        transform: Transform::single(Channel::logistic_between(example7_band())),
        controller: Controller::Filtered(ctrl),
        disturbance: DisturbanceSpec::paper_mix(1),
        x0: col(&[2.0, 1.0, 1.0]),
        horizon: 12.0,
        step: DEFAULT_STEP,
        stride: 1,
        certificate: CertificateSpec::Scalar { alpha: 0.5 },
        eps_mode: EpsMode::Direct,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rk4_single_step() {
        let x = col(&[1.0]);
        let next = rk4_step(|_, x| -x, &x, 0.0, 0.1).unwrap();
        assert!((next[0] - (-0.1f64).exp()).abs() < 1e-7);
        assert_eq!(rk4_step(|_, x| x * 0.0, &x, 0.0, 0.1).unwrap(), x);
        let lin = rk4_step(|_, x| DVector::from_element(x.len(), 1.0), &x, 0.0, 0.25).unwrap();
        assert_eq!(lin[0], 1.25);
        assert!(matches!(rk4_step(|_, x| x * f64::INFINITY, &x, 0.0, 0.1), Err(SimError::NonFiniteState { .. })));
    }

    #[test]
    fn disturbance_kinds() {
        let z = Disturbance::new(DisturbanceSpec::Zero, 10.0);
        assert_eq!(z.eval(3.3), 0.0);
        let quiet = Disturbance::new(
            DisturbanceSpec::PaperMix { offset: 0.1, freq: 3.0, scale: 0.3, noise_power: 0.0, sample_time: 0.1, seed: 9 },
            10.0,
        );
        for t in [0.0, 0.37, 2.0, 9.99] {
            assert_eq!(quiet.eval(t), 0.1 + (3.0 * t).sin());
        }
        let tab = Disturbance::new(DisturbanceSpec::Tabulated { times: vec![0.0, 1.0], values: vec![0.0, 2.0] }, 1.0);
        assert_eq!(tab.eval(0.5), 1.0);
    }

    #[test]
    fn noise_is_held_between_samples() {
        let d = Disturbance::new(DisturbanceSpec::paper_mix(4), 1.0);
        assert_eq!(d.noise(0.2), d.noise(0.2999));
        assert_ne!(d.noise(0.2), d.noise(0.3));
        let again = Disturbance::new(DisturbanceSpec::paper_mix(4), 1.0);
        assert_eq!(d.noise(0.55), again.noise(0.55));
    }

    #[test]
    fn example5_initial_band() {
        let s = preset_example5(Example5Boundary::Decaying, true);
        assert_eq!(s.plant.base.output(&s.x0)[0], 4.0);
        let b = s.transform.bounds(0.0)[0];
        assert!((b.upper - 4.01).abs() < 1e-12 && (b.lower - 0.8 * 4.01).abs() < 1e-12);
        s.validate().unwrap();
    }

    #[test]
    fn example6_initial_band() {
        let s = preset_example6(&Example6Variant::default()).unwrap();
        let y0 = s.plant.base.output(&s.x0);
        assert!((y0[0] - 3.0).abs() < 1e-14 && (y0[1] - 2.0).abs() < 1e-14);
        let g0 = 13f64.sqrt() + 0.01;
        let b = s.transform.bounds(0.0);
        assert!((b[0].upper - g0).abs() < 1e-12);
        assert!((b[0].lower - (g0 - 2.2)).abs() < 1e-12);
        assert!((b[1].lower - 1.8).abs() < 1e-12);
        assert!((b[1].upper - (2.0 * g0 - 2.1)).abs() < 1e-12);
        s.validate().unwrap();
    }

    #[test]
    fn example6_shifted_needs_margin() {
        let plain = Example6Variant { start: Example6Start::Shifted, ..Example6Variant::default() };
        let err = preset_example6(&plain).unwrap().validate().unwrap_err();
        assert!(matches!(err, SimError::OutsideSet { channel: 1, .. }));
        let widened = Example6Variant { margin: true, ..plain };
        preset_example6(&widened).unwrap().validate().unwrap();
    }

    #[test]
    fn example7_uses_nonhurwitz_row() {
        let s = preset_example7(true, 3.0, 0.01, 0.1).unwrap();
        assert_eq!(s.plant.base.a.row(2).iter().copied().collect::<Vec<_>>(), vec![1.0, 3.0, 3.0]);
        let b = s.transform.bounds(7.0)[0];
        assert!((b.lower - 1.8).abs() < 1e-12 && (b.upper - 2.2).abs() < 1e-12);
    }

    #[test]
    fn monitor_midpoint_and_touch() {
        let mut traj = Trajectory::new(1, 1, 1);
        for (i, y) in [0.0, 0.0, 1.0, 0.0].into_iter().enumerate() {
            traj.samples.push(Sample {
                t: i as f64,
                x: vec![y],
                y: vec![y],
                eps: vec![if y == 0.0 { 0.0 } else { 30.0 }],
                u: vec![0.0],
                f: 0.0,
                g_lower: vec![-1.0],
                g_upper: vec![1.0],
                xc: vec![],
            });
        }
        let tr = Transform::single(Channel::logistic_between(BoundaryProfile::paired(Profile::constant(-1.0), Profile::constant(1.0))));
        let r = monitor(&traj, &tr);
        assert_eq!(r.violations, 1);
        assert_eq!(r.first_violation, Some(2.0));
        assert_eq!(r.min_margin, vec![0.0]);

        traj.samples.remove(2);
        let r = monitor(&traj, &tr);
        assert_eq!(r.min_margin, vec![1.0]);
        assert!(r.clean());
    }

    #[test]
    fn csv_header_layout() {
        let traj = Trajectory::new(2, 1, 1);
        assert_eq!(traj.header(), "t,x1,x2,y1,eps1,u1,f,glo1,ghi1");
        let traj = Trajectory::new(3, 2, 2);
        assert_eq!(traj.header(), "t,x1,x2,x3,y1,y2,eps1,eps2,u1,u2,f,glo1,glo2,ghi1,ghi2");
    }

    #[test]
    fn open_loop_unstable_plant_leaves_set() {
        let mut s = preset_example5(Example5Boundary::Decaying, false);
        s.controller = Controller::Open;
        let out = run_scenario(&s).unwrap();
        assert!(out.margins.violations > 0);
        assert!(out.margins.first_violation.unwrap() < s.horizon);
        assert!(out.trajectory.events.iter().any(|e| matches!(e, Event::ConstraintViolation { .. })));
    }
}
