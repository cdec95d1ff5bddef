//! Command-line front end: run configuration, orchestration and output files.
//!
//! A configuration is a JSON object naming either a preset or an inline
//! linear scenario, plus optional overrides:
//!
//! ```json
//! { "version": 1, "preset": "example6", "gamma": 10, "certify": true,
//!   "emit": { "csv": true, "svg": false, "report": true } }
//! ```
//!
//! Unknown keys are rejected. Overrides that do not apply to the chosen
//! scenario are rejected too, so a typo cannot silently fall back to a default.

use std::ffi::OsString;
use std::fmt::{self, Write as _};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::controllers::StateFeedbackGain;
use crate::plants::{LinearPlant, Nonlinearity, SectorPlant};
use crate::simkit::{
    self, CertificateSpec, Controller, DisturbanceSpec, EpsMode, Example5Boundary, Example6Start, Example6Variant,
    Injection, Scenario, SimError, Trajectory,
};
use crate::transforms::Transform;

pub const EXIT_CLEAN: i32 = 0;
pub const EXIT_VIOLATION: i32 = 2;
pub const EXIT_INFEASIBLE: i32 = 3;
pub const EXIT_CONFIG: i32 = 4;
pub const EXIT_NUMERIC: i32 = 5;

/// Environment variable consulted when neither the command line nor the
/// configuration names an output directory.
pub const OUT_ENV: &str = "SETGUARD_OUT";
pub const DEFAULT_OUT: &str = "setguard-out";

pub const PRESETS: &[(&str, &str)] = &[
    ("example5", "second-order SISO plant, decaying band, disturbed"),
    ("example5_nodist", "example5 without disturbance"),
    ("example5_sine", "second-order SISO plant, oscillating band, disturbed"),
    ("example5_sine_nodist", "example5_sine without disturbance"),
    ("example6", "three-state MIMO plant with sine nonlinearity, x0 = (5/3, 2/3, -1)"),
    ("example6_margin", "MIMO plant from x0 = (10/3, -5/3, -1) with the widened initial band"),
    ("example6_sweep", "MIMO plant from x0 = (1, 1, 0), used for the gamma comparison"),
    ("example7", "relative-degree-three plant under the filtered law"),
    ("example7_nonhurwitz", "example7 with an unstable open-loop matrix"),
];

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConfigError {
    #[error("line {line}, column {column}: {message}")]
    Syntax { line: usize, column: usize, message: String },
    #[error("field `{field}`: {message}")]
    Field { field: String, message: String },
    #[error("cannot read {path}: {message}")]
    Read { path: String, message: String },
}

fn field_err(field: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Field { field: field.to_string(), message: message.into() }
}

fn yes() -> bool {
    true
}

fn is_true(b: &bool) -> bool {
    *b
}

fn is_false(b: &bool) -> bool {
    !*b
}

fn version_one() -> u32 {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Emit {
    #[serde(default = "yes", skip_serializing_if = "is_true")]
    pub csv: bool,
    #[serde(default = "yes", skip_serializing_if = "is_true")]
    pub svg: bool,
    #[serde(default = "yes", skip_serializing_if = "is_true")]
    pub report: bool,
}

impl Default for Emit {
    fn default() -> Self {
        Emit { csv: true, svg: true, report: true }
    }
}

impl Emit {
    fn is_default(&self) -> bool {
        *self == Emit::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InlineController {
    /// `u = -(LAx + K eps) / LB`; single input, single output.
    StateFeedback {
        #[serde(rename = "K", alias = "k")]
        k: f64,
        t: Vec<f64>,
    },
    Open,
}

/// Linear plant `x' = Ax + Bu + Df`, `y = Lx`, given row by row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InlineScenario {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub d: Vec<Vec<f64>>,
    pub l: Vec<Vec<f64>>,
    pub x0: Vec<f64>,
    pub transform: Transform,
    pub controller: InlineController,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "version_one")]
    pub version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scenario: Option<InlineScenario>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stride: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub disturbance: Option<DisturbanceSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps_mode: Option<EpsMode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a: Option<f64>,
    #[serde(default, rename = "K", alias = "k", skip_serializing_if = "Option::is_none")]
    pub k: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    /// Sector constant used by the extended-system certificate.
    #[serde(default, rename = "C", alias = "sector_bound", skip_serializing_if = "Option::is_none")]
    pub c: Option<f64>,
    /// Cap on the inverse Jacobian vertices.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cap: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub injection: Option<Injection>,
    #[serde(default, skip_serializing_if = "is_false")]
    pub certify: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Emit::is_default")]
    pub emit: Emit,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Family {
    Example5,
    Example6,
    Example7,
    Inline,
}

/// Parses and fully validates a configuration, including construction of
/// the scenario it describes.
pub fn parse_config(text: &str) -> Result<RunConfig, ConfigError> {
    let cfg: RunConfig = serde_json::from_str(text)
        .map_err(|e| ConfigError::Syntax { line: e.line(), column: e.column(), message: e.to_string() })?;
    cfg.scenario()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = fs::read_to_string(path)
        .map_err(|e| ConfigError::Read { path: path.display().to_string(), message: e.to_string() })?;
    parse_config(&text)
}

fn positive(field: &str, v: Option<f64>) -> Result<(), ConfigError> {
    match v {
        Some(x) if !(x > 0.0 && x.is_finite()) => Err(field_err(field, format!("must be positive and finite, got {x}"))),
        _ => Ok(()),
    }
}

fn matrix(field: &str, rows: &[Vec<f64>]) -> Result<DMatrix<f64>, ConfigError> {
    let nc = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || nc == 0 {
        return Err(field_err(field, "matrix is empty"));
    }
    if rows.iter().any(|r| r.len() != nc) {
        return Err(field_err(field, "rows have different lengths"));
    }
    if rows.iter().flatten().any(|x| !x.is_finite()) {
        return Err(field_err(field, "entries must be finite"));
    }
    Ok(DMatrix::from_fn(rows.len(), nc, |i, j| rows[i][j]))
}

impl RunConfig {
    pub fn preset(name: &str) -> Self {
        RunConfig {
            version: 1,
            preset: Some(name.to_string()),
            scenario: None,
            horizon: None,
            step: None,
            stride: None,
            seed: None,
            disturbance: None,
            eps_mode: None,
            gamma: None,
            mu: None,
            a: None,
            k: None,
            alpha: None,
            c: None,
            cap: None,
            injection: None,
            certify: false,
            out: None,
            emit: Emit::default(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("configuration serializes")
    }

    fn family(&self) -> Result<Family, ConfigError> {
        match (&self.preset, &self.scenario) {
            (Some(_), Some(_)) => Err(field_err("preset", "give either `preset` or `scenario`, not both")),
            (None, None) => Err(field_err("preset", "one of `preset` or `scenario` is required")),
            (None, Some(_)) => Ok(Family::Inline),
            (Some(p), None) => {
                if !PRESETS.iter().any(|(n, _)| n == p) {
                    let names: Vec<&str> = PRESETS.iter().map(|(n, _)| *n).collect();
                    return Err(field_err("preset", format!("unknown preset `{p}`; known: {}", names.join(", "))));
                }
                Ok(if p.starts_with("example5") {
                    Family::Example5
                } else if p.starts_with("example6") {
                    Family::Example6
                } else {
                    Family::Example7
                })
            }
        }
    }

    fn check_overrides(&self, family: Family) -> Result<(), ConfigError> {
        if self.version != 1 {
            return Err(field_err("version", format!("unsupported schema version {}, expected 1", self.version)));
        }
        positive("horizon", self.horizon)?;
        positive("step", self.step)?;
        positive("gamma", self.gamma)?;
        positive("mu", self.mu)?;
        positive("a", self.a)?;
        positive("K", self.k)?;
        positive("alpha", self.alpha)?;
        positive("C", self.c)?;
        positive("cap", self.cap)?;
        if self.stride == Some(0) {
            return Err(field_err("stride", "must be at least 1"));
        }
        if let (Some(h), Some(hor)) = (self.step, self.horizon) {
            if h > hor {
                return Err(field_err("step", "exceeds the horizon"));
            }
        }
        if let Some(Injection::Structured { c }) = self.injection {
            if !(c > 0.0 && c.is_finite()) {
                return Err(field_err("injection.c", format!("must be positive and finite, got {c}")));
            }
        }
        let inline_feedback = matches!(
            self.scenario.as_ref().map(|s| &s.controller),
            Some(InlineController::StateFeedback { .. })
        );
        let allowed = |name: &str| match name {
            "gamma" | "C" | "cap" | "injection" => family == Family::Example6,
            "mu" | "a" => family == Family::Example7,
            "K" => matches!(family, Family::Example5 | Family::Example7) || inline_feedback,
            "alpha" => family != Family::Inline || inline_feedback,
            _ => true,
        };
        let given = [
            ("gamma", self.gamma.is_some()),
            ("C", self.c.is_some()),
            ("cap", self.cap.is_some()),
            ("injection", self.injection.is_some()),
            ("mu", self.mu.is_some()),
            ("a", self.a.is_some()),
            ("K", self.k.is_some()),
            ("alpha", self.alpha.is_some()),
        ];
        for (name, present) in given {
            if present && !allowed(name) {
                return Err(field_err(name, "does not apply to this scenario"));
            }
        }
        Ok(())
    }

    /// Builds the scenario with all overrides applied.
    pub fn scenario(&self) -> Result<Scenario, ConfigError> {
        let family = self.family()?;
        self.check_overrides(family)?;
        let sim = |e: SimError| field_err(self.preset.as_deref().unwrap_or("scenario"), e.to_string());
        let preset = self.preset.as_deref().unwrap_or("");
        let mut s = match family {
            Family::Example5 => {
                let boundary = if preset.contains("sine") { Example5Boundary::Sine } else { Example5Boundary::Decaying };
                let mut s = simkit::preset_example5(boundary, !preset.ends_with("nodist"));
                if let (Some(k), Controller::StateFeedback(g)) = (self.k, &mut s.controller) {
                    g.k = k;
                }
                s
            }
            Family::Example6 => {
                let (start, margin) = match preset {
                    "example6_margin" => (Example6Start::Shifted, true),
                    "example6_sweep" => (Example6Start::Sweep, false),
                    _ => (Example6Start::Nominal, false),
                };
                let variant = Example6Variant {
                    start,
                    margin,
                    gamma: self.gamma.unwrap_or(1.0),
                    injection: self.injection.unwrap_or_default(),
                    ..Example6Variant::default()
                };
                let mut s = simkit::preset_example6(&variant).map_err(sim)?;
                if let CertificateSpec::Extended { sector_bound, cap, .. } = &mut s.certificate {
                    if let Some(c) = self.c {
                        if c < s.plant.sector_bound {
                            return Err(field_err(
                                "C",
                                format!("must be at least the plant's sector bound {}", s.plant.sector_bound),
                            ));
                        }
                        *sector_bound = c;
                    }
                    if let Some(v) = self.cap {
                        *cap = v;
                    }
                }
                s
            }
            Family::Example7 => simkit::preset_example7(
                preset.ends_with("nonhurwitz"),
                self.k.unwrap_or(3.0),
                self.mu.unwrap_or(0.01),
                self.a.unwrap_or(0.1),
            )
            .map_err(sim)?,
            Family::Inline => self.inline_scenario()?,
        };
        if let Some(alpha) = self.alpha {
            match &mut s.certificate {
                CertificateSpec::Scalar { alpha: a } | CertificateSpec::Extended { alpha: a, .. } => *a = alpha,
                CertificateSpec::None => {}
            }
        }
        if let Some(h) = self.horizon {
            s.horizon = h;
        }
        if let Some(h) = self.step {
            s.step = h;
        }
        if let Some(k) = self.stride {
            s.stride = k;
        }
        if let Some(d) = &self.disturbance {
            s.disturbance = d.clone();
        }
        if let Some(seed) = self.seed {
            s.disturbance = s.disturbance.clone().with_seed(seed);
        }
        if let Some(mode) = self.eps_mode {
            s.eps_mode = mode;
        }
        s.validate().map_err(|e| match e {
            SimError::OutsideSet { .. } => field_err("x0", e.to_string()),
            other => sim(other),
        })?;
        Ok(s)
    }

    fn inline_scenario(&self) -> Result<Scenario, ConfigError> {
        let sc = self.scenario.as_ref().expect("inline family");
        let base = LinearPlant::new(
            matrix("scenario.a", &sc.a)?,
            matrix("scenario.b", &sc.b)?,
            matrix("scenario.d", &sc.d)?,
            matrix("scenario.l", &sc.l)?,
        )
        .map_err(|e| field_err("scenario", e.to_string()))?;
        if base.d.ncols() != 1 {
            return Err(field_err("scenario.d", "must have exactly one column"));
        }
        let n = base.n();
        let (controller, certificate) = match &sc.controller {
            InlineController::StateFeedback { k, t } => {
                if t.len() != n {
                    return Err(field_err("scenario.controller.t", format!("needs {n} entries")));
                }
                let gain = StateFeedbackGain::new(self.k.unwrap_or(*k), DVector::from_column_slice(t))
                    .map_err(|e| field_err("scenario.controller.K", e.to_string()))?;
                (Controller::StateFeedback(gain), CertificateSpec::Scalar { alpha: 0.5 })
            }
            InlineController::Open => (Controller::Open, CertificateSpec::None),
        };
        let plant = SectorPlant::new(base, DMatrix::zeros(n, n), Nonlinearity::Zero, 0.0)
            .map_err(|e| field_err("scenario", e.to_string()))?;
        Ok(Scenario {
            name: sc.name.clone().unwrap_or_else(|| "inline".into()),
            plant,
            transform: sc.transform.clone(),
            controller,
            disturbance: DisturbanceSpec::Zero,
            x0: DVector::from_column_slice(&sc.x0),
            horizon: simkit::DEFAULT_HORIZON,
            step: simkit::DEFAULT_STEP,
            stride: 1,
            certificate,
            eps_mode: EpsMode::Direct,
        })
    }
}

/// Where output files go: the configuration's `out`, then the environment, then a default.
pub fn resolve_out_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out
        .clone()
        .or_else(|| std::env::var_os(OUT_ENV).filter(|v| !v.is_empty()).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}

struct Summary<'a> {
    scenario: &'a Scenario,
    body: String,
}

impl fmt::Display for Summary<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = self.scenario;
        writeln!(f, "scenario: {}", s.name)?;
        writeln!(f, "horizon: {}  step: {}  stride: {}", s.horizon, s.step, s.stride)?;
        writeln!(f, "disturbance: {}", serde_json::to_string(&s.disturbance).unwrap_or_default())?;
        write!(f, "{}", self.body)
    }
}

fn write_file(path: &Path, contents: &str) -> io::Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, contents)
}

/// Runs the scenario, writes the requested outputs into `out_dir` and maps
/// the outcome to an exit code. Diagnostics go to standard error.
///
/// When several outcomes apply, a numeric abort wins over a violation, which
/// wins over an infeasible certificate.
pub fn run(cfg: &RunConfig, out_dir: &Path) -> i32 {
    let s = match cfg.scenario() {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_CONFIG;
        }
    };
    let out = match simkit::run_scenario(&s) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_NUMERIC;
        }
    };
    let mut body = out.margins.to_string();
    if !out.trajectory.events.is_empty() {
        writeln!(body, "events: {}", out.trajectory.events.len()).ok();
    }
    if let Some(e) = &out.aborted {
        writeln!(body, "aborted: {e}").ok();
    }
    let mut feasible = true;
    if cfg.certify {
        match simkit::certify(&s) {
            Ok(c) => {
                feasible = c.feasible();
                write!(body, "{c}").ok();
            }
            Err(e) => {
                eprintln!("error: certificate: {e}");
                return EXIT_NUMERIC;
            }
        }
    }
    let summary = Summary { scenario: &s, body }.to_string();
    print!("{summary}");
    let written = (|| -> io::Result<()> {
        if cfg.emit.csv {
            write_file(&out_dir.join(format!("{}.csv", s.name)), &out.trajectory.to_csv())?;
        }
        if cfg.emit.svg {
            emit_svg(&out.trajectory, &out_dir.join(format!("{}.svg", s.name)))?;
        }
        if cfg.emit.report {
            write_file(&out_dir.join(format!("{}.summary.txt", s.name)), &summary)?;
        }
        Ok(())
    })();
    if let Err(e) = written {
        eprintln!("error: cannot write to {}: {e}", out_dir.display());
        return EXIT_CONFIG;
    }
    if let Some(e) = out.aborted {
        eprintln!("error: integration aborted: {e}");
        EXIT_NUMERIC
    } else if !out.margins.clean() {
        eprintln!(
            "constraint violated at {} samples, first at t = {}",
            out.margins.violations,
            out.margins.first_violation.unwrap_or(f64::NAN)
        );
        EXIT_VIOLATION
    } else if !feasible {
        eprintln!("certificate infeasible");
        EXIT_INFEASIBLE
    } else {
        EXIT_CLEAN
    }
}

/// Evaluates only the certificate attached to the scenario.
pub fn verify(cfg: &RunConfig, out_dir: &Path) -> i32 {
    let s = match cfg.scenario() {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_CONFIG;
        }
    };
    let outcome = match simkit::certify(&s) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: certificate: {e}");
            return EXIT_NUMERIC;
        }
    };
    let summary = Summary { scenario: &s, body: outcome.to_string() }.to_string();
    print!("{summary}");
    if cfg.emit.report {
        if let Err(e) = write_file(&out_dir.join(format!("{}.certificate.txt", s.name)), &summary) {
            eprintln!("error: cannot write to {}: {e}", out_dir.display());
            return EXIT_CONFIG;
        }
    }
    if outcome.feasible() {
        EXIT_CLEAN
    } else {
        eprintln!("certificate infeasible");
        EXIT_INFEASIBLE
    }
}

const SVG_WIDTH: f64 = 800.0;
const PANEL_HEIGHT: f64 = 220.0;
const LEFT: f64 = 80.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 40.0;
const MAX_POINTS: usize = 2000;
const PALETTE: [&str; 4] = ["#1f77b4", "#2ca02c", "#9467bd", "#ff7f0e"];

struct Series<'a> {
    label: String,
    color: &'a str,
    dashed: bool,
    values: Vec<f64>,
}

fn range_of(series: &[Series<'_>]) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in series.iter().flat_map(|s| s.values.iter()).filter(|v| v.is_finite()) {
        lo = lo.min(*v);
        hi = hi.max(*v);
    }
    if lo > hi {
        return (0.0, 1.0);
    }
    if hi - lo <= 1e-12 * (1.0 + lo.abs()) {
        let pad = 0.5 * (1.0 + lo.abs());
        return (lo - pad, hi + pad);
    }
    let pad = 0.05 * (hi - lo);
    (lo - pad, hi + pad)
}

fn tick(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e4 || v.abs() < 1e-2) {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

fn panel(svg: &mut String, index: usize, title: &str, times: &[f64], series: &[Series<'_>], t_end: f64) {
    let y0 = index as f64 * PANEL_HEIGHT;
    let (w, h) = (SVG_WIDTH - LEFT - RIGHT, PANEL_HEIGHT - TOP - BOTTOM);
    let (top, left) = (y0 + TOP, LEFT);
    let (lo, hi) = range_of(series);
    let t_end = if t_end > 0.0 { t_end } else { 1.0 };
    let sx = |t: f64| left + w * t / t_end;
    let sy = |v: f64| top + h * (hi - v) / (hi - lo);
    writeln!(svg, r#"<g id="panel{index}">"#).ok();
    writeln!(svg, r#"<text x="{left:.2}" y="{:.2}" font-size="13">{title}</text>"#, top - 10.0).ok();
    writeln!(svg, r##"<rect x="{left:.2}" y="{top:.2}" width="{w:.2}" height="{h:.2}" fill="none" stroke="#000"/>"##).ok();
    for i in 0..=4 {
        let frac = i as f64 / 4.0;
        let t = t_end * frac;
        let v = lo + (hi - lo) * frac;
        writeln!(
            svg,
            r#"<text x="{:.2}" y="{:.2}" font-size="10" text-anchor="middle">{}</text>"#,
            sx(t),
            top + h + 15.0,
            tick(t)
        )
        .ok();
        writeln!(
            svg,
            r#"<text x="{:.2}" y="{:.2}" font-size="10" text-anchor="end">{}</text>"#,
            left - 5.0,
            sy(v) + 3.0,
            tick(v)
        )
        .ok();
    }
    writeln!(
        svg,
        r#"<text x="{:.2}" y="{:.2}" font-size="11" text-anchor="middle">t [s]</text>"#,
        left + w / 2.0,
        top + h + 32.0
    )
    .ok();
    let stride = times.len().div_ceil(MAX_POINTS).max(1);
    for (k, s) in series.iter().enumerate() {
        let mut pts = String::new();
        let mut idx: Vec<usize> = (0..times.len()).step_by(stride).collect();
        if let Some(&last) = idx.last() {
            if last + 1 != times.len() {
                idx.push(times.len() - 1);
            }
        }
        for i in idx {
            let v = s.values[i];
            if v.is_finite() {
                write!(pts, "{:.2},{:.2} ", sx(times[i]), sy(v)).ok();
            }
        }
        let dash = if s.dashed { r#" stroke-dasharray="6,3""# } else { "" };
        if !pts.is_empty() {
            writeln!(
                svg,
                r#"<polyline fill="none" stroke="{}" stroke-width="1.2"{dash} points="{}"/>"#,
                s.color,
                pts.trim_end()
            )
            .ok();
        }
        let lx = left + w - 110.0;
        let ly = top + 14.0 + 14.0 * k as f64;
        writeln!(
            svg,
            r#"<line x1="{lx:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="{}"{dash}/>"#,
            ly - 4.0,
            lx + 20.0,
            ly - 4.0,
            s.color
        )
        .ok();
        writeln!(svg, r#"<text x="{:.2}" y="{ly:.2}" font-size="10">{}</text>"#, lx + 25.0, s.label).ok();
    }
    writeln!(svg, "</g>").ok();
}

/// Static line plot: one panel per output with its two limit curves, and a
/// final panel with the inputs. Output is a deterministic function of the
/// trajectory.
pub fn render_svg(traj: &Trajectory) -> String {
    let panels = traj.v + 1;
    let height = PANEL_HEIGHT * panels as f64;
    let mut svg = String::new();
    writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SVG_WIDTH}" height="{height}" viewBox="0 0 {SVG_WIDTH} {height}">"#
    )
    .ok();
    writeln!(svg, r##"<rect width="100%" height="100%" fill="#fff"/>"##).ok();
    let times: Vec<f64> = traj.samples.iter().map(|s| s.t).collect();
    let t_end = times.last().copied().unwrap_or(0.0);
    for i in 0..traj.v {
        let pick = |f: &dyn Fn(&simkit::Sample) -> f64| traj.samples.iter().map(f).collect::<Vec<f64>>();
        let series = [
            Series { label: format!("y{}", i + 1), color: PALETTE[0], dashed: false, values: pick(&|s| s.y[i]) },
            Series { label: "lower".into(), color: "#d62728", dashed: true, values: pick(&|s| s.g_lower[i]) },
            Series { label: "upper".into(), color: "#d62728", dashed: true, values: pick(&|s| s.g_upper[i]) },
        ];
        panel(&mut svg, i, &format!("output y{}", i + 1), &times, &series, t_end);
    }
    let inputs: Vec<Series<'_>> = (0..traj.m)
        .map(|j| Series {
            label: format!("u{}", j + 1),
            color: PALETTE[(j + 1) % PALETTE.len()],
            dashed: false,
            values: traj.samples.iter().map(|s| s.u[j]).collect(),
        })
        .collect();
    panel(&mut svg, traj.v, "control input", &times, &inputs, t_end);
    svg.push_str("</svg>\n");
    svg
}

pub fn emit_svg(traj: &Trajectory, path: &Path) -> io::Result<()> {
    write_file(path, &render_svg(traj))
}

#[derive(Debug, Parser)]
#[command(name = "setguard", version, about = "Simulate and certify output-constrained feedback loops")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate a scenario and write CSV, SVG and a summary.
    Run {
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        no_svg: bool,
    },
    /// Evaluate the scenario's certificate without simulating.
    Verify { config: PathBuf },
    /// List the built-in scenarios.
    Presets,
}

/// Entry point shared by the binary and the tests.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_CLEAN };
            e.print().ok();
            return code;
        }
    };
    match cli.command {
        Command::Presets => {
            for (name, about) in PRESETS {
                println!("{name:<22}{about}");
            }
            EXIT_CLEAN
        }
        Command::Run { config, out, seed, no_svg } => {
            let mut cfg = match load_config(&config) {
                Ok(c) => c,
                Err(e) => {
                    eprintln!("error: {}: {e}", config.display());
                    return EXIT_CONFIG;
                }
            };
            if out.is_some() {
                cfg.out = out;
            }
            if seed.is_some() {
                cfg.seed = seed;
            }
            if no_svg {
                cfg.emit.svg = false;
            }
            run(&cfg, &resolve_out_dir(&cfg))
        }
        Command::Verify { config } => match load_config(&config) {
            Ok(cfg) => verify(&cfg, &resolve_out_dir(&cfg)),
            Err(e) => {
                eprintln!("error: {}: {e}", config.display());
                EXIT_CONFIG
            }
        },
    }
}
