//! Harmonic pressure field, single-scattering echo synthesis, time-of-flight
//! estimation and density inference between measurement sessions.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fsutil;
use crate::hemogrid::{area_from_radius, ArteryModel, Grid};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AcousticsError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("estimation error: {0}")]
    Estimation(String),
    #[error("low-confidence time of flight: peak correlation {peak:.3} below floor {floor}")]
    LowConfidence { peak: f64, floor: f64 },
    #[error("format error: {0}")]
    Format(String),
    #[error("i/o error: {0}")]
    Io(String),
}

type Result<T> = std::result::Result<T, AcousticsError>;

/// Relative tolerance on `ω² = c²(k_x² + k_r²)`.
pub const DISPERSION_TOLERANCE: f64 = 1e-10;

/// Single-frequency incident/reflected pulse.
///
/// `amp_forward` and `amp_reflected` are pressure amplitudes (Pa) of the
/// forward and reflected terms of the field.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PulseParams", into = "PulseParams")]
pub struct PulseSpec {
    omega: f64,
    amp_forward: f64,
    amp_reflected: f64,
    k_x: f64,
    k_r: f64,
    c: f64,
}

#[derive(Serialize, Deserialize)]
struct PulseParams {
    omega: f64,
    amp_forward: f64,
    amp_reflected: f64,
    k_x: f64,
    k_r: f64,
    c: f64,
}

impl TryFrom<PulseParams> for PulseSpec {
    type Error = AcousticsError;
    fn try_from(p: PulseParams) -> Result<Self> {
        PulseSpec::new(p.omega, p.amp_forward, p.amp_reflected, p.k_x, p.k_r, p.c)
    }
}

impl From<PulseSpec> for PulseParams {
    fn from(p: PulseSpec) -> Self {
        PulseParams { omega: p.omega, amp_forward: p.amp_forward, amp_reflected: p.amp_reflected, k_x: p.k_x, k_r: p.k_r, c: p.c }
    }
}

impl PulseSpec {
    pub fn new(omega: f64, amp_forward: f64, amp_reflected: f64, k_x: f64, k_r: f64, c: f64) -> Result<Self> {
        let spec = Self::new_unchecked(omega, amp_forward, amp_reflected, k_x, k_r, c);
        if !(omega.is_finite() && omega > 0.0) {
            return Err(AcousticsError::Domain(format!("omega must be positive, got {omega}")));
        }
        if !(c.is_finite() && c > 0.0) {
            return Err(AcousticsError::Domain(format!("sound speed must be positive, got {c}")));
        }
        if !(k_x.is_finite() && k_x >= 0.0 && k_r.is_finite() && k_r >= 0.0) {
            return Err(AcousticsError::Domain("wave numbers must be non-negative".into()));
        }
        if !(amp_forward.is_finite() && amp_reflected.is_finite()) {
            return Err(AcousticsError::Domain("amplitudes must be finite".into()));
        }
        let lhs = omega * omega;
        let rhs = c * c * (k_x * k_x + k_r * k_r);
        if ((lhs - rhs) / lhs).abs() > DISPERSION_TOLERANCE {
            return Err(AcousticsError::Domain(format!("dispersion closure violated: omega^2 = {lhs:e}, c^2 |k|^2 = {rhs:e}")));
        }
        Ok(spec)
    }

    /// Pulse at `freq_hz` whose wave vector makes angle `angle` (rad) with the x axis.
    pub fn from_frequency(freq_hz: f64, amp_forward: f64, amp_reflected: f64, angle: f64, c: f64) -> Result<Self> {
        let omega = 2.0 * PI * freq_hz;
        let k = omega / c;
        Self::new(omega, amp_forward, amp_reflected, k * angle.cos(), k * angle.sin(), c)
    }

    /// Skips the dispersion check. Only for verifying that the residual
    /// oracle detects closure violations.
    #[doc(hidden)]
    pub fn new_unchecked(omega: f64, amp_forward: f64, amp_reflected: f64, k_x: f64, k_r: f64, c: f64) -> Self {
        Self { omega, amp_forward, amp_reflected, k_x, k_r, c }
    }

    pub fn omega(&self) -> f64 {
        self.omega
    }
    pub fn amp_forward(&self) -> f64 {
        self.amp_forward
    }
    pub fn amp_reflected(&self) -> f64 {
        self.amp_reflected
    }
    pub fn k_x(&self) -> f64 {
        self.k_x
    }
    pub fn k_r(&self) -> f64 {
        self.k_r
    }
    pub fn c(&self) -> f64 {
        self.c
    }
    pub fn frequency(&self) -> f64 {
        self.omega / (2.0 * PI)
    }
    pub fn period(&self) -> f64 {
        2.0 * PI / self.omega
    }
    pub fn wavelength(&self) -> f64 {
        self.c * self.period()
    }

    pub fn with_amplitudes(&self, amp_forward: f64, amp_reflected: f64) -> Self {
        Self { amp_forward, amp_reflected, ..*self }
    }

    pub fn with_sound_speed(&self, c: f64) -> Result<Self> {
        let scale = self.c / c;
        Self::new(self.omega, self.amp_forward, self.amp_reflected, self.k_x * scale, self.k_r * scale, c)
    }
}

/// Default carrier frequency (Hz).
pub const DEFAULT_FREQUENCY: f64 = 80e3;

impl Default for PulseSpec {
    /// 80 kHz axial pulse of 1 kPa in blood at 1540 m/s.
    fn default() -> Self {
        Self::from_frequency(DEFAULT_FREQUENCY, 1000.0, 0.0, 0.0, 1540.0).expect("default pulse is consistent")
    }
}

/// `A·e^{i(ωt − k_x x − k_r r)} + B·e^{i(ωt − k_x x + k_r r)}`.
pub fn wave_field(pulse: &PulseSpec, x: f64, r: f64, t: f64) -> Complex64 {
    let base = pulse.omega * t - pulse.k_x * x;
    let forward = Complex64::from_polar(pulse.amp_forward, base - pulse.k_r * r);
    let reflected = Complex64::from_polar(pulse.amp_reflected, base + pulse.k_r * r);
    forward + reflected
}

/// Evenly spaced sample positions `start, start+step, …` up to `stop`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Axis {
    pub start: f64,
    pub stop: f64,
    pub step: f64,
}

impl Axis {
    fn count(&self) -> Result<usize> {
        if !(self.step.is_finite() && self.step > 0.0 && self.start.is_finite() && self.stop.is_finite()) {
            return Err(AcousticsError::Domain(format!("degenerate axis {self:?}")));
        }
        let n = ((self.stop - self.start) / self.step + 1e-9).floor() as i64 + 1;
        if n < 3 {
            return Err(AcousticsError::Domain(format!("axis {self:?} holds fewer than three samples")));
        }
        Ok(n as usize)
    }

    fn at(&self, k: usize) -> f64 {
        self.start + k as f64 * self.step
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleBox {
    pub x: Axis,
    pub r: Axis,
    pub t: Axis,
}

impl SampleBox {
    /// Box of `points` samples per axis; spatial steps are `wavelength/divisions`
    /// and the time step is `period/divisions`.
    pub fn wavelength_fraction(pulse: &PulseSpec, divisions: f64, points: usize, origin: (f64, f64, f64)) -> Self {
        let h = pulse.wavelength() / divisions;
        let tau = pulse.period() / divisions;
        let span = (points.max(1) - 1) as f64;
        let axis = |start: f64, step: f64| Axis { start, stop: start + span * step, step };
        Self { x: axis(origin.0, h), r: axis(origin.1, h), t: axis(origin.2, tau) }
    }
}

/// Normalized wave-equation residual
/// `max |∇²P − c⁻²∂²P/∂t²| / (max|P|·(k_x² + k_r²))` over the interior of
/// `sample_box`, with central second differences along x, r and t.
pub fn wave_equation_residual(pulse: &PulseSpec, sample_box: &SampleBox) -> Result<f64> {
    let (nx, nr, nt) = (sample_box.x.count()?, sample_box.r.count()?, sample_box.t.count()?);
    let k_sq = pulse.k_x * pulse.k_x + pulse.k_r * pulse.k_r;
    if !(k_sq > 0.0) {
        return Err(AcousticsError::Domain("wave vector is zero".into()));
    }
    let (hx, hr, ht) = (sample_box.x.step, sample_box.r.step, sample_box.t.step);
    let inv_c_sq = 1.0 / (pulse.c * pulse.c);
    let mut max_residual = 0.0_f64;
    let mut max_field = 0.0_f64;
    for i in 1..nx - 1 {
        let x = sample_box.x.at(i);
        for j in 1..nr - 1 {
            let r = sample_box.r.at(j);
            for k in 1..nt - 1 {
                let t = sample_box.t.at(k);
                let p = wave_field(pulse, x, r, t);
                let second = |a: Complex64, b: Complex64, h: f64| (a - 2.0 * p + b) / (h * h);
                let pxx = second(wave_field(pulse, x - hx, r, t), wave_field(pulse, x + hx, r, t), hx);
                let prr = second(wave_field(pulse, x, r - hr, t), wave_field(pulse, x, r + hr, t), hr);
                let ptt = second(wave_field(pulse, x, r, t - ht), wave_field(pulse, x, r, t + ht), ht);
                max_residual = max_residual.max((pxx + prr - ptt * inv_c_sq).norm());
                max_field = max_field.max(p.norm());
            }
        }
    }
    if max_field == 0.0 {
        return Ok(0.0);
    }
    Ok(max_residual / (max_field * k_sq))
}

/// Pressure reflection coefficient at a step from `area_left` to `area_right`,
/// with characteristic impedance `Z = ρ·c0/D`.
pub fn reflection_coefficient(area_left: f64, area_right: f64, model: &ArteryModel) -> Result<f64> {
    if !(area_left.is_finite() && area_left > 0.0 && area_right.is_finite() && area_right > 0.0) {
        return Err(AcousticsError::Domain(format!("areas must be positive, got {area_left} and {area_right}")));
    }
    let z_left = model.rho * model.c0 / area_left;
    let z_right = model.rho * model.c0 / area_right;
    Ok((z_right - z_left) / (z_right + z_left))
}

/// Sampling of an echo recording.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EchoSetup {
    /// Sample rate (Hz).
    pub fs: f64,
    /// Listening time after the pulse centre (s).
    pub duration: f64,
    /// Hann-windowed cycles in the incident pulse.
    pub n_cycles: f64,
}

impl Default for EchoSetup {
    fn default() -> Self {
        Self { fs: 2e6, duration: 1.5e-4, n_cycles: 5.0 }
    }
}

impl EchoSetup {
    pub fn validate(&self, pulse: &PulseSpec) -> Result<()> {
        if !(self.n_cycles.is_finite() && self.n_cycles > 0.0) {
            return Err(AcousticsError::Config(format!("n_cycles must be positive, got {}", self.n_cycles)));
        }
        if !(self.duration.is_finite() && self.duration > 0.0) {
            return Err(AcousticsError::Config(format!("duration must be positive, got {}", self.duration)));
        }
        let nyquist_margin = 4.0 * pulse.frequency();
        if !(self.fs.is_finite() && self.fs > nyquist_margin) {
            return Err(AcousticsError::Config(format!(
                "sample rate {} Hz must exceed {nyquist_margin} Hz (4x the pulse frequency)",
                self.fs
            )));
        }
        Ok(())
    }

    pub fn window(&self, pulse: &PulseSpec) -> f64 {
        self.n_cycles * pulse.period()
    }

    /// Trace start: half a window before the pulse centre.
    pub fn t0(&self, pulse: &PulseSpec) -> f64 {
        -0.5 * self.window(pulse)
    }

    pub fn n_samples(&self, pulse: &PulseSpec) -> usize {
        ((self.window(pulse) + self.duration) * self.fs).ceil() as usize + 1
    }
}

/// Sampled pressure recording.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EchoTrace {
    pub samples: Vec<f64>,
    pub fs: f64,
    pub t0: f64,
    pub session_id: String,
}

impl EchoTrace {
    pub fn new(samples: Vec<f64>, fs: f64, t0: f64, session_id: impl Into<String>) -> Result<Self> {
        let session_id = session_id.into();
        if !(fs.is_finite() && fs > 0.0) {
            return Err(AcousticsError::Domain(format!("sample rate must be positive, got {fs}")));
        }
        if samples.len() < 2 {
            return Err(AcousticsError::Domain("a trace needs at least two samples".into()));
        }
        if samples.iter().any(|v| !v.is_finite()) || !t0.is_finite() {
            return Err(AcousticsError::Domain("trace contains non-finite values".into()));
        }
        if session_id.is_empty() || session_id.chars().any(char::is_whitespace) {
            return Err(AcousticsError::Domain(format!("invalid session id {session_id:?}")));
        }
        Ok(Self { samples, fs, t0, session_id })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn time(&self, k: usize) -> f64 {
        self.t0 + k as f64 / self.fs
    }

    pub fn peak_abs(&self) -> f64 {
        self.samples.iter().fold(0.0, |m: f64, v| m.max(v.abs()))
    }

    pub fn rms(&self) -> f64 {
        (self.samples.iter().map(|v| v * v).sum::<f64>() / self.samples.len() as f64).sqrt()
    }

    /// `# fs=<Hz> session=<id>` header, a `t_s,p_pa` column line, then one row per sample.
    pub fn to_csv_string(&self) -> String {
        let mut out = format!("# fs={} session={}\nt_s,p_pa\n", self.fs, self.session_id);
        for (k, p) in self.samples.iter().enumerate() {
            let _ = writeln!(out, "{},{}", self.time(k), p);
        }
        out
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let fmt = |m: String| AcousticsError::Format(m);
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| fmt("empty echo file".into()))?;
        let header = header.trim().strip_prefix('#').ok_or_else(|| fmt("missing `# fs=<Hz> session=<id>` header".into()))?;
        let mut fs = None;
        let mut session = None;
        for token in header.split_whitespace() {
            match token.split_once('=') {
                Some(("fs", v)) => fs = Some(v.parse::<f64>().map_err(|e| fmt(format!("fs: {e}")))?),
                Some(("session", v)) => session = Some(v.to_string()),
                _ => return Err(fmt(format!("unexpected header token {token:?}"))),
            }
        }
        let fs = fs.ok_or_else(|| fmt("header lacks fs".into()))?;
        let session = session.ok_or_else(|| fmt("header lacks session".into()))?;
        let mut t0 = None;
        let mut samples = Vec::new();
        for (n, line) in lines.enumerate() {
            let line = line.trim();
            if line.is_empty() || line == "t_s,p_pa" {
                continue;
            }
            let (t, p) = line.split_once(',').ok_or_else(|| fmt(format!("line {}: expected `t_s,p_pa`", n + 2)))?;
            let t: f64 = t.trim().parse().map_err(|e| fmt(format!("line {}: {e}", n + 2)))?;
            let p: f64 = p.trim().parse().map_err(|e| fmt(format!("line {}: {e}", n + 2)))?;
            t0.get_or_insert(t);
            samples.push(p);
        }
        let t0 = t0.ok_or_else(|| fmt("echo file has no samples".into()))?;
        Self::new(samples, fs, t0, session).map_err(|e| fmt(e.to_string()))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fsutil::write_atomic(path, self.to_csv_string().as_bytes())
            .map_err(|e| AcousticsError::Io(format!("{}: {e}", path.display())))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| AcousticsError::Io(format!("{}: {e}", path.display())))?;
        Self::parse_csv(&text)
    }
}

/// Sampled single-scattering forward model for one segment geometry.
///
/// The incident pulse is `A·w(t)·cos(ωt)` with a Hann window `w` spanning
/// `n_cycles` periods centred on `t = 0`. The interface between cells `i`
/// and `i+1` sits at `x_i = (i+1)·dx` and returns a copy delayed by
/// `2x_i/c` and scaled by `Γ_i·Π_{m<i}(1 − Γ_m²)`.
#[derive(Debug, Clone)]
pub struct EchoModel {
    pulse: PulseSpec,
    model: ArteryModel,
    dx: f64,
    fs: f64,
    t0: f64,
    n_samples: usize,
    window: f64,
}

impl EchoModel {
    pub fn new(pulse: &PulseSpec, grid: &Grid, model: &ArteryModel, setup: &EchoSetup) -> Result<Self> {
        setup.validate(pulse)?;
        let round_trip = 2.0 * grid.length() / pulse.c();
        if setup.duration < round_trip {
            return Err(AcousticsError::Config(format!(
                "duration {} s does not cover the round trip {round_trip} s",
                setup.duration
            )));
        }
        Ok(Self {
            pulse: *pulse,
            model: *model,
            dx: grid.dx(),
            fs: setup.fs,
            t0: setup.t0(pulse),
            n_samples: setup.n_samples(pulse),
            window: setup.window(pulse),
        })
    }

    /// Forward model matching the sampling of an existing recording.
    pub fn matching(trace: &EchoTrace, pulse: &PulseSpec, grid: &Grid, model: &ArteryModel, n_cycles: f64) -> Result<Self> {
        let setup = EchoSetup { fs: trace.fs, duration: trace.len() as f64 / trace.fs, n_cycles };
        setup.validate(pulse)?;
        Ok(Self {
            pulse: *pulse,
            model: *model,
            dx: grid.dx(),
            fs: trace.fs,
            t0: trace.t0,
            n_samples: trace.len(),
            window: setup.window(pulse),
        })
    }

    pub fn pulse(&self) -> &PulseSpec {
        &self.pulse
    }
    pub fn fs(&self) -> f64 {
        self.fs
    }
    pub fn t0(&self) -> f64 {
        self.t0
    }
    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    /// Unit-amplitude incident waveform at time `t` relative to its centre.
    pub fn incident(&self, t: f64) -> f64 {
        let half = 0.5 * self.window;
        if t.abs() > half {
            return 0.0;
        }
        let w = 0.5 * (1.0 + (2.0 * PI * t / self.window).cos());
        w * (self.pulse.omega() * t).cos()
    }

    /// Adds `amplitude·A·incident(t − delay)` into `out`.
    pub fn add_arrival(&self, out: &mut [f64], delay: f64, amplitude: f64) {
        let half = 0.5 * self.window;
        let first = ((delay - half - self.t0) * self.fs).ceil().max(0.0) as usize;
        let last = ((delay + half - self.t0) * self.fs).floor();
        if last < 0.0 {
            return;
        }
        let last = (last as usize).min(out.len().saturating_sub(1));
        let scale = amplitude * self.pulse.amp_forward();
        for (k, slot) in out.iter_mut().enumerate().take(last + 1).skip(first) {
            let t = self.t0 + k as f64 / self.fs;
            *slot += scale * self.incident(t - delay);
        }
    }

    /// Per-interface reflection coefficients of a radii column.
    pub fn reflection_coefficients(&self, column: &[f64]) -> Result<Vec<f64>> {
        let areas = column
            .iter()
            .map(|&r| area_from_radius(r))
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| AcousticsError::Domain(e.to_string()))?;
        areas.windows(2).map(|w| reflection_coefficient(w[0], w[1], &self.model)).collect()
    }

    /// Noiseless echo samples for a radii column.
    pub fn trace(&self, column: &[f64]) -> Result<Vec<f64>> {
        let gammas = self.reflection_coefficients(column)?;
        let mut out = vec![0.0; self.n_samples];
        let mut transmission = 1.0;
        for (i, gamma) in gammas.iter().enumerate() {
            if *gamma != 0.0 {
                let delay = 2.0 * (i + 1) as f64 * self.dx / self.pulse.c();
                self.add_arrival(&mut out, delay, gamma * transmission);
            }
            transmission *= 1.0 - gamma * gamma;
        }
        Ok(out)
    }

    /// The emitted pulse on the same time axis as the echoes.
    pub fn incident_samples(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.n_samples];
        self.add_arrival(&mut out, 0.0, 1.0);
        out
    }

    pub fn to_trace(&self, samples: Vec<f64>, session_id: &str) -> Result<EchoTrace> {
        EchoTrace::new(samples, self.fs, self.t0, session_id)
    }
}

/// First-order echo of one radii column.
pub fn synthesize_echo(
    column: &[f64],
    pulse: &PulseSpec,
    grid: &Grid,
    model: &ArteryModel,
    setup: &EchoSetup,
    session_id: &str,
) -> Result<EchoTrace> {
    if column.len() != grid.nx() {
        return Err(AcousticsError::Domain(format!("radii column has {} cells, grid expects {}", column.len(), grid.nx())));
    }
    let forward = EchoModel::new(pulse, grid, model, setup)?;
    let samples = forward.trace(column)?;
    forward.to_trace(samples, session_id)
}

/// The emitted pulse sampled like [`synthesize_echo`] output.
pub fn incident_trace(
    pulse: &PulseSpec,
    grid: &Grid,
    model: &ArteryModel,
    setup: &EchoSetup,
    session_id: &str,
) -> Result<EchoTrace> {
    let forward = EchoModel::new(pulse, grid, model, setup)?;
    forward.to_trace(forward.incident_samples(), session_id)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToFMeasurement {
    pub tof: f64,
    pub peak_correlation: f64,
    pub session_id: String,
}

pub const DEFAULT_CORRELATION_FLOOR: f64 = 0.2;

pub fn estimate_tof(incident: &EchoTrace, echo: &EchoTrace) -> Result<ToFMeasurement> {
    estimate_tof_with_floor(incident, echo, DEFAULT_CORRELATION_FLOOR)
}

/// Cross-correlation delay of `echo` relative to `incident`.
///
/// The integer-lag peak of the normalized cross-correlation is refined by a
/// three-point parabola; the returned delay also accounts for differing
/// trace start times.
pub fn estimate_tof_with_floor(incident: &EchoTrace, echo: &EchoTrace, floor: f64) -> Result<ToFMeasurement> {
    if incident.fs != echo.fs {
        return Err(AcousticsError::Estimation(format!("sample rates differ: {} vs {}", incident.fs, echo.fs)));
    }
    let energy = |s: &[f64]| s.iter().map(|v| v * v).sum::<f64>();
    let (e_inc, e_echo) = (energy(&incident.samples), energy(&echo.samples));
    if e_inc == 0.0 || e_echo == 0.0 {
        return Err(AcousticsError::Estimation("trace is all zeros".into()));
    }
    let norm = (e_inc * e_echo).sqrt();
    let x = &incident.samples;
    let y = &echo.samples;
    let first = x.iter().position(|v| *v != 0.0).unwrap_or(0);
    let last = x.iter().rposition(|v| *v != 0.0).unwrap_or(0);

    // Lag k aligns incident[n] with echo[n + k].
    let correlate = |k: i64| -> f64 {
        let mut acc = 0.0;
        for (n, xn) in x.iter().enumerate().take(last + 1).skip(first) {
            let m = n as i64 + k;
            if m >= 0 && (m as usize) < y.len() {
                acc += xn * y[m as usize];
            }
        }
        acc / norm
    };
    let min_lag = -(last as i64);
    let max_lag = y.len() as i64 - 1 - first as i64;
    let mut best_lag = min_lag;
    let mut best = f64::NEG_INFINITY;
    for k in min_lag..=max_lag {
        let c = correlate(k);
        if c > best {
            best = c;
            best_lag = k;
        }
    }
    if best < floor {
        return Err(AcousticsError::LowConfidence { peak: best, floor });
    }
    let (y0, y2) = (correlate(best_lag - 1), correlate(best_lag + 1));
    let curvature = y0 - 2.0 * best + y2;
    let offset = if curvature < 0.0 { (0.5 * (y0 - y2) / curvature).clamp(-0.5, 0.5) } else { 0.0 };
    let tof = (best_lag as f64 + offset) / echo.fs + (echo.t0 - incident.t0);
    if tof < -0.5 / echo.fs {
        return Err(AcousticsError::Estimation(format!("echo precedes the incident pulse by {} s", -tof)));
    }
    Ok(ToFMeasurement { tof: tof.max(0.0), peak_correlation: best.min(1.0), session_id: echo.session_id.clone() })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DensityEstimate {
    /// `ρ_new/ρ_ref`.
    pub ratio: f64,
    pub fractional_change: f64,
    pub assumes_fixed_bulk_modulus: bool,
    pub assumes_fixed_path: bool,
}

/// Density ratio between two sessions from their times of flight.
///
/// With `c = √(K/ρ)`, fixed `K` and a fixed path, `ρ_new/ρ_ref = (tof_new/tof_ref)²`.
/// Only the fixed-bulk-modulus relation is available.
pub fn density_change(tof_ref: &ToFMeasurement, tof_new: &ToFMeasurement, bulk_modulus_fixed: bool) -> Result<DensityEstimate> {
    if !bulk_modulus_fixed {
        return Err(AcousticsError::Domain("density inference from time of flight requires a fixed bulk modulus".into()));
    }
    if !(tof_ref.tof.is_finite() && tof_ref.tof > 0.0) {
        return Err(AcousticsError::Domain(format!("reference time of flight must be positive, got {}", tof_ref.tof)));
    }
    if !(tof_new.tof.is_finite() && tof_new.tof > 0.0) {
        return Err(AcousticsError::Domain(format!("time of flight must be positive, got {}", tof_new.tof)));
    }
    let q = tof_new.tof / tof_ref.tof;
    let ratio = q * q;
    Ok(DensityEstimate { ratio, fractional_change: ratio - 1.0, assumes_fixed_bulk_modulus: true, assumes_fixed_path: true })
}
