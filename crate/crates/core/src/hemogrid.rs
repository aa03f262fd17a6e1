//! Discretized non-bifurcated artery segment.
//!
//! The segment is split into `nx` finite-volume cells of width `dx`. Each
//! cell carries a cross-sectional area `D`, an axial velocity `u` and a
//! transmural pressure `p`. Two balance laws are advanced explicitly:
//!
//! ```text
//! ∂D/∂t + ∂(uD)/∂x = 0                                        (area continuity)
//! (α²/Re)·∂u/∂t + u·∂u/∂x + ∂p/∂x − (1/Re)·∂²u/∂x² = 0       (axial momentum)
//! ```
//!
//! The momentum equation is the axisymmetric 1D reduction of the
//! Womersley-scaled Navier–Stokes momentum balance and is written in
//! nondimensional variables. [`FlowScaling`] maps between the physical
//! (SI) state and those variables; [`solve_flow`] keeps the physical state
//! and scales only around the momentum update. The system is closed by the
//! linear-elastic tube law `p = p_ext + β(√D − √D0)`.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fsutil;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FlowError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("stability violation: {0}")]
    Stability(String),
    #[error("simulation diverged at step {step}: {reason}")]
    Diverged { step: usize, reason: String },
    #[error("format error: {0}")]
    Format(String),
    #[error("i/o error: {0}")]
    Io(String),
}

type Result<T> = std::result::Result<T, FlowError>;

fn domain(msg: impl Into<String>) -> FlowError {
    FlowError::Domain(msg.into())
}

/// Space-time discretization of the segment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GridParams", into = "GridParams")]
pub struct Grid {
    nx: usize,
    nt: usize,
    dx: f64,
    dt: f64,
}

#[derive(Serialize, Deserialize)]
struct GridParams {
    nx: usize,
    nt: usize,
    dx: f64,
    dt: f64,
}

impl TryFrom<GridParams> for Grid {
    type Error = FlowError;
    fn try_from(p: GridParams) -> Result<Self> {
        Grid::new(p.nx, p.nt, p.dx, p.dt)
    }
}

impl From<Grid> for GridParams {
    fn from(g: Grid) -> Self {
        GridParams { nx: g.nx, nt: g.nt, dx: g.dx, dt: g.dt }
    }
}

impl Grid {
    pub fn new(nx: usize, nt: usize, dx: f64, dt: f64) -> Result<Self> {
        if nx < 2 {
            return Err(domain(format!("nx must be >= 2, got {nx}")));
        }
        if nt < 1 {
            return Err(domain("nt must be >= 1"));
        }
        if !(dx.is_finite() && dx > 0.0) {
            return Err(domain(format!("dx must be positive, got {dx}")));
        }
        if !(dt.is_finite() && dt > 0.0) {
            return Err(domain(format!("dt must be positive, got {dt}")));
        }
        Ok(Self { nx, nt, dx, dt })
    }

    /// Builds a grid whose time step satisfies `dt ≤ cfl·dx/s_max`.
    pub fn with_signal_speed(nx: usize, nt: usize, dx: f64, dt: f64, s_max: f64, cfl: f64) -> Result<Self> {
        let grid = Self::new(nx, nt, dx, dt)?;
        grid.check_cfl(s_max, cfl)?;
        Ok(grid)
    }

    /// Builds a grid with `dt = cfl·dx/s_max`.
    pub fn from_cfl(nx: usize, nt: usize, dx: f64, cfl: f64, s_max: f64) -> Result<Self> {
        if !(cfl > 0.0 && cfl <= 1.0) {
            return Err(domain(format!("cfl must lie in (0, 1], got {cfl}")));
        }
        if !(s_max.is_finite() && s_max > 0.0) {
            return Err(domain(format!("signal speed must be positive, got {s_max}")));
        }
        Self::new(nx, nt, dx, cfl * dx / s_max)
    }

    /// Rejects the grid when `dt > cfl·dx/s_max`. Returns the Courant number.
    pub fn check_cfl(&self, s_max: f64, cfl: f64) -> Result<f64> {
        if !(cfl > 0.0 && cfl <= 1.0) {
            return Err(domain(format!("cfl must lie in (0, 1], got {cfl}")));
        }
        if !(s_max.is_finite() && s_max > 0.0) {
            return Err(domain(format!("signal speed must be positive, got {s_max}")));
        }
        let courant = s_max * self.dt / self.dx;
        if courant > cfl {
            return Err(FlowError::Stability(format!("Courant number {courant:.4} exceeds limit {cfl}")));
        }
        Ok(courant)
    }

    pub fn nx(&self) -> usize {
        self.nx
    }
    pub fn nt(&self) -> usize {
        self.nt
    }
    pub fn dx(&self) -> f64 {
        self.dx
    }
    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Segment length `nx·dx`.
    pub fn length(&self) -> f64 {
        self.nx as f64 * self.dx
    }

    /// Same spatial layout with a different number of time levels.
    pub fn with_nt(&self, nt: usize) -> Result<Self> {
        Self::new(self.nx, nt, self.dx, self.dt)
    }
}

/// Physical parameters of the artery and the blood.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArteryModel {
    /// Baseline radius (m).
    pub r0: f64,
    /// Tube-law wall stiffness (Pa·m⁻¹).
    pub beta: f64,
    /// External pressure (Pa).
    pub p_ext: f64,
    /// Blood density (kg·m⁻³).
    pub rho: f64,
    /// Dynamic viscosity (Pa·s).
    pub mu: f64,
    /// Womersley number.
    pub alpha: f64,
    /// Reynolds number.
    pub re: f64,
    /// Reference acoustic speed in blood (m·s⁻¹).
    pub c0: f64,
}

/// Pulse-wave speed the default stiffness is tuned for (m·s⁻¹).
pub const DEFAULT_PULSE_WAVE_SPEED: f64 = 5.0;

impl Default for ArteryModel {
    fn default() -> Self {
        let r0 = 2e-3;
        let rho = 1060.0;
        let sqrt_d0 = (PI * r0 * r0).sqrt();
        Self {
            r0,
            beta: 2.0 * rho * DEFAULT_PULSE_WAVE_SPEED * DEFAULT_PULSE_WAVE_SPEED / sqrt_d0,
            p_ext: 0.0,
            rho,
            mu: 3.5e-3,
            alpha: 3.0,
            re: 100.0,
            c0: 1540.0,
        }
    }
}

impl ArteryModel {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("r0", self.r0),
            ("beta", self.beta),
            ("rho", self.rho),
            ("mu", self.mu),
            ("alpha", self.alpha),
            ("re", self.re),
            ("c0", self.c0),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(domain(format!("{name} must be positive, got {v}")));
            }
        }
        if !self.p_ext.is_finite() {
            return Err(domain("p_ext must be finite"));
        }
        Ok(())
    }

    /// Baseline area `π·r0²`.
    pub fn d0(&self) -> f64 {
        PI * self.r0 * self.r0
    }

    /// Kinematic viscosity `μ/ρ`.
    pub fn nu(&self) -> f64 {
        self.mu / self.rho
    }

    /// Linear pulse-wave speed `√(β·√D/(2ρ))` at area `D`.
    pub fn pulse_wave_speed(&self, area: f64) -> f64 {
        (self.beta * area.sqrt() / (2.0 * self.rho)).sqrt()
    }

    /// Inverse of [`tube_law`]: the area carrying transmural pressure `p`.
    pub fn area_from_pressure(&self, p: f64) -> Result<f64> {
        let root = self.d0().sqrt() + (p - self.p_ext) / self.beta;
        if !(root.is_finite() && root > 0.0) {
            return Err(domain(format!("pressure {p} Pa collapses the vessel")));
        }
        Ok(root * root)
    }

    pub fn scaling(&self) -> FlowScaling {
        let length = self.r0;
        let nu = self.nu();
        let velocity = self.re * nu / length;
        FlowScaling {
            length,
            velocity,
            frequency: self.alpha * self.alpha * nu / (length * length),
            pressure: self.rho * velocity * velocity,
        }
    }
}

/// Reference scales for the nondimensional momentum equation.
///
/// With `L = r0`, `U = Re·ν/L`, `ω = α²·ν/L²` and `P = ρU²`, substituting
/// `x = L·x*`, `t = t*/ω`, `u = U·u*`, `p = P·p*` into the dimensional
/// balance `ρ(∂u/∂t + u·∂u/∂x) + ∂p/∂x − μ·∂²u/∂x² = 0` yields exactly the
/// nondimensional form advanced by [`step_momentum`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FlowScaling {
    pub length: f64,
    pub velocity: f64,
    pub frequency: f64,
    pub pressure: f64,
}

pub fn area_from_radius(r: f64) -> Result<f64> {
    if !(r.is_finite() && r > 0.0) {
        return Err(domain(format!("radius must be positive, got {r}")));
    }
    Ok(PI * r * r)
}

pub fn radius_from_area(area: f64) -> Result<f64> {
    if !(area.is_finite() && area > 0.0) {
        return Err(domain(format!("area must be positive, got {area}")));
    }
    Ok((area / PI).sqrt())
}

/// Linear-elastic tube law `p = p_ext + β(√D − √D0)`.
pub fn tube_law(area: f64, model: &ArteryModel) -> Result<f64> {
    if !(area.is_finite() && area > 0.0) {
        return Err(domain(format!("area must be positive, got {area}")));
    }
    Ok(model.p_ext + model.beta * (area.sqrt() - model.d0().sqrt()))
}

/// Ghost-cell treatment at the two ends of the segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Boundary {
    Periodic,
    /// Ghost cells copy the adjacent interior cell.
    ZeroGradient,
}

impl Boundary {
    #[inline]
    fn left(self, v: &[f64]) -> f64 {
        match self {
            Boundary::Periodic => v[v.len() - 1],
            Boundary::ZeroGradient => v[0],
        }
    }

    #[inline]
    fn right(self, v: &[f64]) -> f64 {
        match self {
            Boundary::Periodic => v[0],
            Boundary::ZeroGradient => v[v.len() - 1],
        }
    }

    #[inline]
    fn neighbours(self, v: &[f64], i: usize) -> (f64, f64) {
        let l = if i == 0 { self.left(v) } else { v[i - 1] };
        let r = if i + 1 == v.len() { self.right(v) } else { v[i + 1] };
        (l, r)
    }
}

/// Area, velocity and pressure over the cells at one time level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowState {
    pub area: Vec<f64>,
    pub velocity: Vec<f64>,
    pub pressure: Vec<f64>,
    pub time_index: usize,
}

impl FlowState {
    /// Fluid at rest with the given radii; pressure from the tube law.
    pub fn from_radii(radii: &[f64], model: &ArteryModel, time_index: usize) -> Result<Self> {
        let area = radii.iter().map(|&r| area_from_radius(r)).collect::<Result<Vec<_>>>()?;
        let pressure = area.iter().map(|&d| tube_law(d, model)).collect::<Result<Vec<_>>>()?;
        Ok(Self { velocity: vec![0.0; area.len()], area, pressure, time_index })
    }

    /// The rest state `D = D0, u = 0, p = p_ext`.
    pub fn equilibrium(model: &ArteryModel, nx: usize) -> Self {
        Self { area: vec![model.d0(); nx], velocity: vec![0.0; nx], pressure: vec![model.p_ext; nx], time_index: 0 }
    }

    pub fn len(&self) -> usize {
        self.area.len()
    }

    pub fn is_empty(&self) -> bool {
        self.area.is_empty()
    }

    /// `Σ D_i·dx`.
    pub fn volume(&self, dx: f64) -> f64 {
        self.area.iter().sum::<f64>() * dx
    }

    pub fn radii(&self) -> Result<Vec<f64>> {
        self.area.iter().map(|&d| radius_from_area(d)).collect()
    }

    fn check_dims(&self, grid: &Grid) -> Result<()> {
        let n = grid.nx();
        if self.area.len() != n || self.velocity.len() != n || self.pressure.len() != n {
            return Err(domain(format!(
                "state has {}/{}/{} cells, grid expects {n}",
                self.area.len(),
                self.velocity.len(),
                self.pressure.len()
            )));
        }
        Ok(())
    }
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

/// One first-order upwind finite-volume step of `∂D/∂t + ∂(uD)/∂x = 0`.
///
/// Face velocities are the mean of the two adjacent cells; the face flux
/// takes the area from the upwind side. The update is in flux-difference
/// form, so with periodic ends the total `Σ D_i·dx` telescopes.
pub fn step_continuity(state: &FlowState, grid: &Grid, boundary: Boundary) -> Result<FlowState> {
    state.check_dims(grid)?;
    let courant = max_abs(&state.velocity) * grid.dt() / grid.dx();
    if !(courant <= 1.0) {
        return Err(FlowError::Stability(format!("advective Courant number {courant:.4} exceeds 1")));
    }
    let n = grid.nx();
    let d = &state.area;
    let u = &state.velocity;
    // Face k sits between cells k-1 and k; faces 0 and n use ghost cells.
    let flux_at = |k: usize| {
        let (dl, ul) = if k == 0 { (boundary.left(d), boundary.left(u)) } else { (d[k - 1], u[k - 1]) };
        let (dr, ur) = if k == n { (boundary.right(d), boundary.right(u)) } else { (d[k], u[k]) };
        let uf = 0.5 * (ul + ur);
        if uf >= 0.0 {
            uf * dl
        } else {
            uf * dr
        }
    };
    let flux: Vec<f64> = (0..=n).map(flux_at).collect();
    let ratio = grid.dt() / grid.dx();
    let area = (0..n).map(|i| d[i] - ratio * (flux[i + 1] - flux[i])).collect();
    Ok(FlowState { area, velocity: state.velocity.clone(), pressure: state.pressure.clone(), time_index: state.time_index + 1 })
}

/// Terms of the momentum equation that can be switched off for verification.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MomentumTerms {
    pub convective: bool,
}

impl Default for MomentumTerms {
    fn default() -> Self {
        Self { convective: true }
    }
}

/// One explicit Euler step of the nondimensional axial momentum equation:
///
/// `u ← u + dt·(Re/α²)·(−u·∂u/∂x − ∂p/∂x + (1/Re)·∂²u/∂x²)`
///
/// with upwind `u·∂u/∂x` and central `∂p/∂x`, `∂²u/∂x²`. State and grid
/// must already be expressed in the scaled variables of [`FlowScaling`].
pub fn step_momentum(
    state: &FlowState,
    grid: &Grid,
    model: &ArteryModel,
    boundary: Boundary,
    terms: MomentumTerms,
) -> Result<FlowState> {
    state.check_dims(grid)?;
    let dx = grid.dx();
    let dt = grid.dt();
    let alpha_sq = model.alpha * model.alpha;
    let gain = model.re / alpha_sq;
    let courant = gain * max_abs(&state.velocity) * dt / dx;
    if !(courant <= 1.0) {
        return Err(FlowError::Stability(format!("momentum Courant number {courant:.4} exceeds 1")));
    }
    let diffusion = dt / (alpha_sq * dx * dx);
    if diffusion > 0.5 {
        return Err(FlowError::Stability(format!("diffusion number {diffusion:.4} exceeds 1/2")));
    }
    let u = &state.velocity;
    let p = &state.pressure;
    let velocity = (0..u.len())
        .map(|i| {
            let (ul, ur) = boundary.neighbours(u, i);
            let (pl, pr) = boundary.neighbours(p, i);
            let ui = u[i];
            let convection = if !terms.convective {
                0.0
            } else if ui >= 0.0 {
                ui * (ui - ul) / dx
            } else {
                ui * (ur - ui) / dx
            };
            let dpdx = (pr - pl) / (2.0 * dx);
            let laplacian = (ur - 2.0 * ui + ul) / (dx * dx);
            ui + dt * gain * (-convection - dpdx + laplacian / model.re)
        })
        .collect();
    Ok(FlowState { area: state.area.clone(), velocity, pressure: state.pressure.clone(), time_index: state.time_index + 1 })
}

/// Boundary treatment for a full simulation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FlowBoundary {
    /// Periodic segment; the inlet waveform is ignored.
    Periodic,
    /// Area at the first cell follows the inlet pressure; zero-gradient outlet.
    InletPressure,
}

/// Inlet pressure excess over `p_ext`, one sample per time level.
#[derive(Debug, Clone, PartialEq)]
pub struct PressureWaveform {
    samples: Vec<f64>,
}

impl PressureWaveform {
    pub fn new(samples: Vec<f64>) -> Result<Self> {
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(domain("waveform contains non-finite samples"));
        }
        Ok(Self { samples })
    }

    pub fn zero(nt: usize) -> Self {
        Self { samples: vec![0.0; nt] }
    }

    /// `amplitude·sin(2π·freq·j·dt + phase)` for `j = 0..nt`.
    pub fn sinusoid(amplitude: f64, freq: f64, phase: f64, dt: f64, nt: usize) -> Self {
        let samples = (0..nt).map(|j| amplitude * (2.0 * PI * freq * j as f64 * dt + phase).sin()).collect();
        Self { samples }
    }

    /// Linearly interpolates `(t, p)` pairs onto `j·dt`; holds the end values
    /// outside the sampled span.
    pub fn resample(times: &[f64], values: &[f64], dt: f64, nt: usize) -> Result<Self> {
        if times.len() != values.len() || times.is_empty() {
            return Err(domain("waveform needs matching, non-empty time and pressure columns"));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(domain("waveform times must be strictly increasing"));
        }
        let samples = (0..nt)
            .map(|j| {
                let t = j as f64 * dt;
                let k = times.partition_point(|&s| s <= t);
                if k == 0 {
                    values[0]
                } else if k == times.len() {
                    values[k - 1]
                } else {
                    let w = (t - times[k - 1]) / (times[k] - times[k - 1]);
                    values[k - 1] + w * (values[k] - values[k - 1])
                }
            })
            .collect();
        Self::new(samples)
    }

    /// Reads the two-column `t_s,p_pa` CSV format.
    pub fn read_csv(path: &Path, dt: f64, nt: usize) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| FlowError::Io(format!("{}: {e}", path.display())))?;
        Self::parse_csv(&text, dt, nt)
    }

    pub fn parse_csv(text: &str, dt: f64, nt: usize) -> Result<Self> {
        let mut times = Vec::new();
        let mut values = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with("t_s") {
                continue;
            }
            let mut cols = line.split(',');
            let (Some(t), Some(p), None) = (cols.next(), cols.next(), cols.next()) else {
                return Err(FlowError::Format(format!("line {}: expected `t_s,p_pa`", n + 1)));
            };
            let parse = |s: &str| s.trim().parse::<f64>().map_err(|e| FlowError::Format(format!("line {}: {e}", n + 1)));
            times.push(parse(t)?);
            values.push(parse(p)?);
        }
        Self::resample(&times, &values, dt, nt)
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    fn at(&self, j: usize) -> f64 {
        self.samples.get(j).copied().unwrap_or(0.0)
    }
}

/// Arterial radius over the space-time grid, stored time level by time level.
#[derive(Debug, Clone, PartialEq)]
pub struct RadiiField {
    grid: Grid,
    values: Vec<f64>,
}

impl RadiiField {
    /// `values` holds `nt` consecutive rows of `nx` radii.
    pub fn new(grid: Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.nx() * grid.nt() {
            return Err(domain(format!("radii field has {} values, grid expects {}x{}", values.len(), grid.nx(), grid.nt())));
        }
        if let Some(bad) = values.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
            return Err(domain(format!("radii must be positive, found {bad}")));
        }
        Ok(Self { grid, values })
    }

    /// Single time level.
    pub fn from_column(grid: Grid, column: Vec<f64>) -> Result<Self> {
        Self::new(grid.with_nt(1)?, column)
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Radii along the segment at time level `j`.
    pub fn column(&self, j: usize) -> &[f64] {
        let nx = self.grid.nx();
        &self.values[j * nx..(j + 1) * nx]
    }

    pub fn last_column(&self) -> &[f64] {
        self.column(self.grid.nt() - 1)
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[j * self.grid.nx() + i]
    }

    /// Radius history `r(i, ·)` of one cell.
    pub fn history(&self, i: usize) -> Vec<f64> {
        (0..self.grid.nt()).map(|j| self.at(i, j)).collect()
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Header `# nx,nt,dx,dt` followed by `nt` rows of `nx` radii.
    pub fn to_csv_string(&self) -> String {
        let g = &self.grid;
        let mut out = format!("# {},{},{},{}\n", g.nx(), g.nt(), g.dx(), g.dt());
        for j in 0..g.nt() {
            for (i, r) in self.column(j).iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                let _ = write!(out, "{r}");
            }
            out.push('\n');
        }
        out
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| FlowError::Format("empty radii file".into()))?;
        let header = header.trim().strip_prefix('#').ok_or_else(|| FlowError::Format("missing `# nx,nt,dx,dt` header".into()))?;
        let fields: Vec<&str> = header.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(FlowError::Format("header must hold nx,nt,dx,dt".into()));
        }
        let bad = |e: &dyn std::fmt::Display| FlowError::Format(format!("header: {e}"));
        let nx: usize = fields[0].parse().map_err(|e| bad(&e))?;
        let nt: usize = fields[1].parse().map_err(|e| bad(&e))?;
        let dx: f64 = fields[2].parse().map_err(|e| bad(&e))?;
        let dt: f64 = fields[3].parse().map_err(|e| bad(&e))?;
        let grid = Grid::new(nx, nt, dx, dt)?;
        let mut values = Vec::with_capacity(nx * nt);
        let mut rows = 0;
        for (j, line) in lines.enumerate() {
            let before = values.len();
            for cell in line.split(',') {
                let v: f64 = cell.trim().parse().map_err(|e| FlowError::Format(format!("row {}: {e}", j + 1)))?;
                values.push(v);
            }
            if values.len() - before != nx {
                return Err(FlowError::Format(format!("row {} has {} values, expected {nx}", j + 1, values.len() - before)));
            }
            rows += 1;
        }
        if rows != nt {
            return Err(FlowError::Format(format!("found {rows} rows, header declares {nt}")));
        }
        Self::new(grid, values)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fsutil::write_atomic(path, self.to_csv_string().as_bytes()).map_err(|e| FlowError::Io(format!("{}: {e}", path.display())))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| FlowError::Io(format!("{}: {e}", path.display())))?;
        Self::parse_csv(&text)
    }
}

/// Output of [`solve_flow`]: radii history plus the state at every level.
#[derive(Debug, Clone)]
pub struct FlowSolution {
    pub radii: RadiiField,
    pub states: Vec<FlowState>,
}

impl FlowSolution {
    /// Largest relative deviation of the total volume from its initial value.
    pub fn volume_drift(&self) -> f64 {
        let dx = self.radii.grid().dx();
        let v0 = self.states[0].volume(dx);
        self.states.iter().map(|s| ((s.volume(dx) - v0) / v0).abs()).fold(0.0, f64::max)
    }
}

/// Runs the coupled simulation from the rest state.
pub fn solve_flow(model: &ArteryModel, grid: &Grid, inlet: &PressureWaveform, bc: FlowBoundary) -> Result<FlowSolution> {
    let initial = FlowState::equilibrium(model, grid.nx());
    solve_flow_from(initial, model, grid, inlet, bc)
}

/// Runs `grid.nt() − 1` steps from `initial`, emitting `nt` time levels.
///
/// Each step advances momentum with the current pressure, then continuity
/// with the updated velocity, then re-evaluates the tube law.
pub fn solve_flow_from(
    initial: FlowState,
    model: &ArteryModel,
    grid: &Grid,
    inlet: &PressureWaveform,
    bc: FlowBoundary,
) -> Result<FlowSolution> {
    model.validate()?;
    initial.check_dims(grid)?;
    if initial.area.iter().any(|d| !(d.is_finite() && *d > 0.0)) {
        return Err(domain("initial area must be positive"));
    }
    let boundary = match bc {
        FlowBoundary::Periodic => Boundary::Periodic,
        FlowBoundary::InletPressure => Boundary::ZeroGradient,
    };
    let scale = model.scaling();
    let scaled_grid = Grid::new(grid.nx(), grid.nt(), grid.dx() / scale.length, grid.dt() * scale.frequency)?;

    let nx = grid.nx();
    let mut radii = Vec::with_capacity(nx * grid.nt());
    let mut states = Vec::with_capacity(grid.nt());
    let mut state = FlowState { time_index: 0, ..initial };
    if bc == FlowBoundary::InletPressure {
        state.area[0] = model.area_from_pressure(model.p_ext + inlet.at(0))?;
    }
    state.pressure = pressures(&state.area, model)?;
    radii.extend(state.radii()?);
    states.push(state.clone());

    for j in 1..grid.nt() {
        let diverged = |reason: String| FlowError::Diverged { step: j, reason };
        let scaled = FlowState {
            area: state.area.clone(),
            velocity: state.velocity.iter().map(|u| u / scale.velocity).collect(),
            pressure: state.pressure.iter().map(|p| p / scale.pressure).collect(),
            time_index: state.time_index,
        };
        let stepped = step_momentum(&scaled, &scaled_grid, model, boundary, MomentumTerms::default())
            .map_err(|e| diverged(e.to_string()))?;
        state.velocity = stepped.velocity.iter().map(|u| u * scale.velocity).collect();
        let mut next = step_continuity(&state, grid, boundary).map_err(|e| diverged(e.to_string()))?;
        if bc == FlowBoundary::InletPressure {
            next.area[0] = model.area_from_pressure(model.p_ext + inlet.at(j)).map_err(|e| diverged(e.to_string()))?;
        }
        if let Some((i, d)) = next.area.iter().enumerate().find(|(_, d)| !(d.is_finite() && **d > 0.0)) {
            return Err(diverged(format!("area {d} at cell {i}")));
        }
        if let Some(i) = next.velocity.iter().position(|u| !u.is_finite()) {
            return Err(diverged(format!("non-finite velocity at cell {i}")));
        }
        next.pressure = pressures(&next.area, model).map_err(|e| diverged(e.to_string()))?;
        next.time_index = j;
        radii.extend(next.radii().map_err(|e| diverged(e.to_string()))?);
        states.push(next.clone());
        state = next;
    }
    Ok(FlowSolution { radii: RadiiField::new(*grid, radii)?, states })
}

fn pressures(area: &[f64], model: &ArteryModel) -> Result<Vec<f64>> {
    area.iter().map(|&d| tube_law(d, model)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rel(a: f64, b: f64) -> f64 {
        ((a - b) / b).abs()
    }

    #[test]
    fn area_examples() {
        assert!(rel(area_from_radius(1.0).unwrap(), PI) < 1e-15);
        assert!(rel(area_from_radius(2.0).unwrap(), 4.0 * PI) < 1e-15);
        assert!(rel(area_from_radius(1e-3).unwrap(), PI * 1e-6) < 1e-15);
        assert!(matches!(area_from_radius(0.0), Err(FlowError::Domain(_))));
        assert!(matches!(area_from_radius(-1.0), Err(FlowError::Domain(_))));
    }

    #[test]
    fn radius_examples() {
        assert!(rel(radius_from_area(PI).unwrap(), 1.0) < 1e-15);
        assert!(rel(radius_from_area(4.0 * PI).unwrap(), 2.0) < 1e-15);
        assert!(radius_from_area(0.0).is_err());
        assert!(radius_from_area(f64::NAN).is_err());
    }

    #[test]
    fn tube_law_examples() {
        let model = ArteryModel::default();
        assert_eq!(tube_law(model.d0(), &model).unwrap(), model.p_ext);

        let m = ArteryModel { beta: 2.0, p_ext: 0.0, ..model };
        let area = (m.d0().sqrt() + 0.5).powi(2);
        assert!((tube_law(area, &m).unwrap() - 1.0).abs() < 1e-12);
        assert!(tube_law(area * 1.01, &m).unwrap() > tube_law(area, &m).unwrap());
        assert!(tube_law(0.0, &m).is_err());
    }

    #[test]
    fn tube_law_inverse() {
        let model = ArteryModel::default();
        for p in [-500.0, 0.0, 1200.0] {
            let d = model.area_from_pressure(p).unwrap();
            assert!((tube_law(d, &model).unwrap() - p).abs() < 1e-6);
        }
        assert!(model.area_from_pressure(-1e9).is_err());
    }

    #[test]
    fn default_wave_speed() {
        let model = ArteryModel::default();
        assert!(rel(model.pulse_wave_speed(model.d0()), DEFAULT_PULSE_WAVE_SPEED) < 1e-12);
    }

    #[test]
    fn grid_rejects_bad_values() {
        assert!(Grid::new(1, 10, 0.1, 0.1).is_err());
        assert!(Grid::new(4, 0, 0.1, 0.1).is_err());
        assert!(Grid::new(4, 1, 0.0, 0.1).is_err());
        assert!(Grid::new(4, 1, 0.1, -1.0).is_err());
        assert!(matches!(Grid::with_signal_speed(8, 1, 0.1, 0.2, 1.0, 1.0), Err(FlowError::Stability(_))));
        assert!(Grid::from_cfl(8, 1, 0.1, 1.5, 1.0).is_err());
        let g = Grid::from_cfl(8, 1, 0.1, 0.5, 2.0).unwrap();
        assert!(rel(g.dt(), 0.025) < 1e-15);
    }

    #[test]
    fn continuity_uniform_is_steady() {
        let grid = Grid::new(16, 2, 0.1, 0.05).unwrap();
        let state = FlowState { area: vec![2.0; 16], velocity: vec![0.7; 16], pressure: vec![0.0; 16], time_index: 0 };
        let next = step_continuity(&state, &grid, Boundary::Periodic).unwrap();
        assert_eq!(next.area, state.area);
        let still = FlowState { velocity: vec![0.0; 16], ..state.clone() };
        assert_eq!(step_continuity(&still, &grid, Boundary::ZeroGradient).unwrap().area, still.area);
    }

    #[test]
    fn continuity_rejects_cfl_violation() {
        let grid = Grid::new(4, 2, 0.1, 0.1).unwrap();
        let state = FlowState { area: vec![1.0; 4], velocity: vec![1.5; 4], pressure: vec![0.0; 4], time_index: 0 };
        assert!(matches!(step_continuity(&state, &grid, Boundary::Periodic), Err(FlowError::Stability(_))));
    }

    #[test]
    fn continuity_dimension_mismatch() {
        let grid = Grid::new(4, 2, 0.1, 0.1).unwrap();
        let state = FlowState::equilibrium(&ArteryModel::default(), 5);
        assert!(matches!(step_continuity(&state, &grid, Boundary::Periodic), Err(FlowError::Domain(_))));
    }

    #[test]
    fn momentum_at_rest_stays_at_rest() {
        let grid = Grid::new(16, 2, 1.0, 0.01).unwrap();
        let model = ArteryModel { alpha: 10f64.sqrt(), re: 100.0, ..ArteryModel::default() };
        let state = FlowState { area: vec![1.0; 16], velocity: vec![0.0; 16], pressure: vec![3.0; 16], time_index: 0 };
        let next = step_momentum(&state, &grid, &model, Boundary::Periodic, MomentumTerms::default()).unwrap();
        assert!(next.velocity.iter().all(|&u| u == 0.0));
    }

    #[test]
    fn momentum_rejects_unstable_diffusion() {
        let grid = Grid::new(16, 2, 0.01, 0.01).unwrap();
        let model = ArteryModel { alpha: 1.0, ..ArteryModel::default() };
        let state = FlowState::equilibrium(&model, 16);
        assert!(matches!(
            step_momentum(&state, &grid, &model, Boundary::Periodic, MomentumTerms::default()),
            Err(FlowError::Stability(_))
        ));
    }

    #[test]
    fn inlet_waveform_resampling() {
        let w = PressureWaveform::resample(&[0.0, 1.0], &[0.0, 10.0], 0.25, 6).unwrap();
        assert_eq!(w.samples(), &[0.0, 2.5, 5.0, 7.5, 10.0, 10.0]);
        assert!(PressureWaveform::resample(&[0.0, 0.0], &[1.0, 2.0], 0.1, 3).is_err());
        let parsed = PressureWaveform::parse_csv("t_s,p_pa\n0,0\n1,10\n", 0.5, 3).unwrap();
        assert_eq!(parsed.samples(), &[0.0, 5.0, 10.0]);
        assert!(PressureWaveform::parse_csv("t_s,p_pa\n0;1\n", 0.5, 3).is_err());
    }

    #[test]
    fn radii_csv_parse_errors() {
        assert!(RadiiField::parse_csv("").is_err());
        assert!(RadiiField::parse_csv("2,1,0.1,0.1\n1,1\n").is_err());
        assert!(RadiiField::parse_csv("# 2,1,0.1,0.1\n1,1,1\n").is_err());
        assert!(RadiiField::parse_csv("# 2,2,0.1,0.1\n1,1\n").is_err());
        assert!(RadiiField::parse_csv("# 2,1,0.1,0.1\n1,-1\n").is_err());
        let f = RadiiField::parse_csv("# 2,1,0.1,0.1\n0.002,0.0019\n").unwrap();
        assert_eq!(f.column(0), &[0.002, 0.0019]);
    }

    #[test]
    fn equilibrium_is_fixed_point() {
        let model = ArteryModel::default();
        let grid = Grid::from_cfl(32, 200, 1.5e-3, 0.5, 6.0).unwrap();
        let sol = solve_flow(&model, &grid, &PressureWaveform::zero(200), FlowBoundary::InletPressure).unwrap();
        for r in sol.radii.values() {
            assert!(rel(*r, model.r0) < 1e-12);
        }
        for s in &sol.states {
            assert!(s.velocity.iter().all(|u| u.abs() < 1e-12));
        }
    }

    #[test]
    fn divergence_names_step() {
        let model = ArteryModel::default();
        let grid = Grid::from_cfl(16, 50, 1.5e-3, 0.5, 6.0).unwrap();
        // A pressure drop this large collapses the inlet cell.
        let mut samples = vec![0.0; 50];
        samples[7] = -1e7;
        let inlet = PressureWaveform::new(samples).unwrap();
        match solve_flow(&model, &grid, &inlet, FlowBoundary::InletPressure) {
            Err(FlowError::Diverged { step, .. }) => assert_eq!(step, 7),
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
