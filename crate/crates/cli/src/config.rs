//! Run configuration: a TOML file with one table per pipeline stage.
//!
//! Every key is optional; omitted keys take the library defaults. Unknown
//! keys are rejected so that typos surface as configuration errors.
//!
//! ```toml
//! seed = 42
//!
//! [grid]
//! nx = 64
//! dx = 1.5e-3
//!
//! [risk]
//! provider = "llm"
//! endpoint = "http://127.0.0.1:8080/v1/likelihood"
//! ```

use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use vasosim_core::acoustics::{EchoSetup, PulseSpec};
use vasosim_core::hemogrid::{ArteryModel, FlowBoundary, Grid};
use vasosim_core::inversion::{LineSearch, SolverOptions, SolverRegistry, REFERENCE_SOLVER};
use vasosim_core::risk::{AlertPolicy, LikelihoodProvider, LlmConfig, LlmProvider, LogisticProvider};
use vasosim_core::synthdata::{ScenarioKind, ScenarioSpec};

use crate::error::CliError;

/// Environment variable naming a default config file.
pub const CONFIG_ENV: &str = "VASOSIM_CONFIG";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    Logistic,
    Llm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SinkKind {
    File,
    Webhook,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub nx: usize,
    pub nt: usize,
    pub dx: f64,
    pub dt: f64,
    /// Courant limit checked against the baseline pulse-wave speed.
    pub cfl: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { nx: 64, nt: 200, dx: 1.5e-3, dt: 1e-4, cfl: 0.9 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowConfig {
    pub boundary: FlowBoundary,
    /// Inlet pressure excess over `p_ext` (Pa).
    pub inlet_amplitude: f64,
    pub inlet_frequency: f64,
    pub inlet_phase: f64,
    /// Two-column `t_s,p_pa` CSV; replaces the sinusoidal inlet when set.
    pub waveform: Option<PathBuf>,
    /// Relative amplitude of a one-wavelength sinusoidal radius perturbation
    /// in the initial state.
    pub initial_ripple: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            boundary: FlowBoundary::InletPressure,
            inlet_amplitude: 100.0,
            inlet_frequency: 1.2,
            inlet_phase: 0.0,
            waveform: None,
            initial_ripple: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PulseConfig {
    pub frequency: f64,
    pub amp_forward: f64,
    pub amp_reflected: f64,
    /// Propagation angle from the axis (rad).
    pub angle: f64,
    pub c: f64,
}

impl Default for PulseConfig {
    fn default() -> Self {
        let p = PulseSpec::default();
        Self {
            frequency: p.frequency(),
            amp_forward: p.amp_forward(),
            amp_reflected: p.amp_reflected(),
            angle: p.k_r().atan2(p.k_x()),
            c: p.c(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EchoConfig {
    pub fs: f64,
    pub duration: f64,
    pub n_cycles: f64,
    /// Additive noise as a fraction of the echo RMS.
    pub noise_rms: f64,
}

impl Default for EchoConfig {
    fn default() -> Self {
        let e = EchoSetup::default();
        Self { fs: e.fs, duration: e.duration, n_cycles: e.n_cycles, noise_rms: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub name: String,
    pub lambda: f64,
    pub max_iter: usize,
    pub grad_tol: f64,
    pub step_tol: f64,
    pub fd_step: f64,
    pub shrink: f64,
    pub sufficient_decrease: f64,
    /// Radius bounds as multiples of `r0`.
    pub r_min: f64,
    pub r_max: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        let o = SolverOptions::default();
        Self {
            name: REFERENCE_SOLVER.into(),
            lambda: 1e-4,
            max_iter: o.max_iter,
            grad_tol: o.grad_tol,
            step_tol: o.step_tol,
            fd_step: o.fd_step,
            shrink: o.line_search.shrink,
            sufficient_decrease: o.line_search.sufficient_decrease,
            r_min: 0.1,
            r_max: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RiskConfig {
    pub provider: ProviderKind,
    pub endpoint: Option<String>,
    /// Per-request timeout (s).
    pub timeout: f64,
    pub template_version: String,
    pub max_retries: usize,
    pub max_in_flight: usize,
    pub horizon: usize,
    pub step_seconds: f64,
    pub weights: [f64; 3],
    pub bias: f64,
    pub horizon_decay: f64,
    pub warn_threshold: f64,
    pub critical_threshold: f64,
    pub critical_horizon: usize,
    pub sink: SinkKind,
    pub webhook_url: Option<String>,
}

impl Default for RiskConfig {
    fn default() -> Self {
        let l = LogisticProvider::default();
        let p = AlertPolicy::default();
        Self {
            provider: ProviderKind::Logistic,
            endpoint: None,
            timeout: 10.0,
            template_version: "v1".into(),
            max_retries: 2,
            max_in_flight: 4,
            horizon: 24,
            step_seconds: 3600.0,
            weights: l.weights,
            bias: l.bias,
            horizon_decay: l.horizon_decay,
            warn_threshold: p.warn_threshold,
            critical_threshold: p.critical_threshold,
            critical_horizon: p.critical_horizon,
            sink: SinkKind::File,
            webhook_url: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub kind: ScenarioKind,
    pub severity: f64,
    /// Cell index; defaults to the middle of the grid.
    pub stenosis_center: Option<usize>,
    pub stenosis_width: f64,
    pub noise_rms: f64,
    pub sessions: usize,
    pub label_threshold: f64,
    pub session_interval: f64,
    pub density_drift: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        let s = ScenarioSpec::default();
        Self {
            kind: s.kind,
            severity: s.severity,
            stenosis_center: None,
            stenosis_width: s.stenosis_width,
            noise_rms: 0.01,
            sessions: s.sessions,
            label_threshold: s.label_threshold,
            session_interval: s.session_interval,
            density_drift: s.density_drift,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub input: Option<PathBuf>,
    pub model: ArteryModel,
    pub grid: GridConfig,
    pub flow: FlowConfig,
    pub pulse: PulseConfig,
    pub echo: EchoConfig,
    pub solver: SolverConfig,
    pub risk: RiskConfig,
    pub scenario: ScenarioConfig,
}

/// Values given on the command line, applied over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub input: Option<PathBuf>,
    pub solver: Option<String>,
    pub provider: Option<ProviderKind>,
    pub endpoint: Option<String>,
    pub lambda: Option<f64>,
    pub max_iter: Option<usize>,
    pub timeout: Option<f64>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Reads `path`, else the file named by `VASOSIM_CONFIG`, else defaults.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let env_path = std::env::var_os(CONFIG_ENV).map(PathBuf::from);
        match path.map(Path::to_path_buf).or(env_path) {
            Some(p) => {
                let text = std::fs::read_to_string(&p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
                Self::parse(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))
            }
            None => Ok(Self::default()),
        }
    }

    pub fn apply(&mut self, o: Overrides) {
        if let Some(v) = o.seed {
            self.seed = v;
        }
        if o.out.is_some() {
            self.out = o.out;
        }
        if o.input.is_some() {
            self.input = o.input;
        }
        if let Some(v) = o.solver {
            self.solver.name = v;
        }
        if let Some(v) = o.provider {
            self.risk.provider = v;
        }
        if o.endpoint.is_some() {
            self.risk.endpoint = o.endpoint;
        }
        if let Some(v) = o.lambda {
            self.solver.lambda = v;
        }
        if let Some(v) = o.max_iter {
            self.solver.max_iter = v;
        }
        if let Some(v) = o.timeout {
            self.risk.timeout = v;
        }
    }

    /// Checks every parameter and builds the typed settings. Nothing is
    /// written before this succeeds.
    pub fn resolve(&self) -> Result<Settings, CliError> {
        let bad = |m: String| CliError::Config(m);
        self.model.validate().map_err(|e| bad(format!("[model] {e}")))?;
        let g = &self.grid;
        let grid = Grid::new(g.nx, g.nt, g.dx, g.dt).map_err(|e| bad(format!("[grid] {e}")))?;
        grid.check_cfl(self.model.pulse_wave_speed(self.model.d0()), g.cfl).map_err(|e| bad(format!("[grid] {e}")))?;

        let f = &self.flow;
        for (name, v) in
            [("inlet_amplitude", f.inlet_amplitude), ("inlet_frequency", f.inlet_frequency), ("inlet_phase", f.inlet_phase)]
        {
            if !v.is_finite() {
                return Err(bad(format!("[flow] {name} must be finite")));
            }
        }
        if !(f.initial_ripple.is_finite() && f.initial_ripple.abs() < 1.0) {
            return Err(bad(format!("[flow] initial_ripple must lie in (-1, 1), got {}", f.initial_ripple)));
        }
        if let Some(p) = &f.waveform {
            if !p.is_file() {
                return Err(bad(format!("[flow] waveform file {} not found", p.display())));
            }
        }

        let p = &self.pulse;
        let pulse = PulseSpec::from_frequency(p.frequency, p.amp_forward, p.amp_reflected, p.angle, p.c)
            .map_err(|e| bad(format!("[pulse] {e}")))?;
        let echo = EchoSetup { fs: self.echo.fs, duration: self.echo.duration, n_cycles: self.echo.n_cycles };
        echo.validate(&pulse).map_err(|e| bad(format!("[echo] {e}")))?;
        if !(self.echo.noise_rms.is_finite() && self.echo.noise_rms >= 0.0) {
            return Err(bad("[echo] noise_rms must be >= 0".into()));
        }

        let s = &self.solver;
        let options = SolverOptions {
            max_iter: s.max_iter,
            grad_tol: s.grad_tol,
            step_tol: s.step_tol,
            fd_step: s.fd_step,
            line_search: LineSearch { shrink: s.shrink, sufficient_decrease: s.sufficient_decrease, ..LineSearch::default() },
        };
        options.validate().map_err(|e| bad(format!("[solver] {e}")))?;
        if !(s.lambda.is_finite() && s.lambda >= 0.0) {
            return Err(bad(format!("[solver] lambda must be >= 0, got {}", s.lambda)));
        }
        if !(s.r_min > 0.0 && s.r_min <= 1.0 && s.r_max >= 1.0 && s.r_max.is_finite() && s.r_min < s.r_max) {
            return Err(bad(format!("[solver] bounds must satisfy 0 < r_min <= 1 <= r_max, got ({}, {})", s.r_min, s.r_max)));
        }
        let registry = SolverRegistry::with_reference();
        registry.get(&s.name).map_err(|e| bad(format!("[solver] {e}")))?;

        let r = &self.risk;
        let policy = AlertPolicy {
            warn_threshold: r.warn_threshold,
            critical_threshold: r.critical_threshold,
            critical_horizon: r.critical_horizon,
        };
        policy.validate().map_err(|e| bad(format!("[risk] {e}")))?;
        if r.horizon < 1 {
            return Err(bad("[risk] horizon must be >= 1".into()));
        }
        if !(r.step_seconds.is_finite() && r.step_seconds > 0.0) {
            return Err(bad("[risk] step_seconds must be positive".into()));
        }
        if !(r.timeout.is_finite() && r.timeout > 0.0) {
            return Err(bad(format!("[risk] timeout must be positive, got {}", r.timeout)));
        }
        let provider = self.provider_spec()?;
        if r.sink == SinkKind::Webhook && r.webhook_url.as_deref().unwrap_or("").is_empty() {
            return Err(bad("[risk] webhook sink needs webhook_url".into()));
        }

        let sc = &self.scenario;
        let scenario = ScenarioSpec {
            kind: sc.kind,
            severity: sc.severity,
            stenosis_center: sc.stenosis_center.unwrap_or(grid.nx() / 2),
            stenosis_width: sc.stenosis_width,
            noise_rms: sc.noise_rms,
            seed: self.seed,
            sessions: sc.sessions,
            grid,
            model: self.model,
            pulse,
            echo,
            label_threshold: sc.label_threshold,
            horizon: r.horizon,
            step_seconds: r.step_seconds,
            session_interval: sc.session_interval,
            density_drift: sc.density_drift,
            inlet_amplitude: f.inlet_amplitude,
            inlet_frequency: f.inlet_frequency,
        };
        scenario.validate().map_err(|e| bad(format!("[scenario] {e}")))?;

        Ok(Settings {
            seed: self.seed,
            model: self.model,
            grid,
            flow: self.flow.clone(),
            pulse,
            echo,
            echo_noise: self.echo.noise_rms,
            solver_name: s.name.clone(),
            registry,
            options,
            lambda: s.lambda,
            bounds: (s.r_min * self.model.r0, s.r_max * self.model.r0),
            provider,
            horizon: r.horizon,
            step_seconds: r.step_seconds,
            policy,
            sink: r.sink,
            webhook_url: r.webhook_url.clone(),
            timeout: Duration::from_secs_f64(r.timeout),
            scenario,
        })
    }

    fn provider_spec(&self) -> Result<ProviderSpec, CliError> {
        let r = &self.risk;
        match r.provider {
            ProviderKind::Logistic => LogisticProvider::new(r.weights, r.bias, r.horizon_decay)
                .map(ProviderSpec::Logistic)
                .map_err(|e| CliError::Config(format!("[risk] {e}"))),
            ProviderKind::Llm => {
                let endpoint = r.endpoint.clone().unwrap_or_default();
                if endpoint.is_empty() {
                    return Err(CliError::Config("[risk] the llm provider needs an endpoint".into()));
                }
                let mut config = LlmConfig::new(endpoint);
                config.timeout = Duration::from_secs_f64(r.timeout);
                config.template_version = r.template_version.clone();
                config.step_seconds = r.step_seconds;
                config.max_retries = r.max_retries;
                config.max_in_flight = r.max_in_flight.max(1);
                Ok(ProviderSpec::Llm(config))
            }
        }
    }
}

#[derive(Debug, Clone)]
pub enum ProviderSpec {
    Logistic(LogisticProvider),
    Llm(LlmConfig),
}

impl ProviderSpec {
    pub fn build(&self) -> Result<Box<dyn LikelihoodProvider>, CliError> {
        Ok(match self {
            Self::Logistic(p) => Box::new(p.clone()),
            Self::Llm(c) => Box::new(LlmProvider::new(c.clone()).map_err(|e| CliError::Config(e.to_string()))?),
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Logistic(_) => "logistic",
            Self::Llm(_) => "llm",
        }
    }
}

/// Validated, typed form of [`RunConfig`].
#[derive(Debug)]
pub struct Settings {
    pub seed: u64,
    pub model: ArteryModel,
    pub grid: Grid,
    pub flow: FlowConfig,
    pub pulse: PulseSpec,
    pub echo: EchoSetup,
    pub echo_noise: f64,
    pub solver_name: String,
    pub registry: SolverRegistry,
    pub options: SolverOptions,
    pub lambda: f64,
    pub bounds: (f64, f64),
    pub provider: ProviderSpec,
    pub horizon: usize,
    pub step_seconds: f64,
    pub policy: AlertPolicy,
    pub sink: SinkKind,
    pub webhook_url: Option<String>,
    pub timeout: Duration,
    pub scenario: ScenarioSpec,
}
