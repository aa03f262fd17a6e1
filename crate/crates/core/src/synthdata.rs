//! Seeded synthetic scenarios: radii truth, echoes, episode labels and an
//! on-disk dataset format with checksums.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::acoustics::{AcousticsError, EchoModel, EchoSetup, EchoTrace, PulseSpec};
use crate::fsutil::{sha256_hex, write_atomic};
use crate::hemogrid::{solve_flow, ArteryModel, FlowBoundary, FlowError, Grid, PressureWaveform, RadiiField};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("flow simulation failed: {0}")]
    Simulation(#[from] FlowError),
    #[error("echo synthesis failed: {0}")]
    Echo(#[from] AcousticsError),
    #[error("checksum mismatch for {file}")]
    Corruption { file: String },
    #[error("unsupported dataset format version {found} (this build reads {supported})")]
    Version { found: u64, supported: u64 },
    #[error("format error: {0}")]
    Format(String),
    #[error("i/o error: {0}")]
    Io(String),
}

type Result<T> = std::result::Result<T, SynthError>;

pub const FORMAT_VERSION: u64 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
/// Amplitude reflection coefficient of the fixed calibration reflector.
pub const REFERENCE_REFLECTIVITY: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScenarioKind {
    Baseline,
    StaticStenosis,
    ProgressiveOcclusion,
}

impl std::str::FromStr for ScenarioKind {
    type Err = SynthError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Self::Baseline),
            "static-stenosis" => Ok(Self::StaticStenosis),
            "progressive-occlusion" => Ok(Self::ProgressiveOcclusion),
            other => Err(SynthError::Domain(format!("unknown scenario kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub kind: ScenarioKind,
    /// Fractional radius reduction at the stenosis centre, in `[0, 1)`.
    pub severity: f64,
    pub stenosis_center: usize,
    /// Full width at half depth, in cells.
    pub stenosis_width: f64,
    /// Noise RMS as a fraction of the noiseless echo RMS.
    pub noise_rms: f64,
    pub seed: u64,
    pub sessions: usize,
    pub grid: Grid,
    pub model: ArteryModel,
    pub pulse: PulseSpec,
    pub echo: EchoSetup,
    /// `V = 1` iff `min r/r0` falls below this.
    pub label_threshold: f64,
    pub horizon: usize,
    pub step_seconds: f64,
    /// Time between sessions (s).
    pub session_interval: f64,
    /// Fractional density change reached by the last session.
    pub density_drift: f64,
    /// Inlet pressure excess amplitude for the flow perturbation (Pa).
    pub inlet_amplitude: f64,
    pub inlet_frequency: f64,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        Self {
            kind: ScenarioKind::ProgressiveOcclusion,
            severity: 0.5,
            stenosis_center: 32,
            stenosis_width: 8.0,
            noise_rms: 0.0,
            seed: 42,
            sessions: 5,
            grid: Grid::new(64, 200, 1.5e-3, 1e-4).expect("default grid is valid"),
            model: ArteryModel::default(),
            pulse: PulseSpec::default(),
            echo: EchoSetup::default(),
            label_threshold: 0.6,
            horizon: 24,
            step_seconds: 3600.0,
            session_interval: 86400.0,
            density_drift: 0.02,
            inlet_amplitude: 100.0,
            inlet_frequency: 1.2,
        }
    }
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<()> {
        let dom = |m: String| Err(SynthError::Domain(m));
        if !(0.0..1.0).contains(&self.severity) {
            return dom(format!("severity must lie in [0, 1), got {}", self.severity));
        }
        if self.sessions < 1 {
            return dom("sessions must be >= 1".into());
        }
        if !(self.noise_rms.is_finite() && self.noise_rms >= 0.0) {
            return dom(format!("noise_rms must be >= 0, got {}", self.noise_rms));
        }
        if !(self.label_threshold > 0.0 && self.label_threshold <= 1.0) {
            return dom(format!("label threshold must lie in (0, 1], got {}", self.label_threshold));
        }
        if self.horizon < 1 {
            return dom("horizon must be >= 1".into());
        }
        for (name, v) in [("step_seconds", self.step_seconds), ("session_interval", self.session_interval)] {
            if !(v.is_finite() && v > 0.0) {
                return dom(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.density_drift.is_finite() && self.density_drift > -1.0) {
            return dom(format!("density drift must exceed -1, got {}", self.density_drift));
        }
        if !self.inlet_amplitude.is_finite() || !(self.inlet_frequency.is_finite() && self.inlet_frequency >= 0.0) {
            return dom("inlet waveform parameters must be finite".into());
        }
        if self.kind != ScenarioKind::Baseline {
            let w = self.stenosis_width;
            if !(w.is_finite() && w >= 1.0) {
                return dom(format!("stenosis width must be >= 1 cell, got {w}"));
            }
            let margin = w.ceil() as usize;
            let nx = self.grid.nx();
            if self.stenosis_center < margin || self.stenosis_center + margin > nx - 1 {
                return dom(format!("stenosis centred at {} with width {w} does not fit in {nx} cells", self.stenosis_center));
            }
        }
        self.model.validate()?;
        self.echo.validate(&self.pulse)?;
        Ok(())
    }

    /// Fraction of the way through the scenario at session `s`, in `[0, 1]`.
    pub fn progress(&self, s: usize) -> f64 {
        s as f64 / (self.sessions - 1).max(1) as f64
    }

    /// Dip depth (fraction of r0) at session `s`.
    pub fn depth(&self, s: usize) -> f64 {
        match self.kind {
            ScenarioKind::Baseline => 0.0,
            ScenarioKind::StaticStenosis => self.severity,
            ScenarioKind::ProgressiveOcclusion => self.severity * self.progress(s),
        }
    }

    /// Depth growth per horizon step.
    pub fn depth_rate(&self) -> f64 {
        match self.kind {
            ScenarioKind::ProgressiveOcclusion if self.sessions > 1 => {
                self.severity / (self.sessions - 1) as f64 * self.step_seconds / self.session_interval
            }
            _ => 0.0,
        }
    }

    pub fn density_change(&self, s: usize) -> f64 {
        self.density_drift * self.progress(s)
    }

    /// Gaussian dip geometry before the flow perturbation.
    pub fn geometry(&self, s: usize) -> Vec<f64> {
        let depth = self.depth(s);
        let r0 = self.model.r0;
        if depth == 0.0 {
            return vec![r0; self.grid.nx()];
        }
        let sigma = self.stenosis_width / (2.0 * (2.0 * 2f64.ln()).sqrt());
        let c = self.stenosis_center as f64;
        (0..self.grid.nx())
            .map(|i| {
                let d = i as f64 - c;
                r0 * (1.0 - depth * (-d * d / (2.0 * sigma * sigma)).exp())
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSession {
    pub session_index: usize,
    /// Seconds since the scenario start.
    pub timestamp: f64,
    pub radii_truth: Vec<f64>,
    pub echo: EchoTrace,
    /// Echo of the fixed calibration reflector, for time of flight.
    pub reference_echo: EchoTrace,
    pub label_v: u8,
    /// Labels for horizon steps `1..=H`.
    pub future_labels: Vec<u8>,
    pub density_fractional_change: f64,
}

pub fn min_ratio(column: &[f64], r0: f64) -> f64 {
    column.iter().copied().fold(f64::INFINITY, f64::min) / r0
}

pub fn label_for(column: &[f64], r0: f64, threshold: f64) -> u8 {
    u8::from(min_ratio(column, r0) < threshold)
}

pub fn session_id(index: usize) -> String {
    format!("session-{index:03}")
}

/// Per-session random stream; independent of generation order.
pub fn session_rng(seed: u64, session_index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(session_index as u64);
    rng
}

/// Adds Gaussian noise whose realized RMS is exactly `relative·RMS(samples)`.
pub fn add_noise(samples: &mut [f64], relative: f64, rng: &mut impl Rng) {
    let n = samples.len() as f64;
    let target = relative * (samples.iter().map(|v| v * v).sum::<f64>() / n).sqrt();
    if target == 0.0 {
        return;
    }
    let noise: Vec<f64> = (0..samples.len()).map(|_| rng.sample(StandardNormal)).collect();
    let rms = (noise.iter().map(|v| v * v).sum::<f64>() / n).sqrt();
    if rms == 0.0 {
        return;
    }
    for (s, e) in samples.iter_mut().zip(noise) {
        *s += e * target / rms;
    }
}

fn generate_session(spec: &ScenarioSpec, s: usize) -> Result<LabeledSession> {
    let mut rng = session_rng(spec.seed, s);
    let grid = &spec.grid;
    let model = &spec.model;

    let phase = rng.random::<f64>() * 2.0 * PI;
    let inlet = PressureWaveform::sinusoid(spec.inlet_amplitude, spec.inlet_frequency, phase, grid.dt(), grid.nt());
    let flow = solve_flow(model, grid, &inlet, FlowBoundary::InletPressure)?;
    let radii_truth: Vec<f64> = spec.geometry(s).iter().zip(flow.radii.last_column()).map(|(g, f)| g * f / model.r0).collect();

    let id = session_id(s);
    let forward = EchoModel::new(&spec.pulse, grid, model, &spec.echo)?;
    let mut echo = forward.trace(&radii_truth)?;
    add_noise(&mut echo, spec.noise_rms, &mut rng);

    let density = spec.density_change(s);
    let c_session = spec.pulse.c() / (1.0 + density).sqrt();
    let reference = EchoModel::new(&spec.pulse.with_sound_speed(c_session)?, grid, model, &spec.echo)?;
    let mut reference_samples = vec![0.0; reference.n_samples()];
    reference.add_arrival(&mut reference_samples, 2.0 * grid.length() / c_session, REFERENCE_REFLECTIVITY);
    add_noise(&mut reference_samples, spec.noise_rms, &mut rng);

    let ratio = min_ratio(&radii_truth, model.r0);
    let rate = spec.depth_rate();
    let future_labels = (1..=spec.horizon).map(|i| u8::from(ratio - rate * (i as f64) < spec.label_threshold)).collect();

    Ok(LabeledSession {
        session_index: s,
        timestamp: s as f64 * spec.session_interval,
        label_v: label_for(&radii_truth, model.r0, spec.label_threshold),
        radii_truth,
        echo: forward.to_trace(echo, &id)?,
        reference_echo: reference.to_trace(reference_samples, &id)?,
        future_labels,
        density_fractional_change: density,
    })
}

/// All sessions of a scenario; a pure function of `spec`.
pub fn generate_scenario(spec: &ScenarioSpec) -> Result<Vec<LabeledSession>> {
    spec.validate()?;
    (0..spec.sessions).into_par_iter().map(|s| generate_session(spec, s)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: ScenarioSpec,
    pub sessions: Vec<LabeledSession>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionEntry {
    pub session_index: usize,
    pub timestamp: f64,
    pub label_v: u8,
    pub future_labels: Vec<u8>,
    pub density_fractional_change: f64,
    pub radii_file: String,
    pub echo_file: String,
    pub reference_file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u64,
    pub seed: u64,
    pub spec: ScenarioSpec,
    pub sessions: Vec<SessionEntry>,
    /// SHA-256 of every data file, keyed by file name.
    pub checksums: BTreeMap<String, String>,
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> SynthError {
    SynthError::Io(format!("{}: {e}", path.display()))
}

/// Writes one radii CSV, one echo CSV and one reference CSV per session,
/// then `manifest.json`. Every file is written atomically.
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<Manifest> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let grid = dataset.spec.grid;
    let mut checksums = BTreeMap::new();
    let mut entries = Vec::with_capacity(dataset.sessions.len());
    for s in &dataset.sessions {
        let stem = format!("session_{:03}", s.session_index);
        let files = [
            (format!("{stem}_radii.csv"), RadiiField::from_column(grid, s.radii_truth.clone())?.to_csv_string()),
            (format!("{stem}_echo.csv"), s.echo.to_csv_string()),
            (format!("{stem}_reference.csv"), s.reference_echo.to_csv_string()),
        ];
        for (name, text) in &files {
            let path = dir.join(name);
            write_atomic(&path, text.as_bytes()).map_err(|e| io_err(&path, e))?;
            checksums.insert(name.clone(), sha256_hex(text.as_bytes()));
        }
        let [radii_file, echo_file, reference_file] = files.map(|(name, _)| name);
        entries.push(SessionEntry {
            session_index: s.session_index,
            timestamp: s.timestamp,
            label_v: s.label_v,
            future_labels: s.future_labels.clone(),
            density_fractional_change: s.density_fractional_change,
            radii_file,
            echo_file,
            reference_file,
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        seed: dataset.spec.seed,
        spec: dataset.spec.clone(),
        sessions: entries,
        checksums,
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| SynthError::Format(e.to_string()))?;
    let path = dir.join(MANIFEST_FILE);
    write_atomic(&path, json.as_bytes()).map_err(|e| io_err(&path, e))?;
    Ok(manifest)
}

fn read_checked(dir: &Path, name: &str, checksums: &BTreeMap<String, String>) -> Result<String> {
    let expected = checksums.get(name).ok_or_else(|| SynthError::Format(format!("no checksum recorded for {name}")))?;
    let path = dir.join(name);
    let bytes = std::fs::read(&path).map_err(|e| io_err(&path, e))?;
    if &sha256_hex(&bytes) != expected {
        return Err(SynthError::Corruption { file: name.to_string() });
    }
    String::from_utf8(bytes).map_err(|_| SynthError::Corruption { file: name.to_string() })
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| SynthError::Format(format!("manifest: {e}")))?;
    let found = value
        .get("format_version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| SynthError::Format("manifest lacks format_version".into()))?;
    if found != FORMAT_VERSION {
        return Err(SynthError::Version { found, supported: FORMAT_VERSION });
    }
    serde_json::from_value(value).map_err(|e| SynthError::Format(format!("manifest: {e}")))
}

/// Inverse of [`write_dataset`]; verifies every checksum.
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = read_manifest(dir)?;
    let mut sessions = Vec::with_capacity(manifest.sessions.len());
    for entry in &manifest.sessions {
        let format = |name: &str, e: &dyn std::fmt::Display| SynthError::Format(format!("{name}: {e}"));
        let radii = RadiiField::parse_csv(&read_checked(dir, &entry.radii_file, &manifest.checksums)?)
            .map_err(|e| format(&entry.radii_file, &e))?;
        let echo = EchoTrace::parse_csv(&read_checked(dir, &entry.echo_file, &manifest.checksums)?)
            .map_err(|e| format(&entry.echo_file, &e))?;
        let reference_echo = EchoTrace::parse_csv(&read_checked(dir, &entry.reference_file, &manifest.checksums)?)
            .map_err(|e| format(&entry.reference_file, &e))?;
        sessions.push(LabeledSession {
            session_index: entry.session_index,
            timestamp: entry.timestamp,
            radii_truth: radii.last_column().to_vec(),
            echo,
            reference_echo,
            label_v: entry.label_v,
            future_labels: entry.future_labels.clone(),
            density_fractional_change: entry.density_fractional_change,
        });
    }
    Ok(Dataset { spec: manifest.spec, sessions })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(kind: ScenarioKind) -> ScenarioSpec {
        ScenarioSpec { kind, sessions: 3, ..ScenarioSpec::default() }
    }

    #[test]
    fn geometry_rejections() {
        let bad = ScenarioSpec { stenosis_center: 2, ..ScenarioSpec::default() };
        assert!(matches!(bad.validate(), Err(SynthError::Domain(_))));
        let bad = ScenarioSpec { stenosis_width: 0.5, ..ScenarioSpec::default() };
        assert!(bad.validate().is_err());
        let bad = ScenarioSpec { severity: 1.0, ..ScenarioSpec::default() };
        assert!(bad.validate().is_err());
        let bad = ScenarioSpec { sessions: 0, ..ScenarioSpec::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn gaussian_dip_depth_and_width() {
        let spec = ScenarioSpec { kind: ScenarioKind::StaticStenosis, stenosis_width: 4.0, ..ScenarioSpec::default() };
        let g = spec.geometry(0);
        let r0 = spec.model.r0;
        assert!((g[32] - r0 * 0.5).abs() < 1e-15);
        // Half depth two cells either side of the centre.
        assert!((g[34] - r0 * 0.75).abs() < 1e-15);
        assert!((g[30] - r0 * 0.75).abs() < 1e-15);
    }

    #[test]
    fn progressive_depth_is_linear() {
        let spec = small(ScenarioKind::ProgressiveOcclusion);
        assert_eq!(spec.depth(0), 0.0);
        assert_eq!(spec.depth(1), 0.25);
        assert_eq!(spec.depth(2), 0.5);
    }

    #[test]
    fn baseline_is_unlabelled() {
        let sessions = generate_scenario(&small(ScenarioKind::Baseline)).unwrap();
        for s in &sessions {
            assert_eq!(s.label_v, 0);
            assert!(s.future_labels.iter().all(|&v| v == 0));
        }
    }

    #[test]
    fn static_stenosis_is_labelled() {
        let spec = ScenarioSpec { kind: ScenarioKind::StaticStenosis, severity: 0.5, sessions: 1, ..ScenarioSpec::default() };
        let sessions = generate_scenario(&spec).unwrap();
        assert_eq!(sessions[0].label_v, 1);
    }

    #[test]
    fn exact_noise_rms() {
        let mut v: Vec<f64> = (0..300).map(|k| (k as f64 * 0.1).sin()).collect();
        let clean = v.clone();
        add_noise(&mut v, 0.05, &mut session_rng(1, 0));
        let rms = |x: &[f64]| (x.iter().map(|a| a * a).sum::<f64>() / x.len() as f64).sqrt();
        let diff: Vec<f64> = v.iter().zip(&clean).map(|(a, b)| a - b).collect();
        assert!((rms(&diff) / rms(&clean) - 0.05).abs() < 1e-12);
    }

    #[test]
    fn kind_names() {
        assert_eq!("progressive-occlusion".parse::<ScenarioKind>().unwrap(), ScenarioKind::ProgressiveOcclusion);
        assert!("nope".parse::<ScenarioKind>().is_err());
    }
}
