//! One function per subcommand. Each resolves and checks all of its inputs
//! before creating any output.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;
use vasosim_core::acoustics::{density_change, estimate_tof, incident_trace, synthesize_echo, EchoTrace, ToFMeasurement};
use vasosim_core::fsutil::{sha256_hex, write_atomic};
use vasosim_core::hemogrid::{solve_flow_from, FlowBoundary, FlowState, PressureWaveform, RadiiField};
use vasosim_core::inversion::{InverseProblem, InverseSolution};
use vasosim_core::risk::{
    compute_tte, dispatch_alert, likelihood_curve, stenosis_index, AlertContext, AlertPayload, AlertSink, BiophysicsReport,
    EpisodeLikelihood, FileSink, LikelihoodProvider, Provenance, RiskError, Severity, TTEResult, WebhookSink,
};
use vasosim_core::synthdata::{add_noise, generate_scenario, session_id, session_rng, write_dataset, Dataset, LabeledSession};

use crate::config::{Settings, SinkKind};
use crate::error::CliError;

pub const PIPELINE_MANIFEST_VERSION: u64 = 1;

type Result<T> = std::result::Result<T, CliError>;

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Output(format!("{}: {e}", dir.display())))?;
    }
    write_atomic(path, bytes).map_err(|e| CliError::Output(format!("{}: {e}", path.display())))
}

fn to_json(value: &impl Serialize) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| CliError::Output(e.to_string()))?;
    bytes.push(b'\n');
    Ok(bytes)
}

fn require_input(input: Option<&Path>) -> Result<&Path> {
    input.ok_or_else(|| CliError::Input("this command needs --input".into()))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlowSummary {
    pub nx: usize,
    pub nt: usize,
    pub dx: f64,
    pub dt: f64,
    pub boundary: FlowBoundary,
    pub volume_drift: f64,
    pub min_radius: f64,
    pub max_radius: f64,
}

/// Runs the flow solver; writes `radii.csv` and `flow_summary.json`.
pub fn simulate(settings: &Settings, out: &Path) -> Result<FlowSummary> {
    let (grid, model, flow) = (&settings.grid, &settings.model, &settings.flow);
    let inlet = match &flow.waveform {
        Some(path) => PressureWaveform::read_csv(path, grid.dt(), grid.nt()).map_err(|e| CliError::Input(e.to_string()))?,
        None => PressureWaveform::sinusoid(flow.inlet_amplitude, flow.inlet_frequency, flow.inlet_phase, grid.dt(), grid.nt()),
    };
    let nx = grid.nx();
    let radii: Vec<f64> = (0..nx)
        .map(|i| model.r0 * (1.0 + flow.initial_ripple * (2.0 * std::f64::consts::PI * i as f64 / nx as f64).sin()))
        .collect();
    let initial = FlowState::from_radii(&radii, model, 0).map_err(|e| CliError::Config(e.to_string()))?;
    let solution =
        solve_flow_from(initial, model, grid, &inlet, flow.boundary).map_err(|e| CliError::Simulation(e.to_string()))?;
    let summary = FlowSummary {
        nx,
        nt: grid.nt(),
        dx: grid.dx(),
        dt: grid.dt(),
        boundary: flow.boundary,
        volume_drift: solution.volume_drift(),
        min_radius: solution.radii.min(),
        max_radius: solution.radii.max(),
    };
    write_file(&out.join("radii.csv"), solution.radii.to_csv_string().as_bytes())?;
    write_file(&out.join("flow_summary.json"), &to_json(&summary)?)?;
    Ok(summary)
}

/// Synthesizes the echo of the last column of a radii file; writes
/// `echo.csv` and the matching `incident.csv`.
pub fn echo(settings: &Settings, input: Option<&Path>, out: &Path) -> Result<EchoTrace> {
    let path = require_input(input)?;
    let field = RadiiField::read_csv(path).map_err(|e| CliError::Input(e.to_string()))?;
    let grid = field.grid();
    let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "echo".into());
    let synth = |column: &[f64], id: &str| {
        synthesize_echo(column, &settings.pulse, grid, &settings.model, &settings.echo, id)
            .map_err(|e| CliError::Config(e.to_string()))
    };
    let mut trace = synth(field.last_column(), &id)?;
    add_noise(&mut trace.samples, settings.echo_noise, &mut session_rng(settings.seed, 0));
    let incident = incident_trace(&settings.pulse, grid, &settings.model, &settings.echo, "incident")
        .map_err(|e| CliError::Config(e.to_string()))?;
    write_file(&out.join("echo.csv"), trace.to_csv_string().as_bytes())?;
    write_file(&out.join("incident.csv"), incident.to_csv_string().as_bytes())?;
    Ok(trace)
}

fn build_problem(settings: &Settings, observed: EchoTrace) -> Result<InverseProblem> {
    let (lo, hi) = settings.bounds;
    InverseProblem::from_setup(observed, settings.pulse, settings.grid, settings.model, &settings.echo)
        .and_then(|p| p.with_lambda(settings.lambda))
        .and_then(|p| p.with_bounds(lo, hi))
        .map_err(|e| CliError::Input(e.to_string()))
}

fn solve(settings: &Settings, problem: &InverseProblem) -> Result<InverseSolution> {
    let solver = settings.registry.get(&settings.solver_name).map_err(|e| CliError::Config(e.to_string()))?;
    solver.solve(problem, &settings.options).map_err(|e| CliError::NotConverged(e.to_string()))
}

fn write_solution(settings: &Settings, solution: &InverseSolution, dir: &Path) -> Result<()> {
    let column = RadiiField::from_column(settings.grid, solution.radii.clone()).map_err(|e| CliError::Output(e.to_string()))?;
    let mut history = String::from("iteration,objective\n");
    for (k, v) in solution.objective_history.iter().enumerate() {
        history.push_str(&format!("{k},{v:e}\n"));
    }
    write_file(&dir.join("solution.json"), &to_json(solution)?)?;
    write_file(&dir.join("radii_recovered.csv"), column.to_csv_string().as_bytes())?;
    write_file(&dir.join("objective_history.csv"), history.as_bytes())
}

/// Inverts an echo file; writes `solution.json`, `radii_recovered.csv` and
/// `objective_history.csv`. Outputs are written even when the solver does
/// not converge.
pub fn invert(settings: &Settings, input: Option<&Path>, out: &Path) -> Result<InverseSolution> {
    let path = require_input(input)?;
    let observed = EchoTrace::read_csv(path).map_err(|e| CliError::Input(e.to_string()))?;
    let problem = build_problem(settings, observed)?;
    let solution = solve(settings, &problem)?;
    write_solution(settings, &solution, out)?;
    if !solution.converged {
        return Err(CliError::NotConverged(format!(
            "stopped after {} iterations with projected gradient {:e}",
            solution.iterations, solution.gradient_norm_final
        )));
    }
    Ok(solution)
}

/// Everything `assess` derives from one report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Assessment {
    pub report: BiophysicsReport,
    pub likelihood: EpisodeLikelihood,
    pub tte: TTEResult,
    pub severity: Severity,
    /// The alert, when the policy raised one.
    pub alert: Option<AlertPayload>,
}

#[derive(Serialize)]
struct TteOutput<'a> {
    #[serde(flatten)]
    tte: &'a TTEResult,
    tte_seconds: f64,
    prob_now: f64,
    severity: Severity,
}

fn provider_error(e: RiskError) -> CliError {
    match e {
        RiskError::Domain(m) => CliError::Input(m),
        other => CliError::Provider(other.to_string()),
    }
}

/// Queries the provider and scores one report. Nothing is written.
fn score(
    settings: &Settings,
    provider: &dyn LikelihoodProvider,
    report: &BiophysicsReport,
) -> Result<(EpisodeLikelihood, TTEResult, Severity)> {
    let likelihood = likelihood_curve(report, provider, settings.horizon).map_err(provider_error)?;
    let tte = compute_tte(&likelihood, settings.step_seconds).map_err(provider_error)?;
    let severity = settings.policy.severity(likelihood.prob_now, &tte);
    Ok((likelihood, tte, severity))
}

fn write_assessment(
    dir: &Path,
    report: &BiophysicsReport,
    likelihood: &EpisodeLikelihood,
    tte: &TTEResult,
    severity: Severity,
) -> Result<()> {
    let mut csv = String::from("step,prob\n");
    csv.push_str(&format!("0,{}\n", likelihood.prob_now));
    for (i, p) in likelihood.probs.iter().enumerate() {
        csv.push_str(&format!("{},{p}\n", i + 1));
    }
    let tte_out = TteOutput { tte, tte_seconds: tte.seconds(), prob_now: likelihood.prob_now, severity };
    write_file(&dir.join("report.json"), &to_json(report)?)?;
    write_file(&dir.join("likelihood.csv"), csv.as_bytes())?;
    write_file(&dir.join("tte.json"), &to_json(&tte_out)?)
}

fn make_sink(settings: &Settings, out: &Path) -> Option<Box<dyn AlertSink>> {
    match settings.sink {
        SinkKind::File => Some(Box::new(FileSink::new(out.join("alerts.jsonl")))),
        SinkKind::Webhook => Some(Box::new(WebhookSink::new(settings.webhook_url.clone().unwrap_or_default(), settings.timeout))),
        SinkKind::None => None,
    }
}

/// Dispatches when severity is warn or critical.
fn alert(
    settings: &Settings,
    sink: Option<&dyn AlertSink>,
    report: &BiophysicsReport,
    likelihood: &EpisodeLikelihood,
    tte: &TTEResult,
    severity: Severity,
) -> Result<Option<AlertPayload>> {
    let Some(sink) = sink else { return Ok(None) };
    if severity == Severity::Info {
        return Ok(None);
    }
    let context = AlertContext {
        session_id: report.session_id.clone(),
        timestamp: report.timestamp,
        recommendation: likelihood.recommendation().map(str::to_string),
    };
    dispatch_alert(tte, likelihood.prob_now, &settings.policy, sink, &context)
        .map(Some)
        .map_err(|e| CliError::Output(e.to_string()))
}

/// Reads either a report JSON or an inversion solution JSON.
fn read_report(settings: &Settings, path: &Path) -> Result<BiophysicsReport> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    let report = if value.get("stenosis_index").is_some() {
        serde_json::from_value(value).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?
    } else {
        let solution: InverseSolution =
            serde_json::from_value(value).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        BiophysicsReport {
            stenosis_index: stenosis_index(&solution.radii, settings.model.r0),
            density_fractional_change: 0.0,
            tof: 0.0,
            timestamp: 0.0,
            session_id: path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
            provenance: Provenance { residual_norm: solution.residual_norm, converged: solution.converged },
        }
    };
    report.validate().map_err(|e| CliError::Input(e.to_string()))?;
    Ok(report)
}

/// Scores a report or solution; writes `report.json`, `likelihood.csv`,
/// `tte.json` and, when the policy triggers, an alert.
pub fn assess(settings: &Settings, input: Option<&Path>, out: &Path) -> Result<Assessment> {
    let path = require_input(input)?;
    let report = read_report(settings, path)?;
    let provider = settings.provider.build()?;
    let (likelihood, tte, severity) = score(settings, provider.as_ref(), &report)?;
    write_assessment(out, &report, &likelihood, &tte, severity)?;
    let sink = make_sink(settings, out);
    let alert = alert(settings, sink.as_deref(), &report, &likelihood, &tte, severity)?;
    Ok(Assessment { report, likelihood, tte, severity, alert })
}

/// Generates the configured scenario and writes it as a dataset.
pub fn gen_data(settings: &Settings, out: &Path) -> Result<Dataset> {
    let sessions = generate_scenario(&settings.scenario).map_err(|e| CliError::Simulation(e.to_string()))?;
    let dataset = Dataset { spec: settings.scenario.clone(), sessions };
    write_dataset(&dataset, out).map_err(|e| CliError::Output(e.to_string()))?;
    Ok(dataset)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SessionOutcome {
    pub session_index: usize,
    pub session_id: String,
    pub timestamp: f64,
    pub label_v: u8,
    pub stenosis_truth: f64,
    pub stenosis_index: f64,
    pub density_fractional_change: f64,
    pub prob_now: f64,
    pub tte_step: usize,
    pub max_prob: f64,
    pub severity: Severity,
    pub converged: bool,
    pub alerted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PipelineManifest {
    pub format_version: u64,
    pub seed: u64,
    pub provider: String,
    pub solver: String,
    /// SHA-256 of every output, keyed by path relative to the output directory.
    pub files: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineRun {
    pub sessions: Vec<SessionOutcome>,
    pub manifest: PipelineManifest,
}

struct Scored {
    report: BiophysicsReport,
    solution: InverseSolution,
    likelihood: EpisodeLikelihood,
    tte: TTEResult,
    severity: Severity,
}

fn reference_tof(settings: &Settings, session: &LabeledSession) -> Result<ToFMeasurement> {
    let incident = incident_trace(&settings.pulse, &settings.grid, &settings.model, &settings.echo, "incident")
        .map_err(|e| CliError::Config(e.to_string()))?;
    estimate_tof(&incident, &session.reference_echo)
        .map_err(|e| CliError::Simulation(format!("{}: {e}", session_id(session.session_index))))
}

fn process_session(
    settings: &Settings,
    provider: &dyn LikelihoodProvider,
    session: &LabeledSession,
    tof: &ToFMeasurement,
    tof_first: &ToFMeasurement,
) -> Result<Scored> {
    let problem = build_problem(settings, session.echo.clone())?;
    let solution = solve(settings, &problem)?;
    let density = density_change(tof_first, tof, true).map_err(|e| CliError::Simulation(e.to_string()))?;
    let report = BiophysicsReport {
        stenosis_index: stenosis_index(&solution.radii, settings.model.r0),
        density_fractional_change: density.fractional_change,
        tof: tof.tof,
        timestamp: session.timestamp,
        session_id: session_id(session.session_index),
        provenance: Provenance { residual_norm: solution.residual_norm, converged: solution.converged },
    };
    let (likelihood, tte, severity) = score(settings, provider, &report)?;
    Ok(Scored { report, solution, likelihood, tte, severity })
}

fn collect_files(root: &Path, dir: &Path, files: &mut BTreeMap<String, String>) -> Result<()> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| CliError::Output(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    entries.sort();
    for path in entries {
        if path.is_dir() {
            collect_files(root, &path, files)?;
        } else {
            let rel = path.strip_prefix(root).expect("walked from root");
            let key = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
            if key == "manifest.json" {
                continue;
            }
            let bytes = std::fs::read(&path).map_err(|e| CliError::Output(format!("{}: {e}", path.display())))?;
            files.insert(key, sha256_hex(&bytes));
        }
    }
    Ok(())
}

/// Generate, invert, assess and alert for every session of the configured
/// scenario. Sessions are processed in parallel; alerts are dispatched in
/// session order afterwards.
pub fn pipeline(settings: &Settings, out: &Path) -> Result<PipelineRun> {
    let provider = settings.provider.build()?;
    let sessions = generate_scenario(&settings.scenario).map_err(|e| CliError::Simulation(e.to_string()))?;
    let tofs = sessions.iter().map(|s| reference_tof(settings, s)).collect::<Result<Vec<_>>>()?;
    let scored = sessions
        .par_iter()
        .zip(&tofs)
        .map(|(s, tof)| process_session(settings, provider.as_ref(), s, tof, &tofs[0]))
        .collect::<Result<Vec<_>>>()?;

    let dataset = Dataset { spec: settings.scenario.clone(), sessions };
    write_dataset(&dataset, &out.join("dataset")).map_err(|e| CliError::Output(e.to_string()))?;
    let sink = make_sink(settings, out);
    let mut outcomes = Vec::with_capacity(scored.len());
    let mut summary = String::from(
        "session,timestamp,label_v,stenosis_truth,stenosis_index,density_fractional_change,prob_now,tte_step,max_prob,severity,converged\n",
    );
    for (session, s) in dataset.sessions.iter().zip(&scored) {
        let dir = out.join("sessions").join(&s.report.session_id);
        write_solution(settings, &s.solution, &dir)?;
        write_assessment(&dir, &s.report, &s.likelihood, &s.tte, s.severity)?;
        let alerted = alert(settings, sink.as_deref(), &s.report, &s.likelihood, &s.tte, s.severity)?.is_some();
        let outcome = SessionOutcome {
            session_index: session.session_index,
            session_id: s.report.session_id.clone(),
            timestamp: session.timestamp,
            label_v: session.label_v,
            stenosis_truth: stenosis_index(&session.radii_truth, settings.model.r0),
            stenosis_index: s.report.stenosis_index,
            density_fractional_change: s.report.density_fractional_change,
            prob_now: s.likelihood.prob_now,
            tte_step: s.tte.tte_step,
            max_prob: s.tte.max_prob,
            severity: s.severity,
            converged: s.solution.converged,
            alerted,
        };
        let severity = serde_json::to_value(outcome.severity).map_err(|e| CliError::Output(e.to_string()))?;
        summary.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            outcome.session_id,
            outcome.timestamp,
            outcome.label_v,
            outcome.stenosis_truth,
            outcome.stenosis_index,
            outcome.density_fractional_change,
            outcome.prob_now,
            outcome.tte_step,
            outcome.max_prob,
            severity.as_str().unwrap_or_default(),
            outcome.converged
        ));
        outcomes.push(outcome);
    }
    write_file(&out.join("summary.csv"), summary.as_bytes())?;

    let mut files = BTreeMap::new();
    collect_files(out, out, &mut files)?;
    let manifest = PipelineManifest {
        format_version: PIPELINE_MANIFEST_VERSION,
        seed: settings.seed,
        provider: settings.provider.name().into(),
        solver: settings.solver_name.clone(),
        files,
    };
    write_file(&out.join("manifest.json"), &to_json(&manifest)?)?;
    if let Some(s) = outcomes.iter().find(|s| !s.converged) {
        return Err(CliError::NotConverged(format!("{} did not converge", s.session_id)));
    }
    Ok(PipelineRun { sessions: outcomes, manifest })
}
