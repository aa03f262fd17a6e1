//! Episode likelihood over a discrete horizon, time-to-episode, likelihood
//! providers and alert dispatch.
//!
//! A provider answers `Pr(V = 1 | t = i, data)` for a step `i ≥ 0`. Step 0
//! is the present and is reported separately as `prob_now`; the
//! time-to-episode is the smallest step in `1..=H` with maximal probability.

use std::collections::HashSet;
use std::fs::OpenOptions;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProviderError {
    #[error("provider timed out after {attempts} attempt(s)")]
    Timeout { attempts: usize },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("provider failure: {0}")]
    Failure(String),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RiskError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error(transparent)]
    Provider(ProviderError),
    #[error("likelihood curve failed at step {step}: {source}")]
    Curve { step: usize, source: ProviderError },
}

type Result<T> = std::result::Result<T, RiskError>;

/// Inversion metadata carried along with the features.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub residual_norm: f64,
    pub converged: bool,
}

/// Features describing one measurement session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiophysicsReport {
    /// `1 − min_i r_i / r0` over the recovered column.
    pub stenosis_index: f64,
    pub density_fractional_change: f64,
    /// Time of flight (s).
    pub tof: f64,
    /// Seconds since the epoch.
    pub timestamp: f64,
    pub session_id: String,
    pub provenance: Provenance,
}

impl BiophysicsReport {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.stenosis_index) {
            return Err(RiskError::Domain(format!("stenosis index must lie in [0, 1], got {}", self.stenosis_index)));
        }
        if !(self.timestamp.is_finite() && self.timestamp >= 0.0) {
            return Err(RiskError::Domain(format!("timestamp must be >= 0, got {}", self.timestamp)));
        }
        if !self.density_fractional_change.is_finite() || !self.tof.is_finite() {
            return Err(RiskError::Domain("report features must be finite".into()));
        }
        Ok(())
    }
}

/// `1 − min(r)/r0`, clipped to `[0, 1]`.
pub fn stenosis_index(radii: &[f64], r0: f64) -> f64 {
    let min = radii.iter().copied().fold(f64::INFINITY, f64::min);
    (1.0 - min / r0).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderAnswer {
    pub probability: f64,
    pub recommendation: Option<String>,
}

impl ProviderAnswer {
    pub fn new(probability: f64) -> Self {
        Self { probability, recommendation: None }
    }
}

/// Source of episode probabilities. Implementations must tolerate
/// concurrent queries for distinct steps.
pub trait LikelihoodProvider: Send + Sync {
    fn query(&self, report: &BiophysicsReport, step: usize) -> std::result::Result<ProviderAnswer, ProviderError>;
}

impl<F> LikelihoodProvider for F
where
    F: Fn(&BiophysicsReport, usize) -> std::result::Result<ProviderAnswer, ProviderError> + Send + Sync,
{
    fn query(&self, report: &BiophysicsReport, step: usize) -> std::result::Result<ProviderAnswer, ProviderError> {
        self(report, step)
    }
}

fn checked(answer: ProviderAnswer) -> std::result::Result<ProviderAnswer, ProviderError> {
    let p = answer.probability;
    if !(0.0..=1.0).contains(&p) {
        return Err(ProviderError::Protocol(format!("probability {p} outside [0, 1]")));
    }
    Ok(answer)
}

/// `Pr(V = 1 | t = 0, data)`.
pub fn classify_now(report: &BiophysicsReport, provider: &dyn LikelihoodProvider) -> Result<f64> {
    report.validate()?;
    let answer = provider.query(report, 0).and_then(checked).map_err(RiskError::Provider)?;
    Ok(answer.probability)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLikelihood {
    /// `probs[i − 1] = Pr(V = 1 | t = i, data)` for `i = 1..=horizon`.
    pub probs: Vec<f64>,
    pub prob_now: f64,
    pub horizon: usize,
    /// Provider recommendations for steps `0..=horizon`, where given.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub recommendations: Vec<Option<String>>,
}

impl EpisodeLikelihood {
    /// First recommendation offered, preferring the present step.
    pub fn recommendation(&self) -> Option<&str> {
        self.recommendations.iter().flatten().next().map(String::as_str)
    }
}

/// Queries the provider for steps `0..=horizon`. Steps are issued
/// concurrently; the lowest failing step is reported.
pub fn likelihood_curve(
    report: &BiophysicsReport,
    provider: &dyn LikelihoodProvider,
    horizon: usize,
) -> Result<EpisodeLikelihood> {
    if horizon < 1 {
        return Err(RiskError::Domain("horizon must be >= 1".into()));
    }
    report.validate()?;
    let answers: Vec<_> = (0..=horizon).into_par_iter().map(|step| provider.query(report, step).and_then(checked)).collect();
    let mut probs = Vec::with_capacity(horizon);
    let mut recommendations = Vec::with_capacity(horizon + 1);
    let mut prob_now = 0.0;
    for (step, answer) in answers.into_iter().enumerate() {
        let answer = answer.map_err(|source| RiskError::Curve { step, source })?;
        if step == 0 {
            prob_now = answer.probability;
        } else {
            probs.push(answer.probability);
        }
        recommendations.push(answer.recommendation);
    }
    if recommendations.iter().all(Option::is_none) {
        recommendations.clear();
    }
    Ok(EpisodeLikelihood { probs, prob_now, horizon, recommendations })
}

pub const TIE_RULE: &str = "smallest-index";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TTEResult {
    /// 1-based horizon step.
    pub tte_step: usize,
    pub max_prob: f64,
    pub step_seconds: f64,
    pub tie_rule: String,
}

impl TTEResult {
    pub fn seconds(&self) -> f64 {
        self.tte_step as f64 * self.step_seconds
    }
}

/// Index of the first maximum.
pub fn first_argmax(values: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in values.iter().enumerate() {
        match best {
            Some((_, b)) if v <= b => {}
            _ => best = Some((i, v)),
        }
    }
    best.map(|(i, _)| i)
}

pub fn compute_tte(likelihood: &EpisodeLikelihood, step_seconds: f64) -> Result<TTEResult> {
    if likelihood.probs.iter().any(|p| p.is_nan()) {
        return Err(RiskError::Domain("probabilities contain NaN".into()));
    }
    let idx = first_argmax(&likelihood.probs).ok_or_else(|| RiskError::Domain("likelihood curve is empty".into()))?;
    Ok(TTEResult { tte_step: idx + 1, max_prob: likelihood.probs[idx], step_seconds, tie_rule: TIE_RULE.to_string() })
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Reference provider `σ(w·f(report, i) + b)` with features
/// `[stenosis_index, density_fractional_change, e^{−decay·i}]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticProvider {
    pub weights: [f64; 3],
    pub bias: f64,
    pub horizon_decay: f64,
}

impl Default for LogisticProvider {
    fn default() -> Self {
        Self { weights: [14.0, 5.0, 0.5], bias: -4.7, horizon_decay: 0.1 }
    }
}

impl LogisticProvider {
    pub fn new(weights: [f64; 3], bias: f64, horizon_decay: f64) -> std::result::Result<Self, ProviderError> {
        if weights.iter().chain([&bias, &horizon_decay]).any(|v| !v.is_finite()) {
            return Err(ProviderError::Numerical("logistic parameters must be finite".into()));
        }
        Ok(Self { weights, bias, horizon_decay })
    }

    pub fn features(report: &BiophysicsReport, step: usize, decay: f64) -> [f64; 3] {
        [report.stenosis_index, report.density_fractional_change, (-decay * step as f64).exp()]
    }
}

impl LikelihoodProvider for LogisticProvider {
    fn query(&self, report: &BiophysicsReport, step: usize) -> std::result::Result<ProviderAnswer, ProviderError> {
        let f = Self::features(report, step, self.horizon_decay);
        let z = self.bias + self.weights.iter().zip(f).map(|(w, x)| w * x).sum::<f64>();
        let p = sigmoid(z);
        if !p.is_finite() {
            return Err(ProviderError::Numerical(format!("logistic output {p} for step {step}")));
        }
        Ok(ProviderAnswer::new(p))
    }
}

/// Counting semaphore bounding in-flight requests.
#[derive(Debug)]
struct InFlight {
    available: Mutex<usize>,
    freed: Condvar,
}

impl InFlight {
    fn new(cap: usize) -> Self {
        Self { available: Mutex::new(cap.max(1)), freed: Condvar::new() }
    }

    fn acquire(&self) -> InFlightGuard<'_> {
        let mut n = self.available.lock().unwrap_or_else(|e| e.into_inner());
        while *n == 0 {
            n = self.freed.wait(n).unwrap_or_else(|e| e.into_inner());
        }
        *n -= 1;
        InFlightGuard(self)
    }
}

struct InFlightGuard<'a>(&'a InFlight);

impl Drop for InFlightGuard<'_> {
    fn drop(&mut self) {
        let mut n = self.0.available.lock().unwrap_or_else(|e| e.into_inner());
        *n += 1;
        self.0.freed.notify_one();
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmConfig {
    pub endpoint: String,
    pub timeout: Duration,
    pub template_version: String,
    pub step_seconds: f64,
    /// Retries after the first attempt for transient failures.
    pub max_retries: usize,
    /// First retry delay; doubles per retry.
    pub backoff: Duration,
    pub max_in_flight: usize,
}

impl LlmConfig {
    pub fn new(endpoint: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            timeout: Duration::from_secs(10),
            template_version: "v1".into(),
            step_seconds: 3600.0,
            max_retries: 2,
            backoff: Duration::from_millis(200),
            max_in_flight: 4,
        }
    }
}

/// Request body sent to the remote likelihood service.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmRequest {
    pub template_version: String,
    pub horizon_step: usize,
    pub step_seconds: f64,
    pub features: LlmFeatures,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmFeatures {
    pub stenosis_index: f64,
    pub density_fractional_change: f64,
    pub tof_s: f64,
    pub residual_norm: f64,
    pub converged: bool,
}

impl LlmRequest {
    pub fn new(report: &BiophysicsReport, step: usize, template_version: &str, step_seconds: f64) -> Self {
        Self {
            template_version: template_version.to_string(),
            horizon_step: step,
            step_seconds,
            features: LlmFeatures {
                stenosis_index: report.stenosis_index,
                density_fractional_change: report.density_fractional_change,
                tof_s: report.tof,
                residual_norm: report.provenance.residual_norm,
                converged: report.provenance.converged,
            },
        }
    }
}

/// Probabilities within this distance outside `[0, 1]` are clamped; larger
/// excursions are protocol errors.
pub const PROBABILITY_SLACK: f64 = 0.01;

/// Validates a response body `{"probability": number, "recommendation": string?}`.
pub fn parse_llm_response(body: &str) -> std::result::Result<ProviderAnswer, ProviderError> {
    let value: serde_json::Value =
        serde_json::from_str(body).map_err(|e| ProviderError::Protocol(format!("response is not JSON: {e}")))?;
    let obj = value.as_object().ok_or_else(|| ProviderError::Protocol("response is not a JSON object".into()))?;
    let p = match obj.get("probability") {
        Some(serde_json::Value::Number(n)) => {
            n.as_f64().ok_or_else(|| ProviderError::Protocol("probability is not representable".into()))?
        }
        Some(other) => return Err(ProviderError::Protocol(format!("probability must be a number, got {other}"))),
        None => return Err(ProviderError::Protocol("response lacks `probability`".into())),
    };
    if !(-PROBABILITY_SLACK..=1.0 + PROBABILITY_SLACK).contains(&p) {
        return Err(ProviderError::Protocol(format!("probability {p} outside [0, 1]")));
    }
    let recommendation = match obj.get("recommendation") {
        None | Some(serde_json::Value::Null) => None,
        Some(serde_json::Value::String(s)) => Some(s.clone()),
        Some(other) => return Err(ProviderError::Protocol(format!("recommendation must be a string, got {other}"))),
    };
    Ok(ProviderAnswer { probability: p.clamp(0.0, 1.0), recommendation })
}

/// Client for a remote likelihood service speaking the JSON contract of
/// [`LlmRequest`] / [`parse_llm_response`].
#[derive(Debug)]
pub struct LlmProvider {
    config: LlmConfig,
    agent: ureq::Agent,
    in_flight: InFlight,
}

enum Attempt {
    Transient(ProviderError),
    Fatal(ProviderError),
}

impl LlmProvider {
    pub fn new(config: LlmConfig) -> std::result::Result<Self, ProviderError> {
        if config.endpoint.is_empty() {
            return Err(ProviderError::Failure("no endpoint configured".into()));
        }
        if config.timeout.is_zero() {
            return Err(ProviderError::Failure("timeout must be positive".into()));
        }
        let agent =
            ureq::Agent::config_builder().timeout_global(Some(config.timeout)).http_status_as_error(false).build().new_agent();
        let in_flight = InFlight::new(config.max_in_flight);
        Ok(Self { config, agent, in_flight })
    }

    pub fn config(&self) -> &LlmConfig {
        &self.config
    }

    fn attempt(&self, request: &LlmRequest) -> std::result::Result<ProviderAnswer, Attempt> {
        let _slot = self.in_flight.acquire();
        let mut response = match self.agent.post(&self.config.endpoint).send_json(request) {
            Ok(r) => r,
            Err(e) => return Err(classify_transport(e)),
        };
        let status = response.status().as_u16();
        let body = response.body_mut().read_to_string().map_err(classify_transport)?;
        if !(200..300).contains(&status) {
            let err = ProviderError::Transport(format!("HTTP status {status}"));
            return Err(if status >= 500 || status == 429 { Attempt::Transient(err) } else { Attempt::Fatal(err) });
        }
        parse_llm_response(&body).map_err(Attempt::Fatal)
    }
}

fn classify_transport(e: ureq::Error) -> Attempt {
    match e {
        ureq::Error::Timeout(_) => Attempt::Transient(ProviderError::Timeout { attempts: 0 }),
        ureq::Error::Io(io) if matches!(io.kind(), std::io::ErrorKind::TimedOut | std::io::ErrorKind::WouldBlock) => {
            Attempt::Transient(ProviderError::Timeout { attempts: 0 })
        }
        ureq::Error::Io(io) => Attempt::Transient(ProviderError::Transport(io.to_string())),
        ureq::Error::ConnectionFailed | ureq::Error::HostNotFound => Attempt::Transient(ProviderError::Transport(e.to_string())),
        other => Attempt::Fatal(ProviderError::Transport(other.to_string())),
    }
}

impl LikelihoodProvider for LlmProvider {
    fn query(&self, report: &BiophysicsReport, step: usize) -> std::result::Result<ProviderAnswer, ProviderError> {
        let request = LlmRequest::new(report, step, &self.config.template_version, self.config.step_seconds);
        let attempts = self.config.max_retries + 1;
        let mut last = ProviderError::Failure("no attempt made".into());
        for attempt in 0..attempts {
            if attempt > 0 {
                std::thread::sleep(self.config.backoff * (1u32 << (attempt - 1).min(16)));
            }
            match self.attempt(&request) {
                Ok(answer) => return Ok(answer),
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Transient(e)) => last = e,
            }
        }
        Err(match last {
            ProviderError::Timeout { .. } => ProviderError::Timeout { attempts },
            other => other,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Info,
    Warn,
    Critical,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlertPolicy {
    pub warn_threshold: f64,
    pub critical_threshold: f64,
    /// `tte_step` at or below this is critical; 0 disables the rule.
    pub critical_horizon: usize,
}

impl Default for AlertPolicy {
    fn default() -> Self {
        Self { warn_threshold: 0.5, critical_threshold: 0.8, critical_horizon: 0 }
    }
}

impl AlertPolicy {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("warn_threshold", self.warn_threshold), ("critical_threshold", self.critical_threshold)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(RiskError::Domain(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        Ok(())
    }

    /// Critical iff `prob_now ≥ critical_threshold` or `tte_step ≤ critical_horizon`;
    /// otherwise warn when either probability reaches `warn_threshold`.
    pub fn severity(&self, prob_now: f64, tte: &TTEResult) -> Severity {
        if prob_now >= self.critical_threshold || tte.tte_step <= self.critical_horizon {
            Severity::Critical
        } else if prob_now >= self.warn_threshold || tte.max_prob >= self.warn_threshold {
            Severity::Warn
        } else {
            Severity::Info
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlertPayload {
    pub session_id: String,
    pub timestamp: f64,
    pub tte_step: usize,
    pub max_prob: f64,
    pub prob_now: f64,
    pub recommendation: String,
    pub severity: Severity,
}

impl AlertPayload {
    pub fn idempotency_key(&self) -> String {
        format!("{}@{}", self.session_id, self.timestamp)
    }
}

/// Built-in advice used when the provider offers none.
pub fn default_recommendation(severity: Severity, tte: &TTEResult) -> String {
    match severity {
        Severity::Critical => "Episode risk is high now: contact emergency services or your care team immediately.".into(),
        Severity::Warn => format!(
            "Elevated episode risk, peaking in about {:.0} h: hydrate, rest and contact your clinician.",
            tte.seconds() / 3600.0
        ),
        Severity::Info => "No elevated episode risk detected; continue routine monitoring.".into(),
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SinkError {
    #[error("i/o error: {0}")]
    Io(String),
    #[error("webhook error: {0}")]
    Webhook(String),
}

/// Destination for alerts. Implementations serialize their own writes.
pub trait AlertSink: Send + Sync {
    /// Delivers `payload`; `Ok(false)` when its idempotency key was already delivered.
    fn deliver(&self, payload: &AlertPayload) -> std::result::Result<bool, SinkError>;
}

/// JSON-lines file, one payload per line.
#[derive(Debug)]
pub struct FileSink {
    path: PathBuf,
    seen: Mutex<Option<HashSet<String>>>,
}

impl FileSink {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        Self { path: path.into(), seen: Mutex::new(None) }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    fn load_keys(&self) -> std::result::Result<HashSet<String>, SinkError> {
        let mut keys = HashSet::new();
        let file = match std::fs::File::open(&self.path) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(keys),
            Err(e) => return Err(SinkError::Io(e.to_string())),
        };
        for line in BufReader::new(file).lines() {
            let line = line.map_err(|e| SinkError::Io(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let payload: AlertPayload =
                serde_json::from_str(&line).map_err(|e| SinkError::Io(format!("corrupt alert log: {e}")))?;
            keys.insert(payload.idempotency_key());
        }
        Ok(keys)
    }
}

impl AlertSink for FileSink {
    fn deliver(&self, payload: &AlertPayload) -> std::result::Result<bool, SinkError> {
        let mut guard = self.seen.lock().unwrap_or_else(|e| e.into_inner());
        if guard.is_none() {
            *guard = Some(self.load_keys()?);
        }
        let seen = guard.as_mut().expect("loaded above");
        let key = payload.idempotency_key();
        if seen.contains(&key) {
            return Ok(false);
        }
        let mut line = serde_json::to_string(payload).map_err(|e| SinkError::Io(e.to_string()))?;
        line.push('\n');
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .map_err(|e| SinkError::Io(format!("{}: {e}", self.path.display())))?;
        file.write_all(line.as_bytes()).map_err(|e| SinkError::Io(e.to_string()))?;
        seen.insert(key);
        Ok(true)
    }
}

/// POSTs each payload as JSON to a URL.
#[derive(Debug)]
pub struct WebhookSink {
    url: String,
    agent: ureq::Agent,
    sent: Mutex<HashSet<String>>,
}

impl WebhookSink {
    pub fn new(url: impl Into<String>, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder().timeout_global(Some(timeout)).http_status_as_error(false).build().new_agent();
        Self { url: url.into(), agent, sent: Mutex::new(HashSet::new()) }
    }
}

impl AlertSink for WebhookSink {
    fn deliver(&self, payload: &AlertPayload) -> std::result::Result<bool, SinkError> {
        let mut sent = self.sent.lock().unwrap_or_else(|e| e.into_inner());
        let key = payload.idempotency_key();
        if sent.contains(&key) {
            return Ok(false);
        }
        let response = self.agent.post(&self.url).send_json(payload).map_err(|e| SinkError::Webhook(e.to_string()))?;
        let status = response.status().as_u16();
        if !(200..300).contains(&status) {
            return Err(SinkError::Webhook(format!("HTTP status {status}")));
        }
        sent.insert(key);
        Ok(true)
    }
}

/// Identifies the reading an alert belongs to.
#[derive(Debug, Clone, PartialEq)]
pub struct AlertContext {
    pub session_id: String,
    pub timestamp: f64,
    pub recommendation: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("alert dispatch failed: {cause}")]
pub struct DispatchError {
    pub payload: AlertPayload,
    pub cause: SinkError,
}

pub fn build_alert(tte: &TTEResult, prob_now: f64, policy: &AlertPolicy, context: &AlertContext) -> AlertPayload {
    let severity = policy.severity(prob_now, tte);
    AlertPayload {
        session_id: context.session_id.clone(),
        timestamp: context.timestamp,
        tte_step: tte.tte_step,
        max_prob: tte.max_prob,
        prob_now,
        recommendation: context.recommendation.clone().unwrap_or_else(|| default_recommendation(severity, tte)),
        severity,
    }
}

/// Builds the payload and writes it to `sink`. The payload is returned on
/// both paths.
pub fn dispatch_alert(
    tte: &TTEResult,
    prob_now: f64,
    policy: &AlertPolicy,
    sink: &dyn AlertSink,
    context: &AlertContext,
) -> std::result::Result<AlertPayload, DispatchError> {
    let payload = build_alert(tte, prob_now, policy, context);
    match sink.deliver(&payload) {
        Ok(_) => Ok(payload),
        Err(cause) => Err(DispatchError { payload, cause }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(stenosis: f64, density: f64) -> BiophysicsReport {
        BiophysicsReport {
            stenosis_index: stenosis,
            density_fractional_change: density,
            tof: 1e-4,
            timestamp: 0.0,
            session_id: "s0".into(),
            provenance: Provenance { residual_norm: 0.0, converged: true },
        }
    }

    fn tte(step: usize, p: f64) -> TTEResult {
        TTEResult { tte_step: step, max_prob: p, step_seconds: 3600.0, tie_rule: TIE_RULE.into() }
    }

    #[test]
    fn logistic_zero_is_half() {
        let p = LogisticProvider::new([0.0; 3], 0.0, 0.0).unwrap();
        assert_eq!(classify_now(&report(0.0, 0.0), &p).unwrap(), 0.5);
        assert_eq!(p.query(&report(0.7, 0.1), 5).unwrap().probability, 0.5);
    }

    #[test]
    fn logistic_hand_value() {
        let p = LogisticProvider::new([4.0, 2.0, 0.0], -3.0, 0.0).unwrap();
        let v = classify_now(&report(1.0, 0.5), &p).unwrap();
        assert!((v - 1.0 / (1.0 + (-2.0f64).exp())).abs() < 1e-15);
        assert!((v - 0.8808).abs() < 1e-4);
    }

    #[test]
    fn logistic_decay_feature() {
        let p = LogisticProvider::new([0.0, 0.0, 1.0], 0.0, 2f64.ln()).unwrap();
        let v = p.query(&report(0.0, 0.0), 1).unwrap().probability;
        assert!((v - 0.6224593312018546).abs() < 1e-12);
    }

    #[test]
    fn logistic_rejects_non_finite() {
        assert!(LogisticProvider::new([f64::NAN, 0.0, 0.0], 0.0, 0.0).is_err());
    }

    #[test]
    fn out_of_range_provider_is_protocol_error() {
        let bad = |_: &BiophysicsReport, _: usize| Ok(ProviderAnswer::new(1.2));
        assert!(matches!(classify_now(&report(0.0, 0.0), &bad), Err(RiskError::Provider(ProviderError::Protocol(_)))));
    }

    #[test]
    fn curve_names_failing_step() {
        let flaky = |_: &BiophysicsReport, step: usize| {
            if step == 3 {
                Err(ProviderError::Failure("boom".into()))
            } else {
                Ok(ProviderAnswer::new(0.1))
            }
        };
        match likelihood_curve(&report(0.0, 0.0), &flaky, 5) {
            Err(RiskError::Curve { step, .. }) => assert_eq!(step, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn constant_curve() {
        let c = |_: &BiophysicsReport, _: usize| Ok(ProviderAnswer::new(0.3));
        let curve = likelihood_curve(&report(0.0, 0.0), &c, 4).unwrap();
        assert_eq!(curve.probs, vec![0.3; 4]);
        assert_eq!(curve.prob_now, 0.3);
        let one = likelihood_curve(&report(0.0, 0.0), &c, 1).unwrap();
        assert_eq!(one.probs.len(), 1);
        assert!(likelihood_curve(&report(0.0, 0.0), &c, 0).is_err());
    }

    #[test]
    fn tte_examples() {
        let mk = |probs: Vec<f64>| EpisodeLikelihood { horizon: probs.len(), probs, prob_now: 0.0, recommendations: vec![] };
        let t = compute_tte(&mk(vec![0.1, 0.5, 0.3]), 3600.0).unwrap();
        assert_eq!((t.tte_step, t.max_prob), (2, 0.5));
        assert_eq!(compute_tte(&mk(vec![0.2; 3]), 1.0).unwrap().tte_step, 1);
        assert!(compute_tte(&mk(vec![]), 1.0).is_err());
        assert_eq!(t.tie_rule, "smallest-index");
    }

    #[test]
    fn llm_response_validation() {
        assert_eq!(parse_llm_response(r#"{"probability": 0.42}"#).unwrap().probability, 0.42);
        assert_eq!(parse_llm_response(r#"{"probability": 1.005}"#).unwrap().probability, 1.0);
        assert_eq!(parse_llm_response(r#"{"probability": -0.004}"#).unwrap().probability, 0.0);
        for bad in [
            r#"{"probability": "high"}"#,
            r#"{"probability": 1.2}"#,
            r#"{"probability": -0.5}"#,
            r#"{"prob": 0.2}"#,
            r#"[0.2]"#,
            "not json",
            r#"{"probability": 0.2, "recommendation": 5}"#,
        ] {
            assert!(matches!(parse_llm_response(bad), Err(ProviderError::Protocol(_))), "{bad}");
        }
        let a = parse_llm_response(r#"{"probability": 0.2, "recommendation": "rest"}"#).unwrap();
        assert_eq!(a.recommendation.as_deref(), Some("rest"));
    }

    #[test]
    fn severity_rules() {
        let policy = AlertPolicy { warn_threshold: 0.5, critical_threshold: 0.8, critical_horizon: 0 };
        assert_eq!(policy.severity(0.9, &tte(24, 0.9)), Severity::Critical);
        assert_eq!(policy.severity(0.1, &tte(24, 0.1)), Severity::Info);
        assert_eq!(policy.severity(0.1, &tte(3, 0.6)), Severity::Warn);
        let strict = AlertPolicy { critical_horizon: 2, ..policy };
        assert_eq!(strict.severity(0.1, &tte(2, 0.2)), Severity::Critical);
        assert!(AlertPolicy { warn_threshold: 1.5, ..policy }.validate().is_err());
    }

    #[test]
    fn stenosis_index_clips() {
        assert_eq!(stenosis_index(&[2.0, 1.0, 2.0], 2.0), 0.5);
        assert_eq!(stenosis_index(&[2.5, 3.0], 2.0), 0.0);
    }
}
