//! Recovery of a radii column from one echo recording.
//!
//! The objective is a regularized least-squares misfit
//!
//! ```text
//! J(r) = ½‖F(r) − d‖² / E_inc + λ‖L ln(r / r_prior)‖²
//! ```
//!
//! where `F` is the single-scattering echo model, `d` the observed trace,
//! `E_inc` the energy of the incident pulse on the same time axis and `L`
//! the second-difference operator with zero extension beyond both ends
//! (the segment is anchored to the prior at its ends). The penalty acts on
//! log radius because the echo constrains ratios of adjacent areas. Near the
//! prior it reduces to `λ‖L(r − r_prior)/r_prior‖²`.
//!
//! The reference solver is projected descent in the Gauss–Newton metric with
//! Armijo backtracking, falling back to a Barzilai–Borwein gradient step when
//! the metric step fails. Other solvers (e.g. a learned surrogate) plug in
//! through [`SolverRegistry`].

use std::collections::BTreeMap;
use std::sync::{Arc, RwLock};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::acoustics::{AcousticsError, EchoModel, EchoSetup, EchoTrace, PulseSpec};
use crate::hemogrid::{ArteryModel, Grid};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum InversionError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("numerical error at component {component}: {message}")]
    Numerical { component: usize, message: String },
    #[error("solver {0:?} is already registered")]
    Duplicate(String),
    #[error("no solver named {0:?}")]
    NotFound(String),
    #[error(transparent)]
    Forward(#[from] AcousticsError),
    #[error("solver failure: {0}")]
    Solver(String),
}

type Result<T> = std::result::Result<T, InversionError>;

pub const DEFAULT_LAMBDA: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct InverseProblem {
    observed: EchoTrace,
    pulse: PulseSpec,
    grid: Grid,
    model: ArteryModel,
    n_cycles: f64,
    lambda: f64,
    prior: Vec<f64>,
    bounds: (f64, f64),
    forward: EchoModel,
    data_scale: f64,
}

impl InverseProblem {
    /// Problem with default regularization, a constant-`r0` prior and bounds
    /// `[0.1·r0, 2·r0]`.
    pub fn new(observed: EchoTrace, pulse: PulseSpec, grid: Grid, model: ArteryModel, n_cycles: f64) -> Result<Self> {
        model.validate().map_err(|e| InversionError::Domain(e.to_string()))?;
        let forward = EchoModel::matching(&observed, &pulse, &grid, &model, n_cycles)?;
        let data_scale: f64 = forward.incident_samples().iter().map(|v| v * v).sum();
        if !(data_scale > 0.0) {
            return Err(InversionError::Domain("incident pulse has no energy on this time axis".into()));
        }
        let r0 = model.r0;
        Ok(Self {
            observed,
            pulse,
            grid,
            model,
            n_cycles,
            lambda: DEFAULT_LAMBDA,
            prior: vec![r0; grid.nx()],
            bounds: (0.1 * r0, 2.0 * r0),
            forward,
            data_scale,
        })
    }

    /// Same as [`InverseProblem::new`] taking the pulse window from an [`EchoSetup`].
    pub fn from_setup(observed: EchoTrace, pulse: PulseSpec, grid: Grid, model: ArteryModel, setup: &EchoSetup) -> Result<Self> {
        Self::new(observed, pulse, grid, model, setup.n_cycles)
    }

    pub fn with_lambda(mut self, lambda: f64) -> Result<Self> {
        if !(lambda.is_finite() && lambda >= 0.0) {
            return Err(InversionError::Domain(format!("lambda must be >= 0, got {lambda}")));
        }
        self.lambda = lambda;
        Ok(self)
    }

    pub fn with_prior(mut self, prior: Vec<f64>) -> Result<Self> {
        if prior.len() != self.grid.nx() {
            return Err(InversionError::Domain(format!("prior has {} cells, grid expects {}", prior.len(), self.grid.nx())));
        }
        self.prior = prior;
        self.check_prior()?;
        Ok(self)
    }

    pub fn with_bounds(mut self, r_min: f64, r_max: f64) -> Result<Self> {
        if !(r_min > 0.0 && r_min < r_max && r_max.is_finite()) {
            return Err(InversionError::Domain(format!("invalid bounds ({r_min}, {r_max})")));
        }
        self.bounds = (r_min, r_max);
        self.check_prior()?;
        Ok(self)
    }

    fn check_prior(&self) -> Result<()> {
        let (lo, hi) = self.bounds;
        if self.prior.iter().any(|r| !(*r >= lo && *r <= hi)) {
            return Err(InversionError::Domain("prior lies outside the bounds".into()));
        }
        Ok(())
    }

    pub fn observed(&self) -> &EchoTrace {
        &self.observed
    }
    pub fn pulse(&self) -> &PulseSpec {
        &self.pulse
    }
    pub fn grid(&self) -> &Grid {
        &self.grid
    }
    pub fn model(&self) -> &ArteryModel {
        &self.model
    }
    pub fn n_cycles(&self) -> f64 {
        self.n_cycles
    }
    pub fn lambda(&self) -> f64 {
        self.lambda
    }
    pub fn prior(&self) -> &[f64] {
        &self.prior
    }
    pub fn bounds(&self) -> (f64, f64) {
        self.bounds
    }
    pub fn forward(&self) -> &EchoModel {
        &self.forward
    }
    /// Energy of the incident pulse, the data-term normalizer.
    pub fn data_scale(&self) -> f64 {
        self.data_scale
    }

    fn check_radii(&self, radii: &[f64]) -> Result<()> {
        if radii.len() != self.grid.nx() {
            return Err(InversionError::Domain(format!(
                "radii column has {} cells, grid expects {}",
                radii.len(),
                self.grid.nx()
            )));
        }
        let (lo, hi) = self.bounds;
        if let Some((i, r)) = radii.iter().enumerate().find(|(_, r)| !(**r >= lo && **r <= hi)) {
            return Err(InversionError::Domain(format!("radius {r} at cell {i} outside [{lo}, {hi}]")));
        }
        Ok(())
    }

    fn residual(&self, radii: &[f64]) -> Result<Vec<f64>> {
        let mut predicted = self.forward.trace(radii)?;
        for (p, d) in predicted.iter_mut().zip(&self.observed.samples) {
            *p -= d;
        }
        Ok(predicted)
    }

    fn data_term(&self, residual: &[f64]) -> f64 {
        0.5 * residual.iter().map(|v| v * v).sum::<f64>() / self.data_scale
    }

    /// `ln(r/prior)`, the quantity the echo actually constrains.
    fn deviation(&self, radii: &[f64]) -> Vec<f64> {
        radii.iter().zip(&self.prior).map(|(r, p)| (r / p).ln()).collect()
    }

    fn penalty(&self, radii: &[f64]) -> f64 {
        let smooth = second_difference(&self.deviation(radii));
        self.lambda * smooth.iter().map(|v| v * v).sum::<f64>()
    }

    /// `∂/∂r_i` of the penalty term: `2λ·(LᵀL·ln(r/prior))_i / r_i`.
    fn penalty_gradient(&self, radii: &[f64]) -> Vec<f64> {
        // L is symmetric.
        second_difference(&second_difference(&self.deviation(radii)))
            .into_iter()
            .zip(radii)
            .map(|(v, r)| 2.0 * self.lambda * v / r)
            .collect()
    }
}

/// `(Lv)_i = v_{i−1} − 2v_i + v_{i+1}` with `v_{−1} = v_n = 0`.
pub fn second_difference(v: &[f64]) -> Vec<f64> {
    let n = v.len();
    (0..n)
        .map(|i| {
            let left = if i == 0 { 0.0 } else { v[i - 1] };
            let right = if i + 1 == n { 0.0 } else { v[i + 1] };
            left - 2.0 * v[i] + right
        })
        .collect()
}

/// Regularized misfit of `radii`.
pub fn objective(radii: &[f64], problem: &InverseProblem) -> Result<f64> {
    problem.check_radii(radii)?;
    let residual = problem.residual(radii)?;
    Ok(problem.data_term(&residual) + problem.penalty(radii))
}

/// Backtracking line-search parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineSearch {
    /// Step shrink factor per rejected trial, in (0, 1).
    pub shrink: f64,
    /// Armijo sufficient-decrease constant.
    pub sufficient_decrease: f64,
    pub max_backtracks: usize,
}

impl Default for LineSearch {
    fn default() -> Self {
        Self { shrink: 0.5, sufficient_decrease: 1e-4, max_backtracks: 60 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverOptions {
    pub max_iter: usize,
    /// Projected-gradient tolerance relative to `max(initial norm, 1)`.
    pub grad_tol: f64,
    /// Relative step-length tolerance.
    pub step_tol: f64,
    /// Relative finite-difference step.
    pub fd_step: f64,
    pub line_search: LineSearch,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { max_iter: 500, grad_tol: 1e-8, step_tol: 1e-10, fd_step: 1e-6, line_search: LineSearch::default() }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(InversionError::Domain(m));
        if self.max_iter < 1 {
            return bad("max_iter must be >= 1".into());
        }
        for (name, v) in [("grad_tol", self.grad_tol), ("step_tol", self.step_tol), ("fd_step", self.fd_step)] {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        let ls = &self.line_search;
        if !(ls.shrink > 0.0 && ls.shrink < 1.0) {
            return bad(format!("line-search shrink must lie in (0, 1), got {}", ls.shrink));
        }
        if !(ls.sufficient_decrease > 0.0 && ls.sufficient_decrease < 1.0) {
            return bad(format!("sufficient-decrease constant must lie in (0, 1), got {}", ls.sufficient_decrease));
        }
        Ok(())
    }
}

/// Probe step for component `i`, flipped inward at the upper bound.
fn probe_step(r: f64, fd_step: f64, hi: f64) -> f64 {
    let h = fd_step * r.abs().max(f64::MIN_POSITIVE);
    if r + h > hi {
        -h
    } else {
        h
    }
}

fn check_finite(component: usize, v: &[f64]) -> Result<()> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(InversionError::Numerical { component, message: "forward model returned a non-finite value".into() });
    }
    Ok(())
}

/// Gradient `∂J/∂r` (per metre) by one-sided finite differences.
///
/// Each column of the forward-map Jacobian is probed with a relative step
/// `fd_step`; the data-term gradient is then `Jᵀ(F(r) − d)/E_inc` and the
/// penalty gradient is added in closed form.
pub fn gradient(radii: &[f64], problem: &InverseProblem, options: &SolverOptions) -> Result<Vec<f64>> {
    fd_gradient(radii, problem, options.fd_step, false)
}

/// Two-sided variant of [`gradient`], used to validate it.
pub fn gradient_central(radii: &[f64], problem: &InverseProblem, options: &SolverOptions) -> Result<Vec<f64>> {
    fd_gradient(radii, problem, options.fd_step, true)
}

fn fd_gradient(radii: &[f64], problem: &InverseProblem, fd_step: f64, central: bool) -> Result<Vec<f64>> {
    let lin = linearize(radii, problem, fd_step, central)?;
    Ok(lin.gradient(radii, problem))
}

/// Residual and finite-difference Jacobian of the forward map at one point.
struct Linearization {
    residual: Vec<f64>,
    /// `columns[i] = ∂F/∂r_i`.
    columns: Vec<Vec<f64>>,
}

impl Linearization {
    /// `Jᵀ(F − d)/E_inc` plus the closed-form penalty gradient.
    fn gradient(&self, radii: &[f64], problem: &InverseProblem) -> Vec<f64> {
        let penalty = problem.penalty_gradient(radii);
        self.columns
            .iter()
            .zip(&penalty)
            .map(|(column, p)| column.iter().zip(&self.residual).map(|(j, r)| j * r).sum::<f64>() / problem.data_scale + p)
            .collect()
    }
}

fn linearize(radii: &[f64], problem: &InverseProblem, fd_step: f64, central: bool) -> Result<Linearization> {
    problem.check_radii(radii)?;
    let base = problem.forward.trace(radii)?;
    check_finite(0, &base)?;
    let residual: Vec<f64> = base.iter().zip(&problem.observed.samples).map(|(p, d)| p - d).collect();
    let (lo, hi) = problem.bounds;
    let columns = (0..radii.len())
        .into_par_iter()
        .map(|i| {
            let mut probe = radii.to_vec();
            let column: Vec<f64> = if central {
                let h = fd_step * radii[i];
                let up = (radii[i] + h).min(hi);
                let down = (radii[i] - h).max(lo);
                probe[i] = up;
                let plus = problem.forward.trace(&probe)?;
                probe[i] = down;
                let minus = problem.forward.trace(&probe)?;
                check_finite(i, &plus)?;
                check_finite(i, &minus)?;
                let width = up - down;
                plus.iter().zip(&minus).map(|(p, m)| (p - m) / width).collect()
            } else {
                let h = probe_step(radii[i], fd_step, hi);
                probe[i] = radii[i] + h;
                let moved = problem.forward.trace(&probe)?;
                check_finite(i, &moved)?;
                let h = probe[i] - radii[i];
                moved.iter().zip(&base).map(|(p, b)| (p - b) / h).collect()
            };
            if column.iter().any(|v| !v.is_finite()) {
                return Err(InversionError::Numerical { component: i, message: "non-finite derivative".into() });
            }
            Ok(column)
        })
        .collect::<Result<_>>()?;
    Ok(Linearization { residual, columns })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InverseSolution {
    pub radii: Vec<f64>,
    /// `‖F(r) − d‖` in Pa.
    pub residual_norm: f64,
    pub objective_value: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Norm of the projected gradient with respect to `r/r0`.
    pub gradient_norm_final: f64,
    /// Objective after each accepted iterate, starting with the initial guess.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub objective_history: Vec<f64>,
}

impl InverseSolution {
    /// Evaluates a radii column against `problem` without iterating.
    pub fn evaluate(radii: Vec<f64>, problem: &InverseProblem, iterations: usize, converged: bool) -> Result<Self> {
        let residual = problem.residual(&radii)?;
        let residual_norm = residual.iter().map(|v| v * v).sum::<f64>().sqrt();
        let objective_value = objective(&radii, problem)?;
        Ok(Self {
            radii,
            residual_norm,
            objective_value,
            iterations,
            converged,
            gradient_norm_final: f64::NAN,
            objective_history: vec![objective_value],
        })
    }
}

/// Anything that maps an [`InverseProblem`] to a radii column.
pub trait InverseSolver: Send + Sync {
    fn solve(&self, problem: &InverseProblem, options: &SolverOptions) -> Result<InverseSolution>;
}

/// Inner product defining the descent direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    /// Gradient scaled by the Gauss–Newton matrix of the objective on
    /// the free variables, with a Barzilai–Borwein gradient step as fallback.
    #[default]
    GaussNewton,
    /// Plain gradient with Barzilai–Borwein trial steps.
    Euclidean,
}

/// Projected descent with Armijo backtracking along the projection arc,
/// run in the scaled variables `z = r/r0`.
///
/// Variables held at a bound by the gradient are frozen for the scaled
/// direction, so the Gauss–Newton metric acts only on the free set.
#[derive(Debug, Clone, Default)]
pub struct ProjectedGradientDescent {
    /// Starting column; the prior when `None`.
    pub initial: Option<Vec<f64>>,
    pub metric: Metric,
}

impl ProjectedGradientDescent {
    pub fn starting_at(initial: Vec<f64>) -> Self {
        Self { initial: Some(initial), ..Self::default() }
    }

    pub fn with_metric(mut self, metric: Metric) -> Self {
        self.metric = metric;
        self
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Solves `(H + μ·diag(H))·p = −g` on the free variables of the scaled problem,
/// where `H = JᵀJ/E_inc + 2λ·DLᵀLD` and `D = diag(1/z)`.
fn gauss_newton_direction(
    lin: &Linearization,
    problem: &InverseProblem,
    z: &[f64],
    g: &[f64],
    free: &[bool],
) -> Option<Vec<f64>> {
    let r0 = problem.model.r0;
    let n = g.len();
    let idx: Vec<usize> = (0..n).filter(|&i| free[i]).collect();
    let m = idx.len();
    if m == 0 {
        return None;
    }
    // LᵀL for the Dirichlet second difference is pentadiagonal.
    let ltl = |i: usize, j: usize| -> f64 {
        let d = i.abs_diff(j);
        let edge = |k: usize| k == 0 || k + 1 == n;
        match d {
            0 => {
                if edge(i) {
                    5.0
                } else {
                    6.0
                }
            }
            1 => -4.0,
            2 => 1.0,
            _ => 0.0,
        }
    };
    let scale = r0 * r0 / problem.data_scale;
    let mut h = nalgebra::DMatrix::<f64>::zeros(m, m);
    for a in 0..m {
        for b in a..m {
            let (i, j) = (idx[a], idx[b]);
            let v = scale * dot(&lin.columns[i], &lin.columns[j]) + 2.0 * problem.lambda * ltl(i, j) / (z[i] * z[j]);
            h[(a, b)] = v;
            h[(b, a)] = v;
        }
    }
    let rhs = nalgebra::DVector::from_iterator(m, idx.iter().map(|&i| -g[i]));
    let diag_max = (0..m).map(|a| h[(a, a)]).fold(0.0_f64, f64::max);
    if !(diag_max > 0.0) {
        return None;
    }
    let mut mu = 1e-12;
    while mu < 1.0 {
        let mut damped = h.clone();
        for a in 0..m {
            damped[(a, a)] += mu * damped[(a, a)].max(1e-12 * diag_max);
        }
        if let Some(chol) = damped.cholesky() {
            let sol = chol.solve(&rhs);
            if sol.iter().all(|v| v.is_finite()) {
                let mut p = vec![0.0; n];
                for (a, &i) in idx.iter().enumerate() {
                    p[i] = sol[a];
                }
                return Some(p);
            }
        }
        mu *= 100.0;
    }
    None
}

impl InverseSolver for ProjectedGradientDescent {
    fn solve(&self, problem: &InverseProblem, options: &SolverOptions) -> Result<InverseSolution> {
        options.validate()?;
        let r0 = problem.model.r0;
        let (lo, hi) = (problem.bounds.0 / r0, problem.bounds.1 / r0);
        let project = |z: f64| z.clamp(lo, hi);
        let to_radii = |z: &[f64]| z.iter().map(|v| v * r0).collect::<Vec<_>>();

        let start = self.initial.clone().unwrap_or_else(|| problem.prior.clone());
        if start.len() != problem.grid.nx() {
            return Err(InversionError::Domain("initial guess has the wrong length".into()));
        }
        let mut z: Vec<f64> = start.iter().map(|r| project(r / r0)).collect();
        let mut f = objective(&to_radii(&z), problem)?;
        let evaluate = |z: &[f64]| -> Result<(Linearization, Vec<f64>)> {
            let radii = to_radii(z);
            let lin = linearize(&radii, problem, options.fd_step, false)?;
            let g = lin.gradient(&radii, problem).into_iter().map(|g| g * r0).collect();
            Ok((lin, g))
        };
        let projected_norm =
            |z: &[f64], g: &[f64]| z.iter().zip(g).map(|(zi, gi)| (project(zi - gi) - zi).powi(2)).sum::<f64>().sqrt();
        let (mut lin, mut g) = evaluate(&z)?;
        let mut pg = projected_norm(&z, &g);
        let tol = options.grad_tol * pg.max(1.0);
        let mut history = vec![f];
        let mut converged = false;
        let mut iterations = 0;
        let mut prev: Option<(Vec<f64>, Vec<f64>)> = None;
        let ls = options.line_search;

        // Armijo backtracking along `project(z + α·d)` from `alpha`.
        let search = |z: &[f64], f: f64, g: &[f64], d: &[f64], mut alpha: f64| -> Result<Option<(Vec<f64>, f64)>> {
            for _ in 0..=ls.max_backtracks {
                let trial: Vec<f64> = z.iter().zip(d).map(|(zi, di)| project(zi + alpha * di)).collect();
                let step: Vec<f64> = trial.iter().zip(z).map(|(t, zi)| t - zi).collect();
                let decrease = dot(g, &step);
                if decrease < 0.0 {
                    let f_trial = objective(&to_radii(&trial), problem)?;
                    if f_trial <= f + ls.sufficient_decrease * decrease {
                        return Ok(Some((trial, f_trial)));
                    }
                }
                alpha *= ls.shrink;
            }
            Ok(None)
        };

        while iterations < options.max_iter {
            if pg <= tol {
                converged = true;
                break;
            }
            let mut accepted = None;
            if self.metric == Metric::GaussNewton {
                let eps = 1e-12;
                let free: Vec<bool> = z
                    .iter()
                    .zip(&g)
                    .map(|(zi, gi)| !((*zi <= lo + eps && *gi > 0.0) || (*zi >= hi - eps && *gi < 0.0)))
                    .collect();
                if let Some(d) = gauss_newton_direction(&lin, problem, &z, &g, &free) {
                    accepted = search(&z, f, &g, &d, 1.0)?;
                }
            }
            if accepted.is_none() {
                let g_inf = g.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
                let bb = prev.as_ref().and_then(|(s, y)| {
                    let sy = dot(s, y);
                    (sy > 0.0).then(|| dot(s, s) / sy)
                });
                let alpha = bb.unwrap_or(0.05 / g_inf).clamp(1e-12 / g_inf, 1e3 / g_inf);
                let descent: Vec<f64> = g.iter().map(|v| -v).collect();
                accepted = search(&z, f, &g, &descent, alpha)?;
            }
            let Some((next, f_next)) = accepted else {
                break;
            };
            iterations += 1;
            let step: Vec<f64> = next.iter().zip(&z).map(|(a, b)| a - b).collect();
            let rel_step = norm(&step) / norm(&z).max(f64::MIN_POSITIVE);
            let (lin_next, g_next) = evaluate(&next)?;
            let dg: Vec<f64> = g_next.iter().zip(&g).map(|(a, b)| a - b).collect();
            prev = Some((step, dg));
            z = next;
            f = f_next;
            g = g_next;
            lin = lin_next;
            pg = projected_norm(&z, &g);
            history.push(f);
            if rel_step < options.step_tol {
                converged = true;
                break;
            }
        }
        if !converged && pg <= tol {
            converged = true;
        }
        let radii = to_radii(&z);
        let mut solution = InverseSolution::evaluate(radii, problem, iterations, converged)?;
        solution.gradient_norm_final = pg;
        solution.objective_value = f;
        solution.objective_history = history;
        Ok(solution)
    }
}

/// Convenience entry point for the reference solver started at the prior.
pub fn invert_radii(problem: &InverseProblem, options: &SolverOptions) -> Result<InverseSolution> {
    ProjectedGradientDescent::default().solve(problem, options)
}

pub const REFERENCE_SOLVER: &str = "gauss-descent";

/// Named solvers, looked up by the CLI's `--solver` flag.
#[derive(Default)]
pub struct SolverRegistry {
    solvers: RwLock<BTreeMap<String, Arc<dyn InverseSolver>>>,
}

impl std::fmt::Debug for SolverRegistry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SolverRegistry").field("names", &self.names()).finish()
    }
}

impl SolverRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registry holding the reference solver under [`REFERENCE_SOLVER`].
    pub fn with_reference() -> Self {
        let registry = Self::new();
        registry.register(REFERENCE_SOLVER, Arc::new(ProjectedGradientDescent::default())).expect("empty registry");
        registry
    }

    pub fn register(&self, name: &str, solver: Arc<dyn InverseSolver>) -> Result<()> {
        let mut map = self.solvers.write().unwrap_or_else(|e| e.into_inner());
        if map.contains_key(name) {
            return Err(InversionError::Duplicate(name.to_string()));
        }
        map.insert(name.to_string(), solver);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn InverseSolver>> {
        let map = self.solvers.read().unwrap_or_else(|e| e.into_inner());
        map.get(name).cloned().ok_or_else(|| InversionError::NotFound(name.to_string()))
    }

    pub fn names(&self) -> Vec<String> {
        let map = self.solvers.read().unwrap_or_else(|e| e.into_inner());
        map.keys().cloned().collect()
    }
}

/// Interface conformance checks for a solver: output shape, bound
/// feasibility, iteration budget and run-to-run determinism.
pub fn check_conformance(
    solver: &dyn InverseSolver,
    problem: &InverseProblem,
    options: &SolverOptions,
) -> std::result::Result<(), String> {
    let first = solver.solve(problem, options).map_err(|e| e.to_string())?;
    let second = solver.solve(problem, options).map_err(|e| e.to_string())?;
    if first.radii.len() != problem.grid().nx() {
        return Err(format!("solution has {} cells, expected {}", first.radii.len(), problem.grid().nx()));
    }
    let (lo, hi) = problem.bounds();
    if let Some(r) = first.radii.iter().find(|r| !(**r >= lo && **r <= hi)) {
        return Err(format!("radius {r} outside bounds [{lo}, {hi}]"));
    }
    if first.iterations > options.max_iter {
        return Err(format!("{} iterations exceed the budget {}", first.iterations, options.max_iter));
    }
    let same_bits =
        first.radii.len() == second.radii.len() && first.radii.iter().zip(&second.radii).all(|(a, b)| a.to_bits() == b.to_bits());
    if !same_bits || first.iterations != second.iterations || first.converged != second.converged {
        return Err("repeated solves differ".into());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn second_difference_is_dirichlet() {
        assert_eq!(second_difference(&[1.0, 1.0, 1.0]), vec![-1.0, 0.0, -1.0]);
        assert_eq!(second_difference(&[0.0, 1.0, 0.0]), vec![1.0, -2.0, 1.0]);
    }

    #[test]
    fn options_validation() {
        assert!(SolverOptions::default().validate().is_ok());
        let mut o = SolverOptions { max_iter: 0, ..Default::default() };
        assert!(o.validate().is_err());
        o = SolverOptions::default();
        o.line_search.shrink = 1.0;
        assert!(o.validate().is_err());
        o = SolverOptions { fd_step: 0.0, ..Default::default() };
        assert!(o.validate().is_err());
    }

    #[test]
    fn probe_steps_inward_at_upper_bound() {
        assert!(probe_step(1.0, 1e-6, 2.0) > 0.0);
        assert!(probe_step(2.0, 1e-6, 2.0) < 0.0);
    }
}
