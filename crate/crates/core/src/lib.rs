//! Arterial segment flow simulation, acoustic echo synthesis and inversion,
//! and vaso-occlusive episode risk scoring.
//!
//! The pipeline runs radii field → echo → recovered radii → biophysics
//! report → episode likelihood over a discrete horizon → alert.

// `!(x > 0.0)` style guards also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod acoustics;
pub mod fsutil;
pub mod hemogrid;
pub mod inversion;
pub mod risk;
pub mod synthdata;

pub use acoustics::{
    density_change, estimate_tof, synthesize_echo, AcousticsError, DensityEstimate, EchoSetup, EchoTrace, PulseSpec,
    ToFMeasurement,
};
pub use hemogrid::{solve_flow, ArteryModel, FlowBoundary, FlowError, FlowSolution, Grid, PressureWaveform, RadiiField};
pub use inversion::{
    invert_radii, InverseProblem, InverseSolution, InverseSolver, InversionError, SolverOptions, SolverRegistry,
};
pub use risk::{
    compute_tte, dispatch_alert, likelihood_curve, AlertPayload, AlertPolicy, AlertSink, BiophysicsReport, EpisodeLikelihood,
    LikelihoodProvider, LogisticProvider, ProviderError, RiskError, Severity, TTEResult,
};
pub use synthdata::{generate_scenario, LabeledSession, ScenarioKind, ScenarioSpec, SynthError};
