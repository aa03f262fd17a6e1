use std::f64::consts::PI;
use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use vasosim_core::acoustics::{estimate_tof, incident_trace, synthesize_echo, EchoSetup, PulseSpec};
use vasosim_core::hemogrid::{
    solve_flow_from, ArteryModel, FlowBoundary, FlowState, Grid, PressureWaveform, DEFAULT_PULSE_WAVE_SPEED,
};
use vasosim_core::inversion::{invert_radii, InverseProblem, SolverOptions};

fn stenosis(nx: usize, r0: f64) -> Vec<f64> {
    (0..nx).map(|i| if (28..36).contains(&i) { 0.8 * r0 } else { r0 }).collect()
}

fn flow(c: &mut Criterion) {
    let model = ArteryModel::default();
    let nx = 256;
    let grid = Grid::from_cfl(nx, 1001, 1e-3, 0.4, 2.0 * DEFAULT_PULSE_WAVE_SPEED).unwrap();
    let radii: Vec<f64> = (0..nx).map(|i| model.r0 * (1.0 + 0.02 * (2.0 * PI * i as f64 / nx as f64).sin())).collect();
    let initial = FlowState::from_radii(&radii, &model, 0).unwrap();
    let inlet = PressureWaveform::zero(grid.nt());
    c.bench_function("solve_flow periodic 256x1000", |b| {
        b.iter(|| solve_flow_from(black_box(initial.clone()), &model, &grid, &inlet, FlowBoundary::Periodic).unwrap())
    });
}

fn acoustics(c: &mut Criterion) {
    let (pulse, model, setup) = (PulseSpec::default(), ArteryModel::default(), EchoSetup::default());
    let grid = Grid::new(64, 1, 1.5e-3, 1e-4).unwrap();
    let radii = stenosis(64, model.r0);
    c.bench_function("synthesize_echo nx=64", |b| {
        b.iter(|| synthesize_echo(black_box(&radii), &pulse, &grid, &model, &setup, "bench").unwrap())
    });
    let incident = incident_trace(&pulse, &grid, &model, &setup, "inc").unwrap();
    let echo = synthesize_echo(&radii, &pulse, &grid, &model, &setup, "bench").unwrap();
    c.bench_function("estimate_tof", |b| b.iter(|| estimate_tof(black_box(&incident), black_box(&echo)).unwrap()));
}

fn inversion(c: &mut Criterion) {
    let (pulse, model, setup) = (PulseSpec::default(), ArteryModel::default(), EchoSetup::default());
    let grid = Grid::new(64, 1, 1.5e-3, 1e-4).unwrap();
    let observed = synthesize_echo(&stenosis(64, model.r0), &pulse, &grid, &model, &setup, "obs").unwrap();
    let problem = InverseProblem::from_setup(observed, pulse, grid, model, &setup).unwrap();
    let options = SolverOptions::default();
    let mut group = c.benchmark_group("inversion");
    group.sample_size(10);
    group.bench_function("invert_radii nx=64", |b| b.iter(|| invert_radii(black_box(&problem), &options).unwrap()));
    group.finish();
}

criterion_group!(benches, flow, acoustics, inversion);
criterion_main!(benches);
