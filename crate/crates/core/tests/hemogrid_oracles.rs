use std::f64::consts::PI;
use std::time::Instant;

use proptest::prelude::*;
use vasosim_core::hemogrid::*;

fn gaussian_periodic(x: f64, centre: f64, sigma: f64) -> f64 {
    (-1..=1)
        .map(|k| {
            let d = x - centre + k as f64;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .sum()
}

/// Relative L2 error of transporting a Gaussian a distance `travel` on the
/// unit periodic domain at constant unit velocity.
fn advection_error(nx: usize, cfl: f64, sigma: f64, travel: f64) -> f64 {
    let dx = 1.0 / nx as f64;
    let dt = cfl * dx;
    let steps = (travel / dt).round() as usize;
    let grid = Grid::new(nx, steps + 1, dx, dt).unwrap();
    let x = |i: usize| (i as f64 + 0.5) * dx;
    let mut state = FlowState {
        area: (0..nx).map(|i| gaussian_periodic(x(i), 0.3, sigma)).collect(),
        velocity: vec![1.0; nx],
        pressure: vec![0.0; nx],
        time_index: 0,
    };
    for _ in 0..steps {
        state = step_continuity(&state, &grid, Boundary::Periodic).unwrap();
    }
    let shift = steps as f64 * dt;
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..nx {
        let exact = gaussian_periodic(x(i), 0.3 + shift, sigma);
        num += (state.area[i] - exact).powi(2);
        den += exact * exact;
    }
    (num / den).sqrt()
}

#[test]
fn advection_tracks_analytic_shift() {
    let coarse = advection_error(256, 0.5, 0.1, 0.2);
    let fine = advection_error(512, 0.5, 0.1, 0.2);
    assert!(coarse < 0.02, "L2 error {coarse}");
    assert!(coarse / fine >= 1.8, "halving ratio {}", coarse / fine);
}

#[test]
fn periodic_run_conserves_volume() {
    let model = ArteryModel::default();
    let nx = 256;
    let dx = 1e-3;
    let grid = Grid::from_cfl(nx, 1001, dx, 0.4, 2.0 * DEFAULT_PULSE_WAVE_SPEED).unwrap();
    let radii: Vec<f64> = (0..nx).map(|i| model.r0 * (1.0 + 0.02 * (2.0 * PI * i as f64 / nx as f64).sin())).collect();
    let initial = FlowState::from_radii(&radii, &model, 0).unwrap();
    let start = Instant::now();
    let sol = solve_flow_from(initial, &model, &grid, &PressureWaveform::zero(grid.nt()), FlowBoundary::Periodic).unwrap();
    assert!(start.elapsed().as_secs_f64() < 5.0);
    assert_eq!(sol.states.len(), 1001);
    assert!(sol.volume_drift() < 1e-8, "drift {}", sol.volume_drift());
    // The perturbation must actually move fluid.
    assert!(sol.states[1000].velocity.iter().any(|u| u.abs() > 1e-6));
}

#[test]
fn momentum_hand_step() {
    let model = ArteryModel { re: 100.0, alpha: 10f64.sqrt(), ..ArteryModel::default() };
    let grid = Grid::new(5, 2, 1.0, 0.01).unwrap();
    let state = FlowState {
        area: vec![1.0; 5],
        velocity: vec![0.0; 5],
        pressure: (0..5).map(|i| 0.1 * i as f64).collect(),
        time_index: 0,
    };
    let next = step_momentum(&state, &grid, &model, Boundary::ZeroGradient, MomentumTerms::default()).unwrap();
    for i in 1..4 {
        assert!((next.velocity[i] + 0.01).abs() < 1e-14, "u[{i}] = {}", next.velocity[i]);
    }
}

#[test]
fn viscous_decay_matches_fourier_mode() {
    // Pure diffusion: u_t = (1/α²) u_xx on a periodic segment.
    let model = ArteryModel { alpha: 2.0, ..ArteryModel::default() };
    let nx = 64;
    let dx = 1.0 / nx as f64;
    let dt = 0.2 * model.alpha * model.alpha * dx * dx;
    let grid = Grid::new(nx, 2, dx, dt).unwrap();
    let k = 3.0;
    let mut state = FlowState {
        area: vec![1.0; nx],
        velocity: (0..nx).map(|i| (2.0 * PI * k * i as f64 * dx).sin()).collect(),
        pressure: vec![0.0; nx],
        time_index: 0,
    };
    let initial = state.velocity.clone();
    let steps = 200;
    for _ in 0..steps {
        state = step_momentum(&state, &grid, &model, Boundary::Periodic, MomentumTerms { convective: false }).unwrap();
    }
    let nu = 1.0 / (model.alpha * model.alpha);
    let mu = nu * dt / (dx * dx);
    let discrete = (1.0 - 4.0 * mu * (PI * k * dx).sin().powi(2)).powi(steps);
    let continuous = (-nu * (2.0 * PI * k).powi(2) * dt * steps as f64).exp();
    for (u, u0) in state.velocity.iter().zip(&initial) {
        assert!((u - discrete * u0).abs() < 1e-12);
    }
    assert!((discrete / continuous - 1.0).abs() < 0.01, "{discrete} vs {continuous}");
}

#[test]
fn unforced_inlet_run_stays_at_rest() {
    let model = ArteryModel::default();
    let grid = Grid::new(64, 50, 1.5e-3, 1e-4).unwrap();
    let sol = solve_flow(&model, &grid, &PressureWaveform::zero(50), FlowBoundary::InletPressure).unwrap();
    assert_eq!(sol.radii.min(), model.r0);
    assert_eq!(sol.radii.max(), model.r0);
}

#[test]
fn pulsatile_inlet_stays_bounded() {
    let model = ArteryModel::default();
    let grid = Grid::new(64, 400, 1.5e-3, 1e-4).unwrap();
    let inlet = PressureWaveform::sinusoid(500.0, 1.2, 0.7, grid.dt(), grid.nt());
    let sol = solve_flow(&model, &grid, &inlet, FlowBoundary::InletPressure).unwrap();
    assert!(sol.radii.values().iter().all(|r| r.is_finite()));
    assert!(sol.radii.max() < 1.05 * model.r0 && sol.radii.min() > 0.95 * model.r0);
    assert!(sol.radii.max() > model.r0);
}

#[test]
fn radii_csv_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let grid = Grid::new(4, 3, 1e-3, 1e-4).unwrap();
    let values: Vec<f64> = (0..12).map(|k| 1e-3 * (1.0 + k as f64 / 7.0)).collect();
    let field = RadiiField::new(grid, values).unwrap();
    let path = dir.path().join("r.csv");
    field.write_csv(&path).unwrap();
    assert_eq!(RadiiField::read_csv(&path).unwrap(), field);
    assert!(matches!(RadiiField::read_csv(&dir.path().join("missing.csv")), Err(FlowError::Io(_))));
}

proptest! {
    #[test]
    fn continuity_conserves_periodic_volume(
        areas in prop::collection::vec(0.5f64..2.0, 8..64),
        seed in prop::collection::vec(-1.0f64..1.0, 64),
        cfl in 0.05f64..0.95,
    ) {
        let nx = areas.len();
        let grid = Grid::new(nx, 2, 0.1, cfl * 0.1).unwrap();
        let state = FlowState {
            velocity: seed[..nx].to_vec(),
            pressure: vec![0.0; nx],
            area: areas,
            time_index: 0,
        };
        let next = step_continuity(&state, &grid, Boundary::Periodic).unwrap();
        let (v0, v1) = (state.volume(grid.dx()), next.volume(grid.dx()));
        prop_assert!(((v1 - v0) / v0).abs() < 1e-13);
    }

    #[test]
    fn uniform_flow_is_steady(a in 0.1f64..10.0, u in -1.0f64..1.0, nx in 2usize..40) {
        let grid = Grid::new(nx, 2, 1.0, 0.5).unwrap();
        let state = FlowState { area: vec![a; nx], velocity: vec![u; nx], pressure: vec![0.0; nx], time_index: 0 };
        for bc in [Boundary::Periodic, Boundary::ZeroGradient] {
            let next = step_continuity(&state, &grid, bc).unwrap();
            for d in &next.area {
                prop_assert!((d - a).abs() <= 1e-12 * a);
            }
        }
    }

    #[test]
    fn tube_law_round_trip(scale in 0.5f64..1.5) {
        let model = ArteryModel::default();
        let area = model.d0() * scale;
        let p = tube_law(area, &model).unwrap();
        let back = model.area_from_pressure(p).unwrap();
        prop_assert!((back - area).abs() < 1e-12 * area);
    }

    #[test]
    fn radii_csv_round_trip_is_bit_exact(values in prop::collection::vec(1e-4f64..1e-2, 6)) {
        let grid = Grid::new(3, 2, 1.5e-3, 1e-4).unwrap();
        let field = RadiiField::new(grid, values).unwrap();
        let parsed = RadiiField::parse_csv(&field.to_csv_string()).unwrap();
        prop_assert_eq!(parsed, field);
    }
}
