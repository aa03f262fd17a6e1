use std::f64::consts::PI;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vasosim_core::acoustics::*;
use vasosim_core::hemogrid::{ArteryModel, Grid};

fn default_chain() -> (PulseSpec, Grid, ArteryModel, EchoSetup) {
    (PulseSpec::default(), Grid::new(64, 1, 1.5e-3, 1e-4).unwrap(), ArteryModel::default(), EchoSetup::default())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn valid_pulses_satisfy_wave_equation(
        freq in 1e3f64..1e6,
        a in -1e4f64..1e4,
        b in -1e4f64..1e4,
        angle in 0.0f64..=(PI / 2.0),
        c in 300.0f64..3000.0,
        ox in -1.0f64..1.0,
        ot in -1.0f64..1.0,
    ) {
        prop_assume!(a.abs() + b.abs() > 1e-3);
        let pulse = PulseSpec::from_frequency(freq, a, b, angle, c).unwrap();
        let origin = (ox * pulse.wavelength(), 0.3 * pulse.wavelength(), ot * pulse.period());
        let sample_box = SampleBox::wavelength_fraction(&pulse, 100.0, 7, origin);
        let residual = wave_equation_residual(&pulse, &sample_box).unwrap();
        prop_assert!(residual < 1e-3, "residual {}", residual);
    }

    #[test]
    fn dispersion_violation_is_detected(freq in 1e3f64..1e6, angle in 0.0f64..=(PI / 2.0), c in 300.0f64..3000.0) {
        let good = PulseSpec::from_frequency(freq, 1.0, 0.5, angle, c).unwrap();
        // ω² off by 10% from c²|k|².
        let omega = good.omega() * 1.1f64.sqrt();
        let bad = PulseSpec::new_unchecked(omega, 1.0, 0.5, good.k_x(), good.k_r(), c);
        prop_assert!(PulseSpec::new(omega, 1.0, 0.5, good.k_x(), good.k_r(), c).is_err());
        let sample_box = SampleBox::wavelength_fraction(&good, 100.0, 7, (0.0, 0.1, 0.0));
        let residual = wave_equation_residual(&bad, &sample_box).unwrap();
        prop_assert!(residual > 0.05, "residual {}", residual);
    }

    #[test]
    fn density_reciprocity(a in 1e-6f64..1e-3, b in 1e-6f64..1e-3) {
        let m = |tof: f64| ToFMeasurement { tof, peak_correlation: 1.0, session_id: "s".into() };
        let ab = density_change(&m(a), &m(b), true).unwrap().ratio;
        let ba = density_change(&m(b), &m(a), true).unwrap().ratio;
        prop_assert!((ab * ba - 1.0).abs() < 1e-12);
    }

    #[test]
    fn echo_csv_round_trip_is_bit_exact(samples in prop::collection::vec(-1e4f64..1e4, 2..50), t0 in -1e-3f64..1e-3) {
        let trace = EchoTrace::new(samples, 2e6, t0, "rt-1").unwrap();
        prop_assert_eq!(EchoTrace::parse_csv(&trace.to_csv_string()).unwrap(), trace);
    }
}

#[test]
fn density_reciprocity_on_1000_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let m = |tof: f64| ToFMeasurement { tof, peak_correlation: 1.0, session_id: "s".into() };
    for _ in 0..1000 {
        let (a, b) = (rng.random_range(1e-6..1e-3), rng.random_range(1e-6..1e-3));
        let ab = density_change(&m(a), &m(b), true).unwrap();
        let ba = density_change(&m(b), &m(a), true).unwrap();
        assert!((ab.ratio * ba.ratio - 1.0).abs() < 1e-12);
    }
    let r = density_change(&m(1e-4), &m(1.1e-4), true).unwrap();
    assert!((r.ratio - 1.21).abs() < 1e-12);
}

/// Magnitude of the DFT of `x` at `freq`, evaluated directly.
fn dft_magnitude(x: &[f64], fs: f64, freq: f64) -> f64 {
    let (mut re, mut im) = (0.0, 0.0);
    for (n, v) in x.iter().enumerate() {
        let phase = 2.0 * PI * freq * n as f64 / fs;
        re += v * phase.cos();
        im -= v * phase.sin();
    }
    (re * re + im * im).sqrt()
}

#[test]
fn incident_spectrum_peaks_at_carrier() {
    let (pulse, grid, model, setup) = default_chain();
    let trace = incident_trace(&pulse, &grid, &model, &setup, "inc").unwrap();
    let n = trace.len();
    let bins: Vec<f64> = (0..n / 2).map(|k| dft_magnitude(&trace.samples, trace.fs, k as f64 * trace.fs / n as f64)).collect();
    let peak = bins.iter().enumerate().fold((0, 0.0), |b, (k, &v)| if v > b.1 { (k, v) } else { b }).0;
    let peak_freq = peak as f64 * trace.fs / n as f64;
    assert!((peak_freq - pulse.frequency()).abs() <= trace.fs / n as f64, "peak at {peak_freq} Hz");
}

#[test]
fn single_step_gives_one_arrival_at_round_trip() {
    let (pulse, grid, model, setup) = default_chain();
    let step = 20;
    let column: Vec<f64> = (0..64).map(|i| if i <= step { model.r0 } else { 0.8 * model.r0 }).collect();
    let echo = synthesize_echo(&column, &pulse, &grid, &model, &setup, "step").unwrap();
    let incident = incident_trace(&pulse, &grid, &model, &setup, "inc").unwrap();
    let expected = 2.0 * (step + 1) as f64 * grid.dx() / pulse.c();
    let tof = estimate_tof(&incident, &echo).unwrap();
    assert!((tof.tof - expected).abs() < 1.0 / setup.fs, "{} vs {expected}", tof.tof);
    // Narrowing raises impedance: positive reflection of 1 − 0.8² over 1 + 0.8².
    let gamma = (1.0 - 0.64) / (1.0 + 0.64);
    assert!((echo.peak_abs() / (pulse.amp_forward() * gamma) - 1.0).abs() < 0.01);
}

#[test]
fn integer_delays_are_exact() {
    let (pulse, grid, model, setup) = default_chain();
    let forward = EchoModel::new(&pulse, &grid, &model, &setup).unwrap();
    let inc = forward.incident_samples();
    let incident = forward.to_trace(inc.clone(), "inc").unwrap();
    for shift in [0usize, 1, 7, 40, 150] {
        let mut samples = vec![0.0; inc.len()];
        for (k, v) in inc.iter().enumerate() {
            if k + shift < samples.len() {
                samples[k + shift] = 0.3 * v;
            }
        }
        let echo = forward.to_trace(samples, "e").unwrap();
        let tof = estimate_tof(&incident, &echo).unwrap();
        assert_eq!(tof.tof, shift as f64 / setup.fs, "shift {shift}");
    }
}

#[test]
fn fractional_delays_within_a_tenth_sample() {
    let (pulse, grid, model, setup) = default_chain();
    let forward = EchoModel::new(&pulse, &grid, &model, &setup).unwrap();
    let incident = forward.to_trace(forward.incident_samples(), "inc").unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let delay_samples = rng.random_range(1.0..200.0);
        let amplitude = rng.random_range(0.05..1.0) * if rng.random_bool(0.5) { 1.0 } else { 0.5 };
        let mut samples = vec![0.0; forward.n_samples()];
        forward.add_arrival(&mut samples, delay_samples / setup.fs, amplitude);
        let echo = forward.to_trace(samples, "e").unwrap();
        let tof = estimate_tof(&incident, &echo).unwrap();
        worst = worst.max((tof.tof * setup.fs - delay_samples).abs());
    }
    assert!(worst < 0.1, "worst error {worst} samples");
}

#[test]
fn trace_start_offset_is_accounted_for() {
    let (pulse, grid, model, setup) = default_chain();
    let forward = EchoModel::new(&pulse, &grid, &model, &setup).unwrap();
    let incident = forward.to_trace(forward.incident_samples(), "inc").unwrap();
    let mut samples = vec![0.0; forward.n_samples()];
    forward.add_arrival(&mut samples, 30.0 / setup.fs, 1.0);
    // Same recording with its clock started 5 samples later.
    let late = EchoTrace::new(samples[5..].to_vec(), setup.fs, incident.t0 + 5.0 / setup.fs, "late").unwrap();
    let tof = estimate_tof(&incident, &late).unwrap();
    assert!((tof.tof * setup.fs - 30.0).abs() < 1e-9);
}

#[test]
fn echo_file_round_trip_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let (pulse, grid, model, setup) = default_chain();
    let trace = incident_trace(&pulse, &grid, &model, &setup, "file-1").unwrap();
    let path = dir.path().join("echo.csv");
    trace.write_csv(&path).unwrap();
    assert_eq!(EchoTrace::read_csv(&path).unwrap(), trace);
    let text = std::fs::read_to_string(&path).unwrap();
    let truncated: String = text.lines().take(2).map(|l| format!("{l}\n")).collect();
    assert!(matches!(EchoTrace::parse_csv(&truncated), Err(AcousticsError::Format(_))));
    assert!(matches!(EchoTrace::read_csv(&dir.path().join("nope.csv")), Err(AcousticsError::Io(_))));
}

#[test]
fn reflection_is_antisymmetric() {
    let model = ArteryModel::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..100 {
        let (a, b) = (rng.random_range(1e-6..1e-4), rng.random_range(1e-6..1e-4));
        let ab = reflection_coefficient(a, b, &model).unwrap();
        let ba = reflection_coefficient(b, a, &model).unwrap();
        assert!((ab + ba).abs() < 1e-15);
        assert!(ab.abs() < 1.0);
    }
}
