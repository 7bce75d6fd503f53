mod common;

use common::*;
use num_complex::Complex64;
use proptest::prelude::*;
use rand::Rng;
use qutrit_bexd::lindblad::{
    build_hamiltonian, measure_probs, propagate, propagate_state, DensityMatrix, StateVector,
};
use qutrit_bexd::params::SystemParams;
use qutrit_bexd::pulse::{ControlPulse, PulseSegment};

#[test]
fn matches_rk4_reference() {
    let mut r = rng(11);
    for _ in 0..6 {
        let params = random_params(&mut r);
        let rho0 = random_density_matrix(&mut r);
        let segs = r.random_range(1..=3);
        let pulse = random_pulse(&mut r, segs);
        let got = propagate(&rho0, &params, &pulse).unwrap();
        let reference = rk4_propagate(&rho0, &params, &pulse);
        let err = max_abs_diff(got.matrix(), &reference);
        assert!(err < 1e-8, "max entry error {err:e} for {pulse:?}");
    }
}

#[test]
fn dense_hamiltonian_agrees() {
    let mut r = rng(5);
    for _ in 0..20 {
        let params = random_params(&mut r);
        let seg = PulseSegment::new(r.random_range(-12.0..12.0), r.random_range(-12.0..12.0), 1.0);
        let wd = r.random_range(3.5..4.5);
        let a = build_hamiltonian(&params, wd, &seg);
        let b = dense_hamiltonian(&params, wd, &seg);
        assert!(max_abs_diff(&a, &b) <= 1e-9 * b.iter().map(|z| z.norm()).fold(1.0, f64::max));
    }
}

#[test]
fn decay_from_first_excited_level() {
    let p = SystemParams::qpu_reference();
    let rho = DensityMatrix::basis(1);
    let pulse = ControlPulse::idle(p.omega, 45.0);
    let out = measure_probs(&propagate(&rho, &p, &pulse).unwrap()).unwrap();
    let e = (-1.0f64).exp();
    assert!((out[1] - e).abs() < 1e-10);
    assert!((out[0] - (1.0 - e)).abs() < 1e-10);
}

#[test]
fn rabi_period_in_two_level_limit() {
    // Large anharmonicity and a weak resonant drive isolate the 0-1 transition.
    let params = SystemParams::closed(4.0, 0.2);
    let amp = 0.5;
    let omega = 2.0 * std::f64::consts::PI * amp;
    let expected = std::f64::consts::PI / omega;
    let p1 = |t: f64| {
        let pulse = ControlPulse::new(params.omega, vec![PulseSegment::new(amp, 0.0, t)]).unwrap();
        propagate_state(&StateVector::basis(0), &params, &pulse).unwrap().populations()[1]
    };
    let n = 2000;
    let ts: Vec<f64> = (1..=n).map(|k| 1.5 * expected * k as f64 / n as f64).collect();
    let vals: Vec<f64> = ts.iter().map(|&t| p1(t)).collect();
    let k = (1..n - 1)
        .find(|&k| vals[k] < vals[k - 1] && vals[k] <= vals[k + 1] && ts[k] > 0.5 * expected)
        .expect("population returns to a minimum");
    let (y0, y1, y2) = (vals[k - 1], vals[k], vals[k + 1]);
    let step = ts[1] - ts[0];
    let period = ts[k] + 0.5 * step * (y0 - y2) / (y0 - 2.0 * y1 + y2);
    assert!((period / expected - 1.0).abs() < 0.01, "period {period} vs {expected}");
}

#[test]
fn ground_state_stationary_under_idle() {
    let p = SystemParams::qpu_reference();
    for wd in [3.5, 4.0108, 4.5] {
        let out = propagate(&DensityMatrix::ground(), &p, &ControlPulse::idle(wd, 30.0)).unwrap();
        assert_eq!(*out.matrix(), *DensityMatrix::ground().matrix());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn propagation_keeps_a_density_matrix(seed in any::<u64>(), segs in 1usize..4) {
        let mut r = rng(seed);
        let params = random_params(&mut r);
        let rho0 = random_density_matrix(&mut r);
        let pulse = random_pulse(&mut r, segs);
        let out = propagate(&rho0, &params, &pulse).unwrap();
        prop_assert!((out.trace() - Complex64::new(1.0, 0.0)).norm() <= 1e-10);
        prop_assert!(out.hermiticity_error() <= 1e-12);
        prop_assert!(out.min_eigenvalue() >= -1e-10);
        let probs = measure_probs(&out).unwrap();
        prop_assert!(probs.iter().all(|p| (0.0..=1.0).contains(p)));
        prop_assert!((probs.iter().sum::<f64>() - 1.0).abs() <= 1e-10);
    }

    #[test]
    fn closed_and_open_forms_agree(seed in any::<u64>(), segs in 1usize..4) {
        let mut r = rng(seed);
        let p = random_params(&mut r);
        let params = SystemParams::closed(p.omega, p.chi);
        let psi = random_state(&mut r);
        let pulse = random_pulse(&mut r, segs);
        let out_psi = propagate_state(&psi, &params, &pulse).unwrap();
        prop_assert!((out_psi.norm() - 1.0).abs() <= 1e-12);
        let out_rho = propagate(&DensityMatrix::pure(&psi), &params, &pulse).unwrap();
        let err = max_abs_diff(DensityMatrix::pure(&out_psi).matrix(), out_rho.matrix());
        // Squaring over ~1e5 rad segments leaves a few 1e-10 of rounding.
        prop_assert!(err <= 1e-9, "error {:e}", err);
    }

    #[test]
    fn constant_segment_semigroup(seed in any::<u64>()) {
        let mut r = rng(seed);
        let params = random_params(&mut r);
        let rho0 = random_density_matrix(&mut r);
        let single = random_pulse(&mut r, 1);
        let s = single.segments[0];
        let half = PulseSegment::new(s.p, s.q, s.dt / 2.0);
        let split = ControlPulse::new(single.drive_freq, vec![half, half]).unwrap();
        let a = propagate(&rho0, &params, &single).unwrap();
        let b = propagate(&rho0, &params, &split).unwrap();
        prop_assert!(max_abs_diff(a.matrix(), b.matrix()) <= 1e-10);
    }
}

