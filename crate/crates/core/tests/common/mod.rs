//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use nalgebra::SMatrix;
use num_complex::Complex64;
use qutrit_bexd::lindblad::{
    build_hamiltonian, jump_operators, master_equation_rhs, CMat3, CVec3, DensityMatrix,
    StateVector,
};
use qutrit_bexd::params::SystemParams;
use qutrit_bexd::pulse::{ControlPulse, PulseSegment};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type CMat9 = SMatrix<Complex64, 9, 9>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_complex(rng: &mut impl Rng) -> Complex64 {
    Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
}

pub fn random_state(rng: &mut impl Rng) -> StateVector {
    let v = CVec3::from_fn(|_, _| random_complex(rng));
    StateVector::normalized(v).unwrap()
}

/// Full-rank mixed state from a Ginibre matrix, `G G† / Tr`.
pub fn random_density_matrix(rng: &mut impl Rng) -> DensityMatrix {
    let g = CMat3::from_fn(|_, _| random_complex(rng));
    let m = g * g.adjoint();
    let tr = m.trace();
    let m = m / tr;
    let herm = (m + m.adjoint()) * Complex64::new(0.5, 0.0);
    DensityMatrix::new(herm).unwrap()
}

/// Parameters drawn uniformly from the prior box.
pub fn random_params(rng: &mut impl Rng) -> SystemParams {
    SystemParams::new(
        rng.random_range(3.5..4.5),
        rng.random_range(0.1..0.2),
        rng.random_range(30.0..60.0),
        rng.random_range(20.0..40.0),
    )
}

/// A pulse anywhere inside the control box: ω_d ∈ [3.5, 4.5] GHz,
/// p, q ∈ [−12, 12] MHz, Δt ∈ [1, 30] µs.
pub fn random_pulse(rng: &mut impl Rng, segments: usize) -> ControlPulse {
    let segs = (0..segments)
        .map(|_| {
            PulseSegment::new(
                rng.random_range(-12.0..12.0),
                rng.random_range(-12.0..12.0),
                rng.random_range(1.0..30.0),
            )
        })
        .collect();
    ControlPulse::new(rng.random_range(3.5..4.5), segs).unwrap()
}

/// Superoperator assembled column by column from the commutator form of
/// the master equation (column-stacked vec, entry `i + 3j` is ρᵢⱼ).
fn generator_from_rhs(h: &CMat3, jumps: &[CMat3]) -> CMat9 {
    let mut out = CMat9::zeros();
    for col in 0..9 {
        let mut e = CMat3::zeros();
        e[(col % 3, col / 3)] = Complex64::new(1.0, 0.0);
        let d = master_equation_rhs(h, jumps, &e);
        for row in 0..9 {
            out[(row, col)] = d[(row % 3, row / 3)];
        }
    }
    out
}

/// `(I + a)(I + b) − I`.
fn compose(a: &CMat9, b: &CMat9) -> CMat9 {
    a + b + a * b
}

/// Classical fourth-order Runge–Kutta with fixed step `h ≤ 1e-4 µs` and
/// `h·‖𝓛‖₁ ≤ 1e-4` on every segment.
///
/// For a constant generator one RK4 step is the linear map
/// `R = I + h𝓛 + (h𝓛)²/2 + (h𝓛)³/6 + (h𝓛)⁴/24`, so n steps equal `Rⁿ`.
/// The power is formed by binary exponentiation on `R − I`, which keeps
/// rounding relative to the increment rather than to the identity; the
/// result is the n-step RK4 solution without n sequential roundings.
pub fn rk4_propagate(rho0: &DensityMatrix, params: &SystemParams, pulse: &ControlPulse) -> CMat3 {
    let jumps = jump_operators(params);
    let mut v: SMatrix<Complex64, 9, 1> = SMatrix::from_iterator(rho0.matrix().iter().copied());
    for seg in &pulse.segments {
        let h_op = build_hamiltonian(params, pulse.drive_freq, seg);
        let l = generator_from_rhs(&h_op, &jumps);
        let norm = l
            .column_iter()
            .map(|c| c.iter().map(|z| z.norm()).sum::<f64>())
            .fold(0.0, f64::max);
        let h_max = if norm > 0.0 { (1e-4 / norm).min(1e-4) } else { 1e-4 };
        let steps = (seg.dt / h_max).ceil() as u64;
        let h = seg.dt / steps as f64;
        let x = l * Complex64::new(h, 0.0);
        let x2 = x * x;
        let x3 = x2 * x;
        let x4 = x3 * x;
        let step = x + x2 * Complex64::new(0.5, 0.0)
            + x3 * Complex64::new(1.0 / 6.0, 0.0)
            + x4 * Complex64::new(1.0 / 24.0, 0.0);
        let mut acc = CMat9::zeros();
        let mut base = step;
        let mut n = steps;
        while n > 0 {
            if n & 1 == 1 {
                acc = compose(&acc, &base);
            }
            n >>= 1;
            if n > 0 {
                base = compose(&base, &base);
            }
        }
        v += acc * v;
    }
    CMat3::from_iterator(v.iter().copied())
}

/// Directly assembled `Δ a†a − (χ/2) a†a†aa + p(a + a†) + iq(a − a†)` in rad/µs.
pub fn dense_hamiltonian(params: &SystemParams, drive_freq: f64, seg: &PulseSegment) -> CMat3 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let delta = two_pi * 1000.0 * (params.omega - drive_freq);
    let chi = two_pi * 1000.0 * params.chi;
    let p = two_pi * seg.p;
    let q = two_pi * seg.q;
    let s2 = 2f64.sqrt();
    let c = Complex64::new;
    // a has entries a[0][1] = 1, a[1][2] = √2.
    let mut h = CMat3::zeros();
    h[(1, 1)] = c(delta, 0.0);
    h[(2, 2)] = c(2.0 * delta - chi, 0.0);
    h[(0, 1)] = c(p, q);
    h[(1, 0)] = c(p, -q);
    h[(1, 2)] = c(s2 * p, s2 * q);
    h[(2, 1)] = c(s2 * p, -s2 * q);
    h
}

/// Population of each level, read directly from the diagonal.
pub fn populations(m: &CMat3) -> [f64; 3] {
    [m[(0, 0)].re, m[(1, 1)].re, m[(2, 2)].re]
}

pub fn max_abs_diff(a: &CMat3, b: &CMat3) -> f64 {
    (a - b).iter().map(|z| z.norm()).fold(0.0, f64::max)
}
