//! Taylor-series structural identifiability for the closed and open qutrit
//! models.
//!
//! Observables `yᵢ(t) = Tr(Mᵢ ρ(t))` are expanded about the current time;
//! their k-th coefficients are `Tr(Mᵢ 𝓛ᵏ(ρ))`. A parameter subset is
//! identifiable at a state when the coefficients depend on it through a
//! matrix of full column rank.
//!
//! Unknowns are handled in internal units: ω, χ and the drive value F in
//! rad/µs, τ₁ and τ₂ in 1/µs. Public entry points take F in MHz like pulse
//! amplitudes.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lindblad::{
    build_hamiltonian, propagate_trajectory, CMat3, DensityMatrix, Liouvillian, OperatorSet,
    StateVector,
};
use crate::params::{angular_ghz, angular_mhz, SystemParams};
use crate::pulse::{ControlPulse, PulseSegment};

/// Relative singular-value threshold for the rank decision.
pub const RANK_THRESHOLD: f64 = 1e-8;

/// Relative tolerance of the affine-coefficient check.
pub const AFFINE_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaylorCoefficients {
    pub order: usize,
    /// `a_{i,k}` for i = 0, 1, 2.
    pub values: [f64; 3],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    Identifiable,
    NotIdentifiable,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Unknown {
    Drive,
    Tau1,
    Omega,
    Chi,
    Tau2,
}

impl Unknown {
    pub fn label(self) -> &'static str {
        match self {
            Unknown::Drive => "F",
            Unknown::Tau1 => "tau1",
            Unknown::Omega => "omega",
            Unknown::Chi => "chi",
            Unknown::Tau2 => "tau2",
        }
    }
}

/// `A x + rhs = observed coefficients`, with `x` the unknowns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionSystem {
    pub matrix: Vec<Vec<f64>>,
    /// Contribution of the known parameters (the unknowns set to zero).
    pub rhs: Vec<f64>,
    pub unknowns: Vec<Unknown>,
    pub singular_values: Vec<f64>,
    pub rank: usize,
    pub verdict: Verdict,
}

impl ConditionSystem {
    pub fn new(matrix: Vec<Vec<f64>>, rhs: Vec<f64>, unknowns: Vec<Unknown>) -> Self {
        let rows = matrix.len();
        let cols = unknowns.len();
        let m = DMatrix::from_fn(rows, cols, |i, j| matrix[i][j]);
        let mut singular_values: Vec<f64> = m.singular_values().iter().copied().collect();
        singular_values.sort_by(|a, b| b.total_cmp(a));
        let largest = singular_values.first().copied().unwrap_or(0.0);
        let rank = if largest > 0.0 {
            singular_values
                .iter()
                .filter(|&&s| s >= RANK_THRESHOLD * largest)
                .count()
        } else {
            0
        };
        let verdict = if rank == cols {
            Verdict::Identifiable
        } else {
            Verdict::NotIdentifiable
        };
        Self {
            matrix,
            rhs,
            unknowns,
            singular_values,
            rank,
            verdict,
        }
    }

    pub fn is_identifiable(&self) -> bool {
        self.verdict == Verdict::Identifiable
    }

    /// Least-squares solve of `A x = observed − rhs`; `None` when not identifiable.
    pub fn solve(&self, observed: &[f64]) -> Option<Vec<f64>> {
        if !self.is_identifiable() {
            return None;
        }
        let rows = self.matrix.len();
        let cols = self.unknowns.len();
        let a = DMatrix::from_fn(rows, cols, |i, j| self.matrix[i][j]);
        let b = DMatrix::from_fn(rows, 1, |i, _| observed[i] - self.rhs[i]);
        let x = a.svd(true, true).solve(&b, 0.0).ok()?;
        Some(x.iter().copied().collect())
    }
}

/// Model point in internal units. `omega` is the frequency of the frame
/// term `ω a†a` (the detuning in a rotating frame).
#[derive(Clone, Copy, Debug, PartialEq)]
struct ModelPoint {
    omega: f64,
    chi: f64,
    drive: f64,
    tau1: f64,
    tau2: f64,
}

impl ModelPoint {
    fn from_params(params: &SystemParams, drive_freq: f64, drive_mhz: f64) -> Self {
        Self {
            omega: angular_ghz(params.omega - drive_freq),
            chi: angular_ghz(params.chi),
            drive: angular_mhz(drive_mhz),
            tau1: params.tau1(),
            tau2: params.tau2(),
        }
    }

    fn with(mut self, unknown: Unknown, value: f64) -> Self {
        match unknown {
            Unknown::Drive => self.drive = value,
            Unknown::Tau1 => self.tau1 = value,
            Unknown::Omega => self.omega = value,
            Unknown::Chi => self.chi = value,
            Unknown::Tau2 => self.tau2 = value,
        }
        self
    }

    fn hamiltonian(&self) -> CMat3 {
        let ops = OperatorSet::get();
        let c = |x: f64| num_complex::Complex64::new(x, 0.0);
        ops.number * c(self.omega) - ops.anharmonic * c(0.5 * self.chi)
            + (ops.lowering + ops.raising) * c(self.drive)
    }

    fn jumps(&self) -> Vec<CMat3> {
        let ops = OperatorSet::get();
        let c = |x: f64| num_complex::Complex64::new(x, 0.0);
        let mut out = Vec::new();
        if self.tau1 != 0.0 {
            out.push(ops.lowering * c(self.tau1.sqrt()));
        }
        if self.tau2 != 0.0 {
            out.push(ops.number * c(self.tau2.sqrt()));
        }
        out
    }

    fn liouvillian(&self) -> Result<Liouvillian> {
        if self.tau1 < 0.0 || self.tau2 < 0.0 {
            return Err(Error::InvalidParameter(format!(
                "negative rate τ₁ = {}, τ₂ = {}",
                self.tau1, self.tau2
            )));
        }
        Ok(Liouvillian::from_parts(&self.hamiltonian(), &self.jumps()))
    }
}

fn check_order(order: usize) -> Result<()> {
    if order > 2 {
        Err(Error::UnsupportedOrder(order))
    } else {
        Ok(())
    }
}

fn standard_basis() -> [CMat3; 3] {
    OperatorSet::get().measurement
}

/// `U Mᵢ U†` for the z-basis projectors.
fn rotated_basis(u: &CMat3) -> [CMat3; 3] {
    standard_basis().map(|m| u * m * u.adjoint())
}

fn generator_coefficients(
    rho: &DensityMatrix,
    point: &ModelPoint,
    basis: &[CMat3; 3],
    order: usize,
) -> Result<[f64; 3]> {
    let l = point.liouvillian()?;
    let mut x = *rho.matrix();
    for _ in 0..order {
        x = l.apply(&x);
    }
    Ok([0, 1, 2].map(|i| (basis[i] * x).trace().re))
}

/// Closed-system coefficients from the commutator expressions
/// `⟨ψ|Mᵢ|ψ⟩`, `i⟨ψ|[H,Mᵢ]|ψ⟩`, `⟨ψ|[[H,Mᵢ],H]|ψ⟩`.
///
/// `drive_freq = 0` gives the lab-frame Hamiltonian with a real drive F (MHz).
pub fn taylor_coeffs_schroedinger(
    psi0: &StateVector,
    params: &SystemParams,
    drive_freq: f64,
    drive: f64,
    order: usize,
) -> Result<TaylorCoefficients> {
    check_order(order)?;
    let h = build_hamiltonian(params, drive_freq, &PulseSegment::new(drive, 0.0, 1.0));
    let psi = psi0.amplitudes();
    let expect = |op: CMat3| (psi.adjoint() * op * psi)[(0, 0)];
    let i = num_complex::Complex64::new(0.0, 1.0);
    let values = standard_basis().map(|m| {
        let comm = h * m - m * h;
        match order {
            0 => expect(m).re,
            1 => (i * expect(comm)).re,
            _ => expect(comm * h - h * comm).re,
        }
    });
    Ok(TaylorCoefficients { order, values })
}

/// Open-system coefficients `Tr(Mᵢ 𝓛ᵏ(ρ₀))` from repeated application of
/// the generator.
pub fn taylor_coeffs_lindblad(
    rho0: &DensityMatrix,
    params: &SystemParams,
    drive_freq: f64,
    drive: f64,
    order: usize,
) -> Result<TaylorCoefficients> {
    check_order(order)?;
    let point = ModelPoint::from_params(params, drive_freq, drive);
    let values = generator_coefficients(rho0, &point, &standard_basis(), order)?;
    Ok(TaylorCoefficients { order, values })
}

/// First-order system for (F, τ₁) built from `a_{0,1}` and `a_{2,1}`:
/// `[[2 Im ρ₁₀, ρ₁₁], [√2 Im ρ₂₁, ρ₂₂]]`.
pub fn first_order_system_lindblad(rho0: &DensityMatrix) -> ConditionSystem {
    let r10 = rho0.entry(1, 0);
    let r21 = rho0.entry(2, 1);
    let matrix = vec![
        vec![2.0 * r10.im, rho0.entry(1, 1).re],
        vec![2f64.sqrt() * r21.im, rho0.entry(2, 2).re],
    ];
    ConditionSystem::new(matrix, vec![0.0, 0.0], vec![Unknown::Drive, Unknown::Tau1])
}

/// Reads off the linear dependence of `a_{·,order}` on each unknown with
/// forward differences at two step sizes from the zero point.
fn extract_system(
    rho: &DensityMatrix,
    known: ModelPoint,
    unknowns: &[Unknown],
    order: usize,
    basis: &[CMat3; 3],
) -> Result<ConditionSystem> {
    check_order(order)?;
    let base = unknowns.iter().fold(known, |p, &u| p.with(u, 0.0));
    let offset = generator_coefficients(rho, &base, basis, order)?;
    let mut columns = Vec::with_capacity(unknowns.len());
    for &u in unknowns {
        let (coarse_step, fine_step) = (10.0, 1.0);
        let coarse = generator_coefficients(rho, &base.with(u, coarse_step), basis, order)?;
        let fine = generator_coefficients(rho, &base.with(u, fine_step), basis, order)?;
        let mut col = [0.0; 3];
        let magnitude = offset
            .iter()
            .chain(&coarse)
            .fold(1.0f64, |m, x| m.max(x.abs()));
        for i in 0..3 {
            let c = (coarse[i] - offset[i]) / coarse_step;
            let f = (fine[i] - offset[i]) / fine_step;
            let floor = 1e-11 * magnitude / fine_step;
            if (c - f).abs() > AFFINE_TOL * c.abs().max(f.abs()) + floor {
                return Err(Error::NonAffineDependence {
                    parameter: u.label(),
                    coarse: c,
                    fine: f,
                });
            }
            col[i] = c;
        }
        columns.push(col);
    }
    let matrix = (0..3)
        .map(|i| columns.iter().map(|col| col[i]).collect())
        .collect();
    Ok(ConditionSystem::new(matrix, offset.to_vec(), unknowns.to_vec()))
}

const SECOND_ORDER_UNKNOWNS: [Unknown; 3] = [Unknown::Omega, Unknown::Chi, Unknown::Tau2];
const FREQUENCY_UNKNOWNS: [Unknown; 2] = [Unknown::Omega, Unknown::Chi];
const FIRST_ORDER_UNKNOWNS: [Unknown; 2] = [Unknown::Drive, Unknown::Tau1];

/// Second-order system for (ω, χ, τ₂) at known drive `drive` (MHz) and `tau1` (1/µs).
///
/// Every column sums to zero over the three outcomes (probability is
/// conserved), so the rank is at most 2 and this system alone never resolves
/// all three unknowns; see [`frequency_system_lindblad`] for (ω, χ).
pub fn second_order_system_lindblad(
    rho0: &DensityMatrix,
    drive: f64,
    tau1: f64,
) -> Result<ConditionSystem> {
    second_order_system_in_basis(rho0, drive, tau1, &standard_basis())
}

/// Second-order system for (ω, χ) with τ₁ and τ₂ (1/µs) known.
pub fn frequency_system_lindblad(
    rho0: &DensityMatrix,
    drive: f64,
    tau1: f64,
    tau2: f64,
) -> Result<ConditionSystem> {
    frequency_system_in_basis(rho0, drive, tau1, tau2, &standard_basis())
}

fn frequency_system_in_basis(
    rho0: &DensityMatrix,
    drive: f64,
    tau1: f64,
    tau2: f64,
    basis: &[CMat3; 3],
) -> Result<ConditionSystem> {
    let known = ModelPoint {
        omega: 0.0,
        chi: 0.0,
        drive: angular_mhz(drive),
        tau1,
        tau2,
    };
    extract_system(rho0, known, &FREQUENCY_UNKNOWNS, 2, basis)
}

/// As [`second_order_system_lindblad`] with measurement operators `basis`.
fn second_order_system_in_basis(
    rho0: &DensityMatrix,
    drive: f64,
    tau1: f64,
    basis: &[CMat3; 3],
) -> Result<ConditionSystem> {
    let known = ModelPoint {
        omega: 0.0,
        chi: 0.0,
        drive: angular_mhz(drive),
        tau1,
        tau2: 0.0,
    };
    extract_system(rho0, known, &SECOND_ORDER_UNKNOWNS, 2, basis)
}

/// First-order system for (F, τ₁) extracted from the generator over all
/// three outcomes in `basis`.
fn first_order_system_in_basis(
    rho0: &DensityMatrix,
    basis: &[CMat3; 3],
) -> Result<ConditionSystem> {
    let known = ModelPoint {
        omega: 0.0,
        chi: 0.0,
        drive: 0.0,
        tau1: 0.0,
        tau2: 0.0,
    };
    extract_system(rho0, known, &FIRST_ORDER_UNKNOWNS, 1, basis)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProbeResult {
    pub time: f64,
    pub populations: [f64; 3],
    pub first_order: ConditionSystem,
    /// (ω, χ) with τ₂ known.
    pub frequency: ConditionSystem,
    /// (ω, χ, τ₂).
    pub second_order: ConditionSystem,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct IdentifiabilityReport {
    /// Drive value F (MHz) used for the second-order systems.
    pub drive: f64,
    pub probes: Vec<ProbeResult>,
    /// Earliest probe time at which (F, τ₁) is identifiable.
    pub first_order_identifiable_at: Option<f64>,
    /// Earliest probe time at which (ω, χ) is identifiable.
    pub frequency_identifiable_at: Option<f64>,
    /// Earliest probe time at which (ω, χ, τ₂) is identifiable.
    pub second_order_identifiable_at: Option<f64>,
    /// Largest difference between coefficients measured with `U Mᵢ U†` on
    /// ρ and with `Mᵢ` on the transformed state and dynamics `U†ρU`.
    pub basis_invariance_residual: f64,
}

/// The first `t` µs of `pulse` (at least one segment).
fn truncate_pulse(pulse: &ControlPulse, t: f64) -> Option<ControlPulse> {
    let mut remaining = t;
    let mut segments = Vec::new();
    for s in &pulse.segments {
        if remaining <= 0.0 {
            break;
        }
        let dt = s.dt.min(remaining);
        segments.push(PulseSegment::new(s.p, s.q, dt));
        remaining -= dt;
    }
    if segments.is_empty() {
        None
    } else {
        Some(ControlPulse {
            drive_freq: pulse.drive_freq,
            segments,
        })
    }
}

/// Propagates the ground state through `pulse` and evaluates the condition
/// systems at each probe time for a measurement in the basis `U Mᵢ U†`.
///
/// Since `Tr(U Mᵢ U† ρ) = Tr(Mᵢ U†ρU)`, the conditions are evaluated on the
/// transformed state `U†ρU` with z-basis projectors. The identity itself is
/// checked through `basis_invariance_residual`.
pub fn check_identifiability(
    pulse: &ControlPulse,
    params: &SystemParams,
    probe_times: &[f64],
    unitary: &CMat3,
) -> Result<IdentifiabilityReport> {
    pulse.validate()?;
    params.validate()?;
    let drive = pulse.initial_drive();
    let basis = standard_basis();
    let mut probes = Vec::with_capacity(probe_times.len());
    let mut residual = 0.0f64;
    for &t in probe_times {
        let rho = match truncate_pulse(pulse, t) {
            Some(p) => *propagate_trajectory(&DensityMatrix::ground(), params, &p)?
                .last()
                .expect("trajectory has the initial state"),
            None => DensityMatrix::ground(),
        };
        residual = residual.max(invariance_residual(&rho, params, pulse.drive_freq, drive, unitary)?);
        let rho = rho.conjugate(&unitary.adjoint());
        let first_order = first_order_system_in_basis(&rho, &basis)?;
        let frequency =
            frequency_system_in_basis(&rho, drive, params.tau1(), params.tau2(), &basis)?;
        let second_order = second_order_system_in_basis(&rho, drive, params.tau1(), &basis)?;
        let d = |i: usize| rho.entry(i, i).re;
        probes.push(ProbeResult {
            time: t,
            populations: [d(0), d(1), d(2)],
            first_order,
            frequency,
            second_order,
        });
    }
    let earliest = |f: fn(&ProbeResult) -> bool| probes.iter().find(|p| f(p)).map(|p| p.time);
    Ok(IdentifiabilityReport {
        drive,
        first_order_identifiable_at: earliest(|p| p.first_order.is_identifiable()),
        frequency_identifiable_at: earliest(|p| p.frequency.is_identifiable()),
        second_order_identifiable_at: earliest(|p| p.second_order.is_identifiable()),
        probes,
        basis_invariance_residual: residual,
    })
}

/// `Tr(U Mᵢ U† 𝓛ᵏρ)` against `Tr(Mᵢ 𝓛̃ᵏ(U†ρU))` with the generator conjugated by U.
fn invariance_residual(
    rho: &DensityMatrix,
    params: &SystemParams,
    drive_freq: f64,
    drive: f64,
    u: &CMat3,
) -> Result<f64> {
    let point = ModelPoint::from_params(params, drive_freq, drive);
    let basis = rotated_basis(u);
    let ud = u.adjoint();
    let h = ud * point.hamiltonian() * u;
    let jumps: Vec<CMat3> = point.jumps().iter().map(|l| ud * l * u).collect();
    let transformed = Liouvillian::from_parts(&h, &jumps);
    let rho_t = rho.conjugate(&ud);
    let mut worst = 0.0f64;
    for order in 0..=2 {
        let direct = generator_coefficients(rho, &point, &basis, order)?;
        let mut x = *rho_t.matrix();
        for _ in 0..order {
            x = transformed.apply(&x);
        }
        for (i, m) in standard_basis().iter().enumerate() {
            worst = worst.max((direct[i] - (m * x).trace().re).abs());
        }
    }
    Ok(worst)
}
