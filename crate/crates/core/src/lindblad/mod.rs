//! Qutrit Lindblad dynamics under piecewise-constant drives.
//!
//! The rotating-frame Hamiltonian is
//!
//! ```text
//! H = Δ a†a − (χ/2) a†a†aa + p (a + a†) + i q (a − a†),   Δ = ω − ω_d
//! ```
//!
//! with every frequency multiplied by 2π (GHz are first scaled to MHz) so that
//! H is in rad/µs. Decay and dephasing enter through `L₁ = a/√T1` and
//! `L₂ = a†a/√T2`; an infinite lifetime drops the corresponding operator.
//!
//! Vectorization stacks columns, so `vec(AXB) = (Bᵀ ⊗ A) vec(X)`. The
//! propagator itself works on the nine real coordinates of a Hermitian
//! matrix (see [`DensityMatrix::to_real`]), where the generator is a real
//! 9×9 matrix.

mod expm;
mod state;

use std::sync::OnceLock;

use nalgebra::{SMatrix, SymmetricEigen};
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::params::{angular_ghz, angular_mhz, SystemParams};
use crate::pulse::{ControlPulse, PulseSegment};

pub use expm::expm;
pub use state::{
    CMat3, CVec3, CVec9, DensityMatrix, DensityMatrixRecord, RVec9, StateVector, HERMITIAN_TOL,
    NORM_TOL, PSD_TOL, TRACE_TOL,
};

pub type CMat9 = SMatrix<Complex64, 9, 9>;
pub type RMat9 = SMatrix<f64, 9, 9>;

/// Tolerance used when clamping measurement probabilities.
pub const PROBABILITY_TOL: f64 = 1e-8;

const I: Complex64 = Complex64::new(0.0, 1.0);

fn c(x: f64) -> Complex64 {
    Complex64::new(x, 0.0)
}

/// The fixed qutrit operators.
#[derive(Clone, Debug)]
pub struct OperatorSet {
    pub lowering: CMat3,
    pub raising: CMat3,
    pub number: CMat3,
    /// a†a†aa = diag(0, 0, 2).
    pub anharmonic: CMat3,
    pub measurement: [CMat3; 3],
}

impl OperatorSet {
    pub fn get() -> &'static OperatorSet {
        static OPS: OnceLock<OperatorSet> = OnceLock::new();
        OPS.get_or_init(|| {
            let mut a = CMat3::zeros();
            a[(0, 1)] = c(1.0);
            a[(1, 2)] = c(2f64.sqrt());
            let ad = a.adjoint();
            let number = ad * a;
            let anharmonic = ad * ad * a * a;
            let measurement = [0, 1, 2].map(|y| {
                let mut m = CMat3::zeros();
                m[(y, y)] = c(1.0);
                m
            });
            OperatorSet {
                lowering: a,
                raising: ad,
                number,
                anharmonic,
                measurement,
            }
        })
    }
}

/// Jump operators `L₁ = √τ₁ a` and `L₂ = √τ₂ a†a`, omitting infinite lifetimes.
pub fn jump_operators(params: &SystemParams) -> Vec<CMat3> {
    let ops = OperatorSet::get();
    let mut out = Vec::with_capacity(2);
    if !params.t1.is_infinite() {
        out.push(ops.lowering * c(params.tau1().sqrt()));
    }
    if !params.t2.is_infinite() {
        out.push(ops.number * c(params.tau2().sqrt()));
    }
    out
}

/// Rotating-frame Hamiltonian for one segment, in rad/µs.
pub fn build_hamiltonian(params: &SystemParams, drive_freq: f64, segment: &PulseSegment) -> CMat3 {
    let ops = OperatorSet::get();
    let detuning = angular_ghz(params.detuning(drive_freq));
    let chi = angular_ghz(params.chi);
    let p = angular_mhz(segment.p);
    let q = angular_mhz(segment.q);
    ops.number * c(detuning)
        - ops.anharmonic * c(0.5 * chi)
        + (ops.lowering + ops.raising) * c(p)
        + (ops.lowering - ops.raising) * (I * q)
}

/// The lab-frame form used by the identifiability analysis: ω a†a − (χ/2) a†a†aa + F (a + a†).
pub fn static_hamiltonian(params: &SystemParams, drive: f64) -> CMat3 {
    build_hamiltonian(params, 0.0, &PulseSegment::new(drive, 0.0, 1.0))
}

/// Dense Kronecker product of two 3×3 matrices.
pub fn kron3(a: &CMat3, b: &CMat3) -> CMat9 {
    let mut out = CMat9::zeros();
    for i in 0..3 {
        for j in 0..3 {
            let aij = a[(i, j)];
            if aij == Complex64::default() {
                continue;
            }
            for k in 0..3 {
                for l in 0..3 {
                    out[(3 * i + k, 3 * j + l)] = aij * b[(k, l)];
                }
            }
        }
    }
    out
}

/// The vectorized master-equation generator, `d vec(ρ)/dt = 𝓛 vec(ρ)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Liouvillian(CMat9);

impl Liouvillian {
    pub fn from_parts(hamiltonian: &CMat3, jumps: &[CMat3]) -> Self {
        let id = CMat3::identity();
        let mut l = (kron3(&id, hamiltonian) - kron3(&hamiltonian.transpose(), &id)) * (-I);
        for jump in jumps {
            let ldl = jump.adjoint() * jump;
            l += kron3(&jump.conjugate(), jump);
            l -= (kron3(&id, &ldl) + kron3(&ldl.transpose(), &id)) * c(0.5);
        }
        Self(l)
    }

    pub fn matrix(&self) -> &CMat9 {
        &self.0
    }

    /// unvec(𝓛 vec(ρ)).
    pub fn apply(&self, rho: &CMat3) -> CMat3 {
        let v = CVec9::from_iterator(rho.iter().copied());
        let out = self.0 * v;
        CMat3::from_iterator(out.iter().copied())
    }

    /// The same generator acting on the real coordinates of Hermitian matrices.
    pub fn to_real(&self) -> RMat9 {
        // Real coordinate r reads vec entries `from_vec[r]`; vec entry m is
        // rebuilt from real coordinates by `to_vec[c]` (column c of T⁻¹).
        const H: f64 = 0.5;
        let from_vec: [[(usize, Complex64); 2]; 9] = [
            [(0, c(1.0)), (0, c(0.0))],
            [(4, c(1.0)), (4, c(0.0))],
            [(8, c(1.0)), (8, c(0.0))],
            [(1, c(H)), (3, c(H))],
            [(1, Complex64::new(0.0, -H)), (3, Complex64::new(0.0, H))],
            [(2, c(H)), (6, c(H))],
            [(2, Complex64::new(0.0, -H)), (6, Complex64::new(0.0, H))],
            [(5, c(H)), (7, c(H))],
            [(5, Complex64::new(0.0, -H)), (7, Complex64::new(0.0, H))],
        ];
        let to_vec: [[(usize, Complex64); 2]; 9] = [
            [(0, c(1.0)), (0, c(0.0))],
            [(4, c(1.0)), (4, c(0.0))],
            [(8, c(1.0)), (8, c(0.0))],
            [(1, c(1.0)), (3, c(1.0))],
            [(1, I), (3, -I)],
            [(2, c(1.0)), (6, c(1.0))],
            [(2, I), (6, -I)],
            [(5, c(1.0)), (7, c(1.0))],
            [(5, I), (7, -I)],
        ];
        let l = &self.0;
        let mut out = RMat9::zeros();
        for (col, src) in to_vec.iter().enumerate() {
            let mut lcol = CVec9::zeros();
            for &(m, w) in src {
                if w != Complex64::default() {
                    lcol += l.column(m) * w;
                }
            }
            for (row, dst) in from_vec.iter().enumerate() {
                let mut acc = Complex64::default();
                for &(k, w) in dst {
                    acc += w * lcol[k];
                }
                out[(row, col)] = acc.re;
            }
        }
        out
    }
}

pub fn build_liouvillian(
    params: &SystemParams,
    drive_freq: f64,
    segment: &PulseSegment,
) -> Liouvillian {
    let h = build_hamiltonian(params, drive_freq, segment);
    Liouvillian::from_parts(&h, &jump_operators(params))
}

/// Right-hand side of the master equation evaluated directly with
/// commutators and anticommutators.
pub fn master_equation_rhs(h: &CMat3, jumps: &[CMat3], rho: &CMat3) -> CMat3 {
    let mut d = (h * rho - rho * h) * (-I);
    for l in jumps {
        let ld = l.adjoint();
        let ldl = ld * l;
        d += l * rho * ld - (ldl * rho + rho * ldl) * c(0.5);
    }
    d
}

/// Real-coordinate propagator `exp(𝓛 Δt)` for one segment.
pub fn segment_propagator(
    params: &SystemParams,
    drive_freq: f64,
    segment: &PulseSegment,
) -> Result<RMat9> {
    let generator = build_liouvillian(params, drive_freq, segment).to_real();
    expm(&(generator * segment.dt))
}

/// Evolves `rho0` through every segment of `pulse` in time order.
pub fn propagate(
    rho0: &DensityMatrix,
    params: &SystemParams,
    pulse: &ControlPulse,
) -> Result<DensityMatrix> {
    let mut x = rho0.to_real();
    for seg in &pulse.segments {
        x = segment_propagator(params, pulse.drive_freq, seg)? * x;
    }
    Ok(DensityMatrix::from_real(&x))
}

/// Density matrix after each segment, starting with `rho0` itself.
pub fn propagate_trajectory(
    rho0: &DensityMatrix,
    params: &SystemParams,
    pulse: &ControlPulse,
) -> Result<Vec<DensityMatrix>> {
    let mut x = rho0.to_real();
    let mut out = Vec::with_capacity(pulse.segments.len() + 1);
    out.push(*rho0);
    for seg in &pulse.segments {
        x = segment_propagator(params, pulse.drive_freq, seg)? * x;
        out.push(DensityMatrix::from_real(&x));
    }
    Ok(out)
}

/// Closed-system `exp(−iHΔt)` built from the eigendecomposition of H.
pub fn unitary(h: &CMat3, dt: f64) -> Result<CMat3> {
    if !h.iter().all(|z| z.re.is_finite() && z.im.is_finite()) {
        return Err(Error::MatrixExpFailure("non-finite Hamiltonian".into()));
    }
    let eig = SymmetricEigen::new(*h);
    let phases = CVec3::from_iterator(
        eig.eigenvalues
            .iter()
            .map(|&e| Complex64::from_polar(1.0, -e * dt)),
    );
    let v = eig.eigenvectors;
    Ok(v * CMat3::from_diagonal(&phases) * v.adjoint())
}

/// Schrödinger evolution segment by segment; decoherence is ignored.
pub fn propagate_state(
    psi0: &StateVector,
    params: &SystemParams,
    pulse: &ControlPulse,
) -> Result<StateVector> {
    let mut v = *psi0.amplitudes();
    for seg in &pulse.segments {
        let h = build_hamiltonian(params, pulse.drive_freq, seg);
        v = unitary(&h, seg.dt)? * v;
    }
    Ok(StateVector::from_vector_unchecked(v))
}

/// Outcome probabilities `(ρ₀₀, ρ₁₁, ρ₂₂)` of the z-basis measurement.
pub fn measure_probs(rho: &DensityMatrix) -> Result<[f64; 3]> {
    let d = [rho.entry(0, 0).re, rho.entry(1, 1).re, rho.entry(2, 2).re];
    clamp_probabilities(d)
}

/// Clamps a probability triple into `[0, 1]` and renormalizes, rejecting
/// violations larger than [`PROBABILITY_TOL`].
pub fn clamp_probabilities(d: [f64; 3]) -> Result<[f64; 3]> {
    if d.iter().any(|p| !p.is_finite() || *p < -PROBABILITY_TOL) {
        return Err(Error::InvalidState(format!("populations {d:?}")));
    }
    let sum: f64 = d.iter().sum();
    if (sum - 1.0).abs() > PROBABILITY_TOL {
        return Err(Error::InvalidState(format!("populations sum to {sum}")));
    }
    let clamped = d.map(|p| p.clamp(0.0, 1.0));
    let s: f64 = clamped.iter().sum();
    Ok(clamped.map(|p| p / s))
}

/// Outcome probabilities after playing `pulse` on the ground state.
pub fn ground_state_outcomes(params: &SystemParams, pulse: &ControlPulse) -> Result<[f64; 3]> {
    measure_probs(&propagate(&DensityMatrix::ground(), params, pulse)?)
}
