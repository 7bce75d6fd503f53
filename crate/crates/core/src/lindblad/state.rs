use nalgebra::{SMatrix, SVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type CMat3 = SMatrix<Complex64, 3, 3>;
pub type CVec3 = SVector<Complex64, 3>;
pub type CVec9 = SVector<Complex64, 9>;
pub type RVec9 = SVector<f64, 9>;

pub const HERMITIAN_TOL: f64 = 1e-12;
pub const TRACE_TOL: f64 = 1e-10;
pub const PSD_TOL: f64 = 1e-10;
pub const NORM_TOL: f64 = 1e-12;

/// A 3×3 density matrix.
///
/// The real coordinates used by the propagator are
/// `(ρ₀₀, ρ₁₁, ρ₂₂, Re ρ₁₀, Im ρ₁₀, Re ρ₂₀, Im ρ₂₀, Re ρ₂₁, Im ρ₂₁)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DensityMatrix(CMat3);

impl DensityMatrix {
    /// Validates Hermiticity, unit trace and positivity.
    pub fn new(m: CMat3) -> Result<Self> {
        let rho = Self(m);
        rho.check()?;
        Ok(rho)
    }

    pub fn from_matrix_unchecked(m: CMat3) -> Self {
        Self(m)
    }

    /// |k⟩⟨k|.
    pub fn basis(k: usize) -> Self {
        let mut m = CMat3::zeros();
        m[(k, k)] = Complex64::new(1.0, 0.0);
        Self(m)
    }

    pub fn ground() -> Self {
        Self::basis(0)
    }

    pub fn diagonal(p: [f64; 3]) -> Result<Self> {
        let m = CMat3::from_diagonal(&CVec3::new(p[0].into(), p[1].into(), p[2].into()));
        Self::new(m)
    }

    pub fn pure(psi: &StateVector) -> Self {
        let v = psi.amplitudes();
        Self(v * v.adjoint())
    }

    pub fn matrix(&self) -> &CMat3 {
        &self.0
    }

    /// ρ_{ij}.
    pub fn entry(&self, i: usize, j: usize) -> Complex64 {
        self.0[(i, j)]
    }

    pub fn trace(&self) -> Complex64 {
        self.0.trace()
    }

    pub fn hermiticity_error(&self) -> f64 {
        (self.0 - self.0.adjoint()).camax()
    }

    pub fn min_eigenvalue(&self) -> f64 {
        let herm = (self.0 + self.0.adjoint()) * Complex64::new(0.5, 0.0);
        herm.symmetric_eigenvalues().min()
    }

    pub fn check(&self) -> Result<()> {
        let h = self.hermiticity_error();
        if !(h <= HERMITIAN_TOL) {
            return Err(Error::InvalidState(format!("not Hermitian (max |ρ - ρ†| = {h:e})")));
        }
        let tr = self.trace();
        if !((tr.re - 1.0).abs() <= TRACE_TOL && tr.im.abs() <= TRACE_TOL) {
            return Err(Error::InvalidState(format!("trace is {tr}")));
        }
        let ev = self.min_eigenvalue();
        if !(ev >= -PSD_TOL) {
            return Err(Error::InvalidState(format!("negative eigenvalue {ev:e}")));
        }
        Ok(())
    }

    /// Column-stacked vec(ρ): entry `i + 3j` is ρ_{ij}.
    pub fn vectorize(&self) -> CVec9 {
        CVec9::from_iterator(self.0.iter().copied())
    }

    pub fn from_vectorized(v: &CVec9) -> Self {
        Self(CMat3::from_iterator(v.iter().copied()))
    }

    pub fn to_real(&self) -> RVec9 {
        let m = &self.0;
        RVec9::from([
            m[(0, 0)].re,
            m[(1, 1)].re,
            m[(2, 2)].re,
            m[(1, 0)].re,
            m[(1, 0)].im,
            m[(2, 0)].re,
            m[(2, 0)].im,
            m[(2, 1)].re,
            m[(2, 1)].im,
        ])
    }

    pub fn from_real(x: &RVec9) -> Self {
        let c = Complex64::new;
        let r10 = c(x[3], x[4]);
        let r20 = c(x[5], x[6]);
        let r21 = c(x[7], x[8]);
        Self(CMat3::new(
            c(x[0], 0.0),
            r10.conj(),
            r20.conj(),
            r10,
            c(x[1], 0.0),
            r21.conj(),
            r20,
            r21,
            c(x[2], 0.0),
        ))
    }

    /// U ρ U†.
    pub fn conjugate(&self, u: &CMat3) -> Self {
        Self(u * self.0 * u.adjoint())
    }
}

/// A normalized qutrit state vector.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StateVector(CVec3);

impl StateVector {
    pub fn new(v: CVec3) -> Result<Self> {
        let n = v.norm();
        if !((n - 1.0).abs() <= NORM_TOL) {
            return Err(Error::InvalidState(format!("state norm is {n}")));
        }
        Ok(Self(v))
    }

    /// Normalizes `v` first.
    pub fn normalized(v: CVec3) -> Result<Self> {
        let n = v.norm();
        if !(n > 0.0 && n.is_finite()) {
            return Err(Error::InvalidState("zero or non-finite vector".into()));
        }
        Ok(Self(v / Complex64::new(n, 0.0)))
    }

    pub fn from_vector_unchecked(v: CVec3) -> Self {
        Self(v)
    }

    pub fn basis(k: usize) -> Self {
        let mut v = CVec3::zeros();
        v[k] = Complex64::new(1.0, 0.0);
        Self(v)
    }

    pub fn amplitudes(&self) -> &CVec3 {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.norm()
    }

    pub fn populations(&self) -> [f64; 3] {
        [self.0[0].norm_sqr(), self.0[1].norm_sqr(), self.0[2].norm_sqr()]
    }
}

/// Raw complex entries for serialization: `[[re, im]; 9]` in row-major order.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct DensityMatrixRecord(pub Vec<[f64; 2]>);

impl From<&DensityMatrix> for DensityMatrixRecord {
    fn from(rho: &DensityMatrix) -> Self {
        let m = rho.matrix();
        let mut out = Vec::with_capacity(9);
        for i in 0..3 {
            for j in 0..3 {
                out.push([m[(i, j)].re, m[(i, j)].im]);
            }
        }
        Self(out)
    }
}
