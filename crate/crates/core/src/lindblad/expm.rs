//! Matrix exponential by scaling and squaring with a degree-13 Padé
//! approximant (Higham 2005), specialised to small fixed-size matrices.

use nalgebra::{ComplexField, SMatrix};

use crate::error::{Error, Result};

/// Padé(13) numerator coefficients b₀…b₁₃.
const PADE13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];

/// Largest 1-norm for which Padé(13) is accurate to unit roundoff.
const THETA13: f64 = 5.371920351148152;

fn one_norm<T, const N: usize>(a: &SMatrix<T, N, N>) -> f64
where
    T: ComplexField<RealField = f64>,
{
    a.column_iter()
        .map(|c| c.iter().map(|x| x.clone().abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Solves `a x = b` by Gaussian elimination with partial pivoting.
fn solve<T, const N: usize>(
    mut a: SMatrix<T, N, N>,
    mut b: SMatrix<T, N, N>,
) -> Option<SMatrix<T, N, N>>
where
    T: ComplexField<RealField = f64> + Copy,
{
    for col in 0..N {
        let (pivot_row, pivot_abs) = (col..N)
            .map(|r| (r, a[(r, col)].abs()))
            .fold((col, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
        if !(pivot_abs > 0.0) || !pivot_abs.is_finite() {
            return None;
        }
        if pivot_row != col {
            a.swap_rows(col, pivot_row);
            b.swap_rows(col, pivot_row);
        }
        let inv = T::one() / a[(col, col)];
        for row in col + 1..N {
            let f = a[(row, col)] * inv;
            if f == T::zero() {
                continue;
            }
            for k in col..N {
                let v = a[(col, k)];
                a[(row, k)] -= f * v;
            }
            for k in 0..N {
                let v = b[(col, k)];
                b[(row, k)] -= f * v;
            }
        }
    }
    for col in (0..N).rev() {
        let pivot = a[(col, col)];
        for k in 0..N {
            let mut acc = b[(col, k)];
            for j in col + 1..N {
                acc -= a[(col, j)] * b[(j, k)];
            }
            b[(col, k)] = acc / pivot;
        }
    }
    Some(b)
}

/// `exp(a)` for a square fixed-size matrix.
pub fn expm<T, const N: usize>(a: &SMatrix<T, N, N>) -> Result<SMatrix<T, N, N>>
where
    T: ComplexField<RealField = f64> + Copy,
{
    let norm = one_norm(a);
    if !norm.is_finite() {
        return Err(Error::MatrixExpFailure(format!("input 1-norm is {norm}")));
    }
    let squarings = if norm > THETA13 {
        (norm / THETA13).log2().ceil().max(0.0) as i32
    } else {
        0
    };
    let scale = T::from_real(0.5f64.powi(squarings));
    let a = a * scale;

    let b = |k: usize| T::from_real(PADE13[k]);
    let ident = SMatrix::<T, N, N>::identity();
    let a2 = a * a;
    let a4 = a2 * a2;
    let a6 = a4 * a2;

    let u_inner = a6 * (a6 * b(13) + a4 * b(11) + a2 * b(9))
        + a6 * b(7)
        + a4 * b(5)
        + a2 * b(3)
        + ident * b(1);
    let u = a * u_inner;
    let v = a6 * (a6 * b(12) + a4 * b(10) + a2 * b(8))
        + a6 * b(6)
        + a4 * b(4)
        + a2 * b(2)
        + ident * b(0);

    let p = v + u;
    let q = v - u;
    let mut r = solve(q, p)
        .ok_or_else(|| Error::MatrixExpFailure("singular Padé denominator".into()))?;
    for _ in 0..squarings {
        r = r * r;
    }
    if r.iter().any(|x| !(*x).abs().is_finite()) {
        return Err(Error::MatrixExpFailure("non-finite result".into()));
    }
    Ok(r)
}
