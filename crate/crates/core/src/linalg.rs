//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};

use crate::error::{MpcError, Result};

/// Extreme eigenvalues of the symmetric part of `m`.
pub fn sym_eig_range(m: &DMatrix<f64>) -> (f64, f64) {
    let sym = 0.5 * (m + m.transpose());
    let eig = SymmetricEigen::new(sym);
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = eig
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    (min, max)
}

pub fn max_sym_eig(m: &DMatrix<f64>) -> f64 {
    sym_eig_range(m).1
}

pub fn min_sym_eig(m: &DMatrix<f64>) -> f64 {
    sym_eig_range(m).0
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    0.5 * (m + m.transpose())
}

/// Lower Cholesky factor `L` with `m = L Lᵀ`.
pub fn cholesky_lower(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    Cholesky::new(symmetrize(m))
        .map(|c| c.l())
        .ok_or_else(|| MpcError::LinearAlgebra(format!("{what} is not positive definite")))
}

pub fn is_positive_definite(m: &DMatrix<f64>) -> bool {
    Cholesky::new(symmetrize(m)).is_some()
}

pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues()
        .iter()
        .map(|c| c.norm())
        .fold(0.0, f64::max)
}

/// Quadratic form `xᵀ M x`.
pub fn quad_form(m: &DMatrix<f64>, x: &DVector<f64>) -> f64 {
    x.dot(&(m * x))
}

/// Stabilising solution of the discrete algebraic Riccati equation
/// `P = AᵀPA − AᵀPB(R + BᵀPB)⁻¹BᵀPA + Q`, solved with the structure-preserving
/// doubling iteration. Returns `(P, K)` with the feedback convention `u = K x`.
pub fn solve_dare(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let n = a.nrows();
    let r_inv = r
        .clone()
        .try_inverse()
        .ok_or_else(|| MpcError::LinearAlgebra("R is singular".into()))?;
    let eye = DMatrix::<f64>::identity(n, n);
    let mut ak = a.clone();
    let mut gk = b * &r_inv * b.transpose();
    let mut hk = symmetrize(q);
    let mut converged = false;
    for _ in 0..100 {
        let w = (&eye + &gk * &hk)
            .try_inverse()
            .ok_or_else(|| MpcError::LinearAlgebra("doubling step singular".into()))?;
        let a_next = &ak * &w * &ak;
        let g_next = &gk + &ak * &w * &gk * ak.transpose();
        let h_next = &hk + ak.transpose() * &hk * &w * &ak;
        let h_next = symmetrize(&h_next);
        let delta = (&h_next - &hk).abs().max();
        let scale = h_next.abs().max();
        if !scale.is_finite() || scale > 1e14 {
            return Err(MpcError::SynthesisFailed(
                "Riccati iteration diverged (pair not stabilizable)".into(),
            ));
        }
        ak = a_next;
        gk = symmetrize(&g_next);
        hk = h_next;
        if delta <= 1e-13 * scale.max(1.0) {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(MpcError::SynthesisFailed(
            "Riccati doubling did not converge".into(),
        ));
    }
    let p = hk;
    let gain_den = r + b.transpose() * &p * b;
    let k = -gain_den
        .try_inverse()
        .ok_or_else(|| MpcError::LinearAlgebra("R + BᵀPB singular".into()))?
        * b.transpose()
        * &p
        * a;
    let closed = a + b * &k;
    if spectral_radius(&closed) >= 1.0 {
        return Err(MpcError::SynthesisFailed(format!(
            "Riccati gain is not stabilizing (spectral radius {:.4})",
            spectral_radius(&closed)
        )));
    }
    Ok((p, k))
}

/// Solves `AᵀPA − P + Q = 0` for a Schur-stable `A` by vectorisation.
pub fn solve_discrete_lyapunov(a: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if spectral_radius(a) >= 1.0 {
        return Err(MpcError::SynthesisFailed(
            "closed loop is not Schur stable".into(),
        ));
    }
    // vec(AᵀPA) = (Aᵀ ⊗ Aᵀ) vec(P) for column-major vec.
    let at = a.transpose();
    let kron = at.kronecker(&at);
    let lhs = DMatrix::<f64>::identity(n * n, n * n) - kron;
    let rhs = DVector::from_column_slice(q.as_slice());
    let sol = lhs
        .lu()
        .solve(&rhs)
        .ok_or_else(|| MpcError::LinearAlgebra("Lyapunov system singular".into()))?;
    Ok(symmetrize(&DMatrix::from_column_slice(n, n, sol.as_slice())))
}

/// Central finite-difference Jacobian with relative step `rel * max(1, |x_i|)`.
pub fn central_jacobian<F>(f: F, x: &DVector<f64>, rel: f64) -> Result<DMatrix<f64>>
where
    F: Fn(&DVector<f64>) -> Result<DVector<f64>>,
{
    let f0 = f(x)?;
    let mut jac = DMatrix::zeros(f0.len(), x.len());
    let mut xp = x.clone();
    for j in 0..x.len() {
        let h = rel * x[j].abs().max(1.0);
        let orig = xp[j];
        xp[j] = orig + h;
        let fp = f(&xp)?;
        xp[j] = orig - h;
        let fm = f(&xp)?;
        xp[j] = orig;
        jac.set_column(j, &((fp - fm) / (2.0 * h)));
    }
    Ok(jac)
}

/// Smallest singular value of a square matrix.
pub fn min_singular_value(m: &DMatrix<f64>) -> f64 {
    m.clone()
        .svd(false, false)
        .singular_values
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

pub fn to_dvec(v: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(v)
}

pub fn from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let nr = rows.len();
    let nc = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != nc) {
        return Err(MpcError::Config("ragged matrix rows".into()));
    }
    Ok(DMatrix::from_fn(nr, nc, |i, j| rows[i][j]))
}

pub fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}
