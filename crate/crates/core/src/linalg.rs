//! Small dense linear-algebra helpers shared by the filter and the certifier.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Relative tolerance used when deciding `S ⪯ 0` for a symmetric matrix `S`.
pub const SEMIDEFINITE_RTOL: f64 = 1e-9;

/// Returns `(S + Sᵀ) / 2`.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Eigenvalues of a symmetric matrix, ascending.
pub fn sym_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    let mut ev: Vec<f64> = symmetrize(m).symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(|a, b| a.total_cmp(b));
    ev
}

pub fn lambda_min(m: &DMatrix<f64>) -> f64 {
    sym_eigenvalues(m).first().copied().unwrap_or(f64::NAN)
}

pub fn lambda_max(m: &DMatrix<f64>) -> f64 {
    sym_eigenvalues(m).last().copied().unwrap_or(f64::NAN)
}

/// `(λ_min, λ_max)` of a symmetric matrix.
pub fn lambda_extrema(m: &DMatrix<f64>) -> (f64, f64) {
    let ev = sym_eigenvalues(m);
    (ev[0], ev[ev.len() - 1])
}

/// Induced 2-norm (largest singular value).
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0.0;
    }
    if m.iter().all(|v| *v == 0.0) {
        return 0.0;
    }
    m.singular_values().max()
}

/// Positive definiteness via a Cholesky attempt on the symmetric part.
pub fn is_spd(m: &DMatrix<f64>) -> bool {
    m.is_square() && m.iter().all(|v| v.is_finite()) && symmetrize(m).cholesky().is_some()
}

/// `λ_max(S) ≤ SEMIDEFINITE_RTOL · (1 + ‖S‖)`.
pub fn is_neg_semidefinite(s: &DMatrix<f64>) -> bool {
    lambda_max(s) <= semidefinite_tolerance(s)
}

pub fn semidefinite_tolerance(s: &DMatrix<f64>) -> f64 {
    SEMIDEFINITE_RTOL * (1.0 + spectral_norm(s))
}

/// Inverse of a symmetric positive-definite matrix through its Cholesky factor.
pub fn spd_inverse(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    if !m.is_square() {
        return Err(Error::Configuration(format!("{what} must be square")));
    }
    let chol = symmetrize(m)
        .cholesky()
        .ok_or_else(|| Error::Configuration(format!("{what} is not positive definite")))?;
    Ok(symmetrize(&chol.inverse()))
}

/// Checks a user-facing matrix is symmetric (to a loose relative tolerance) and
/// positive definite, returning its exactly symmetrized copy.
pub fn validate_spd(m: &DMatrix<f64>, dim: usize, what: &str) -> Result<DMatrix<f64>> {
    validate_symmetric(m, dim, what)?;
    if !is_spd(m) {
        return Err(Error::Configuration(format!("{what} is not positive definite")));
    }
    Ok(symmetrize(m))
}

pub fn validate_psd(m: &DMatrix<f64>, dim: usize, what: &str) -> Result<DMatrix<f64>> {
    validate_symmetric(m, dim, what)?;
    let lo = lambda_min(m);
    if lo < -SEMIDEFINITE_RTOL * (1.0 + spectral_norm(m)) {
        return Err(Error::Configuration(format!(
            "{what} is not positive semidefinite (λ_min = {lo:e})"
        )));
    }
    Ok(symmetrize(m))
}

fn validate_symmetric(m: &DMatrix<f64>, dim: usize, what: &str) -> Result<()> {
    if m.nrows() != dim || m.ncols() != dim {
        return Err(Error::Configuration(format!(
            "{what} must be {dim}x{dim}, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Configuration(format!("{what} has non-finite entries")));
    }
    let asym = (m - m.transpose()).norm();
    if asym > 1e-9 * (1.0 + m.norm()) {
        return Err(Error::Configuration(format!("{what} is not symmetric")));
    }
    Ok(())
}

/// Uniformly distributed unit vector in `R^n`.
pub fn random_unit<R: Rng + ?Sized>(rng: &mut R, n: usize) -> DVector<f64> {
    loop {
        let v = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let norm = v.norm();
        if norm > 1e-12 {
            return v / norm;
        }
    }
}

/// `±e_i` for every axis followed by `extra` random unit directions.
pub fn probe_directions<R: Rng + ?Sized>(rng: &mut R, n: usize, extra: usize) -> Vec<DVector<f64>> {
    let mut dirs = Vec::with_capacity(2 * n + extra);
    for i in 0..n {
        let mut e = DVector::zeros(n);
        e[i] = 1.0;
        dirs.push(e.clone());
        dirs.push(-e);
    }
    // In one dimension the axes already cover every unit direction.
    if n > 1 {
        dirs.extend((0..extra).map(|_| random_unit(rng, n)));
    }
    dirs
}

/// Row-major parse of a whitespace-separated matrix (one row per line).
pub fn parse_matrix(text: &str) -> Result<DMatrix<f64>> {
    let rows: Vec<Vec<f64>> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| {
            l.split_whitespace()
                .map(|tok| {
                    tok.parse::<f64>()
                        .map_err(|_| Error::Configuration(format!("bad matrix entry {tok:?}")))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    matrix_from_rows(&rows)
}

pub fn matrix_from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let nrows = rows.len();
    if nrows == 0 {
        return Err(Error::Configuration("empty matrix".into()));
    }
    let ncols = rows[0].len();
    if ncols == 0 || rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Configuration("ragged matrix rows".into()));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

pub fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

/// `C₁ᵀWC₁ − C₂ᵀWC₁ − C₁ᵀWC₂ + C₂ᵀWC₂`, which equals `(C₁ − C₂)ᵀW(C₁ − C₂)`.
pub fn expanded_difference_form(c1: &DMatrix<f64>, c2: &DMatrix<f64>, w: &DMatrix<f64>) -> DMatrix<f64> {
    let wc1 = w * c1;
    let wc2 = w * c2;
    c1.transpose() * &wc1 - c2.transpose() * &wc1 - c1.transpose() * &wc2 + c2.transpose() * &wc2
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn extrema_of_diagonal() {
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 1.0, 2.5]));
        assert_eq!(lambda_extrema(&m), (1.0, 4.0));
        assert_eq!(spectral_norm(&m), 4.0);
    }

    #[test]
    fn spd_checks() {
        let good = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(is_spd(&good));
        assert!(!is_spd(&bad));
        assert!(validate_spd(&bad, 2, "P0").is_err());
        assert!(validate_spd(&good, 3, "P0").is_err());
        let inv = spd_inverse(&good, "R").unwrap();
        assert!((&good * inv - DMatrix::identity(2, 2)).norm() < 1e-14);
    }

    #[test]
    fn psd_accepts_zero() {
        assert!(validate_psd(&DMatrix::zeros(2, 2), 2, "N").is_ok());
        assert!(validate_psd(&-DMatrix::identity(2, 2), 2, "N").is_err());
    }

    #[test]
    fn parse_whitespace_matrix() {
        let m = parse_matrix("1 0.5\n 0.5   2\n\n").unwrap();
        assert_eq!(m, DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 2.0]));
        assert!(parse_matrix("1 2\n3").is_err());
        assert!(parse_matrix("1 x").is_err());
    }

    #[test]
    fn directions_are_unit() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let dirs = probe_directions(&mut rng, 3, 10);
        assert_eq!(dirs.len(), 16);
        for d in dirs {
            assert!((d.norm() - 1.0).abs() < 1e-12);
        }
        assert_eq!(probe_directions(&mut rng, 1, 10).len(), 2);
    }
}
