//! Dense linear-algebra helpers shared by the spectral modules.
//!
//! Matrices are `nalgebra` types at every public boundary; eigen- and
//! singular value decompositions are delegated to `faer`.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Error, Result};

pub type CMat = DMatrix<Complex64>;
pub type RMat = DMatrix<f64>;
pub type CVec = DVector<Complex64>;

pub const I: Complex64 = Complex64::new(0.0, 1.0);

pub fn c(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}

/// Eigenvalues and right eigenvectors (columns) of a dense complex matrix.
#[derive(Debug, Clone)]
pub struct Eigen {
    pub values: Vec<Complex64>,
    pub vectors: CMat,
}

fn to_faer(m: &CMat) -> faer::Mat<Complex64> {
    faer::Mat::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

fn to_faer_real(m: &RMat) -> faer::Mat<f64> {
    faer::Mat::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

/// Singular value decomposition `a = U diag(s) V^*` with `s` non-increasing.
#[derive(Debug, Clone)]
pub struct Svd<T: nalgebra::Scalar> {
    pub u: DMatrix<T>,
    pub s: Vec<f64>,
    pub v: DMatrix<T>,
}

fn svd_error(e: faer::linalg::svd::SvdError) -> Error {
    Error::Linalg(format!("singular value decomposition failed: {e:?}"))
}

/// Thin (`full = false`) or full SVD of a complex matrix.
pub fn svd(a: &CMat, full: bool) -> Result<Svd<Complex64>> {
    let f = to_faer(a);
    let d = if full { f.svd() } else { f.thin_svd() }.map_err(svd_error)?;
    let (u, v, s) = (d.U(), d.V(), d.S().column_vector());
    Ok(Svd {
        u: CMat::from_fn(u.nrows(), u.ncols(), |i, j| u[(i, j)]),
        s: (0..s.nrows()).map(|k| s[k].re).collect(),
        v: CMat::from_fn(v.nrows(), v.ncols(), |i, j| v[(i, j)]),
    })
}

/// Thin (`full = false`) or full SVD of a real matrix.
pub fn svd_real(a: &RMat, full: bool) -> Result<Svd<f64>> {
    let f = to_faer_real(a);
    let d = if full { f.svd() } else { f.thin_svd() }.map_err(svd_error)?;
    let (u, v, s) = (d.U(), d.V(), d.S().column_vector());
    Ok(Svd {
        u: RMat::from_fn(u.nrows(), u.ncols(), |i, j| u[(i, j)]),
        s: (0..s.nrows()).map(|k| s[k]).collect(),
        v: RMat::from_fn(v.nrows(), v.ncols(), |i, j| v[(i, j)]),
    })
}

pub fn eigen(m: &CMat) -> Result<Eigen> {
    if m.nrows() != m.ncols() {
        return Err(Error::InvalidInput("eigen: matrix must be square".into()));
    }
    let evd = to_faer(m)
        .eigen()
        .map_err(|e| Error::Linalg(format!("eigendecomposition failed: {e:?}")))?;
    let s = evd.S();
    let u = evd.U();
    let n = m.nrows();
    let values = (0..n).map(|k| s[k]).collect();
    let vectors = CMat::from_fn(n, n, |i, j| u[(i, j)]);
    Ok(Eigen { values, vectors })
}

pub fn eigenvalues(m: &CMat) -> Result<Vec<Complex64>> {
    to_faer(m)
        .eigenvalues()
        .map_err(|e| Error::Linalg(format!("eigenvalue computation failed: {e:?}")))
}

pub fn real_eigenvalues(m: &RMat) -> Result<Vec<Complex64>> {
    eigenvalues(&m.map(|x| c(x, 0.0)))
}

/// Determinant split as `unit * exp(log_abs)` so that it cannot overflow.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaledDet {
    pub unit: Complex64,
    pub log_abs: f64,
}

impl ScaledDet {
    pub fn value(&self) -> Complex64 {
        if self.log_abs == f64::NEG_INFINITY {
            return Complex64::new(0.0, 0.0);
        }
        self.unit * self.log_abs.exp()
    }
}

pub fn scaled_det(m: &CMat) -> ScaledDet {
    let n = m.nrows();
    let mut a = m.clone();
    let mut unit = Complex64::new(1.0, 0.0);
    let mut log_abs = 0.0;
    for k in 0..n {
        let mut piv = k;
        let mut best = a[(k, k)].norm();
        for i in k + 1..n {
            let v = a[(i, k)].norm();
            if v > best {
                best = v;
                piv = i;
            }
        }
        if best == 0.0 {
            return ScaledDet { unit: Complex64::new(0.0, 0.0), log_abs: f64::NEG_INFINITY };
        }
        if piv != k {
            a.swap_rows(k, piv);
            unit = -unit;
        }
        let p = a[(k, k)];
        unit *= p / best;
        log_abs += best.ln();
        for i in k + 1..n {
            let f = a[(i, k)] / p;
            if f == Complex64::new(0.0, 0.0) {
                continue;
            }
            for j in k + 1..n {
                let t = a[(k, j)];
                a[(i, j)] -= f * t;
            }
        }
    }
    ScaledDet { unit, log_abs }
}

pub fn det(m: &CMat) -> Complex64 {
    scaled_det(m).value()
}

pub fn solve(a: &CMat, b: &CMat) -> Result<CMat> {
    a.clone()
        .lu()
        .solve(b)
        .ok_or_else(|| Error::Linalg("singular matrix in solve".into()))
}

pub fn solve_real(a: &RMat, b: &RMat) -> Result<RMat> {
    a.clone()
        .lu()
        .solve(b)
        .ok_or_else(|| Error::Linalg("singular matrix in solve".into()))
}

pub fn inverse(a: &CMat) -> Result<CMat> {
    solve(a, &CMat::identity(a.nrows(), a.ncols()))
}

/// Singular values in non-increasing order; empty if the decomposition fails.
pub fn singular_values(a: &CMat) -> Vec<f64> {
    svd(a, false).map(|d| d.s).unwrap_or_default()
}

pub fn condition(a: &CMat) -> f64 {
    let s = singular_values(a);
    match (s.first(), s.last()) {
        (Some(&hi), Some(&lo)) if lo > 0.0 => hi / lo,
        _ => f64::INFINITY,
    }
}

pub fn real_condition(a: &RMat) -> f64 {
    condition(&a.map(|x| c(x, 0.0)))
}

/// Full right-singular basis of a real matrix, ordered by decreasing singular value.
/// Rows beyond `a.nrows()` correspond to exact zero singular values.
pub fn right_singular_basis(a: &RMat) -> Result<(Vec<f64>, RMat)> {
    let cols = a.ncols();
    let d = svd_real(a, true)?;
    let mut values = d.s;
    values.resize(cols, 0.0);
    Ok((values, d.v))
}

/// Minimum-norm least-squares solution of `a x = b`, discarding singular
/// values below `rcond * s_max`.
pub fn min_norm_solve(a: &RMat, b: &DVector<f64>, rcond: f64) -> Result<DVector<f64>> {
    let d = svd_real(a, false)?;
    let smax = d.s.first().copied().unwrap_or(0.0);
    let mut x = DVector::zeros(a.ncols());
    for (k, &s) in d.s.iter().enumerate() {
        if s > rcond * smax && s > 0.0 {
            let coef = d.u.column(k).dot(b) / s;
            x += d.v.column(k) * coef;
        }
    }
    Ok(x)
}

/// Orthonormal basis of the `keep` leading left-singular directions of the
/// given complex columns.
pub fn orthonormal_span(a: &CMat, keep: usize) -> Result<CMat> {
    let d = svd(a, false)?;
    Ok(d.u.columns(0, keep).into_owned())
}

/// Least-squares coefficients of `target` in the column basis `basis`.
pub fn least_squares(basis: &CMat, target: &CMat) -> Result<CMat> {
    let gram = basis.adjoint() * basis;
    solve(&gram, &(basis.adjoint() * target))
}

pub fn max_abs(m: &CMat) -> f64 {
    m.iter().fold(0.0f64, |acc, z| acc.max(z.norm()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scaled_det_matches_nalgebra() {
        let m = CMat::from_fn(5, 5, |i, j| c((i * 3 + j) as f64 % 7.0 - 2.5, (i + 2 * j) as f64 % 3.0));
        let d = scaled_det(&m).value();
        let reference = m.clone().determinant();
        assert!((d - reference).norm() < 1e-10 * reference.norm());
    }

    #[test]
    fn eigen_residual_is_small() {
        let m = CMat::from_fn(20, 20, |i, j| c(((i * 7 + j * 13) % 17) as f64 / 17.0, ((i + j) % 5) as f64 / 5.0));
        let e = eigen(&m).unwrap();
        for (k, lam) in e.values.iter().enumerate() {
            let v = e.vectors.column(k);
            let r = &m * v - v * *lam;
            assert!(r.norm() < 1e-12 * (1.0 + lam.norm()));
        }
    }

    #[test]
    fn null_basis_of_wide_matrix() {
        let a = RMat::from_row_slice(2, 4, &[1.0, 2.0, 0.0, 1.0, 0.0, 1.0, 1.0, -1.0]);
        let (s, v) = right_singular_basis(&a).unwrap();
        assert!(s[2].abs() < 1e-14 && s[3].abs() < 1e-14);
        for k in 2..4 {
            assert!((&a * v.column(k)).norm() < 1e-13);
        }
    }

    #[test]
    fn singular_det_is_zero() {
        let m = CMat::from_fn(3, 3, |i, _| c(i as f64, 0.0));
        assert_eq!(det(&m), c(0.0, 0.0));
    }
}
