//! First-order averaged (Whitham-type) system `d_t M + sum_j d_j F^j = 0`,
//! `d_t (Omega N) + grad(S Omega) = 0`, linearised about a wave.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{c, det, real_condition, real_eigenvalues, solve_real, CMat, RMat, I};
use crate::profile::ManifoldChart;

#[derive(Debug, Clone, PartialEq)]
pub struct HomogenizedSystem {
    pub dim: usize,
    pub components: usize,
    /// `d(M, Omega N)` in chart coordinates.
    pub jacobian_mn: RMat,
    /// `d(F^j, S Omega e_j)` in chart coordinates, one per direction.
    pub jacobian_f: Vec<RMat>,
}

/// Characteristic speeds in one direction.
#[derive(Debug, Clone, PartialEq)]
pub struct Speeds {
    pub direction: Vec<f64>,
    /// Speeds of the system restricted to the curl-free constraint subspace.
    pub physical: Vec<Complex64>,
    /// The remaining `d - 1` eigenvalues, which vanish identically.
    pub removed: Vec<Complex64>,
    pub spectral_radius: f64,
    pub hyperbolic: bool,
    pub distinct: bool,
}

/// `Delta(xi, .)` as a polynomial in `lambda` after removing `lambda^(d-1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaPolynomial {
    /// Ascending coefficients.
    pub coeffs: Vec<Complex64>,
    /// Largest relative size of the discarded low-order coefficients.
    pub residual: f64,
}

impl DeltaPolynomial {
    pub fn eval(&self, lambda: Complex64) -> Complex64 {
        self.coeffs.iter().rev().fold(c(0.0, 0.0), |acc, &a| acc * lambda + a)
    }

    /// Roots via the companion matrix.
    pub fn roots(&self) -> Result<Vec<Complex64>> {
        let deg = self.coeffs.len() - 1;
        let lead = self.coeffs[deg];
        if lead.norm() == 0.0 {
            return Err(Error::Linalg("leading coefficient vanishes".into()));
        }
        let mut comp = CMat::zeros(deg, deg);
        for i in 1..deg {
            comp[(i, i - 1)] = c(1.0, 0.0);
        }
        for i in 0..deg {
            comp[(i, deg - 1)] = -self.coeffs[i] / lead;
        }
        crate::linalg::eigenvalues(&comp)
    }
}

impl HomogenizedSystem {
    pub fn from_jacobians(components: usize, jacobian_mn: RMat, jacobian_f: Vec<RMat>) -> Result<Self> {
        let dim = jacobian_f.len();
        let size = components + dim;
        let ok = |m: &RMat| m.nrows() == size && m.ncols() == size;
        if dim == 0 || !ok(&jacobian_mn) || !jacobian_f.iter().all(ok) {
            return Err(Error::InvalidInput(format!("Jacobians must be {size} x {size}")));
        }
        let cond = real_condition(&jacobian_mn);
        if !cond.is_finite() || cond > 1e12 {
            return Err(Error::Nondegeneracy(format!("d(M, Omega N) has condition {cond:.3e}")));
        }
        Ok(Self { dim, components, jacobian_mn, jacobian_f })
    }

    pub fn from_chart(chart: &ManifoldChart) -> Result<Self> {
        let jmn = chart
            .jacobian_mn
            .clone()
            .ok_or_else(|| Error::InvalidInput("chart Jacobians have not been computed".into()))?;
        Self::from_jacobians(chart.base.components(), jmn, chart.jacobian_f.clone())
    }

    fn size(&self) -> usize {
        self.components + self.dim
    }

    fn flux_combination(&self, xi: &[f64]) -> RMat {
        let mut out = RMat::zeros(self.size(), self.size());
        for (j, &x) in xi.iter().enumerate() {
            out += &self.jacobian_f[j] * x;
        }
        out
    }

    /// `dM^{-1} sum_j xi_j dF^j`.
    pub fn symbol(&self, xi: &[f64]) -> Result<RMat> {
        self.check_xi(xi)?;
        solve_real(&self.jacobian_mn, &self.flux_combination(xi))
    }

    /// `sum_j xi_j dF^j dM^{-1}`, similar to [`Self::symbol`].
    pub fn flux_symbol(&self, xi: &[f64]) -> Result<RMat> {
        self.check_xi(xi)?;
        let t = solve_real(&self.jacobian_mn.transpose(), &self.flux_combination(xi).transpose())?;
        Ok(t.transpose())
    }

    fn check_xi(&self, xi: &[f64]) -> Result<()> {
        if xi.len() != self.dim {
            return Err(Error::InvalidInput(format!("xi must have {} entries", self.dim)));
        }
        Ok(())
    }

    /// `det(lambda dM + i sum_j xi_j dF^j)`.
    pub fn delta_hat(&self, xi: &[f64], lambda: Complex64) -> Result<Complex64> {
        self.check_xi(xi)?;
        let f = self.flux_combination(xi);
        let m = CMat::from_fn(self.size(), self.size(), |r, k| lambda * self.jacobian_mn[(r, k)] + I * f[(r, k)]);
        Ok(det(&m))
    }

    /// Coefficients of `Delta(xi, .) = lambda^(1-d) delta_hat(xi, .)`.
    pub fn delta_polynomial(&self, xi: &[f64]) -> Result<DeltaPolynomial> {
        let deg = self.size();
        let nodes = deg + 1;
        let radius = self.flux_combination(xi).norm() / self.jacobian_mn.norm() + 1.0;
        let values: Vec<Complex64> = (0..nodes)
            .map(|k| {
                let th = 2.0 * PI * k as f64 / nodes as f64;
                self.delta_hat(xi, Complex64::from_polar(radius, th))
            })
            .collect::<Result<_>>()?;
        let mut coeffs: Vec<Complex64> = (0..nodes)
            .map(|j| {
                let mut acc = c(0.0, 0.0);
                for (k, v) in values.iter().enumerate() {
                    let th = -2.0 * PI * (j * k) as f64 / nodes as f64;
                    acc += v * Complex64::from_polar(1.0, th);
                }
                acc / (nodes as f64 * radius.powi(j as i32))
            })
            .collect();
        let scale = coeffs
            .iter()
            .enumerate()
            .fold(0.0f64, |a, (j, z)| a.max(z.norm() * radius.powi(j as i32)));
        let drop = self.dim - 1;
        let residual = coeffs[..drop]
            .iter()
            .enumerate()
            .fold(0.0f64, |a, (j, z)| a.max(z.norm() * radius.powi(j as i32)))
            / scale.max(f64::MIN_POSITIVE);
        if residual > 1e-8 {
            return Err(Error::Deflation { residual });
        }
        coeffs.drain(..drop);
        Ok(DeltaPolynomial { coeffs, residual })
    }

    pub fn delta(&self, xi: &[f64], lambda: Complex64) -> Result<Complex64> {
        Ok(self.delta_polynomial(xi)?.eval(lambda))
    }

    /// Speeds `a` with `lambda = -i a |xi|` in direction `direction`.
    ///
    /// The `d - 1` spurious zero speeds are identified structurally: the
    /// subspace where the `Omega N` variation is parallel to the direction is
    /// invariant, and the physical speeds are the spectrum there.
    pub fn speeds(&self, direction: &[f64], zero_tol: f64, hyp_tol: f64) -> Result<Speeds> {
        let norm = direction.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::InvalidInput("direction must be nonzero".into()));
        }
        let dir: Vec<f64> = direction.iter().map(|x| x / norm).collect();
        let a = self.flux_symbol(&dir)?;
        let n = self.components;
        let size = self.size();
        let mut basis = RMat::zeros(size, n + 1);
        for i in 0..n {
            basis[(i, i)] = 1.0;
        }
        for (j, &v) in dir.iter().enumerate() {
            basis[(n + j, n)] = v;
        }
        let image = &a * &basis;
        let leak = (&image - &basis * (basis.transpose() * &image)).norm();
        let all = real_eigenvalues(&a)?;
        let radius = all.iter().fold(0.0f64, |m, z| m.max(z.norm())).max(f64::MIN_POSITIVE);
        if leak > 1e-8 * a.norm().max(1.0) {
            return Err(Error::Structural(format!("constraint subspace is not invariant (leak {leak:.3e})")));
        }
        let mut physical = real_eigenvalues(&(basis.transpose() * image))?;
        physical.sort_by(|x, y| x.re.total_cmp(&y.re).then(x.im.total_cmp(&y.im)));
        let mut remaining = all.clone();
        for p in &physical {
            if let Some((idx, _)) = remaining
                .iter()
                .enumerate()
                .min_by(|(_, x), (_, y)| (*x - p).norm().total_cmp(&(*y - p).norm()))
            {
                remaining.remove(idx);
            }
        }
        let zero = zero_tol * radius;
        if let Some(bad) = remaining.iter().find(|z| z.norm() > zero) {
            return Err(Error::Structural(format!("removed eigenvalue {bad} is not zero")));
        }
        let hyperbolic = physical.iter().all(|z| z.im.abs() <= hyp_tol * radius);
        let distinct = hyperbolic
            && physical.windows(2).all(|w| (w[1].re - w[0].re).abs() > hyp_tol * radius);
        Ok(Speeds { direction: dir, physical, removed: remaining, spectral_radius: radius, hyperbolic, distinct })
    }
}

/// Outcome of the weak hyperbolicity check over sampled directions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeakHyperbolicity {
    pub pass: bool,
    /// Largest `|Im a_j|` relative to the spectral radius.
    pub worst_imag: f64,
    pub worst_direction: Vec<f64>,
    pub directions: usize,
}

impl HomogenizedSystem {
    /// Realness of the physical speeds over all `directions`.
    pub fn check_weak_hyperbolicity(&self, directions: &[Vec<f64>], hyp_tol: f64) -> Result<WeakHyperbolicity> {
        let mut worst_imag = 0.0f64;
        let mut worst_direction = directions.first().cloned().unwrap_or_default();
        for dir in directions {
            let sp = self.speeds(dir, 1e-8, hyp_tol)?;
            let imag = sp.physical.iter().map(|z| z.im.abs()).fold(0.0, f64::max) / sp.spectral_radius;
            if imag > worst_imag {
                worst_imag = imag;
                worst_direction = sp.direction.clone();
            }
        }
        Ok(WeakHyperbolicity { pass: worst_imag < hyp_tol, worst_imag, worst_direction, directions: directions.len() })
    }

    /// A synthetic `n = 2` system in `d` dimensions: the `Omega N` rows of
    /// every `dF^j` are `e_j g^T` for a fixed gradient row `g`, which is the
    /// structure that makes the `d - 1` curl modes vanish identically.
    pub fn example(d: usize) -> Result<Self> {
        let n = 2;
        let size = n + d;
        let jmn = RMat::from_fn(size, size, |i, j| if i == j { 1.0 + 0.1 * i as f64 } else { 0.05 * (i + 2 * j) as f64 / size as f64 });
        let g: Vec<f64> = (0..size).map(|k| 0.2 + 0.1 * k as f64).collect();
        let jf = (0..d)
            .map(|j| {
                let mut m = RMat::from_fn(size, size, |r, k| {
                    if r < n {
                        0.4 * (1.3 * (r + 1) as f64 + 0.7 * ((k + 1) * (j + 1)) as f64 + 0.11 * (r * k) as f64).sin()
                    } else {
                        0.0
                    }
                });
                for k in 0..size {
                    m[(n + j, k)] = g[k];
                }
                m
            })
            .collect();
        Self::from_jacobians(n, jmn, jf)
    }
}

/// Unit directions sampling the sphere in `R^d` (both signs in one dimension).
pub fn sphere_directions(d: usize, per_angle: usize) -> Vec<Vec<f64>> {
    match d {
        1 => vec![vec![1.0], vec![-1.0]],
        2 => (0..per_angle)
            .map(|k| {
                let t = 2.0 * PI * (k as f64 + 0.25) / per_angle as f64;
                vec![t.cos(), t.sin()]
            })
            .collect(),
        _ => {
            let mut out = Vec::new();
            for a in 0..per_angle {
                let th = PI * (a as f64 + 0.5) / per_angle as f64;
                for b in 0..per_angle {
                    let ph = 2.0 * PI * (b as f64 + 0.25) / per_angle as f64;
                    let mut v = vec![th.cos(), th.sin() * ph.cos(), th.sin() * ph.sin()];
                    v.resize(d, 0.0);
                    out.push(v);
                }
            }
            out
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(d: usize) -> HomogenizedSystem {
        HomogenizedSystem::example(d).unwrap()
    }

    #[test]
    fn example_has_two_vanishing_speeds_in_three_dimensions() {
        let h = toy(3);
        for dir in sphere_directions(3, 6) {
            let sym = h.flux_symbol(&dir).unwrap();
            let zero = real_eigenvalues(&sym).unwrap().iter().filter(|z| z.norm() < 1e-9).count();
            assert_eq!(zero, 2, "{dir:?}");
        }
    }

    #[test]
    fn symmetric_symbol_is_hyperbolic_and_rotation_is_not() {
        let sym = RMat::from_row_slice(3, 3, &[1.0, 0.5, 0.0, 0.5, -1.0, 0.2, 0.0, 0.2, 0.3]);
        let h = HomogenizedSystem::from_jacobians(2, RMat::identity(3, 3), vec![sym]).unwrap();
        let r = h.check_weak_hyperbolicity(&sphere_directions(1, 1), 1e-8).unwrap();
        assert!(r.pass && r.worst_imag < 1e-14);
        let rot = RMat::from_row_slice(3, 3, &[0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.5]);
        let h = HomogenizedSystem::from_jacobians(2, RMat::identity(3, 3), vec![rot]).unwrap();
        let r = h.check_weak_hyperbolicity(&sphere_directions(1, 1), 1e-8).unwrap();
        assert!(!r.pass && (r.worst_imag - 1.0).abs() < 1e-12);
    }

    #[test]
    fn deflated_roots_are_minus_i_times_physical_speeds() {
        let h = toy(3);
        let xi = [0.6, 0.0, 0.8];
        let poly = h.delta_polynomial(&xi).unwrap();
        assert!(poly.residual < 1e-10);
        assert_eq!(poly.coeffs.len(), h.components + 2);
        let sp = h.speeds(&xi, 1e-9, 1e-7).unwrap();
        let mut roots = poly.roots().unwrap();
        for a in &sp.physical {
            let target = -I * a;
            let (idx, _) = roots
                .iter()
                .enumerate()
                .min_by(|(_, x), (_, y)| (*x - target).norm().total_cmp(&(*y - target).norm()))
                .unwrap();
            assert!((roots[idx] - target).norm() < 1e-8 * (1.0 + target.norm()));
            roots.remove(idx);
        }
        assert_eq!(sp.removed.len(), 2);
    }

    #[test]
    fn delta_is_homogeneous() {
        let h = toy(2);
        let (xi, lam) = ([0.3, -0.7], c(0.2, 0.5));
        let t = 2.5f64;
        let a = h.delta(&[t * xi[0], t * xi[1]], lam * t).unwrap();
        let b = h.delta(&xi, lam).unwrap() * t.powi(3);
        assert!((a - b).norm() < 1e-10 * b.norm());
    }

    #[test]
    fn symbols_are_similar() {
        let h = toy(2);
        let mut e1 = real_eigenvalues(&h.symbol(&[0.2, 0.9]).unwrap()).unwrap();
        let mut e2 = real_eigenvalues(&h.flux_symbol(&[0.2, 0.9]).unwrap()).unwrap();
        let key = |z: &Complex64| (z.re * 1e6).round() as i64 * 1_000_000 + (z.im * 1e6).round() as i64;
        e1.sort_by_key(key);
        e2.sort_by_key(key);
        for (a, b) in e1.iter().zip(&e2) {
            assert!((a - b).norm() < 1e-10);
        }
    }
}
