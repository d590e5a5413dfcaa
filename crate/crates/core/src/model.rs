//! Viscous conservation laws `u_t + sum_j f^j(u)_{x_j} = sum_{jk} (B^{jk}(u) u_{x_k})_{x_j}`.

use std::fmt;
use std::sync::Arc;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{real_eigenvalues, RMat};

/// Pointwise flux and viscosity functions of a model.
///
/// Derivatives are optional; when absent they are approximated by fourth-order
/// central differences.
pub trait FluxFunctions: Send + Sync {
    fn flux(&self, j: usize, u: &[f64], out: &mut [f64]);
    /// Writes the `n x n` matrix `B^{jk}(u)`.
    fn viscosity(&self, j: usize, k: usize, u: &[f64], out: &mut RMat);
    fn flux_jacobian(&self, _j: usize, _u: &[f64]) -> Option<RMat> {
        None
    }
    /// `d B^{jk} / d u_c`.
    fn viscosity_gradient(&self, _j: usize, _k: usize, _c: usize, _u: &[f64]) -> Option<RMat> {
        None
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct H1Report {
    pub theta_min: f64,
    pub pass: bool,
    pub worst_state: Vec<f64>,
    pub worst_direction: Vec<f64>,
}

#[derive(Clone)]
pub struct ModelSpec {
    pub id: String,
    pub dim: usize,
    pub components: usize,
    /// Admissible box for the state, one interval per component.
    pub domain: Vec<(f64, f64)>,
    pub smoothness: u32,
    funcs: Arc<dyn FluxFunctions>,
}

impl fmt::Debug for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ModelSpec")
            .field("id", &self.id)
            .field("dim", &self.dim)
            .field("components", &self.components)
            .finish()
    }
}

const FD_STEP: f64 = 1e-5;

fn fd4<F: Fn(&[f64]) -> DVector<f64>>(g: F, u: &[f64], c: usize) -> DVector<f64> {
    let h = FD_STEP * u[c].abs().max(1.0);
    let shifted = |t: f64| {
        let mut v = u.to_vec();
        v[c] += t;
        g(&v)
    };
    (shifted(-2.0 * h) - shifted(2.0 * h) + (shifted(h) - shifted(-h)) * 8.0) / (12.0 * h)
}

impl ModelSpec {
    pub fn new(
        id: impl Into<String>,
        dim: usize,
        components: usize,
        domain: Vec<(f64, f64)>,
        funcs: Arc<dyn FluxFunctions>,
    ) -> Result<Self> {
        if dim == 0 || components == 0 {
            return Err(Error::InvalidInput("model needs d >= 1 and n >= 1".into()));
        }
        if domain.len() != components {
            return Err(Error::InvalidInput(format!(
                "domain has {} intervals for {} components",
                domain.len(),
                components
            )));
        }
        Ok(Self { id: id.into(), dim, components, domain, smoothness: 3, funcs })
    }

    pub fn in_domain(&self, u: &[f64]) -> bool {
        u.iter().zip(&self.domain).all(|(x, (lo, hi))| x.is_finite() && *x >= *lo && *x <= *hi)
    }

    pub fn check_domain(&self, u: &[f64]) -> Result<()> {
        if self.in_domain(u) {
            Ok(())
        } else {
            Err(Error::Domain { state: u.to_vec() })
        }
    }

    pub fn flux(&self, j: usize, u: &[f64]) -> DVector<f64> {
        let mut out = DVector::zeros(self.components);
        self.funcs.flux(j, u, out.as_mut_slice());
        out
    }

    pub fn viscosity(&self, j: usize, k: usize, u: &[f64]) -> RMat {
        let mut out = RMat::zeros(self.components, self.components);
        self.funcs.viscosity(j, k, u, &mut out);
        out
    }

    pub fn flux_jacobian(&self, j: usize, u: &[f64]) -> RMat {
        if let Some(m) = self.funcs.flux_jacobian(j, u) {
            return m;
        }
        let n = self.components;
        let mut m = RMat::zeros(n, n);
        for c in 0..n {
            m.set_column(c, &fd4(|v| self.flux(j, v), u, c));
        }
        m
    }

    pub fn viscosity_gradient(&self, j: usize, k: usize, c: usize, u: &[f64]) -> RMat {
        if let Some(m) = self.funcs.viscosity_gradient(j, k, c, u) {
            return m;
        }
        let n = self.components;
        let col = fd4(|v| DVector::from_column_slice(self.viscosity(j, k, v).as_slice()), u, c);
        RMat::from_column_slice(n, n, col.as_slice())
    }

    /// Directional derivative `(D B^{jk}(u)) delta`.
    pub fn viscosity_directional(&self, j: usize, k: usize, u: &[f64], delta: &[f64]) -> RMat {
        let n = self.components;
        let mut out = RMat::zeros(n, n);
        for (c, &dc) in delta.iter().enumerate() {
            if dc != 0.0 {
                out += self.viscosity_gradient(j, k, c, u) * dc;
            }
        }
        out
    }

    /// `sum_j nu_j f^j(u)`.
    pub fn normal_flux(&self, nu: &[f64], u: &[f64]) -> DVector<f64> {
        let mut out = DVector::zeros(self.components);
        for (j, &w) in nu.iter().enumerate() {
            if w != 0.0 {
                out += self.flux(j, u) * w;
            }
        }
        out
    }

    /// `sum_{jk} nu_j nu_k B^{jk}(u)`.
    pub fn normal_viscosity(&self, nu: &[f64], u: &[f64]) -> RMat {
        let n = self.components;
        let mut out = RMat::zeros(n, n);
        for (j, &a) in nu.iter().enumerate() {
            for (k, &b) in nu.iter().enumerate() {
                if a * b != 0.0 {
                    out += self.viscosity(j, k, u) * (a * b);
                }
            }
        }
        out
    }

    /// Smallest real part of the spectrum of the normal viscosity at `u`.
    pub fn ellipticity(&self, nu: &[f64], u: &[f64]) -> Result<f64> {
        let ev = real_eigenvalues(&self.normal_viscosity(nu, u))?;
        Ok(ev.iter().map(|z| z.re).fold(f64::INFINITY, f64::min))
    }

    /// Checks the uniform ellipticity bound along a set of states.
    pub fn check_ellipticity(&self, nu: &[f64], states: &[Vec<f64>], theta: f64) -> Result<f64> {
        let mut worst = f64::INFINITY;
        for u in states {
            worst = worst.min(self.ellipticity(nu, u)?);
        }
        if worst < theta {
            return Err(Error::Ellipticity(format!("min Re sigma = {worst:.3e} < {theta:.3e}")));
        }
        Ok(worst)
    }

    /// Smallest `Re sigma(sum nu_j nu_k B^{jk}(u))` over all sampled states and
    /// unit directions.
    pub fn check_h1(&self, states: &[Vec<f64>], directions: &[Vec<f64>]) -> Result<H1Report> {
        let mut report = H1Report { theta_min: f64::INFINITY, pass: false, worst_state: Vec::new(), worst_direction: Vec::new() };
        for u in states {
            self.check_domain(u)?;
            for nu in directions {
                let norm = nu.iter().map(|x| x * x).sum::<f64>().sqrt();
                if nu.len() != self.dim || (norm - 1.0).abs() > 1e-10 {
                    return Err(Error::InvalidInput(format!("{nu:?} is not a unit vector in R^{}", self.dim)));
                }
                let theta = self.ellipticity(nu, u)?;
                if theta < report.theta_min {
                    report = H1Report { theta_min: theta, pass: false, worst_state: u.clone(), worst_direction: nu.clone() };
                }
            }
        }
        report.pass = report.theta_min > 0.0 && report.theta_min.is_finite();
        Ok(report)
    }

    /// The same law written in coordinates whose first axis points along `nu`.
    pub fn rotated(&self, nu: &[f64]) -> Result<ModelSpec> {
        if nu.len() != self.dim {
            return Err(Error::InvalidInput("direction has wrong dimension".into()));
        }
        let norm = nu.iter().map(|x| x * x).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidInput("direction must be a unit vector".into()));
        }
        let r = householder_to_axis(nu);
        if (&r - RMat::identity(self.dim, self.dim)).norm() == 0.0 {
            return Ok(self.clone());
        }
        let mut out = self.clone();
        out.funcs = Arc::new(Rotated { inner: self.funcs.clone(), r, n: self.components });
        Ok(out)
    }
}

/// Symmetric orthogonal matrix whose first row is `nu`.
pub fn householder_to_axis(nu: &[f64]) -> RMat {
    let d = nu.len();
    let mut w = DVector::from_column_slice(nu);
    w[0] -= 1.0;
    let ww = w.dot(&w);
    if ww < 1e-28 {
        return RMat::identity(d, d);
    }
    RMat::identity(d, d) - (&w * w.transpose()) * (2.0 / ww)
}

struct Rotated {
    inner: Arc<dyn FluxFunctions>,
    r: RMat,
    n: usize,
}

impl FluxFunctions for Rotated {
    fn flux(&self, j: usize, u: &[f64], out: &mut [f64]) {
        let mut tmp = vec![0.0; self.n];
        out.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..self.r.ncols() {
            let w = self.r[(j, i)];
            if w != 0.0 {
                self.inner.flux(i, u, &mut tmp);
                for (o, t) in out.iter_mut().zip(&tmp) {
                    *o += w * t;
                }
            }
        }
    }

    fn viscosity(&self, j: usize, k: usize, u: &[f64], out: &mut RMat) {
        let mut tmp = RMat::zeros(self.n, self.n);
        out.fill(0.0);
        let d = self.r.ncols();
        for i in 0..d {
            for l in 0..d {
                let w = self.r[(j, i)] * self.r[(k, l)];
                if w != 0.0 {
                    self.inner.viscosity(i, l, u, &mut tmp);
                    *out += &tmp * w;
                }
            }
        }
    }

    fn flux_jacobian(&self, j: usize, u: &[f64]) -> Option<RMat> {
        let mut acc = RMat::zeros(self.n, self.n);
        for i in 0..self.r.ncols() {
            let w = self.r[(j, i)];
            if w != 0.0 {
                acc += self.inner.flux_jacobian(i, u)? * w;
            }
        }
        Some(acc)
    }

    fn viscosity_gradient(&self, j: usize, k: usize, c: usize, u: &[f64]) -> Option<RMat> {
        let mut acc = RMat::zeros(self.n, self.n);
        let d = self.r.ncols();
        for i in 0..d {
            for l in 0..d {
                let w = self.r[(j, i)] * self.r[(k, l)];
                if w != 0.0 {
                    acc += self.inner.viscosity_gradient(i, l, c, u)? * w;
                }
            }
        }
        Some(acc)
    }
}

/// Constant-coefficient law `f^j(u) = A_j u` with constant `B^{jk}`.
struct ConstantLaw {
    a: Vec<RMat>,
    b: Vec<Vec<RMat>>,
}

impl FluxFunctions for ConstantLaw {
    fn flux(&self, j: usize, u: &[f64], out: &mut [f64]) {
        let v = &self.a[j] * DVector::from_column_slice(u);
        out.copy_from_slice(v.as_slice());
    }
    fn viscosity(&self, j: usize, k: usize, _u: &[f64], out: &mut RMat) {
        out.copy_from(&self.b[j][k]);
    }
    fn flux_jacobian(&self, j: usize, _u: &[f64]) -> Option<RMat> {
        Some(self.a[j].clone())
    }
    fn viscosity_gradient(&self, j: usize, _k: usize, _c: usize, _u: &[f64]) -> Option<RMat> {
        let n = self.a[j].nrows();
        Some(RMat::zeros(n, n))
    }
}

/// Cubic van der Waals-type p-system: `tau_t - v_x = tau_xx`,
/// `v_t + p(tau)_x = v_xx` with `p(tau) = tau^3 - tau`. Transverse fluxes are
/// scalar multiples of the axial one.
struct CubicPSystem {
    transverse: Vec<f64>,
}

impl CubicPSystem {
    fn weight(&self, j: usize) -> f64 {
        if j == 0 {
            1.0
        } else {
            self.transverse[j - 1]
        }
    }
}

impl FluxFunctions for CubicPSystem {
    fn flux(&self, j: usize, u: &[f64], out: &mut [f64]) {
        let w = self.weight(j);
        out[0] = -w * u[1];
        out[1] = w * (u[0] * u[0] * u[0] - u[0]);
    }
    fn viscosity(&self, j: usize, k: usize, _u: &[f64], out: &mut RMat) {
        out.fill(0.0);
        if j == k {
            out.fill_with_identity();
        }
    }
    fn flux_jacobian(&self, j: usize, u: &[f64]) -> Option<RMat> {
        let w = self.weight(j);
        Some(RMat::from_row_slice(2, 2, &[0.0, -w, w * (3.0 * u[0] * u[0] - 1.0), 0.0]))
    }
    fn viscosity_gradient(&self, _j: usize, _k: usize, _c: usize, _u: &[f64]) -> Option<RMat> {
        Some(RMat::zeros(2, 2))
    }
}

/// Two decoupled-flux Burgers equations `f_i = c_i u_i + u_i^2 / 2` along the
/// first axis, coupled through a constant symmetric viscosity; transverse
/// directions carry linear transport and isotropic diffusion.
struct BurgersPair {
    shifts: [f64; 2],
    axial_viscosity: RMat,
    transverse_speeds: Vec<f64>,
    transverse_diffusion: f64,
}

impl FluxFunctions for BurgersPair {
    fn flux(&self, j: usize, u: &[f64], out: &mut [f64]) {
        if j == 0 {
            for i in 0..2 {
                out[i] = self.shifts[i] * u[i] + 0.5 * u[i] * u[i];
            }
        } else {
            let c = self.transverse_speeds[j - 1];
            out[0] = c * u[0];
            out[1] = c * u[1];
        }
    }
    fn viscosity(&self, j: usize, k: usize, _u: &[f64], out: &mut RMat) {
        out.fill(0.0);
        if j == 0 && k == 0 {
            out.copy_from(&self.axial_viscosity);
        } else if j == k {
            out.fill_with_identity();
            *out *= self.transverse_diffusion;
        }
    }
    fn flux_jacobian(&self, j: usize, u: &[f64]) -> Option<RMat> {
        if j == 0 {
            Some(RMat::from_row_slice(2, 2, &[self.shifts[0] + u[0], 0.0, 0.0, self.shifts[1] + u[1]]))
        } else {
            Some(RMat::identity(2, 2) * self.transverse_speeds[j - 1])
        }
    }
    fn viscosity_gradient(&self, _j: usize, _k: usize, _c: usize, _u: &[f64]) -> Option<RMat> {
        Some(RMat::zeros(2, 2))
    }
}

/// Parameters of the coupled Burgers pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BurgersPairParams {
    pub dim: usize,
    pub shifts: [f64; 2],
    /// Row-major 2x2 axial viscosity.
    pub axial_viscosity: [f64; 4],
    pub transverse_speeds: Vec<f64>,
    pub transverse_diffusion: f64,
}

impl Default for BurgersPairParams {
    fn default() -> Self {
        Self {
            dim: 1,
            shifts: [0.3, -0.2],
            axial_viscosity: [1.0, 0.2, 0.2, 0.8],
            transverse_speeds: Vec::new(),
            transverse_diffusion: 1.0,
        }
    }
}

impl ModelSpec {
    pub fn constant(a: Vec<RMat>, b: Vec<Vec<RMat>>) -> Result<Self> {
        let d = a.len();
        let n = a.first().map_or(0, |m| m.nrows());
        if b.len() != d || b.iter().any(|row| row.len() != d) {
            return Err(Error::InvalidInput("viscosity must be a d x d array of matrices".into()));
        }
        let square = |m: &RMat| m.nrows() == n && m.ncols() == n;
        if !a.iter().all(square) || !b.iter().flatten().all(square) {
            return Err(Error::InvalidInput("coefficient matrices must all be n x n".into()));
        }
        let mut m = Self::new("constant", d, n, vec![(-1e6, 1e6); n], Arc::new(ConstantLaw { a, b }))?;
        m.smoothness = u32::MAX;
        Ok(m)
    }

    /// `u_t = diffusion * Laplacian(u)` for an `n`-vector in `d` dimensions.
    pub fn heat(d: usize, n: usize, diffusion: f64) -> Result<Self> {
        let a = vec![RMat::zeros(n, n); d];
        let b = (0..d)
            .map(|j| {
                (0..d)
                    .map(|k| if j == k { RMat::identity(n, n) * diffusion } else { RMat::zeros(n, n) })
                    .collect()
            })
            .collect();
        let mut m = Self::constant(a, b)?;
        m.id = "heat".into();
        Ok(m)
    }

    /// Cubic p-system in one dimension.
    pub fn vdw_cubic() -> Self {
        Self::vdw_cubic_transverse(&[])
    }

    /// Cubic p-system in `1 + transverse.len()` dimensions with
    /// `f^j = transverse[j-1] f^1` and `B^{jk} = delta_{jk} I`.
    pub fn vdw_cubic_transverse(transverse: &[f64]) -> Self {
        let d = 1 + transverse.len();
        let funcs = Arc::new(CubicPSystem { transverse: transverse.to_vec() });
        let mut m = Self::new("vdw_cubic", d, 2, vec![(-10.0, 10.0), (-100.0, 100.0)], funcs)
            .expect("valid builtin");
        m.smoothness = u32::MAX;
        m
    }

    pub fn burgers_pair(p: &BurgersPairParams) -> Result<Self> {
        if p.dim == 0 || p.transverse_speeds.len() != p.dim - 1 {
            return Err(Error::InvalidInput("burgers_pair needs dim - 1 transverse speeds".into()));
        }
        let funcs = Arc::new(BurgersPair {
            shifts: p.shifts,
            axial_viscosity: RMat::from_row_slice(2, 2, &p.axial_viscosity),
            transverse_speeds: p.transverse_speeds.clone(),
            transverse_diffusion: p.transverse_diffusion,
        });
        let mut m = Self::new("burgers_pair", p.dim, 2, vec![(-50.0, 50.0); 2], funcs)?;
        m.smoothness = u32::MAX;
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn analytic_and_fd_jacobians_agree() {
        let m = ModelSpec::vdw_cubic();
        let u = [1.3, -0.4];
        let analytic = m.flux_jacobian(0, &u);
        let mut fd = RMat::zeros(2, 2);
        for c in 0..2 {
            fd.set_column(c, &fd4(|v| m.flux(0, v), &u, c));
        }
        assert!((analytic - fd).norm() < 1e-9);
    }

    #[test]
    fn rotation_preserves_normal_quantities() {
        let m = ModelSpec::vdw_cubic_transverse(&[0.5]);
        let a = 0.3f64;
        let nu = [a.cos(), a.sin()];
        let r = m.rotated(&nu).unwrap();
        let u = [1.1, 0.2];
        assert!((r.flux(0, &u) - m.normal_flux(&nu, &u)).norm() < 1e-14);
        assert!((r.viscosity(0, 0, &u) - m.normal_viscosity(&nu, &u)).norm() < 1e-14);
        let rr = householder_to_axis(&nu);
        assert!((&rr * &rr - RMat::identity(2, 2)).norm() < 1e-14);
    }

    #[test]
    fn h1_report_on_diagonal_viscosity() {
        let m = ModelSpec::constant(vec![RMat::zeros(2, 2)], vec![vec![RMat::from_diagonal(&DVector::from_vec(vec![2.0, 3.0]))]])
            .unwrap();
        let r = m.check_h1(&[vec![0.0, 0.0], vec![1.0, -1.0]], &[vec![1.0], vec![-1.0]]).unwrap();
        assert!(r.pass && (r.theta_min - 2.0).abs() < 1e-14);
        let h = ModelSpec::heat(2, 1, 1.0).unwrap();
        let r = h.check_h1(&[vec![0.3]], &[vec![0.6, 0.8]]).unwrap();
        assert!((r.theta_min - 1.0).abs() < 1e-14);
        assert!(h.check_h1(&[vec![0.3]], &[vec![1.0, 1.0]]).is_err());
    }

    #[test]
    fn heat_is_elliptic() {
        let m = ModelSpec::heat(3, 2, 0.5).unwrap();
        let theta = m.check_ellipticity(&[0.0, 0.6, 0.8], &[vec![0.0, 0.0]], 0.1).unwrap();
        assert!((theta - 0.5).abs() < 1e-12);
    }
}
