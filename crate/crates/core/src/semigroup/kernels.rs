//! Second-order low-frequency approximation of the solution operator: the
//! convection–diffusion wave `g = W * K` and the residual of
//! `S^I(t) v0 ~ Pi g(., t) W`.
//!
//! With `Pi` the right zero eigenfunctions of `L_0`, `Pi~` the dual left
//! ones and `alpha(xi_hat)` the coefficients of the critical eigenfunctions
//! in the `Pi` basis as `r -> 0` along `xi_hat`, the kernel symbol is
//! `g(xi, t) = phi(|xi|) sum_j exp((-i a_j r + b_j r^2) t) alpha_j alpha~_j^*`
//! with `alpha~ = (alpha^{-1})^*`.

use std::f64::consts::PI;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bloch::{assemble, DispersionSurfaces, ZeroCluster};
use crate::coefficients::WaveCoefficients;
use crate::error::{Error, Result};
use crate::linalg::{c, inverse, least_squares, CMat, CVec};
use crate::spectral::mode_index;

use super::decay::{fit_power, LineFit};
use super::propagator::Cutoff;

/// Gauss–Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 1.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

/// Directions `(cos p, sin p, 0, ...)` with weights for integrating over the
/// unit sphere functions that depend on the transverse wave vector only
/// through its length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionQuadrature {
    pub dim: usize,
    pub directions: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
}

impl DirectionQuadrature {
    pub fn axisymmetric(dim: usize, count: usize) -> Result<Self> {
        let embed = |cp: f64, sp: f64| {
            let mut v = vec![0.0; dim];
            v[0] = cp;
            if dim > 1 {
                v[1] = sp;
            }
            v
        };
        let (directions, weights) = match dim {
            1 => (vec![vec![1.0], vec![-1.0]], vec![1.0, 1.0]),
            2 => {
                if count == 0 {
                    return Err(Error::InvalidInput("need at least one direction".into()));
                }
                let h = PI / count as f64;
                let dirs = (0..count).map(|k| {
                    let p = (k as f64 + 0.5) * h;
                    embed(p.cos(), p.sin())
                });
                (dirs.collect(), vec![2.0 * h; count])
            }
            3 => {
                if count == 0 {
                    return Err(Error::InvalidInput("need at least one direction".into()));
                }
                let (x, w) = gauss_legendre(count);
                let dirs = x.iter().map(|&cp| embed(cp, (1.0 - cp * cp).sqrt()));
                (dirs.collect(), w.iter().map(|w| 2.0 * PI * w).collect())
            }
            _ => return Err(Error::NotApplicable("direction quadrature is implemented for d <= 3".into())),
        };
        Ok(Self { dim, directions, weights })
    }
}

/// Composite Gauss–Legendre rule on `[0, outer]` with geometric panels
/// refined towards the origin; weights include `r^{d-1}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadialQuadrature {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl RadialQuadrature {
    pub fn geometric(dim: usize, outer: f64, inner: f64, panels: usize, order: usize) -> Result<Self> {
        if !(0.0 < inner && inner < outer) || panels < 2 || order == 0 {
            return Err(Error::InvalidInput("radial rule needs 0 < inner < outer, two panels and a positive order".into()));
        }
        let q = (outer / inner).powf(1.0 / (panels - 1) as f64);
        let mut edges = vec![0.0];
        edges.extend((0..panels).map(|k| inner * q.powi(k as i32)));
        *edges.last_mut().expect("panels") = outer;
        let (x, w) = gauss_legendre(order);
        let mut nodes = Vec::new();
        let mut weights = Vec::new();
        for pair in edges.windows(2) {
            let (a, b) = (pair[0], pair[1]);
            for (xi, wi) in x.iter().zip(&w) {
                let r = 0.5 * (a + b) + 0.5 * (b - a) * xi;
                nodes.push(r);
                weights.push(0.5 * (b - a) * wi * r.powi(dim as i32 - 1));
            }
        }
        Ok(Self { nodes, weights })
    }
}

/// Polar quadrature over the ball `|xi| <= 2 eps`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LowFrequencyQuadrature {
    pub directions: DirectionQuadrature,
    pub radial: RadialQuadrature,
}

impl LowFrequencyQuadrature {
    pub fn new(dim: usize, eps: f64, directions: usize, panels: usize, order: usize) -> Result<Self> {
        Ok(Self {
            directions: DirectionQuadrature::axisymmetric(dim, directions)?,
            radial: RadialQuadrature::geometric(dim, 2.0 * eps, 1e-4, panels, order)?,
        })
    }

    fn nodes(&self) -> Vec<(usize, f64, f64)> {
        let mut out = Vec::new();
        for (d, wd) in self.directions.weights.iter().enumerate() {
            for (r, wr) in self.radial.nodes.iter().zip(&self.radial.weights) {
                out.push((d, *r, wd * wr));
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kernel {
    /// `W * K`, the convection–diffusion wave.
    Full,
    /// `W`: transport only, no cutoff.
    Hyperbolic,
    /// `K`: diffusion with the cutoff.
    Diffusive,
}

#[derive(Debug, Clone)]
pub struct WaveKernelBundle {
    pub dim: usize,
    pub period: f64,
    pub cutoff: Cutoff,
    pub cluster: usize,
    /// `Pi` as mode-basis columns.
    pub right: CMat,
    /// `Pi~` as mode-basis columns, dual under `Pi~^* Pi = I` for the
    /// coefficient inner product (the cell average of the physical pairing).
    pub left: CMat,
    pub basis: ZeroCluster,
    pub rays: Vec<Vec<f64>>,
    pub alpha: Vec<CMat>,
    pub alpha_tilde: Vec<CMat>,
    /// `a[ray][j]`, `b[ray][j]` in `lambda_j = -i a_j r + b_j r^2`.
    pub a: Vec<Vec<Complex64>>,
    pub b: Vec<Vec<Complex64>>,
    /// `|Pi~^* Pi - I|` and `max_ray |alpha~^* alpha - I|`.
    pub duality_error: f64,
    pub alpha_duality_error: f64,
}

pub fn build_wave_kernels(surfaces: &DispersionSurfaces, eps: f64) -> Result<WaveKernelBundle> {
    let basis = &surfaces.basis;
    let size = basis.size();
    if surfaces.cluster != size {
        return Err(Error::Structural(format!("tracked {} branches but the zero eigenspace has dimension {size}", surfaces.cluster)));
    }
    if surfaces.radii.len() < 2 || surfaces.rays.is_empty() {
        return Err(Error::InvalidInput("surfaces need at least one ray and two radii".into()));
    }
    let right = basis.right.clone();
    let period = cell_period(basis)?;
    let left = &basis.left * c(period, 0.0);
    let duality_error = (left.adjoint() * &right - CMat::identity(size, size)).norm();
    if duality_error > 1e-8 {
        return Err(Error::Structural(format!("zero eigenspace bases are not dual (error {duality_error:.3e})")));
    }
    let (r0, r1) = (surfaces.radii[0], surfaces.radii[1]);
    let mut alpha = Vec::with_capacity(surfaces.rays.len());
    let mut alpha_tilde = Vec::with_capacity(surfaces.rays.len());
    let mut alpha_duality_error: f64 = 0.0;
    for small in &surfaces.right_small {
        let a0 = least_squares(&right, &small[0])?;
        let a1 = least_squares(&right, &small[1])?;
        let a = (a0 * c(r1, 0.0) - a1 * c(r0, 0.0)) / c(r1 - r0, 0.0);
        let at = inverse(&a)?.adjoint();
        alpha_duality_error = alpha_duality_error.max((at.adjoint() * &a - CMat::identity(size, size)).norm());
        alpha.push(a);
        alpha_tilde.push(at);
    }
    Ok(WaveKernelBundle {
        dim: surfaces.rays[0].len(),
        period,
        cutoff: Cutoff { eps },
        cluster: size,
        right,
        left,
        basis: basis.clone(),
        rays: surfaces.rays.clone(),
        alpha,
        alpha_tilde,
        a: surfaces.a_fit.clone(),
        b: surfaces.b_fit.clone(),
        duality_error,
        alpha_duality_error,
    })
}

/// Cell period recovered from the stored dual bases (`X left^* right = I`).
fn cell_period(b: &ZeroCluster) -> Result<f64> {
    let g = b.left.adjoint() * &b.right;
    let tr = (0..g.nrows()).map(|i| g[(i, i)].re).sum::<f64>() / g.nrows() as f64;
    if tr <= 0.0 {
        return Err(Error::Structural("zero eigenspace bases are not dual".into()));
    }
    Ok(1.0 / tr)
}

impl WaveKernelBundle {
    /// `lambda_j^dagger(r xi_hat)` for the ray `ray`.
    pub fn dispersion(&self, ray: usize, r: f64) -> Vec<Complex64> {
        self.a[ray].iter().zip(&self.b[ray]).map(|(a, b)| -Complex64::i() * a * r + b * r * r).collect()
    }

    pub fn symbol(&self, kind: Kernel, ray: usize, r: f64, t: f64) -> CMat {
        let phi = match kind {
            Kernel::Hyperbolic => 1.0,
            _ => self.cutoff.value(r),
        };
        let mut out = CMat::zeros(self.cluster, self.cluster);
        if phi == 0.0 {
            return out;
        }
        for j in 0..self.cluster {
            let (a, b) = (self.a[ray][j], self.b[ray][j]);
            let exponent = match kind {
                Kernel::Full => (-Complex64::i() * a * r + b * r * r) * t,
                Kernel::Hyperbolic => -Complex64::i() * a * r * t,
                Kernel::Diffusive => b * r * r * t,
            };
            let col = self.alpha[ray].column(j);
            let dual = self.alpha_tilde[ray].column(j);
            out += col * dual.adjoint() * (exponent.exp() * phi);
        }
        out
    }

    /// Mass vector `W = int Pi~^* v0 dx` from the Bloch coefficients of `v0`
    /// at `xi = 0`.
    pub fn mass(&self, coefficients_at_origin: &CVec) -> CVec {
        self.left.adjoint() * coefficients_at_origin
    }

    fn check_quadrature(&self, quad: &LowFrequencyQuadrature) -> Result<()> {
        let same = quad.directions.directions.len() == self.rays.len()
            && quad.directions.directions.iter().zip(&self.rays).all(|(a, b)| a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12));
        if same {
            Ok(())
        } else {
            Err(Error::InvalidInput("kernel rays must be the quadrature directions".into()))
        }
    }
}

/// `|k(., t)|_{L^2}` (Frobenius in the matrix entries) by Plancherel.
pub fn kernel_norm(bundle: &WaveKernelBundle, quad: &LowFrequencyQuadrature, kind: Kernel, t: f64) -> Result<f64> {
    bundle.check_quadrature(quad)?;
    let sum: f64 = quad.nodes().iter().map(|&(d, r, w)| w * bundle.symbol(kind, d, r, t).norm_squared()).sum();
    Ok((sum / (2.0 * PI).powi(bundle.dim as i32)).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelBand {
    pub times: Vec<f64>,
    pub norms: Vec<f64>,
    /// `norm (1 + t)^{d/4}`.
    pub scaled: Vec<f64>,
    pub lower: f64,
    pub upper: f64,
    pub ratio: f64,
}

pub fn kernel_band(bundle: &WaveKernelBundle, quad: &LowFrequencyQuadrature, times: &[f64]) -> Result<KernelBand> {
    let norms: Vec<f64> = times.iter().map(|&t| kernel_norm(bundle, quad, Kernel::Full, t)).collect::<Result<_>>()?;
    let scaled: Vec<f64> = norms.iter().zip(times).map(|(n, t)| n * (1.0 + t).powf(bundle.dim as f64 / 4.0)).collect();
    let lower = scaled.iter().copied().fold(f64::INFINITY, f64::min);
    let upper = scaled.iter().copied().fold(0.0, f64::max);
    Ok(KernelBand { times: times.to_vec(), norms, scaled, lower, upper, ratio: upper / lower })
}

/// Periodic line `[0, length)` with `points` samples for one-dimensional kernels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineGrid {
    pub points: usize,
    pub length: f64,
}

#[derive(Debug, Clone)]
pub struct ConvectionDiffusionWave {
    pub x: Vec<f64>,
    pub g: Vec<CMat>,
    pub w: Vec<CMat>,
    pub k: Vec<CMat>,
    /// `max |W * K - g| / max |g|` with the convolution summed on the grid.
    pub identity_error: f64,
    /// Same for `K * W`.
    pub commuted_error: f64,
}

/// The kernels `g`, `W`, `K` at time `t` sampled on a line grid (one space
/// dimension), with the convolution identity checked by direct summation.
pub fn convection_diffusion_wave(bundle: &WaveKernelBundle, t: f64, grid: LineGrid) -> Result<ConvectionDiffusionWave> {
    if bundle.dim != 1 {
        return Err(Error::NotApplicable("kernels on a grid are sampled in one space dimension".into()));
    }
    if t <= 0.0 || grid.points < 4 || grid.length <= 0.0 {
        return Err(Error::InvalidInput("need t > 0 and a grid with at least four points".into()));
    }
    let n = grid.points;
    let h = grid.length / n as f64;
    if PI / h < bundle.cutoff.support() {
        return Err(Error::Resolution(format!("grid spacing {h} does not resolve frequencies up to {}", bundle.cutoff.support())));
    }
    let speed = bundle.a.iter().flatten().map(|a| a.norm()).fold(0.0, f64::max);
    let diff = bundle.b.iter().flatten().map(|b| b.re.abs()).fold(0.0, f64::max);
    let spread = speed * t + 8.0 * (2.0 * diff * t).sqrt();
    if grid.length < 2.0 * spread {
        return Err(Error::Resolution(format!("line length {} is below twice the kernel spread {spread}", grid.length)));
    }
    let ray_for = |zeta: f64| -> usize {
        let want = if zeta >= 0.0 { 1.0 } else { -1.0 };
        bundle.rays.iter().position(|d| d[0] * want > 0.0).unwrap_or(0)
    };
    let symbols = |kind: Kernel| -> Vec<CMat> {
        (0..n)
            .map(|k| {
                let zeta = 2.0 * PI * mode_index(k, n) as f64 / grid.length;
                bundle.symbol(kind, ray_for(zeta), zeta.abs(), t)
            })
            .collect()
    };
    let size = bundle.cluster;
    let to_space = |hat: Vec<CMat>| -> Vec<CMat> {
        let x0 = 0.5 * grid.length;
        (0..n)
            .map(|i| {
                let x = i as f64 * h - x0;
                let mut out = CMat::zeros(size, size);
                for (k, s) in hat.iter().enumerate() {
                    let zeta = 2.0 * PI * mode_index(k, n) as f64 / grid.length;
                    out += s * Complex64::from_polar(1.0, zeta * x);
                }
                out / c(grid.length, 0.0)
            })
            .collect()
    };
    let g = to_space(symbols(Kernel::Full));
    let w = to_space(symbols(Kernel::Hyperbolic));
    let k = to_space(symbols(Kernel::Diffusive));
    // Samples sit at x_i = i h - L/2, so x_i - x_j = x_{i - j + n/2}.
    let convolve = |p: &[CMat], q: &[CMat]| -> Vec<CMat> {
        (0..n)
            .into_par_iter()
            .map(|i| {
                let mut acc = CMat::zeros(size, size);
                for (j, qj) in q.iter().enumerate() {
                    let idx = (i + n + n / 2 - j) % n;
                    acc += &p[idx] * qj;
                }
                acc * c(h, 0.0)
            })
            .collect()
    };
    let scale = g.iter().map(|m| m.norm()).fold(0.0, f64::max);
    let err = |a: &[CMat]| a.iter().zip(&g).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max) / scale;
    let identity_error = err(&convolve(&w, &k));
    let commuted_error = err(&convolve(&k, &w));
    let x = (0..n).map(|i| i as f64 * h - 0.5 * grid.length).collect();
    Ok(ConvectionDiffusionWave { x, g, w, k, identity_error, commuted_error })
}

/// Initial data whose Bloch coefficients are known in closed form at any
/// wave vector.
pub trait LowFrequencyData: Sync {
    /// Bloch coefficients at `xi = r * ray direction`, in the mode layout of
    /// the Bloch operator with `samples` cell modes.
    fn coefficients(&self, ray: usize, r: f64, xi: &[f64], period: f64, samples: usize) -> CVec;
}

/// `v0(x) = amplitude * G(x_1) * exp(-|x~|^2 / (2 w_t^2))` with `G` a
/// Gaussian of width `axial_width` centred at `centre`, or its derivative
/// when `odd` (zero mass in every component).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeparableData {
    pub amplitude: Vec<f64>,
    pub centre: f64,
    pub axial_width: f64,
    pub transverse_width: f64,
    #[serde(default)]
    pub odd: bool,
}

impl SeparableData {
    /// Fourier transform `int e^{-i xi x} v0(x) dx` per component.
    pub fn fourier(&self, xi: &[f64]) -> Vec<Complex64> {
        let (w1, wt) = (self.axial_width, self.transverse_width);
        let z = xi[0];
        let mut axial = Complex64::from_polar((2.0 * PI).sqrt() * w1 * (-0.5 * w1 * w1 * z * z).exp(), -z * self.centre);
        if self.odd {
            // Derivative of the Gaussian, normalised to the same peak scale.
            axial *= Complex64::i() * z * w1;
        }
        let rho2: f64 = xi[1..].iter().map(|x| x * x).sum();
        let k = (xi.len() - 1) as i32;
        let transverse = (2.0 * PI * wt * wt).powf(0.5 * k as f64) * (-0.5 * wt * wt * rho2).exp();
        self.amplitude.iter().map(|a| axial * transverse * *a).collect()
    }

    /// Physical value at `x`.
    pub fn value(&self, x: &[f64]) -> Vec<f64> {
        let (w1, wt) = (self.axial_width, self.transverse_width);
        let s = x[0] - self.centre;
        let mut g = (-0.5 * s * s / (w1 * w1)).exp();
        if self.odd {
            g *= -s / w1;
        }
        let rho2: f64 = x[1..].iter().map(|v| v * v).sum();
        g *= (-0.5 * rho2 / (wt * wt)).exp();
        self.amplitude.iter().map(|a| a * g).collect()
    }
}

impl LowFrequencyData for SeparableData {
    fn coefficients(&self, _ray: usize, _r: f64, xi: &[f64], period: f64, samples: usize) -> CVec {
        let n = self.amplitude.len();
        let mut out = CVec::zeros(n * samples);
        for kk in 0..samples {
            let mut shifted = xi.to_vec();
            shifted[0] += 2.0 * PI * mode_index(kk, samples) as f64 / period;
            for (a, v) in self.fourier(&shifted).into_iter().enumerate() {
                out[a * samples + kk] = v;
            }
        }
        out
    }
}

/// `Pi g(., t0) W`: a seed that the approximation propagates exactly.
#[derive(Debug, Clone)]
pub struct KernelSeed<'a> {
    pub bundle: &'a WaveKernelBundle,
    pub t0: f64,
    pub mass: CVec,
}

impl LowFrequencyData for KernelSeed<'_> {
    fn coefficients(&self, ray: usize, r: f64, _xi: &[f64], _period: f64, _samples: usize) -> CVec {
        &self.bundle.right * (self.bundle.symbol(Kernel::Full, ray, r, self.t0) * &self.mass)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualCurve {
    pub times: Vec<f64>,
    /// `|S^I(t) v0 - Pi g(., t + shift) W|_{L^2}`.
    pub absolute: Vec<f64>,
    /// `|Pi g(., t + shift) W|_{L^2}`.
    pub reference: Vec<f64>,
    /// `absolute / reference`; empty when the mass vanishes.
    pub relative: Vec<f64>,
    /// Real and imaginary parts of `W`.
    pub mass: Vec<[f64; 2]>,
    pub zero_mass: bool,
    /// Log-log fit of the relative residual, or of the absolute one when
    /// the mass vanishes.
    pub fit: LineFit,
}

struct ResidualNode {
    weight: f64,
    ray: usize,
    r: f64,
    phi: f64,
    vectors: CMat,
    duals: CMat,
    values: Vec<Complex64>,
    data: CVec,
}

/// Residual of the second-order approximation along `times`, evaluated by
/// polar quadrature with a dense Bloch eigendecomposition at every node.
/// `shift` compares `S^I(t) v0` with `Pi g(., t + shift) W`.
pub fn asymptotic_residual(
    wave: &WaveCoefficients,
    bundle: &WaveKernelBundle,
    quad: &LowFrequencyQuadrature,
    data: &dyn LowFrequencyData,
    times: &[f64],
    shift: f64,
) -> Result<ResidualCurve> {
    bundle.check_quadrature(quad)?;
    if wave.dim != bundle.dim {
        return Err(Error::InvalidInput("wave and kernels have different dimensions".into()));
    }
    let m = wave.samples();
    let size = bundle.cluster;
    let origin = vec![0.0; wave.dim];
    let c0 = data.coefficients(0, 0.0, &origin, wave.period, m);
    let mass = bundle.mass(&c0);
    let zero_mass = mass.norm() <= 1e-12 * (1.0 + c0.norm());
    let nodes: Vec<ResidualNode> = quad
        .nodes()
        .par_iter()
        .filter(|(_, r, _)| bundle.cutoff.value(*r) > 0.0)
        .map(|&(ray, r, weight)| {
            let xi: Vec<f64> = bundle.rays[ray].iter().map(|x| x * r).collect();
            let e = assemble(wave, &xi)?.eigen()?;
            let mut order: Vec<usize> = (0..e.values.len()).collect();
            order.sort_by(|&i, &j| e.values[j].re.total_cmp(&e.values[i].re));
            order.truncate(size);
            let inv = inverse(&e.vectors)?;
            let vectors = CMat::from_fn(e.vectors.nrows(), size, |i, j| e.vectors[(i, order[j])]);
            let duals = CMat::from_fn(size, e.vectors.nrows(), |i, j| inv[(order[i], j)]);
            let values = order.iter().map(|&i| e.values[i]).collect();
            Ok(ResidualNode {
                weight,
                ray,
                r,
                phi: bundle.cutoff.value(r),
                vectors,
                duals,
                values,
                data: data.coefficients(ray, r, &xi, wave.period, m),
            })
        })
        .collect::<Result<_>>()?;
    let norm = (2.0 * PI).powi(wave.dim as i32);
    let mut absolute = Vec::with_capacity(times.len());
    let mut reference = Vec::with_capacity(times.len());
    for &t in times {
        let (num, den) = nodes
            .par_iter()
            .map(|nd| {
                let coef = &nd.duals * &nd.data;
                let grown = CVec::from_iterator(size, coef.iter().zip(&nd.values).map(|(a, l)| a * (l * t).exp()));
                let exact = &nd.vectors * grown * c(nd.phi, 0.0);
                let approx = &bundle.right * (bundle.symbol(Kernel::Full, nd.ray, nd.r, t + shift) * &mass);
                (nd.weight * (exact - &approx).norm_squared(), nd.weight * approx.norm_squared())
            })
            .reduce(|| (0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1));
        absolute.push((num / norm).sqrt());
        reference.push((den / norm).sqrt());
    }
    let relative: Vec<f64> = if zero_mass { Vec::new() } else { absolute.iter().zip(&reference).map(|(a, b)| a / b).collect() };
    let fit = if zero_mass { fit_power(times, &absolute)? } else { fit_power(times, &relative)? };
    Ok(ResidualCurve {
        times: times.to_vec(),
        absolute,
        reference,
        relative,
        mass: mass.iter().map(|z| [z.re, z.im]).collect(),
        zero_mass,
        fit,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bloch::{log_radii, track_surfaces, TrackOptions};
    use crate::linalg::RMat;
    use crate::model::BurgersPairParams;
    use crate::semigroup::decay::log_times;
    use crate::semigroup::transform::{bloch_forward, Field, TorusGrid};
    use crate::ModelSpec;

    fn synthetic(m: usize) -> WaveCoefficients {
        let model = ModelSpec::burgers_pair(&BurgersPairParams::default()).unwrap();
        WaveCoefficients::trigonometric(&model, 1.0, m, &[0.4, 0.0], &[0.0, 0.3], 0.0).unwrap()
    }

    fn bundle_for(wave: &WaveCoefficients, quad: &LowFrequencyQuadrature, eps: f64) -> WaveKernelBundle {
        let radii = log_radii(1e-3, 0.1, 8);
        let s = track_surfaces(wave, &quad.directions.directions, &radii, &TrackOptions::default()).unwrap();
        build_wave_kernels(&s, eps).unwrap()
    }

    fn diagonal_diffusion() -> WaveCoefficients {
        let model = ModelSpec::constant(
            vec![RMat::zeros(2, 2)],
            vec![vec![RMat::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.5])]],
        )
        .unwrap();
        WaveCoefficients::constant(&model, &[0.0, 0.0], 1.0, 8).unwrap()
    }

    #[test]
    fn gauss_legendre_is_exact_for_high_degree() {
        for n in [1, 2, 5, 12] {
            let (x, w) = gauss_legendre(n);
            for deg in 0..2 * n {
                let q: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(deg as i32)).sum();
                let exact = if deg % 2 == 1 { 0.0 } else { 2.0 / (deg + 1) as f64 };
                assert!((q - exact).abs() < 1e-13, "n {n} degree {deg}");
            }
        }
    }

    #[test]
    fn polar_rules_integrate_moments() {
        let d3 = DirectionQuadrature::axisymmetric(3, 6).unwrap();
        let area: f64 = d3.weights.iter().sum();
        let c2: f64 = d3.directions.iter().zip(&d3.weights).map(|(v, w)| w * v[0] * v[0]).sum();
        assert!((area - 4.0 * PI).abs() < 1e-12 && (c2 - 4.0 * PI / 3.0).abs() < 1e-12);
        let d2 = DirectionQuadrature::axisymmetric(2, 16).unwrap();
        let len: f64 = d2.weights.iter().sum();
        let c2: f64 = d2.directions.iter().zip(&d2.weights).map(|(v, w)| w * v[0] * v[0]).sum();
        assert!((len - 2.0 * PI).abs() < 1e-12 && (c2 - PI).abs() < 1e-12);
        let r = RadialQuadrature::geometric(3, 0.6, 1e-4, 6, 6).unwrap();
        let q: f64 = r.nodes.iter().zip(&r.weights).map(|(x, w)| w * x * x).sum();
        assert!((q - 0.6f64.powi(5) / 5.0).abs() < 1e-14);
    }

    #[test]
    fn bases_and_coefficients_are_dual() {
        let wave = synthetic(16);
        let quad = LowFrequencyQuadrature::new(1, 0.3, 0, 8, 8).unwrap();
        let b = bundle_for(&wave, &quad, 0.3);
        assert!(b.duality_error < 1e-10);
        assert!(b.alpha_duality_error < 1e-8);
        assert_eq!(b.cluster, 2);
        for (a, at) in b.alpha.iter().zip(&b.alpha_tilde) {
            assert!((at.adjoint() * a - CMat::identity(2, 2)).norm() < 1e-8);
        }
    }

    #[test]
    fn diagonal_model_has_constant_bases_and_gaussian_kernel() {
        let wave = diagonal_diffusion();
        let quad = LowFrequencyQuadrature::new(1, 0.3, 0, 10, 8).unwrap();
        let b = bundle_for(&wave, &quad, 0.3);
        for j in 0..2 {
            let samples = &b.basis.right_samples[j];
            let first = &samples[0];
            assert!(samples.iter().all(|s| s.iter().zip(first).all(|(x, y)| (x - y).abs() < 1e-10)));
            assert!((first.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-10);
        }
        for a in b.a.iter().flatten() {
            assert!(a.norm() < 1e-8);
        }
        // Late enough that the cutoff removes only exp(-beta eps^2 t) ~ e^{-45}.
        let t = 1000.0;
        let cd = convection_diffusion_wave(&b, t, LineGrid { points: 1024, length: 1024.0 }).unwrap();
        assert!(cd.identity_error < 1e-10 && cd.commuted_error < 1e-10);
        // In physical components Pi g Pi~^* is diag(heat kernels with diffusivities 1 and 1/2).
        let phys = |basis: &[Vec<Vec<f64>>]| CMat::from_fn(2, 2, |a, j| c(basis[j][0][a], 0.0));
        let (pi, pit) = (phys(&b.basis.right_samples), phys(&b.basis.left_samples));
        for (i, x) in cd.x.iter().enumerate() {
            assert!((&cd.g[i] - &cd.k[i]).norm() < 1e-10);
            let kernel = &pi * &cd.g[i] * pit.adjoint();
            for (j, beta) in [1.0, 0.5].into_iter().enumerate() {
                let exact = (-x * x / (4.0 * beta * t)).exp() / (4.0 * PI * beta * t).sqrt();
                assert!((kernel[(j, j)] - exact).norm() < 1e-9, "x {x}");
            }
            assert!(kernel[(0, 1)].norm() < 1e-8 && kernel[(1, 0)].norm() < 1e-8);
        }
        let norm = kernel_norm(&b, &quad, Kernel::Full, t).unwrap();
        let exact = ((1.0 + 2f64.sqrt()) / (2.0 * (2.0 * PI * t).sqrt())).sqrt();
        assert!((norm - exact).abs() < 1e-6 * exact, "{norm} vs {exact}");
    }

    #[test]
    fn convolution_identity_and_resolution_checks() {
        let wave = synthetic(16);
        let quad = LowFrequencyQuadrature::new(1, 0.3, 0, 8, 8).unwrap();
        let b = bundle_for(&wave, &quad, 0.3);
        let cd = convection_diffusion_wave(&b, 50.0, LineGrid { points: 256, length: 256.0 }).unwrap();
        assert!(cd.identity_error < 1e-10 && cd.commuted_error < 1e-10);
        let coarse = convection_diffusion_wave(&b, 50.0, LineGrid { points: 32, length: 256.0 });
        assert!(matches!(coarse, Err(Error::Resolution(_))));
        let short = convection_diffusion_wave(&b, 50.0, LineGrid { points: 64, length: 64.0 });
        assert!(matches!(short, Err(Error::Resolution(_))));
    }

    #[test]
    fn separable_data_matches_discrete_transform() {
        let grid = TorusGrid::axial(1.0, 128, 16).unwrap();
        for odd in [false, true] {
            let data = SeparableData { amplitude: vec![1.0, -0.5], centre: 64.0, axial_width: 2.0, transverse_width: 1.0, odd };
            let field = Field::from_fn(&grid, 2, |x, o| o.copy_from_slice(&data.value(x)));
            let hat = bloch_forward(&field);
            for node in [0, 3, 70] {
                let xi = grid.node_xi(node);
                let direct = data.coefficients(0, xi[0].abs(), &xi, 1.0, 16);
                assert!((&direct - &hat.coefficients[node]).norm() < 1e-10 * (1.0 + direct.norm()));
            }
        }
    }

    #[test]
    fn residual_decays_and_zero_mass_decays_faster() {
        let wave = synthetic(16);
        let quad = LowFrequencyQuadrature::new(1, 0.3, 0, 10, 8).unwrap();
        let b = bundle_for(&wave, &quad, 0.3);
        let times = log_times(10.0, 1000.0, 10);
        let data = SeparableData { amplitude: vec![1.0, 0.5], centre: 0.0, axial_width: 1.0, transverse_width: 1.0, odd: false };
        let r = asymptotic_residual(&wave, &b, &quad, &data, &times, 0.0).unwrap();
        assert!(!r.zero_mass);
        assert!((r.fit.slope + 0.5).abs() < 0.1, "{:?}", r.fit);
        let odd = SeparableData { odd: true, ..data };
        let r = asymptotic_residual(&wave, &b, &quad, &odd, &times, 0.0).unwrap();
        assert!(r.zero_mass && r.relative.is_empty());
        assert!(r.fit.slope < -0.25 - 0.1, "{:?}", r.fit);
    }

    #[test]
    fn self_similar_seed_stays_close() {
        let wave = synthetic(16);
        let quad = LowFrequencyQuadrature::new(1, 0.3, 0, 10, 8).unwrap();
        let b = bundle_for(&wave, &quad, 0.3);
        let mass = CVec::from_vec(vec![c(1.0, 0.0), c(-0.3, 0.0)]);
        let seed = KernelSeed { bundle: &b, t0: 5.0, mass };
        let times = log_times(1.0, 500.0, 8);
        let r = asymptotic_residual(&wave, &b, &quad, &seed, &times, 5.0).unwrap();
        assert!(r.relative.iter().all(|v| *v < 0.1), "{:?}", r.relative);
    }
}
