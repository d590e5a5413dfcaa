//! Bloch operators `L_xi` of the linearisation about a periodic wave and
//! their spectra.
//!
//! `L_xi` acts on `X`-periodic functions and is represented in the discrete
//! Fourier basis `exp(2 pi i k x / X)`, `k = -m/2 .. m/2 - 1`, where
//! differentiation becomes multiplication by `i (2 pi k / X + xi_1)` and
//! multiplication by a coefficient becomes circular convolution of its
//! sampled Fourier coefficients. This matrix is unitarily similar to the
//! collocation matrix on the `m` sample points. Unknowns are ordered
//! component-major: index `a * m + kk` for component `a` and FFT slot `kk`.

use std::f64::consts::PI;

use nalgebra::DVector;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coefficients::WaveCoefficients;
use crate::error::{Error, Result};
use crate::linalg::{c, eigen, eigenvalues, svd_real, CMat, CVec, Eigen, I, RMat};
use crate::spectral::{mode_index, FftPair};

pub fn wavenumbers(m: usize, period: f64, xi1: f64) -> Vec<f64> {
    (0..m).map(|kk| 2.0 * PI * mode_index(kk, m) as f64 / period + xi1).collect()
}

#[derive(Debug, Clone)]
pub struct BlochOperator {
    pub xi: Vec<f64>,
    pub period: f64,
    pub components: usize,
    pub modes: usize,
    pub matrix: CMat,
}

/// Assembles `L_xi` for many `xi` sharing the same transverse part.
pub struct BlochAssembler<'a> {
    wave: &'a WaveCoefficients,
    transverse: Vec<f64>,
    hat: Vec<Vec<Vec<Complex64>>>,
}

impl<'a> BlochAssembler<'a> {
    pub fn new(wave: &'a WaveCoefficients, transverse: &[f64]) -> Result<Self> {
        if transverse.len() + 1 != wave.dim {
            return Err(Error::InvalidInput(format!("xi must have {} entries", wave.dim)));
        }
        Ok(Self { wave, transverse: transverse.to_vec(), hat: wave.combined_hat(transverse) })
    }

    pub fn assemble(&self, xi1: f64) -> BlochOperator {
        let n = self.wave.components;
        let m = self.wave.samples();
        let kappa = wavenumbers(m, self.wave.period, xi1);
        let mut mat = CMat::zeros(n * m, n * m);
        let [b11, a1, b1t, bt1, at, btt] = [0, 1, 2, 3, 4, 5].map(|f| &self.hat[f]);
        let has_transverse = self.transverse.iter().any(|&x| x != 0.0);
        for a in 0..n {
            for b in 0..n {
                let e = a * n + b;
                for kk in 0..m {
                    let kk_k = kappa[kk];
                    for ll in 0..m {
                        let idx = (kk + m - ll) % m;
                        let kl = kappa[ll];
                        let mut v = -kk_k * kl * b11[e][idx] - I * kk_k * a1[e][idx];
                        if has_transverse {
                            v += -kk_k * b1t[e][idx] - kl * bt1[e][idx] - I * at[e][idx] - btt[e][idx];
                        }
                        mat[(a * m + kk, b * m + ll)] = v;
                    }
                }
            }
        }
        let mut xi = vec![xi1];
        xi.extend(&self.transverse);
        BlochOperator { xi, period: self.wave.period, components: n, modes: m, matrix: mat }
    }
}

pub fn assemble(wave: &WaveCoefficients, xi: &[f64]) -> Result<BlochOperator> {
    if xi.is_empty() {
        return Err(Error::InvalidInput("xi must be non-empty".into()));
    }
    Ok(BlochAssembler::new(wave, &xi[1..])?.assemble(xi[0]))
}

impl BlochOperator {
    pub fn eigenvalues(&self) -> Result<Vec<Complex64>> {
        let mut ev = eigenvalues(&self.matrix)?;
        sort_by_real_desc(&mut ev);
        Ok(ev)
    }

    pub fn eigen(&self) -> Result<Eigen> {
        eigen(&self.matrix)
    }

    /// Mode-basis vector of physical samples `samples[i][a]`.
    pub fn modes_from_samples(&self, samples: &[Vec<Complex64>]) -> CVec {
        modes_from_samples(samples, self.components)
    }

    pub fn samples_from_modes(&self, v: &CVec) -> Vec<Vec<Complex64>> {
        samples_from_modes(v, self.components, self.modes)
    }

    /// `int_0^X f^* g` for mode-basis vectors.
    pub fn pairing(&self, f: &CVec, g: &CVec) -> Complex64 {
        f.dotc(g) * self.period
    }
}

pub fn modes_from_samples(samples: &[Vec<Complex64>], n: usize) -> CVec {
    let m = samples.len();
    let fft = FftPair::new(m);
    let mut out = CVec::zeros(n * m);
    for a in 0..n {
        let mut buf: Vec<Complex64> = samples.iter().map(|s| s[a]).collect();
        fft.forward(&mut buf);
        for (kk, z) in buf.into_iter().enumerate() {
            out[a * m + kk] = z / m as f64;
        }
    }
    out
}

pub fn samples_from_modes(v: &CVec, n: usize, m: usize) -> Vec<Vec<Complex64>> {
    let fft = FftPair::new(m);
    let mut out = vec![vec![c(0.0, 0.0); n]; m];
    for a in 0..n {
        let mut buf: Vec<Complex64> = (0..m).map(|kk| v[a * m + kk] * m as f64).collect();
        fft.inverse(&mut buf);
        for (i, z) in buf.into_iter().enumerate() {
            out[i][a] = z;
        }
    }
    out
}

fn sort_by_real_desc(ev: &mut [Complex64]) {
    ev.sort_by(|a, b| b.re.total_cmp(&a.re).then(b.im.total_cmp(&a.im)));
}

/// Left eigenvectors dual to selected columns of a right eigenvector matrix:
/// column `j` of the result `w` satisfies `w_j^* v_i = delta_ij` (plain
/// coefficient dot product).
pub fn dual_vectors(vectors: &CMat, indices: &[usize]) -> Result<CMat> {
    let n = vectors.nrows();
    let lu = vectors.transpose().lu();
    let mut out = CMat::zeros(n, indices.len());
    for (col, &i) in indices.iter().enumerate() {
        let mut e = CVec::zeros(n);
        e[i] = c(1.0, 0.0);
        let row = lu.solve(&e).ok_or_else(|| Error::Linalg("eigenvector matrix is singular".into()))?;
        out.set_column(col, &row.map(|z| z.conj()));
    }
    Ok(out)
}

/// The eigenvalue cluster of `L_0` at the origin.
#[derive(Debug, Clone)]
pub struct ZeroCluster {
    pub eigenvalues: Vec<Complex64>,
    /// Distance from the origin to the rest of the spectrum.
    pub gap: f64,
    /// Real orthonormal basis of the right generalised eigenspace (physical
    /// samples, `samples x n` per column block), as mode-basis columns.
    pub right: CMat,
    /// Real dual basis of the left generalised eigenspace with
    /// `int left_i^T right_j = delta_ij`, as mode-basis columns.
    pub left: CMat,
    /// Real basis functions sampled on the grid: `right_samples[j][i][a]`.
    pub right_samples: Vec<Vec<Vec<f64>>>,
    pub left_samples: Vec<Vec<Vec<f64>>>,
}

impl ZeroCluster {
    pub fn size(&self) -> usize {
        self.eigenvalues.len()
    }
}

/// Locates the cluster of `L_0` within `tol` of the origin and builds real
/// dual bases of its right and left generalised eigenspaces through a
/// contour-integral spectral projector.
pub fn zero_cluster(wave: &WaveCoefficients, tol: f64) -> Result<ZeroCluster> {
    let op = assemble(wave, &vec![0.0; wave.dim])?;
    let ev = op.eigenvalues()?;
    let (inside, outside): (Vec<Complex64>, Vec<Complex64>) = ev.iter().partition(|z| z.norm() < tol);
    let gap = outside.iter().map(|z| z.norm()).fold(f64::INFINITY, f64::min);
    if let Some(expected) = wave.critical {
        if inside.len() != expected {
            return Err(Error::ClusterCount { expected, found: inside.len() });
        }
    }
    if inside.is_empty() {
        return Err(Error::ClusterCount { expected: wave.critical.unwrap_or(1), found: 0 });
    }
    let size = inside.len();
    let spread = inside.iter().map(|z| z.norm()).fold(1e-14, f64::max);
    let radius = (spread * gap).sqrt();
    let nm = op.matrix.nrows();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let probe = CMat::from_fn(nm, size + 4, |_, _| c(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)));
    let nodes = 16;
    let mut right = CMat::zeros(nm, size + 4);
    let mut left = CMat::zeros(nm, size + 4);
    let adj = op.matrix.adjoint();
    for k in 0..nodes {
        let z = Complex64::from_polar(radius, 2.0 * PI * (k as f64 + 0.5) / nodes as f64);
        let shifted = CMat::identity(nm, nm) * z - &op.matrix;
        let r = shifted.lu().solve(&probe).ok_or_else(|| Error::Linalg("resolvent solve failed".into()))?;
        right += r * (z / nodes as f64);
        let shifted_adj = CMat::identity(nm, nm) * z.conj() - &adj;
        let l = shifted_adj.lu().solve(&probe).ok_or_else(|| Error::Linalg("resolvent solve failed".into()))?;
        left += l * (z.conj() / nodes as f64);
    }
    let n = wave.components;
    let m = wave.samples();
    let (right_samples, right_modes) = real_basis(&right, size, n, m)?;
    let (left_raw, left_modes) = real_basis(&left, size, n, m)?;
    let dx = wave.period / m as f64;
    let gram = RMat::from_fn(size, size, |i, j| {
        let mut acc = 0.0;
        for s in 0..m {
            for a in 0..n {
                acc += left_raw[i][s][a] * right_samples[j][s][a];
            }
        }
        acc * dx
    });
    let inv_t = gram
        .try_inverse()
        .ok_or_else(|| Error::Structural("left and right zero eigenspaces are not dual".into()))?
        .transpose();
    let left_samples: Vec<Vec<Vec<f64>>> = (0..size)
        .map(|j| {
            (0..m)
                .map(|s| (0..n).map(|a| (0..size).map(|i| left_raw[i][s][a] * inv_t[(i, j)]).sum()).collect())
                .collect()
        })
        .collect();
    let left_modes_dual = CMat::from_fn(nm, size, |r, j| (0..size).map(|i| left_modes[(r, i)] * inv_t[(i, j)]).sum());
    Ok(ZeroCluster {
        eigenvalues: inside,
        gap,
        right: right_modes,
        left: left_modes_dual,
        right_samples,
        left_samples,
    })
}

type RealBasis = (Vec<Vec<Vec<f64>>>, CMat);

fn real_basis(range: &CMat, size: usize, n: usize, m: usize) -> Result<RealBasis> {
    let nm = n * m;
    let mut stacked = RMat::zeros(nm, 2 * range.ncols());
    for col in 0..range.ncols() {
        let phys = samples_from_modes(&range.column(col).into_owned(), n, m);
        for (s, row) in phys.iter().enumerate() {
            for a in 0..n {
                stacked[(a * m + s, 2 * col)] = row[a].re;
                stacked[(a * m + s, 2 * col + 1)] = row[a].im;
            }
        }
    }
    let svd = svd_real(&stacked, false)?;
    let s0 = svd.s[0];
    if size < svd.s.len() && svd.s[size] > 1e-6 * s0 {
        return Err(Error::Structural("zero eigenspace has no real basis of the expected size".into()));
    }
    let norm = (m as f64).sqrt();
    let mut samples = Vec::with_capacity(size);
    let mut modes = CMat::zeros(nm, size);
    for j in 0..size {
        let f: Vec<Vec<f64>> = (0..m).map(|s| (0..n).map(|a| svd.u[(a * m + s, j)] * norm).collect()).collect();
        let cs: Vec<Vec<Complex64>> = f.iter().map(|r| r.iter().map(|&x| c(x, 0.0)).collect()).collect();
        modes.set_column(j, &modes_from_samples(&cs, n));
        samples.push(f);
    }
    Ok((samples, modes))
}

/// Options for following the critical eigenvalues along rays.
#[derive(Debug, Clone)]
pub struct TrackOptions {
    pub cluster_tol: f64,
    /// Only radii in `[fit_min, fit_max]` enter the coefficient fit.
    pub fit_min: f64,
    pub fit_max: f64,
}

impl Default for TrackOptions {
    fn default() -> Self {
        Self { cluster_tol: 1e-4, fit_min: 0.0, fit_max: f64::INFINITY }
    }
}

/// Critical eigenvalue branches `lambda_j(r xi_hat)` along rays.
#[derive(Debug, Clone)]
pub struct DispersionSurfaces {
    pub rays: Vec<Vec<f64>>,
    pub radii: Vec<f64>,
    /// `lambda[ray][branch][radius]`.
    pub lambda: Vec<Vec<Vec<Complex64>>>,
    /// Fitted `a_j` in `lambda_j = -i a_j r + b_j r^2`; real under stability.
    pub a_fit: Vec<Vec<Complex64>>,
    pub b_fit: Vec<Vec<Complex64>>,
    /// Root-mean-square residual of each fit, relative to `r`.
    pub fit_residual: Vec<Vec<f64>>,
    /// Largest `theta` with `Re lambda_j <= -theta r^2` over all samples.
    pub theta_fit: f64,
    /// Right eigenvectors (mode basis) at the two smallest radii, per ray.
    pub right_small: Vec<[CMat; 2]>,
    /// Dual left eigenvectors at the two smallest radii, per ray, normalised
    /// so that `int left_j^* right_k = delta_jk`.
    pub left_small: Vec<[CMat; 2]>,
    pub cluster: usize,
    /// Bases of the zero eigenspace at `xi = 0`.
    pub basis: ZeroCluster,
}

struct RadiusData {
    values: Vec<Complex64>,
    vectors: CMat,
    candidates: Vec<usize>,
}

/// Follows the critical branches along each ray through the given radii
/// (ascending), matching eigenvectors between consecutive radii.
pub fn track_surfaces(
    wave: &WaveCoefficients,
    rays: &[Vec<f64>],
    radii: &[f64],
    opts: &TrackOptions,
) -> Result<DispersionSurfaces> {
    if radii.len() < 2 || radii.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidInput("radii must be increasing with at least two entries".into()));
    }
    let cluster = zero_cluster(wave, opts.cluster_tol)?;
    let csize = cluster.size();
    let jobs: Vec<(usize, usize)> = (0..rays.len()).flat_map(|r| (0..radii.len()).map(move |k| (r, k))).collect();
    let data: Vec<Result<RadiusData>> = jobs
        .par_iter()
        .map(|&(ray, k)| {
            let xi: Vec<f64> = rays[ray].iter().map(|x| x * radii[k]).collect();
            let e = assemble(wave, &xi)?.eigen()?;
            let mut order: Vec<usize> = (0..e.values.len()).collect();
            order.sort_by(|&i, &j| e.values[i].norm().total_cmp(&e.values[j].norm()));
            order.truncate((2 * csize + 2).min(e.values.len()));
            Ok(RadiusData { values: e.values, vectors: e.vectors, candidates: order })
        })
        .collect();
    let data: Vec<RadiusData> = data.into_iter().collect::<Result<_>>()?;
    let nr = radii.len();
    let mut lambda = Vec::new();
    let mut right_small = Vec::new();
    let mut left_small = Vec::new();
    for (ray, _) in rays.iter().enumerate() {
        let mut branches: Vec<Vec<Complex64>> = vec![Vec::with_capacity(nr); csize];
        let mut prev: Option<CMat> = None;
        let mut small: Vec<(CMat, CMat)> = Vec::new();
        for (k, &r) in radii.iter().enumerate() {
            let d = &data[ray * nr + k];
            let chosen: Vec<usize> = match &prev {
                None => {
                    let mut first: Vec<usize> = d.candidates[..csize].to_vec();
                    first.sort_by(|&i, &j| (-d.values[i].im).total_cmp(&(-d.values[j].im)));
                    first
                }
                Some(p) => match_branches(p, d, csize).ok_or(Error::BranchAmbiguity { ray, radius: r })?,
            };
            let mut vecs = CMat::zeros(d.vectors.nrows(), csize);
            for (j, &idx) in chosen.iter().enumerate() {
                let mut v = d.vectors.column(idx).into_owned();
                v /= c(v.norm(), 0.0);
                if let Some(p) = &prev {
                    let ov = p.column(j).dotc(&v);
                    if ov.norm() > 0.0 {
                        v *= ov.conj() / ov.norm();
                    }
                }
                vecs.set_column(j, &v);
                branches[j].push(d.values[idx]);
            }
            if k < 2 {
                let mut left = dual_vectors(&d.vectors, &chosen)?;
                for (j, &idx) in chosen.iter().enumerate() {
                    let raw = d.vectors.column(idx);
                    let scale = raw.dotc(&vecs.column(j)) / raw.norm_squared();
                    let col = left.column(j) / (scale.conj() * wave.period);
                    left.set_column(j, &col);
                }
                small.push((vecs.clone(), left));
            }
            prev = Some(vecs);
        }
        let mut it = small.into_iter();
        let (r0, l0) = it.next().expect("two radii");
        let (r1, l1) = it.next().expect("two radii");
        right_small.push([r0, r1]);
        left_small.push([l0, l1]);
        lambda.push(branches);
    }
    let mut a_fit = Vec::new();
    let mut b_fit = Vec::new();
    let mut fit_residual = Vec::new();
    let mut theta = f64::INFINITY;
    for ray_branches in &lambda {
        let mut ar = Vec::new();
        let mut br = Vec::new();
        let mut rr = Vec::new();
        for br_vals in ray_branches {
            let pts: Vec<(f64, Complex64)> = radii
                .iter()
                .zip(br_vals)
                .filter(|(r, _)| **r >= opts.fit_min && **r <= opts.fit_max)
                .map(|(r, l)| (*r, *l))
                .collect();
            let (alpha, beta, res) = fit_dispersion(&pts);
            ar.push(I * alpha);
            br.push(beta);
            rr.push(res);
            for (r, l) in radii.iter().zip(br_vals) {
                theta = theta.min(-l.re / (r * r));
            }
        }
        a_fit.push(ar);
        b_fit.push(br);
        fit_residual.push(rr);
    }
    Ok(DispersionSurfaces {
        rays: rays.to_vec(),
        radii: radii.to_vec(),
        lambda,
        a_fit,
        b_fit,
        fit_residual,
        theta_fit: theta,
        right_small,
        left_small,
        cluster: csize,
        basis: cluster,
    })
}

/// Least-squares fit of `lambda / r = alpha + beta r + gamma r^2`; the
/// cubic term only absorbs curvature so that `alpha` and `beta` are unbiased.
/// Falls back to a linear fit with fewer than four points.
fn fit_dispersion(pts: &[(f64, Complex64)]) -> (Complex64, Complex64, f64) {
    let terms = if pts.len() >= 4 { 3 } else { 2 };
    let mut normal = RMat::zeros(terms, terms);
    let mut rhs = CMat::zeros(terms, 1);
    for &(r, l) in pts {
        let basis: Vec<f64> = (0..terms).map(|p| r.powi(p as i32)).collect();
        for p in 0..terms {
            for q in 0..terms {
                normal[(p, q)] += basis[p] * basis[q];
            }
            rhs[(p, 0)] += l / r * basis[p];
        }
    }
    let normal = normal.map(|x| c(x, 0.0));
    let coef = normal.lu().solve(&rhs).unwrap_or_else(|| CMat::zeros(terms, 1));
    let model = |r: f64| (0..terms).fold(c(0.0, 0.0), |acc, p| acc + coef[(p, 0)] * r.powi(p as i32));
    let k = pts.len() as f64;
    let res = (pts.iter().map(|&(r, l)| (l / r - model(r)).norm_sqr()).sum::<f64>() / k).sqrt();
    (coef[(0, 0)], coef[(1, 0)], res)
}

fn match_branches(prev: &CMat, d: &RadiusData, csize: usize) -> Option<Vec<usize>> {
    let mut overlaps = Vec::new();
    for j in 0..csize {
        let p = prev.column(j);
        for &idx in &d.candidates {
            let v = d.vectors.column(idx);
            overlaps.push((p.dotc(&v).norm() / v.norm(), j, idx));
        }
    }
    overlaps.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut out = vec![usize::MAX; csize];
    let mut used = Vec::new();
    for (ov, j, idx) in overlaps {
        if out[j] != usize::MAX || used.contains(&idx) {
            continue;
        }
        if ov < 0.5 {
            return None;
        }
        out[j] = idx;
        used.push(idx);
    }
    if out.contains(&usize::MAX) {
        None
    } else {
        Some(out)
    }
}

/// Largest real part of `sigma(L_xi)` over a frequency grid, with the
/// critical cluster at `xi = 0` excluded.
#[derive(Debug, Clone)]
pub struct SpectralScan {
    pub xi: Vec<Vec<f64>>,
    pub max_real: Vec<f64>,
    pub worst_index: usize,
    /// `xi` values where `max Re sigma > -margin * min(|xi|^2, 1)`.
    pub violations: Vec<usize>,
}

impl SpectralScan {
    pub fn stable(&self) -> bool {
        self.violations.is_empty()
    }
}

pub fn scan_spectrum(wave: &WaveCoefficients, grid: &[Vec<f64>], margin: f64, cluster_tol: f64) -> Result<SpectralScan> {
    let results: Vec<Result<f64>> = grid
        .par_iter()
        .map(|xi| {
            let ev = assemble(wave, xi)?.eigenvalues()?;
            let at_origin = xi.iter().all(|&x| x == 0.0);
            Ok(ev
                .iter()
                .filter(|z| !(at_origin && z.norm() < cluster_tol))
                .map(|z| z.re)
                .fold(f64::NEG_INFINITY, f64::max))
        })
        .collect();
    let max_real: Vec<f64> = results.into_iter().collect::<Result<_>>()?;
    let mut worst_index = 0;
    let mut violations = Vec::new();
    for (i, (xi, &mr)) in grid.iter().zip(&max_real).enumerate() {
        if mr > max_real[worst_index] {
            worst_index = i;
        }
        let r2 = xi.iter().map(|x| x * x).sum::<f64>().min(1.0);
        let at_origin = r2 == 0.0;
        if (!at_origin && mr > -margin * r2) || (at_origin && mr >= 0.0) {
            violations.push(i);
        }
    }
    Ok(SpectralScan { xi: grid.to_vec(), max_real, worst_index, violations })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityOptions {
    /// Points per zone sweep in `xi_1`.
    pub zone_points: usize,
    /// Transverse frequencies `xi_tilde` swept together with `xi_1`.
    pub transverse: Vec<Vec<f64>>,
    pub d1_margin: f64,
    pub cluster_tol: f64,
    /// Unit directions and radii of the small-frequency rays.
    pub rays: Vec<Vec<f64>>,
    pub radii: Vec<f64>,
}

impl StabilityOptions {
    pub fn for_dim(dim: usize) -> Self {
        let rays = match dim {
            1 => vec![vec![1.0], vec![-1.0]],
            _ => (0..8)
                .map(|k| {
                    let t = PI * k as f64 / 4.0;
                    let mut v = vec![0.0; dim];
                    v[0] = t.cos();
                    v[1] = t.sin();
                    v
                })
                .collect(),
        };
        Self {
            zone_points: 64,
            transverse: vec![vec![0.0; dim - 1]],
            d1_margin: 1e-6,
            cluster_tol: 1e-4,
            rays,
            radii: log_radii(1e-3, 1e-1, 7),
        }
    }
}

/// Spectral stability: (D1) from a zone sweep, (D2) from the critical
/// branches along small rays.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StabilityReport {
    pub d1_pass: bool,
    pub d2_pass: bool,
    /// Largest `theta` with `Re lambda_j(xi) <= -theta |xi|^2` on the rays.
    pub theta_fit: f64,
    /// `-max Re sigma` over the sweep, the cluster at the origin excluded.
    pub margin: f64,
    pub worst_xi: Vec<f64>,
    pub worst_real: f64,
    /// Frequencies failing the sweep test.
    pub unstable_xi: Vec<Vec<f64>>,
    /// Whether the worst point of the sweep lies away from the small rays.
    pub worst_is_high_frequency: bool,
    pub cluster: usize,
    pub xi: Vec<Vec<f64>>,
    pub max_real: Vec<f64>,
}

pub fn verify_stability(wave: &WaveCoefficients, opts: &StabilityOptions) -> Result<StabilityReport> {
    if opts.transverse.iter().any(|t| t.len() + 1 != wave.dim) || opts.rays.iter().any(|r| r.len() != wave.dim) {
        return Err(Error::InvalidInput(format!("frequencies must have {} entries", wave.dim)));
    }
    let cluster = zero_cluster(wave, opts.cluster_tol)?;
    let grid: Vec<Vec<f64>> = opts
        .transverse
        .iter()
        .flat_map(|t| zone_grid(wave.period, opts.zone_points, t))
        .chain(std::iter::once(vec![0.0; wave.dim]))
        .collect();
    let scan = scan_spectrum(wave, &grid, opts.d1_margin, opts.cluster_tol)?;
    let surfaces = track_surfaces(
        wave,
        &opts.rays,
        &opts.radii,
        &TrackOptions { cluster_tol: opts.cluster_tol, ..TrackOptions::default() },
    )?;
    let worst_xi = scan.xi[scan.worst_index].clone();
    let worst_real = scan.max_real[scan.worst_index];
    let r_max = opts.radii.last().copied().unwrap_or(0.0);
    let worst_norm = worst_xi.iter().map(|x| x * x).sum::<f64>().sqrt();
    Ok(StabilityReport {
        d1_pass: scan.stable(),
        d2_pass: surfaces.theta_fit > 0.0,
        theta_fit: surfaces.theta_fit,
        margin: -worst_real,
        worst_is_high_frequency: worst_norm > r_max,
        unstable_xi: scan.violations.iter().map(|&i| scan.xi[i].clone()).collect(),
        worst_xi,
        worst_real,
        cluster: cluster.size(),
        xi: scan.xi,
        max_real: scan.max_real,
    })
}

/// Uniform grid of `count` points on the first Brillouin zone, with the
/// transverse part fixed.
pub fn zone_grid(period: f64, count: usize, transverse: &[f64]) -> Vec<Vec<f64>> {
    (0..count)
        .map(|k| {
            let mut xi = vec![-PI / period + 2.0 * PI * k as f64 / (count as f64 * period)];
            xi.extend(transverse);
            xi
        })
        .collect()
}

pub fn log_radii(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    let (a, b) = (lo.ln(), hi.ln());
    (0..count).map(|k| (a + (b - a) * k as f64 / (count - 1).max(1) as f64).exp()).collect()
}

/// Applies `L_xi` directly (without assembling) to a mode-basis vector;
/// used as an independent check of the assembled matrix.
pub fn apply_collocation(wave: &WaveCoefficients, xi: &[f64], samples: &[Vec<Complex64>]) -> Vec<Vec<Complex64>> {
    let n = wave.components;
    let m = wave.samples();
    let fields = wave.combined(&xi[1..]);
    let kappa = wavenumbers(m, wave.period, xi[0]);
    let fft = FftPair::new(m);
    let deriv = |f: &[Vec<Complex64>]| -> Vec<Vec<Complex64>> {
        let mut out = vec![vec![c(0.0, 0.0); n]; m];
        for a in 0..n {
            let mut buf: Vec<Complex64> = f.iter().map(|s| s[a]).collect();
            fft.forward(&mut buf);
            for (kk, z) in buf.iter_mut().enumerate() {
                *z *= I * kappa[kk];
            }
            fft.inverse(&mut buf);
            for (i, z) in buf.into_iter().enumerate() {
                out[i][a] = z;
            }
        }
        out
    };
    let mul = |f: usize, v: &[Vec<Complex64>]| -> Vec<Vec<Complex64>> {
        v.iter()
            .enumerate()
            .map(|(i, s)| {
                let vv = DVector::from_column_slice(s);
                let mm = fields[i][f].map(|x| c(x, 0.0));
                (mm * vv).as_slice().to_vec()
            })
            .collect()
    };
    let add = |acc: &mut Vec<Vec<Complex64>>, t: &[Vec<Complex64>], w: Complex64| {
        for (x, y) in acc.iter_mut().zip(t) {
            for (p, q) in x.iter_mut().zip(y) {
                *p += w * q;
            }
        }
    };
    let dv = deriv(samples);
    let mut out = vec![vec![c(0.0, 0.0); n]; m];
    add(&mut out, &deriv(&mul(0, &dv)), c(1.0, 0.0));
    add(&mut out, &deriv(&mul(1, samples)), c(-1.0, 0.0));
    add(&mut out, &mul(3, &dv), I);
    add(&mut out, &deriv(&mul(2, samples)), I);
    add(&mut out, &mul(4, samples), -I);
    add(&mut out, &mul(5, samples), c(-1.0, 0.0));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::BurgersPairParams;
    use crate::ModelSpec;
    use proptest::prelude::*;
    use rand::Rng;

    fn synthetic(m: usize) -> WaveCoefficients {
        let model = ModelSpec::burgers_pair(&BurgersPairParams::default()).unwrap();
        let profile: Vec<Vec<f64>> = (0..m)
            .map(|i| {
                let t = 2.0 * PI * i as f64 / m as f64;
                vec![0.4 * t.sin(), 0.3 * t.cos()]
            })
            .collect();
        WaveCoefficients::from_profile(&model, &profile, 1.0, 0.0).unwrap()
    }

    fn random_band_limited(m: usize, n: usize, seed: u64) -> Vec<Vec<Complex64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let coeffs: Vec<Vec<Complex64>> = (0..n)
            .map(|_| (0..m / 4).map(|_| c(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect())
            .collect();
        (0..m)
            .map(|s| {
                (0..n)
                    .map(|a| {
                        coeffs[a]
                            .iter()
                            .enumerate()
                            .map(|(k, z)| {
                                let k = k as i64 - (m / 8) as i64;
                                z * Complex64::from_polar(1.0, 2.0 * PI * (k * s as i64) as f64 / m as f64)
                            })
                            .sum()
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn stability_report_on_baselines() {
        let heat = ModelSpec::heat(1, 1, 1.0).unwrap();
        let wave = WaveCoefficients::constant(&heat, &[0.0], 1.0, 16).unwrap();
        let r = verify_stability(&wave, &StabilityOptions::for_dim(1)).unwrap();
        assert!(r.d1_pass && r.d2_pass);
        assert!((r.theta_fit - 1.0).abs() < 1e-9, "{}", r.theta_fit);
        let r = verify_stability(&synthetic(16), &StabilityOptions::for_dim(1)).unwrap();
        assert!(r.d1_pass && r.d2_pass && r.theta_fit > 0.0);

        // Elliptic symbol -i xi A: eigenvalues +-xi - xi^2 with positive real part for |xi| < 1.
        let rot = RMat::from_row_slice(2, 2, &[0.0, -1.0, 1.0, 0.0]);
        let model = ModelSpec::constant(vec![rot], vec![vec![RMat::identity(2, 2)]]).unwrap();
        let wave = WaveCoefficients::constant(&model, &[0.0, 0.0], 1.0, 16).unwrap();
        let r = verify_stability(&wave, &StabilityOptions::for_dim(1)).unwrap();
        assert!(!r.d1_pass && !r.d2_pass);
        assert!((r.worst_real - 0.25).abs() < 2e-3, "{}", r.worst_real);
        assert!(r.unstable_xi.iter().all(|x| x[0].abs() < 1.0 && x[0] != 0.0));
    }

    #[test]
    fn heat_spectrum_is_exact() {
        let model = ModelSpec::heat(2, 1, 0.5).unwrap();
        let wave = WaveCoefficients::constant(&model, &[0.0], 3.0, 16).unwrap();
        let (xi1, xi2) = (0.4, -0.7);
        let ev = assemble(&wave, &[xi1, xi2]).unwrap().eigenvalues().unwrap();
        let mut exact: Vec<f64> =
            (-8..8).map(|k| -0.5 * ((2.0 * PI * k as f64 / 3.0 + xi1).powi(2) + xi2 * xi2)).collect();
        exact.sort_by(|a, b| b.total_cmp(a));
        for (z, e) in ev.iter().zip(&exact) {
            assert!((z - e).norm() < 1e-10 * (1.0 + e.abs()), "{z} vs {e}");
        }
    }

    #[test]
    fn assembled_matrix_matches_direct_application() {
        let model = ModelSpec::burgers_pair(&BurgersPairParams {
            dim: 2,
            transverse_speeds: vec![0.4],
            transverse_diffusion: 0.6,
            ..Default::default()
        })
        .unwrap();
        let m = 32;
        let profile: Vec<Vec<f64>> = (0..m)
            .map(|i| {
                let t = 2.0 * PI * i as f64 / m as f64;
                vec![0.4 * t.sin(), 0.3 * t.cos()]
            })
            .collect();
        let wave = WaveCoefficients::from_profile(&model, &profile, 1.0, 0.0).unwrap();
        let xi = [0.37, -0.8];
        let op = assemble(&wave, &xi).unwrap();
        let v = random_band_limited(m, 2, 3);
        let direct = apply_collocation(&wave, &xi, &v);
        let via = op.samples_from_modes(&(&op.matrix * op.modes_from_samples(&v)));
        let scale = direct.iter().flatten().map(|z| z.norm()).fold(0.0, f64::max);
        for (x, y) in direct.iter().flatten().zip(via.iter().flatten()) {
            assert!((x - y).norm() < 1e-11 * scale);
        }
    }

    #[test]
    fn translation_mode_is_in_kernel() {
        let model = ModelSpec::vdw_cubic();
        let guess = crate::profile::ProfileGuess {
            anchor: vec![1.3, 0.0],
            speed: 0.0,
            normal: vec![1.0],
            flux_constant: vec![0.0, 0.0],
            period: 5.0,
        };
        let opts = crate::profile::ProfileOptions { samples: 64, ..Default::default() };
        let wp = crate::profile::find_periodic(&model, &guess, &opts).unwrap();
        let wave = WaveCoefficients::from_wave(&model, &wp).unwrap();
        let du: Vec<Vec<Complex64>> =
            wave.profile_derivative.iter().map(|r| r.iter().map(|&x| c(x, 0.0)).collect()).collect();
        let out = apply_collocation(&wave, &[0.0], &du);
        let size = du.iter().flatten().map(|z| z.norm()).fold(0.0, f64::max);
        let res = out.iter().flatten().map(|z| z.norm()).fold(0.0, f64::max);
        assert!(res < 1e-6 * size, "{res}");
        let cl = zero_cluster(&wave, 1e-4).unwrap();
        assert_eq!(cl.size(), 3);
    }

    #[test]
    fn constant_state_bases_are_constant_functions() {
        let model = ModelSpec::constant(
            vec![RMat::zeros(2, 2)],
            vec![vec![RMat::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.5])]],
        )
        .unwrap();
        let wave = WaveCoefficients::constant(&model, &[0.0, 0.0], 1.0, 8).unwrap();
        let cl = zero_cluster(&wave, 1e-4).unwrap();
        for basis in [&cl.right_samples, &cl.left_samples] {
            for f in basis.iter() {
                for s in f.iter() {
                    assert!(s.iter().zip(&f[0]).all(|(x, y)| (x - y).abs() < 1e-12));
                }
            }
        }
    }

    #[test]
    fn cluster_bases_are_dual() {
        let wave = synthetic(32);
        let cl = zero_cluster(&wave, 1e-4).unwrap();
        assert_eq!(cl.size(), 2);
        let dx = wave.period / 32.0;
        for i in 0..2 {
            for j in 0..2 {
                let mut acc = 0.0;
                for s in 0..32 {
                    for a in 0..2 {
                        acc += cl.left_samples[i][s][a] * cl.right_samples[j][s][a];
                    }
                }
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((acc * dx - want).abs() < 1e-10);
            }
        }
        let op = assemble(&wave, &[0.0]).unwrap();
        let image = &op.matrix * &cl.right;
        assert!(image.norm() < 1e-8 * op.matrix.norm() * cl.right.norm());
        let left_image = op.matrix.adjoint() * &cl.left;
        assert!(left_image.norm() < 1e-8 * op.matrix.norm() * cl.left.norm());
    }

    #[test]
    fn tracked_speeds_match_first_order_perturbation() {
        let wave = synthetic(32);
        let cl = zero_cluster(&wave, 1e-4).unwrap();
        let h = 1e-5;
        let dl = (assemble(&wave, &[h]).unwrap().matrix - assemble(&wave, &[-h]).unwrap().matrix) / c(2.0 * h, 0.0);
        let reduced = cl.left.adjoint() * dl * &cl.right * c(wave.period, 0.0);
        let mut speeds: Vec<f64> = eigenvalues(&reduced).unwrap().iter().map(|z| (z * I).re).collect();
        speeds.sort_by(|a, b| a.total_cmp(b));
        let surf = track_surfaces(&wave, &[vec![1.0]], &log_radii(1e-4, 1e-2, 9), &TrackOptions::default()).unwrap();
        let mut fitted: Vec<f64> = surf.a_fit[0].iter().map(|z| z.re).collect();
        fitted.sort_by(|a, b| a.total_cmp(b));
        for (a, b) in speeds.iter().zip(&fitted) {
            assert!((a - b).abs() < 1e-4 * speeds.iter().map(|x| x.abs()).fold(0.0, f64::max), "{a} vs {b}");
        }
        assert!(surf.theta_fit > 0.0);
    }

    #[test]
    fn stable_synthetic_scan() {
        let wave = synthetic(32);
        let scan = scan_spectrum(&wave, &zone_grid(1.0, 32, &[]), 1e-6, 1e-4).unwrap();
        assert!(scan.stable());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn spectrum_is_conjugation_symmetric(xi in -3.0f64..3.0) {
            let wave = synthetic(16);
            let a = assemble(&wave, &[xi]).unwrap().eigenvalues().unwrap();
            let b = assemble(&wave, &[-xi]).unwrap().eigenvalues().unwrap();
            // The unpaired Nyquist mode only perturbs the unresolved large eigenvalues.
            for z in a.iter().filter(|z| z.norm() < 50.0) {
                let best = b.iter().map(|w| (w.conj() - z).norm()).fold(f64::INFINITY, f64::min);
                prop_assert!(best < 1e-8 * (1.0 + z.norm()));
            }
        }

        #[test]
        fn spectrum_periodic_in_xi(xi in -3.0f64..3.0) {
            let wave = synthetic(16);
            let a = assemble(&wave, &[xi]).unwrap().eigenvalues().unwrap();
            let b = assemble(&wave, &[xi + 2.0 * PI]).unwrap().eigenvalues().unwrap();
            // Shifting xi by 2 pi / X relabels Fourier modes; the resolved part of the
            // spectrum (small |lambda|) must coincide.
            for z in a.iter().filter(|z| z.norm() < 50.0) {
                let best = b.iter().map(|w| (w - z).norm()).fold(f64::INFINITY, f64::min);
                prop_assert!(best < 1e-6 * (1.0 + z.norm()));
            }
        }
    }
}
