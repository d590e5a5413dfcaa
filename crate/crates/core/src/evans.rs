//! Periodic Evans function `D(lambda, xi) = det(Phi(lambda) - exp(i xi_1 X) I)`.
//!
//! The eigenvalue problem `(L_xi~ - lambda) w = 0` is written as a first-order
//! system for `(w, z)` with the flux variable
//! `z = B^{11} w' - A^1 w + i B^{1t} w`, where `B^{1t} = sum_k B^{1k} xi_k`
//! over transverse `k`. `Phi` is the monodromy over one period; it is
//! frame-independent, so `D` coincides with the determinant taken in
//! `(w, w')` coordinates with the identity frame at `x = 0`. For large
//! `|lambda|` the period is split into segments whenever the propagated frame
//! grows past a threshold, and `D` is evaluated as the determinant of the
//! block-cyclic matrix of segment monodromies.

use std::f64::consts::PI;

use num_complex::Complex64;
use rayon::prelude::*;

use crate::coefficients::WaveCoefficients;
use crate::error::{Error, Result};
use crate::homogenized::HomogenizedSystem;
use crate::linalg::{c, condition, scaled_det, CMat, I};
use crate::ode::{integrate_until, Tolerances};
use crate::spectral::PeriodicSeries;

#[derive(Debug, Clone, Copy)]
pub struct EvansOptions {
    pub tol: Tolerances,
    /// A new shooting segment starts once a frame entry exceeds this size.
    pub growth_limit: f64,
    /// Checkpoints per period at which the growth is inspected.
    pub checkpoints: usize,
    /// Determinant matrices above this condition number are flagged.
    pub cond_max: f64,
}

impl Default for EvansOptions {
    fn default() -> Self {
        Self { tol: Tolerances { rtol: 1e-10, atol: 1e-12, max_steps: 1_000_000 }, growth_limit: 1e4, checkpoints: 32, cond_max: 1e12 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvansValue {
    pub lambda: Complex64,
    pub xi1: f64,
    pub xi_tilde: Vec<f64>,
    pub value: Complex64,
    pub log_abs: f64,
    /// Condition number of the determinant matrix.
    pub basis_condition: f64,
    pub ill_conditioned: bool,
    /// `|(xi, lambda)|`.
    pub radius_scale: f64,
    pub segments: usize,
}

/// Evaluator for a fixed transverse wavenumber.
pub struct EvansSystem<'a> {
    wave: &'a WaveCoefficients,
    series: PeriodicSeries,
    transverse: Vec<f64>,
    opts: EvansOptions,
}

/// Fundamental matrix samples in `(w, w')` coordinates; the true frame at
/// `points[k]` is `frames[k] * exp(log_scale[k])`.
#[derive(Debug, Clone)]
pub struct EigenBasis {
    pub points: Vec<f64>,
    pub frames: Vec<CMat>,
    pub log_scale: Vec<f64>,
}

/// Segment monodromies `Phi_1, ..., Phi_K` with their breakpoints.
#[derive(Debug, Clone)]
pub struct Monodromy {
    pub lambda: Complex64,
    pub segments: Vec<CMat>,
    pub breakpoints: Vec<f64>,
}

impl Monodromy {
    /// Product `Phi_K ... Phi_1` (may overflow for large `|lambda|`).
    pub fn product(&self) -> CMat {
        let size = self.segments[0].nrows();
        self.segments.iter().fold(CMat::identity(size, size), |acc, p| p * acc)
    }

    /// `det(Phi_K ... Phi_1 - z I)` through the block-cyclic matrix.
    pub fn characteristic(&self, z: Complex64) -> (crate::linalg::ScaledDet, f64) {
        let k = self.segments.len();
        let s = self.segments[0].nrows();
        let mut big = CMat::zeros(k * s, k * s);
        for (i, p) in self.segments.iter().enumerate() {
            big.view_mut((i * s, i * s), (s, s)).copy_from(p);
            if i + 1 < k {
                for r in 0..s {
                    big[(i * s + r, (i + 1) * s + r)] = c(-1.0, 0.0);
                }
            }
        }
        for r in 0..s {
            big[((k - 1) * s + r, r)] -= z;
        }
        (scaled_det(&big), condition(&big))
    }
}

impl<'a> EvansSystem<'a> {
    pub fn new(wave: &'a WaveCoefficients, transverse: &[f64], opts: EvansOptions) -> Result<Self> {
        if transverse.len() + 1 != wave.dim {
            return Err(Error::InvalidInput(format!("xi must have {} entries", wave.dim)));
        }
        Ok(Self { wave, series: wave.series(transverse), transverse: transverse.to_vec(), opts })
    }

    /// First-order system matrix at `x` in `(w, z)` block order.
    pub fn system_matrix(&self, x: f64, lambda: Complex64) -> Result<CMat> {
        let n = self.wave.components;
        let mut vals = vec![0.0; 6 * n * n];
        self.series.eval(x, &mut vals);
        let field = |f: usize| CMat::from_fn(n, n, |a, b| c(vals[f * n * n + a * n + b], 0.0));
        let (b11, a1, b1t, bt1, at, btt) = (field(0), field(1), field(2), field(3), field(4), field(5));
        let binv = b11.try_inverse().ok_or_else(|| Error::Ellipticity("B^11 is singular".into()))?;
        let drift = a1 - b1t * I;
        let top_left = &binv * &drift;
        let bottom_right = bt1 * (-I) * &binv;
        let bottom_left = &bottom_right * &drift + at * I + btt + CMat::identity(n, n) * lambda;
        let mut m = CMat::zeros(2 * n, 2 * n);
        m.view_mut((0, 0), (n, n)).copy_from(&top_left);
        m.view_mut((0, n), (n, n)).copy_from(&binv);
        m.view_mut((n, 0), (n, n)).copy_from(&bottom_left);
        m.view_mut((n, n), (n, n)).copy_from(&bottom_right);
        Ok(m)
    }

    pub fn monodromy(&self, lambda: Complex64) -> Result<Monodromy> {
        let n = self.wave.components;
        let s = 2 * n;
        let period = self.wave.period;
        let checkpoints: Vec<f64> = (1..=self.opts.checkpoints).map(|k| period * k as f64 / self.opts.checkpoints as f64).collect();
        let mut segments = Vec::new();
        let mut breakpoints = vec![0.0];
        let mut x0 = 0.0;
        while x0 < period {
            let stops: Vec<f64> = checkpoints.iter().copied().filter(|&t| t > x0 + 1e-14 * period).collect();
            let mut y0 = vec![c(0.0, 0.0); s * s];
            for i in 0..s {
                y0[i * s + i] = c(1.0, 0.0);
            }
            let limit = self.opts.growth_limit;
            let (y, reached) = integrate_until(
                |x, y: &[Complex64], dy: &mut [Complex64]| self.rhs(x, lambda, y, dy),
                x0,
                &y0,
                &stops,
                &self.opts.tol,
                |_, _, y| y.iter().all(|z| z.norm() <= limit),
            )?;
            segments.push(CMat::from_column_slice(s, s, &y));
            breakpoints.push(reached);
            if reached <= x0 {
                return Err(Error::StepUnderflow { t: x0 });
            }
            x0 = reached;
        }
        Ok(Monodromy { lambda, segments, breakpoints })
    }

    /// Change of frame from `(w, w')` to `(w, z)` at `x`.
    fn flux_frame(&self, x: f64) -> Result<CMat> {
        let n = self.wave.components;
        let mut vals = vec![0.0; 6 * n * n];
        self.series.eval(x, &mut vals);
        let field = |f: usize| CMat::from_fn(n, n, |a, b| c(vals[f * n * n + a * n + b], 0.0));
        let drift = field(1) - field(2) * I;
        let mut t = CMat::zeros(2 * n, 2 * n);
        for i in 0..n {
            t[(i, i)] = c(1.0, 0.0);
        }
        t.view_mut((n, 0), (n, n)).copy_from(&(-drift));
        t.view_mut((n, n), (n, n)).copy_from(&field(0));
        Ok(t)
    }

    /// Fundamental solutions `(w, w')` starting from the identity frame,
    /// sampled at `points`. Each sample is stored as a unit-scaled frame
    /// together with the log of the removed scale.
    pub fn eigen_basis(&self, lambda: Complex64, points: &[f64]) -> Result<EigenBasis> {
        let s = 2 * self.wave.components;
        let t0 = self.flux_frame(0.0)?;
        let mut frame = t0.clone();
        let mut log_scale = 0.0;
        let mut x0 = 0.0;
        let mut frames = Vec::with_capacity(points.len());
        let mut scales = Vec::with_capacity(points.len());
        for &x in points {
            if x < x0 {
                return Err(Error::InvalidInput("sample points must be increasing and non-negative".into()));
            }
            if x > x0 {
                let (y, _) = integrate_until(
                    |x, y: &[Complex64], dy: &mut [Complex64]| self.rhs(x, lambda, y, dy),
                    x0,
                    frame.as_slice(),
                    &[x],
                    &self.opts.tol,
                    |_, _, _| true,
                )?;
                frame = CMat::from_column_slice(s, s, &y);
                let big = frame.iter().map(|z| z.norm()).fold(0.0, f64::max);
                if big > 0.0 {
                    frame /= c(big, 0.0);
                    log_scale += big.ln();
                }
                x0 = x;
            }
            let back = self.flux_frame(x)?.try_inverse().ok_or_else(|| Error::Ellipticity("B^11 is singular".into()))?;
            frames.push(back * &frame);
            scales.push(log_scale);
        }
        Ok(EigenBasis { points: points.to_vec(), frames, log_scale: scales })
    }

    fn rhs(&self, x: f64, lambda: Complex64, y: &[Complex64], dy: &mut [Complex64]) -> Result<()> {
        let s = 2 * self.wave.components;
        let m = self.system_matrix(x, lambda)?;
        for col in 0..s {
            for r in 0..s {
                let mut acc = c(0.0, 0.0);
                for k in 0..s {
                    acc += m[(r, k)] * y[col * s + k];
                }
                dy[col * s + r] = acc;
            }
        }
        Ok(())
    }

    pub fn evaluate(&self, lambda: Complex64, xi1: f64) -> Result<EvansValue> {
        let mono = self.monodromy(lambda)?;
        Ok(self.evaluate_from(&mono, xi1))
    }

    pub fn evaluate_from(&self, mono: &Monodromy, xi1: f64) -> EvansValue {
        let z = Complex64::from_polar(1.0, xi1 * self.wave.period);
        let (det, cond) = mono.characteristic(z);
        let radius_scale =
            (xi1 * xi1 + self.transverse.iter().map(|x| x * x).sum::<f64>() + mono.lambda.norm_sqr()).sqrt();
        EvansValue {
            lambda: mono.lambda,
            xi1,
            xi_tilde: self.transverse.clone(),
            value: det.value(),
            log_abs: det.log_abs,
            basis_condition: cond,
            ill_conditioned: !(cond <= self.opts.cond_max),
            radius_scale,
            segments: mono.segments.len(),
        }
    }
}

pub fn evans(wave: &WaveCoefficients, lambda: Complex64, xi: &[f64], opts: &EvansOptions) -> Result<EvansValue> {
    if xi.is_empty() {
        return Err(Error::InvalidInput("xi must be non-empty".into()));
    }
    EvansSystem::new(wave, &xi[1..], *opts)?.evaluate(lambda, xi[0])
}

/// Circle in the `lambda` plane traversed counter-clockwise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Contour {
    pub center: Complex64,
    pub radius: f64,
}

impl Contour {
    pub fn point(&self, theta: f64) -> Complex64 {
        self.center + Complex64::from_polar(self.radius, theta)
    }
}

#[derive(Debug, Clone)]
pub struct Winding {
    pub count: i64,
    pub raw: f64,
    /// `(theta, lambda, D)` at every sample.
    pub samples: Vec<(f64, Complex64, Complex64)>,
    pub min_abs: f64,
}

/// Winding number of `D(., xi)` around `contour`, refining the sampling until
/// consecutive arguments differ by less than `max_turn`.
pub fn winding(wave: &WaveCoefficients, xi: &[f64], contour: Contour, opts: &EvansOptions, max_turn: f64) -> Result<Winding> {
    let sys = EvansSystem::new(wave, &xi[1..], *opts)?;
    let eval = |th: f64| -> Result<(f64, Complex64, Complex64)> {
        let l = contour.point(th);
        Ok((th, l, sys.evaluate(l, xi[0])?.value))
    };
    let initial = 64;
    let thetas: Vec<f64> = (0..=initial).map(|k| 2.0 * PI * k as f64 / initial as f64).collect();
    let mut samples: Vec<(f64, Complex64, Complex64)> = thetas.par_iter().map(|&t| eval(t)).collect::<Result<_>>()?;
    for _ in 0..14 {
        let bad: Vec<usize> = (0..samples.len() - 1)
            .filter(|&k| (samples[k + 1].2 / samples[k].2).arg().abs() >= max_turn)
            .collect();
        if bad.is_empty() {
            break;
        }
        let mids: Vec<(f64, Complex64, Complex64)> =
            bad.par_iter().map(|&k| eval(0.5 * (samples[k].0 + samples[k + 1].0))).collect::<Result<_>>()?;
        samples.extend(mids);
        samples.sort_by(|a, b| a.0.total_cmp(&b.0));
    }
    let max_abs = samples.iter().map(|s| s.2.norm()).fold(0.0, f64::max);
    let (min_abs, at) = samples.iter().map(|s| (s.2.norm(), s.1)).fold((f64::INFINITY, c(0.0, 0.0)), |a, b| if b.0 < a.0 { b } else { a });
    if min_abs <= 1e-13 * max_abs {
        return Err(Error::ContourHitsZero { lambda: format!("{at}"), distance: min_abs });
    }
    let mut total = 0.0;
    for k in 0..samples.len() - 1 {
        let turn = (samples[k + 1].2 / samples[k].2).arg();
        if turn.abs() >= max_turn {
            return Err(Error::Resolution(format!("argument jump {turn:.3} near theta = {:.6}", samples[k].0)));
        }
        total += turn;
    }
    let raw = total / (2.0 * PI);
    let count = raw.round();
    if (raw - count).abs() > 0.1 {
        return Err(Error::NonIntegerWinding { value: raw });
    }
    Ok(Winding { count: count as i64, raw, samples, min_abs })
}

/// A direction `(xi_hat, lambda_hat)` in the joint low-frequency space.
#[derive(Debug, Clone, PartialEq)]
pub struct JointRay {
    pub xi: Vec<f64>,
    pub lambda: Complex64,
}

impl JointRay {
    pub fn normalized(xi: Vec<f64>, lambda: Complex64) -> Self {
        let norm = (xi.iter().map(|x| x * x).sum::<f64>() + lambda.norm_sqr()).sqrt();
        Self { xi: xi.iter().map(|x| x / norm).collect(), lambda: lambda / norm }
    }
}

#[derive(Debug, Clone)]
pub struct LowFrequency {
    pub rays: Vec<JointRay>,
    /// Rays dropped because `Delta` vanishes on them.
    pub excluded: Vec<usize>,
    pub radii: Vec<f64>,
    /// `values[ray][radius] = D(rho lambda_hat, rho xi_hat)` for kept rays.
    pub values: Vec<Vec<Complex64>>,
    /// Fitted vanishing order per kept ray.
    pub orders: Vec<f64>,
    pub vanish_order: f64,
    /// Per-ray limit of `D / (rho^(n+1) Delta(xi_hat, lambda_hat))`,
    /// extrapolated linearly in `rho` from the two smallest radii.
    pub gamma0: Vec<Complex64>,
    /// Largest pairwise relative difference of `gamma0`.
    pub gamma_spread: f64,
    /// The unextrapolated ratio at the smallest radius.
    pub gamma_raw: Vec<Complex64>,
    pub raw_spread: f64,
}

/// Compares `D` with `rho^(n+1) Delta` along joint rays.
pub fn low_frequency(
    wave: &WaveCoefficients,
    system: &HomogenizedSystem,
    rays: &[JointRay],
    radii: &[f64],
    opts: &EvansOptions,
) -> Result<LowFrequency> {
    let n = wave.components;
    if radii.len() < 2 {
        return Err(Error::InvalidInput("at least two radii are needed".into()));
    }
    let deltas: Vec<Complex64> = rays.iter().map(|r| system.delta(&r.xi, r.lambda)).collect::<Result<_>>()?;
    let delta_scale = deltas.iter().map(|d| d.norm()).fold(0.0, f64::max);
    let (kept, excluded): (Vec<usize>, Vec<usize>) =
        (0..rays.len()).partition(|&r| deltas[r].norm() > 1e-8 * delta_scale.max(f64::MIN_POSITIVE));
    if kept.len() < 2 {
        return Err(Error::InvalidInput("fewer than two rays with nonzero Delta".into()));
    }
    let jobs: Vec<(usize, usize)> = kept.iter().flat_map(|&r| (0..radii.len()).map(move |k| (r, k))).collect();
    let vals: Vec<Complex64> = jobs
        .par_iter()
        .map(|&(r, k)| {
            let ray = &rays[r];
            let rho = radii[k];
            let xi: Vec<f64> = ray.xi.iter().map(|x| x * rho).collect();
            Ok(evans(wave, ray.lambda * rho, &xi, opts)?.value)
        })
        .collect::<Result<_>>()?;
    let values: Vec<Vec<Complex64>> = vals.chunks(radii.len()).map(|c| c.to_vec()).collect();
    let lr: Vec<f64> = radii.iter().map(|r| r.ln()).collect();
    let mean_lr = lr.iter().sum::<f64>() / lr.len() as f64;
    let orders: Vec<f64> = values
        .iter()
        .map(|row| {
            let ld: Vec<f64> = row.iter().map(|z| z.norm().ln()).collect();
            let mean_ld = ld.iter().sum::<f64>() / ld.len() as f64;
            let num: f64 = lr.iter().zip(&ld).map(|(a, b)| (a - mean_lr) * (b - mean_ld)).sum();
            let den: f64 = lr.iter().map(|a| (a - mean_lr).powi(2)).sum();
            num / den
        })
        .collect();
    let vanish_order = orders.iter().sum::<f64>() / orders.len() as f64;
    let mut order: Vec<usize> = (0..radii.len()).collect();
    order.sort_by(|&a, &b| radii[a].total_cmp(&radii[b]));
    let (k1, k2) = (order[0], order[1]);
    let (r1, r2) = (radii[k1], radii[k2]);
    let ratio = |r: usize, row: &[Complex64], k: usize| row[k] / (deltas[r] * radii[k].powi(n as i32 + 1));
    let gamma_raw: Vec<Complex64> = kept.iter().zip(&values).map(|(&r, row)| ratio(r, row, k1)).collect();
    let gamma0: Vec<Complex64> = kept
        .iter()
        .zip(&values)
        .map(|(&r, row)| (ratio(r, row, k1) * r2 - ratio(r, row, k2) * r1) / (r2 - r1))
        .collect();
    let gamma_spread = pairwise_spread(&gamma0);
    let raw_spread = pairwise_spread(&gamma_raw);
    Ok(LowFrequency {
        rays: kept.iter().map(|&r| rays[r].clone()).collect(),
        excluded,
        radii: radii.to_vec(),
        values,
        orders,
        vanish_order,
        gamma0,
        gamma_spread,
        gamma_raw,
        raw_spread,
    })
}

fn pairwise_spread(values: &[Complex64]) -> f64 {
    let mut spread: f64 = 0.0;
    for (i, g) in values.iter().enumerate() {
        for h in &values[i + 1..] {
            spread = spread.max((g - h).norm() / g.norm().max(h.norm()));
        }
    }
    spread
}

/// Roots `mu` of `det(B^11 mu^2 + (i B^{1t} + i B^{t1} - A^1) mu - i A^t - B^{tt} - lambda) = 0`
/// for a constant-coefficient wave.
pub fn characteristic_roots(wave: &WaveCoefficients, xi_tilde: &[f64], lambda: Complex64) -> Result<Vec<Complex64>> {
    if !wave.is_constant() {
        return Err(Error::NotApplicable("characteristic roots need constant coefficients".into()));
    }
    let n = wave.components;
    let [b11, a1, b1t, bt1, at, btt] = wave.combined(xi_tilde).swap_remove(0);
    let cm = |m: &crate::linalg::RMat| m.map(|x| c(x, 0.0));
    let binv = cm(&b11).try_inverse().ok_or_else(|| Error::Ellipticity("B^11 is singular".into()))?;
    let first = cm(&a1) - (cm(&b1t) + cm(&bt1)) * I;
    let zeroth = cm(&at) * I + cm(&btt) + CMat::identity(n, n) * lambda;
    let mut comp = CMat::zeros(2 * n, 2 * n);
    for i in 0..n {
        comp[(i, n + i)] = c(1.0, 0.0);
    }
    comp.view_mut((n, 0), (n, n)).copy_from(&(&binv * zeroth));
    comp.view_mut((n, n), (n, n)).copy_from(&(&binv * first));
    crate::linalg::eigenvalues(&comp)
}

/// `prod_l (exp(mu_l X) - exp(i xi_1 X))` over the characteristic roots.
pub fn closed_form(wave: &WaveCoefficients, lambda: Complex64, xi: &[f64]) -> Result<Complex64> {
    let z = Complex64::from_polar(1.0, xi[0] * wave.period);
    Ok(characteristic_roots(wave, &xi[1..], lambda)?.iter().map(|mu| (mu * wave.period).exp() - z).product())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::RMat;
    use crate::model::BurgersPairParams;
    use crate::ModelSpec;
    use proptest::prelude::*;

    fn synthetic() -> WaveCoefficients {
        let model = ModelSpec::burgers_pair(&BurgersPairParams::default()).unwrap();
        let profile: Vec<Vec<f64>> = (0..32)
            .map(|i| {
                let t = 2.0 * PI * i as f64 / 32.0;
                vec![0.4 * t.sin(), 0.3 * t.cos()]
            })
            .collect();
        WaveCoefficients::from_profile(&model, &profile, 1.0, 0.0).unwrap()
    }

    fn constant_pair() -> WaveCoefficients {
        let a = RMat::from_row_slice(2, 2, &[0.5, 1.0, 0.3, -0.4]);
        let b = RMat::from_row_slice(2, 2, &[1.0, 0.2, 0.1, 0.7]);
        let model = ModelSpec::constant(vec![a], vec![vec![b]]).unwrap();
        WaveCoefficients::constant(&model, &[0.0, 0.0], 1.3, 8).unwrap()
    }

    #[test]
    fn heat_matches_exponential_product() {
        let model = ModelSpec::heat(1, 1, 1.0).unwrap();
        let wave = WaveCoefficients::constant(&model, &[0.0], 2.0, 8).unwrap();
        for (l, xi) in [(c(0.3, 0.1), 0.4), (c(-1.0, 2.0), -1.1), (c(4.0, 0.0), 0.0)] {
            let mu = l.sqrt();
            let z = Complex64::from_polar(1.0, xi * 2.0);
            let exact = ((mu * 2.0).exp() - z) * ((-mu * 2.0).exp() - z);
            let got = evans(&wave, l, &[xi], &EvansOptions::default()).unwrap().value;
            assert!((got - exact).norm() < 1e-8 * exact.norm(), "{got} vs {exact}");
        }
    }

    #[test]
    fn constant_pair_matches_closed_form() {
        let wave = constant_pair();
        for (l, xi) in [(c(0.7, -0.2), 0.9), (c(-0.3, 1.5), -2.0), (c(2.0, 0.0), 0.1)] {
            let exact = closed_form(&wave, l, &[xi]).unwrap();
            let got = evans(&wave, l, &[xi], &EvansOptions::default()).unwrap().value;
            assert!((got / exact - 1.0).norm() < 1e-8, "{got} vs {exact}");
        }
    }

    #[test]
    fn block_cyclic_determinant_equals_product_form() {
        let wave = synthetic();
        let opts = EvansOptions { growth_limit: 3.0, ..Default::default() };
        let sys = EvansSystem::new(&wave, &[], opts).unwrap();
        let mono = sys.monodromy(c(2.0, 1.0)).unwrap();
        assert!(mono.segments.len() > 1);
        let z = Complex64::from_polar(1.0, 0.7);
        let direct = crate::linalg::det(&(mono.product() - CMat::identity(4, 4) * z));
        let (blocks, _) = mono.characteristic(z);
        assert!((blocks.value() - direct).norm() < 1e-10 * direct.norm());
        let single = EvansSystem::new(&wave, &[], EvansOptions::default()).unwrap().evaluate(c(2.0, 1.0), 0.7 / wave.period);
        let single = single.unwrap();
        assert_eq!(single.segments, 1);
        assert!((single.value - direct).norm() < 1e-8 * direct.norm());
    }

    #[test]
    fn monodromy_determinant_is_exponential_of_trace() {
        let wave = synthetic();
        let sys = EvansSystem::new(&wave, &[], EvansOptions::default()).unwrap();
        let lambda = c(0.4, -0.9);
        let mono = sys.monodromy(lambda).unwrap();
        let nodes = 256;
        let mut trace = c(0.0, 0.0);
        for k in 0..nodes {
            trace += sys.system_matrix(wave.period * k as f64 / nodes as f64, lambda).unwrap().trace();
        }
        let expected = (trace * (wave.period / nodes as f64)).exp();
        let got = crate::linalg::det(&mono.product());
        assert!((got - expected).norm() < 1e-8 * expected.norm());
    }

    #[test]
    fn zeros_are_bloch_eigenvalues() {
        let wave = synthetic();
        let xi1 = 0.8;
        let eig = crate::bloch::assemble(&wave, &[xi1]).unwrap().eigenvalues().unwrap();
        let lambda = eig[0];
        let at = evans(&wave, lambda, &[xi1], &EvansOptions::default()).unwrap();
        let near = evans(&wave, lambda + 0.05, &[xi1], &EvansOptions::default()).unwrap();
        assert!(at.value.norm() < 1e-6 * near.value.norm());
        let count = eig.iter().filter(|l| (*l - lambda).norm() < 0.3).count() as i64;
        let w = winding(&wave, &[xi1], Contour { center: lambda, radius: 0.3 }, &EvansOptions::default(), PI / 4.0).unwrap();
        assert_eq!(w.count, count);
    }

    #[test]
    fn heat_zeros_located_by_winding() {
        let model = ModelSpec::heat(1, 1, 1.0).unwrap();
        let wave = WaveCoefficients::constant(&model, &[0.0], 1.0, 8).unwrap();
        let xi1 = 0.5;
        let opts = EvansOptions::default();
        // Roots at -(xi + 2 pi k)^2: k = 0 gives -0.25, k = -1 gives -33.4.
        let around = |center: f64, radius: f64| {
            winding(&wave, &[xi1], Contour { center: c(center, 0.0), radius }, &opts, PI / 4.0).unwrap().count
        };
        assert_eq!(around(-0.25, 0.1), 1);
        assert_eq!(around(-33.4, 1.0), 1);
        assert_eq!(around(-10.0, 2.0), 0);
        assert_eq!(around(-17.0, 20.0), 2);
    }

    #[test]
    fn translation_root_and_cluster_winding() {
        let wave = synthetic();
        let cl = crate::bloch::zero_cluster(&wave, 1e-4).unwrap();
        let w = winding(&wave, &[0.0], Contour { center: c(0.0, 0.0), radius: 0.5 * cl.gap }, &EvansOptions::default(), PI / 4.0)
            .unwrap();
        assert_eq!(w.count as usize, cl.eigenvalues.len());
        let unit = evans(&wave, c(0.5 * cl.gap, 0.0), &[0.0], &EvansOptions::default()).unwrap();
        let zero = evans(&wave, c(0.0, 0.0), &[0.0], &EvansOptions::default()).unwrap();
        assert!(zero.value.norm() < 1e-8 * unit.value.norm());
    }

    #[test]
    fn eigen_basis_carries_translation_mode() {
        let model = ModelSpec::vdw_cubic();
        let guess = crate::profile::ProfileGuess {
            anchor: vec![1.3, 0.0],
            speed: 0.0,
            normal: vec![1.0],
            flux_constant: vec![0.0, 0.0],
            period: 5.0,
        };
        let opts = crate::profile::ProfileOptions { samples: 256, ..Default::default() };
        let wp = crate::profile::find_periodic(&model, &guess, &opts).unwrap();
        let wave = WaveCoefficients::from_wave(&model, &wp).unwrap();
        let series = PeriodicSeries::from_samples(&wave.profile_derivative, wave.period);
        let sys = EvansSystem::new(&wave, &[], EvansOptions::default()).unwrap();
        let points: Vec<f64> = (0..=8).map(|k| wave.period * k as f64 / 8.0).collect();
        let basis = sys.eigen_basis(c(0.0, 0.0), &points).unwrap();
        let slope = |x: f64| {
            let mut du = vec![0.0; 2];
            series.eval(x, &mut du);
            crate::linalg::CVec::from_iterator(2, du.into_iter().map(|v| c(v, 0.0)))
        };
        // Differentiating the profile equation once: B u'' = Df(u) u'.
        let u0 = &wp.samples[0];
        let b = model.viscosity(0, 0, u0).map(|v| c(v, 0.0));
        let jac = model.flux_jacobian(0, u0).map(|v| c(v, 0.0));
        let du0 = slope(0.0);
        let ddu0 = b.try_inverse().unwrap() * jac * &du0;
        let start = crate::linalg::CVec::from_iterator(4, du0.iter().chain(ddu0.iter()).copied());
        for (k, &x) in points.iter().enumerate() {
            let got = (&basis.frames[k] * &start * c(basis.log_scale[k].exp(), 0.0)).rows(0, 2).into_owned();
            let want = slope(x);
            let err = (&got - &want).norm() / want.norm();
            assert!(err < 1e-7, "x = {x} err {err}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]

        #[test]
        fn conjugation_and_periodicity(re in -1.0f64..2.0, im in -2.0f64..2.0, xi in -3.0f64..3.0) {
            let wave = synthetic();
            let opts = EvansOptions::default();
            let l = c(re, im);
            let d = evans(&wave, l, &[xi], &opts).unwrap().value;
            let conj = evans(&wave, l.conj(), &[-xi], &opts).unwrap().value;
            let shifted = evans(&wave, l, &[xi + 2.0 * PI / wave.period], &opts).unwrap().value;
            prop_assert!((conj - d.conj()).norm() < 1e-7 * d.norm());
            prop_assert!((shifted - d).norm() < 1e-9 * d.norm());
        }

        #[test]
        fn real_for_real_lambda(re in -1.0f64..3.0, half in proptest::bool::ANY) {
            let wave = synthetic();
            let xi = if half { PI / wave.period } else { 0.0 };
            let d = evans(&wave, c(re, 0.0), &[xi], &EvansOptions::default()).unwrap().value;
            prop_assert!(d.im.abs() < 1e-8 * d.norm().max(1e-300));
        }

        #[test]
        fn analytic_in_lambda(re in -0.5f64..1.5, im in -1.0f64..1.0) {
            let wave = synthetic();
            let opts = EvansOptions::default();
            let h = 1e-2;
            let l = c(re, im);
            let f = |z: Complex64| evans(&wave, z, &[0.3], &opts).unwrap().value;
            let diff = |e: Complex64| (f(l - e * 2.0) - f(l - e) * 8.0 + f(l + e) * 8.0 - f(l + e * 2.0)) / (e * 12.0);
            let (dx, dy) = (diff(c(h, 0.0)), diff(c(0.0, h)));
            prop_assert!((dx - dy).norm() < 1e-6 * dx.norm().max(f(l).norm()));
        }
    }
}
