//! Fourier utilities for periodic sample sets.

use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

/// Signed wavenumber index of FFT slot `kk` among `m` slots; the Nyquist slot
/// maps to `-m/2`.
pub fn mode_index(kk: usize, m: usize) -> i64 {
    if kk < m / 2 {
        kk as i64
    } else {
        kk as i64 - m as i64
    }
}

#[derive(Clone)]
pub struct FftPair {
    pub len: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl FftPair {
    pub fn new(len: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self { len, forward: planner.plan_fft_forward(len), inverse: planner.plan_fft_inverse(len) }
    }

    /// Unnormalised forward transform in place.
    pub fn forward(&self, data: &mut [Complex64]) {
        self.forward.process(data);
    }

    /// Inverse transform in place, including the `1/len` factor.
    pub fn inverse(&self, data: &mut [Complex64]) {
        self.inverse.process(data);
        let s = 1.0 / self.len as f64;
        for z in data.iter_mut() {
            *z *= s;
        }
    }
}

/// Fourier coefficients `c_k` with `u(x_j) = sum_k c_k exp(2 pi i k x_j / X)`.
pub fn coefficients(samples: &[f64]) -> Vec<Complex64> {
    let m = samples.len();
    let mut buf: Vec<Complex64> = samples.iter().map(|&x| Complex64::new(x, 0.0)).collect();
    FftPair::new(m).forward(&mut buf);
    let s = 1.0 / m as f64;
    buf.iter().map(|z| z * s).collect()
}

/// Spectral derivative of a real periodic sample set with period `period`.
pub fn derivative(samples: &[f64], period: f64) -> Vec<f64> {
    let m = samples.len();
    let mut buf: Vec<Complex64> = samples.iter().map(|&x| Complex64::new(x, 0.0)).collect();
    let fft = FftPair::new(m);
    fft.forward(&mut buf);
    for (kk, z) in buf.iter_mut().enumerate() {
        if m % 2 == 0 && kk == m / 2 {
            *z = Complex64::new(0.0, 0.0);
        } else {
            *z *= Complex64::new(0.0, 2.0 * PI * mode_index(kk, m) as f64 / period);
        }
    }
    fft.inverse(&mut buf);
    buf.iter().map(|z| z.re).collect()
}

/// Resamples a real periodic sample set to `m_new` points by trigonometric
/// interpolation (truncating or zero-padding the spectrum).
pub fn resample(samples: &[f64], m_new: usize) -> Vec<f64> {
    let m = samples.len();
    if m == m_new {
        return samples.to_vec();
    }
    let coef = coefficients(samples);
    let mut out = vec![Complex64::new(0.0, 0.0); m_new];
    let half = (m.min(m_new) / 2) as i64;
    for kk in 0..m {
        let k = mode_index(kk, m);
        if k.abs() < half {
            let slot = if k >= 0 { k as usize } else { (m_new as i64 + k) as usize };
            out[slot] = coef[kk];
        }
    }
    FftPair::new(m_new).inverse(&mut out);
    out.iter().map(|z| z.re * m_new as f64).collect()
}

/// Largest relative coefficient magnitude in the upper quarter of the resolved
/// band; a cheap under-resolution indicator.
pub fn spectral_tail(samples: &[f64]) -> f64 {
    let m = samples.len();
    let coef = coefficients(samples);
    let top = coef.iter().fold(0.0f64, |a, z| a.max(z.norm()));
    if top == 0.0 {
        return 0.0;
    }
    let cut = (m / 4) as i64;
    coef.iter()
        .enumerate()
        .filter(|(kk, _)| mode_index(*kk, m).abs() >= cut)
        .fold(0.0f64, |a, (_, z)| a.max(z.norm()))
        / top
}

/// Truncated real Fourier series of a set of periodic real fields, evaluated
/// at arbitrary points.
#[derive(Debug, Clone)]
pub struct PeriodicSeries {
    pub period: f64,
    pub fields: usize,
    /// `coef[f][k]` for `k = 0..=kmax`, with the `k > 0` entries already doubled.
    coef: Vec<Vec<Complex64>>,
    kmax: usize,
}

impl PeriodicSeries {
    /// `samples[j][f]` is field `f` at `x_j = j X / m`.
    pub fn from_samples(samples: &[Vec<f64>], period: f64) -> Self {
        let m = samples.len();
        let fields = samples.first().map_or(0, |s| s.len());
        let mut coef = Vec::with_capacity(fields);
        let mut global_max = 0.0f64;
        for f in 0..fields {
            let col: Vec<f64> = samples.iter().map(|s| s[f]).collect();
            let c = coefficients(&col);
            global_max = global_max.max(c.iter().fold(0.0, |a: f64, z| a.max(z.norm())));
            coef.push(c);
        }
        let half = m / 2;
        let mut kmax = 0;
        for c in &coef {
            for k in 1..half {
                if c[k].norm() > 1e-16 * global_max {
                    kmax = kmax.max(k);
                }
            }
        }
        let coef = coef
            .into_iter()
            .map(|c| (0..=kmax).map(|k| if k == 0 { c[0] } else { c[k] * 2.0 }).collect())
            .collect();
        Self { period, fields, coef, kmax }
    }

    pub fn eval(&self, x: f64, out: &mut [f64]) {
        let theta = 2.0 * PI * x / self.period;
        let step = Complex64::new(theta.cos(), theta.sin());
        for v in out.iter_mut() {
            *v = 0.0;
        }
        let mut e = Complex64::new(1.0, 0.0);
        for k in 0..=self.kmax {
            if k > 0 {
                e *= step;
                if k % 64 == 0 {
                    let a = theta * k as f64;
                    e = Complex64::new(a.cos(), a.sin());
                }
            }
            for (f, v) in out.iter_mut().enumerate() {
                let c = self.coef[f][k];
                *v += c.re * e.re - c.im * e.im;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derivative_of_trig_polynomial() {
        let m = 32;
        let x: Vec<f64> = (0..m).map(|j| 2.0 * j as f64 / m as f64).collect();
        let u: Vec<f64> = x.iter().map(|&t| (PI * t).sin() + 0.3 * (3.0 * PI * t).cos()).collect();
        let du = derivative(&u, 2.0);
        for (t, d) in x.iter().zip(&du) {
            let exact = PI * (PI * t).cos() - 0.9 * PI * (3.0 * PI * t).sin();
            assert!((d - exact).abs() < 1e-12);
        }
    }

    #[test]
    fn series_reproduces_samples_and_interpolates() {
        let m = 16;
        let f = |t: f64| 1.0 + (2.0 * PI * t).cos() - 0.5 * (4.0 * PI * t).sin();
        let samples: Vec<Vec<f64>> = (0..m).map(|j| vec![f(j as f64 / m as f64)]).collect();
        let s = PeriodicSeries::from_samples(&samples, 1.0);
        let mut out = [0.0];
        for &t in &[0.0, 0.123, 0.5, 0.777] {
            s.eval(t, &mut out);
            assert!((out[0] - f(t)).abs() < 1e-13);
        }
    }

    #[test]
    fn resample_is_exact_for_band_limited_data() {
        let f = |t: f64| (2.0 * PI * t).sin() + 0.1 * (6.0 * PI * t).cos();
        let u: Vec<f64> = (0..16).map(|j| f(j as f64 / 16.0)).collect();
        let v = resample(&u, 64);
        for (j, val) in v.iter().enumerate() {
            assert!((val - f(j as f64 / 64.0)).abs() < 1e-13);
        }
        let back = resample(&v, 16);
        for (a, b) in back.iter().zip(&u) {
            assert!((a - b).abs() < 1e-13);
        }
    }
}
