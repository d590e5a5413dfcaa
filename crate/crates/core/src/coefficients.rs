//! Periodic coefficients of the linearisation about a wave, in coordinates
//! moving with the wave and aligned with its direction.
//!
//! The linear operator is
//! `L v = sum_{jk} (B^{jk} v_{x_k})_{x_j} - sum_j (A^j v)_{x_j}` with
//! `A^j v = Df^j(u) v - (DB^{j1}(u) v) u'` and `A^1` shifted by `-s I`.

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::linalg::RMat;
use crate::model::ModelSpec;
use crate::profile::WavePoint;
use crate::spectral::{self, PeriodicSeries};

#[derive(Debug, Clone)]
pub struct WaveCoefficients {
    pub label: String,
    pub dim: usize,
    pub components: usize,
    pub period: f64,
    pub speed: f64,
    /// Profile samples at `x_i = i X / m` in the aligned frame.
    pub profile: Vec<Vec<f64>>,
    pub profile_derivative: Vec<Vec<f64>>,
    /// `viscosity[j][k][i]` is `B^{jk}` at sample `i`.
    pub viscosity: Vec<Vec<Vec<RMat>>>,
    /// `convection[j][i]` is `A^j` at sample `i`.
    pub convection: Vec<Vec<RMat>>,
    /// Size of the eigenvalue cluster at the origin for `xi = 0`, when known.
    pub critical: Option<usize>,
    /// The model in the aligned frame.
    pub model: ModelSpec,
}

impl WaveCoefficients {
    pub fn samples(&self) -> usize {
        self.profile.len()
    }

    /// Linearisation about a converged wave; the critical cluster has
    /// `n + 1` eigenvalues.
    pub fn from_wave(model: &ModelSpec, wave: &WavePoint) -> Result<Self> {
        let aligned = model.rotated(&wave.normal)?;
        let mut c = Self::from_profile(&aligned, &wave.samples, wave.period, wave.speed)?;
        c.critical = Some(model.components + 1);
        c.label = format!("{} wave, X = {:.6}", model.id, wave.period);
        Ok(c)
    }

    /// Linearisation about arbitrary profile samples in a model already
    /// written in the wave frame (profile depending on `x_1` only).
    pub fn from_profile(model: &ModelSpec, profile: &[Vec<f64>], period: f64, speed: f64) -> Result<Self> {
        let n = model.components;
        let d = model.dim;
        let m = profile.len();
        if m < 4 || !m.is_power_of_two() {
            return Err(Error::InvalidInput("profile sample count must be a power of two >= 4".into()));
        }
        if profile.iter().any(|u| u.len() != n) {
            return Err(Error::InvalidInput("profile samples have the wrong length".into()));
        }
        if period <= 0.0 {
            return Err(Error::InvalidInput("period must be positive".into()));
        }
        let mut deriv = vec![vec![0.0; n]; m];
        for comp in 0..n {
            let col: Vec<f64> = profile.iter().map(|u| u[comp]).collect();
            for (i, v) in spectral::derivative(&col, period).into_iter().enumerate() {
                deriv[i][comp] = v;
            }
        }
        let mut viscosity = vec![vec![Vec::with_capacity(m); d]; d];
        let mut convection = vec![Vec::with_capacity(m); d];
        for (u, up) in profile.iter().zip(&deriv) {
            model.check_domain(u)?;
            for j in 0..d {
                for k in 0..d {
                    viscosity[j][k].push(model.viscosity(j, k, u));
                }
                let mut a = model.flux_jacobian(j, u);
                for comp in 0..n {
                    let dbu = model.viscosity_gradient(j, 0, comp, u) * nalgebra::DVector::from_column_slice(up);
                    let col = a.column(comp) - dbu;
                    a.set_column(comp, &col);
                }
                if j == 0 {
                    a -= RMat::identity(n, n) * speed;
                }
                convection[j].push(a);
            }
        }
        Ok(Self {
            label: format!("{} profile", model.id),
            dim: d,
            components: n,
            period,
            speed,
            profile: profile.to_vec(),
            profile_derivative: deriv,
            viscosity,
            convection,
            critical: None,
            model: model.clone(),
        })
    }

    /// Linearisation about the single-harmonic profile
    /// `u(x) = sin_amp sin(2 pi x / X) + cos_amp cos(2 pi x / X)` in a model
    /// written in the wave frame. Such profiles are generally not waves of the
    /// model; they give periodic-coefficient operators with known structure.
    pub fn trigonometric(
        model: &ModelSpec,
        period: f64,
        samples: usize,
        sin_amp: &[f64],
        cos_amp: &[f64],
        speed: f64,
    ) -> Result<Self> {
        let n = model.components;
        if sin_amp.len() != n || cos_amp.len() != n {
            return Err(Error::InvalidInput(format!("amplitudes need {n} entries")));
        }
        let profile: Vec<Vec<f64>> = (0..samples)
            .map(|i| {
                let t = 2.0 * std::f64::consts::PI * i as f64 / samples as f64;
                (0..n).map(|a| sin_amp[a] * t.sin() + cos_amp[a] * t.cos()).collect()
            })
            .collect();
        let mut c = Self::from_profile(model, &profile, period, speed)?;
        c.label = format!("{} trigonometric profile", model.id);
        Ok(c)
    }

    /// Constant state `state` viewed as a wave of period `period`; the
    /// critical cluster at the origin has `n` eigenvalues.
    pub fn constant(model: &ModelSpec, state: &[f64], period: f64, samples: usize) -> Result<Self> {
        let profile = vec![state.to_vec(); samples];
        let mut c = Self::from_profile(model, &profile, period, 0.0)?;
        c.critical = Some(model.components);
        c.label = format!("{} constant state", model.id);
        Ok(c)
    }

    /// Same wave with `m` samples per period (trigonometric resampling of the
    /// profile; coefficients recomputed from the model).
    pub fn resampled(&self, m: usize) -> Result<Self> {
        if m == self.samples() {
            return Ok(self.clone());
        }
        let n = self.components;
        let mut profile = vec![vec![0.0; n]; m];
        for comp in 0..n {
            let col: Vec<f64> = self.profile.iter().map(|u| u[comp]).collect();
            for (i, v) in spectral::resample(&col, m).into_iter().enumerate() {
                profile[i][comp] = v;
            }
        }
        let mut c = Self::from_profile(&self.model, &profile, self.period, self.speed)?;
        c.critical = self.critical;
        c.label = self.label.clone();
        Ok(c)
    }

    /// Whether all coefficients are independent of `x`.
    pub fn is_constant(&self) -> bool {
        let close = |v: &[RMat]| v.iter().all(|m| (m - &v[0]).norm() <= 1e-14 * (1.0 + v[0].norm()));
        self.convection.iter().all(|v| close(v)) && self.viscosity.iter().flatten().all(|v| close(v))
    }

    /// Combined transverse coefficient fields for transverse wavenumbers
    /// `xt = (xi_2, ..., xi_d)`, as samples of
    /// `[B11, A1, B1t, Bt1, At, Btt]` (each `n x n`).
    pub fn combined(&self, xt: &[f64]) -> Vec<[RMat; 6]> {
        let n = self.components;
        let m = self.samples();
        (0..m)
            .map(|i| {
                let mut b1t = RMat::zeros(n, n);
                let mut bt1 = RMat::zeros(n, n);
                let mut at = RMat::zeros(n, n);
                let mut btt = RMat::zeros(n, n);
                for (jj, &xj) in xt.iter().enumerate() {
                    let j = jj + 1;
                    if xj == 0.0 {
                        continue;
                    }
                    b1t += &self.viscosity[0][j][i] * xj;
                    bt1 += &self.viscosity[j][0][i] * xj;
                    at += &self.convection[j][i] * xj;
                    for (kk, &xk) in xt.iter().enumerate() {
                        if xk != 0.0 {
                            btt += &self.viscosity[j][kk + 1][i] * (xj * xk);
                        }
                    }
                }
                [self.viscosity[0][0][i].clone(), self.convection[0][i].clone(), b1t, bt1, at, btt]
            })
            .collect()
    }

    /// Circular Fourier coefficients of each entry of the combined fields:
    /// `out[f][a * n + b][kk]`.
    pub fn combined_hat(&self, xt: &[f64]) -> Vec<Vec<Vec<Complex64>>> {
        let n = self.components;
        let fields = self.combined(xt);
        (0..6)
            .map(|f| {
                (0..n * n)
                    .map(|e| {
                        let (a, b) = (e / n, e % n);
                        let col: Vec<f64> = fields.iter().map(|s| s[f][(a, b)]).collect();
                        spectral::coefficients(&col)
                    })
                    .collect()
            })
            .collect()
    }

    /// Interpolating series of the combined fields, entries laid out as
    /// `f * n * n + a * n + b` with `f` in the order of [`Self::combined`].
    pub fn series(&self, xt: &[f64]) -> PeriodicSeries {
        let n = self.components;
        let fields = self.combined(xt);
        let samples: Vec<Vec<f64>> = fields
            .iter()
            .map(|s| {
                let mut row = Vec::with_capacity(6 * n * n);
                for mat in s.iter() {
                    for a in 0..n {
                        for b in 0..n {
                            row.push(mat[(a, b)]);
                        }
                    }
                }
                row
            })
            .collect();
        PeriodicSeries::from_samples(&samples, self.period)
    }

    /// Largest relative Fourier tail over profile components.
    pub fn resolution_tail(&self) -> f64 {
        (0..self.components)
            .map(|c| spectral::spectral_tail(&self.profile.iter().map(|u| u[c]).collect::<Vec<_>>()))
            .fold(0.0, f64::max)
    }
}
