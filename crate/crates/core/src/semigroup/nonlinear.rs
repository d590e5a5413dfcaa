//! Desk-scale nonlinear evolution of perturbations `v = u - u_bar` in one
//! space dimension, with the H^1 energy inequality
//! `|v(t)|_{H^1}^2 <= C e^{-theta1 t} |v(0)|_{H^1}^2 + C int_0^t e^{-theta2 (t-s)} |v(s)|_{L^2}^2 ds`
//! fitted along the trajectory.
//!
//! Time stepping is second-order exponential Runge-Kutta (ETD2RK) in the
//! per-node eigenbasis: the linear part is exact, the nonlinear remainder is
//! explicit, and the difference between the first- and second-order stages
//! drives the step size.

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coefficients::WaveCoefficients;
use crate::error::{Error, Result};
use crate::linalg::CVec;

use super::propagator::{Propagator, Split};
use super::transform::{bloch_forward, bloch_inverse, BlochField, Field};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvolveOptions {
    pub rtol: f64,
    pub atol: f64,
    pub initial_step: f64,
    pub max_step: f64,
    pub min_step: f64,
    pub max_steps: usize,
    /// Abort once `|v|_{H^1}` exceeds this.
    pub smallness: f64,
}

impl Default for EvolveOptions {
    fn default() -> Self {
        Self {
            rtol: 1e-6,
            atol: 1e-14,
            initial_step: 0.05,
            max_step: 0.5,
            min_step: 1e-10,
            max_steps: 200_000,
            smallness: 0.5,
        }
    }
}

/// Norms recorded at every accepted step.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct StepHistory {
    pub t: Vec<f64>,
    pub l2_sq: Vec<f64>,
    pub h1_sq: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub l2: Vec<f64>,
    pub h1: Vec<f64>,
    /// `sup_{s <= t} |v(s)|_{L^2} (1+s)^{1/4}`.
    pub eta: Vec<f64>,
    pub history: StepHistory,
    pub accepted: usize,
    pub rejected: usize,
    #[serde(skip)]
    pub snapshots: Vec<Field>,
}

/// Nonlinear remainder of the perturbation equation,
/// `v_t = L v + d/dx Q(v)` with
/// `Q = -(f(u_bar+v) - f(u_bar) - Df v) + (B(u_bar+v) - B(u_bar)) v_x
///      + (B(u_bar+v) - B(u_bar) - DB v) u_bar_x`.
struct Remainder<'a> {
    wave: &'a WaveCoefficients,
}

impl Remainder<'_> {
    fn flux_part(&self, v: &Field, vx: &Field) -> Result<Field> {
        let model = &self.wave.model;
        let m = self.wave.samples();
        let n = v.components;
        let mut q = Field::zeros(&v.grid, n);
        let chunks: Vec<Result<Vec<f64>>> = (0..v.grid.points())
            .into_par_iter()
            .map(|i| {
                let base = &self.wave.profile[i % m];
                let base_x = nalgebra::DVector::from_column_slice(&self.wave.profile_derivative[i % m]);
                let dv = v.at(i);
                let u: Vec<f64> = base.iter().zip(dv).map(|(a, b)| a + b).collect();
                model.check_domain(&u)?;
                let dvv = nalgebra::DVector::from_column_slice(dv);
                let dvx = nalgebra::DVector::from_column_slice(vx.at(i));
                let lin = model.flux_jacobian(0, base) * &dvv;
                let mut out = -(model.flux(0, &u) - model.flux(0, base) - lin);
                let b_u = model.viscosity(0, 0, &u);
                let b_bar = &self.wave.viscosity[0][0][i % m];
                let db = model.viscosity_directional(0, 0, base, dv);
                out += (&b_u - b_bar) * dvx;
                out += (b_u - b_bar - db) * base_x;
                Ok(out.as_slice().to_vec())
            })
            .collect();
        for (i, chunk) in chunks.into_iter().enumerate() {
            q.values[i * n..(i + 1) * n].copy_from_slice(&chunk?);
        }
        Ok(q)
    }

    /// Returns `d/dx Q` in eigen-coordinates together with the physical-space
    /// Bloch coefficients of `v`.
    fn eval(&self, prop: &Propagator, coef: &[CVec], like: &BlochField) -> Result<(Vec<CVec>, BlochField)> {
        let vhat = prop.from_eigen(coef, like);
        let v = bloch_inverse(&vhat);
        let vx = bloch_inverse(&vhat.derivative_axial());
        let q = self.flux_part(&v, &vx)?;
        let dq = bloch_forward(&q).derivative_axial();
        Ok((prop.to_eigen(&dq), vhat))
    }
}

fn sq_norm(coef: &[CVec]) -> f64 {
    coef.iter().map(|v| v.norm_squared()).sum()
}

fn norms_sq(vhat: &BlochField) -> (f64, f64) {
    let l2 = vhat.norm().powi(2);
    (l2, l2 + vhat.derivative_axial().norm().powi(2))
}

pub fn check_applicable(wave: &WaveCoefficients) -> Result<()> {
    if wave.dim != 1 {
        return Err(Error::NotApplicable("nonlinear evolution is implemented in one space dimension".into()));
    }
    wave.model.check_ellipticity(&[1.0], &wave.profile, 1e-12)?;
    Ok(())
}

/// Evolves `v0` under the full perturbation equation and records norms at
/// `times` (sorted, non-negative). Snapshots are kept when `keep` is set.
pub fn evolve(
    prop: &Propagator,
    wave: &WaveCoefficients,
    v0: &Field,
    times: &[f64],
    opts: &EvolveOptions,
    keep: bool,
) -> Result<Trajectory> {
    check_applicable(wave)?;
    if times.windows(2).any(|w| w[1] < w[0]) || times.first().is_some_and(|&t| t < 0.0) {
        return Err(Error::InvalidInput("output times must be sorted and non-negative".into()));
    }
    if !(opts.rtol > 0.0 && opts.atol >= 0.0 && opts.max_step > 0.0 && opts.initial_step > 0.0) {
        return Err(Error::InvalidInput("step tolerances and sizes must be positive".into()));
    }
    let rem = Remainder { wave };
    let like = bloch_forward(v0);
    let mut coef = prop.to_eigen(&like);
    let mut t = 0.0;
    let mut h = opts.initial_step.min(opts.max_step);
    let mut traj = Trajectory {
        times: Vec::new(),
        l2: Vec::new(),
        h1: Vec::new(),
        eta: Vec::new(),
        history: StepHistory::default(),
        accepted: 0,
        rejected: 0,
        snapshots: Vec::new(),
    };
    let mut eta = 0.0f64;
    let (mut n_c, mut vhat) = rem.eval(prop, &coef, &like)?;
    let record_step = |t: f64, vhat: &BlochField, traj: &mut Trajectory, eta: &mut f64| -> Result<()> {
        let (l2, h1) = norms_sq(vhat);
        if !h1.is_finite() || h1.sqrt() > opts.smallness {
            return Err(Error::Smallness { norm: h1.sqrt(), threshold: opts.smallness, t });
        }
        *eta = f64::max(*eta, l2.sqrt() * (1.0 + t).powf(0.25));
        traj.history.t.push(t);
        traj.history.l2_sq.push(l2);
        traj.history.h1_sq.push(h1);
        Ok(())
    };
    record_step(t, &vhat, &mut traj, &mut eta)?;
    let mut next = 0;
    let emit = |t: f64, vhat: &BlochField, traj: &mut Trajectory, eta: f64| {
        let (l2, h1) = norms_sq(vhat);
        traj.times.push(t);
        traj.l2.push(l2.sqrt());
        traj.h1.push(h1.sqrt());
        traj.eta.push(eta);
        if keep {
            traj.snapshots.push(bloch_inverse(vhat));
        }
    };
    while next < times.len() && times[next] <= 0.0 {
        emit(0.0, &vhat, &mut traj, eta);
        next += 1;
    }
    let mut steps = 0;
    while next < times.len() {
        if steps >= opts.max_steps {
            return Err(Error::TooManySteps { steps });
        }
        steps += 1;
        let target = times[next];
        let landing = t + h >= target - 1e-12 * target.max(1.0);
        let step = if landing { target - t } else { h };
        let f = prop.etd_factors(step)?;
        let a: Vec<CVec> = coef
            .iter()
            .zip(&n_c)
            .zip(&f)
            .map(|((x, n), [e, p1, _])| {
                CVec::from_iterator(x.len(), x.iter().zip(n).zip(e.iter().zip(p1)).map(|((x, n), (e, p))| e * x + p * n))
            })
            .collect();
        let (n_a, _) = match rem.eval(prop, &a, &like) {
            Ok(r) => r,
            Err(Error::Domain { .. }) if step > opts.min_step => {
                traj.rejected += 1;
                h = step / 4.0;
                continue;
            }
            Err(e) => return Err(e),
        };
        let corr: Vec<CVec> = n_a
            .iter()
            .zip(&n_c)
            .zip(&f)
            .map(|((na, nc), [_, _, p2])| {
                CVec::from_iterator(na.len(), na.iter().zip(nc).zip(p2).map(|((a, b), p)| p * (a - b)))
            })
            .collect();
        let err = sq_norm(&corr).sqrt() / (opts.atol + opts.rtol * sq_norm(&coef).sqrt());
        let err = if err.is_finite() { err } else { f64::INFINITY };
        let factor = if err == 0.0 { 2.0 } else { (0.9 / err.sqrt()).clamp(0.2, 2.0) };
        if err > 1.0 {
            traj.rejected += 1;
            h = step * factor;
            if h < opts.min_step {
                return Err(Error::StepUnderflow { t });
            }
            continue;
        }
        coef = a.iter().zip(&corr).map(|(x, y)| x + y).collect();
        t = if landing { target } else { t + step };
        traj.accepted += 1;
        let (n_new, v_new) = rem.eval(prop, &coef, &like)?;
        n_c = n_new;
        vhat = v_new;
        record_step(t, &vhat, &mut traj, &mut eta)?;
        if landing {
            while next < times.len() && times[next] <= t + 1e-12 * t.max(1.0) {
                emit(times[next], &vhat, &mut traj, eta);
                next += 1;
            }
        } else {
            h = (step * factor).min(opts.max_step);
        }
        h = h.min(opts.max_step);
    }
    Ok(traj)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnergyOptions {
    pub theta_min: f64,
    pub theta_max: f64,
    pub theta_count: usize,
    pub max_constant: f64,
}

impl Default for EnergyOptions {
    fn default() -> Self {
        Self { theta_min: 1e-3, theta_max: 10.0, theta_count: 41, max_constant: 1e3 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyFit {
    pub theta1: f64,
    pub theta2: f64,
    /// Smallest `C` for which the inequality holds at every recorded step.
    pub constant: f64,
    pub holds: bool,
    /// `min_t (C rhs(t) - E(t)) / E(t)` over the recorded steps.
    pub margin: f64,
}

/// `C(theta1, theta2) = max_t E(t) / (e^{-theta1 t} E(0) + int_0^t e^{-theta2 (t-s)} L(s) ds)`,
/// the integral by the trapezoid rule on the recorded steps.
pub fn energy_constant(h: &StepHistory, theta1: f64, theta2: f64) -> f64 {
    rhs_series(h, theta1, theta2).iter().zip(&h.h1_sq).map(|(r, e)| if *e == 0.0 { 0.0 } else { e / r }).fold(0.0, f64::max)
}

fn rhs_series(h: &StepHistory, theta1: f64, theta2: f64) -> Vec<f64> {
    let e0 = h.h1_sq.first().copied().unwrap_or(0.0);
    let mut integral = 0.0;
    let mut out = Vec::with_capacity(h.t.len());
    for k in 0..h.t.len() {
        if k > 0 {
            let dt = h.t[k] - h.t[k - 1];
            let damp = (-theta2 * dt).exp();
            integral = damp * (integral + 0.5 * dt * h.l2_sq[k - 1]) + 0.5 * dt * h.l2_sq[k];
        }
        out.push((-theta1 * h.t[k]).exp() * e0 + integral);
    }
    out
}

/// Scans a logarithmic `(theta1, theta2)` grid and keeps the pair with the
/// largest `min(theta1, theta2)` whose constant stays below the bound.
pub fn fit_energy(h: &StepHistory, opts: &EnergyOptions) -> Result<EnergyFit> {
    if h.t.len() < 2 {
        return Err(Error::InvalidInput("energy fit needs at least two recorded steps".into()));
    }
    if !(opts.theta_min > 0.0 && opts.theta_max > opts.theta_min && opts.theta_count >= 2) {
        return Err(Error::InvalidInput("theta grid must be positive and increasing".into()));
    }
    let ratio = (opts.theta_max / opts.theta_min).ln() / (opts.theta_count - 1) as f64;
    let grid: Vec<f64> = (0..opts.theta_count).map(|k| opts.theta_min * (ratio * k as f64).exp()).collect();
    let pairs: Vec<(f64, f64)> = grid.iter().flat_map(|&a| grid.iter().map(move |&b| (a, b))).collect();
    let scored: Vec<(f64, f64, f64)> = pairs.par_iter().map(|&(a, b)| (a, b, energy_constant(h, a, b))).collect();
    let best = scored
        .iter()
        .filter(|s| s.2 <= opts.max_constant)
        .max_by(|x, y| x.0.min(x.1).total_cmp(&y.0.min(y.1)).then(y.2.total_cmp(&x.2)))
        .copied();
    let (theta1, theta2, constant, holds) = match best {
        Some((a, b, k)) => (a, b, k, true),
        None => {
            let (a, b, k) = scored.iter().copied().min_by(|x, y| x.2.total_cmp(&y.2)).expect("non-empty grid");
            (a, b, k, false)
        }
    };
    let margin = rhs_series(h, theta1, theta2)
        .iter()
        .zip(&h.h1_sq)
        .filter(|(_, e)| **e > 0.0)
        .map(|(r, e)| (constant * r - e) / e)
        .fold(f64::INFINITY, f64::min);
    Ok(EnergyFit { theta1, theta2, constant, holds, margin })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinearizationCheck {
    pub amplitudes: [f64; 2],
    /// `max_t |v_a(t) - a S(t) v0|_{L^2}` for both amplitudes.
    pub deviations: [f64; 2],
    /// Deviation ratio between the doubled and base amplitude; 4 for a
    /// quadratic remainder.
    pub ratio: f64,
    /// Base deviation relative to the linear response `max_t |a S(t) v0|`.
    pub relative: f64,
}

/// Compares nonlinear trajectories from `a v0` and `2a v0` with the linear
/// semigroup applied to the same data.
pub fn linearization_check(
    prop: &Propagator,
    wave: &WaveCoefficients,
    v0: &Field,
    times: &[f64],
    amplitude: f64,
    opts: &EvolveOptions,
) -> Result<LinearizationCheck> {
    let amplitudes = [amplitude, 2.0 * amplitude];
    let base = bloch_forward(v0);
    let mut deviations = [0.0f64; 2];
    let mut scale = 0.0f64;
    for (dev, &a) in deviations.iter_mut().zip(&amplitudes) {
        let traj = evolve(prop, wave, &v0.scaled(a), times, opts, true)?;
        for (t, snap) in traj.times.iter().zip(&traj.snapshots) {
            let mut diff = bloch_forward(snap);
            let linear = prop.apply(&base, *t, Split::Full)?;
            diff.add_scaled(&linear, Complex64::new(-a, 0.0));
            *dev = dev.max(diff.norm());
            if a == amplitude {
                scale = scale.max(a * linear.norm());
            }
        }
    }
    Ok(LinearizationCheck { amplitudes, deviations, ratio: deviations[1] / deviations[0], relative: deviations[0] / scale })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::BurgersPairParams;
    use crate::semigroup::propagator::PropagatorOptions;
    use crate::semigroup::transform::TorusGrid;
    use crate::ModelSpec;

    fn synthetic(m: usize) -> WaveCoefficients {
        let model = ModelSpec::burgers_pair(&BurgersPairParams::default()).unwrap();
        WaveCoefficients::trigonometric(&model, 1.0, m, &[0.4, 0.0], &[0.0, 0.3], 0.0).unwrap()
    }

    fn bump(grid: &TorusGrid, amp: f64, width: f64) -> Field {
        let mid = grid.lengths()[0] / 2.0;
        Field::from_fn(grid, 2, |x, out| {
            let g = amp * (-(x[0] - mid).powi(2) / (2.0 * width * width)).exp();
            out[0] = g;
            out[1] = -0.5 * g;
        })
    }

    fn setup(cells: usize) -> (WaveCoefficients, Propagator, TorusGrid) {
        let wave = synthetic(16);
        let grid = TorusGrid::axial(1.0, cells, 16).unwrap();
        let prop = Propagator::new(&wave, &grid, &PropagatorOptions::default()).unwrap();
        (wave, prop, grid)
    }

    #[test]
    fn zero_data_stays_zero() {
        let (wave, prop, grid) = setup(32);
        let traj = evolve(&prop, &wave, &Field::zeros(&grid, 2), &[1.0, 5.0], &EvolveOptions::default(), true).unwrap();
        assert_eq!(traj.times, vec![1.0, 5.0]);
        assert!(traj.snapshots.iter().all(|s| s.values.iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn tiny_data_follows_linear_flow() {
        let (wave, prop, grid) = setup(64);
        let v0 = bump(&grid, 1.0, 3.0);
        let check = linearization_check(&prop, &wave, &v0, &[1.0, 5.0, 20.0], 1e-6, &EvolveOptions::default()).unwrap();
        assert!(check.relative < 1e-4, "{check:?}");
        assert!((check.ratio - 4.0).abs() < 0.2, "{check:?}");
    }

    #[test]
    fn energy_inequality_holds_along_trajectory() {
        let (wave, prop, grid) = setup(128);
        let v0 = bump(&grid, 0.05, 3.0);
        let times: Vec<f64> = (1..=40).map(|k| 2.5 * k as f64).collect();
        let traj = evolve(&prop, &wave, &v0, &times, &EvolveOptions::default(), false).unwrap();
        let fit = fit_energy(&traj.history, &EnergyOptions::default()).unwrap();
        assert!(fit.holds && fit.constant <= 1e3 && fit.theta1 > 0.0 && fit.theta2 > 0.0, "{fit:?}");
        assert!(fit.margin >= -1e-12);
        assert!(traj.eta.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn large_data_aborts() {
        let (wave, prop, grid) = setup(32);
        let v0 = bump(&grid, 2.0, 2.0);
        let err = evolve(&prop, &wave, &v0, &[1.0], &EvolveOptions::default(), false).unwrap_err();
        assert!(matches!(err, Error::Smallness { .. }));
    }

    #[test]
    fn energy_constant_of_pure_decay_is_one() {
        let t: Vec<f64> = (0..200).map(|k| 0.05 * k as f64).collect();
        let h = StepHistory {
            h1_sq: t.iter().map(|s| (-2.0 * s).exp()).collect(),
            l2_sq: vec![0.0; t.len()],
            t,
        };
        assert!((energy_constant(&h, 2.0, 1.0) - 1.0).abs() < 1e-12);
        assert!(energy_constant(&h, 3.0, 1.0) > 1.0);
    }
}
