//! Periodic traveling-wave profiles, their class functions, and the local
//! manifold of nearby waves.
//!
//! A profile solves `B_nu(u) u' = sum_j nu_j f^j(u) - s u - q` with
//! `B_nu = sum_{jk} nu_j nu_k B^{jk}`. Waves are located by shooting on the
//! parameter vector `z = (X, a, s, angles(nu), q)` subject to
//! `u(X; a, s, nu, q) = a` and one phase condition.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{min_norm_solve, real_condition, right_singular_basis, solve_real, svd_real, RMat};
use crate::model::ModelSpec;
use crate::ode::{integrate, Tolerances};
use crate::spectral;

#[derive(Debug, Clone, Copy)]
pub struct ProfileOptions {
    /// Samples per period; a power of two.
    pub samples: usize,
    pub tol: Tolerances,
    pub newton_tol: f64,
    pub max_iter: usize,
}

impl Default for ProfileOptions {
    fn default() -> Self {
        Self {
            samples: 256,
            tol: Tolerances { rtol: 1e-12, atol: 1e-13, max_steps: 500_000 },
            newton_tol: 1e-10,
            max_iter: 40,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileGuess {
    pub anchor: Vec<f64>,
    pub speed: f64,
    pub normal: Vec<f64>,
    pub flux_constant: Vec<f64>,
    pub period: f64,
}

/// A converged periodic wave together with its averaged quantities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WavePoint {
    /// `samples[i]` is the profile at `y = i X / m`.
    pub samples: Vec<Vec<f64>>,
    pub period: f64,
    pub frequency: f64,
    pub speed: f64,
    pub normal: Vec<f64>,
    pub flux_constant: Vec<f64>,
    /// Period average of the profile.
    pub mean: Vec<f64>,
    /// Period average of the total flux in each coordinate direction.
    pub mean_flux: Vec<Vec<f64>>,
    pub anchor: Vec<f64>,
}

impl WavePoint {
    pub fn dim(&self) -> usize {
        self.normal.len()
    }
    pub fn components(&self) -> usize {
        self.anchor.len()
    }
    /// `S * Omega`.
    pub fn speed_frequency(&self) -> f64 {
        self.speed * self.frequency
    }
    /// `(M, Omega N)`.
    pub fn conserved(&self) -> DVector<f64> {
        let mut v = self.mean.clone();
        v.extend(self.normal.iter().map(|x| x * self.frequency));
        DVector::from_vec(v)
    }
    /// `(F^j, S Omega e_j)`.
    pub fn fluxes(&self, j: usize) -> DVector<f64> {
        let mut v = self.mean_flux[j].clone();
        v.extend((0..self.dim()).map(|i| if i == j { self.speed_frequency() } else { 0.0 }));
        DVector::from_vec(v)
    }
    /// Profile derivative samples.
    pub fn derivative(&self) -> Vec<Vec<f64>> {
        derivative_samples(&self.samples, self.period)
    }
}

pub(crate) fn derivative_samples(samples: &[Vec<f64>], period: f64) -> Vec<Vec<f64>> {
    let m = samples.len();
    let n = samples.first().map_or(0, |s| s.len());
    let mut out = vec![vec![0.0; n]; m];
    for c in 0..n {
        let col: Vec<f64> = samples.iter().map(|s| s[c]).collect();
        for (i, d) in spectral::derivative(&col, period).into_iter().enumerate() {
            out[i][c] = d;
        }
    }
    out
}

/// Averaged quantities of an orbit given by samples over one period.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassFunctions {
    pub frequency: f64,
    pub speed: f64,
    pub normal: Vec<f64>,
    pub flux_constant: Vec<f64>,
    pub mean: Vec<f64>,
    pub mean_flux: Vec<Vec<f64>>,
}

pub fn class_functions(
    model: &ModelSpec,
    samples: &[Vec<f64>],
    period: f64,
    speed: f64,
    normal: &[f64],
    flux_constant: &[f64],
) -> Result<ClassFunctions> {
    let n = model.components;
    let d = model.dim;
    if samples.is_empty() || samples.iter().any(|s| s.len() != n) || normal.len() != d {
        return Err(Error::InvalidInput("orbit samples or direction have the wrong shape".into()));
    }
    if period <= 0.0 {
        return Err(Error::InvalidInput("period must be positive".into()));
    }
    let m = samples.len() as f64;
    let du = derivative_samples(samples, period);
    let mut mean = vec![0.0; n];
    let mut mean_flux = vec![vec![0.0; n]; d];
    for (u, up) in samples.iter().zip(&du) {
        model.check_domain(u)?;
        for c in 0..n {
            mean[c] += u[c] / m;
        }
        let up = DVector::from_column_slice(up);
        for (j, fj) in mean_flux.iter_mut().enumerate() {
            let mut total = model.flux(j, u);
            for (k, &nk) in normal.iter().enumerate() {
                if nk != 0.0 {
                    total -= model.viscosity(j, k, u) * &up * nk;
                }
            }
            for c in 0..n {
                fj[c] += total[c] / m;
            }
        }
    }
    Ok(ClassFunctions {
        frequency: 1.0 / period,
        speed,
        normal: normal.to_vec(),
        flux_constant: flux_constant.to_vec(),
        mean,
        mean_flux,
    })
}

/// Layout of the shooting parameter vector `(X, a, s, angles, q)`.
#[derive(Debug, Clone, Copy)]
pub struct ParamLayout {
    pub n: usize,
    pub d: usize,
}

impl ParamLayout {
    pub fn len(&self) -> usize {
        2 * self.n + self.d + 1
    }
    pub fn is_empty(&self) -> bool {
        false
    }
    pub fn period(&self) -> usize {
        0
    }
    pub fn anchor(&self, i: usize) -> usize {
        1 + i
    }
    pub fn speed(&self) -> usize {
        1 + self.n
    }
    pub fn angle(&self, i: usize) -> usize {
        2 + self.n + i
    }
    pub fn flux_constant(&self, i: usize) -> usize {
        1 + self.n + self.d + i
    }
}

/// Hyperspherical parametrisation of the unit sphere in `R^d`.
pub fn normal_from_angles(angles: &[f64]) -> Vec<f64> {
    let d = angles.len() + 1;
    (0..d)
        .map(|i| {
            let mut v = 1.0;
            for a in angles.iter().take(i.min(d - 1)) {
                v *= a.sin();
            }
            if i < d - 1 {
                v *= angles[i].cos();
            }
            v
        })
        .collect()
}

fn normal_angle_derivative(angles: &[f64], p: usize) -> Vec<f64> {
    let d = angles.len() + 1;
    (0..d)
        .map(|i| {
            let sin_count = i.min(d - 1);
            let has_cos = i < d - 1;
            if p >= sin_count && !(has_cos && p == i) {
                return 0.0;
            }
            let mut v = 1.0;
            for (l, a) in angles.iter().enumerate().take(sin_count) {
                v *= if l == p { a.cos() } else { a.sin() };
            }
            if has_cos {
                v *= if i == p { -angles[i].sin() } else { angles[i].cos() };
            }
            v
        })
        .collect()
}

pub fn angles_from_normal(nu: &[f64]) -> Vec<f64> {
    let d = nu.len();
    (0..d.saturating_sub(1))
        .map(|i| {
            if i == d - 2 {
                nu[d - 1].atan2(nu[d - 2])
            } else {
                let tail = nu[i + 1..].iter().map(|x| x * x).sum::<f64>().sqrt();
                tail.atan2(nu[i])
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
struct Params {
    period: f64,
    anchor: Vec<f64>,
    speed: f64,
    angles: Vec<f64>,
    flux_constant: Vec<f64>,
}

impl Params {
    fn from_vec(layout: ParamLayout, z: &[f64]) -> Self {
        Self {
            period: z[layout.period()],
            anchor: (0..layout.n).map(|i| z[layout.anchor(i)]).collect(),
            speed: z[layout.speed()],
            angles: (0..layout.d - 1).map(|i| z[layout.angle(i)]).collect(),
            flux_constant: (0..layout.n).map(|i| z[layout.flux_constant(i)]).collect(),
        }
    }

    fn to_vec(&self) -> Vec<f64> {
        let mut z = vec![self.period];
        z.extend(&self.anchor);
        z.push(self.speed);
        z.extend(&self.angles);
        z.extend(&self.flux_constant);
        z
    }
}

/// Right-hand side of the profile ODE at fixed `(s, nu, q)`.
struct ProfileField<'a> {
    model: &'a ModelSpec,
    nu: Vec<f64>,
    dnu: Vec<Vec<f64>>,
    speed: f64,
    q: DVector<f64>,
}

impl<'a> ProfileField<'a> {
    fn new(model: &'a ModelSpec, p: &Params) -> Self {
        Self {
            model,
            nu: normal_from_angles(&p.angles),
            dnu: (0..p.angles.len()).map(|i| normal_angle_derivative(&p.angles, i)).collect(),
            speed: p.speed,
            q: DVector::from_column_slice(&p.flux_constant),
        }
    }

    fn residual(&self, u: &[f64]) -> DVector<f64> {
        self.model.normal_flux(&self.nu, u) - DVector::from_column_slice(u) * self.speed - &self.q
    }

    fn eval(&self, u: &[f64]) -> Result<DVector<f64>> {
        self.model.check_domain(u)?;
        let b = self.model.normal_viscosity(&self.nu, u);
        let r = self.residual(u);
        b.lu().solve(&r).ok_or_else(|| Error::Ellipticity("normal viscosity is singular".into()))
    }

    /// Field and the derivative of the augmented flow with sensitivity columns
    /// `[d/da (n), d/ds, d/dangles (d-1), d/dq (n)]`.
    fn eval_variational(&self, u: &[f64], y: &RMat) -> Result<(DVector<f64>, RMat)> {
        self.model.check_domain(u)?;
        let n = u.len();
        let b = self.model.normal_viscosity(&self.nu, u);
        let lu = b.clone().lu();
        let r = self.residual(u);
        let g = lu.solve(&r).ok_or_else(|| Error::Ellipticity("normal viscosity is singular".into()))?;
        let mut dr = RMat::identity(n, n) * (-self.speed);
        for (j, &w) in self.nu.iter().enumerate() {
            if w != 0.0 {
                dr += self.model.flux_jacobian(j, u) * w;
            }
        }
        for c in 0..n {
            let mut db = RMat::zeros(n, n);
            for (j, &a) in self.nu.iter().enumerate() {
                for (k, &bk) in self.nu.iter().enumerate() {
                    if a * bk != 0.0 {
                        db += self.model.viscosity_gradient(j, k, c, u) * (a * bk);
                    }
                }
            }
            let col = dr.column(c) - db * &g;
            dr.set_column(c, &col);
        }
        let gu = lu.solve(&dr).expect("factorised above");
        let mut forcing = RMat::zeros(n, y.ncols());
        forcing.set_column(n, &lu.solve(&(-DVector::from_column_slice(u))).expect("factorised"));
        let d = self.nu.len();
        for (p, dn) in self.dnu.iter().enumerate() {
            let mut rhs = self.model.normal_flux(dn, u);
            let mut dbn = RMat::zeros(n, n);
            for j in 0..d {
                for k in 0..d {
                    let w = dn[j] * self.nu[k] + self.nu[j] * dn[k];
                    if w != 0.0 {
                        dbn += self.model.viscosity(j, k, u) * w;
                    }
                }
            }
            rhs -= dbn * &g;
            forcing.set_column(n + 1 + p, &lu.solve(&rhs).expect("factorised"));
        }
        let neg_inv = lu.solve(&(-RMat::identity(n, n))).expect("factorised");
        forcing.view_mut((0, n + d), (n, n)).copy_from(&neg_inv);
        Ok((g, gu * y + forcing))
    }
}

struct Shot {
    end: DVector<f64>,
    end_field: DVector<f64>,
    sensitivity: RMat,
    samples: Vec<Vec<f64>>,
}

fn shoot(model: &ModelSpec, p: &Params, opts: &ProfileOptions, variational: bool) -> Result<Shot> {
    let n = p.anchor.len();
    let d = p.angles.len() + 1;
    let field = ProfileField::new(model, p);
    let m = opts.samples;
    let stops: Vec<f64> = (1..=m).map(|i| p.period * i as f64 / m as f64).collect();
    let mut samples = vec![p.anchor.clone()];
    let cols = if variational { 2 * n + d } else { 0 };
    let mut y0 = p.anchor.clone();
    if variational {
        let mut sens = RMat::zeros(n, cols);
        sens.view_mut((0, 0), (n, n)).fill_with_identity();
        y0.extend(sens.as_slice());
    }
    let end = integrate(
        |_, y: &[f64], dy: &mut [f64]| {
            if variational {
                let sens = RMat::from_column_slice(n, cols, &y[n..]);
                let (g, ds) = field.eval_variational(&y[..n], &sens)?;
                dy[..n].copy_from_slice(g.as_slice());
                dy[n..].copy_from_slice(ds.as_slice());
            } else {
                dy.copy_from_slice(field.eval(y)?.as_slice());
            }
            Ok(())
        },
        0.0,
        &y0,
        &stops,
        &opts.tol,
        |i, _, y| {
            if i + 1 < m {
                samples.push(y[..n].to_vec());
            }
        },
    )?;
    let end_u = DVector::from_column_slice(&end[..n]);
    let end_field = field.eval(end_u.as_slice())?;
    let sensitivity = if variational { RMat::from_column_slice(n, cols, &end[n..]) } else { RMat::zeros(n, 0) };
    Ok(Shot { end: end_u, end_field, sensitivity, samples })
}

/// Jacobian of `z -> u(X; a, s, nu, q) - a` with respect to the full
/// parameter vector.
fn shooting_jacobian(layout: ParamLayout, shot: &Shot) -> RMat {
    let n = layout.n;
    let mut j = RMat::zeros(n, layout.len());
    j.set_column(layout.period(), &shot.end_field);
    j.view_mut((0, 1), (n, 2 * n + layout.d)).copy_from(&shot.sensitivity);
    for i in 0..n {
        j[(i, layout.anchor(i))] -= 1.0;
    }
    j
}

/// Phase condition `<g, a - a_ref> = 0`.
#[derive(Debug, Clone)]
struct Phase {
    anchor: Vec<f64>,
    direction: Vec<f64>,
}

impl Phase {
    fn at(model: &ModelSpec, p: &Params) -> Result<Self> {
        let g = ProfileField::new(model, p).eval(&p.anchor)?;
        let norm = g.norm();
        if norm < 1e-10 {
            return Err(Error::DegenerateOrbit { amplitude: 0.0 });
        }
        Ok(Self { anchor: p.anchor.clone(), direction: (g / norm).as_slice().to_vec() })
    }

    fn value(&self, a: &[f64]) -> f64 {
        a.iter().zip(&self.anchor).zip(&self.direction).map(|((x, r), g)| (x - r) * g).sum()
    }
}

fn residual_and_jacobian(
    model: &ModelSpec,
    layout: ParamLayout,
    z: &[f64],
    phase: &Phase,
    opts: &ProfileOptions,
) -> Result<(DVector<f64>, RMat, Shot)> {
    let p = Params::from_vec(layout, z);
    if p.period <= 0.0 {
        return Err(Error::InvalidInput("period became non-positive".into()));
    }
    let shot = shoot(model, &p, opts, true)?;
    let n = layout.n;
    let mut r = DVector::zeros(n + 1);
    for i in 0..n {
        r[i] = shot.end[i] - p.anchor[i];
    }
    r[n] = phase.value(&p.anchor);
    let mut jac = RMat::zeros(n + 1, layout.len());
    jac.view_mut((0, 0), (n, layout.len())).copy_from(&shooting_jacobian(layout, &shot));
    for i in 0..n {
        jac[(n, layout.anchor(i))] = phase.direction[i];
    }
    Ok((r, jac, shot))
}

fn scale_of(z: &[f64]) -> f64 {
    z.iter().fold(1.0f64, |a, x| a.max(x.abs()))
}

fn wave_from(model: &ModelSpec, layout: ParamLayout, z: &[f64], shot: Shot) -> Result<WavePoint> {
    let p = Params::from_vec(layout, z);
    let nu = normal_from_angles(&p.angles);
    let cf = class_functions(model, &shot.samples, p.period, p.speed, &nu, &p.flux_constant)?;
    let amplitude = shot
        .samples
        .iter()
        .map(|u| u.iter().zip(&cf.mean).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
        .fold(0.0, f64::max);
    if amplitude < 1e-8 * scale_of(&cf.mean) {
        return Err(Error::DegenerateOrbit { amplitude });
    }
    Ok(WavePoint {
        samples: shot.samples,
        period: p.period,
        frequency: cf.frequency,
        speed: p.speed,
        normal: nu,
        flux_constant: p.flux_constant,
        mean: cf.mean,
        mean_flux: cf.mean_flux,
        anchor: p.anchor,
    })
}

fn guess_params(model: &ModelSpec, guess: &ProfileGuess) -> Result<Params> {
    let n = model.components;
    let d = model.dim;
    if guess.anchor.len() != n || guess.flux_constant.len() != n || guess.normal.len() != d {
        return Err(Error::InvalidInput("guess has the wrong shape for this model".into()));
    }
    let norm = guess.normal.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 || guess.period <= 0.0 {
        return Err(Error::InvalidInput("guess needs a nonzero direction and positive period".into()));
    }
    let nu: Vec<f64> = guess.normal.iter().map(|x| x / norm).collect();
    Ok(Params {
        period: guess.period,
        anchor: guess.anchor.clone(),
        speed: guess.speed,
        angles: angles_from_normal(&nu),
        flux_constant: guess.flux_constant.clone(),
    })
}

/// Newton's method (minimum-norm steps) for a periodic profile near `guess`.
pub fn find_periodic(model: &ModelSpec, guess: &ProfileGuess, opts: &ProfileOptions) -> Result<WavePoint> {
    let p0 = guess_params(model, guess)?;
    let layout = ParamLayout { n: model.components, d: model.dim };
    let phase = Phase::at(model, &p0)?;
    let mut z = p0.to_vec();
    let mut history = Vec::new();
    let (mut r, mut jac, mut shot) = residual_and_jacobian(model, layout, &z, &phase, opts)?;
    for _ in 0..opts.max_iter {
        let norm = r.norm();
        history.push(norm);
        if norm < opts.newton_tol * scale_of(&z) {
            return wave_from(model, layout, &z, shot);
        }
        let step = min_norm_solve(&jac, &(-&r), 1e-13)?;
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..12 {
            let trial: Vec<f64> = z.iter().zip(step.iter()).map(|(a, b)| a + t * b).collect();
            if let Ok((r2, j2, s2)) = residual_and_jacobian(model, layout, &trial, &phase, opts) {
                if r2.norm() < norm || t < 1e-3 {
                    z = trial;
                    r = r2;
                    jac = j2;
                    shot = s2;
                    accepted = true;
                    break;
                }
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    history.push(r.norm());
    Err(Error::NoConvergence { residuals: history })
}

/// Smallest singular value of the shooting map's Jacobian relative to the
/// largest; positive exactly when the submersion hypothesis holds at `wave`.
pub fn submersion_margin(model: &ModelSpec, wave: &WavePoint, opts: &ProfileOptions) -> Result<f64> {
    let layout = ParamLayout { n: model.components, d: model.dim };
    let p = params_of(wave);
    let shot = shoot(model, &p, opts, true)?;
    let j = shooting_jacobian(layout, &shot);
    let s = svd_real(&j, false)?.s;
    let hi = s.iter().fold(0.0f64, |a, &b| a.max(b));
    let lo = s.iter().fold(f64::INFINITY, |a, &b| a.min(b));
    Ok(if hi > 0.0 { lo / hi } else { 0.0 })
}

fn params_of(wave: &WavePoint) -> Params {
    Params {
        period: wave.period,
        anchor: wave.anchor.clone(),
        speed: wave.speed,
        angles: angles_from_normal(&wave.normal),
        flux_constant: wave.flux_constant.clone(),
    }
}

pub fn param_vector(wave: &WavePoint) -> Vec<f64> {
    params_of(wave).to_vec()
}

/// Local coordinates on the manifold of periodic waves near a base wave.
///
/// Coordinates are components along an orthonormal basis of the kernel of the
/// linearised shooting-plus-phase map at the base parameters; points are
/// recovered by Newton's method in the complementary directions.
#[derive(Debug, Clone)]
pub struct ManifoldChart {
    pub base: WavePoint,
    pub model: ModelSpec,
    pub options: ProfileOptions,
    layout: ParamLayout,
    base_params: Vec<f64>,
    /// Columns span the tangent space (`n + d` of them).
    pub tangent: RMat,
    normal_space: RMat,
    phase: Phase,
    pub jacobian_mn: Option<RMat>,
    pub jacobian_f: Vec<RMat>,
}

impl ManifoldChart {
    pub fn new(model: &ModelSpec, base: &WavePoint, options: &ProfileOptions) -> Result<Self> {
        let layout = ParamLayout { n: model.components, d: model.dim };
        let p = params_of(base);
        let phase = Phase::at(model, &p)?;
        let z = p.to_vec();
        let (_, jac, _) = residual_and_jacobian(model, layout, &z, &phase, options)?;
        let (sv, basis) = right_singular_basis(&jac)?;
        let rank = layout.n + 1;
        if sv[rank - 1] < 1e-9 * sv[0] {
            return Err(Error::Nondegeneracy(format!(
                "shooting map is not a submersion (singular values {sv:?})"
            )));
        }
        let normal_space = basis.columns(0, rank).into_owned();
        let tangent = basis.columns(rank, layout.len() - rank).into_owned();
        Ok(Self {
            base: base.clone(),
            model: model.clone(),
            options: *options,
            layout,
            base_params: z,
            tangent,
            normal_space,
            phase,
            jacobian_mn: None,
            jacobian_f: Vec::new(),
        })
    }

    pub fn chart_dim(&self) -> usize {
        self.tangent.ncols()
    }

    /// Parameter vector of the wave at chart coordinates `coords`.
    pub fn params_at(&self, coords: &[f64]) -> Result<Vec<f64>> {
        Ok(self.solve_point(coords)?.0)
    }

    fn solve_point(&self, coords: &[f64]) -> Result<(Vec<f64>, Shot)> {
        let c = DVector::from_column_slice(coords);
        let z0 = DVector::from_column_slice(&self.base_params) + &self.tangent * c;
        let mut w = DVector::zeros(self.normal_space.ncols());
        let mut history = Vec::new();
        for _ in 0..self.options.max_iter {
            let z = &z0 + &self.normal_space * &w;
            let (r, jac, shot) =
                residual_and_jacobian(&self.model, self.layout, z.as_slice(), &self.phase, &self.options)?;
            let norm = r.norm();
            history.push(norm);
            if norm < 0.01 * self.options.newton_tol * scale_of(z.as_slice()) {
                return Ok((z.as_slice().to_vec(), shot));
            }
            let reduced = jac * &self.normal_space;
            let dw = solve_real(&reduced, &RMat::from_column_slice(r.len(), 1, (-r).as_slice()))?;
            w += dw.column(0);
            if history.len() > 3 && norm > 0.5 * history[history.len() - 2] && norm < self.options.newton_tol {
                return Ok((z.as_slice().to_vec(), shot));
            }
        }
        Err(Error::NoConvergence { residuals: history })
    }

    pub fn point(&self, coords: &[f64]) -> Result<WavePoint> {
        let (z, shot) = self.solve_point(coords)?;
        wave_from(&self.model, self.layout, &z, shot)
    }

    /// Jacobians of `(M, Omega N)` and `(F^j, S Omega e_j)` in chart
    /// coordinates by Richardson-extrapolated central differences.
    pub fn compute_jacobians(&mut self, step: f64) -> Result<()> {
        let k = self.chart_dim();
        let d = self.layout.d;
        let n = self.layout.n;
        let h = step * scale_of(&self.base_params);
        let mut jmn = RMat::zeros(n + d, k);
        let mut jf = vec![RMat::zeros(n + d, k); d];
        for i in 0..k {
            let eval = |t: f64| -> Result<WavePoint> {
                let mut c = vec![0.0; k];
                c[i] = t;
                self.point(&c)
            };
            let (p1, m1, p2, m2) = (eval(h)?, eval(-h)?, eval(h / 2.0)?, eval(-h / 2.0)?);
            let rich = |a: DVector<f64>, b: DVector<f64>, a2: DVector<f64>, b2: DVector<f64>| {
                let coarse = (a - b) / (2.0 * h);
                let fine = (a2 - b2) / h;
                (fine * 4.0 - coarse) / 3.0
            };
            jmn.set_column(i, &rich(p1.conserved(), m1.conserved(), p2.conserved(), m2.conserved()));
            for (j, mat) in jf.iter_mut().enumerate() {
                mat.set_column(i, &rich(p1.fluxes(j), m1.fluxes(j), p2.fluxes(j), m2.fluxes(j)));
            }
        }
        let cond = real_condition(&jmn);
        if !cond.is_finite() || cond > 1e10 {
            return Err(Error::Nondegeneracy(format!("d(M, Omega N) is singular (condition {cond:.3e})")));
        }
        self.jacobian_mn = Some(jmn);
        self.jacobian_f = jf;
        Ok(())
    }
}

pub fn manifold_jacobians(model: &ModelSpec, base: &WavePoint, opts: &ProfileOptions) -> Result<ManifoldChart> {
    let mut chart = ManifoldChart::new(model, base, opts)?;
    chart.compute_jacobians(1e-4)?;
    Ok(chart)
}

#[derive(Debug, Clone)]
pub struct Continuation {
    pub points: Vec<WavePoint>,
    /// Why stepping ended early, if it did.
    pub stopped: Option<String>,
}

/// Follows the wave family from `base` along the projection of
/// `direction` (a vector in parameter space `(X, a, s, angles, q)`) onto the
/// tangent space, re-charting at every accepted point.
pub fn continue_manifold(
    model: &ModelSpec,
    base: &WavePoint,
    direction: &[f64],
    step: f64,
    steps: usize,
    opts: &ProfileOptions,
) -> Result<Continuation> {
    let layout = ParamLayout { n: model.components, d: model.dim };
    if direction.len() != layout.len() {
        return Err(Error::InvalidInput(format!("direction must have {} entries", layout.len())));
    }
    let dir = DVector::from_column_slice(direction);
    let mut points = vec![base.clone()];
    let mut previous: Option<DVector<f64>> = None;
    let mut h = step;
    let base_period = base.period;
    while points.len() <= steps {
        let current = points.last().expect("non-empty");
        let chart = match ManifoldChart::new(model, current, opts) {
            Ok(c) => c,
            Err(e) => return Ok(Continuation { points, stopped: Some(format!("chart failed: {e}")) }),
        };
        let mut coords = chart.tangent.transpose() * &dir;
        if let Some(prev) = &previous {
            let t = &chart.tangent * &coords;
            if t.dot(prev) < 0.0 {
                coords = -coords;
            }
        }
        let norm = coords.norm();
        if norm < 1e-12 {
            return Ok(Continuation { points, stopped: Some("direction is normal to the family".into()) });
        }
        coords /= norm;
        let mut next = None;
        for _ in 0..5 {
            let c: Vec<f64> = coords.iter().map(|x| x * h).collect();
            match chart.point(&c) {
                Ok(w) => {
                    next = Some(w);
                    break;
                }
                Err(_) => h *= 0.5,
            }
        }
        let Some(w) = next else {
            return Ok(Continuation { points, stopped: Some("corrector failed after step halving".into()) });
        };
        previous = Some(&chart.tangent * &coords);
        let long = w.period > 50.0 * base_period;
        points.push(w);
        if long {
            return Ok(Continuation { points, stopped: Some("period blow-up (homoclinic limit)".into()) });
        }
    }
    Ok(Continuation { points, stopped: None })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vdw_guess() -> ProfileGuess {
        ProfileGuess { anchor: vec![1.3, 0.0], speed: 0.0, normal: vec![1.0], flux_constant: vec![0.0, 0.0], period: 5.0 }
    }

    fn fast() -> ProfileOptions {
        ProfileOptions { samples: 128, ..Default::default() }
    }

    #[test]
    fn angles_round_trip() {
        for nu in [vec![1.0], vec![0.6, 0.8], vec![0.0, -1.0], vec![0.48, 0.6, 0.64]] {
            let back = normal_from_angles(&angles_from_normal(&nu));
            for (a, b) in nu.iter().zip(&back) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn angle_derivatives_match_differences() {
        let ang = [0.7, -0.4];
        for p in 0..2 {
            let an = normal_angle_derivative(&ang, p);
            let h = 1e-6;
            let mut a1 = ang;
            let mut a2 = ang;
            a1[p] += h;
            a2[p] -= h;
            let (f1, f2) = (normal_from_angles(&a1), normal_from_angles(&a2));
            for i in 0..3 {
                assert!((an[i] - (f1[i] - f2[i]) / (2.0 * h)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn finds_vdw_orbit_and_flux_identity() {
        let m = ModelSpec::vdw_cubic();
        let w = find_periodic(&m, &vdw_guess(), &fast()).unwrap();
        assert!((w.period - 5.0).abs() < 0.05, "period {}", w.period);
        let shot = shoot(&m, &params_of(&w), &fast(), false).unwrap();
        for c in 0..2 {
            assert!((shot.end[c] - w.anchor[c]).abs() < 1e-9);
        }
        // In one dimension F = S M + q for any profile solution.
        for c in 0..2 {
            let expected = w.speed * w.mean[c] + w.flux_constant[c];
            assert!((w.mean_flux[0][c] - expected).abs() < 1e-9);
        }
    }

    #[test]
    fn equilibrium_guess_is_degenerate() {
        let m = ModelSpec::vdw_cubic();
        let mut g = vdw_guess();
        g.anchor = vec![1.0, 0.0];
        assert!(matches!(find_periodic(&m, &g, &fast()), Err(Error::DegenerateOrbit { .. })));
    }

    #[test]
    fn class_functions_of_linear_pure_gradient_orbit() {
        let a = RMat::from_row_slice(2, 2, &[0.5, 1.0, -0.3, 0.2]);
        let b = RMat::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 2.0]);
        let model = ModelSpec::constant(vec![a.clone()], vec![vec![b]]).unwrap();
        let m = 64;
        let x = 2.5;
        let samples: Vec<Vec<f64>> = (0..m)
            .map(|i| {
                let y = x * i as f64 / m as f64;
                let s = (2.0 * std::f64::consts::PI * y / x).sin();
                vec![1.0 + 0.01 * s, -2.0 + 0.02 * s]
            })
            .collect();
        let cf = class_functions(&model, &samples, x, 0.0, &[1.0], &[0.0, 0.0]).unwrap();
        let exact = &a * DVector::from_vec(vec![1.0, -2.0]);
        for c in 0..2 {
            assert!((cf.mean_flux[0][c] - exact[c]).abs() < 1e-12);
        }
    }
}
