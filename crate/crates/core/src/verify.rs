//! The acceptance suite: twelve end-to-end checks on reference waves, shared
//! by the integration tests and the `verify-all` command.

use std::f64::consts::PI;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bloch::{assemble, log_radii, track_surfaces, verify_stability, StabilityOptions, TrackOptions};
use crate::coefficients::WaveCoefficients;
use crate::error::{Error, Result};
use crate::evans::{closed_form, evans, low_frequency, winding, Contour, EvansOptions, JointRay};
use crate::homogenized::{sphere_directions, HomogenizedSystem};
use crate::linalg::{c, real_eigenvalues, RMat, I};
use crate::model::BurgersPairParams;
use crate::profile::{find_periodic, manifold_jacobians, ProfileGuess, ProfileOptions, WavePoint};
use crate::semigroup::decay::{high_freq_decay, log_times, measure_decay, separable_decay, DecayOptions};
use crate::semigroup::kernels::{asymptotic_residual, build_wave_kernels, kernel_band, LowFrequencyQuadrature, SeparableData};
use crate::semigroup::nonlinear::{evolve, fit_energy, linearization_check, EnergyOptions, EvolveOptions};
use crate::semigroup::transform::{bloch_forward, bloch_inverse_complex, Field, TorusGrid, TransverseAxis};
use crate::semigroup::{Propagator, PropagatorOptions};
use crate::ModelSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub name: String,
    pub value: f64,
    /// Human-readable acceptance condition.
    pub expected: String,
    pub pass: bool,
}

fn measure(name: &str, value: f64, expected: &str, pass: bool) -> Measurement {
    Measurement { name: name.into(), value, expected: expected.into(), pass }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriterionOutcome {
    pub id: usize,
    pub title: String,
    pub pass: bool,
    pub seconds: f64,
    pub time_limit: Option<f64>,
    pub measurements: Vec<Measurement>,
    pub error: Option<String>,
}

impl CriterionOutcome {
    /// One line, `PASS`/`FAIL` first.
    pub fn summary(&self) -> String {
        let status = if self.pass { "PASS" } else { "FAIL" };
        let values: Vec<String> = self.measurements.iter().map(|m| format!("{}={:.6e} ({})", m.name, m.value, m.expected)).collect();
        let mut line = format!("{status} [{:>2}] {} ({:.1}s): {}", self.id, self.title, self.seconds, values.join(", "));
        if let Some(e) = &self.error {
            line.push_str(&format!(" error: {e}"));
        }
        line
    }
}

pub const CRITERIA: [(usize, &str, Option<f64>); 12] = [
    (1, "constant-coefficient Evans function matches the closed form", Some(60.0)),
    (2, "winding counts equal dense Bloch counts on the vdw wave", Some(300.0)),
    (3, "low-frequency factorisation of the Evans function", Some(300.0)),
    (4, "tracked surfaces match homogenized speeds", Some(300.0)),
    (5, "zero-mode count of a three-dimensional homogenized system", None),
    (6, "linear decay exponents", Some(600.0)),
    (7, "high-frequency part decays at the spectral gap", None),
    (8, "convection-diffusion kernel norm band", None),
    (9, "asymptotic residual of the convection-diffusion wave", None),
    (10, "energy inequality and linearisation consistency", None),
    (11, "vdw wave: high-frequency instability with weakly hyperbolic averages", None),
    (12, "Bloch transform isometry and round trip", None),
];

/// Runs one criterion; errors are reported as failures.
pub fn run_criterion(id: usize) -> Result<CriterionOutcome> {
    let (_, title, limit) =
        CRITERIA.iter().find(|c| c.0 == id).ok_or_else(|| Error::InvalidInput(format!("no criterion {id}")))?;
    let start = Instant::now();
    let result = match id {
        1 => evans_closed_form(),
        2 => winding_counts(),
        3 => low_frequency_factorisation(),
        4 => surface_identification(),
        5 => zero_modes(),
        6 => decay_exponents(),
        7 => high_frequency(),
        8 => kernel_norm_band(),
        9 => asymptotic_wave(),
        10 => energy_inequality(),
        11 => known_instability(),
        _ => transform_isometry(),
    };
    let seconds = start.elapsed().as_secs_f64();
    let (measurements, error) = match result {
        Ok(m) => (m, None),
        Err(e) => (Vec::new(), Some(e.to_string())),
    };
    let in_time = limit.is_none_or(|l| seconds < l);
    let pass = error.is_none() && in_time && measurements.iter().all(|m| m.pass);
    Ok(CriterionOutcome { id, title: title.to_string(), pass, seconds, time_limit: *limit, measurements, error })
}

pub fn run_all() -> Vec<CriterionOutcome> {
    CRITERIA.iter().map(|c| run_criterion(c.0).expect("listed criterion")).collect()
}

/// The vdw wave used throughout: mid-energy orbit with `tau` oscillating
/// about the elliptic centre, anchored at `tau = 1.3`.
pub fn vdw_reference(samples: usize) -> Result<(ModelSpec, WavePoint, WaveCoefficients)> {
    let model = ModelSpec::vdw_cubic();
    let guess =
        ProfileGuess { anchor: vec![1.3, 0.0], speed: 0.0, normal: vec![1.0], flux_constant: vec![0.0, 0.0], period: 4.9967 };
    let opts = ProfileOptions { samples, ..Default::default() };
    let wave = find_periodic(&model, &guess, &opts)?;
    let coef = WaveCoefficients::from_wave(&model, &wave)?;
    Ok((model, wave, coef))
}

pub fn vdw_homogenized(model: &ModelSpec, wave: &WavePoint) -> Result<HomogenizedSystem> {
    let opts = ProfileOptions { samples: wave.samples.len(), ..Default::default() };
    HomogenizedSystem::from_chart(&manifold_jacobians(model, wave, &opts)?)
}

/// Linearisation of `burgers_pair` about `(0.4 sin, 0.3 cos)` on a unit
/// cell: a strongly spectrally stable operator with periodic coefficients.
pub fn synthetic_wave(dim: usize, samples: usize) -> Result<WaveCoefficients> {
    let model =
        ModelSpec::burgers_pair(&BurgersPairParams { dim, transverse_speeds: vec![0.0; dim - 1], ..Default::default() })?;
    WaveCoefficients::trigonometric(&model, 1.0, samples, &[0.4, 0.0], &[0.0, 0.3], 0.0)
}

/// Gaussian in the first component, a smaller negative copy in the second.
pub fn bump(grid: &TorusGrid, amplitude: f64, width: f64) -> Field {
    let mid = grid.lengths()[0] / 2.0;
    Field::from_fn(grid, 2, |x, out| {
        let g = amplitude * (-(x[0] - mid).powi(2) / (2.0 * width * width)).exp();
        out[0] = g;
        out[1] = -0.5 * g;
    })
}

fn evans_closed_form() -> Result<Vec<Measurement>> {
    let a = RMat::from_row_slice(2, 2, &[0.5, 1.0, 0.3, -0.4]);
    let b = RMat::from_row_slice(2, 2, &[1.0, 0.2, 0.1, 0.7]);
    let model = ModelSpec::constant(vec![a], vec![vec![b]])?;
    let wave = WaveCoefficients::constant(&model, &[0.0, 0.0], 1.3, 8)?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let opts = EvansOptions::default();
    let mut ratios = Vec::with_capacity(100);
    for _ in 0..100 {
        let lambda = c(rng.gen_range(-1.0..2.0), rng.gen_range(-3.0..3.0));
        let xi = rng.gen_range(-PI..PI) / wave.period;
        ratios.push(evans(&wave, lambda, &[xi], &opts)?.value / closed_form(&wave, lambda, &[xi])?);
    }
    let spread = ratios.iter().map(|r| (r - ratios[0]).norm() / ratios[0].norm()).fold(0.0, f64::max);
    Ok(vec![measure("relative_spread", spread, "< 1e-7", spread < 1e-7)])
}

fn winding_counts() -> Result<Vec<Measurement>> {
    let (_, _, wave) = vdw_reference(128)?;
    let contour = Contour { center: c(0.2, 0.0), radius: 0.8 };
    let opts = EvansOptions::default();
    let mut mismatches = 0usize;
    let mut total = 0usize;
    for k in 0..20 {
        let xi = (-0.5 + (k as f64 + 0.5) / 20.0) * 2.0 * PI / wave.period;
        let dense = assemble(&wave, &[xi])?
            .eigenvalues()?
            .iter()
            .filter(|l| (*l - contour.center).norm() < contour.radius)
            .count() as i64;
        let w = winding(&wave, &[xi], contour, &opts, PI / 4.0)?;
        total += dense as usize;
        if w.count != dense {
            mismatches += 1;
        }
    }
    Ok(vec![
        measure("mismatched_frequencies", mismatches as f64, "= 0 of 20", mismatches == 0),
        measure("roots_counted", total as f64, "> 0", total > 0),
    ])
}

fn joint_rays() -> Vec<JointRay> {
    (0..8)
        .map(|k| {
            let p = 0.3 + 0.15 * k as f64;
            JointRay::normalized(vec![p.cos()], c(p.sin(), 0.0) * (I * (0.4 * k as f64 - 1.2)).exp())
        })
        .collect()
}

fn low_frequency_factorisation() -> Result<Vec<Measurement>> {
    let (model, wp, wave) = vdw_reference(128)?;
    let system = vdw_homogenized(&model, &wp)?;
    let lf = low_frequency(&wave, &system, &joint_rays(), &[1e-3, 2e-3], &EvansOptions::default())?;
    let n = wave.components as f64;
    let order_lo = lf.orders.iter().copied().fold(f64::INFINITY, f64::min);
    let order_hi = lf.orders.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let in_band = |o: f64| o >= n + 0.9 && o <= n + 1.1;
    Ok(vec![
        measure("vanish_order_min", order_lo, "in [n+0.9, n+1.1]", in_band(order_lo)),
        measure("vanish_order_max", order_hi, "in [n+0.9, n+1.1]", in_band(order_hi)),
        measure("rays", lf.rays.len() as f64, ">= 8", lf.rays.len() >= 8),
        measure("gamma0_spread", lf.gamma_spread, "< 0.01", lf.gamma_spread < 0.01),
    ])
}

fn surface_identification() -> Result<Vec<Measurement>> {
    let (model, wp, wave) = vdw_reference(128)?;
    let system = vdw_homogenized(&model, &wp)?;
    let radii = log_radii(1e-4, 1e-2, 9);
    let rays = vec![vec![1.0], vec![-1.0]];
    let surfaces = track_surfaces(&wave, &rays, &radii, &TrackOptions::default())?;
    let mut worst_err = 0.0f64;
    let mut worst_order = f64::INFINITY;
    for (k, ray) in rays.iter().enumerate() {
        let speeds = system.speeds(ray, 1e-9, 1e-7)?;
        for (j, branch) in surfaces.lambda[k].iter().enumerate() {
            let a = surfaces.a_fit[k][j];
            let hom = *speeds
                .physical
                .iter()
                .min_by(|x, y| (*x - a).norm().total_cmp(&(*y - a).norm()))
                .expect("n + 1 speeds");
            worst_err = worst_err.max((a - hom).norm() / speeds.spectral_radius);
            let remainder: Vec<f64> = branch.iter().zip(&radii).map(|(l, r)| (l + I * hom * *r).norm()).collect();
            let (x, y): (Vec<f64>, Vec<f64>) = radii.iter().zip(&remainder).map(|(r, e)| (r.ln(), e.ln())).unzip();
            worst_order = worst_order.min(crate::semigroup::decay::fit_line(&x, &y)?.slope);
        }
    }
    Ok(vec![
        measure("relative_speed_error", worst_err, "<= 1e-3", worst_err <= 1e-3),
        measure("remainder_order", worst_order, ">= 1.9", worst_order >= 1.9),
    ])
}

fn zero_modes() -> Result<Vec<Measurement>> {
    let system = HomogenizedSystem::example(3)?;
    let dirs = sphere_directions(3, 6);
    let mut bad = 0usize;
    for dir in &dirs {
        let zero = real_eigenvalues(&system.flux_symbol(dir)?)?.iter().filter(|z| z.norm() < 1e-9).count();
        let removed = system.speeds(dir, 1e-9, 1e-7)?.removed.len();
        if zero != 2 || removed != 2 {
            bad += 1;
        }
    }
    Ok(vec![
        measure("angles_without_two_zero_modes", bad as f64, "= 0", bad == 0),
        measure("angles", dirs.len() as f64, "> 0", !dirs.is_empty()),
    ])
}

fn synthetic_line(cells: usize) -> Result<(WaveCoefficients, Propagator)> {
    let wave = synthetic_wave(1, 16)?;
    let grid = TorusGrid::axial(1.0, cells, 16)?;
    let prop = Propagator::new(&wave, &grid, &PropagatorOptions::default())?;
    Ok((wave, prop))
}

fn decay_exponents() -> Result<Vec<Measurement>> {
    let (_, prop) = synthetic_line(4096)?;
    let u0 = bump(&prop.grid, 1.0, 2.0);
    let times = log_times(1.0, 1500.0, 24);
    let report = measure_decay(
        &prop,
        &u0,
        &times,
        &[2.0, f64::INFINITY],
        &DecayOptions { window: (100.0, 1500.0), ..Default::default() },
    )?;
    let slope = |k: usize| report.series[k].fit.map(|f| f.slope).unwrap_or(f64::NAN);
    let gain = report.derivative_gain[0].unwrap_or(f64::NAN);
    let heat = ModelSpec::heat(1, 1, 1.0)?;
    let heat_wave = WaveCoefficients::constant(&heat, &[0.0], 1.0, 4)?;
    let transverse = Propagator::new(&heat_wave, &TorusGrid::axial(1.0, 2048, 4)?, &PropagatorOptions::default())?;
    let g0 = Field::from_fn(&transverse.grid, 1, |x, o| o[0] = (-(x[0] - 1024.0).powi(2) / 8.0).exp());
    let sep = separable_decay(&prop, &u0, &transverse, &g0, 2, &times, (100.0, 1500.0))?;
    Ok(vec![
        measure("d1_p2_slope", slope(0), "-0.25 +- 0.05", (slope(0) + 0.25).abs() <= 0.05),
        measure("d1_pinf_slope", slope(1), "-0.5 +- 0.05", (slope(1) + 0.5).abs() <= 0.05),
        measure("d1_derivative_gain", gain, "-0.5 +- 0.1", (gain + 0.5).abs() <= 0.1),
        measure("d3_separable_p2_slope", sep.fit.slope, "-0.75 +- 0.05", (sep.fit.slope + 0.75).abs() <= 0.05),
    ])
}

fn high_frequency() -> Result<Vec<Measurement>> {
    let (_, prop) = synthetic_line(1024)?;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let values = (0..prop.grid.points() * 2).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let u0 = bloch_forward(&Field { grid: prop.grid.clone(), components: 2, values });
    // Modes just outside the cutoff bias the apparent rate upward like t^{-1/2};
    // fitting late keeps that bias well under the tolerance.
    let times: Vec<f64> = (0..=120).map(|k| 25.0 * k as f64).collect();
    let h = high_freq_decay(&prop, &u0, &times, (1000.0, 3000.0))?;
    Ok(vec![
        measure("rate", h.rate, "> 0", h.rate > 0.0),
        measure("gap", h.gap, "> 0", h.gap > 0.0),
        measure("relative_error", h.relative_error, "< 0.2", h.relative_error < 0.2),
        measure("short_time_ratio", h.short_time_ratio, "<= 1 + 1e-9", h.short_time_ratio <= 1.0 + 1e-9),
    ])
}

fn separable_kernels() -> Result<(WaveCoefficients, crate::semigroup::kernels::WaveKernelBundle, LowFrequencyQuadrature)> {
    let wave = synthetic_wave(3, 16)?;
    let eps = 0.3;
    let quad = LowFrequencyQuadrature::new(3, eps, 24, 10, 8)?;
    let surfaces = track_surfaces(&wave, &quad.directions.directions, &log_radii(1e-3, 0.1, 8), &TrackOptions::default())?;
    let bundle = build_wave_kernels(&surfaces, eps)?;
    Ok((wave, bundle, quad))
}

fn kernel_norm_band() -> Result<Vec<Measurement>> {
    let (_, bundle, quad) = separable_kernels()?;
    let band = kernel_band(&bundle, &quad, &log_times(1.0, 100.0, 12))?;
    Ok(vec![
        measure("lower", band.lower, "> 0", band.lower > 0.0),
        measure("upper", band.upper, "finite", band.upper.is_finite()),
        measure("ratio", band.ratio, "< 3", band.ratio < 3.0),
    ])
}

fn asymptotic_wave() -> Result<Vec<Measurement>> {
    let (wave, bundle, quad) = separable_kernels()?;
    let data = SeparableData { amplitude: vec![1.0, 0.5], centre: 0.0, axial_width: 1.0, transverse_width: 1.0, odd: false };
    let times = log_times(10.0, 1000.0, 12);
    let even = asymptotic_residual(&wave, &bundle, &quad, &data, &times, 0.0)?;
    let odd = asymptotic_residual(&wave, &bundle, &quad, &SeparableData { odd: true, ..data }, &times, 0.0)?;
    let slope = even.fit.slope;
    let (x, y): (Vec<f64>, Vec<f64>) = times.iter().zip(&odd.absolute).map(|(t, a)| ((1.0 + t).ln(), a.ln())).unzip();
    let odd_fit = crate::semigroup::decay::fit_line(&x, &y)?;
    let bound = -(bundle.dim as f64) / 4.0;
    Ok(vec![
        measure("relative_residual_slope", slope, "-0.5 +- 0.1", (slope + 0.5).abs() <= 0.1),
        measure("zero_mass_slope", odd_fit.slope, "< -d/4 beyond fit error", odd_fit.slope + odd_fit.half_width() < bound),
        measure("zero_mass", if odd.zero_mass { 1.0 } else { 0.0 }, "= 1", odd.zero_mass),
    ])
}

fn energy_inequality() -> Result<Vec<Measurement>> {
    let (wave, prop) = synthetic_line(128)?;
    let times: Vec<f64> = (1..=40).map(|k| 2.5 * k as f64).collect();
    let traj = evolve(&prop, &wave, &bump(&prop.grid, 0.05, 3.0), &times, &EvolveOptions::default(), false)?;
    let fit = fit_energy(&traj.history, &EnergyOptions::default())?;
    let (wave, prop) = synthetic_line(64)?;
    let lin = linearization_check(&prop, &wave, &bump(&prop.grid, 1.0, 3.0), &[1.0, 5.0, 20.0], 1e-6, &EvolveOptions::default())?;
    Ok(vec![
        measure("energy_constant", fit.constant, "<= 1e3", fit.holds && fit.constant <= 1e3),
        measure("theta1", fit.theta1, "> 0", fit.theta1 > 0.0),
        measure("theta2", fit.theta2, "> 0", fit.theta2 > 0.0),
        measure("inequality_margin", fit.margin, ">= 0 at every step", fit.margin >= -1e-12),
        measure("deviation_ratio", lin.ratio, "4 +- 0.2 (quadratic)", (lin.ratio - 4.0).abs() <= 0.2),
        measure("relative_deviation", lin.relative, "< 1e-4", lin.relative < 1e-4),
    ])
}

fn known_instability() -> Result<Vec<Measurement>> {
    let (model, wp, wave) = vdw_reference(128)?;
    let report = verify_stability(&wave, &StabilityOptions::for_dim(1))?;
    let hyp = vdw_homogenized(&model, &wp)?.check_weak_hyperbolicity(&sphere_directions(1, 1), 1e-8)?;
    Ok(vec![
        measure("d1_pass", if report.d1_pass { 1.0 } else { 0.0 }, "= 0 (instability exposed)", !report.d1_pass),
        measure("worst_real", report.worst_real, "> 0", report.worst_real > 0.0),
        measure("worst_xi", report.worst_xi[0], "away from the origin", report.worst_is_high_frequency),
        measure("weak_hyperbolicity_imag", hyp.worst_imag, "< 1e-8", hyp.pass),
        // Reported, not required: this wave also has an anti-diffusive branch.
        measure("d2_theta_fit", report.theta_fit, "reported", true),
    ])
}

/// Grid sizes exercised by the transform checks.
pub fn transform_grids() -> Result<Vec<TorusGrid>> {
    Ok(vec![
        TorusGrid::axial(1.0, 1, 8)?,
        TorusGrid::axial(2.5, 7, 16)?,
        TorusGrid::axial(1.0, 64, 32)?,
        TorusGrid::axial(1.0, 256, 256)?,
        TorusGrid::new(1.3, 6, 8, vec![TransverseAxis { points: 5, length: 3.0 }])?,
        TorusGrid::new(1.0, 4, 8, vec![TransverseAxis { points: 6, length: 2.0 }, TransverseAxis { points: 3, length: 4.0 }])?,
    ])
}

fn transform_isometry() -> Result<Vec<Measurement>> {
    let mut parseval = 0.0f64;
    let mut round_trip = 0.0f64;
    for (k, grid) in transform_grids()?.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + k as u64);
        let values = (0..grid.points() * 2).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let f = Field { grid: grid.clone(), components: 2, values };
        let b = bloch_forward(&f);
        parseval = parseval.max((b.norm() - f.norm_l2()).abs() / f.norm_l2());
        let back = bloch_inverse_complex(&b);
        round_trip = f.values.iter().zip(&back).map(|(x, y)| (x - y).norm()).fold(round_trip, f64::max);
    }
    Ok(vec![
        measure("parseval_relative_error", parseval, "< 1e-10", parseval < 1e-10),
        measure("round_trip_error", round_trip, "< 1e-12", round_trip < 1e-12),
    ])
}
