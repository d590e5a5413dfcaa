//! One function per subcommand. Each writes its artifacts through
//! [`RunOutput`] and returns the outcome of its check, if it has one.

use nalgebra::DMatrix;
use num_complex::Complex64;
use perstab::bloch::{assemble, track_surfaces, verify_stability, zone_grid, scan_spectrum};
use perstab::evans::{evans, low_frequency, winding};
use perstab::homogenized::sphere_directions;
use perstab::profile::{class_functions, continue_manifold, find_periodic, manifold_jacobians, submersion_margin};
use perstab::semigroup::decay::{high_freq_decay, measure_decay, DecayOptions};
use perstab::semigroup::kernels::{asymptotic_residual, build_wave_kernels, kernel_band, LowFrequencyQuadrature};
use perstab::semigroup::nonlinear::{evolve, fit_energy, linearization_check, EvolveOptions};
use perstab::semigroup::bloch_forward;
use perstab::verify::{run_criterion, CRITERIA};
use perstab::{
    Contour, Cutoff, EvansOptions, Field, HomogenizedSystem, JointRay, ModelSpec, ProfileGuess, ProfileOptions, Propagator,
    PropagatorOptions, StabilityOptions, Tolerances, TorusGrid, TrackOptions, WaveCoefficients, WavePoint,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use crate::config::{DataKind, ModelName, RunConfig, WaveSource};
use crate::error::CliError;
use crate::output::{Cell, RunOutput};

type Outcome = Result<Option<bool>, CliError>;

fn cpx(z: Complex64) -> [f64; 2] {
    [z.re, z.im]
}

fn matrix(rows: &[Vec<f64>], n: usize, key: &str) -> Result<DMatrix<f64>, CliError> {
    if rows.len() != n || rows.iter().any(|r| r.len() != n) {
        return Err(CliError::config(format!("{key} entries must be {n} x {n} matrices"), key));
    }
    Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
}

pub fn build_model(cfg: &RunConfig) -> Result<ModelSpec, CliError> {
    let p = &cfg.params;
    Ok(match cfg.model {
        ModelName::Heat => ModelSpec::heat(p.dim, p.components, p.diffusion)?,
        ModelName::VdwCubic if p.transverse.is_empty() => ModelSpec::vdw_cubic(),
        ModelName::VdwCubic => ModelSpec::vdw_cubic_transverse(&p.transverse),
        ModelName::BurgersPair => ModelSpec::burgers_pair(&p.burgers.clone().unwrap_or_default())?,
        ModelName::ConstCoeff => {
            let d = p.a.len();
            if d == 0 || p.b.len() != d * d {
                return Err(CliError::config("const_coeff needs d flux matrices `a` and d^2 viscosity matrices `b`", "params.a"));
            }
            let n = p.a[0].len();
            let a = p.a.iter().map(|m| matrix(m, n, "params.a")).collect::<Result<Vec<_>, _>>()?;
            let b = (0..d)
                .map(|j| (0..d).map(|k| matrix(&p.b[j * d + k], n, "params.b")).collect::<Result<Vec<_>, _>>())
                .collect::<Result<Vec<_>, _>>()?;
            ModelSpec::constant(a, b)?
        }
    })
}

pub fn profile_options(cfg: &RunConfig) -> ProfileOptions {
    let t = &cfg.tolerances;
    let base = ProfileOptions::default();
    ProfileOptions {
        samples: cfg.resolution.samples,
        tol: Tolerances { rtol: t.ode_rtol, atol: t.ode_atol, max_steps: base.tol.max_steps },
        newton_tol: t.newton_tol,
        ..base
    }
}

fn evans_options(cfg: &RunConfig) -> EvansOptions {
    let base = EvansOptions::default();
    EvansOptions {
        tol: Tolerances { rtol: cfg.tolerances.evans_rtol, atol: cfg.tolerances.evans_atol, max_steps: base.tol.max_steps },
        ..base
    }
}

/// The model, the converged profile when the source is a guess, and the
/// periodic coefficients of the linearisation.
pub struct Wave {
    pub model: ModelSpec,
    pub point: Option<WavePoint>,
    pub coef: WaveCoefficients,
}

impl Wave {
    fn require_point(&self, what: &str) -> Result<&WavePoint, CliError> {
        self.point.as_ref().ok_or_else(|| CliError::config(format!("{what} needs wave.kind = \"profile\""), "wave.kind"))
    }

    fn homogenized(&self, cfg: &RunConfig, out: &mut RunOutput) -> Result<HomogenizedSystem, CliError> {
        let point = self.require_point("the averaged system")?;
        let opts = profile_options(cfg);
        let chart = out.stage("manifold_jacobians", || manifold_jacobians(&self.model, point, &opts))?;
        Ok(HomogenizedSystem::from_chart(&chart)?)
    }

    fn dim(&self) -> usize {
        self.coef.dim
    }
}

fn guess(source: &WaveSource) -> Option<ProfileGuess> {
    match source {
        WaveSource::Profile { anchor, speed, normal, flux_constant, period } => Some(ProfileGuess {
            anchor: anchor.clone(),
            speed: *speed,
            normal: normal.clone(),
            flux_constant: flux_constant.clone(),
            period: *period,
        }),
        _ => None,
    }
}

pub fn build_wave(cfg: &RunConfig, out: &mut RunOutput) -> Result<Wave, CliError> {
    let model = build_model(cfg)?;
    let m = cfg.resolution.samples;
    let (point, coef) = match &cfg.wave {
        WaveSource::Profile { .. } => {
            let g = guess(&cfg.wave).expect("profile source");
            let opts = profile_options(cfg);
            let point = out.stage("find_periodic", || find_periodic(&model, &g, &opts))?;
            let coef = WaveCoefficients::from_wave(&model, &point)?;
            (Some(point), coef)
        }
        WaveSource::Constant { state, period } => (None, WaveCoefficients::constant(&model, state, *period, m)?),
        WaveSource::Trigonometric { period, cos_amp, sin_amp, speed } => {
            (None, WaveCoefficients::trigonometric(&model, *period, m, cos_amp, sin_amp, *speed)?)
        }
    };
    Ok(Wave { model, point, coef })
}

/// JSON record of a wave: period `X`, frequency `Omega`, speed `S`, normal
/// `N`, flux constant `Q`, mean `M` and mean fluxes `F`.
#[derive(Serialize)]
struct WaveRecord<'a> {
    model_id: &'a str,
    #[serde(rename = "X")]
    period: f64,
    #[serde(rename = "Omega")]
    frequency: f64,
    #[serde(rename = "S")]
    speed: f64,
    #[serde(rename = "N")]
    normal: &'a [f64],
    #[serde(rename = "Q")]
    flux_constant: &'a [f64],
    #[serde(rename = "M")]
    mean: &'a [f64],
    #[serde(rename = "F")]
    mean_flux: &'a [Vec<f64>],
    anchor: &'a [f64],
    samples: &'a [Vec<f64>],
}

fn record<'a>(model: &'a ModelSpec, w: &'a WavePoint) -> WaveRecord<'a> {
    WaveRecord {
        model_id: &model.id,
        period: w.period,
        frequency: w.frequency,
        speed: w.speed,
        normal: &w.normal,
        flux_constant: &w.flux_constant,
        mean: &w.mean,
        mean_flux: &w.mean_flux,
        anchor: &w.anchor,
        samples: &w.samples,
    }
}

fn profile_rows(w: &WavePoint) -> Vec<Vec<Cell>> {
    let m = w.samples.len();
    w.samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut row = vec![Cell::F(w.period * i as f64 / m as f64)];
            row.extend(s.iter().map(|&v| Cell::F(v)));
            row
        })
        .collect()
}

fn component_header(first: &str, prefix: &str, n: usize) -> Vec<String> {
    std::iter::once(first.to_string()).chain((0..n).map(|k| format!("{prefix}{k}"))).collect()
}

pub fn profile_find(cfg: &RunConfig, out: &mut RunOutput) -> Outcome {
    let model = build_model(cfg)?;
    let g = guess(&cfg.wave).ok_or_else(|| CliError::config("profile find needs wave.kind = \"profile\"", "wave.kind"))?;
    let opts = profile_options(cfg);
    let w = out.stage("find_periodic", || find_periodic(&model, &g, &opts))?;
    let margin = out.stage("submersion_margin", || submersion_margin(&model, &w, &opts))?;
    // Recomputing the averages from the samples alone guards the stored ones.
    let check = class_functions(&model, &w.samples, w.period, w.speed, &w.normal, &w.flux_constant)?;
    let mean_error = check.mean.iter().zip(&w.mean).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    out.json("profile.json", &json!({ "wave": record(&model, &w), "submersion_margin": margin, "mean_recomputation_error": mean_error }))?;
    let header = component_header("y", "u", model.components);
    out.csv("profile.csv", &header.iter().map(String::as_str).collect::<Vec<_>>(), &profile_rows(&w))?;
    Ok(None)
}

pub fn profile_continue(cfg: &RunConfig, out: &mut RunOutput) -> Outcome {
    let model = build_model(cfg)?;
    let g = guess(&cfg.wave).ok_or_else(|| CliError::config("profile continue needs wave.kind = \"profile\"", "wave.kind"))?;
    let c = &cfg.continuation;
    if c.direction.is_empty() {
        return Err(CliError::config("continuation.direction is required", "continuation.direction"));
    }
    let opts = profile_options(cfg);
    let base = out.stage("find_periodic", || find_periodic(&model, &g, &opts))?;
    let family = out.stage("continue_manifold", || continue_manifold(&model, &base, &c.direction, c.step, c.steps, &opts))?;
    let records: Vec<WaveRecord> = family.points.iter().map(|w| record(&model, w)).collect();
    out.json("continuation.json", &json!({ "points": records, "stopped": family.stopped }))?;
    let n = model.components;
    let mut header = vec!["index".to_string(), "X".into(), "S".into()];
    header.extend((0..n).map(|k| format!("M{k}")));
    let rows: Vec<Vec<Cell>> = family
        .points
        .iter()
        .enumerate()
        .map(|(i, w)| {
            let mut row = vec![Cell::from(i), Cell::F(w.period), Cell::F(w.speed)];
            row.extend(w.mean.iter().map(|&v| Cell::F(v)));
            row
        })
        .collect();
    out.csv("continuation.csv", &header.iter().map(String::as_str).collect::<Vec<_>>(), &rows)?;
    Ok(None)
}

pub fn homogenize(cfg: &RunConfig, out: &mut RunOutput) -> Outcome {
    let wave = build_wave(cfg, out)?;
    let point = wave.require_point("homogenize")?;
    let margin = submersion_margin(&wave.model, point, &profile_options(cfg))?;
    let hs = wave.homogenized(cfg, out)?;
    let t = &cfg.tolerances;
    let dirs = sphere_directions(wave.dim(), cfg.resolution.angles);
    let speeds = out.stage("speeds", || dirs.iter().map(|d| hs.speeds(d, t.zero_tol, t.hyp_tol)).collect::<Result<Vec<_>, _>>())?;
    let hyp = hs.check_weak_hyperbolicity(&dirs, t.hyp_tol)?;
    let distinct = speeds.iter().all(|s| s.distinct);
    let per_angle: Vec<_> = speeds
        .iter()
        .map(|s| {
            json!({
                "direction": s.direction,
                "physical": s.physical.iter().map(|z| cpx(*z)).collect::<Vec<_>>(),
                "removed": s.removed.iter().map(|z| cpx(*z)).collect::<Vec<_>>(),
                "spectral_radius": s.spectral_radius,
                "hyperbolic": s.hyperbolic,
                "distinct": s.distinct,
            })
        })
        .collect();
    let nondegenerate = margin > 0.0;
    out.json(
        "homogenize.json",
        &json!({
            "nondegenerate": nondegenerate,
            "submersion_margin": margin,
            "weak_hyperbolic": hyp.pass,
            "worst_imag": hyp.worst_imag,
            "worst_direction": hyp.worst_direction,
            "h3_distinct": distinct,
            "speeds": per_angle,
        }),
    )?;
    let d = wave.dim();
    let mut header: Vec<String> = vec!["angle".into()];
    header.extend((0..d).map(|k| format!("dir{k}")));
    header.extend(["j".into(), "re_a".into(), "im_a".into()]);
    let mut rows = Vec::new();
    for (i, s) in speeds.iter().enumerate() {
        for (j, a) in s.physical.iter().enumerate() {
            let mut row = vec![Cell::from(i)];
            row.extend(s.direction.iter().map(|&x| Cell::F(x)));
            row.extend([Cell::from(j), Cell::F(a.re), Cell::F(a.im)]);
            rows.push(row);
        }
    }
    out.csv("homogenize.csv", &header.iter().map(String::as_str).collect::<Vec<_>>(), &rows)?;
    Ok(Some(nondegenerate && hyp.pass))
}

fn transverse_rows(cfg: &RunConfig, d: usize) -> Result<Vec<Vec<f64>>, CliError> {
    let rows = if cfg.resolution.transverse.is_empty() { vec![vec![0.0; d - 1]] } else { cfg.resolution.transverse.clone() };
    if rows.iter().any(|r| r.len() != d - 1) {
        return Err(CliError::config(format!("transverse frequencies need {} entries", d - 1), "resolution.transverse"));
    }
    Ok(rows)
}

fn xi_header(d: usize) -> Vec<String> {
    (0..d).map(|k| format!("xi{k}")).collect()
}

pub fn spectrum(cfg: &RunConfig, out: &mut RunOutput) -> Outcome {
    let wave = build_wave(cfg, out)?;
    let d = wave.dim();
    let grid: Vec<Vec<f64>> = transverse_rows(cfg, d)?
        .iter()
        .flat_map(|t| zone_grid(wave.coef.period, cfg.resolution.zone_points, t))
        .collect();
    let spectra = out.stage("eigenvalues", || {
        grid.par_iter()
            .map(|xi| {
                let mut ev = assemble(&wave.coef, xi)?.eigenvalues()?;
                ev.sort_by(|a, b| b.re.total_cmp(&a.re).then(a.im.total_cmp(&b.im)));
                Ok(ev)
            })
            .collect::<perstab::Result<Vec<_>>>()
    })?;
    let t = &cfg.tolerances;
    let scan = out.stage("scan", || scan_spectrum(&wave.coef, &grid, t.d1_margin, t.cluster_tol))?;
    out.json(
        "spectrum.json",
        &json!({
            "xi": scan.xi,
            "max_real": scan.max_real,
            "worst_xi": scan.xi[scan.worst_index],
            "worst_real": scan.max_real[scan.worst_index],
            "violations": scan.violations.iter().map(|&i| &scan.xi[i]).collect::<Vec<_>>(),
            "stable": scan.stable(),
        }),
    )?;
    let keep = cfg.resolution.spectrum_keep;
    let mut header = xi_header(d);
    header.extend(["rank".into(), "re".into(), "im".into()]);
    let mut rows = Vec::new();
    for (xi, ev) in grid.iter().zip(&spectra) {
        let count = if keep == 0 { ev.len() } else { keep.min(ev.len()) };
        for (r, l) in ev.iter().take(count).enumerate() {
            let mut row: Vec<Cell> = xi.iter().map(|&x| Cell::F(x)).collect();
            row.extend([Cell::from(r), Cell::F(l.re), Cell::F(l.im)]);
            rows.push(row);
        }
    }
    out.csv("spectrum.csv", &header.iter().map(String::as_str).collect::<Vec<_>>(), &rows)?;
    Ok(None)
}

fn rays(cfg: &RunConfig, d: usize) -> Result<Vec<Vec<f64>>, CliError> {
    let rays = if cfg.resolution.rays.is_empty() { StabilityOptions::for_dim(d).rays } else { cfg.resolution.rays.clone() };
    for r in &rays {
        let norm = r.iter().map(|x| x * x).sum::<f64>().sqrt();
        if r.len() != d || (norm - 1.0).abs() > 1e-12 {
            return Err(CliError::config(format!("rays must be unit vectors in R^{d}"), "resolution.rays"));
        }
    }
    Ok(rays)
}

fn track_options(cfg: &RunConfig) -> TrackOptions {
    TrackOptions { cluster_tol: cfg.tolerances.cluster_tol, ..Default::default() }
}

pub fn surfaces(cfg: &RunConfig, out: &mut RunOutput) -> Outcome {
    let wave = build_wave(cfg, out)?;
    let rays = rays(cfg, wave.dim())?;
    let radii = cfg.resolution.radii.values();
    let s = out.stage("track_surfaces", || track_surfaces(&wave.coef, &rays, &radii, &track_options(cfg)))?;
    let comparison = match &wave.point {
        Some(_) => {
            let hs = wave.homogenized(cfg, out)?;
            let mut per_ray = Vec::new();
            for (k, ray) in rays.iter().enumerate() {
                let sp = hs.speeds(ray, cfg.tolerances.zero_tol, cfg.tolerances.hyp_tol)?;
                let errors: Vec<f64> = s.a_fit[k]
                    .iter()
                    .map(|a| sp.physical.iter().map(|h| (a - h).norm()).fold(f64::INFINITY, f64::min) / sp.spectral_radius)
                    .collect();
                per_ray.push(json!({ "homogenized": sp.physical.iter().map(|z| cpx(*z)).collect::<Vec<_>>(), "relative_error": errors }));
            }
            Some(per_ray)
        }
        None => None,
    };
    let a: Vec<Vec<[f64; 2]>> = s.a_fit.iter().map(|r| r.iter().map(|z| cpx(*z)).collect()).collect();
    let b: Vec<Vec<[f64; 2]>> = s.b_fit.iter().map(|r| r.iter().map(|z| cpx(*z)).collect()).collect();
    out.json(
        "surfaces.json",
        &json!({
            "rays": s.rays, "radii": s.radii, "cluster": s.cluster, "a_fit": a, "b_fit": b,
            "fit_residual": s.fit_residual, "theta_fit": s.theta_fit, "homogenized": comparison,
        }),
    )?;
    let mut rows = Vec::new();
    for (k, branches) in s.lambda.iter().enumerate() {
        for (i, r) in s.radii.iter().enumerate() {
            for (j, branch) in branches.iter().enumerate() {
                rows.push(vec![Cell::from(k), Cell::F(*r), Cell::from(j), Cell::F(branch[i].re), Cell::F(branch[i].im)]);
            }
        }
    }
    out.csv("surfaces.csv", &["ray", "r", "branch", "re", "im"], &rows)?;
    Ok(None)
}

pub fn stability_report(cfg: &RunConfig, out: &mut RunOutput) -> Outcome {
    let wave = build_wave(cfg, out)?;
    let d = wave.dim();
    let t = &cfg.tolerances;
    let opts = StabilityOptions {
        zone_points: cfg.resolution.zone_points,
        transverse: transverse_rows(cfg, d)?,
        d1_margin: t.d1_margin,
        cluster_tol: t.cluster_tol,
        rays: rays(cfg, d)?,
        radii: cfg.resolution.radii.values(),
    };
    let report = out.stage("verify_stability", || verify_stability(&wave.coef, &opts))?;
    let (hyperbolicity, h1) = match &wave.point {
        Some(point) => {
            let hs = wave.homogenized(cfg, out)?;
            let dirs = sphere_directions(d, cfg.resolution.angles);
            (Some(hs.check_weak_hyperbolicity(&dirs, t.hyp_tol)?), Some(wave.model.check_h1(&point.samples, &dirs)?))
        }
        None => (None, None),
    };
    // First-order (weak hyperbolicity) test of the averaged system; it says
    // nothing about the second-order coefficients, which D2 covers.
    let low_pass = hyperbolicity.as_ref().is_none_or(|h| h.pass);
    out.json(
        "stability.json",
        &json!({
            "d1": {
                "pass": report.d1_pass,
                "margin": report.margin,
                "worst_xi": report.worst_xi,
                "worst_real": report.worst_real,
                "worst_is_high_frequency": report.worst_is_high_frequency,
                "unstable_xi": report.unstable_xi,
            },
            "d2": {
                "pass": report.d2_pass,
                "theta_fit": report.theta_fit,
                "cluster": report.cluster,
            },
            "low_frequency": {
                "pass": low_pass,
                "weak_hyperbolicity": hyperbolicity,
            },
            "h1": h1,
        }),
    )?;
    let mut header = xi_header(d);
    header.push("max_real".into());
    let rows: Vec<Vec<Cell>> = report
        .xi
        .iter()
        .zip(&report.max_real)
        .map(|(xi, m)| xi.iter().map(|&x| Cell::F(x)).chain([Cell::F(*m)]).collect())
        .collect();
    out.csv("stability.csv", &header.iter().map(String::as_str).collect::<Vec<_>>(), &rows)?;
    Ok(Some(report.d1_pass && report.d2_pass && low_pass))
}

fn evans_xi(cfg: &RunConfig, d: usize) -> Result<Vec<Vec<f64>>, CliError> {
    let xi = if cfg.evans.xi == vec![vec![0.0]] && d > 1 { vec![vec![0.0; d]] } else { cfg.evans.xi.clone() };
    if xi.iter().any(|x| x.len() != d) {
        return Err(CliError::config(format!("evans.xi entries need {d} components"), "evans.xi"));
    }
    Ok(xi)
}

pub fn evans_eval(cfg: &RunConfig, out: &mut RunOutput) -> Outcome {
    let wave = build_wave(cfg, out)?;
    let xis = evans_xi(cfg, wave.dim())?;
    let opts = evans_options(cfg);
    let pairs: Vec<(Vec<f64>, Complex64)> =
        xis.iter().flat_map(|xi| cfg.evans.lambdas.iter().map(move |l| (xi.clone(), Complex64::new(l[0], l[1])))).collect();
    let values = out.stage("evans", || {
        pairs.par_iter().map(|(xi, l)| evans(&wave.coef, *l, xi, &opts)).collect::<perstab::Result<Vec<_>>>()
    })?;
    let records: Vec<_> = values
        .iter()
        .zip(&pairs)
        .map(|(v, (xi, _))| {
            json!({
                "lambda": cpx(v.lambda), "xi": xi, "value": cpx(v.value), "log_abs": v.log_abs,
                "basis_condition": v.basis_condition, "ill_conditioned": v.ill_conditioned, "segments": v.segments,
            })
        })
        .collect();
    out.json("evans.json", &records)?;
    let rows: Vec<Vec<Cell>> = values
        .iter()
        .map(|v| {
            vec![Cell::F(v.lambda.re), Cell::F(v.lambda.im), Cell::F(v.xi1), Cell::F(v.value.norm()), Cell::F(v.value.arg()), Cell::F(v.log_abs)]
        })
        .collect();
    out.csv("evans.csv", &["re_lambda", "im_lambda", "xi1", "abs_d", "arg_d", "log_abs_d"], &rows)?;
    Ok(None)
}

pub fn evans_wind(cfg: &RunConfig, out: &mut RunOutput) -> Outcome {
    let wave = build_wave(cfg, out)?;
    let xis = evans_xi(cfg, wave.dim())?;
    let opts = evans_options(cfg);
    let e = &cfg.evans;
    let contour = Contour { center: Complex64::new(e.contour_center[0], e.contour_center[1]), radius: e.contour_radius };
    let results = out.stage("winding", || {
        xis.par_iter()
            .map(|xi| {
                let w = winding(&wave.coef, xi, contour, &opts, e.max_turn)?;
                let dense = assemble(&wave.coef, xi)?.eigenvalues()?.iter().filter(|l| (*l - contour.center).norm() < contour.radius).count();
                Ok((w, dense as i64))
            })
            .collect::<perstab::Result<Vec<_>>>()
    })?;
    let all_match = results.iter().all(|(w, dense)| w.count == *dense);
    let records: Vec<_> = results
        .iter()
        .zip(&xis)
        .map(|((w, dense), xi)| json!({ "xi": xi, "count": w.count, "raw": w.raw, "min_abs": w.min_abs, "dense_count": dense, "samples": w.samples.len() }))
        .collect();
    out.json("winding.json", &json!({ "center": e.contour_center, "radius": e.contour_radius, "counts": records, "all_match": all_match }))?;
    let mut rows = Vec::new();
    for ((w, _), xi) in results.iter().zip(&xis) {
        for (theta, l, dv) in &w.samples {
            rows.push(vec![Cell::F(l.re), Cell::F(l.im), Cell::F(xi[0]), Cell::F(dv.norm()), Cell::F(dv.arg()), Cell::F(*theta)]);
        }
    }
    out.csv("winding.csv", &["re_lambda", "im_lambda", "xi1", "abs_d", "arg_d", "theta"], &rows)?;
    Ok(Some(all_match))
}

fn joint_rays(cfg: &RunConfig, d: usize) -> Result<Vec<JointRay>, CliError> {
    if cfg.evans.rays.is_empty() {
        return Ok((0..8)
            .map(|k| {
                let p = 0.3 + 0.15 * k as f64;
                let mut xi = vec![0.0; d];
                xi[0] = p.cos();
                JointRay::normalized(xi, Complex64::new(p.sin(), 0.0) * Complex64::new(0.0, 0.4 * k as f64 - 1.2).exp())
            })
            .collect());
    }
    cfg.evans
        .rays
        .iter()
        .map(|r| {
            if r.xi.len() != d {
                return Err(CliError::config(format!("evans.rays xi needs {d} components"), "evans.rays"));
            }
            Ok(JointRay::normalized(r.xi.clone(), Complex64::new(r.lambda[0], r.lambda[1])))
        })
        .collect()
}

pub fn evans_lowfreq(cfg: &RunConfig, out: &mut RunOutput) -> Outcome {
    let wave = build_wave(cfg, out)?;
    let hs = wave.homogenized(cfg, out)?;
    let rays = joint_rays(cfg, wave.dim())?;
    let radii = &cfg.evans.lowfreq_radii;
    let lf = out.stage("low_frequency", || low_frequency(&wave.coef, &hs, &rays, radii, &evans_options(cfg)))?;
    let n = wave.coef.components as f64;
    let orders_ok = !lf.orders.is_empty() && lf.orders.iter().all(|o| (o - (n + 1.0)).abs() <= 0.1);
    let pass = orders_ok && lf.gamma_spread < 0.01;
    out.json(
        "lowfreq.json",
        &json!({
            "rays": lf.rays.iter().map(|r| json!({ "xi": r.xi, "lambda": cpx(r.lambda) })).collect::<Vec<_>>(),
            "excluded": lf.excluded,
            "radii": lf.radii,
            "orders": lf.orders,
            "vanish_order": lf.vanish_order,
            "expected_order": n + 1.0,
            "gamma0": lf.gamma0.iter().map(|z| cpx(*z)).collect::<Vec<_>>(),
            "gamma_spread": lf.gamma_spread,
            "raw_spread": lf.raw_spread,
            "pass": pass,
        }),
    )?;
    let mut rows = Vec::new();
    for (k, vals) in lf.values.iter().enumerate() {
        for (rho, v) in lf.radii.iter().zip(vals) {
            rows.push(vec![Cell::from(k), Cell::F(*rho), Cell::F(v.re), Cell::F(v.im), Cell::F(v.norm())]);
        }
    }
    out.csv("lowfreq.csv", &["ray", "rho", "re_d", "im_d", "abs_d"], &rows)?;
    Ok(Some(pass))
}

fn propagator(cfg: &RunConfig, wave: &Wave, out: &mut RunOutput) -> Result<Propagator, CliError> {
    let grid = TorusGrid::new(wave.coef.period, cfg.resolution.cells, wave.coef.samples(), cfg.resolution.grid_transverse.clone())?;
    let opts = PropagatorOptions {
        cutoff: Cutoff { eps: cfg.tolerances.eps },
        condition_limit: cfg.tolerances.condition_limit,
        ..Default::default()
    };
    Ok(out.stage("propagator", || Propagator::new(&wave.coef, &grid, &opts))?)
}

/// Initial data on the torus: a Gaussian centred on the torus with
/// component weights `1, -1/2, 1/4, ...`, or seeded uniform noise.
pub fn initial_data(cfg: &RunConfig, grid: &TorusGrid, components: usize) -> Field {
    let d = &cfg.data;
    match d.kind {
        DataKind::Bump => {
            let centre: Vec<f64> = grid.lengths().iter().map(|l| l / 2.0).collect();
            Field::from_fn(grid, components, |x, out| {
                let r2: f64 = x.iter().zip(&centre).map(|(a, b)| (a - b).powi(2)).sum();
                let g = d.amplitude * (-r2 / (2.0 * d.width * d.width)).exp();
                for (k, o) in out.iter_mut().enumerate() {
                    *o = g * (-0.5f64).powi(k as i32);
                }
            })
        }
        DataKind::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let values = (0..grid.points() * components).map(|_| d.amplitude * rng.gen_range(-1.0..1.0)).collect();
            Field { grid: grid.clone(), components, values }
        }
    }
}

fn fit_json(fit: &perstab::semigroup::decay::LineFit) -> serde_json::Value {
    let hw = fit.half_width();
    json!({ "slope": fit.slope, "stderr": fit.stderr, "interval": [fit.slope - hw, fit.slope + hw], "points": fit.points })
}

pub fn decay(cfg: &RunConfig, out: &mut RunOutput) -> Outcome {
    let wave = build_wave(cfg, out)?;
    let prop = propagator(cfg, &wave, out)?;
    let u0 = initial_data(cfg, &prop.grid, wave.coef.components);
    let c = &cfg.decay;
    let times = c.times.values();
    let opts = DecayOptions { window: (c.window[0], c.window[1]), wrap_fraction: c.wrap_fraction, derivative: c.derivative };
    let report = out.stage("measure_decay", || measure_decay(&prop, &u0, &times, &c.ps, &opts))?;
    let hf = if c.high_frequency {
        let b = bloch_forward(&u0);
        let hf_times = c.hf_times.values();
        Some(out.stage("high_freq_decay", || high_freq_decay(&prop, &b, &hf_times, (c.hf_window[0], c.hf_window[1])))?)
    } else {
        None
    };
    let fits: Vec<_> = report.series.iter().map(|s| json!({ "label": s.label, "fit": s.fit.as_ref().map(fit_json) })).collect();
    let dfits: Vec<_> = report.derivative.iter().map(|s| json!({ "label": s.label, "fit": s.fit.as_ref().map(fit_json) })).collect();
    out.json(
        "decay.json",
        &json!({
            "dim": wave.dim(),
            "window": report.window,
            "wrap_time": report.wrap_time,
            "notices": report.notices,
            "exponents": fits,
            "derivative_exponents": dfits,
            "derivative_gain": report.derivative_gain,
            "high_frequency": hf.as_ref().map(|h| json!({
                "rate": h.rate, "gap": h.gap, "relative_error": h.relative_error,
                "short_time_ratio": h.short_time_ratio, "fit": fit_json(&h.fit),
            })),
        }),
    )?;
    let mut header = vec!["t".to_string()];
    header.extend(report.series.iter().map(|s| format!("norm_{}", s.label)));
    header.extend(report.derivative.iter().map(|s| format!("dnorm_{}", s.label)));
    let rows: Vec<Vec<Cell>> = report
        .times
        .iter()
        .enumerate()
        .map(|(i, t)| {
            std::iter::once(Cell::F(*t))
                .chain(report.series.iter().chain(&report.derivative).map(|s| Cell::F(s.norms[i])))
                .collect()
        })
        .collect();
    out.csv("decay.csv", &header.iter().map(String::as_str).collect::<Vec<_>>(), &rows)?;
    if let Some(h) = &hf {
        let rows: Vec<Vec<Cell>> = h.times.iter().zip(&h.log_norms).map(|(t, l)| vec![Cell::F(*t), Cell::F(*l)]).collect();
        out.csv("high_frequency.csv", &["t", "log_norm"], &rows)?;
    }
    Ok(None)
}

pub fn run_evolve(cfg: &RunConfig, out: &mut RunOutput) -> Outcome {
    let wave = build_wave(cfg, out)?;
    let prop = propagator(cfg, &wave, out)?;
    let e = &cfg.evolve;
    let mut scaled = cfg.clone();
    scaled.data.amplitude = e.amplitude;
    let v0 = initial_data(&scaled, &prop.grid, wave.coef.components);
    let t = &cfg.tolerances;
    let opts = EvolveOptions {
        rtol: t.evolve_rtol,
        atol: t.evolve_atol,
        initial_step: e.initial_step,
        max_step: e.max_step,
        smallness: t.smallness,
        ..Default::default()
    };
    let times = e.times.values();
    let traj = out.stage("evolve", || evolve(&prop, &wave.coef, &v0, &times, &opts, e.snapshots))?;
    let energy = out.stage("fit_energy", || fit_energy(&traj.history, &e.energy))?;
    let lin = match e.linearization_amplitude {
        Some(a) => {
            let unit = initial_data(cfg, &prop.grid, wave.coef.components);
            Some(out.stage("linearization_check", || linearization_check(&prop, &wave.coef, &unit, &times, a, &opts))?)
        }
        None => None,
    };
    out.json(
        "evolve.json",
        &json!({
            "accepted": traj.accepted,
            "rejected": traj.rejected,
            "eta_max": traj.eta.iter().copied().fold(0.0, f64::max),
            "energy": energy,
            "linearization": lin,
        }),
    )?;
    let rows: Vec<Vec<Cell>> = (0..traj.times.len())
        .map(|i| vec![Cell::F(traj.times[i]), Cell::F(traj.l2[i]), Cell::F(traj.h1[i]), Cell::F(traj.eta[i])])
        .collect();
    out.csv("evolve.csv", &["t", "l2", "h1", "eta"], &rows)?;
    for (k, (f, t)) in traj.snapshots.iter().zip(&traj.times).enumerate() {
        out.bytes(&format!("snapshots/evolve_{k:04}.bin"), &f.snapshot_bytes(*t))?;
    }
    Ok(Some(energy.holds))
}

pub fn asymptotics(cfg: &RunConfig, out: &mut RunOutput) -> Outcome {
    let wave = build_wave(cfg, out)?;
    let a = &cfg.asymptotics;
    let eps = cfg.tolerances.eps;
    let quad = LowFrequencyQuadrature::new(wave.dim(), eps, a.directions, a.panels, a.order)?;
    let radii = a.track_radii.values();
    let surfaces = out.stage("track_surfaces", || track_surfaces(&wave.coef, &quad.directions.directions, &radii, &track_options(cfg)))?;
    let bundle = build_wave_kernels(&surfaces, eps)?;
    let band_times = a.band_times.values();
    let band = out.stage("kernel_band", || kernel_band(&bundle, &quad, &band_times))?;
    let times = a.times.values();
    let residual = out.stage("asymptotic_residual", || asymptotic_residual(&wave.coef, &bundle, &quad, &a.data, &times, a.shift))?;
    out.json(
        "asymptotics.json",
        &json!({
            "duality_error": bundle.duality_error,
            "band": { "lower": band.lower, "upper": band.upper, "ratio": band.ratio },
            "mass": residual.mass,
            "zero_mass": residual.zero_mass,
            "residual_fit": fit_json(&residual.fit),
        }),
    )?;
    let rows: Vec<Vec<Cell>> = residual
        .times
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let rel = residual.relative.get(i).copied().unwrap_or(f64::NAN);
            vec![Cell::F(*t), Cell::F(residual.absolute[i]), Cell::F(residual.reference[i]), Cell::F(rel)]
        })
        .collect();
    out.csv("asymptotics.csv", &["t", "absolute", "reference", "relative"], &rows)?;
    let rows: Vec<Vec<Cell>> =
        band.times.iter().enumerate().map(|(i, t)| vec![Cell::F(*t), Cell::F(band.norms[i]), Cell::F(band.scaled[i])]).collect();
    out.csv("kernel_band.csv", &["t", "norm", "scaled"], &rows)?;
    Ok(None)
}

pub fn verify_all(cfg: &RunConfig, out: &mut RunOutput) -> Outcome {
    let ids: Vec<usize> = if cfg.verify.only.is_empty() { CRITERIA.iter().map(|c| c.0).collect() } else { cfg.verify.only.clone() };
    let mut outcomes = Vec::new();
    for id in ids {
        let o = out.stage(&format!("criterion_{id}"), || run_criterion(id)).map_err(|e| match e {
            perstab::Error::InvalidInput(m) => CliError::config(m, "verify.only"),
            other => CliError::Compute(other),
        })?;
        println!("{}", o.summary());
        outcomes.push(o);
    }
    let pass = outcomes.iter().all(|o| o.pass);
    out.json("verify.json", &json!({ "pass": pass, "criteria": outcomes }))?;
    let mut rows = Vec::new();
    for o in &outcomes {
        for m in &o.measurements {
            rows.push(vec![
                Cell::from(o.id),
                Cell::from(o.pass),
                Cell::F(o.seconds),
                Cell::S(m.name.clone()),
                Cell::F(m.value),
                Cell::S(m.expected.clone()),
                Cell::from(m.pass),
            ]);
        }
    }
    out.csv("verify.csv", &["criterion", "pass", "seconds", "measurement", "value", "expected", "measurement_pass"], &rows)?;
    Ok(Some(pass))
}
