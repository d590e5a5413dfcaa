//! Decay-rate measurements for the linear solution operator.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::propagator::{Propagator, Split};
use super::transform::{bloch_forward, bloch_inverse, BlochField, Field};

/// Least-squares line `y = slope x + intercept`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    /// Standard error of the slope.
    pub stderr: f64,
    pub points: usize,
}

impl LineFit {
    /// Half-width of the 95% confidence interval of the slope.
    pub fn half_width(&self) -> f64 {
        1.96 * self.stderr
    }
}

pub fn fit_line(x: &[f64], y: &[f64]) -> Result<LineFit> {
    let pts: Vec<(f64, f64)> = x.iter().zip(y).filter(|(a, b)| a.is_finite() && b.is_finite()).map(|(a, b)| (*a, *b)).collect();
    let n = pts.len();
    if n < 2 {
        return Err(Error::InvalidInput("a line fit needs at least two finite points".into()));
    }
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n as f64;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n as f64;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::InvalidInput("fit abscissae are all equal".into()));
    }
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let stderr = if n > 2 {
        let rss: f64 = pts.iter().map(|p| (p.1 - intercept - slope * p.0).powi(2)).sum();
        (rss / (n - 2) as f64 / sxx).sqrt()
    } else {
        0.0
    };
    Ok(LineFit { slope, intercept, stderr, points: n })
}

/// Fits `norm ~ C (1 + t)^exponent`; the slope of the returned fit is the exponent.
pub fn fit_power(times: &[f64], norms: &[f64]) -> Result<LineFit> {
    let x: Vec<f64> = times.iter().map(|t| (1.0 + t).ln()).collect();
    let y: Vec<f64> = norms.iter().map(|v| v.ln()).collect();
    fit_line(&x, &y)
}

/// Fits `ln norm ~ c - rate t`; returns the fit with `slope = -rate`.
pub fn fit_exponential(times: &[f64], log_norms: &[f64]) -> Result<LineFit> {
    fit_line(times, log_norms)
}

/// Printable name of an `L^p` exponent.
pub fn norm_label(p: f64) -> String {
    if p.is_infinite() {
        "inf".into()
    } else {
        format!("{p}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecayOptions {
    /// Only output times inside `[start, end]` enter the fits.
    pub window: (f64, f64),
    /// Share of `|u|^2` in the quarter of the torus opposite the initial
    /// centre above which the solution is taken to have wrapped around.
    pub wrap_fraction: f64,
    /// Also follow `S(t) d_x u0`.
    pub derivative: bool,
}

impl Default for DecayOptions {
    fn default() -> Self {
        Self { window: (10.0, f64::INFINITY), wrap_fraction: 1e-6, derivative: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormSeries {
    /// `f64::INFINITY` is serialised as `null`; see `label`.
    pub p: f64,
    pub label: String,
    pub norms: Vec<f64>,
    pub fit: Option<LineFit>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayReport {
    pub times: Vec<f64>,
    pub series: Vec<NormSeries>,
    pub derivative: Vec<NormSeries>,
    /// Per `p`, exponent of the derivative series minus the plain exponent.
    pub derivative_gain: Vec<Option<f64>>,
    /// First output time at which wrap-around was detected.
    pub wrap_time: Option<f64>,
    /// Times actually used in the fits.
    pub window: (f64, f64),
    pub notices: Vec<String>,
}

/// Centre of `|u|^2` along the axial direction, as an angle on the torus.
fn axial_centre(field: &Field) -> f64 {
    let len = field.grid.lengths()[0];
    let (mut s, mut c) = (0.0, 0.0);
    for point in 0..field.grid.points() {
        let w: f64 = field.at(point).iter().map(|v| v * v).sum();
        let th = 2.0 * PI * field.grid.coordinates(point)[0] / len;
        s += w * th.sin();
        c += w * th.cos();
    }
    s.atan2(c)
}

/// Share of `|u|^2` farther than `3/8` of the torus length from `centre`.
pub fn antipodal_fraction(field: &Field, centre: f64) -> f64 {
    let len = field.grid.lengths()[0];
    let (mut far, mut total) = (0.0, 0.0);
    for point in 0..field.grid.points() {
        let w: f64 = field.at(point).iter().map(|v| v * v).sum();
        let th = 2.0 * PI * field.grid.coordinates(point)[0] / len;
        let dist = (th - centre + PI).rem_euclid(2.0 * PI) - PI;
        total += w;
        if dist.abs() > 0.75 * PI {
            far += w;
        }
    }
    if total == 0.0 {
        0.0
    } else {
        far / total
    }
}

fn fit_series(times: &[f64], norms: &[f64], keep: &[bool]) -> Option<LineFit> {
    let (t, v): (Vec<f64>, Vec<f64>) =
        times.iter().zip(norms).zip(keep).filter(|(_, k)| **k).map(|((t, v), _)| (*t, *v)).unzip();
    fit_power(&t, &v).ok()
}

/// `L^p` norms of `S(t) u0` (and optionally `S(t) d_x u0`) with log-log fits
/// over the window, truncated at the first sign of wrap-around.
pub fn measure_decay(
    prop: &Propagator,
    u0: &Field,
    times: &[f64],
    ps: &[f64],
    opts: &DecayOptions,
) -> Result<DecayReport> {
    if times.is_empty() || times.windows(2).any(|w| w[1] <= w[0]) || times[0] < 0.0 {
        return Err(Error::InvalidInput("output times must be increasing and non-negative".into()));
    }
    if ps.iter().any(|p| *p < 1.0) {
        return Err(Error::InvalidInput("norm exponents must be at least one".into()));
    }
    let hat = bloch_forward(u0);
    let dhat = hat.derivative_axial();
    let centre = axial_centre(u0);
    let mut plain = vec![Vec::with_capacity(times.len()); ps.len()];
    let mut deriv = vec![Vec::with_capacity(times.len()); ps.len()];
    let mut wrap_time = None;
    for &t in times {
        let u = bloch_inverse(&prop.apply(&hat, t, Split::Full)?);
        if wrap_time.is_none() && antipodal_fraction(&u, centre) > opts.wrap_fraction {
            wrap_time = Some(t);
        }
        for (k, &p) in ps.iter().enumerate() {
            plain[k].push(u.norm_lp(p));
        }
        if opts.derivative {
            let du = bloch_inverse(&prop.apply(&dhat, t, Split::Full)?);
            for (k, &p) in ps.iter().enumerate() {
                deriv[k].push(du.norm_lp(p));
            }
        }
    }
    let keep: Vec<bool> = times
        .iter()
        .map(|&t| t >= opts.window.0 && t <= opts.window.1 && wrap_time.map_or(true, |w| t < w))
        .collect();
    let mut notices = Vec::new();
    if let Some(w) = wrap_time {
        notices.push(format!("wrap-around detected at t = {w}; fit window truncated"));
    }
    let make = |norms: Vec<Vec<f64>>| -> Vec<NormSeries> {
        ps.iter()
            .zip(norms)
            .map(|(&p, n)| NormSeries { p, label: norm_label(p), fit: fit_series(times, &n, &keep), norms: n })
            .collect()
    };
    let series = make(plain);
    let derivative = if opts.derivative { make(deriv) } else { Vec::new() };
    let derivative_gain = if opts.derivative {
        series
            .iter()
            .zip(&derivative)
            .map(|(a, b)| match (a.fit, b.fit) {
                (Some(a), Some(b)) => Some(b.slope - a.slope),
                _ => None,
            })
            .collect()
    } else {
        Vec::new()
    };
    let used: Vec<f64> = times.iter().zip(&keep).filter(|(_, k)| **k).map(|(t, _)| *t).collect();
    if used.len() < 2 {
        notices.push("fewer than two output times left in the fit window".into());
    }
    let window = (used.first().copied().unwrap_or(f64::NAN), used.last().copied().unwrap_or(f64::NAN));
    Ok(DecayReport { times: times.to_vec(), series, derivative, derivative_gain, wrap_time, window, notices })
}

/// L2 decay of a separable product `u0(x_1) g(x_2) ... g(x_d)` under an
/// operator that splits as the axial operator plus identical transverse
/// operators: the norm factorises into the axial norm times the
/// transverse norm to the power `transverse_dims`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeparableDecay {
    pub times: Vec<f64>,
    pub axial: Vec<f64>,
    pub transverse: Vec<f64>,
    pub norms: Vec<f64>,
    pub fit: LineFit,
}

pub fn separable_decay(
    axial: &Propagator,
    u0: &Field,
    transverse: &Propagator,
    g0: &Field,
    transverse_dims: usize,
    times: &[f64],
    window: (f64, f64),
) -> Result<SeparableDecay> {
    let a_hat = bloch_forward(u0);
    let g_hat = bloch_forward(g0);
    let mut a = Vec::with_capacity(times.len());
    let mut g = Vec::with_capacity(times.len());
    for &t in times {
        a.push(axial.log_norm(&a_hat, t, Split::Full)?.exp());
        g.push(transverse.log_norm(&g_hat, t, Split::Full)?.exp());
    }
    let norms: Vec<f64> = a.iter().zip(&g).map(|(x, y)| x * y.powi(transverse_dims as i32)).collect();
    let (t, v): (Vec<f64>, Vec<f64>) =
        times.iter().zip(&norms).filter(|(t, _)| **t >= window.0 && **t <= window.1).map(|(t, v)| (*t, *v)).unzip();
    let fit = fit_power(&t, &v)?;
    Ok(SeparableDecay { times: times.to_vec(), axial: a, transverse: g, norms, fit })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HighFrequencyDecay {
    pub times: Vec<f64>,
    pub log_norms: Vec<f64>,
    pub rate: f64,
    pub fit: LineFit,
    /// Smallest decay rate of the modes retained by the high-frequency part.
    pub gap: f64,
    pub relative_error: f64,
    /// `max_{t <= 1} |S^II(t) u0| / |u0|` over the output times.
    pub short_time_ratio: f64,
}

/// Exponential rate of `|S^II(t) u0|_{L^2}` over the window, compared with
/// the spectral gap outside the cutoff.
pub fn high_freq_decay(prop: &Propagator, u0: &BlochField, times: &[f64], window: (f64, f64)) -> Result<HighFrequencyDecay> {
    let log_norms: Vec<f64> = times.iter().map(|&t| prop.log_norm(u0, t, Split::High)).collect::<Result<_>>()?;
    let (t, v): (Vec<f64>, Vec<f64>) = times
        .iter()
        .zip(&log_norms)
        .filter(|(t, _)| **t >= window.0 && **t <= window.1)
        .map(|(t, v)| (*t, *v))
        .unzip();
    let fit = fit_exponential(&t, &v)?;
    let rate = -fit.slope;
    let gap = prop.gap_outside_cutoff();
    let base = u0.norm().ln();
    let short_time_ratio = times
        .iter()
        .zip(&log_norms)
        .filter(|(t, _)| **t <= 1.0)
        .map(|(_, l)| (l - base).exp())
        .fold(0.0, f64::max);
    Ok(HighFrequencyDecay {
        times: times.to_vec(),
        log_norms,
        rate,
        fit,
        gap,
        relative_error: (rate - gap).abs() / gap,
        short_time_ratio,
    })
}

/// `n` points from `lo` to `hi` evenly spaced in `ln(1 + t)`.
pub fn log_times(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let (a, b) = ((1.0 + lo).ln(), (1.0 + hi).ln());
    (0..n).map(|k| (a + (b - a) * k as f64 / (n.max(2) - 1) as f64).exp() - 1.0).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::WaveCoefficients;
    use crate::semigroup::propagator::{Cutoff, PropagatorOptions};
    use crate::semigroup::transform::TorusGrid;
    use crate::ModelSpec;

    fn heat(diffusion: f64, cells: usize, eps: f64) -> Propagator {
        let model = ModelSpec::heat(1, 1, diffusion).unwrap();
        let wave = WaveCoefficients::constant(&model, &[0.0], 1.0, 4).unwrap();
        let grid = TorusGrid::axial(1.0, cells, 4).unwrap();
        Propagator::new(&wave, &grid, &PropagatorOptions { cutoff: Cutoff { eps }, ..Default::default() }).unwrap()
    }

    fn gaussian(grid: &TorusGrid, centre: f64, width: f64) -> Field {
        Field::from_fn(grid, 1, |x, o| o[0] = (-(x[0] - centre).powi(2) / (2.0 * width * width)).exp())
    }

    #[test]
    fn line_fit_recovers_exact_line() {
        let x: Vec<f64> = (0..7).map(|k| k as f64 * 0.3).collect();
        let y: Vec<f64> = x.iter().map(|v| -0.7 * v + 2.0).collect();
        let f = fit_line(&x, &y).unwrap();
        assert!((f.slope + 0.7).abs() < 1e-14 && (f.intercept - 2.0).abs() < 1e-14 && f.stderr < 1e-12);
        let t = log_times(1.0, 99.0, 5);
        let p: Vec<f64> = t.iter().map(|t| 3.0 * (1.0 + t).powf(-0.25)).collect();
        assert!((fit_power(&t, &p).unwrap().slope + 0.25).abs() < 1e-13);
        assert!(fit_line(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn heat_exponents_and_derivative_gain() {
        let p = heat(1.0, 2048, 0.3);
        let u0 = gaussian(&p.grid, 1024.0, 2.0);
        let times = log_times(1.0, 2000.0, 20);
        let r = measure_decay(&p, &u0, &times, &[1.0, 2.0, f64::INFINITY], &DecayOptions {
            window: (200.0, 2000.0),
            ..Default::default()
        })
        .unwrap();
        assert!(r.wrap_time.is_none());
        let expected = [0.0, -0.25, -0.5];
        for (s, e) in r.series.iter().zip(expected) {
            let slope = s.fit.unwrap().slope;
            assert!((slope - e).abs() < 0.02, "p = {}: {slope}", s.label);
        }
        for g in &r.derivative_gain {
            assert!((g.unwrap() + 0.5).abs() < 0.02);
        }
    }

    #[test]
    fn wrap_around_truncates_the_window() {
        let p = heat(1.0, 64, 0.3);
        let u0 = gaussian(&p.grid, 32.0, 1.0);
        let times = log_times(1.0, 2000.0, 16);
        let r = measure_decay(&p, &u0, &times, &[2.0], &DecayOptions { derivative: false, ..Default::default() }).unwrap();
        let w = r.wrap_time.expect("spreading over the whole torus must be detected");
        assert!(w < 200.0);
        assert!(r.window.1 < w);
        assert!(!r.notices.is_empty());
    }

    #[test]
    fn heat_high_frequency_rate_is_at_least_eps_squared() {
        let eps = 0.5;
        let p = heat(1.0, 512, eps);
        let u0 = gaussian(&p.grid, 256.0, 1.0);
        let times = log_times(0.0, 800.0, 30);
        let h = high_freq_decay(&p, &bloch_forward(&u0), &times, (400.0, 800.0)).unwrap();
        assert!(h.rate >= eps * eps - h.fit.half_width(), "{}", h.rate);
        assert!(h.relative_error < 0.2);
        assert!(h.short_time_ratio <= 1.0 + 1e-12);
    }

    #[test]
    fn separable_transverse_factor_matches_gaussian_spreading() {
        let diffusion = 0.7;
        let axial = heat(1.0, 1024, 0.3);
        let transverse = heat(diffusion, 1024, 0.3);
        let w = 2.0;
        let u0 = gaussian(&axial.grid, 512.0, w);
        let g0 = gaussian(&transverse.grid, 512.0, w);
        let times = log_times(1.0, 1000.0, 12);
        let s = separable_decay(&axial, &u0, &transverse, &g0, 2, &times, (100.0, 1000.0)).unwrap();
        for (t, g) in times.iter().zip(&s.transverse) {
            let exact = (PI.sqrt() * w).sqrt() * (w * w / (w * w + 2.0 * diffusion * t)).powf(0.25);
            assert!((g - exact).abs() < 1e-10 * exact);
        }
        assert!((s.fit.slope + 0.75).abs() < 0.02);
    }
}
