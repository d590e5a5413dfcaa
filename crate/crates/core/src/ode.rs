//! Adaptive Dormand–Prince 5(4) integration for real or complex systems.

use std::ops::{Add, Mul, Sub};

use num_complex::Complex64;

use crate::error::{Error, Result};

pub trait OdeScalar: Copy + Add<Output = Self> + Sub<Output = Self> + Mul<f64, Output = Self> {
    fn zero() -> Self;
    fn magnitude(self) -> f64;
}

impl OdeScalar for f64 {
    fn zero() -> Self {
        0.0
    }
    fn magnitude(self) -> f64 {
        self.abs()
    }
}

impl OdeScalar for Complex64 {
    fn zero() -> Self {
        Complex64::new(0.0, 0.0)
    }
    fn magnitude(self) -> f64 {
        self.norm()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Tolerances {
    pub rtol: f64,
    pub atol: f64,
    pub max_steps: usize,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self { rtol: 1e-10, atol: 1e-12, max_steps: 200_000 }
    }
}

const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const B5: [f64; 7] = [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0];
const B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

/// Integrates `y' = f(t, y)` from `t0` to the last entry of `stops`, landing
/// exactly on every stop and handing the state there to `observe`.
///
/// `stops` must be increasing and greater than `t0`. The right-hand side may
/// fail (for instance when the state leaves a model domain); the error is
/// propagated unchanged.
pub fn integrate<S, F, O>(
    f: F,
    t0: f64,
    y0: &[S],
    stops: &[f64],
    tol: &Tolerances,
    mut observe: O,
) -> Result<Vec<S>>
where
    S: OdeScalar,
    F: FnMut(f64, &[S], &mut [S]) -> Result<()>,
    O: FnMut(usize, f64, &[S]),
{
    integrate_until(f, t0, y0, stops, tol, |i, t, y| {
        observe(i, t, y);
        true
    })
    .map(|(y, _)| y)
}

/// Like [`integrate`], but stops early as soon as `observe` returns `false`;
/// returns the state and the time reached.
pub fn integrate_until<S, F, O>(
    mut f: F,
    t0: f64,
    y0: &[S],
    stops: &[f64],
    tol: &Tolerances,
    mut observe: O,
) -> Result<(Vec<S>, f64)>
where
    S: OdeScalar,
    F: FnMut(f64, &[S], &mut [S]) -> Result<()>,
    O: FnMut(usize, f64, &[S]) -> bool,
{
    let dim = y0.len();
    let mut y = y0.to_vec();
    let mut t = t0;
    let Some(&t_end) = stops.last() else {
        return Ok((y, t));
    };
    let span = (t_end - t0).abs().max(f64::MIN_POSITIVE);
    let mut k: Vec<Vec<S>> = vec![vec![S::zero(); dim]; 7];
    let mut stage = vec![S::zero(); dim];
    let mut y5 = vec![S::zero(); dim];
    f(t, &y, &mut k[0])?;

    let mut h = initial_step(&y, &k[0], tol, span);
    let mut next_stop = 0;
    let mut steps = 0usize;
    while next_stop < stops.len() {
        let target = stops[next_stop];
        if target <= t {
            let go = observe(next_stop, t, &y);
            next_stop += 1;
            if !go {
                return Ok((y, t));
            }
            continue;
        }
        steps += 1;
        if steps > tol.max_steps {
            return Err(Error::TooManySteps { steps: tol.max_steps });
        }
        let mut lands = false;
        let mut step = h;
        if t + step >= target - 1e-14 * span {
            step = target - t;
            lands = true;
        }
        if step < 1e-14 * span.max(t.abs()) {
            return Err(Error::StepUnderflow { t });
        }
        for s in 1..7 {
            for i in 0..dim {
                let mut acc = y[i];
                for (r, a) in A[s].iter().enumerate().take(s) {
                    if *a != 0.0 {
                        acc = acc + k[r][i] * (step * a);
                    }
                }
                stage[i] = acc;
            }
            f(t + C[s] * step, &stage, &mut k[s])?;
        }
        let mut err = 0.0;
        for i in 0..dim {
            let mut hi = y[i];
            let mut diff = S::zero();
            for s in 0..7 {
                if B5[s] != 0.0 {
                    hi = hi + k[s][i] * (step * B5[s]);
                }
                let w = B5[s] - B4[s];
                if w != 0.0 {
                    diff = diff + k[s][i] * (step * w);
                }
            }
            y5[i] = hi;
            let scale = tol.atol + tol.rtol * y[i].magnitude().max(hi.magnitude());
            let e = diff.magnitude() / scale;
            err += e * e;
        }
        let err = (err / dim.max(1) as f64).sqrt();
        if !err.is_finite() {
            h = step * 0.2;
            continue;
        }
        if err <= 1.0 {
            t = if lands { target } else { t + step };
            std::mem::swap(&mut y, &mut y5);
            let last = k.pop().expect("seven stages");
            k.insert(0, last);
            let grow = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
            if !lands || grow < 1.0 {
                h = step * grow;
            } else {
                h = h.max(step * grow);
            }
            while next_stop < stops.len() && stops[next_stop] <= t {
                let go = observe(next_stop, t, &y);
                next_stop += 1;
                if !go {
                    return Ok((y, t));
                }
            }
        } else {
            h = step * (0.9 * err.powf(-0.2)).clamp(0.1, 0.9);
        }
    }
    Ok((y, t))
}

fn initial_step<S: OdeScalar>(y: &[S], dy: &[S], tol: &Tolerances, span: f64) -> f64 {
    let mut d0 = 0.0;
    let mut d1 = 0.0;
    for (yi, di) in y.iter().zip(dy) {
        let sc = tol.atol + tol.rtol * yi.magnitude();
        d0 += (yi.magnitude() / sc).powi(2);
        d1 += (di.magnitude() / sc).powi(2);
    }
    let n = y.len().max(1) as f64;
    let (d0, d1) = ((d0 / n).sqrt(), (d1 / n).sqrt());
    let h = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    h.min(span)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn harmonic_oscillator_returns_after_one_period() {
        let tol = Tolerances { rtol: 1e-12, atol: 1e-14, max_steps: 100_000 };
        let period = 2.0 * std::f64::consts::PI;
        let y = integrate(
            |_, y: &[f64], dy: &mut [f64]| {
                dy[0] = y[1];
                dy[1] = -y[0];
                Ok(())
            },
            0.0,
            &[1.0, 0.0],
            &[period],
            &tol,
            |_, _, _| {},
        )
        .unwrap();
        assert!((y[0] - 1.0).abs() < 1e-10 && y[1].abs() < 1e-10);
    }

    #[test]
    fn complex_exponential_and_stops() {
        let tol = Tolerances { rtol: 1e-12, atol: 1e-14, max_steps: 100_000 };
        let lam = Complex64::new(-0.3, 2.0);
        let stops: Vec<f64> = (1..=10).map(|i| 0.25 * i as f64).collect();
        let mut seen = Vec::new();
        integrate(
            |_, y: &[Complex64], dy: &mut [Complex64]| {
                dy[0] = lam * y[0];
                Ok(())
            },
            0.0,
            &[Complex64::new(1.0, 0.0)],
            &stops,
            &tol,
            |i, t, y| seen.push((i, t, y[0])),
        )
        .unwrap();
        assert_eq!(seen.len(), 10);
        for (i, t, y) in seen {
            assert_eq!(t, stops[i]);
            assert!((y - (lam * t).exp()).norm() < 1e-10);
        }
    }

    #[test]
    fn rhs_failure_propagates() {
        let out = integrate(
            |t, _: &[f64], dy: &mut [f64]| {
                if t > 0.5 {
                    return Err(Error::Domain { state: vec![t] });
                }
                dy[0] = 1.0;
                Ok(())
            },
            0.0,
            &[0.0],
            &[1.0],
            &Tolerances::default(),
            |_, _, _| {},
        );
        assert!(matches!(out, Err(Error::Domain { .. })));
    }
}
