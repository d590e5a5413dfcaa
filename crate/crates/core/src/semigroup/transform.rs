//! Fields on a torus commensurate with the wave cell and their Bloch–Fourier
//! transform.
//!
//! The torus is `[0, N X)` along the wave direction, sampled with `m` points
//! per cell, times `[0, L_j)` with `p_j` points in each transverse direction.
//! Writing `U(zeta) = int e^{-i zeta x} u(x) dx` for the Fourier transform,
//! the Bloch transform is
//! `u_hat(xi, x_1) = sum_k e^{2 pi i k x_1 / X} U(xi + 2 pi k e_1 / X)` for
//! `xi` in the Brillouin zone, with inverse
//! `u(x) = (2 pi)^{-d} int e^{i xi x} u_hat(xi, x_1) dxi` and isometry
//! `|u|^2 = (2 pi)^{-d} X^{-1} int int |u_hat|^2 dx_1 dxi`.
//! On the torus the zone integral is a sum over `N prod p_j` nodes, and each
//! `u_hat(xi, .)` is stored by its `m` cell Fourier coefficients in the layout
//! of [`crate::bloch::BlochOperator`].

use std::f64::consts::PI;

use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{c, CVec};
use crate::spectral::mode_index;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransverseAxis {
    pub points: usize,
    pub length: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TorusGrid {
    pub period: f64,
    pub cells: usize,
    pub samples: usize,
    pub transverse: Vec<TransverseAxis>,
}

impl TorusGrid {
    pub fn new(period: f64, cells: usize, samples: usize, transverse: Vec<TransverseAxis>) -> Result<Self> {
        if period <= 0.0 || cells == 0 || samples == 0 {
            return Err(Error::InvalidInput("torus needs a positive period, cell count and sample count".into()));
        }
        if transverse.iter().any(|t| t.points == 0 || t.length <= 0.0) {
            return Err(Error::InvalidInput("transverse axes need points and a positive length".into()));
        }
        Ok(Self { period, cells, samples, transverse })
    }

    /// Grid of `cells` wave periods in one dimension.
    pub fn axial(period: f64, cells: usize, samples: usize) -> Result<Self> {
        Self::new(period, cells, samples, Vec::new())
    }

    pub fn dim(&self) -> usize {
        1 + self.transverse.len()
    }

    pub fn shape(&self) -> Vec<usize> {
        let mut s = vec![self.cells * self.samples];
        s.extend(self.transverse.iter().map(|t| t.points));
        s
    }

    pub fn lengths(&self) -> Vec<f64> {
        let mut l = vec![self.cells as f64 * self.period];
        l.extend(self.transverse.iter().map(|t| t.length));
        l
    }

    pub fn points(&self) -> usize {
        self.shape().iter().product()
    }

    pub fn volume(&self) -> f64 {
        self.lengths().iter().product()
    }

    /// Volume of one grid cell.
    pub fn point_volume(&self) -> f64 {
        self.volume() / self.points() as f64
    }

    pub fn spacing(&self) -> Vec<f64> {
        self.lengths().iter().zip(self.shape()).map(|(l, p)| l / p as f64).collect()
    }

    fn transverse_modes(&self) -> usize {
        self.transverse.iter().map(|t| t.points).product()
    }

    pub fn nodes(&self) -> usize {
        self.cells * self.transverse_modes()
    }

    /// Multi-index of point `index` (row-major, first axis slowest).
    pub fn unravel(&self, mut index: usize) -> Vec<usize> {
        let shape = self.shape();
        let mut out = vec![0; shape.len()];
        for (axis, &p) in shape.iter().enumerate().rev() {
            out[axis] = index % p;
            index /= p;
        }
        out
    }

    pub fn coordinates(&self, index: usize) -> Vec<f64> {
        self.unravel(index).iter().zip(self.spacing()).map(|(&i, h)| i as f64 * h).collect()
    }

    /// Wave vector of Bloch node `node`; nodes are ordered axial-major.
    pub fn node_xi(&self, node: usize) -> Vec<f64> {
        let tm = self.transverse_modes();
        let (l, mut t) = (node / tm, node % tm);
        let mut xi = vec![2.0 * PI * mode_index(l, self.cells) as f64 / (self.cells as f64 * self.period)];
        let mut rest = Vec::with_capacity(self.transverse.len());
        for ax in self.transverse.iter().rev() {
            rest.push(2.0 * PI * mode_index(t % ax.points, ax.points) as f64 / ax.length);
            t /= ax.points;
        }
        rest.reverse();
        xi.extend(rest);
        xi
    }

    /// Quadrature weight of every node in the zone integral.
    pub fn node_weight(&self) -> f64 {
        (2.0 * PI).powi(self.dim() as i32) / self.volume()
    }

    /// Flat index in the global spectrum of cell mode `kk` at node `node`.
    fn global_index(&self, node: usize, kk: usize) -> usize {
        let tm = self.transverse_modes();
        let (l, t) = (node / tm, node % tm);
        let m = self.samples as i64;
        let n_cells = self.cells as i64;
        let axial = (mode_index(kk, self.samples) * n_cells + mode_index(l, self.cells)).rem_euclid(m * n_cells);
        axial as usize * tm + t
    }

    /// Physical wavenumber along the wave direction of cell mode `kk` at node `node`.
    pub fn axial_wavenumber(&self, node: usize, kk: usize) -> f64 {
        self.node_xi(node)[0] + 2.0 * PI * mode_index(kk, self.samples) as f64 / self.period
    }
}

/// Real field with `components` values per grid point (point-major).
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    pub grid: TorusGrid,
    pub components: usize,
    pub values: Vec<f64>,
}

impl Field {
    pub fn zeros(grid: &TorusGrid, components: usize) -> Self {
        Self { grid: grid.clone(), components, values: vec![0.0; grid.points() * components] }
    }

    /// Samples `f(x, out)` at every grid point.
    pub fn from_fn(grid: &TorusGrid, components: usize, mut f: impl FnMut(&[f64], &mut [f64])) -> Self {
        let mut field = Self::zeros(grid, components);
        for (i, chunk) in field.values.chunks_mut(components).enumerate() {
            f(&grid.coordinates(i), chunk);
        }
        field
    }

    pub fn at(&self, point: usize) -> &[f64] {
        &self.values[point * self.components..(point + 1) * self.components]
    }

    /// `L^p` norm of the Euclidean pointwise magnitude; `p = inf` gives the maximum.
    pub fn norm_lp(&self, p: f64) -> f64 {
        let mags = self.values.chunks(self.components).map(|v| v.iter().map(|x| x * x).sum::<f64>().sqrt());
        if p.is_infinite() {
            return mags.fold(0.0, f64::max);
        }
        (mags.map(|x| x.powf(p)).sum::<f64>() * self.grid.point_volume()).powf(1.0 / p)
    }

    pub fn norm_l2(&self) -> f64 {
        self.norm_lp(2.0)
    }

    /// Integral of each component over the torus.
    pub fn integral(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.components];
        for v in self.values.chunks(self.components) {
            for (o, x) in out.iter_mut().zip(v) {
                *o += x;
            }
        }
        out.iter().map(|x| x * self.grid.point_volume()).collect()
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self { values: self.values.iter().map(|x| x * s).collect(), ..self.clone() }
    }

    /// Flat binary snapshot: little-endian `u64` dimension count, `u64` grid
    /// points per axis (cells times samples on the axial axis), `u64`
    /// components, `u64` samples per cell, `f64` torus length per axis, `f64`
    /// time, then the values in row-major order with the component index
    /// fastest.
    pub fn snapshot_bytes(&self, t: f64) -> Vec<u8> {
        let shape = self.grid.shape();
        let mut out = Vec::with_capacity(8 * (4 + 2 * shape.len() + self.values.len()));
        out.extend((shape.len() as u64).to_le_bytes());
        for s in &shape {
            out.extend((*s as u64).to_le_bytes());
        }
        out.extend((self.components as u64).to_le_bytes());
        out.extend((self.grid.samples as u64).to_le_bytes());
        for l in self.grid.lengths() {
            out.extend(l.to_le_bytes());
        }
        out.extend(t.to_le_bytes());
        for v in &self.values {
            out.extend(v.to_le_bytes());
        }
        out
    }
}

/// Bloch coefficients `u_hat(xi, .)` at every node of a torus.
#[derive(Debug, Clone, PartialEq)]
pub struct BlochField {
    pub grid: TorusGrid,
    pub components: usize,
    pub xi: Vec<Vec<f64>>,
    pub weight: f64,
    /// Per node, `components * samples` cell Fourier coefficients.
    pub coefficients: Vec<CVec>,
}

impl BlochField {
    pub fn zeros_like(&self) -> Self {
        Self { coefficients: self.coefficients.iter().map(|v| CVec::zeros(v.len())).collect(), ..self.clone() }
    }

    /// `((2 pi)^{-d} X^{-1} int int |u_hat|^2)^{1/2}`.
    pub fn norm(&self) -> f64 {
        let sum: f64 = self.coefficients.iter().map(|v| v.norm_squared()).sum();
        (sum * self.weight / (2.0 * PI).powi(self.grid.dim() as i32)).sqrt()
    }

    /// Derivative along the wave direction.
    pub fn derivative_axial(&self) -> Self {
        let m = self.grid.samples;
        let mut out = self.clone();
        for (node, v) in out.coefficients.iter_mut().enumerate() {
            for (i, z) in v.iter_mut().enumerate() {
                *z *= c(0.0, self.grid.axial_wavenumber(node, i % m));
            }
        }
        out
    }

    pub fn add_scaled(&mut self, other: &Self, s: Complex64) {
        for (a, b) in self.coefficients.iter_mut().zip(&other.coefficients) {
            a.axpy(s, b, c(1.0, 0.0));
        }
    }
}

fn fft_nd(data: &mut [Complex64], shape: &[usize], inverse: bool) {
    let mut planner = FftPlanner::new();
    let total: usize = shape.iter().product();
    let mut stride = total;
    for &len in shape {
        stride /= len;
        if len == 1 {
            continue;
        }
        let fft = if inverse { planner.plan_fft_inverse(len) } else { planner.plan_fft_forward(len) };
        let block = len * stride;
        let mut line = vec![c(0.0, 0.0); len];
        for start in (0..total).step_by(block) {
            for off in 0..stride {
                for (k, z) in line.iter_mut().enumerate() {
                    *z = data[start + off + k * stride];
                }
                fft.process(&mut line);
                for (k, z) in line.iter().enumerate() {
                    data[start + off + k * stride] = *z;
                }
            }
        }
    }
}

pub fn bloch_forward(field: &Field) -> BlochField {
    let values: Vec<Complex64> = field.values.iter().map(|&x| c(x, 0.0)).collect();
    bloch_forward_complex(&field.grid, field.components, &values)
}

/// Forward transform of complex point-major values.
pub fn bloch_forward_complex(grid: &TorusGrid, components: usize, values: &[Complex64]) -> BlochField {
    let shape = grid.shape();
    let points = grid.points();
    let m = grid.samples;
    let scale = grid.volume() / points as f64;
    let spectra: Vec<Vec<Complex64>> = (0..components)
        .map(|a| {
            let mut buf: Vec<Complex64> = (0..points).map(|i| values[i * components + a]).collect();
            fft_nd(&mut buf, &shape, false);
            buf
        })
        .collect();
    let coefficients = (0..grid.nodes())
        .map(|node| {
            let mut v = CVec::zeros(components * m);
            for kk in 0..m {
                let g = grid.global_index(node, kk);
                for a in 0..components {
                    v[a * m + kk] = spectra[a][g] * scale;
                }
            }
            v
        })
        .collect();
    BlochField {
        grid: grid.clone(),
        components,
        xi: (0..grid.nodes()).map(|k| grid.node_xi(k)).collect(),
        weight: grid.node_weight(),
        coefficients,
    }
}

/// Inverse transform; complex point-major values.
pub fn bloch_inverse_complex(field: &BlochField) -> Vec<Complex64> {
    let grid = &field.grid;
    let shape = grid.shape();
    let points = grid.points();
    let m = grid.samples;
    let n = field.components;
    let volume = grid.volume();
    let mut out = vec![c(0.0, 0.0); points * n];
    for a in 0..n {
        let mut buf = vec![c(0.0, 0.0); points];
        for (node, v) in field.coefficients.iter().enumerate() {
            for kk in 0..m {
                buf[grid.global_index(node, kk)] = v[a * m + kk] / volume;
            }
        }
        fft_nd(&mut buf, &shape, true);
        for (i, z) in buf.into_iter().enumerate() {
            out[i * n + a] = z;
        }
    }
    out
}

/// Inverse transform keeping the real part.
pub fn bloch_inverse(field: &BlochField) -> Field {
    let values = bloch_inverse_complex(field).into_iter().map(|z| z.re).collect();
    Field { grid: field.grid.clone(), components: field.components, values }
}

/// Checks that `field` lives on `grid` and has `components` components.
pub fn check_field(field: &Field, grid: &TorusGrid, components: usize) -> Result<()> {
    if field.grid != *grid || field.components != components {
        return Err(Error::InvalidInput(format!(
            "field must have {components} components on a grid of shape {:?} with {} samples per cell",
            grid.shape(),
            grid.samples
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_field(grid: &TorusGrid, n: usize, seed: u64) -> Field {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = (0..grid.points() * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Field { grid: grid.clone(), components: n, values }
    }

    fn grids() -> Vec<TorusGrid> {
        vec![
            TorusGrid::axial(1.0, 1, 8).unwrap(),
            TorusGrid::axial(2.5, 7, 16).unwrap(),
            TorusGrid::axial(1.0, 64, 32).unwrap(),
            TorusGrid::new(1.3, 6, 8, vec![TransverseAxis { points: 5, length: 3.0 }]).unwrap(),
            TorusGrid::new(
                1.0,
                4,
                8,
                vec![TransverseAxis { points: 6, length: 2.0 }, TransverseAxis { points: 3, length: 4.0 }],
            )
            .unwrap(),
        ]
    }

    #[test]
    fn parseval_and_round_trip() {
        for (k, grid) in grids().iter().enumerate() {
            let f = random_field(grid, 2, k as u64);
            let b = bloch_forward(&f);
            assert!((b.norm() - f.norm_l2()).abs() < 1e-10 * f.norm_l2());
            let back = bloch_inverse_complex(&b);
            for (x, y) in f.values.iter().zip(&back) {
                assert!((x - y).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn plane_wave_lives_on_one_node() {
        let grid = TorusGrid::new(1.0, 8, 8, vec![TransverseAxis { points: 4, length: 2.0 }]).unwrap();
        let zeta = [2.0 * PI * 11.0 / 8.0, 2.0 * PI / 2.0];
        let values: Vec<Complex64> = (0..grid.points())
            .map(|i| {
                let x = grid.coordinates(i);
                Complex64::from_polar(1.0, zeta[0] * x[0] + zeta[1] * x[1])
            })
            .collect();
        let b = bloch_forward_complex(&grid, 1, &values);
        let support: Vec<usize> =
            (0..grid.nodes()).filter(|&k| b.coefficients[k].norm() > 1e-9 * grid.volume()).collect();
        assert_eq!(support.len(), 1);
        let xi = &b.xi[support[0]];
        assert!((xi[0] - 2.0 * PI * 3.0 / 8.0).abs() < 1e-12);
        assert!((xi[1] - zeta[1]).abs() < 1e-12);
    }

    #[test]
    fn axial_derivative_matches_analytic() {
        let grid = TorusGrid::axial(1.0, 4, 16).unwrap();
        let l = grid.volume();
        let f = Field::from_fn(&grid, 1, |x, out| out[0] = (2.0 * PI * 3.0 * x[0] / l).sin());
        let d = bloch_inverse(&bloch_forward(&f).derivative_axial());
        for i in 0..grid.points() {
            let x = grid.coordinates(i)[0];
            let want = 2.0 * PI * 3.0 / l * (2.0 * PI * 3.0 * x / l).cos();
            assert!((d.values[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn snapshot_header_layout() {
        let grid = TorusGrid::axial(1.0, 2, 4).unwrap();
        let f = Field::from_fn(&grid, 2, |x, out| {
            out[0] = x[0];
            out[1] = -x[0];
        });
        let bytes = f.snapshot_bytes(1.5);
        let word = |k: usize| u64::from_le_bytes(bytes[8 * k..8 * k + 8].try_into().unwrap());
        assert_eq!((word(0), word(1), word(2), word(3)), (1, 8, 2, 4));
        assert_eq!(f64::from_bits(word(4)), 2.0);
        assert_eq!(f64::from_bits(word(5)), 1.5);
        assert_eq!(bytes.len(), 8 * (6 + 16));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn isometry_on_random_grids(cells in 1usize..12, log_m in 2u32..6, seed in 0u64..1000, period in 0.5f64..3.0) {
            let grid = TorusGrid::axial(period, cells, 1 << log_m).unwrap();
            let f = random_field(&grid, 3, seed);
            let b = bloch_forward(&f);
            prop_assert!((b.norm() - f.norm_l2()).abs() < 1e-10 * f.norm_l2());
            let back = bloch_inverse(&b);
            for (x, y) in f.values.iter().zip(&back.values) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
