//! `S(t) = e^{Lt}` on a torus through per-node eigendecompositions of the
//! Bloch operators, with the low/high-frequency splitting
//! `S^I = phi(xi) P(xi) e^{L_xi t}` and `S^II = S - S^I`.

use std::f64::consts::PI;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bloch::{zero_cluster, BlochAssembler};
use crate::coefficients::WaveCoefficients;
use crate::error::{Error, Result};
use crate::linalg::{c, condition, eigen, CMat, CVec};

use super::transform::{BlochField, TorusGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Full,
    Low,
    High,
}

/// Smooth radial cutoff: one for `|xi| <= eps`, zero for `|xi| >= 2 eps`,
/// `C^infinity` in between.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cutoff {
    pub eps: f64,
}

fn flat_step(s: f64) -> f64 {
    if s <= 0.0 {
        0.0
    } else {
        (-1.0 / s).exp()
    }
}

impl Cutoff {
    pub fn value(&self, r: f64) -> f64 {
        let s = (r - self.eps) / self.eps;
        if s <= 0.0 {
            return 1.0;
        }
        if s >= 1.0 {
            return 0.0;
        }
        let (a, b) = (flat_step(1.0 - s), flat_step(s));
        a / (a + b)
    }

    /// `1 - value(r)` without cancellation.
    pub fn complement(&self, r: f64) -> f64 {
        let s = (r - self.eps) / self.eps;
        if s <= 0.0 {
            return 0.0;
        }
        if s >= 1.0 {
            return 1.0;
        }
        let (a, b) = (flat_step(1.0 - s), flat_step(s));
        b / (a + b)
    }

    pub fn support(&self) -> f64 {
        2.0 * self.eps
    }
}

impl Default for Cutoff {
    fn default() -> Self {
        Self { eps: 0.3 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PropagatorOptions {
    pub cutoff: Cutoff,
    /// Number of critical branches; defaults to the wave's cluster size.
    pub critical: Option<usize>,
    /// Eigenvector condition numbers above this use the matrix-exponential fallback.
    pub condition_limit: f64,
}

impl Default for PropagatorOptions {
    fn default() -> Self {
        Self { cutoff: Cutoff::default(), critical: None, condition_limit: 1e8 }
    }
}

#[derive(Debug, Clone)]
struct Fallback {
    matrix: CMat,
    projector: CMat,
}

#[derive(Debug, Clone)]
struct Node {
    radius: f64,
    values: Vec<Complex64>,
    vectors: CMat,
    inverse: CMat,
    critical: Vec<bool>,
    fallback: Option<Fallback>,
}

/// Solution operator of the linearisation about a wave on a torus.
#[derive(Debug, Clone)]
pub struct Propagator {
    pub grid: TorusGrid,
    pub components: usize,
    pub cutoff: Cutoff,
    pub critical: usize,
    /// Nodes whose eigenbasis was too ill-conditioned.
    pub flagged: Vec<usize>,
    nodes: Vec<Node>,
}

/// Riesz projector onto the eigenvalues inside the circle `(center, radius)`.
pub fn riesz_projector(matrix: &CMat, center: Complex64, radius: f64, nodes: usize) -> Result<CMat> {
    let size = matrix.nrows();
    let mut p = CMat::zeros(size, size);
    for k in 0..nodes {
        let w = Complex64::from_polar(1.0, 2.0 * PI * (k as f64 + 0.5) / nodes as f64);
        let z = center + w * radius;
        let shifted = CMat::identity(size, size) * z - matrix;
        let r = shifted
            .lu()
            .try_inverse()
            .ok_or_else(|| Error::Linalg("resolvent is singular on the projector contour".into()))?;
        p += r * (w * radius / nodes as f64);
    }
    Ok(p)
}

fn critical_flags(values: &[Complex64], count: usize) -> Vec<bool> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[j].re.total_cmp(&values[i].re));
    let mut flags = vec![false; values.len()];
    for &i in order.iter().take(count) {
        flags[i] = true;
    }
    flags
}

fn build_node(matrix: CMat, radius: f64, count: usize, needs_projector: bool, limit: f64) -> Result<Node> {
    let e = eigen(&matrix)?;
    let critical = critical_flags(&e.values, count);
    let cond = condition(&e.vectors);
    let inverse = if cond <= limit { e.vectors.clone().try_inverse() } else { None };
    match inverse {
        Some(inverse) => Ok(Node { radius, values: e.values, vectors: e.vectors, inverse, critical, fallback: None }),
        None => {
            let crit: Vec<Complex64> = e.values.iter().zip(&critical).filter(|(_, f)| **f).map(|(v, _)| *v).collect();
            let projector = if needs_projector {
                let center = crit.iter().sum::<Complex64>() / crit.len() as f64;
                let inner = crit.iter().map(|z| (z - center).norm()).fold(0.0, f64::max);
                let outer = e
                    .values
                    .iter()
                    .zip(&critical)
                    .filter(|(_, f)| !**f)
                    .map(|(z, _)| (z - center).norm())
                    .fold(f64::INFINITY, f64::min);
                if outer <= inner {
                    return Err(Error::Structural("critical eigenvalues are not separated from the rest".into()));
                }
                riesz_projector(&matrix, center, 0.5 * (inner + outer), 64)?
            } else {
                CMat::zeros(matrix.nrows(), matrix.ncols())
            };
            Ok(Node {
                radius,
                values: e.values,
                vectors: e.vectors,
                inverse: CMat::zeros(0, 0),
                critical,
                fallback: Some(Fallback { matrix, projector }),
            })
        }
    }
}

impl Propagator {
    pub fn new(wave: &WaveCoefficients, grid: &TorusGrid, opts: &PropagatorOptions) -> Result<Self> {
        if grid.samples != wave.samples() || grid.dim() != wave.dim || (grid.period - wave.period).abs() > 1e-12 * wave.period
        {
            return Err(Error::InvalidInput(format!(
                "torus must have {} samples per cell of period {} in {} dimensions",
                wave.samples(),
                wave.period,
                wave.dim
            )));
        }
        let count = match opts.critical.or(wave.critical) {
            Some(k) => k,
            None => zero_cluster(wave, 1e-4)?.size(),
        };
        let xis: Vec<Vec<f64>> = (0..grid.nodes()).map(|k| grid.node_xi(k)).collect();
        let nodes: Vec<Node> = xis
            .par_iter()
            .map(|xi| {
                let matrix = BlochAssembler::new(wave, &xi[1..])?.assemble(xi[0]).matrix;
                let r = xi.iter().map(|x| x * x).sum::<f64>().sqrt();
                build_node(matrix, r, count, opts.cutoff.value(r) > 0.0, opts.condition_limit)
            })
            .collect::<Result<_>>()?;
        let flagged = nodes.iter().enumerate().filter(|(_, n)| n.fallback.is_some()).map(|(k, _)| k).collect();
        Ok(Self { grid: grid.clone(), components: wave.components, cutoff: opts.cutoff, critical: count, flagged, nodes })
    }

    pub fn node_eigenvalues(&self, node: usize) -> &[Complex64] {
        &self.nodes[node].values
    }

    fn weights(&self, node: &Node, split: Split) -> Vec<f64> {
        let phi = self.cutoff.value(node.radius);
        node.critical
            .iter()
            .map(|&crit| match (split, crit) {
                (Split::Full, _) => 1.0,
                (Split::Low, true) => phi,
                (Split::Low, false) => 0.0,
                (Split::High, true) => self.cutoff.complement(node.radius),
                (Split::High, false) => 1.0,
            })
            .collect()
    }

    fn apply_node(&self, node: &Node, v: &CVec, t: f64, split: Split) -> CVec {
        if let Some(fb) = &node.fallback {
            let full = (&fb.matrix * c(t, 0.0)).exp() * v;
            let phi = self.cutoff.value(node.radius);
            let low = if phi > 0.0 { &fb.projector * &full * c(phi, 0.0) } else { CVec::zeros(v.len()) };
            return match split {
                Split::Full => full,
                Split::Low => low,
                Split::High => full - low,
            };
        }
        let coef = &node.inverse * v;
        let w = self.weights(node, split);
        let y = CVec::from_iterator(
            coef.len(),
            coef.iter().zip(&node.values).zip(&w).map(|((a, l), w)| if *w == 0.0 { c(0.0, 0.0) } else { a * (l * t).exp() * *w }),
        );
        &node.vectors * y
    }

    fn check(&self, u: &BlochField) -> Result<()> {
        if u.grid != self.grid || u.components != self.components {
            return Err(Error::InvalidInput("field does not live on the propagator's torus".into()));
        }
        Ok(())
    }

    pub fn apply(&self, u: &BlochField, t: f64, split: Split) -> Result<BlochField> {
        self.check(u)?;
        if t < 0.0 {
            return Err(Error::InvalidInput("time must be non-negative".into()));
        }
        let coefficients =
            self.nodes.par_iter().zip(&u.coefficients).map(|(node, v)| self.apply_node(node, v, t, split)).collect();
        Ok(BlochField { coefficients, ..u.clone() })
    }

    /// `ln |S_split(t) u|_{L^2}`, evaluated without overflow or underflow.
    pub fn log_norm(&self, u: &BlochField, t: f64, split: Split) -> Result<f64> {
        self.check(u)?;
        let logs: Vec<f64> = self
            .nodes
            .par_iter()
            .zip(&u.coefficients)
            .map(|(node, v)| {
                if node.fallback.is_some() {
                    return self.apply_node(node, v, t, split).norm_squared().ln();
                }
                let coef = &node.inverse * v;
                let w = self.weights(node, split);
                let shift = coef
                    .iter()
                    .zip(&node.values)
                    .zip(&w)
                    .filter(|((a, _), w)| **w > 0.0 && a.norm() > 0.0)
                    .map(|((_, l), _)| l.re * t)
                    .fold(f64::NEG_INFINITY, f64::max);
                if shift == f64::NEG_INFINITY {
                    return f64::NEG_INFINITY;
                }
                let y = CVec::from_iterator(
                    coef.len(),
                    coef.iter().zip(&node.values).zip(&w).map(|((a, l), w)| {
                        if *w == 0.0 {
                            c(0.0, 0.0)
                        } else {
                            a * (l * t - shift).exp() * *w
                        }
                    }),
                );
                (&node.vectors * y).norm_squared().ln() + 2.0 * shift
            })
            .collect();
        let top = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if top == f64::NEG_INFINITY {
            return Ok(f64::NEG_INFINITY);
        }
        let sum: f64 = logs.iter().map(|l| (l - top).exp()).sum();
        let scale = u.weight / (2.0 * PI).powi(self.grid.dim() as i32);
        Ok(0.5 * (top + sum.ln() + scale.ln()))
    }

    /// Smallest decay rate `-Re lambda` over the modes that survive in `S^II`:
    /// every non-critical eigenvalue, and critical ones where the cutoff is below one.
    pub fn gap_outside_cutoff(&self) -> f64 {
        self.nodes
            .iter()
            .flat_map(|node| {
                let phi = self.cutoff.value(node.radius);
                node.values.iter().zip(&node.critical).filter(move |(_, &crit)| !crit || phi < 1.0).map(|(l, _)| -l.re)
            })
            .fold(f64::INFINITY, f64::min)
    }

    /// Largest real part over all nodes, critical zero modes included.
    pub fn max_real(&self) -> f64 {
        self.nodes.iter().flat_map(|n| n.values.iter().map(|l| l.re)).fold(f64::NEG_INFINITY, f64::max)
    }

    /// Per node `(exp(Lh), h phi_1(Lh), h phi_2(Lh))` as diagonal factors in the
    /// eigenbasis, for exponential integrators.
    pub(crate) fn etd_factors(&self, h: f64) -> Result<Vec<[Vec<Complex64>; 3]>> {
        if !self.flagged.is_empty() {
            return Err(Error::NotApplicable("exponential stepping needs diagonalisable nodes".into()));
        }
        Ok(self
            .nodes
            .iter()
            .map(|node| {
                let mut e = Vec::with_capacity(node.values.len());
                let mut p1 = Vec::with_capacity(node.values.len());
                let mut p2 = Vec::with_capacity(node.values.len());
                for l in &node.values {
                    let z = l * h;
                    let (a, b) = phi_functions(z);
                    e.push(z.exp());
                    p1.push(a * h);
                    p2.push(b * h);
                }
                [e, p1, p2]
            })
            .collect())
    }

    pub(crate) fn to_eigen(&self, u: &BlochField) -> Vec<CVec> {
        self.nodes.par_iter().zip(&u.coefficients).map(|(n, v)| &n.inverse * v).collect()
    }

    pub(crate) fn from_eigen(&self, coef: &[CVec], like: &BlochField) -> BlochField {
        let coefficients = self.nodes.par_iter().zip(coef).map(|(n, a)| &n.vectors * a).collect();
        BlochField { coefficients, ..like.clone() }
    }
}

/// `phi_1(z) = (e^z - 1) / z` and `phi_2(z) = (e^z - 1 - z) / z^2`, with
/// series near zero.
pub fn phi_functions(z: Complex64) -> (Complex64, Complex64) {
    if z.norm() < 1e-3 {
        let p1 = c(1.0, 0.0) + z / 2.0 + z * z / 6.0 + z * z * z / 24.0;
        let p2 = c(0.5, 0.0) + z / 6.0 + z * z / 24.0 + z * z * z / 120.0;
        (p1, p2)
    } else {
        let e = z.exp();
        ((e - 1.0) / z, (e - 1.0 - z) / (z * z))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::BurgersPairParams;
    use crate::semigroup::transform::{bloch_forward, bloch_inverse, Field};
    use crate::ModelSpec;

    fn synthetic(m: usize) -> WaveCoefficients {
        let model = ModelSpec::burgers_pair(&BurgersPairParams::default()).unwrap();
        WaveCoefficients::trigonometric(&model, 1.0, m, &[0.4, 0.0], &[0.0, 0.3], 0.0).unwrap()
    }

    fn bump(grid: &TorusGrid, width: f64) -> Field {
        let mid = grid.lengths()[0] / 2.0;
        Field::from_fn(grid, 2, |x, out| {
            let g = (-(x[0] - mid).powi(2) / (2.0 * width * width)).exp();
            out[0] = g;
            out[1] = -0.5 * g * (x[0] - mid);
        })
    }

    #[test]
    fn cutoff_is_smooth_partition() {
        let cut = Cutoff { eps: 0.3 };
        assert_eq!(cut.value(0.2), 1.0);
        assert_eq!(cut.value(0.7), 0.0);
        for k in 0..100 {
            let r = 0.3 + 0.3 * k as f64 / 100.0;
            assert!((cut.value(r) + cut.complement(r) - 1.0).abs() < 1e-15);
        }
        assert!((cut.value(0.45) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn zero_time_is_identity_and_splits_add_up() {
        let wave = synthetic(16);
        let grid = TorusGrid::axial(1.0, 64, 16).unwrap();
        let p = Propagator::new(&wave, &grid, &PropagatorOptions::default()).unwrap();
        assert!(p.flagged.is_empty());
        let u = bloch_forward(&bump(&grid, 3.0));
        let same = p.apply(&u, 0.0, Split::Full).unwrap();
        let mut diff = same.clone();
        diff.add_scaled(&u, c(-1.0, 0.0));
        assert!(diff.norm() < 1e-10 * u.norm());
        for t in [0.5, 7.0] {
            let full = p.apply(&u, t, Split::Full).unwrap();
            let mut sum = p.apply(&u, t, Split::Low).unwrap();
            sum.add_scaled(&p.apply(&u, t, Split::High).unwrap(), c(1.0, 0.0));
            sum.add_scaled(&full, c(-1.0, 0.0));
            assert!(sum.norm() < 1e-10 * full.norm());
            let log = p.log_norm(&u, t, Split::Full).unwrap();
            assert!((log - full.norm().ln()).abs() < 1e-9);
        }
    }

    #[test]
    fn node_action_matches_matrix_exponential() {
        let wave = synthetic(16);
        let grid = TorusGrid::axial(1.0, 8, 16).unwrap();
        let p = Propagator::new(&wave, &grid, &PropagatorOptions::default()).unwrap();
        let u = bloch_forward(&bump(&grid, 1.0));
        let t = 0.3;
        let out = p.apply(&u, t, Split::Full).unwrap();
        for node in 0..grid.nodes() {
            let xi = grid.node_xi(node);
            let l = crate::bloch::assemble(&wave, &xi).unwrap().matrix;
            let direct = (l * c(t, 0.0)).exp() * &u.coefficients[node];
            let err = (&direct - &out.coefficients[node]).norm();
            assert!(err < 1e-8 * (1.0 + direct.norm()), "node {node}: {err:e}");
        }
    }

    #[test]
    fn integrals_are_conserved() {
        let wave = synthetic(16);
        let grid = TorusGrid::axial(1.0, 32, 16).unwrap();
        let p = Propagator::new(&wave, &grid, &PropagatorOptions::default()).unwrap();
        let f = bump(&grid, 2.0);
        let before = f.integral();
        let after = bloch_inverse(&p.apply(&bloch_forward(&f), 5.0, Split::Full).unwrap()).integral();
        for (a, b) in before.iter().zip(&after) {
            assert!((a - b).abs() < 1e-9 * (1.0 + a.abs()), "{a} vs {b}");
        }
    }

    #[test]
    fn heat_norm_decays_like_quarter_power() {
        let d = 0.5;
        let model = ModelSpec::heat(1, 1, d).unwrap();
        let wave = WaveCoefficients::constant(&model, &[0.0], 1.0, 4).unwrap();
        let grid = TorusGrid::axial(1.0, 4096, 4).unwrap();
        let p = Propagator::new(&wave, &grid, &PropagatorOptions::default()).unwrap();
        let mid = grid.lengths()[0] / 2.0;
        let f = Field::from_fn(&grid, 1, |x, out| out[0] = (-(x[0] - mid).powi(2) / 2.0).exp());
        let u = bloch_forward(&f);
        let (t1, t2) = (200.0, 2000.0);
        let l1 = p.log_norm(&u, t1, Split::Full).unwrap();
        let l2 = p.log_norm(&u, t2, Split::Full).unwrap();
        // A unit-variance Gaussian spreads to variance 1 + 2 D t.
        let exact = |t: f64| -0.25 * (1.0 + 2.0 * d * t).ln();
        assert!(((l2 - l1) - (exact(t2) - exact(t1))).abs() < 1e-6);
    }

    #[test]
    fn heat_gap_outside_cutoff_is_at_least_eps_squared() {
        let model = ModelSpec::heat(1, 1, 1.0).unwrap();
        let wave = WaveCoefficients::constant(&model, &[0.0], 1.0, 8).unwrap();
        let grid = TorusGrid::axial(1.0, 256, 8).unwrap();
        let eps = 0.5;
        let opts = PropagatorOptions { cutoff: Cutoff { eps }, ..Default::default() };
        let p = Propagator::new(&wave, &grid, &opts).unwrap();
        let gap = p.gap_outside_cutoff();
        assert!(gap >= eps * eps && gap < 1.1 * eps * eps, "{gap}");
        assert!(p.max_real().abs() < 1e-12);
    }

    #[test]
    fn phi_functions_match_definitions_across_the_switch() {
        for z in [c(1e-3, 0.0), c(0.9e-3, 0.2e-3), c(-0.5, 2.0)] {
            let (a, b) = phi_functions(z);
            let e = z.exp();
            assert!((a - (e - 1.0) / z).norm() < 1e-11);
            assert!((b - (e - 1.0 - z) / (z * z)).norm() < 1e-7);
        }
    }
}
