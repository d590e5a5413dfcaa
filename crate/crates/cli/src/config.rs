//! Run configuration: strict TOML, environment overrides, validation.

use std::path::{Path, PathBuf};

use perstab::semigroup::kernels::SeparableData;
use perstab::semigroup::nonlinear::{EnergyOptions, EvolveOptions};
use perstab::{BurgersPairParams, TransverseAxis};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Environment variables with this prefix override config keys; `__`
/// separates table levels (`PERSTAB_RESOLUTION__SAMPLES=64`).
pub const ENV_PREFIX: &str = "PERSTAB_";

/// Variables read by the flag parser rather than merged into the config.
pub const RESERVED_ENV: [&str; 4] = ["PERSTAB_CONFIG", "PERSTAB_THREADS", "PERSTAB_OUT", "PERSTAB_LOG"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelName {
    ConstCoeff,
    Heat,
    VdwCubic,
    BurgersPair,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelName,
    #[serde(default)]
    pub params: ModelParams,
    #[serde(default)]
    pub wave: WaveSource,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub resolution: Resolution,
    #[serde(default)]
    pub tolerances: TolerancesConfig,
    #[serde(default)]
    pub continuation: ContinuationConfig,
    #[serde(default)]
    pub evans: EvansConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub decay: DecayConfig,
    #[serde(default)]
    pub evolve: EvolveConfig,
    #[serde(default)]
    pub asymptotics: AsymptoticsConfig,
    #[serde(default)]
    pub verify: VerifyConfig,
}

fn default_seed() -> u64 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelParams {
    pub dim: usize,
    pub components: usize,
    /// Heat equation diffusion coefficient.
    pub diffusion: f64,
    /// `const_coeff`: one `n x n` matrix (list of rows) per direction.
    pub a: Vec<Vec<Vec<f64>>>,
    /// `const_coeff`: `d^2` viscosity matrices, index `j d + k`.
    pub b: Vec<Vec<Vec<f64>>>,
    /// `vdw_cubic`: flux multipliers of the transverse directions.
    pub transverse: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub burgers: Option<BurgersPairParams>,
}

impl Default for ModelParams {
    fn default() -> Self {
        Self { dim: 1, components: 1, diffusion: 1.0, a: Vec::new(), b: Vec::new(), transverse: Vec::new(), burgers: None }
    }
}

/// Where the periodic coefficients come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum WaveSource {
    /// Solve for a periodic profile from a guess.
    Profile { anchor: Vec<f64>, speed: f64, normal: Vec<f64>, flux_constant: Vec<f64>, period: f64 },
    /// Linearise about a constant state.
    Constant { state: Vec<f64>, period: f64 },
    /// Linearise about `cos_amp cos(2 pi x / X) + sin_amp sin(2 pi x / X)`.
    Trigonometric { period: f64, cos_amp: Vec<f64>, sin_amp: Vec<f64>, speed: f64 },
}

impl Default for WaveSource {
    fn default() -> Self {
        WaveSource::Profile { anchor: vec![1.3, 0.0], speed: 0.0, normal: vec![1.0], flux_constant: vec![0.0, 0.0], period: 4.9967 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RadiusGrid {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

impl RadiusGrid {
    pub fn values(&self) -> Vec<f64> {
        perstab::bloch::log_radii(self.lo, self.hi, self.count)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Spacing {
    /// Even in `ln(1 + t)`.
    Log,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeGrid {
    pub start: f64,
    pub stop: f64,
    pub count: usize,
    pub spacing: Spacing,
}

impl TimeGrid {
    pub fn values(&self) -> Vec<f64> {
        match self.spacing {
            Spacing::Log => perstab::semigroup::decay::log_times(self.start, self.stop, self.count),
            Spacing::Linear => {
                let n = self.count.max(2) - 1;
                (0..self.count).map(|k| self.start + (self.stop - self.start) * k as f64 / n as f64).collect()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Resolution {
    /// Profile samples per period (`m`); a power of two.
    pub samples: usize,
    pub zone_points: usize,
    /// Transverse frequencies swept with the axial zone; empty means the origin.
    pub transverse: Vec<Vec<f64>>,
    /// Small-frequency ray directions; empty picks a default fan.
    pub rays: Vec<Vec<f64>>,
    pub radii: RadiusGrid,
    /// Angles per spherical coordinate when sampling directions.
    pub angles: usize,
    /// Eigenvalues kept per frequency in spectrum output; 0 keeps all.
    pub spectrum_keep: usize,
    /// Periodic cells of the evolution torus along the wave.
    pub cells: usize,
    pub grid_transverse: Vec<TransverseAxis>,
}

impl Default for Resolution {
    fn default() -> Self {
        Self {
            samples: 128,
            zone_points: 64,
            transverse: Vec::new(),
            rays: Vec::new(),
            radii: RadiusGrid { lo: 1e-3, hi: 1e-1, count: 7 },
            angles: 6,
            spectrum_keep: 8,
            cells: 1024,
            grid_transverse: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TolerancesConfig {
    pub newton_tol: f64,
    pub ode_rtol: f64,
    pub ode_atol: f64,
    pub evans_rtol: f64,
    pub evans_atol: f64,
    pub cluster_tol: f64,
    pub d1_margin: f64,
    pub zero_tol: f64,
    pub hyp_tol: f64,
    /// Low-frequency cutoff radius.
    pub eps: f64,
    pub condition_limit: f64,
    pub evolve_rtol: f64,
    pub evolve_atol: f64,
    pub smallness: f64,
}

impl Default for TolerancesConfig {
    fn default() -> Self {
        Self {
            newton_tol: 1e-10,
            ode_rtol: 1e-12,
            ode_atol: 1e-13,
            evans_rtol: 1e-10,
            evans_atol: 1e-12,
            cluster_tol: 1e-4,
            d1_margin: 1e-6,
            zero_tol: 1e-9,
            hyp_tol: 1e-7,
            eps: 0.3,
            condition_limit: 1e8,
            evolve_rtol: 1e-6,
            evolve_atol: 1e-14,
            smallness: 0.5,
        }
    }
}

impl TolerancesConfig {
    fn named(&self) -> [(&'static str, f64); 14] {
        [
            ("newton_tol", self.newton_tol),
            ("ode_rtol", self.ode_rtol),
            ("ode_atol", self.ode_atol),
            ("evans_rtol", self.evans_rtol),
            ("evans_atol", self.evans_atol),
            ("cluster_tol", self.cluster_tol),
            ("d1_margin", self.d1_margin),
            ("zero_tol", self.zero_tol),
            ("hyp_tol", self.hyp_tol),
            ("eps", self.eps),
            ("condition_limit", self.condition_limit),
            ("evolve_rtol", self.evolve_rtol),
            ("evolve_atol", self.evolve_atol),
            ("smallness", self.smallness),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContinuationConfig {
    /// Direction in parameter space `(X, a, s, angles, q)`.
    pub direction: Vec<f64>,
    pub step: f64,
    pub steps: usize,
}

impl Default for ContinuationConfig {
    fn default() -> Self {
        Self { direction: Vec::new(), step: 0.01, steps: 5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JointRayConfig {
    pub xi: Vec<f64>,
    /// `[re, im]`.
    pub lambda: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvansConfig {
    /// `[re, im]` pairs.
    pub lambdas: Vec<[f64; 2]>,
    /// Full frequency vectors `(xi_1, xi_tilde)`.
    pub xi: Vec<Vec<f64>>,
    pub contour_center: [f64; 2],
    pub contour_radius: f64,
    /// Largest argument increment between contour samples.
    pub max_turn: f64,
    /// Joint `(xi, lambda)` directions; empty picks a default fan.
    pub rays: Vec<JointRayConfig>,
    pub lowfreq_radii: Vec<f64>,
}

impl Default for EvansConfig {
    fn default() -> Self {
        Self {
            lambdas: vec![[0.1, 0.0], [0.0, 0.5]],
            xi: vec![vec![0.0]],
            contour_center: [0.2, 0.0],
            contour_radius: 0.8,
            max_turn: std::f64::consts::FRAC_PI_4,
            rays: Vec::new(),
            lowfreq_radii: vec![1e-3, 2e-3],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    /// Gaussian in the first component and `-1/2` of it in the second.
    Bump,
    /// Uniform random values in `[-amplitude, amplitude]` from `seed`.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub kind: DataKind,
    pub amplitude: f64,
    pub width: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { kind: DataKind::Bump, amplitude: 1.0, width: 2.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecayConfig {
    pub times: TimeGrid,
    pub window: [f64; 2],
    pub ps: Vec<f64>,
    pub derivative: bool,
    pub wrap_fraction: f64,
    pub high_frequency: bool,
    pub hf_times: TimeGrid,
    pub hf_window: [f64; 2],
}

impl Default for DecayConfig {
    fn default() -> Self {
        Self {
            times: TimeGrid { start: 1.0, stop: 1500.0, count: 24, spacing: Spacing::Log },
            window: [100.0, 1500.0],
            ps: vec![2.0, f64::INFINITY],
            derivative: true,
            wrap_fraction: 1e-6,
            high_frequency: true,
            hf_times: TimeGrid { start: 0.0, stop: 3000.0, count: 121, spacing: Spacing::Linear },
            hf_window: [1000.0, 3000.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvolveConfig {
    pub times: TimeGrid,
    /// Replaces `data.amplitude`: nonlinear runs need small data.
    pub amplitude: f64,
    /// Write a binary snapshot at every output time.
    pub snapshots: bool,
    pub initial_step: f64,
    pub max_step: f64,
    pub energy: EnergyOptions,
    /// Seed amplitude of the quadratic-remainder check; omitted skips it.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub linearization_amplitude: Option<f64>,
}

impl Default for EvolveConfig {
    fn default() -> Self {
        let base = EvolveOptions::default();
        Self {
            times: TimeGrid { start: 2.5, stop: 100.0, count: 40, spacing: Spacing::Linear },
            amplitude: 0.05,
            snapshots: false,
            initial_step: base.initial_step,
            max_step: base.max_step,
            energy: EnergyOptions::default(),
            linearization_amplitude: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AsymptoticsConfig {
    pub directions: usize,
    pub panels: usize,
    pub order: usize,
    pub track_radii: RadiusGrid,
    pub times: TimeGrid,
    pub band_times: TimeGrid,
    /// Compare `S^I(t) v0` with the approximation at `t + shift`.
    pub shift: f64,
    pub data: SeparableData,
}

impl Default for AsymptoticsConfig {
    fn default() -> Self {
        Self {
            directions: 24,
            panels: 10,
            order: 8,
            track_radii: RadiusGrid { lo: 1e-3, hi: 0.1, count: 8 },
            times: TimeGrid { start: 10.0, stop: 1000.0, count: 12, spacing: Spacing::Log },
            band_times: TimeGrid { start: 1.0, stop: 100.0, count: 12, spacing: Spacing::Log },
            shift: 0.0,
            data: SeparableData { amplitude: vec![1.0, 0.5], centre: 0.0, axial_width: 1.0, transverse_width: 1.0, odd: false },
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyConfig {
    /// Criterion ids to run; empty runs all.
    pub only: Vec<usize>,
}

fn config_error(message: String, key: Option<String>) -> CliError {
    CliError::Config { message, key }
}

/// First ``unknown field `x` `` / ``unknown variant `x` `` name in a parse message.
fn offending_key(message: &str) -> Option<String> {
    for marker in ["unknown field `", "unknown variant `", "missing field `"] {
        if let Some(start) = message.find(marker) {
            let rest = &message[start + marker.len()..];
            return rest.find('`').map(|end| rest[..end].to_string());
        }
    }
    None
}

/// Parses an override value as a TOML literal, falling back to a string.
fn parse_override(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

fn apply_override(table: &mut toml::Table, path: &[String], value: toml::Value) -> Result<(), CliError> {
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut current = table;
    for p in parents {
        let entry = current.entry(p.clone()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        current = match entry {
            toml::Value::Table(t) => t,
            _ => return Err(config_error(format!("override path crosses non-table key `{p}`"), Some(p.clone()))),
        };
    }
    current.insert(last.clone(), value);
    Ok(())
}

impl RunConfig {
    /// Parses TOML text, applies `vars` overrides and validates.
    pub fn from_toml(text: &str, vars: impl IntoIterator<Item = (String, String)>) -> Result<Self, CliError> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| {
            let msg = e.message().to_string();
            config_error(msg.clone(), offending_key(&msg))
        })?;
        let mut overrides: Vec<(String, String)> = vars
            .into_iter()
            .filter(|(k, _)| k.starts_with(ENV_PREFIX) && !RESERVED_ENV.contains(&k.as_str()))
            .collect();
        overrides.sort();
        for (k, v) in overrides {
            let path: Vec<String> = k[ENV_PREFIX.len()..].split("__").map(|s| s.to_ascii_lowercase()).collect();
            if path.iter().any(|s| s.is_empty()) {
                return Err(config_error(format!("malformed override variable {k}"), Some(k)));
            }
            apply_override(&mut table, &path, parse_override(&v))?;
        }
        let cfg: RunConfig = toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| {
            let msg = e.message().to_string();
            config_error(msg.clone(), offending_key(&msg))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_error(format!("cannot read {}: {e}", path.display()), None))?;
        Self::from_toml(&text, std::env::vars())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        for (name, value) in self.tolerances.named() {
            if !(value > 0.0 && value.is_finite()) {
                return Err(config_error(
                    format!("tolerance {name} must be positive and finite, got {value}"),
                    Some(format!("tolerances.{name}")),
                ));
            }
        }
        let r = &self.resolution;
        let positive = [
            ("resolution.samples", r.samples),
            ("resolution.zone_points", r.zone_points),
            ("resolution.angles", r.angles),
            ("resolution.cells", r.cells),
            ("resolution.radii.count", r.radii.count),
            ("params.dim", self.params.dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(config_error(format!("{name} must be positive"), Some(name.into())));
            }
        }
        if !r.samples.is_power_of_two() {
            return Err(config_error("resolution.samples must be a power of two".into(), Some("resolution.samples".into())));
        }
        if !(r.radii.lo > 0.0 && r.radii.hi > r.radii.lo) {
            return Err(config_error("resolution.radii needs 0 < lo < hi".into(), Some("resolution.radii".into())));
        }
        for (name, g) in [
            ("decay.times", self.decay.times),
            ("decay.hf_times", self.decay.hf_times),
            ("evolve.times", self.evolve.times),
            ("asymptotics.times", self.asymptotics.times),
            ("asymptotics.band_times", self.asymptotics.band_times),
        ] {
            if g.count < 2 || !(g.start >= 0.0 && g.stop > g.start) {
                return Err(config_error(format!("{name} needs count >= 2 and 0 <= start < stop"), Some(name.into())));
            }
        }
        if self.evans.contour_radius <= 0.0 || self.evans.max_turn <= 0.0 {
            return Err(config_error("evans contour radius and max_turn must be positive".into(), Some("evans".into())));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn no_env() -> Vec<(String, String)> {
        Vec::new()
    }

    #[test]
    fn minimal_config_takes_defaults() {
        let cfg = RunConfig::from_toml("model = \"vdw_cubic\"", no_env()).unwrap();
        assert_eq!(cfg.resolution, Resolution::default());
        assert_eq!(cfg.seed, 1);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::from_toml("model = \"heat\"\n[resolution]\nsampels = 4\n", no_env()).unwrap_err();
        match err {
            CliError::Config { key, .. } => assert_eq!(key.as_deref(), Some("sampels")),
            other => panic!("unexpected {other:?}"),
        }
        let err = RunConfig::from_toml("model = \"heat\"\ncolour = 1\n", no_env()).unwrap_err();
        assert!(matches!(err, CliError::Config { key: Some(k), .. } if k == "colour"));
    }

    #[test]
    fn config_round_trips_through_toml() {
        let text = r#"
            model = "burgers_pair"
            seed = 9
            [params.burgers]
            dim = 3
            shifts = [0.3, -0.2]
            axial_viscosity = [1.0, 0.2, 0.2, 0.8]
            transverse_speeds = [0.0, 0.0]
            transverse_diffusion = 1.0
            [wave]
            kind = "trigonometric"
            period = 1.0
            cos_amp = [0.4, 0.0]
            sin_amp = [0.0, 0.3]
            speed = 0.0
            [resolution]
            samples = 16
            grid_transverse = [{ points = 4, length = 2.0 }]
            [evans]
            rays = [{ xi = [1.0, 0.0, 0.0], lambda = [0.0, 1.0] }]
            [evolve]
            linearization_amplitude = 1e-6
        "#;
        let cfg = RunConfig::from_toml(text, no_env()).unwrap();
        let again = RunConfig::from_toml(&cfg.to_toml(), no_env()).unwrap();
        assert_eq!(cfg, again);
        assert_eq!(again.decay.ps[1], f64::INFINITY);
    }

    #[test]
    fn environment_overrides_nested_keys() {
        let vars = vec![
            ("PERSTAB_RESOLUTION__SAMPLES".to_string(), "32".to_string()),
            ("PERSTAB_SEED".to_string(), "5".to_string()),
            ("PERSTAB_THREADS".to_string(), "3".to_string()),
            ("HOME".to_string(), "/root".to_string()),
        ];
        let cfg = RunConfig::from_toml("model = \"heat\"", vars).unwrap();
        assert_eq!(cfg.resolution.samples, 32);
        assert_eq!(cfg.seed, 5);
        let bad = vec![("PERSTAB_RESOLUTION__BOGUS".to_string(), "1".to_string())];
        assert!(matches!(RunConfig::from_toml("model = \"heat\"", bad), Err(CliError::Config { key: Some(k), .. }) if k == "bogus"));
    }

    #[test]
    fn nonpositive_tolerance_is_rejected() {
        let err = RunConfig::from_toml("model = \"heat\"\n[tolerances]\neps = 0.0\n", no_env()).unwrap_err();
        assert!(matches!(err, CliError::Config { key: Some(k), .. } if k == "tolerances.eps"));
    }
}
