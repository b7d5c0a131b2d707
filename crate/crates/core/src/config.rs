//! Model configuration documents.
//!
//! One TOML document with sections `[market]`, `[utility]`, `[grid]`,
//! `[sim]` and the optional application sections `[random_horizon]` and
//! `[illiquid]`. Time is measured in years.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::applications::{
    AlphaSearch, HorizonLaw, HorizonPayoff, IlliquidParams, KvSettings, RandomHorizonSpec,
};
use crate::curve::Curve;
use crate::dual_solver::{BoundaryClosure, DualError, LogGrid, SolverSettings};
use crate::model::{
    ClosureUtility, DivergentSide, InadaCase, MarketModel, ModelError, PowerUtility, UtilityModel,
};
use crate::primal::RecoverySettings;
use crate::simulate::{Scheme, SimConfig};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
    #[error("config does not parse: {0}")]
    Parse(String),
    #[error("invalid config value: {0}")]
    Invalid(String),
    #[error("no custom utility registered as `{0}`")]
    UnknownCustom(String),
    #[error("config has no [{0}] section")]
    MissingSection(&'static str),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Grid(#[from] DualError),
}

/// A constant or piecewise-linear curve: `0.3` or `[[0.0, 0.3], [1.0, 0.35]]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CurveSpec {
    Constant(f64),
    Knots(Vec<[f64; 2]>),
}

impl CurveSpec {
    pub fn to_curve(&self) -> Result<Curve, ConfigError> {
        match self {
            CurveSpec::Constant(v) => Ok(Curve::constant(*v)),
            CurveSpec::Knots(knots) => {
                if knots.is_empty() || knots.windows(2).any(|w| !(w[1][0] > w[0][0])) {
                    return Err(ConfigError::Invalid(
                        "curve knots must be nonempty with increasing times".into(),
                    ));
                }
                Ok(Curve::PiecewiseLinear(
                    knots.iter().map(|k| (k[0], k[1])).collect(),
                ))
            }
        }
    }
}

fn one() -> f64 {
    1.0
}

fn zero_curve() -> CurveSpec {
    CurveSpec::Constant(0.0)
}

fn one_curve() -> CurveSpec {
    CurveSpec::Constant(1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarketSection {
    pub b: CurveSpec,
    pub sigma: CurveSpec,
    pub horizon: f64,
    #[serde(default = "one")]
    pub holder_exponent: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Power,
    Custom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UtilitySection {
    #[serde(default = "power_family")]
    pub family: Family,
    pub p: f64,
    #[serde(default = "one_curve")]
    pub a_c: CurveSpec,
    #[serde(default = "zero_curve")]
    pub a_x: CurveSpec,
    #[serde(default)]
    pub a_terminal: f64,
    /// Registered identifier when `family = "custom"`.
    pub custom: Option<String>,
}

fn power_family() -> Family {
    Family::Power
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundarySpec {
    PowerLaw,
    FlatRight,
    LaggedFit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSection {
    pub y_min: f64,
    pub y_max: f64,
    pub n_y: usize,
    pub n_t: usize,
    pub n_x: usize,
    pub x_min: Option<f64>,
    pub x_max: Option<f64>,
    pub boundary: BoundarySpec,
    pub sensitivity_check: bool,
    /// Combine `n_t` and `2 n_t` solves to cancel the first-order time error.
    pub time_extrapolation: bool,
}

impl Default for GridSection {
    fn default() -> Self {
        Self {
            y_min: 1e-3,
            y_max: 1e3,
            n_y: 400,
            n_t: 200,
            n_x: 400,
            x_min: None,
            x_max: None,
            boundary: BoundarySpec::PowerLaw,
            sensitivity_check: true,
            time_extrapolation: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimSection {
    pub n_paths: usize,
    pub dt_sim: f64,
    pub seed: u64,
    pub antithetic: bool,
    pub budget: u64,
    pub trace_paths: usize,
    /// Initial wealth of simulated paths.
    pub x0: f64,
}

impl Default for SimSection {
    fn default() -> Self {
        let d = SimConfig::default();
        Self {
            n_paths: d.n_paths,
            dt_sim: d.dt_sim,
            seed: d.seed,
            antithetic: d.antithetic,
            budget: d.budget,
            trace_paths: d.trace_paths,
            x0: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LawSpec {
    Never,
    Exponential,
    /// Uniform on `[0, end]`.
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomHorizonSection {
    pub law: LawSpec,
    pub rate: Option<f64>,
    pub end: Option<f64>,
    /// `G1 = running_weight c^p / p`.
    #[serde(default = "one")]
    pub running_weight: f64,
    /// `G2 = stopped_weight x^p / p`.
    #[serde(default = "one")]
    pub stopped_weight: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaSpec {
    Zero,
    Golden,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IlliquidSection {
    pub b_l: f64,
    pub sigma_l: f64,
    pub b_i: f64,
    pub sigma_i: f64,
    pub rho: f64,
    pub beta: f64,
    /// Rate of the exponential first trading time.
    pub arrival_rate: f64,
    #[serde(default)]
    pub margin: f64,
    #[serde(default = "golden")]
    pub alpha: AlphaSpec,
    #[serde(default = "alpha_tol")]
    pub alpha_tol: f64,
    #[serde(default = "truncation")]
    pub truncation: f64,
    pub n_y: Option<usize>,
    pub n_t: Option<usize>,
    pub max_iter: Option<usize>,
    pub tol: Option<f64>,
    pub quad_order: Option<usize>,
    pub initial: Option<f64>,
    pub time_extrapolation: Option<bool>,
}

fn golden() -> AlphaSpec {
    AlphaSpec::Golden
}

fn alpha_tol() -> f64 {
    1e-3
}

fn truncation() -> f64 {
    1e-4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub market: MarketSection,
    pub utility: UtilitySection,
    #[serde(default)]
    pub grid: GridSection,
    #[serde(default)]
    pub sim: SimSection,
    pub random_horizon: Option<RandomHorizonSection>,
    pub illiquid: Option<IlliquidSection>,
}

/// Builds a custom utility from its `[utility]` section.
pub type CustomFactory = fn(&UtilitySection, f64) -> Result<UtilityModel, ConfigError>;

/// Named custom utilities available to `family = "custom"`.
#[derive(Clone)]
pub struct UtilityRegistry {
    entries: BTreeMap<String, CustomFactory>,
}

impl UtilityRegistry {
    pub fn empty() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    /// Registry holding `power_numeric`: the power family with every
    /// closed-form hook removed, so all conjugates go through the
    /// numerical fallbacks.
    pub fn with_builtins() -> Self {
        let mut r = Self::empty();
        r.register("power_numeric", power_numeric);
        r
    }

    pub fn register(&mut self, name: &str, factory: CustomFactory) {
        self.entries.insert(name.to_string(), factory);
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    fn build(&self, section: &UtilitySection, horizon: f64) -> Result<UtilityModel, ConfigError> {
        let name = section
            .custom
            .as_deref()
            .ok_or_else(|| ConfigError::Invalid("custom family needs `custom = <id>`".into()))?;
        let factory = self
            .entries
            .get(name)
            .ok_or_else(|| ConfigError::UnknownCustom(name.to_string()))?;
        factory(section, horizon)
    }
}

fn power_numeric(section: &UtilitySection, horizon: f64) -> Result<UtilityModel, ConfigError> {
    let p = section.p;
    let (a_c, a_x) = (section.a_c.to_curve()?, section.a_x.to_curve()?);
    let a_t = section.a_terminal;
    let wealth = !a_x.is_zero();
    let k = (a_c
        .sampled_max(horizon, 256)
        .max(a_x.sampled_max(horizon, 256) + a_t)
        / p)
        .max(f64::MIN_POSITIVE);
    let (ac, ax) = (a_c.clone(), a_x.clone());
    let mut u = ClosureUtility::new(
        move |t, c, x| (ac.eval(t) * c.powf(p) + ax.eval(t) * x.powf(p)) / p,
        move |x| a_t * x.powf(p) / p,
    );
    if !wealth {
        u = u.wealth_independent();
    }
    let divergence = if a_t > 0.0 {
        DivergentSide::Both
    } else {
        DivergentSide::Consumption
    };
    Ok(UtilityModel::custom(
        Arc::new(u),
        p,
        k,
        InadaCase::Inada,
        Some(divergence),
        true,
    )?)
}

impl ModelConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<(Self, String), ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Ok((Self::parse(&text)?, text))
    }

    fn check(&self) -> Result<(), ConfigError> {
        if !(self.market.horizon > 0.0) {
            return Err(ConfigError::Invalid(format!(
                "horizon must be positive, got {}",
                self.market.horizon
            )));
        }
        if self.grid.n_x < 2 {
            return Err(ConfigError::Invalid("grid.n_x must be at least 2".into()));
        }
        if let (Some(a), Some(b)) = (self.grid.x_min, self.grid.x_max) {
            if !(a > 0.0 && b > a) {
                return Err(ConfigError::Invalid(format!(
                    "need 0 < x_min < x_max, got [{a}, {b}]"
                )));
            }
        }
        Ok(())
    }

    pub fn market(&self) -> Result<MarketModel, ConfigError> {
        let m = &self.market;
        Ok(MarketModel::new(
            m.b.to_curve()?,
            m.sigma.to_curve()?,
            m.horizon,
            m.holder_exponent,
        )?)
    }

    pub fn utility(&self, registry: &UtilityRegistry) -> Result<UtilityModel, ConfigError> {
        let u = &self.utility;
        match u.family {
            Family::Power => {
                let family =
                    PowerUtility::new(u.p, u.a_c.to_curve()?, u.a_x.to_curve()?, u.a_terminal);
                Ok(UtilityModel::power(family, self.market.horizon)?)
            }
            Family::Custom => registry.build(u, self.market.horizon),
        }
    }

    pub fn log_grid(&self) -> Result<LogGrid, ConfigError> {
        let g = &self.grid;
        Ok(LogGrid::new(
            g.y_min,
            g.y_max,
            g.n_y,
            g.n_t,
            self.market.horizon,
        )?)
    }

    pub fn solver_settings(&self) -> SolverSettings {
        let boundary = match self.grid.boundary {
            BoundarySpec::PowerLaw => BoundaryClosure::PowerLaw,
            BoundarySpec::FlatRight => BoundaryClosure::FlatRight,
            BoundarySpec::LaggedFit => BoundaryClosure::LaggedFit,
        };
        SolverSettings {
            boundary,
            sensitivity_check: self.grid.sensitivity_check,
            ..SolverSettings::default()
        }
    }

    pub fn recovery_settings(&self) -> RecoverySettings {
        let x_range = self.grid.x_min.zip(self.grid.x_max);
        RecoverySettings {
            n_x: self.grid.n_x,
            x_range,
            ..RecoverySettings::default()
        }
    }

    /// Simulation settings, with an optional seed override.
    pub fn sim_config(&self, seed: Option<u64>) -> SimConfig {
        let s = &self.sim;
        SimConfig {
            n_paths: s.n_paths,
            dt_sim: s.dt_sim,
            seed: seed.unwrap_or(s.seed),
            scheme: Scheme::EulerMaruyama,
            antithetic: s.antithetic,
            budget: s.budget,
            trace_paths: s.trace_paths,
        }
    }

    pub fn horizon_spec(&self) -> Result<RandomHorizonSpec, ConfigError> {
        let rh = self
            .random_horizon
            .as_ref()
            .ok_or(ConfigError::MissingSection("random_horizon"))?;
        let law = match rh.law {
            LawSpec::Never => HorizonLaw::Never,
            LawSpec::Exponential => HorizonLaw::Exponential {
                rate: rh
                    .rate
                    .ok_or_else(|| ConfigError::Invalid("exponential law needs `rate`".into()))?,
            },
            LawSpec::Uniform => {
                let end = rh
                    .end
                    .ok_or_else(|| ConfigError::Invalid("uniform law needs `end`".into()))?;
                if !(end > 0.0) {
                    return Err(ConfigError::Invalid(format!(
                        "uniform law needs end > 0, got {end}"
                    )));
                }
                HorizonLaw::Custom {
                    cdf: Curve::function(move |t| (t / end).clamp(0.0, 1.0)),
                    density: Curve::function(move |t| if t < end { 1.0 / end } else { 0.0 }),
                }
            }
        };
        Ok(RandomHorizonSpec {
            payoff: HorizonPayoff::Power {
                p: self.utility.p,
                running: Curve::constant(rh.running_weight),
                stopped: Curve::constant(rh.stopped_weight),
            },
            law,
            horizon: self.market.horizon,
        })
    }

    pub fn illiquid(&self) -> Result<(IlliquidParams, KvSettings), ConfigError> {
        let s = self
            .illiquid
            .as_ref()
            .ok_or(ConfigError::MissingSection("illiquid"))?;
        let params = IlliquidParams {
            b_l: s.b_l,
            sigma_l: s.sigma_l,
            b_i: s.b_i,
            sigma_i: s.sigma_i,
            rho: s.rho,
            p: self.utility.p,
            beta: s.beta,
            arrival: HorizonLaw::Exponential {
                rate: s.arrival_rate,
            },
            margin: s.margin,
        };
        let d = KvSettings::default();
        let settings = KvSettings {
            y_min: self.grid.y_min,
            y_max: self.grid.y_max,
            n_y: s.n_y.unwrap_or(d.n_y),
            n_t: s.n_t.unwrap_or(d.n_t),
            truncation: s.truncation,
            max_iter: s.max_iter.unwrap_or(d.max_iter),
            tol: s.tol.unwrap_or(d.tol),
            alpha: match s.alpha {
                AlphaSpec::Zero => AlphaSearch::ForcedZero,
                AlphaSpec::Golden => AlphaSearch::Golden { tol: s.alpha_tol },
            },
            quad_order: s.quad_order.unwrap_or(d.quad_order),
            initial: s.initial.unwrap_or(d.initial),
            time_extrapolation: s.time_extrapolation.unwrap_or(d.time_extrapolation),
            solver: d.solver,
        };
        Ok((params, settings))
    }
}

/// Hex SHA-256 of the raw config text.
pub fn config_hash(text: &str) -> String {
    Sha256::digest(text.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const MERTON: &str = r#"
[market]
b = 0.3
sigma = 0.5
horizon = 1.0

[utility]
p = 0.5
a_terminal = 1.0

[sim]
seed = 11
"#;

    #[test]
    fn minimal_document_uses_defaults() {
        let cfg = ModelConfig::parse(MERTON).unwrap();
        assert_eq!(cfg.grid, GridSection::default());
        assert_eq!(cfg.sim.seed, 11);
        assert_eq!(cfg.sim_config(Some(3)).seed, 3);
        let u = cfg.utility(&UtilityRegistry::with_builtins()).unwrap();
        assert!(!u.depends_on_wealth());
        assert_eq!(cfg.log_grid().unwrap(), LogGrid::standard(1.0));
    }

    #[test]
    fn unknown_keys_and_sections_are_rejected() {
        let typo = MERTON.replace("sigma = 0.5", "sigma = 0.5\nsgima = 0.4");
        assert!(matches!(
            ModelConfig::parse(&typo),
            Err(ConfigError::Parse(_))
        ));
        let extra = format!("{MERTON}\n[extra]\nx = 1\n");
        assert!(matches!(
            ModelConfig::parse(&extra),
            Err(ConfigError::Parse(_))
        ));
    }

    #[test]
    fn piecewise_curves() {
        let text = MERTON.replace("b = 0.3", "b = [[0.0, 0.3], [1.0, 0.5]]");
        let m = ModelConfig::parse(&text).unwrap().market().unwrap();
        assert!((m.b(0.5) - 0.4).abs() < 1e-15);
        let bad = MERTON.replace("b = 0.3", "b = [[1.0, 0.3], [0.0, 0.5]]");
        assert!(ModelConfig::parse(&bad).unwrap().market().is_err());
    }

    #[test]
    fn custom_family_lookup() {
        let text = MERTON.replace(
            "p = 0.5",
            "p = 0.5\nfamily = \"custom\"\ncustom = \"power_numeric\"",
        );
        let cfg = ModelConfig::parse(&text).unwrap();
        let u = cfg.utility(&UtilityRegistry::with_builtins()).unwrap();
        assert!(u.as_power().is_none());
        assert!((u.u2(4.0) - 4.0).abs() < 1e-14);
        assert!(matches!(
            cfg.utility(&UtilityRegistry::empty()),
            Err(ConfigError::UnknownCustom(_))
        ));
    }

    #[test]
    fn application_sections() {
        let text = format!(
            "{MERTON}\n[random_horizon]\nlaw = \"exponential\"\nrate = 0.5\n\n[illiquid]\nb_l = 0.1\nsigma_l = 0.3\nb_i = 0.1\nsigma_i = 0.4\nrho = 0.3\nbeta = 0.5\narrival_rate = 0.2\nalpha = \"zero\"\n"
        );
        let cfg = ModelConfig::parse(&text).unwrap();
        let spec = cfg.horizon_spec().unwrap();
        assert!((spec.law.survival(1.0) - (-0.5f64).exp()).abs() < 1e-15);
        let (params, settings) = cfg.illiquid().unwrap();
        assert_eq!(params.p, 0.5);
        assert_eq!(settings.alpha, AlphaSearch::ForcedZero);
        assert!(matches!(
            ModelConfig::parse(MERTON).unwrap().illiquid(),
            Err(ConfigError::MissingSection("illiquid"))
        ));
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        assert_eq!(config_hash(MERTON), config_hash(MERTON));
        assert_ne!(
            config_hash(MERTON),
            config_hash(&MERTON.replace("0.3", "0.31"))
        );
        assert_eq!(config_hash("").len(), 64);
    }
}
