//! Market and preference data, with executable checks of the standing
//! assumptions (strictly positive coefficients, normalised concave
//! utilities, power growth, Inada behaviour in consumption).

use std::fmt;
use std::sync::Arc;

use serde::Serialize;
use thiserror::Error;

use crate::curve::Curve;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("volatility is not strictly positive at t = {t}")]
    NonPositiveVolatility { t: f64 },
    #[error("drift is not strictly positive at t = {t}")]
    NonPositiveDrift { t: f64 },
    #[error("concavity violated at (t, c, x) = ({t}, {c}, {x}): {detail}")]
    ConcavityViolation {
        t: f64,
        c: f64,
        x: f64,
        detail: String,
    },
    #[error("monotonicity violated at (t, c, x) = ({t}, {c}, {x}): {detail}")]
    MonotonicityViolation {
        t: f64,
        c: f64,
        x: f64,
        detail: String,
    },
    #[error("growth bound violated at (t, c, x) = ({t}, {c}, {x})")]
    GrowthBoundViolation { t: f64, c: f64, x: f64 },
    #[error("normalisation violated at (t, c, x) = ({t}, {c}, {x}): value {value}")]
    NormalizationViolation { t: f64, c: f64, x: f64, value: f64 },
    #[error("Inada conditions violated at (t, x) = ({t}, {x}): {detail}")]
    InadaViolation { t: f64, x: f64, detail: String },
    #[error("no divergent utility declared (neither consumption nor terminal wealth)")]
    MissingDivergence,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

/// Deterministic market: a riskless asset with zero rate and one risky
/// asset with drift `b(t)` and volatility `sigma(t)` on `[0, T]`.
#[derive(Debug, Clone)]
pub struct MarketModel {
    pub drift: Curve,
    pub volatility: Curve,
    pub horizon: f64,
    /// Hölder exponent certified by the caller; not verified numerically.
    pub holder_exponent: f64,
}

impl MarketModel {
    pub fn new(
        drift: Curve,
        volatility: Curve,
        horizon: f64,
        holder_exponent: f64,
    ) -> Result<Self, ModelError> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(ModelError::InvalidParameter(format!(
                "horizon must be positive, got {horizon}"
            )));
        }
        if !(holder_exponent > 0.0 && holder_exponent <= 1.0) {
            return Err(ModelError::InvalidParameter(format!(
                "Hölder exponent must lie in (0, 1], got {holder_exponent}"
            )));
        }
        Ok(Self {
            drift,
            volatility,
            horizon,
            holder_exponent,
        })
    }

    /// Constant-coefficient market with a Lipschitz (exponent 1) certificate.
    pub fn constant(b: f64, sigma: f64, horizon: f64) -> Result<Self, ModelError> {
        Self::new(Curve::Constant(b), Curve::Constant(sigma), horizon, 1.0)
    }

    pub fn b(&self, t: f64) -> f64 {
        self.drift.eval(t)
    }

    pub fn sigma(&self, t: f64) -> f64 {
        self.volatility.eval(t)
    }

    /// Sharpe ratio `b / sigma`.
    pub fn theta(&self, t: f64) -> f64 {
        self.b(t) / self.sigma(t)
    }

    /// Diffusion coefficient of the dual equation, `b^2 / (2 sigma^2)`.
    pub fn lambda(&self, t: f64) -> f64 {
        let th = self.theta(t);
        0.5 * th * th
    }

    pub fn is_constant(&self) -> bool {
        self.drift.as_constant().is_some() && self.volatility.as_constant().is_some()
    }

    /// Checks strict positivity of both coefficients at the given times.
    pub fn check_positivity(&self, times: impl IntoIterator<Item = f64>) -> Result<(), ModelError> {
        for t in times {
            let s = self.sigma(t);
            if !(s > 0.0 && s.is_finite()) {
                return Err(ModelError::NonPositiveVolatility { t });
            }
            let b = self.b(t);
            if !(b > 0.0 && b.is_finite()) {
                return Err(ModelError::NonPositiveDrift { t });
            }
        }
        Ok(())
    }
}

/// Which branch of the consumption assumption a utility satisfies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum InadaCase {
    /// Marginal utility of consumption runs from `+inf` at 0 to 0 at `+inf`.
    Inada,
    /// The running utility does not depend on consumption.
    NoConsumption,
}

/// Which utility is declared unbounded, guaranteeing a strictly positive
/// dual value function.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum DivergentSide {
    Consumption,
    TerminalWealth,
    Both,
}

/// User-supplied utility pair `U1(t, c, x)`, `U2(x)`.
///
/// Only the two values are required. Analytic derivatives and closed-form
/// conjugates are optional hooks; the transforms fall back to finite
/// differences and numerical optimisation when a hook returns `None`.
pub trait Utility: Send + Sync {
    fn u1(&self, t: f64, c: f64, x: f64) -> f64;
    fn u2(&self, x: f64) -> f64;

    fn u1_c(&self, _t: f64, _c: f64, _x: f64) -> Option<f64> {
        None
    }
    fn u1_cc(&self, _t: f64, _c: f64, _x: f64) -> Option<f64> {
        None
    }
    fn u1_x(&self, _t: f64, _c: f64, _x: f64) -> Option<f64> {
        None
    }
    fn u2_x(&self, _x: f64) -> Option<f64> {
        None
    }
    fn u2_xx(&self, _x: f64) -> Option<f64> {
        None
    }

    /// Closed form of the maximiser `c*(t, y, x)` of `U1 - c y`.
    fn optimal_c(&self, _t: f64, _y: f64, _x: f64) -> Option<f64> {
        None
    }
    /// Closed form of `sup_c {U1(t, c, x) - c y}`.
    fn conjugate_c(&self, _t: f64, _y: f64, _x: f64) -> Option<f64> {
        None
    }
    /// Closed form of `sup_{c, x} {U1(t, c, x) - c y - x u}`.
    fn double_conjugate(&self, _t: f64, _y: f64, _u: f64) -> Option<f64> {
        None
    }
    /// Closed form of `sup_x {U2(x) - x y}`.
    fn conjugate_u2(&self, _y: f64) -> Option<f64> {
        None
    }

    /// Whether `U1` depends on wealth; if not, the dual equation is linear.
    fn depends_on_wealth(&self) -> bool {
        true
    }
    /// Whether both utilities vanish identically.
    fn is_zero(&self) -> bool {
        false
    }
    fn as_power(&self) -> Option<&PowerUtility> {
        None
    }
}

/// Power family `U1 = a_c(t) c^p/p + a_x(t) x^p/p`, `U2 = a_T x^p/p`.
#[derive(Debug, Clone)]
pub struct PowerUtility {
    pub p: f64,
    pub a_c: Curve,
    pub a_x: Curve,
    pub a_terminal: f64,
}

impl PowerUtility {
    pub fn new(p: f64, a_c: impl Into<Curve>, a_x: impl Into<Curve>, a_terminal: f64) -> Self {
        Self {
            p,
            a_c: a_c.into(),
            a_x: a_x.into(),
            a_terminal,
        }
    }

    /// `p / (1 - p)`, the decay exponent of every dual quantity.
    pub fn q(&self) -> f64 {
        self.p / (1.0 - self.p)
    }

    fn weight_conjugate(&self, a: f64) -> f64 {
        if a <= 0.0 {
            0.0
        } else {
            a.powf(1.0 / (1.0 - self.p))
        }
    }

    fn pow_p(&self, v: f64) -> f64 {
        if self.p == 0.5 {
            v.sqrt()
        } else {
            v.powf(self.p)
        }
    }
}

impl Utility for PowerUtility {
    fn u1(&self, t: f64, c: f64, x: f64) -> f64 {
        let mut v = 0.0;
        if !self.a_c.is_zero() {
            v += self.a_c.eval(t) * self.pow_p(c);
        }
        if !self.a_x.is_zero() {
            v += self.a_x.eval(t) * self.pow_p(x);
        }
        v / self.p
    }

    fn u2(&self, x: f64) -> f64 {
        if self.a_terminal == 0.0 {
            0.0
        } else {
            self.a_terminal * self.pow_p(x) / self.p
        }
    }

    fn u1_c(&self, t: f64, c: f64, _x: f64) -> Option<f64> {
        Some(self.a_c.eval(t) * c.powf(self.p - 1.0))
    }

    fn u1_cc(&self, t: f64, c: f64, _x: f64) -> Option<f64> {
        Some(self.a_c.eval(t) * (self.p - 1.0) * c.powf(self.p - 2.0))
    }

    fn u1_x(&self, t: f64, _c: f64, x: f64) -> Option<f64> {
        Some(self.a_x.eval(t) * x.powf(self.p - 1.0))
    }

    fn u2_x(&self, x: f64) -> Option<f64> {
        Some(self.a_terminal * x.powf(self.p - 1.0))
    }

    fn u2_xx(&self, x: f64) -> Option<f64> {
        Some(self.a_terminal * (self.p - 1.0) * x.powf(self.p - 2.0))
    }

    fn optimal_c(&self, t: f64, y: f64, _x: f64) -> Option<f64> {
        let a = self.a_c.eval(t);
        if a <= 0.0 {
            return Some(0.0);
        }
        Some((a / y).powf(1.0 / (1.0 - self.p)))
    }

    fn conjugate_c(&self, t: f64, y: f64, x: f64) -> Option<f64> {
        let k = (1.0 - self.p) / self.p;
        let mut v = 0.0;
        if !self.a_c.is_zero() {
            v += k * self.weight_conjugate(self.a_c.eval(t)) * y.powf(-self.q());
        }
        if !self.a_x.is_zero() {
            v += self.a_x.eval(t) * self.pow_p(x) / self.p;
        }
        Some(v)
    }

    fn double_conjugate(&self, t: f64, y: f64, u: f64) -> Option<f64> {
        let k = (1.0 - self.p) / self.p;
        let mut v = 0.0;
        if !self.a_c.is_zero() {
            v += k * self.weight_conjugate(self.a_c.eval(t)) * y.powf(-self.q());
        }
        if !self.a_x.is_zero() {
            v += k * self.weight_conjugate(self.a_x.eval(t)) * u.powf(-self.q());
        }
        Some(v)
    }

    fn conjugate_u2(&self, y: f64) -> Option<f64> {
        Some((1.0 - self.p) / self.p * self.weight_conjugate(self.a_terminal) * y.powf(-self.q()))
    }

    fn depends_on_wealth(&self) -> bool {
        !self.a_x.is_zero()
    }

    fn is_zero(&self) -> bool {
        self.a_c.is_zero() && self.a_x.is_zero() && self.a_terminal == 0.0
    }

    fn as_power(&self) -> Option<&PowerUtility> {
        Some(self)
    }
}

type Fn3 = Arc<dyn Fn(f64, f64, f64) -> f64 + Send + Sync>;
type Fn1 = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Utility built from closures. Derivatives are optional; missing ones
/// are replaced by finite differences and flagged in validation reports.
#[derive(Clone)]
pub struct ClosureUtility {
    pub u1: Fn3,
    pub u2: Fn1,
    pub u1_c: Option<Fn3>,
    pub u1_x: Option<Fn3>,
    pub u2_x: Option<Fn1>,
    pub wealth_dependent: bool,
}

impl ClosureUtility {
    pub fn new(
        u1: impl Fn(f64, f64, f64) -> f64 + Send + Sync + 'static,
        u2: impl Fn(f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self {
            u1: Arc::new(u1),
            u2: Arc::new(u2),
            u1_c: None,
            u1_x: None,
            u2_x: None,
            wealth_dependent: true,
        }
    }

    pub fn with_u1_c(mut self, f: impl Fn(f64, f64, f64) -> f64 + Send + Sync + 'static) -> Self {
        self.u1_c = Some(Arc::new(f));
        self
    }

    pub fn with_u1_x(mut self, f: impl Fn(f64, f64, f64) -> f64 + Send + Sync + 'static) -> Self {
        self.u1_x = Some(Arc::new(f));
        self
    }

    pub fn with_u2_x(mut self, f: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        self.u2_x = Some(Arc::new(f));
        self
    }

    pub fn wealth_independent(mut self) -> Self {
        self.wealth_dependent = false;
        self
    }
}

impl Utility for ClosureUtility {
    fn u1(&self, t: f64, c: f64, x: f64) -> f64 {
        (self.u1)(t, c, x)
    }
    fn u2(&self, x: f64) -> f64 {
        (self.u2)(x)
    }
    fn u1_c(&self, t: f64, c: f64, x: f64) -> Option<f64> {
        self.u1_c.as_ref().map(|f| f(t, c, x))
    }
    fn u1_x(&self, t: f64, c: f64, x: f64) -> Option<f64> {
        self.u1_x.as_ref().map(|f| f(t, c, x))
    }
    fn u2_x(&self, x: f64) -> Option<f64> {
        self.u2_x.as_ref().map(|f| f(x))
    }
    fn depends_on_wealth(&self) -> bool {
        self.wealth_dependent
    }
}

/// Relative step of the central finite-difference fallback.
pub const FD_REL_STEP: f64 = 1e-6;

fn central_diff(f: impl Fn(f64) -> f64, v: f64) -> f64 {
    let h = FD_REL_STEP * v.abs().max(1e-8);
    (f(v + h) - f(v - h)) / (2.0 * h)
}

/// A utility pair together with its growth data and structural flags.
#[derive(Clone)]
pub struct UtilityModel {
    utility: Arc<dyn Utility>,
    /// Growth exponent `p` in `U1 + U2 <= K (1 + c^p + x^p)`.
    pub p: f64,
    pub growth_k: f64,
    pub inada: InadaCase,
    pub divergence: Option<DivergentSide>,
    /// `U1(t, c, x) = U1c(t, c) + U1x(t, x)`.
    pub separable: bool,
}

impl fmt::Debug for UtilityModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("UtilityModel")
            .field("p", &self.p)
            .field("growth_k", &self.growth_k)
            .field("inada", &self.inada)
            .field("divergence", &self.divergence)
            .field("separable", &self.separable)
            .finish()
    }
}

impl UtilityModel {
    /// Built-in power family. Growth constant and flags are derived from
    /// the weights sampled over `[0, horizon]`.
    pub fn power(family: PowerUtility, horizon: f64) -> Result<Self, ModelError> {
        let p = family.p;
        if !(p > 0.0 && p < 1.0) {
            return Err(ModelError::InvalidParameter(format!(
                "power p must lie in (0, 1), got {p}"
            )));
        }
        let max_c = family.a_c.sampled_max(horizon, 256);
        let max_x = family.a_x.sampled_max(horizon, 256);
        if family.a_terminal < 0.0 || max_c < 0.0 || max_x < 0.0 {
            return Err(ModelError::InvalidParameter(
                "power weights must be nonnegative".into(),
            ));
        }
        let growth_k = (max_c.max(max_x + family.a_terminal) / p).max(f64::MIN_POSITIVE);
        let inada = if family.a_c.is_zero() {
            InadaCase::NoConsumption
        } else {
            InadaCase::Inada
        };
        let divergence = match (!family.a_c.is_zero(), family.a_terminal > 0.0) {
            (true, true) => Some(DivergentSide::Both),
            (true, false) => Some(DivergentSide::Consumption),
            (false, true) => Some(DivergentSide::TerminalWealth),
            (false, false) => None,
        };
        Ok(Self {
            utility: Arc::new(family),
            p,
            growth_k,
            inada,
            divergence,
            separable: true,
        })
    }

    /// Custom utility with caller-certified growth data.
    pub fn custom(
        utility: Arc<dyn Utility>,
        p: f64,
        growth_k: f64,
        inada: InadaCase,
        divergence: Option<DivergentSide>,
        separable: bool,
    ) -> Result<Self, ModelError> {
        if !(p > 0.0 && p < 1.0) {
            return Err(ModelError::InvalidParameter(format!(
                "growth exponent must lie in (0, 1), got {p}"
            )));
        }
        if !(growth_k > 0.0) {
            return Err(ModelError::InvalidParameter(format!(
                "growth constant must be positive, got {growth_k}"
            )));
        }
        Ok(Self {
            utility,
            p,
            growth_k,
            inada,
            divergence,
            separable,
        })
    }

    pub fn utility(&self) -> &dyn Utility {
        self.utility.as_ref()
    }

    /// `p / (1 - p)`.
    pub fn q(&self) -> f64 {
        self.p / (1.0 - self.p)
    }

    pub fn u1(&self, t: f64, c: f64, x: f64) -> f64 {
        self.utility.u1(t, c, x)
    }

    pub fn u2(&self, x: f64) -> f64 {
        self.utility.u2(x)
    }

    pub fn u1_c(&self, t: f64, c: f64, x: f64) -> f64 {
        self.utility
            .u1_c(t, c, x)
            .unwrap_or_else(|| central_diff(|v| self.utility.u1(t, v, x), c))
    }

    pub fn u1_cc(&self, t: f64, c: f64, x: f64) -> f64 {
        self.utility
            .u1_cc(t, c, x)
            .unwrap_or_else(|| central_diff(|v| self.u1_c(t, v, x), c))
    }

    pub fn u1_x(&self, t: f64, c: f64, x: f64) -> f64 {
        self.utility
            .u1_x(t, c, x)
            .unwrap_or_else(|| central_diff(|v| self.utility.u1(t, c, v), x))
    }

    pub fn u2_x(&self, x: f64) -> f64 {
        self.utility
            .u2_x(x)
            .unwrap_or_else(|| central_diff(|v| self.utility.u2(v), x))
    }

    pub fn u2_xx(&self, x: f64) -> f64 {
        self.utility
            .u2_xx(x)
            .unwrap_or_else(|| central_diff(|v| self.u2_x(v), x))
    }

    pub fn depends_on_wealth(&self) -> bool {
        self.utility.depends_on_wealth()
    }

    pub fn is_zero(&self) -> bool {
        self.utility.is_zero()
    }

    pub fn as_power(&self) -> Option<&PowerUtility> {
        self.utility.as_power()
    }

    /// True when some derivative used by the transforms comes from the
    /// finite-difference fallback.
    pub fn uses_fd_fallback(&self) -> bool {
        let probe = (0.0, 1.0, 1.0);
        self.utility.u1_c(probe.0, probe.1, probe.2).is_none()
            || self.utility.u1_x(probe.0, probe.1, probe.2).is_none()
            || self.utility.u2_x(1.0).is_none()
    }
}

/// Cartesian probe set `times x consumptions x wealths`.
#[derive(Debug, Clone)]
pub struct ProbeGrid {
    pub times: Vec<f64>,
    pub consumptions: Vec<f64>,
    pub wealths: Vec<f64>,
}

impl ProbeGrid {
    /// `n` times evenly spaced in `[0, T)` and `n` geometric levels in
    /// `[0.01, 100]` for both consumption and wealth.
    pub fn standard(horizon: f64, n: usize) -> Self {
        let times = (0..n).map(|k| horizon * k as f64 / n as f64).collect();
        let levels: Vec<f64> = (0..n)
            .map(|k| 0.01 * 1e4f64.powf(k as f64 / (n.max(2) - 1) as f64))
            .collect();
        Self {
            times,
            consumptions: levels.clone(),
            wealths: levels,
        }
    }

    fn validate(&self, horizon: f64) -> Result<(), ModelError> {
        if self.times.is_empty() || self.consumptions.is_empty() || self.wealths.is_empty() {
            return Err(ModelError::InvalidParameter(
                "probe grid must be nonempty".into(),
            ));
        }
        if self.times.iter().any(|&t| !(0.0..horizon).contains(&t)) {
            return Err(ModelError::InvalidParameter(
                "probe times must lie in [0, T)".into(),
            ));
        }
        if self
            .consumptions
            .iter()
            .chain(&self.wealths)
            .any(|&v| !(v > 0.0))
        {
            return Err(ModelError::InvalidParameter(
                "probe levels must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub violation: Option<String>,
    #[serde(skip)]
    pub error: Option<ModelError>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ValidationReport {
    pub checks: Vec<CheckOutcome>,
    /// Derivatives were taken by finite differences for at least one check.
    pub finite_difference_fallback: bool,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    /// The first failing check as an error.
    pub fn into_result(self) -> Result<(), ModelError> {
        match self.checks.into_iter().find(|c| !c.passed) {
            Some(c) => Err(c
                .error
                .unwrap_or(ModelError::InvalidParameter(c.name.into()))),
            None => Ok(()),
        }
    }
}

/// Tolerance for sampled concavity and monotonicity checks.
pub const SHAPE_TOL: f64 = 1e-8;

fn outcome(name: &'static str, result: Result<(), ModelError>) -> CheckOutcome {
    match result {
        Ok(()) => CheckOutcome {
            name,
            passed: true,
            violation: None,
            error: None,
        },
        Err(e) => CheckOutcome {
            name,
            passed: false,
            violation: Some(e.to_string()),
            error: Some(e),
        },
    }
}

fn sorted(v: &[f64]) -> Vec<f64> {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s.dedup();
    s
}

/// Checks one sampled line `v(s_0), v(s_1), ...` for monotonicity and
/// concavity. Returns the index of the first violation and a description.
fn check_line(s: &[f64], v: &[f64]) -> Option<(usize, String, bool)> {
    for i in 1..s.len() {
        if v[i] - v[i - 1] < -SHAPE_TOL * (1.0 + v[i].abs()) {
            return Some((i, "decreasing".into(), false));
        }
    }
    for i in 1..s.len().saturating_sub(1) {
        let left = (v[i] - v[i - 1]) / (s[i] - s[i - 1]);
        let right = (v[i + 1] - v[i]) / (s[i + 1] - s[i]);
        let second = (right - left) / (0.5 * (s[i + 1] - s[i - 1]));
        if second > SHAPE_TOL * (1.0 + v[i].abs()) {
            return Some((i, format!("second difference {second:e} > 0"), true));
        }
    }
    None
}

/// Runs every sampled assumption check. The report never short-circuits:
/// all checks are evaluated and reported.
pub fn validate_model(
    market: &MarketModel,
    utility: &UtilityModel,
    probes: &ProbeGrid,
) -> ValidationReport {
    let mut checks = Vec::new();
    if let Err(e) = probes.validate(market.horizon) {
        checks.push(outcome("probe_grid", Err(e)));
        return ValidationReport {
            checks,
            finite_difference_fallback: utility.uses_fd_fallback(),
        };
    }
    let times = sorted(&probes.times);
    let cs = sorted(&probes.consumptions);
    let xs = sorted(&probes.wealths);
    let horizon = market.horizon;

    let mut market_times: Vec<f64> = (0..=100).map(|k| horizon * k as f64 / 100.0).collect();
    market_times.extend(&times);
    market_times.sort_by(f64::total_cmp);
    checks.push(outcome(
        "market_positivity",
        market.check_positivity(market_times.iter().copied()),
    ));
    checks.push(outcome(
        "sharpe_finite",
        market_times.iter().try_for_each(|&t| {
            let (th, la) = (market.theta(t), market.lambda(t));
            if th.is_finite() && la.is_finite() && th > 0.0 && la > 0.0 {
                Ok(())
            } else {
                Err(ModelError::NonPositiveVolatility { t })
            }
        }),
    ));

    checks.push(outcome(
        "normalization",
        (|| {
            for &t in &times {
                let v = utility.u1(t, 0.0, 0.0);
                if v.abs() > 1e-12 {
                    return Err(ModelError::NormalizationViolation {
                        t,
                        c: 0.0,
                        x: 0.0,
                        value: v,
                    });
                }
            }
            let v = utility.u2(0.0);
            if v.abs() > 1e-12 {
                return Err(ModelError::NormalizationViolation {
                    t: horizon,
                    c: 0.0,
                    x: 0.0,
                    value: v,
                });
            }
            Ok(())
        })(),
    ));

    checks.push(outcome(
        "shape_u1",
        (|| {
            for &t in &times {
                for &x in &xs {
                    let v: Vec<f64> = cs.iter().map(|&c| utility.u1(t, c, x)).collect();
                    if let Some((i, detail, concave)) = check_line(&cs, &v) {
                        let (c, detail) = (cs[i], format!("in c: {detail}"));
                        return Err(if concave {
                            ModelError::ConcavityViolation { t, c, x, detail }
                        } else {
                            ModelError::MonotonicityViolation { t, c, x, detail }
                        });
                    }
                }
                for &c in &cs {
                    let v: Vec<f64> = xs.iter().map(|&x| utility.u1(t, c, x)).collect();
                    if let Some((i, detail, concave)) = check_line(&xs, &v) {
                        let (x, detail) = (xs[i], format!("in x: {detail}"));
                        return Err(if concave {
                            ModelError::ConcavityViolation { t, c, x, detail }
                        } else {
                            ModelError::MonotonicityViolation { t, c, x, detail }
                        });
                    }
                }
                // Joint concavity: midpoint test across diagonal neighbours.
                for i in 0..cs.len().saturating_sub(1) {
                    for j in 0..xs.len().saturating_sub(1) {
                        let (c0, c1, x0, x1) = (cs[i], cs[i + 1], xs[j + 1], xs[j]);
                        let mid = utility.u1(t, 0.5 * (c0 + c1), 0.5 * (x0 + x1));
                        let avg = 0.5 * (utility.u1(t, c0, x0) + utility.u1(t, c1, x1));
                        if mid < avg - SHAPE_TOL * (1.0 + avg.abs()) {
                            return Err(ModelError::ConcavityViolation {
                                t,
                                c: c0,
                                x: x0,
                                detail: "joint midpoint concavity".into(),
                            });
                        }
                    }
                }
            }
            Ok(())
        })(),
    ));

    checks.push(outcome(
        "shape_u2",
        (|| {
            let v: Vec<f64> = xs.iter().map(|&x| utility.u2(x)).collect();
            if let Some((i, detail, concave)) = check_line(&xs, &v) {
                let (x, detail) = (xs[i], format!("U2: {detail}"));
                return Err(if concave {
                    ModelError::ConcavityViolation {
                        t: horizon,
                        c: 0.0,
                        x,
                        detail,
                    }
                } else {
                    ModelError::MonotonicityViolation {
                        t: horizon,
                        c: 0.0,
                        x,
                        detail,
                    }
                });
            }
            Ok(())
        })(),
    ));

    checks.push(outcome(
        "growth",
        (|| {
            for &t in &times {
                for &c in &cs {
                    for &x in &xs {
                        let lhs = utility.u1(t, c, x) + utility.u2(x);
                        let rhs = utility.growth_k * (1.0 + c.powf(utility.p) + x.powf(utility.p));
                        if lhs > rhs * (1.0 + 1e-12) {
                            return Err(ModelError::GrowthBoundViolation { t, c, x });
                        }
                    }
                }
            }
            Ok(())
        })(),
    ));

    checks.push(outcome(
        "inada",
        (|| {
            for &t in &times {
                for &x in &xs {
                    match utility.inada {
                        InadaCase::Inada => {
                            let mc: Vec<f64> = cs.iter().map(|&c| utility.u1_c(t, c, x)).collect();
                            if mc.windows(2).any(|w| !(w[1] < w[0]))
                                || mc.iter().any(|&m| !(m > 0.0))
                            {
                                return Err(ModelError::InadaViolation {
                                    t,
                                    x,
                                    detail: "U1_c not positive and strictly decreasing".into(),
                                });
                            }
                            let mid = utility.u1_c(t, 1.0, x);
                            if !(utility.u1_c(t, 1e-100, x) > 10.0 * mid) {
                                return Err(ModelError::InadaViolation {
                                    t,
                                    x,
                                    detail: "U1_c(0+) not large".into(),
                                });
                            }
                            if !(utility.u1_c(t, 1e100, x) < 0.1 * mid) {
                                return Err(ModelError::InadaViolation {
                                    t,
                                    x,
                                    detail: "U1_c(+inf) not small".into(),
                                });
                            }
                        }
                        InadaCase::NoConsumption => {
                            let base = utility.u1(t, 0.0, x);
                            for &c in &cs {
                                if (utility.u1(t, c, x) - base).abs() > 1e-12 * (1.0 + base.abs()) {
                                    return Err(ModelError::InadaViolation {
                                        t,
                                        x,
                                        detail: "declared consumption-free but U1 varies in c"
                                            .into(),
                                    });
                                }
                            }
                        }
                    }
                }
            }
            Ok(())
        })(),
    ));

    checks.push(outcome(
        "divergence_declared",
        if utility.divergence.is_some() || utility.is_zero() {
            Ok(())
        } else {
            Err(ModelError::MissingDivergence)
        },
    ));

    ValidationReport {
        checks,
        finite_difference_fallback: utility.uses_fd_fallback(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sqrt_model() -> (MarketModel, UtilityModel) {
        let market = MarketModel::constant(0.3, 0.5, 1.0).unwrap();
        let utility = UtilityModel::power(PowerUtility::new(0.5, 1.0, 1.0, 1.0), 1.0).unwrap();
        (market, utility)
    }

    #[test]
    fn sqrt_model_passes_on_10_cubed_probe_grid() {
        let (market, utility) = sqrt_model();
        // 2 sqrt(c) + 2 sqrt(x) + 2 sqrt(x) <= 4 (1 + sqrt(c) + sqrt(x))
        assert_eq!(utility.growth_k, 4.0);
        let report = validate_model(&market, &utility, &ProbeGrid::standard(1.0, 10));
        assert!(report.passed(), "{report:?}");
        assert!(!report.finite_difference_fallback);
    }

    #[test]
    fn zero_model_is_admissible() {
        let market = MarketModel::constant(0.3, 0.5, 1.0).unwrap();
        let utility = UtilityModel::power(PowerUtility::new(0.5, 0.0, 0.0, 0.0), 1.0).unwrap();
        let report = validate_model(&market, &utility, &ProbeGrid::standard(1.0, 10));
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn vanishing_volatility_fails_at_horizon() {
        let market =
            MarketModel::new(Curve::constant(0.3), Curve::function(|t| 1.0 - t), 1.0, 1.0).unwrap();
        let (_, utility) = sqrt_model();
        let report = validate_model(&market, &utility, &ProbeGrid::standard(1.0, 10));
        match report.into_result() {
            Err(ModelError::NonPositiveVolatility { t }) => assert_eq!(t, 1.0),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn convex_utility_is_rejected() {
        let market = MarketModel::constant(0.3, 0.5, 1.0).unwrap();
        let custom = ClosureUtility::new(|_, c, _| c * c, |x| x.sqrt());
        let utility = UtilityModel::custom(
            Arc::new(custom),
            0.5,
            1e9,
            InadaCase::Inada,
            Some(DivergentSide::Both),
            true,
        )
        .unwrap();
        let err = validate_model(&market, &utility, &ProbeGrid::standard(1.0, 5))
            .into_result()
            .unwrap_err();
        assert!(
            matches!(err, ModelError::ConcavityViolation { .. }),
            "{err:?}"
        );
    }

    #[test]
    fn growth_violation_names_probe() {
        let market = MarketModel::constant(0.3, 0.5, 1.0).unwrap();
        let custom = ClosureUtility::new(|_, c, _| 2.0 * c.sqrt(), |x| 2.0 * x.sqrt());
        let utility = UtilityModel::custom(
            Arc::new(custom),
            0.5,
            0.5,
            InadaCase::Inada,
            Some(DivergentSide::Both),
            true,
        )
        .unwrap();
        let report = validate_model(&market, &utility, &ProbeGrid::standard(1.0, 5));
        assert!(report.finite_difference_fallback);
        let err = report.into_result().unwrap_err();
        assert!(
            matches!(err, ModelError::GrowthBoundViolation { .. }),
            "{err:?}"
        );
    }

    #[test]
    fn normalization_violation_detected() {
        let market = MarketModel::constant(0.3, 0.5, 1.0).unwrap();
        let custom = ClosureUtility::new(|_, c, _| 1.0 + c.sqrt(), |x| x.sqrt());
        let utility = UtilityModel::custom(
            Arc::new(custom),
            0.5,
            10.0,
            InadaCase::Inada,
            Some(DivergentSide::Both),
            true,
        )
        .unwrap();
        let err = validate_model(&market, &utility, &ProbeGrid::standard(1.0, 5))
            .into_result()
            .unwrap_err();
        assert!(
            matches!(err, ModelError::NormalizationViolation { .. }),
            "{err:?}"
        );
    }

    #[test]
    fn validation_is_deterministic_and_sharpe_is_pointwise() {
        let (market, utility) = sqrt_model();
        let grid = ProbeGrid::standard(1.0, 6);
        let a = serde_json::to_string(&validate_model(&market, &utility, &grid)).unwrap();
        let b = serde_json::to_string(&validate_model(&market, &utility, &grid)).unwrap();
        assert_eq!(a, b);
        let m = MarketModel::new(
            Curve::function(|t| 0.2 + 0.1 * t),
            Curve::function(|t| 0.4 + 0.05 * t),
            1.0,
            0.5,
        )
        .unwrap();
        for k in 0..=20 {
            let t = k as f64 / 20.0;
            let (b, s) = (0.2 + 0.1 * t, 0.4 + 0.05 * t);
            assert_eq!(m.theta(t), b / s);
            assert!((m.lambda(t) - b * b / (2.0 * s * s)).abs() <= 1e-16);
        }
    }
}
