//! The two reductions to a fixed-horizon problem with utility on current
//! wealth: an independent random horizon, and the liquid/illiquid market
//! where the illiquid asset trades only at random times.

use std::sync::Arc;

use rand::Rng;
use serde::Serialize;
use thiserror::Error;

use crate::curve::Curve;
use crate::dual_solver::{
    solve_dual, BoundaryClosure, DualError, DualSolution, LogGrid, SolverSettings,
};
use crate::model::{
    ClosureUtility, DivergentSide, InadaCase, MarketModel, ModelError, PowerUtility, Utility,
    UtilityModel,
};
use crate::numeric::{golden_max, mean_and_std_error};
use crate::primal::{legendre_min, PrimalError};
use crate::quadrature::NormalRule;
use crate::simulate::{
    draw_normals, map_indices, path_rng, FeedbackPolicy, SimConfig, SimError, StepGrid,
};
use crate::transforms::{ConjugateBundle, TransformError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ApplicationError {
    #[error("horizon density is negative ({value:e}) at t = {t}")]
    NegativeWeight { t: f64, value: f64 },
    #[error("invalid horizon law: {0}")]
    InvalidLaw(String),
    #[error("invalid illiquid parameters: {0}")]
    InvalidParams(String),
    #[error("discount {beta} does not exceed k_Yp = {k_yp} plus the margin {margin}")]
    DiscountTooSmall { beta: f64, k_yp: f64, margin: f64 },
    #[error("quadrature of order {order} moves by {relative:e} when doubled")]
    QuadratureUnstable { order: usize, relative: f64 },
    #[error("K_V iteration did not converge in {} steps (last {:?})", trace.len(), trace.last())]
    NoConvergence { trace: Vec<f64> },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Transform(#[from] TransformError),
    #[error(transparent)]
    Dual(#[from] DualError),
    #[error(transparent)]
    Primal(#[from] PrimalError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

/// Law of the exit time `tau`, independent of the market noise.
#[derive(Debug, Clone)]
pub enum HorizonLaw {
    /// `tau = inf`.
    Never,
    Exponential {
        rate: f64,
    },
    /// CDF and density on `[0, T]`.
    Custom {
        cdf: Curve,
        density: Curve,
    },
}

const LAW_PROBES: usize = 512;
const LAW_TOL: f64 = 1e-6;

impl HorizonLaw {
    pub fn cdf(&self, t: f64) -> f64 {
        match self {
            HorizonLaw::Never => 0.0,
            HorizonLaw::Exponential { rate } => -(-rate * t).exp_m1(),
            HorizonLaw::Custom { cdf, .. } => cdf.eval(t),
        }
    }

    pub fn density(&self, t: f64) -> f64 {
        match self {
            HorizonLaw::Never => 0.0,
            HorizonLaw::Exponential { rate } => rate * (-rate * t).exp(),
            HorizonLaw::Custom { density, .. } => density.eval(t),
        }
    }

    pub fn survival(&self, t: f64) -> f64 {
        match self {
            HorizonLaw::Never => 1.0,
            HorizonLaw::Exponential { rate } => (-rate * t).exp(),
            HorizonLaw::Custom { cdf, .. } => 1.0 - cdf.eval(t),
        }
    }

    /// `F^-1(u)`, or `inf` when `tau > horizon`.
    pub fn sample(&self, u: f64, horizon: f64) -> f64 {
        match self {
            HorizonLaw::Never => f64::INFINITY,
            HorizonLaw::Exponential { rate } => {
                let tau = -(-u).ln_1p() / rate;
                if tau > horizon {
                    f64::INFINITY
                } else {
                    tau
                }
            }
            HorizonLaw::Custom { cdf, .. } => {
                if u >= cdf.eval(horizon) {
                    return f64::INFINITY;
                }
                if u < cdf.eval(0.0) {
                    return 0.0;
                }
                let (mut lo, mut hi) = (0.0, horizon);
                for _ in 0..80 {
                    let mid = 0.5 * (lo + hi);
                    if cdf.eval(mid) >= u {
                        hi = mid;
                    } else {
                        lo = mid;
                    }
                }
                hi
            }
        }
    }

    /// Checks the law on `[0, horizon]`: `F` in `[0, 1]` and nondecreasing,
    /// `f >= 0`, and `int_0^t f = F(t) - F(0)` by Simpson's rule.
    pub fn validate(&self, horizon: f64) -> Result<(), ApplicationError> {
        match self {
            HorizonLaw::Never => Ok(()),
            HorizonLaw::Exponential { rate } => {
                if rate.is_finite() && *rate > 0.0 {
                    Ok(())
                } else {
                    Err(ApplicationError::InvalidLaw(format!(
                        "exponential rate must be positive, got {rate}"
                    )))
                }
            }
            HorizonLaw::Custom { .. } => {
                let h = horizon / LAW_PROBES as f64;
                for k in 0..=LAW_PROBES {
                    let t = k as f64 * h;
                    let dens = self.density(t);
                    if dens < 0.0 {
                        return Err(ApplicationError::NegativeWeight { t, value: dens });
                    }
                }
                let f0 = self.cdf(0.0);
                let mut prev = f0;
                let mut integral = 0.0;
                for k in 0..=LAW_PROBES {
                    let t = k as f64 * h;
                    let (cdf, dens) = (self.cdf(t), self.density(t));
                    if !(0.0..=1.0).contains(&cdf) || cdf < prev - 1e-12 {
                        return Err(ApplicationError::InvalidLaw(format!(
                            "F({t}) = {cdf} breaks monotonicity or [0, 1]"
                        )));
                    }
                    prev = cdf;
                    if k % 2 == 0 && k > 0 {
                        let a = self.density(t - 2.0 * h);
                        let m = self.density(t - h);
                        integral += h / 3.0 * (a + 4.0 * m + dens);
                        if (integral - (cdf - f0)).abs() > LAW_TOL {
                            return Err(ApplicationError::InvalidLaw(format!(
                                "density integrates to {integral} on [0, {t}] but F grows by {}",
                                cdf - f0
                            )));
                        }
                    }
                }
                Ok(())
            }
        }
    }

    fn survival_curve(&self) -> Curve {
        match self {
            HorizonLaw::Never => Curve::constant(1.0),
            _ => {
                let law = self.clone();
                Curve::function(move |t| law.survival(t))
            }
        }
    }

    fn density_curve(&self) -> Curve {
        match self {
            HorizonLaw::Never => Curve::constant(0.0),
            _ => {
                let law = self.clone();
                Curve::function(move |t| law.density(t))
            }
        }
    }
}

pub type Payoff = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;

/// Running payoff `G1(t, c)` and stopping payoff `G2(t, x)`.
#[derive(Clone)]
pub enum HorizonPayoff {
    /// `G1 = g1(t) c^p / p`, `G2 = g2(t) x^p / p`.
    Power {
        p: f64,
        running: Curve,
        stopped: Curve,
    },
    /// Arbitrary concave payoffs with growth exponent `p` and constant
    /// `growth_k`; `G1` must satisfy the Inada conditions in `c`.
    Custom {
        running: Payoff,
        stopped: Payoff,
        p: f64,
        growth_k: f64,
    },
}

impl HorizonPayoff {
    pub fn g1(&self, t: f64, c: f64) -> f64 {
        match self {
            HorizonPayoff::Power { p, running, .. } => running.eval(t) * c.powf(*p) / p,
            HorizonPayoff::Custom { running, .. } => running(t, c),
        }
    }

    pub fn g2(&self, t: f64, x: f64) -> f64 {
        match self {
            HorizonPayoff::Power { p, stopped, .. } => stopped.eval(t) * x.powf(*p) / p,
            HorizonPayoff::Custom { stopped, .. } => stopped(t, x),
        }
    }
}

#[derive(Clone)]
pub struct RandomHorizonSpec {
    pub payoff: HorizonPayoff,
    pub law: HorizonLaw,
    pub horizon: f64,
}

/// Fixed-horizon utility with `U1 = G1 (1 - F) + G2 f` and
/// `U2 = (1 - F(T)) G2(T, .)`.
pub fn random_horizon_transform(
    spec: &RandomHorizonSpec,
) -> Result<UtilityModel, ApplicationError> {
    spec.law.validate(spec.horizon)?;
    let horizon = spec.horizon;
    let terminal_weight = spec.law.survival(horizon);
    match &spec.payoff {
        HorizonPayoff::Power {
            p,
            running,
            stopped,
        } => {
            let a_c = running.times(&spec.law.survival_curve());
            let a_x = stopped.times(&spec.law.density_curve());
            let a_t = terminal_weight * stopped.eval(horizon);
            Ok(UtilityModel::power(
                PowerUtility::new(*p, a_c, a_x, a_t),
                horizon,
            )?)
        }
        HorizonPayoff::Custom {
            running,
            stopped,
            p,
            growth_k,
        } => {
            let (g1, g2, law) = (running.clone(), stopped.clone(), spec.law.clone());
            let u1 = move |t: f64, c: f64, x: f64| {
                g1(t, c) * law.survival(t) + g2(t, x) * law.density(t)
            };
            let g2 = stopped.clone();
            let u2 = move |x: f64| terminal_weight * g2(horizon, x);
            let utility = ClosureUtility::new(u1, u2);
            Ok(UtilityModel::custom(
                Arc::new(utility),
                *p,
                *growth_k,
                InadaCase::Inada,
                Some(DivergentSide::Consumption),
                true,
            )?)
        }
    }
}

/// Paired estimates of the stopped functional
/// `E[int_0^{tau ^ T} G1 dt + G2(tau ^ T, X)]` and of its fixed-horizon
/// rewriting, computed on the same wealth paths.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HorizonComparison {
    pub direct: f64,
    pub direct_se: f64,
    pub transformed: f64,
    pub transformed_se: f64,
    /// `sqrt(se_direct^2 + se_transformed^2)`.
    pub combined_se: f64,
    /// Standard error of the per-path difference.
    pub paired_se: f64,
    pub n_paths: usize,
    /// Paths with `tau <= T`.
    pub n_stopped: usize,
}

impl HorizonComparison {
    pub fn agree(&self, k: f64) -> bool {
        (self.direct - self.transformed).abs() <= k * self.combined_se
    }
}

/// Stream offset of the exit-time draws; the Brownian increments of path
/// `i` use stream `i`, its exit time stream `i + HORIZON_STREAM`.
const HORIZON_STREAM: u64 = 1 << 63;

pub fn random_horizon_mc(
    spec: &RandomHorizonSpec,
    market: &MarketModel,
    policy: &dyn FeedbackPolicy,
    x0: f64,
    cfg: &SimConfig,
) -> Result<HorizonComparison, ApplicationError> {
    spec.law.validate(spec.horizon)?;
    if cfg.antithetic {
        return Err(
            SimError::InvalidConfig("the horizon comparison draws plain paths".into()).into(),
        );
    }
    let steps = cfg.steps(spec.horizon)?;
    let grid = StepGrid::new(0.0, market, steps);
    let payoff = &spec.payoff;
    let law = &spec.law;
    let samples: Vec<(f64, f64, bool)> = map_indices(cfg.n_paths, |path| {
        let normals = draw_normals(cfg.seed, path as u64, steps);
        let u: f64 = path_rng(cfg.seed, path as u64 + HORIZON_STREAM).random();
        let tau = law.sample(u, spec.horizon);
        let mut x = x0.max(0.0);
        let (mut direct, mut transformed) = (0.0, 0.0);
        let mut stopped = false;
        for (k, &t) in grid.times.iter().enumerate() {
            let (c, pi) = if x > 0.0 {
                policy.controls(t, x)
            } else {
                (0.0, 0.0)
            };
            let g1 = payoff.g1(t, c);
            transformed += (g1 * law.survival(t) + payoff.g2(t, x) * law.density(t)) * grid.dt;
            if !stopped {
                if tau < t + grid.dt {
                    direct += g1 * (tau - t).max(0.0) + payoff.g2(tau, x);
                    stopped = true;
                } else {
                    direct += g1 * grid.dt;
                }
            }
            if x > 0.0 {
                x += (grid.drift[k] * pi - c) * grid.dt
                    + grid.vol[k] * pi * normals[k] * grid.sqrt_dt;
                if !(x > 0.0) {
                    x = 0.0;
                }
            }
        }
        let terminal = payoff.g2(spec.horizon, x);
        transformed += law.survival(spec.horizon) * terminal;
        if !stopped {
            direct += terminal;
        }
        (direct, transformed, stopped)
    });
    if samples
        .iter()
        .any(|s| !(s.0.is_finite() && s.1.is_finite()))
    {
        let path = samples
            .iter()
            .position(|s| !(s.0.is_finite() && s.1.is_finite()))
            .unwrap_or(0);
        return Err(SimError::NaNPath { path }.into());
    }
    let direct: Vec<f64> = samples.iter().map(|s| s.0).collect();
    let transformed: Vec<f64> = samples.iter().map(|s| s.1).collect();
    let diff: Vec<f64> = samples.iter().map(|s| s.0 - s.1).collect();
    let (d, d_se) = mean_and_std_error(&direct);
    let (tr, tr_se) = mean_and_std_error(&transformed);
    let (_, paired_se) = mean_and_std_error(&diff);
    Ok(HorizonComparison {
        direct: d,
        direct_se: d_se,
        transformed: tr,
        transformed_se: tr_se,
        combined_se: d_se.hypot(tr_se),
        paired_se,
        n_paths: cfg.n_paths,
        n_stopped: samples.iter().filter(|s| s.2).count(),
    })
}

/// Liquid asset `L`, illiquid asset `I` traded at the arrival times, and the
/// investor's discount `beta`.
#[derive(Debug, Clone)]
pub struct IlliquidParams {
    pub b_l: f64,
    pub sigma_l: f64,
    pub b_i: f64,
    pub sigma_i: f64,
    pub rho: f64,
    pub p: f64,
    pub beta: f64,
    /// Law of the first trading time of `I`.
    pub arrival: HorizonLaw,
    /// Required excess of `beta` over `k_Yp`.
    pub margin: f64,
}

/// The reduced one-dimensional problem on `Z = X / Y` under the measure
/// change, plus the law of the illiquid growth factor `J_t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IlliquidReduction {
    pub k_yp: f64,
    /// Drift of the reduced state, `b_L - rho sigma_I sigma_L (1 - p)`.
    pub b_eff: f64,
    pub sigma: f64,
    /// `beta - k_Yp`.
    pub discount: f64,
    /// `log J_t ~ N(log_mean_rate t, log_var_rate t)`.
    pub log_mean_rate: f64,
    pub log_var_rate: f64,
}

impl IlliquidReduction {
    pub fn market(&self, horizon: f64) -> Result<MarketModel, ModelError> {
        MarketModel::constant(self.b_eff, self.sigma, horizon)
    }
}

impl IlliquidParams {
    fn check(&self) -> Result<(), ApplicationError> {
        let positive = [
            ("b_L", self.b_l),
            ("sigma_L", self.sigma_l),
            ("b_I", self.b_i),
            ("sigma_I", self.sigma_i),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(ApplicationError::InvalidParams(format!(
                    "{name} must be positive, got {v}"
                )));
            }
        }
        if !(self.rho.abs() < 1.0) {
            return Err(ApplicationError::InvalidParams(format!(
                "need |rho| < 1, got {}",
                self.rho
            )));
        }
        if !(self.p > 0.0 && self.p < 1.0) {
            return Err(ApplicationError::InvalidParams(format!(
                "p must lie in (0, 1), got {}",
                self.p
            )));
        }
        if !(self.beta > 0.0) {
            return Err(ApplicationError::InvalidParams(format!(
                "beta must be positive, got {}",
                self.beta
            )));
        }
        Ok(())
    }

    /// Constant of the liquid-only problem on an infinite horizon,
    /// `((1 - p) / (beta - p theta^2 / (2 (1 - p))))^(1 - p)`.
    pub fn liquid_merton_constant(&self) -> Option<f64> {
        let theta = self.b_l / self.sigma_l;
        let rate = self.beta - self.p * theta * theta / (2.0 * (1.0 - self.p));
        (rate > 0.0).then(|| ((1.0 - self.p) / rate).powf(1.0 - self.p))
    }
}

pub fn illiquid_reduction(params: &IlliquidParams) -> Result<IlliquidReduction, ApplicationError> {
    params.check()?;
    let IlliquidParams {
        b_l,
        sigma_l,
        b_i,
        sigma_i,
        rho,
        p,
        beta,
        ..
    } = *params;
    let k_yp =
        p * rho * sigma_i * b_l / sigma_l - p * (1.0 - p) * rho * rho * sigma_i * sigma_i / 2.0;
    if !(beta > k_yp + params.margin) {
        return Err(ApplicationError::DiscountTooSmall {
            beta,
            k_yp,
            margin: params.margin,
        });
    }
    Ok(IlliquidReduction {
        k_yp,
        b_eff: b_l - rho * sigma_i * sigma_l * (1.0 - p),
        sigma: sigma_l,
        discount: beta - k_yp,
        log_mean_rate: b_i - sigma_i * sigma_i / 2.0 - rho * sigma_i * b_l / sigma_l
            + rho * rho * sigma_i * sigma_i / 2.0,
        log_var_rate: sigma_i * sigma_i * (1.0 - rho * rho),
    })
}

/// `E[(x + y exp(m + s Z))^e]` for `Z ~ N(0, 1)`.
fn shifted_lognormal_power(rule: &NormalRule, x: f64, y: f64, m: f64, s: f64, e: f64) -> f64 {
    rule.expect(|z| (x + y * (m + s * z).exp()).powf(e))
}

/// `G[V](t, x, y) = E[V(x + y J_t)]` for `V(r) = K_V r^p / p`.
pub fn liquidation_value(
    params: &IlliquidParams,
    k_v: f64,
    t: f64,
    x: f64,
    y: f64,
    quad_order: usize,
) -> Result<f64, ApplicationError> {
    if !(x >= 0.0 && y >= 0.0 && t >= 0.0) {
        return Err(ApplicationError::InvalidParams(format!(
            "need t, x, y >= 0, got ({t}, {x}, {y})"
        )));
    }
    let red = illiquid_reduction(params)?;
    let p = params.p;
    if y == 0.0 {
        return Ok(k_v * x.powf(p) / p);
    }
    let (m, s) = (red.log_mean_rate * t, (red.log_var_rate * t).sqrt());
    let rule = |order| {
        NormalRule::new(order).ok_or_else(|| {
            ApplicationError::InvalidParams(format!("quadrature order {order} is below 2"))
        })
    };
    let base = shifted_lognormal_power(&rule(quad_order)?, x, y, m, s, p);
    let doubled = shifted_lognormal_power(&rule(2 * quad_order)?, x, y, m, s, p);
    let relative = (doubled - base).abs() / doubled.abs().max(f64::MIN_POSITIVE);
    if relative > 1e-6 {
        return Err(ApplicationError::QuadratureUnstable {
            order: quad_order,
            relative,
        });
    }
    Ok(k_v / p * base)
}

/// Plain Monte Carlo of `G[V](t, x, y)`: `(mean, standard error)`.
pub fn liquidation_value_mc(
    params: &IlliquidParams,
    k_v: f64,
    t: f64,
    x: f64,
    y: f64,
    n: usize,
    seed: u64,
) -> Result<(f64, f64), ApplicationError> {
    let red = illiquid_reduction(params)?;
    let (m, s) = (red.log_mean_rate * t, (red.log_var_rate * t).sqrt());
    let mut rng = path_rng(seed, 0);
    let p = params.p;
    let samples: Vec<f64> = (0..n)
        .map(|_| {
            let z: f64 = rng.sample(rand_distr::StandardNormal);
            k_v / p * (x + y * (m + s * z).exp()).powf(p)
        })
        .collect();
    Ok(mean_and_std_error(&samples))
}

/// Running utility of the reduced problem on `Z`: the random-horizon
/// composite of `G1 = e^{-dt} c^p / p` and `G2 = e^{-dt} G[V](t, z, 1)`.
struct ReducedUtility {
    p: f64,
    discount: f64,
    law: HorizonLaw,
    horizon: f64,
    k_v: f64,
    log_mean_rate: f64,
    log_var_rate: f64,
    rule: NormalRule,
}

impl ReducedUtility {
    fn running_weight(&self, t: f64) -> f64 {
        (-self.discount * t).exp() * self.law.survival(t)
    }

    fn stopped_weight(&self, t: f64) -> f64 {
        (-self.discount * t).exp() * self.law.density(t)
    }

    fn terminal_weight(&self) -> f64 {
        (-self.discount * self.horizon).exp() * self.law.survival(self.horizon)
    }

    /// `K_V E[(z + J_t)^e] / p`.
    fn liquidation(&self, t: f64, z: f64, e: f64) -> f64 {
        let (m, s) = (self.log_mean_rate * t, (self.log_var_rate * t).sqrt());
        self.k_v / self.p * shifted_lognormal_power(&self.rule, z, 1.0, m, s, e)
    }

    fn g(&self, t: f64, z: f64) -> f64 {
        self.liquidation(t, z, self.p)
    }

    fn g_z(&self, t: f64, z: f64) -> f64 {
        self.p * self.liquidation(t, z, self.p - 1.0)
    }

    fn g_zz(&self, t: f64, z: f64) -> f64 {
        self.p * (self.p - 1.0) * self.liquidation(t, z, self.p - 2.0)
    }

    fn growth_k(&self) -> f64 {
        let mut k: f64 = 1.0;
        for i in 0..=64 {
            let t = self.horizon * i as f64 / 64.0;
            let weight = self.stopped_weight(t).max(self.terminal_weight());
            k = k.max(weight * self.k_v * (1.0 + self.g(t, 0.0) * self.p / self.k_v));
        }
        k / self.p
    }
}

impl Utility for ReducedUtility {
    fn u1(&self, t: f64, c: f64, x: f64) -> f64 {
        self.running_weight(t) * c.powf(self.p) / self.p + self.stopped_weight(t) * self.g(t, x)
    }

    fn u2(&self, x: f64) -> f64 {
        self.terminal_weight() * self.g(self.horizon, x)
    }

    fn u1_c(&self, t: f64, c: f64, _x: f64) -> Option<f64> {
        Some(self.running_weight(t) * c.powf(self.p - 1.0))
    }

    fn u1_cc(&self, t: f64, c: f64, _x: f64) -> Option<f64> {
        Some(self.running_weight(t) * (self.p - 1.0) * c.powf(self.p - 2.0))
    }

    fn u1_x(&self, t: f64, _c: f64, x: f64) -> Option<f64> {
        Some(self.stopped_weight(t) * self.g_z(t, x))
    }

    fn u2_x(&self, x: f64) -> Option<f64> {
        Some(self.terminal_weight() * self.g_z(self.horizon, x))
    }

    fn u2_xx(&self, x: f64) -> Option<f64> {
        Some(self.terminal_weight() * self.g_zz(self.horizon, x))
    }

    fn optimal_c(&self, t: f64, y: f64, _x: f64) -> Option<f64> {
        let a = self.running_weight(t);
        Some(if a > 0.0 {
            (a / y).powf(1.0 / (1.0 - self.p))
        } else {
            0.0
        })
    }

    fn conjugate_c(&self, t: f64, y: f64, x: f64) -> Option<f64> {
        let a = self.running_weight(t);
        let q = self.p / (1.0 - self.p);
        let c_part = if a > 0.0 {
            (1.0 - self.p) / self.p * a.powf(1.0 / (1.0 - self.p)) * y.powf(-q)
        } else {
            0.0
        };
        Some(c_part + self.stopped_weight(t) * self.g(t, x))
    }
}

/// How the initial illiquid allocation `alpha_0 / r` is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum AlphaSearch {
    /// No illiquid holding: the liquid-only problem.
    ForcedZero,
    /// Golden-section search over `alpha_0 / r`, compared with the
    /// liquid-only candidate.
    Golden { tol: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KvSettings {
    pub y_min: f64,
    pub y_max: f64,
    pub n_y: usize,
    pub n_t: usize,
    /// Horizon chosen so that `exp(-discount T) = truncation`.
    pub truncation: f64,
    pub max_iter: usize,
    pub tol: f64,
    pub alpha: AlphaSearch,
    pub quad_order: usize,
    pub initial: f64,
    /// Combine solves with `n_t` and `2 n_t` steps as `2 V_fine - V_coarse`.
    pub time_extrapolation: bool,
    pub solver: SolverSettings,
}

impl Default for KvSettings {
    fn default() -> Self {
        Self {
            y_min: 1e-3,
            y_max: 1e3,
            n_y: 400,
            n_t: 400,
            truncation: 1e-4,
            max_iter: 100,
            tol: 1e-6,
            alpha: AlphaSearch::Golden { tol: 1e-3 },
            quad_order: 24,
            initial: 1.0,
            time_extrapolation: true,
            solver: SolverSettings {
                sensitivity_check: false,
                ..SolverSettings::default()
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KvIterate {
    pub k_v: f64,
    /// Optimal `alpha_0 / r`.
    pub alpha_share: f64,
    /// Inner value with no illiquid holding.
    pub liquid_value: f64,
    /// Best inner value with a positive illiquid holding.
    pub mixed_value: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KvOutcome {
    pub k_v: f64,
    pub trace: Vec<KvIterate>,
    pub horizon: f64,
    /// Discounted continuation value at unit wealth beyond the truncated
    /// horizon, `truncation * K_V / p`.
    pub truncation_bound: f64,
    pub reduction: IlliquidReduction,
}

/// Value of a truncated inner problem at `t = 0`, optionally extrapolated
/// in the time step.
struct InnerValue {
    coarse: DualSolution,
    fine: Option<DualSolution>,
}

impl InnerValue {
    fn solve(
        utility: UtilityModel,
        market: &MarketModel,
        settings: &KvSettings,
        boundary: BoundaryClosure,
    ) -> Result<Self, ApplicationError> {
        let horizon = market.horizon;
        let bundle = ConjugateBundle::new(utility, horizon)?;
        let solver = SolverSettings {
            boundary,
            ..settings.solver
        };
        let run = |n_t: usize| -> Result<DualSolution, ApplicationError> {
            let grid = LogGrid::new(settings.y_min, settings.y_max, settings.n_y, n_t, horizon)?;
            Ok(solve_dual(market, &bundle, &grid, &solver)?)
        };
        let coarse = run(settings.n_t)?;
        let fine = if settings.time_extrapolation {
            Some(run(2 * settings.n_t)?)
        } else {
            None
        };
        Ok(Self { coarse, fine })
    }

    fn at(&self, x: f64) -> Result<f64, ApplicationError> {
        let coarse = legendre_min(&self.coarse, 0, x)?.value;
        match &self.fine {
            Some(fine) => Ok(2.0 * legendre_min(fine, 0, x)?.value - coarse),
            None => Ok(coarse),
        }
    }
}

/// Iterates `K_V -> p sup_{alpha_0} (inner value at unit wealth)`, each
/// inner problem being a truncated random-horizon problem solved through
/// its dual.
pub fn kv_fixed_point(
    params: &IlliquidParams,
    settings: &KvSettings,
) -> Result<KvOutcome, ApplicationError> {
    let red = illiquid_reduction(params)?;
    params.arrival.validate(1.0)?;
    let p = params.p;
    let horizon = (1.0 / settings.truncation).ln() / red.discount.min(params.beta);
    params.arrival.validate(horizon)?;
    let liquid_market = MarketModel::constant(params.b_l, params.sigma_l, horizon)?;
    let reduced_market = red.market(horizon)?;
    let rule = NormalRule::new(settings.quad_order).ok_or_else(|| {
        ApplicationError::InvalidParams(format!(
            "quadrature order {} is below 2",
            settings.quad_order
        ))
    })?;
    let mut k_v = settings.initial;
    let mut trace = Vec::new();
    for _ in 0..settings.max_iter {
        let beta = params.beta;
        let liquid_spec = RandomHorizonSpec {
            payoff: HorizonPayoff::Power {
                p,
                running: Curve::function(move |t| (-beta * t).exp()),
                stopped: Curve::function(move |t| k_v * (-beta * t).exp()),
            },
            law: params.arrival.clone(),
            horizon,
        };
        let liquid = InnerValue::solve(
            random_horizon_transform(&liquid_spec)?,
            &liquid_market,
            settings,
            BoundaryClosure::PowerLaw,
        )?;
        let liquid_value = liquid.at(1.0)?;
        let mut best = (0.0, liquid_value, None);
        if let AlphaSearch::Golden { tol } = settings.alpha {
            let reduced = ReducedUtility {
                p,
                discount: red.discount,
                law: params.arrival.clone(),
                horizon,
                k_v,
                log_mean_rate: red.log_mean_rate,
                log_var_rate: red.log_var_rate,
                rule: rule.clone(),
            };
            let growth_k = reduced.growth_k();
            let utility = UtilityModel::custom(
                Arc::new(reduced),
                p,
                growth_k,
                InadaCase::Inada,
                Some(DivergentSide::Both),
                true,
            )?;
            let inner = InnerValue::solve(
                utility,
                &reduced_market,
                settings,
                BoundaryClosure::FlatRight,
            )?;
            let objective = |a: f64| match inner.at((1.0 - a) / a) {
                Ok(v) => a.powf(p) * v,
                Err(_) => f64::NEG_INFINITY,
            };
            let (a, v) = golden_max(objective, 0.01, 0.99, tol);
            if v > best.1 {
                best = (a, v, Some(v));
            } else {
                best.2 = Some(v);
            }
        }
        let next = p * best.1;
        trace.push(KvIterate {
            k_v: next,
            alpha_share: best.0,
            liquid_value,
            mixed_value: best.2,
        });
        let converged = (next - k_v).abs() < settings.tol * k_v;
        k_v = next;
        if converged {
            return Ok(KvOutcome {
                k_v,
                trace,
                horizon,
                truncation_bound: settings.truncation * k_v / p,
                reduction: red,
            });
        }
    }
    Err(ApplicationError::NoConvergence {
        trace: trace.iter().map(|i| i.k_v).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{validate_model, ProbeGrid};
    use approx::assert_relative_eq;

    fn sample_params() -> IlliquidParams {
        IlliquidParams {
            b_l: 0.2,
            sigma_l: 0.3,
            b_i: 0.1,
            sigma_i: 0.4,
            rho: 0.5,
            p: 0.5,
            beta: 0.5,
            arrival: HorizonLaw::Exponential { rate: 0.2 },
            margin: 0.0,
        }
    }

    fn power_spec(law: HorizonLaw) -> RandomHorizonSpec {
        RandomHorizonSpec {
            payoff: HorizonPayoff::Power {
                p: 0.5,
                running: Curve::constant(1.0),
                stopped: Curve::constant(1.0),
            },
            law,
            horizon: 1.0,
        }
    }

    #[test]
    fn no_exit_is_the_identity_transform() {
        let u = random_horizon_transform(&power_spec(HorizonLaw::Never)).unwrap();
        for (t, c, x) in [(0.0, 1.0, 2.0), (0.5, 0.3, 0.7)] {
            assert_relative_eq!(u.u1(t, c, x), 2.0 * c.sqrt(), max_relative = 1e-15);
        }
        assert_relative_eq!(u.u2(4.0), 4.0, max_relative = 1e-15);
    }

    #[test]
    fn exponential_weights_at_the_horizon() {
        let law = HorizonLaw::Exponential { rate: 0.5 };
        assert_relative_eq!(law.survival(1.0), 0.60653, max_relative = 1e-5);
        assert_relative_eq!(law.density(1.0), 0.30327, max_relative = 1e-4);
        let u = random_horizon_transform(&power_spec(law)).unwrap();
        assert_relative_eq!(u.u2(1.0), 2.0 * 0.606_530_66, max_relative = 1e-8);
        let w = u.as_power().unwrap();
        assert_relative_eq!(w.a_c.eval(1.0), 0.606_530_66, max_relative = 1e-8);
        assert_relative_eq!(w.a_x.eval(1.0), 0.303_265_33, max_relative = 1e-8);
    }

    #[test]
    fn fast_exit_kills_the_terminal_weight() {
        let u =
            random_horizon_transform(&power_spec(HorizonLaw::Exponential { rate: 60.0 })).unwrap();
        assert!(u.u2(1.0) < 1e-25);
        assert!(u.u1(0.0, 0.0, 1.0) > 100.0);
    }

    #[test]
    fn transformed_model_validates() {
        let u =
            random_horizon_transform(&power_spec(HorizonLaw::Exponential { rate: 0.5 })).unwrap();
        let m = MarketModel::constant(0.3, 0.5, 1.0).unwrap();
        assert!(validate_model(&m, &u, &ProbeGrid::standard(1.0, 10)).passed());
    }

    #[test]
    fn custom_law_checks() {
        let bad = HorizonLaw::Custom {
            cdf: Curve::function(|t| 0.1 * t),
            density: Curve::function(|t| 0.1 - 0.2 * t),
        };
        assert!(matches!(
            bad.validate(1.0),
            Err(ApplicationError::NegativeWeight { .. })
        ));
        let wrong = HorizonLaw::Custom {
            cdf: Curve::function(|t| 0.1 * t),
            density: Curve::constant(0.3),
        };
        assert!(matches!(
            wrong.validate(1.0),
            Err(ApplicationError::InvalidLaw(_))
        ));
        let uniform = HorizonLaw::Custom {
            cdf: Curve::function(|t| 0.25 * t),
            density: Curve::constant(0.25),
        };
        uniform.validate(2.0).unwrap();
        assert_relative_eq!(uniform.sample(0.3, 2.0), 1.2, max_relative = 1e-12);
        assert!(uniform.sample(0.6, 2.0).is_infinite());
    }

    #[test]
    fn custom_payoff_matches_power_payoff() {
        let law = HorizonLaw::Exponential { rate: 0.7 };
        let power = random_horizon_transform(&power_spec(law.clone())).unwrap();
        let custom = random_horizon_transform(&RandomHorizonSpec {
            payoff: HorizonPayoff::Custom {
                running: Arc::new(|_, c: f64| 2.0 * c.sqrt()),
                stopped: Arc::new(|_, x: f64| 2.0 * x.sqrt()),
                p: 0.5,
                growth_k: 2.0,
            },
            law,
            horizon: 1.0,
        })
        .unwrap();
        for (t, c, x) in [(0.1, 1.0, 2.0), (0.9, 0.2, 5.0)] {
            assert_relative_eq!(power.u1(t, c, x), custom.u1(t, c, x), max_relative = 1e-14);
        }
        assert_relative_eq!(power.u2(3.0), custom.u2(3.0), max_relative = 1e-14);
    }

    #[test]
    fn reduction_spot_values() {
        let red = illiquid_reduction(&sample_params()).unwrap();
        assert_relative_eq!(red.k_yp, 0.061_666_666_666_666_67, max_relative = 1e-14);
        assert_relative_eq!(red.b_eff, 0.17, max_relative = 1e-14);
        assert_relative_eq!(red.discount, 0.5 - red.k_yp, max_relative = 1e-15);
        let decoupled = illiquid_reduction(&IlliquidParams {
            rho: 0.0,
            ..sample_params()
        })
        .unwrap();
        assert_eq!(decoupled.k_yp, 0.0);
        assert_eq!(decoupled.b_eff, 0.2);
    }

    #[test]
    fn small_p_limit() {
        let red = illiquid_reduction(&IlliquidParams {
            p: 1e-9,
            ..sample_params()
        })
        .unwrap();
        assert!(red.k_yp.abs() < 1e-9);
        assert_relative_eq!(red.b_eff, 0.2 - 0.5 * 0.4 * 0.3, max_relative = 1e-8);
    }

    #[test]
    fn discount_too_small() {
        let r = illiquid_reduction(&IlliquidParams {
            beta: 0.05,
            ..sample_params()
        });
        assert!(matches!(r, Err(ApplicationError::DiscountTooSmall { .. })));
        let r = illiquid_reduction(&IlliquidParams {
            rho: 1.0,
            ..sample_params()
        });
        assert!(matches!(r, Err(ApplicationError::InvalidParams(_))));
    }

    #[test]
    fn liquidation_value_special_cases() {
        let params = sample_params();
        assert_relative_eq!(
            liquidation_value(&params, 1.3, 0.8, 2.0, 0.0, 16).unwrap(),
            1.3 * 2f64.sqrt() / 0.5
        );
        let red = illiquid_reduction(&params).unwrap();
        let t = 0.8;
        let (m, v) = (red.log_mean_rate * t, red.log_var_rate * t);
        let moment = (0.5 * m + 0.125 * v).exp();
        let expected = 1.3 / 0.5 * 3f64.sqrt() * moment;
        assert_relative_eq!(
            liquidation_value(&params, 1.3, t, 0.0, 3.0, 24).unwrap(),
            expected,
            max_relative = 1e-10
        );
        let near = IlliquidParams {
            rho: 1.0 - 1e-12,
            ..params
        };
        let red = illiquid_reduction(&near).unwrap();
        let v = liquidation_value(&near, 1.0, 1.0, 1.0, 1.0, 16).unwrap();
        assert_relative_eq!(
            v,
            (1.0 + red.log_mean_rate.exp()).sqrt() / 0.5,
            max_relative = 1e-5
        );
    }

    #[test]
    fn liquidation_value_is_monotone() {
        let params = sample_params();
        let base = liquidation_value(&params, 1.0, 1.0, 1.0, 1.0, 24).unwrap();
        assert!(liquidation_value(&params, 1.0, 1.0, 1.1, 1.0, 24).unwrap() > base);
        assert!(liquidation_value(&params, 1.0, 1.0, 1.0, 1.1, 24).unwrap() > base);
        assert!(liquidation_value(&params, 1.1, 1.0, 1.0, 1.0, 24).unwrap() > base);
    }

    #[test]
    fn unstable_quadrature_is_reported() {
        let wild = IlliquidParams {
            sigma_i: 3.0,
            rho: 0.0,
            ..sample_params()
        };
        let r = liquidation_value(&wild, 1.0, 1.0, 0.0, 1.0, 2);
        assert!(matches!(
            r,
            Err(ApplicationError::QuadratureUnstable { .. })
        ));
    }

    #[test]
    fn growth_factor_law_matches_asset_dynamics() {
        // J_t = I_t / (Y_t / alpha_0) from exact lognormal draws of both assets.
        let params = sample_params();
        let red = illiquid_reduction(&params).unwrap();
        let t: f64 = 2.0;
        let mut rng = path_rng(11, 0);
        let n = 200_000;
        let logs: Vec<f64> = (0..n)
            .map(|_| {
                let w: f64 = rng.sample::<f64, _>(rand_distr::StandardNormal) * t.sqrt();
                let b: f64 = rng.sample::<f64, _>(rand_distr::StandardNormal) * t.sqrt();
                let si = params.sigma_i;
                let log_i = (params.b_i - si * si / 2.0) * t
                    + si * (params.rho * w + (1.0 - params.rho.powi(2)).sqrt() * b);
                let drift_y = params.rho * params.b_l * si / params.sigma_l;
                let log_y =
                    (drift_y - params.rho.powi(2) * si * si / 2.0) * t + params.rho * si * w;
                log_i - log_y
            })
            .collect();
        let (mean, se) = mean_and_std_error(&logs);
        assert!((mean - red.log_mean_rate * t).abs() < 4.0 * se);
        let var = logs.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert_relative_eq!(var, red.log_var_rate * t, max_relative = 0.02);
    }

    #[test]
    fn reduced_utility_is_the_random_horizon_composite() {
        let params = sample_params();
        let red = illiquid_reduction(&params).unwrap();
        let k_v = 1.2;
        let reduced = ReducedUtility {
            p: 0.5,
            discount: red.discount,
            law: params.arrival.clone(),
            horizon: 3.0,
            k_v,
            log_mean_rate: red.log_mean_rate,
            log_var_rate: red.log_var_rate,
            rule: NormalRule::new(24).unwrap(),
        };
        let delta = red.discount;
        let p2 = params.clone();
        let spec = RandomHorizonSpec {
            payoff: HorizonPayoff::Custom {
                running: Arc::new(move |t, c: f64| (-delta * t).exp() * 2.0 * c.sqrt()),
                stopped: Arc::new(move |t, z| {
                    (-delta * t).exp() * liquidation_value(&p2, k_v, t, z, 1.0, 24).unwrap()
                }),
                p: 0.5,
                growth_k: 10.0,
            },
            law: params.arrival.clone(),
            horizon: 3.0,
        };
        let composite = random_horizon_transform(&spec).unwrap();
        for (t, c, z) in [(0.5, 0.4, 0.0), (1.0, 1.0, 2.0), (2.5, 3.0, 0.3)] {
            assert_relative_eq!(
                reduced.u1(t, c, z),
                composite.u1(t, c, z),
                max_relative = 1e-10
            );
        }
        assert_relative_eq!(reduced.u2(1.7), composite.u2(1.7), max_relative = 1e-10);
        let h = 1e-5;
        let fd = (reduced.u1(1.0, 1.0, 2.0 + h) - reduced.u1(1.0, 1.0, 2.0 - h)) / (2.0 * h);
        assert_relative_eq!(
            reduced.u1_x(1.0, 1.0, 2.0).unwrap(),
            fd,
            max_relative = 1e-6
        );
    }
}
