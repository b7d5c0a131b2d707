//! Standard experiment pipelines driven by a [`ModelConfig`]:
//! solve, recover, simulate, the consolidated check suite, and the two
//! applications.

use serde::Serialize;
use thiserror::Error;

use crate::applications::{
    illiquid_reduction, kv_fixed_point, random_horizon_mc, random_horizon_transform,
    ApplicationError, HorizonComparison, KvOutcome,
};
use crate::config::{config_hash, ConfigError, ModelConfig, UtilityRegistry};
use crate::dual_solver::{
    check_dual_invariants, merton_dual_value, solve_dual, solve_dual_extrapolated, DualError,
    DualSolution,
};
use crate::model::{validate_model, MarketModel, ProbeGrid, UtilityModel};
use crate::primal::{
    involution_check, legendre_min, merton_value, primal_hjb_residual, recover_primal, PrimalError,
    PrimalSolution,
};
use crate::simulate::{
    simulate_closed_loop, supermartingale_check, verification_test, SimConfig, SimError, SimReport,
    TabulatedPolicy,
};
use crate::transforms::{ConjugateBundle, TransformError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("model validation failed: {0}")]
    ModelValidation(String),
    #[error(transparent)]
    Transform(#[from] TransformError),
    #[error(transparent)]
    Dual(#[from] DualError),
    #[error(transparent)]
    Primal(#[from] PrimalError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Application(#[from] ApplicationError),
}

/// Probe points per axis of the model validation.
const PROBES: usize = 12;

/// A validated model ready to run.
#[derive(Debug, Clone)]
pub struct Problem {
    pub config: ModelConfig,
    pub hash: String,
    pub market: MarketModel,
    pub utility: UtilityModel,
    pub bundle: ConjugateBundle,
}

impl Problem {
    pub fn from_text(text: &str, registry: &UtilityRegistry) -> Result<Self, PipelineError> {
        let config = ModelConfig::parse(text)?;
        let market = config.market()?;
        let utility = config.utility(registry)?;
        Self::assemble(config, config_hash(text), market, utility)
    }

    pub fn assemble(
        config: ModelConfig,
        hash: String,
        market: MarketModel,
        utility: UtilityModel,
    ) -> Result<Self, PipelineError> {
        let report = validate_model(
            &market,
            &utility,
            &ProbeGrid::standard(market.horizon, PROBES),
        );
        if !report.passed() {
            let failed: Vec<String> = report
                .checks
                .iter()
                .filter(|c| !c.passed)
                .map(|c| c.name.to_string())
                .collect();
            return Err(PipelineError::ModelValidation(failed.join(", ")));
        }
        let bundle = ConjugateBundle::new(utility.clone(), market.horizon)?;
        Ok(Self {
            config,
            hash,
            market,
            utility,
            bundle,
        })
    }

    pub fn solve(&self) -> Result<DualSolution, PipelineError> {
        let grid = self.config.log_grid()?;
        let settings = self.config.solver_settings();
        if self.config.grid.time_extrapolation {
            return Ok(solve_dual_extrapolated(
                &self.market,
                &self.bundle,
                &grid,
                &settings,
            )?);
        }
        Ok(solve_dual(&self.market, &self.bundle, &grid, &settings)?)
    }

    pub fn recover(&self, dual: &DualSolution) -> Result<PrimalSolution, PipelineError> {
        Ok(recover_primal(
            dual,
            &self.bundle,
            &self.market,
            &self.config.recovery_settings(),
        )?)
    }

    pub fn sim_config(&self, seed: Option<u64>) -> SimConfig {
        self.config.sim_config(seed)
    }

    pub fn simulate(
        &self,
        primal: &PrimalSolution,
        cfg: &SimConfig,
    ) -> Result<SimReport, PipelineError> {
        let policy = TabulatedPolicy::new(primal, &self.utility);
        Ok(simulate_closed_loop(
            0.0,
            self.config.sim.x0,
            &policy,
            &self.market,
            &self.utility,
            cfg,
        )?)
    }

    /// Constant weights and market with no wealth utility: the case with a
    /// closed-form value.
    fn merton_case(&self) -> Option<(f64, f64, f64, f64)> {
        let w = self.utility.as_power()?;
        if !w.a_x.is_zero() || !self.market.is_constant() {
            return None;
        }
        Some((
            w.p,
            w.a_c.as_constant()?,
            w.a_terminal,
            self.market.theta(0.0),
        ))
    }

    pub fn has_oracle(&self) -> bool {
        self.merton_case().is_some()
    }

    /// Runs every invariant, oracle and Monte Carlo check that applies.
    pub fn verify(&self, seed: Option<u64>) -> Result<SuiteReport, PipelineError> {
        let mut suite = SuiteReport {
            config_hash: self.hash.clone(),
            checks: Vec::new(),
            passed: true,
        };
        let dual = self.solve()?;
        let dual_report = check_dual_invariants(&dual, &self.bundle, &self.market)?;
        for c in &dual_report.checks {
            suite.push(format!("dual.{}", c.name), c.passed, c.worst, 0.0);
        }
        let primal = self.recover(&dual)?;
        for c in crate::primal::check_primal(&primal, &self.bundle) {
            suite.push(format!("primal.{}", c.name), c.passed, c.worst, 0.0);
        }
        let inv = involution_check(&primal, &dual, 0, (0.2, 5.0));
        suite.push(
            "primal.involution".into(),
            inv.worst_ratio <= 2.0,
            inv.worst_ratio,
            2.0,
        );
        let residual = primal_hjb_residual(&primal, &self.market, &self.bundle)?;
        suite.push(
            "primal.hjb_residual".into(),
            residual.max_scaled <= RESIDUAL_TOL,
            residual.max_scaled,
            RESIDUAL_TOL,
        );
        if let Some((p, a_c, a_t, theta)) = self.merton_case() {
            let horizon = self.market.horizon;
            let mut worst: f64 = 0.0;
            for n in 0..=dual.grid.n_t {
                let t = dual.grid.t(n);
                if t > 0.9 * horizon + 1e-12 {
                    continue;
                }
                for j in 0..dual.grid.n_y {
                    let y = dual.grid.y(j);
                    if !(0.2..=5.0).contains(&y) {
                        continue;
                    }
                    let exact = merton_dual_value(p, a_c, a_t, theta, horizon - t, y);
                    worst = worst.max((dual.w[n][j] / exact - 1.0).abs());
                }
            }
            suite.push("oracle.dual_value".into(), worst <= 5e-3, worst, 5e-3);
            let (mut v_err, mut share_err): (f64, f64) = (0.0, 0.0);
            let share = self.market.b(0.0) / (self.market.sigma(0.0).powi(2) * (1.0 - p));
            for (n, &t) in primal.times.iter().enumerate() {
                if t > 0.9 * horizon + 1e-12 {
                    continue;
                }
                for (i, &x) in primal.x_grid.iter().enumerate() {
                    if !(0.25..=4.0).contains(&x) {
                        continue;
                    }
                    let exact = merton_value(p, a_c, a_t, theta, horizon - t, x);
                    v_err = v_err.max((primal.v[n][i] / exact - 1.0).abs());
                    if i > 0 && i + 1 < primal.x_grid.len() {
                        share_err =
                            share_err.max((primal.investment[n][i] / x / share - 1.0).abs());
                    }
                }
            }
            suite.push("oracle.primal_value".into(), v_err <= 1e-2, v_err, 1e-2);
            suite.push(
                "oracle.portfolio_share".into(),
                share_err <= 2e-2,
                share_err,
                2e-2,
            );
        }
        let cfg = self.sim_config(seed);
        let x0 = self.config.sim.x0;
        let test = verification_test(
            0.0,
            x0,
            &primal,
            &self.market,
            &self.utility,
            &cfg,
            &PERTURBATIONS,
        )?;
        suite.push(
            "mc.optimal_attained".into(),
            test.optimal_attained,
            test.closed_loop.estimate - test.value,
            2.0 * test.closed_loop.std_error,
        );
        for c in &test.perturbations {
            suite.push(
                format!("mc.perturbed_{}_{}", c.gamma_c, c.gamma_pi),
                c.passed,
                c.estimate - test.value,
                2.0 * c.std_error,
            );
        }
        let y0 = legendre_min(&dual, 0, x0)?.y_star;
        let policy = TabulatedPolicy::new(&primal, &self.utility);
        let sm = supermartingale_check(0.0, x0, y0, &policy, |_, _| 0.0, &self.market, &cfg)?;
        suite.push(
            "mc.supermartingale".into(),
            sm.passed,
            sm.estimate - sm.bound,
            2.0 * sm.std_error,
        );
        Ok(suite)
    }

    /// Runs the application sections present in the config.
    pub fn run_app(&self, seed: Option<u64>) -> Result<AppOutput, PipelineError> {
        let mut out = AppOutput::default();
        if self.config.random_horizon.is_some() {
            let spec = self.config.horizon_spec()?;
            let utility = random_horizon_transform(&spec)?;
            let inner = Problem::assemble(
                self.config.clone(),
                self.hash.clone(),
                self.market.clone(),
                utility,
            )?;
            let dual = inner.solve()?;
            let primal = inner.recover(&dual)?;
            let x0 = self.config.sim.x0;
            let policy = TabulatedPolicy::new(&primal, &inner.utility);
            let cfg = self.sim_config(seed);
            let comparison = random_horizon_mc(&spec, &self.market, &policy, x0, &cfg)?;
            out.random_horizon = Some(RandomHorizonReport {
                value: primal.value_at(0, x0),
                comparison,
                passed: comparison.agree(2.0),
            });
            out.horizon_solution = Some((dual, primal));
        }
        if self.config.illiquid.is_some() {
            let (params, settings) = self.config.illiquid()?;
            let reduction = illiquid_reduction(&params)?;
            let outcome = kv_fixed_point(&params, &settings)?;
            out.illiquid = Some(IlliquidReport {
                k_yp: reduction.k_yp,
                b_eff: reduction.b_eff,
                discount: reduction.discount,
                liquid_constant: params.liquid_merton_constant(),
                outcome,
            });
        }
        Ok(out)
    }
}

/// Bound on the scaled primal HJB residual.
pub const RESIDUAL_TOL: f64 = 1e-2;

/// Scalings `(gamma_c, gamma_pi)` of the optimal feedback tried by the
/// verification test.
pub const PERTURBATIONS: [(f64, f64); 8] = [
    (0.5, 0.5),
    (0.5, 1.0),
    (0.5, 2.0),
    (1.0, 0.5),
    (1.0, 2.0),
    (2.0, 0.5),
    (2.0, 1.0),
    (2.0, 2.0),
];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteCheck {
    pub name: String,
    pub passed: bool,
    pub value: f64,
    pub tolerance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteReport {
    pub config_hash: String,
    pub checks: Vec<SuiteCheck>,
    pub passed: bool,
}

impl SuiteReport {
    fn push(&mut self, name: String, passed: bool, value: f64, tolerance: f64) {
        self.passed &= passed;
        self.checks.push(SuiteCheck {
            name,
            passed,
            value,
            tolerance,
        });
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RandomHorizonReport {
    /// Value of the transformed problem at `(0, x0)`.
    pub value: f64,
    pub comparison: HorizonComparison,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IlliquidReport {
    pub k_yp: f64,
    pub b_eff: f64,
    pub discount: f64,
    pub liquid_constant: Option<f64>,
    pub outcome: KvOutcome,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct AppOutput {
    pub random_horizon: Option<RandomHorizonReport>,
    pub illiquid: Option<IlliquidReport>,
    #[serde(skip)]
    pub horizon_solution: Option<(DualSolution, PrimalSolution)>,
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMALL: &str = r#"
[market]
b = 0.3
sigma = 0.5
horizon = 1.0

[utility]
p = 0.5
a_terminal = 1.0

[grid]
n_y = 201
n_t = 100
n_x = 100
sensitivity_check = false

[sim]
n_paths = 4000
dt_sim = 0.01
"#;

    #[test]
    fn invalid_model_is_rejected() {
        let text = SMALL.replace("p = 0.5", "p = 1.5");
        assert!(matches!(
            Problem::from_text(&text, &UtilityRegistry::with_builtins()),
            Err(PipelineError::Config(_))
        ));
        let text = SMALL.replace("sigma = 0.5", "sigma = [[0.0, 0.5], [1.0, 0.0]]");
        assert!(matches!(
            Problem::from_text(&text, &UtilityRegistry::with_builtins()),
            Err(PipelineError::ModelValidation(_))
        ));
    }

    #[test]
    fn small_merton_suite_passes() {
        let problem = Problem::from_text(SMALL, &UtilityRegistry::with_builtins()).unwrap();
        let report = problem.verify(None).unwrap();
        for c in &report.checks {
            assert!(c.passed, "{c:?}");
        }
        assert!(report.checks.iter().any(|c| c.name == "oracle.dual_value"));
    }
}
