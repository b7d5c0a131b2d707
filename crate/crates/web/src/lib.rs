//! WebAssembly bindings for the browser demo. Every operation takes the
//! text of a model config and returns a JSON document; failures come back
//! as `{"error": "..."}`.

use dualhjb_core::config::UtilityRegistry;
use dualhjb_core::pipeline::{PipelineError, Problem};
use serde::Serialize;
use wasm_bindgen::prelude::*;

/// Value and feedback controls at time zero.
#[derive(Debug, Serialize)]
pub struct Curves {
    pub x: Vec<f64>,
    pub value: Vec<f64>,
    pub consumption: Vec<f64>,
    pub investment: Vec<f64>,
    pub duality_gap: Vec<f64>,
    pub dual_residual: f64,
    pub oracle: bool,
}

fn problem(config: &str) -> Result<Problem, PipelineError> {
    Problem::from_text(config, &UtilityRegistry::with_builtins())
}

pub fn curves(config: &str) -> Result<Curves, PipelineError> {
    let problem = problem(config)?;
    let dual = problem.solve()?;
    let primal = problem.recover(&dual)?;
    Ok(Curves {
        x: primal.x_grid.clone(),
        value: primal.v[0].clone(),
        consumption: primal.consumption[0].clone(),
        investment: primal.investment[0].clone(),
        duality_gap: primal.duality_gap[0].clone(),
        dual_residual: dual.diagnostics.max_residual,
        oracle: problem.has_oracle(),
    })
}

fn respond<T: Serialize>(result: Result<T, PipelineError>) -> String {
    match result {
        Ok(v) => serde_json::to_string(&v).expect("reports serialize"),
        Err(e) => serde_json::json!({ "error": e.to_string() }).to_string(),
    }
}

/// Solves the dual problem and recovers value and controls at `t = 0`.
#[wasm_bindgen]
pub fn solve_curves(config: &str) -> String {
    respond(curves(config))
}

/// Runs the consolidated check suite.
#[wasm_bindgen]
pub fn verify(config: &str, seed: u64) -> String {
    respond(problem(config).and_then(|p| p.verify(Some(seed))))
}

/// Runs the application sections of the config.
#[wasm_bindgen]
pub fn run_app(config: &str, seed: u64) -> String {
    respond(problem(config).and_then(|p| p.run_app(Some(seed))))
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMALL: &str = "[market]\nb = 0.3\nsigma = 0.5\nhorizon = 1.0\n\
        [utility]\np = 0.5\na_terminal = 1.0\n\
        [grid]\nn_y = 121\nn_t = 40\nn_x = 60\nsensitivity_check = false\n\
        [sim]\nn_paths = 1000\ndt_sim = 0.02\n";

    #[test]
    fn curves_are_monotone() {
        let c = curves(SMALL).unwrap();
        assert!(c.oracle);
        assert!(c.value.windows(2).all(|w| w[1] >= w[0]));
        assert_eq!(c.x.len(), c.investment.len());
    }

    #[test]
    fn errors_are_reported_as_json() {
        let out = solve_curves("[market]\n");
        assert!(out.starts_with("{\"error\":"), "{out}");
    }

    #[test]
    fn app_without_sections_is_empty() {
        let out = run_app(SMALL, 1);
        assert!(out.contains("\"random_horizon\":null"), "{out}");
    }
}
