//! Duality-based solver for investment–consumption problems with utility
//! on current wealth.
//!
//! The pipeline solves the semilinear dual HJB equation on a log-grid,
//! recovers the primal value function and feedback controls by an
//! inf-Legendre transform, and checks optimality by Monte Carlo
//! simulation of the closed-loop wealth process.

pub mod applications;
pub mod checks;
pub mod config;
pub mod curve;
pub mod dual_solver;
pub mod interp;
pub mod io;
pub mod model;
pub mod numeric;
pub mod pipeline;
pub mod primal;
pub mod quadrature;
pub mod simulate;
pub mod transforms;

pub use curve::Curve;
pub use model::{MarketModel, PowerUtility, UtilityModel};
