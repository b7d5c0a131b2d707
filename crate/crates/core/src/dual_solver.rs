//! Backward solver for the dual HJB equation
//!
//! ```text
//! -W_t - lambda(t) y^2 W_yy - U1*(t, y, -W_y) = 0,   W(T, .) = ~U2
//! ```
//!
//! on a truncated grid uniform in `xi = log y`. The diffusion is treated by
//! implicit Euler; the source is frozen at the latest iterate and refined by
//! a fixed point, with the gradient clamped to a band taken from the
//! previous slice.

use serde::Serialize;
use thiserror::Error;

use crate::checks::{InvariantCheck, Tracker};
use crate::model::{MarketModel, PowerUtility};
use crate::numeric::solve_tridiagonal;
use crate::transforms::{ConjugateBundle, TransformError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DualError {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error(transparent)]
    Transform(#[from] TransformError),
    #[error("terminal conjugate {value:e} at y = {y:e} exceeds the cap; raise y_min")]
    SaturatedConjugate { y: f64, value: f64 },
    #[error("fixed point at slice {slice} did not converge (last change {change:e}); refine dt")]
    FixedPointDivergence { slice: usize, change: f64 },
    #[error("slice {slice} is not convex at node {node} (second difference {value:e})")]
    NonConvexSlice {
        slice: usize,
        node: usize,
        value: f64,
    },
    #[error("non-finite value at slice {slice}, node {node}")]
    NonFinite { slice: usize, node: usize },
}

/// Time-space grid, uniform in `log y` and in `t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LogGrid {
    pub y_min: f64,
    pub y_max: f64,
    pub n_y: usize,
    pub n_t: usize,
    pub horizon: f64,
}

impl LogGrid {
    pub fn new(
        y_min: f64,
        y_max: f64,
        n_y: usize,
        n_t: usize,
        horizon: f64,
    ) -> Result<Self, DualError> {
        if !(y_min > 0.0 && y_max > y_min && y_max.is_finite()) {
            return Err(DualError::InvalidGrid(format!(
                "need 0 < y_min < y_max, got [{y_min}, {y_max}]"
            )));
        }
        if n_y < 16 {
            return Err(DualError::InvalidGrid(format!(
                "need at least 16 space nodes, got {n_y}"
            )));
        }
        if n_t < 8 {
            return Err(DualError::InvalidGrid(format!(
                "need at least 8 time steps, got {n_t}"
            )));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(DualError::InvalidGrid(format!(
                "horizon must be positive, got {horizon}"
            )));
        }
        let grid = Self {
            y_min,
            y_max,
            n_y,
            n_t,
            horizon,
        };
        if grid.d_xi() >= 2.0 {
            return Err(DualError::InvalidGrid(
                "log-spacing must stay below 2".into(),
            ));
        }
        Ok(grid)
    }

    /// `[1e-3, 1e3]` with 400 nodes and 200 steps.
    pub fn standard(horizon: f64) -> Self {
        Self {
            y_min: 1e-3,
            y_max: 1e3,
            n_y: 400,
            n_t: 200,
            horizon,
        }
    }

    pub fn d_xi(&self) -> f64 {
        (self.y_max / self.y_min).ln() / (self.n_y - 1) as f64
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.n_t as f64
    }

    pub fn y(&self, j: usize) -> f64 {
        if j == self.n_y - 1 {
            return self.y_max;
        }
        self.y_min * (j as f64 * self.d_xi()).exp()
    }

    pub fn t(&self, n: usize) -> f64 {
        if n == self.n_t {
            return self.horizon;
        }
        n as f64 * self.dt()
    }

    pub fn ys(&self) -> Vec<f64> {
        (0..self.n_y).map(|j| self.y(j)).collect()
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.n_t).map(|n| self.t(n)).collect()
    }

    /// Same spacing, extended to the left until `y_min` is (about) halved.
    fn extended_left(&self) -> Self {
        let extra = (2f64.ln() / self.d_xi()).round().max(1.0) as usize;
        let n_y = self.n_y + extra;
        let y_min = self.y_max * (-((n_y - 1) as f64) * self.d_xi()).exp();
        Self {
            y_min,
            n_y,
            ..*self
        }
    }
}

/// How the two boundary nodes are closed in each implicit solve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum BoundaryClosure {
    /// `W` follows `y^-q` across the first and last cell, imposed
    /// implicitly. Exact for power-law slices.
    PowerLaw,
    /// Power law on the left, `W_y = 0` on the right. For problems whose
    /// value at zero wealth is positive, where `W` is flat for large `y`.
    FlatRight,
    /// Dirichlet values extrapolated from a power-law fit (see
    /// [`boundary_values`]): first on the previous slice, then refitted on
    /// each fixed-point iterate.
    LaggedFit,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SolverSettings {
    pub fixed_point_tol: f64,
    pub max_fixed_point_iter: usize,
    /// Clamp band `[m / widen, M * widen]` around the previous slice's
    /// gradient range.
    pub clamp_widen: f64,
    pub boundary: BoundaryClosure,
    /// Largest admissible terminal conjugate value.
    pub saturation_cap: f64,
    pub convexity_tol: f64,
    pub sensitivity_check: bool,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            fixed_point_tol: 1e-10,
            max_fixed_point_iter: 50,
            clamp_widen: 2.0,
            boundary: BoundaryClosure::PowerLaw,
            saturation_cap: 1e12,
            convexity_tol: 1e-8,
            sensitivity_check: true,
        }
    }
}

/// `W(t, y_min)` moved by more than 1% when `y_min` was halved.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundaryLayerWarning {
    pub y_min: f64,
    pub relative_change: f64,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct DualDiagnostics {
    /// Max scaled residual of the equation with centred differences.
    pub max_residual: f64,
    /// Fixed-point iterations per slice `0..n_t`.
    pub iterations: Vec<usize>,
    /// Interior nodes with an active clamp on the final iterate, per slice.
    pub clamp_active: Vec<usize>,
    /// Slices whose fixed point was rerun with a band from its own iterate.
    pub clamp_rebands: usize,
    pub boundary_warning: Option<BoundaryLayerWarning>,
}

/// Grid-sampled dual value function with derivative fields, indexed
/// `[time slice][space node]`.
#[derive(Debug, Clone)]
pub struct DualSolution {
    pub grid: LogGrid,
    /// Decay exponent `q = p / (1 - p)` used by the boundary closure.
    pub q: f64,
    pub w: Vec<Vec<f64>>,
    pub w_y: Vec<Vec<f64>>,
    pub w_yy: Vec<Vec<f64>>,
    /// Clamp band used at each slice `0..n_t` (`None` when unclamped).
    pub clamp_bounds: Vec<Option<(f64, f64)>>,
    /// `lambda(t_n)` for every slice.
    pub lambda: Vec<f64>,
    pub diagnostics: DualDiagnostics,
}

impl DualSolution {
    /// Time derivative: centred in the interior, one-sided at both ends.
    pub fn w_t(&self, n: usize, j: usize) -> f64 {
        let dt = self.grid.dt();
        let nt = self.grid.n_t;
        match n {
            0 => (self.w[1][j] - self.w[0][j]) / dt,
            n if n == nt => (self.w[nt][j] - self.w[nt - 1][j]) / dt,
            n => (self.w[n + 1][j] - self.w[n - 1][j]) / (2.0 * dt),
        }
    }

    /// Linear interpolation of `W(t_n, .)` in `log y`.
    pub fn value_at(&self, n: usize, y: f64) -> f64 {
        let xi = (y / self.grid.y_min).ln() / self.grid.d_xi();
        let j = (xi.floor().max(0.0) as usize).min(self.grid.n_y - 2);
        let w = (xi - j as f64).clamp(0.0, 1.0);
        self.w[n][j] * (1.0 - w) + self.w[n][j + 1] * w
    }

    pub fn is_zero(&self) -> bool {
        self.w.iter().flatten().all(|&v| v == 0.0)
    }
}

/// `(m v q) ^ M`.
pub fn clamp_gradient(q: f64, m: f64, big_m: f64) -> f64 {
    debug_assert!(0.0 < m && m <= big_m);
    q.max(m).min(big_m)
}

pub fn terminal_slice(
    grid: &LogGrid,
    bundle: &ConjugateBundle,
    cap: f64,
) -> Result<Vec<f64>, DualError> {
    let mut slice = Vec::with_capacity(grid.n_y);
    for j in 0..grid.n_y {
        let y = grid.y(j);
        let value = bundle.u2_tilde(y)?;
        if !(value <= cap) {
            return Err(DualError::SaturatedConjugate { y, value });
        }
        slice.push(value);
    }
    Ok(slice)
}

/// Power-law extrapolations `C y^-q` from least-squares fits on the
/// `window` outermost interior nodes of each side.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundaryFit {
    pub left: f64,
    pub right: f64,
    /// All window values were below `1e-14`; the affected side is 0.
    pub degenerate: bool,
}

pub fn boundary_values(
    slice: &[f64],
    grid: &LogGrid,
    q: f64,
    window: usize,
) -> Result<BoundaryFit, DualError> {
    let n = grid.n_y;
    if window < 5 || n < 2 * window + 2 {
        return Err(DualError::InvalidGrid(format!(
            "fit window {window} does not fit {n} nodes"
        )));
    }
    let fit = |nodes: std::ops::RangeInclusive<usize>, target: usize| -> (f64, bool) {
        if nodes.clone().all(|j| slice[j].abs() < 1e-14) {
            return (0.0, true);
        }
        let (mut num, mut den) = (0.0, 0.0);
        for j in nodes {
            let basis = grid.y(j).powf(-q);
            num += slice[j] * basis;
            den += basis * basis;
        }
        (num / den * grid.y(target).powf(-q), false)
    };
    let (left, dl) = fit(1..=window, 0);
    let (right, dr) = fit(n - 1 - window..=n - 2, n - 1);
    Ok(BoundaryFit {
        left,
        right,
        degenerate: dl || dr,
    })
}

/// Result of one backward step.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub slice: Vec<f64>,
    pub iterations: usize,
    pub clamp_active: usize,
    pub bounds: Option<(f64, f64)>,
    pub rebanded: bool,
}

/// Interior `-W_y` from centred differences.
fn interior_gradient(slice: &[f64], grid: &LogGrid) -> Vec<f64> {
    let h = grid.d_xi();
    (1..grid.n_y - 1)
        .map(|j| -(slice[j + 1] - slice[j - 1]) / (2.0 * h * grid.y(j)))
        .collect()
}

fn clamp_band(slice: &[f64], grid: &LogGrid, widen: f64) -> Option<(f64, f64)> {
    let grads = interior_gradient(slice, grid);
    let hi = grads.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lo = grads
        .iter()
        .cloned()
        .filter(|g| *g > 0.0)
        .fold(f64::INFINITY, f64::min);
    if !(hi > 0.0 && hi.is_finite() && lo.is_finite()) {
        return None;
    }
    Some((lo / widen, hi * widen))
}

struct StepContext<'a> {
    grid: &'a LogGrid,
    bundle: &'a ConjugateBundle,
    settings: &'a SolverSettings,
    q: f64,
    t: f64,
    lambda: f64,
}

impl StepContext<'_> {
    /// Source `U1*(t, y_j, -W_y)` at interior nodes, with the number of
    /// nodes where the clamp changed the gradient.
    fn source(
        &self,
        iterate: &[f64],
        bounds: Option<(f64, f64)>,
    ) -> Result<(Vec<f64>, usize), DualError> {
        let grads = interior_gradient(iterate, self.grid);
        let mut active = 0;
        let mut out = Vec::with_capacity(grads.len());
        for (k, g) in grads.into_iter().enumerate() {
            let x = match bounds {
                Some((m, big_m)) => {
                    let c = clamp_gradient(g, m, big_m);
                    if c != g {
                        active += 1;
                    }
                    c
                }
                None => g.max(0.0),
            };
            out.push(self.bundle.u1_star(self.t, self.grid.y(k + 1), x)?);
        }
        Ok((out, active))
    }

    fn implicit_solve(&self, w_next: &[f64], source: &[f64], fit: Option<BoundaryFit>) -> Vec<f64> {
        let n = self.grid.n_y;
        let h = self.grid.d_xi();
        let dt = self.grid.dt();
        let a = dt * self.lambda / (h * h);
        let b = dt * self.lambda / (2.0 * h);
        let m = n - 2;
        let mut lower = vec![-(a + b); m];
        let mut diag = vec![1.0 + 2.0 * a; m];
        let mut upper = vec![-(a - b); m];
        let mut rhs: Vec<f64> = (0..m).map(|k| w_next[k + 1] + dt * source[k]).collect();
        let left_ratio = (self.q * h).exp();
        let right_ratio = (-right_exponent(self.settings.boundary, self.q) * h).exp();
        match fit {
            None => {
                diag[0] += lower[0] * left_ratio;
                diag[m - 1] += upper[m - 1] * right_ratio;
            }
            Some(f) => {
                rhs[0] -= lower[0] * f.left;
                rhs[m - 1] -= upper[m - 1] * f.right;
            }
        }
        lower[0] = 0.0;
        upper[m - 1] = 0.0;
        solve_tridiagonal(&lower, &diag, &upper, &mut rhs);
        let mut slice = Vec::with_capacity(n);
        match fit {
            None => {
                slice.push(left_ratio * rhs[0]);
                slice.extend_from_slice(&rhs);
                slice.push(right_ratio * rhs[m - 1]);
            }
            Some(f) => {
                slice.push(f.left);
                slice.extend_from_slice(&rhs);
                slice.push(f.right);
            }
        }
        slice
    }

    fn fixed_point(
        &self,
        slice_index: usize,
        w_next: &[f64],
        bounds: Option<(f64, f64)>,
        fit: Option<BoundaryFit>,
    ) -> Result<(Vec<f64>, usize, usize), DualError> {
        let wealth = self.bundle.utility().depends_on_wealth();
        let iterate_needed = wealth || fit.is_some();
        let mut iterate = w_next.to_vec();
        let mut fit = fit;
        let mut change = f64::INFINITY;
        for k in 1..=self.settings.max_fixed_point_iter {
            if k > 1 && fit.is_some() {
                fit = Some(boundary_values(&iterate, self.grid, self.q, 5)?);
            }
            let (source, _) = self.source(&iterate, bounds)?;
            let next = self.implicit_solve(w_next, &source, fit);
            change = next
                .iter()
                .zip(&iterate)
                .map(|(a, b)| (a - b).abs() / (1.0 + a.abs()))
                .fold(0.0, f64::max);
            iterate = next;
            if !iterate_needed || change < self.settings.fixed_point_tol {
                let (_, active) = if wealth {
                    self.source(&iterate, bounds)?
                } else {
                    (Vec::new(), 0)
                };
                return Ok((iterate, k, active));
            }
        }
        Err(DualError::FixedPointDivergence {
            slice: slice_index,
            change,
        })
    }
}

/// One implicit step from slice `n + 1` to slice `n`.
pub fn step_backward(
    w_next: &[f64],
    n: usize,
    grid: &LogGrid,
    bundle: &ConjugateBundle,
    market: &MarketModel,
    settings: &SolverSettings,
) -> Result<StepOutcome, DualError> {
    let t = grid.t(n);
    let ctx = StepContext {
        grid,
        bundle,
        settings,
        q: bundle.utility().q(),
        t,
        lambda: market.lambda(t),
    };
    let fit = match settings.boundary {
        BoundaryClosure::PowerLaw | BoundaryClosure::FlatRight => None,
        BoundaryClosure::LaggedFit => Some(boundary_values(w_next, grid, ctx.q, 5)?),
    };
    let bounds = clamp_band(w_next, grid, settings.clamp_widen);
    let (mut slice, mut iterations, mut active) = ctx.fixed_point(n, w_next, bounds, fit)?;
    let mut used = bounds;
    let mut rebanded = false;
    let interior = grid.n_y - 2;
    if active * 100 > interior {
        // The gradient range moved by more than the band allows (a slice
        // leaving a degenerate terminal condition); reband on the iterate.
        if let Some(band) = clamp_band(&slice, grid, settings.clamp_widen) {
            let (s, it, a) = ctx.fixed_point(n, w_next, Some(band), fit)?;
            slice = s;
            iterations += it;
            active = a;
            used = Some(band);
            rebanded = true;
        }
    }
    check_slice(&slice, n, grid, settings)?;
    Ok(StepOutcome {
        slice,
        iterations,
        clamp_active: active,
        bounds: used,
        rebanded,
    })
}

fn check_slice(
    slice: &[f64],
    n: usize,
    grid: &LogGrid,
    settings: &SolverSettings,
) -> Result<(), DualError> {
    let h = grid.d_xi();
    for (j, v) in slice.iter().enumerate() {
        if !v.is_finite() {
            return Err(DualError::NonFinite { slice: n, node: j });
        }
    }
    for j in 1..grid.n_y - 1 {
        let second = (slice[j + 1] - 2.0 * slice[j] + slice[j - 1]) / (h * h);
        let first = (slice[j + 1] - slice[j - 1]) / (2.0 * h);
        let y2_w_yy = second - first;
        if y2_w_yy < -settings.convexity_tol * (1.0 + slice[j].abs()) {
            return Err(DualError::NonConvexSlice {
                slice: n,
                node: j,
                value: y2_w_yy,
            });
        }
    }
    Ok(())
}

/// Derivative fields of one slice: fourth-order stencils in `xi` away from
/// the edges, second order next to them, the power-law tail on them.
fn right_exponent(boundary: BoundaryClosure, q: f64) -> f64 {
    if boundary == BoundaryClosure::FlatRight {
        0.0
    } else {
        q
    }
}

fn slice_derivatives(slice: &[f64], grid: &LogGrid, q: f64, q_right: f64) -> (Vec<f64>, Vec<f64>) {
    let n = grid.n_y;
    let h = grid.d_xi();
    let mut w_y = vec![0.0; n];
    let mut w_yy = vec![0.0; n];
    for j in 1..n - 1 {
        let y = grid.y(j);
        let (first, second) = if j >= 2 && j + 2 < n {
            let (a, b, c, d, e) = (
                slice[j - 2],
                slice[j - 1],
                slice[j],
                slice[j + 1],
                slice[j + 2],
            );
            (
                (a - 8.0 * b + 8.0 * d - e) / (12.0 * h),
                (-a + 16.0 * b - 30.0 * c + 16.0 * d - e) / (12.0 * h * h),
            )
        } else {
            (
                (slice[j + 1] - slice[j - 1]) / (2.0 * h),
                (slice[j + 1] - 2.0 * slice[j] + slice[j - 1]) / (h * h),
            )
        };
        w_y[j] = first / y;
        w_yy[j] = (second - first) / (y * y);
    }
    for (j, e) in [(0, q), (n - 1, q_right)] {
        let y = grid.y(j);
        w_y[j] = -e * slice[j] / y;
        w_yy[j] = e * (e + 1.0) * slice[j] / (y * y);
    }
    (w_y, w_yy)
}

fn max_residual(sol: &DualSolution, bundle: &ConjugateBundle) -> Result<f64, DualError> {
    let mut worst: f64 = 0.0;
    for n in 0..sol.grid.n_t {
        let t = sol.grid.t(n);
        for j in 1..sol.grid.n_y - 1 {
            let y = sol.grid.y(j);
            let diffusion = sol.lambda[n] * y * y * sol.w_yy[n][j];
            let source = bundle.u1_star(t, y, (-sol.w_y[n][j]).max(0.0))?;
            let w_t = sol.w_t(n, j);
            let r = -w_t - diffusion - source;
            worst = worst.max(r.abs() / (1.0 + w_t.abs() + diffusion.abs() + source.abs()));
        }
    }
    Ok(worst)
}

fn sweep(
    market: &MarketModel,
    bundle: &ConjugateBundle,
    grid: &LogGrid,
    settings: &SolverSettings,
) -> Result<DualSolution, DualError> {
    let q = bundle.utility().q();
    let lambda: Vec<f64> = grid.times().iter().map(|&t| market.lambda(t)).collect();
    let zero_rows = || vec![vec![0.0; grid.n_y]; grid.n_t + 1];
    if bundle.utility().is_zero() {
        return Ok(DualSolution {
            grid: *grid,
            q,
            w: zero_rows(),
            w_y: zero_rows(),
            w_yy: zero_rows(),
            clamp_bounds: vec![None; grid.n_t],
            lambda,
            diagnostics: DualDiagnostics {
                iterations: vec![0; grid.n_t],
                clamp_active: vec![0; grid.n_t],
                ..Default::default()
            },
        });
    }
    let mut w = vec![Vec::new(); grid.n_t + 1];
    w[grid.n_t] = terminal_slice(grid, bundle, settings.saturation_cap)?;
    let mut clamp_bounds = vec![None; grid.n_t];
    let mut diagnostics = DualDiagnostics {
        iterations: vec![0; grid.n_t],
        clamp_active: vec![0; grid.n_t],
        ..Default::default()
    };
    for n in (0..grid.n_t).rev() {
        let step = step_backward(&w[n + 1], n, grid, bundle, market, settings)?;
        w[n] = step.slice;
        clamp_bounds[n] = step.bounds;
        diagnostics.iterations[n] = step.iterations;
        diagnostics.clamp_active[n] = step.clamp_active;
        diagnostics.clamp_rebands += step.rebanded as usize;
    }
    let (w_y, w_yy): (Vec<_>, Vec<_>) = w
        .iter()
        .map(|s| slice_derivatives(s, grid, q, right_exponent(settings.boundary, q)))
        .unzip();
    let mut sol = DualSolution {
        grid: *grid,
        q,
        w,
        w_y,
        w_yy,
        clamp_bounds,
        lambda,
        diagnostics,
    };
    sol.diagnostics.max_residual = max_residual(&sol, bundle)?;
    Ok(sol)
}

/// Full backward sweep. With `sensitivity_check` set the problem is solved
/// a second time with `y_min` halved and a [`BoundaryLayerWarning`] is
/// attached when `W(0, y_min)` moves by more than 1%.
pub fn solve_dual(
    market: &MarketModel,
    bundle: &ConjugateBundle,
    grid: &LogGrid,
    settings: &SolverSettings,
) -> Result<DualSolution, DualError> {
    let mut sol = sweep(market, bundle, grid, settings)?;
    if settings.sensitivity_check && !sol.is_zero() {
        let wide = grid.extended_left();
        let relaxed = SolverSettings {
            sensitivity_check: false,
            ..*settings
        };
        let other = sweep(market, bundle, &wide, &relaxed)?;
        let offset = wide.n_y - grid.n_y;
        let (a, b) = (sol.w[0][0], other.w[0][offset]);
        let change = (a - b).abs() / a.abs().max(1e-300);
        if change > 0.01 {
            sol.diagnostics.boundary_warning = Some(BoundaryLayerWarning {
                y_min: grid.y_min,
                relative_change: change,
            });
        }
    }
    Ok(sol)
}

/// Richardson extrapolation in time: solves on `grid` and on `grid` with
/// twice the steps, then returns `2 W_fine - W_coarse` on the coarse
/// slices. Cancels the first-order time error of the implicit scheme.
pub fn solve_dual_extrapolated(
    market: &MarketModel,
    bundle: &ConjugateBundle,
    grid: &LogGrid,
    settings: &SolverSettings,
) -> Result<DualSolution, DualError> {
    let coarse = solve_dual(market, bundle, grid, settings)?;
    let fine_grid = LogGrid {
        n_t: 2 * grid.n_t,
        ..*grid
    };
    let fine = solve_dual(market, bundle, &fine_grid, settings)?;
    let combine = |c: &[Vec<f64>], f: &[Vec<f64>]| -> Vec<Vec<f64>> {
        c.iter()
            .enumerate()
            .map(|(n, row)| {
                row.iter()
                    .zip(&f[2 * n])
                    .map(|(a, b)| 2.0 * b - a)
                    .collect()
            })
            .collect()
    };
    let mut diagnostics = coarse.diagnostics.clone();
    diagnostics.max_residual = diagnostics.max_residual.max(fine.diagnostics.max_residual);
    diagnostics.boundary_warning = diagnostics
        .boundary_warning
        .or(fine.diagnostics.boundary_warning);
    Ok(DualSolution {
        w: combine(&coarse.w, &fine.w),
        w_y: combine(&coarse.w_y, &fine.w_y),
        w_yy: combine(&coarse.w_yy, &fine.w_yy),
        diagnostics,
        ..coarse
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct DualInvariantReport {
    pub checks: Vec<InvariantCheck>,
    /// Growth constant with `W <= K_W (1 + y^-q)`.
    pub growth_constant: f64,
    /// Share of interior nodes with an inactive clamp, over all slices.
    pub clamp_inactive_share: f64,
}

impl DualInvariantReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&InvariantCheck> {
        self.checks.iter().find(|c| c.name == name)
    }
}

/// Coefficients `B(t_n)` with `W(t_n, y) <= B(t_n) y^-q`, from the explicit
/// dual controls `u = alpha Y`.
fn power_growth_bound(family: &PowerUtility, market: &MarketModel, grid: &LogGrid) -> Vec<f64> {
    let p = family.p;
    let q = family.q();
    let weight = |a: f64| (1.0 - p) / p * a.max(0.0).powf(1.0 / (1.0 - p));
    let a_t = weight(family.a_terminal);
    let without_wealth = family.a_x.is_zero();
    let alphas: &[f64] = if without_wealth {
        &[0.0]
    } else {
        &[0.25, 0.5, 1.0, 2.0, 4.0]
    };
    const STEPS: usize = 400;
    grid.times()
        .iter()
        .map(|&t| {
            let span = grid.horizon - t;
            let ds = span / STEPS as f64;
            // cumulative integral of theta^2 on the quadrature nodes
            let mut theta_sq = vec![0.0; STEPS + 1];
            for k in 1..=STEPS {
                let (s0, s1) = (t + (k - 1) as f64 * ds, t + k as f64 * ds);
                let f = |s: f64| market.theta(s).powi(2);
                theta_sq[k] =
                    theta_sq[k - 1] + ds / 6.0 * (f(s0) + 4.0 * f(0.5 * (s0 + s1)) + f(s1));
            }
            alphas
                .iter()
                .map(|&alpha| {
                    let moment = |k: usize| {
                        (alpha * q * k as f64 * ds + 0.5 * q * (q + 1.0) * theta_sq[k]).exp()
                    };
                    let running = |k: usize| {
                        let s = t + k as f64 * ds;
                        let mut v = weight(family.a_c.eval(s));
                        if !without_wealth {
                            v += weight(family.a_x.eval(s)) * alpha.powf(-q);
                        }
                        v * moment(k)
                    };
                    let mut integral = 0.0;
                    if span > 0.0 {
                        for k in 0..=STEPS {
                            let w = if k == 0 || k == STEPS { 0.5 } else { 1.0 };
                            integral += w * running(k);
                        }
                        integral *= ds;
                    }
                    integral + a_t * moment(STEPS)
                })
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

/// Discrete checks of the structural properties of the dual value function
/// at every interior node of every non-terminal slice.
pub fn check_dual_invariants(
    sol: &DualSolution,
    bundle: &ConjugateBundle,
    market: &MarketModel,
) -> Result<DualInvariantReport, DualError> {
    let grid = &sol.grid;
    let q = sol.q;
    let positive_required = bundle.utility().divergence.is_some();
    let mut nonneg = Tracker::new("nonnegative");
    let mut positive = Tracker::new("positive_interior");
    let mut slope = Tracker::new("decreasing");
    let mut convex = Tracker::new("convex");
    let mut monotone = Tracker::new("time_monotone");
    let mut jensen = Tracker::new("jensen_lower_bound");
    let mut growth = Tracker::new("growth_bound");
    let terminal: Vec<f64> = sol.w[grid.n_t].clone();
    let bound = bundle
        .utility()
        .as_power()
        .map(|family| power_growth_bound(family, market, grid));
    let mut growth_constant: f64 = 0.0;
    for n in 0..grid.n_t {
        for j in 1..grid.n_y - 1 {
            let w = sol.w[n][j];
            let y = grid.y(j);
            let scale = 1.0 + w.abs();
            if w < 0.0 {
                nonneg.record(-w, n, j);
            }
            if positive_required && w <= 0.0 {
                positive.record(-w, n, j);
            }
            if sol.w_y[n][j] >= 0.0 {
                slope.record(sol.w_y[n][j], n, j);
            }
            if sol.w_yy[n][j] <= 0.0 {
                convex.record(-sol.w_yy[n][j], n, j);
            }
            let drop = sol.w[n + 1][j] - w;
            if drop > 1e-12 * scale {
                monotone.record(drop / scale, n, j);
            }
            let gap = terminal[j] - w;
            if gap > 1e-12 * scale {
                jensen.record(gap / scale, n, j);
            }
            match &bound {
                Some(b) => {
                    let limit = b[n] * y.powf(-q);
                    growth_constant = growth_constant.max(b[n]);
                    if w > limit * 1.01 + 1e-12 {
                        growth.record(w / limit - 1.0, n, j);
                    }
                }
                None => {
                    let ratio = w / (1.0 + y.powf(-q));
                    if !ratio.is_finite() {
                        growth.record(f64::INFINITY, n, j);
                    }
                    growth_constant = growth_constant.max(ratio);
                }
            }
        }
    }
    let mut checks: Vec<InvariantCheck> =
        [nonneg, positive, slope, convex, monotone, jensen, growth]
            .into_iter()
            .map(Tracker::finish)
            .collect();
    let interior = (grid.n_y - 2) * grid.n_t;
    let active: usize = sol.diagnostics.clamp_active.iter().sum();
    let clamp_inactive_share = 1.0 - active as f64 / interior as f64;
    let worst_slice = sol
        .diagnostics
        .clamp_active
        .iter()
        .cloned()
        .max()
        .unwrap_or(0);
    checks.push(InvariantCheck {
        name: "clamp_inactive",
        passed: worst_slice * 100 <= grid.n_y - 2,
        worst: worst_slice as f64 / (grid.n_y - 2) as f64,
        at: None,
    });
    Ok(DualInvariantReport {
        checks,
        growth_constant,
        clamp_inactive_share,
    })
}

/// Closed-form dual value for the power family with `a_x = 0`, constant
/// weights and a constant market:
/// `((1-p)/p) y^-q [a_c^(1/(1-p)) (e^(k tau) - 1) / k + a_T^(1/(1-p)) e^(k tau)]`.
pub fn merton_dual_value(p: f64, a_c: f64, a_terminal: f64, theta: f64, tau: f64, y: f64) -> f64 {
    let q = p / (1.0 - p);
    let kappa = 0.5 * q * (q + 1.0) * theta * theta;
    let growth = (kappa * tau).exp();
    let running = if kappa.abs() < 1e-14 {
        tau
    } else {
        (growth - 1.0) / kappa
    };
    let e = 1.0 / (1.0 - p);
    (1.0 - p) / p * y.powf(-q) * (a_c.powf(e) * running + a_terminal.powf(e) * growth)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::UtilityModel;

    fn bundle(p: f64, a_c: f64, a_x: f64, a_t: f64) -> ConjugateBundle {
        let u = UtilityModel::power(PowerUtility::new(p, a_c, a_x, a_t), 1.0).unwrap();
        ConjugateBundle::new(u, 1.0).unwrap()
    }

    fn market() -> MarketModel {
        MarketModel::constant(0.3, 0.5, 1.0).unwrap()
    }

    fn quiet() -> SolverSettings {
        SolverSettings {
            sensitivity_check: false,
            ..Default::default()
        }
    }

    #[test]
    fn grid_nodes_hit_both_ends() {
        let g = LogGrid::standard(1.0);
        assert_eq!(g.y(0), 1e-3);
        assert!((g.y(g.n_y - 1) / 1e3 - 1.0).abs() < 1e-12);
        assert!((g.y(g.n_y - 2) - 1e-3 * ((g.n_y - 2) as f64 * g.d_xi()).exp()).abs() < 1e-9);
        assert!(LogGrid::new(1.0, 1.0, 100, 100, 1.0).is_err());
        assert!(LogGrid::new(1e-3, 1e3, 15, 100, 1.0).is_err());
        assert!(LogGrid::new(1e-3, 1e3, 100, 7, 1.0).is_err());
    }

    #[test]
    fn clamp_examples() {
        assert_eq!(clamp_gradient(0.5, 1.0, 10.0), 1.0);
        assert_eq!(clamp_gradient(5.0, 1.0, 10.0), 5.0);
        assert_eq!(clamp_gradient(50.0, 1.0, 10.0), 10.0);
        assert_eq!(
            clamp_gradient(clamp_gradient(50.0, 1.0, 10.0), 1.0, 10.0),
            10.0
        );
    }

    #[test]
    fn terminal_slice_examples() {
        let g = LogGrid::new(0.25, 2.0, 16, 8, 1.0).unwrap();
        let s = terminal_slice(&g, &bundle(0.5, 0.0, 0.0, 1.0), 1e12).unwrap();
        // U2 = 2 sqrt x, conjugate 1/y
        assert!((s[g.n_y - 1] - 0.5).abs() < 1e-12);
        let s = terminal_slice(&g, &bundle(0.5, 0.0, 0.0, 1.0), 1e12).unwrap();
        assert!((s[0] - 4.0).abs() < 1e-12);
        let zero = bundle(0.5, 0.0, 0.0, 0.0);
        assert!(terminal_slice(&g, &zero, 1e12)
            .unwrap()
            .iter()
            .all(|&v| v == 0.0));
        let far = LogGrid::new(1e-15, 1.0, 64, 8, 1.0).unwrap();
        assert!(matches!(
            terminal_slice(&far, &bundle(0.5, 0.0, 0.0, 1.0), 1e12),
            Err(DualError::SaturatedConjugate { .. })
        ));
    }

    #[test]
    fn single_step_pure_diffusion() {
        // W(T) = 1/y; one step of size 0.01 with theta = 0.6
        let m = MarketModel::constant(0.3, 0.5, 0.08).unwrap();
        let b = bundle(0.5, 0.0, 0.0, 1.0);
        let g = LogGrid::new(1e-3, 1e3, 401, 8, 0.08).unwrap();
        let terminal = terminal_slice(&g, &b, 1e12).unwrap();
        let step = step_backward(&terminal, 7, &g, &b, &m, &quiet()).unwrap();
        assert!((g.y(200) - 1.0).abs() < 1e-12);
        assert!(
            (step.slice[200] - 1.003606).abs() < 1e-5,
            "{}",
            step.slice[200]
        );
    }

    #[test]
    fn zero_model_gives_zero_solution() {
        let b = bundle(0.5, 0.0, 0.0, 0.0);
        let g = LogGrid::new(1e-3, 1e3, 64, 16, 1.0).unwrap();
        let sol = solve_dual(&market(), &b, &g, &SolverSettings::default()).unwrap();
        assert!(sol.is_zero());
        let zero = vec![0.0; g.n_y];
        let step = step_backward(&zero, 3, &g, &b, &market(), &quiet()).unwrap();
        assert!(step.slice.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn time_extrapolation_cuts_error() {
        let grid = LogGrid::new(1e-3, 1e3, 400, 50, 1.0).unwrap();
        let b = bundle(0.5, 1.0, 0.0, 1.0);
        let err = |sol: &DualSolution| {
            (0..grid.n_y)
                .filter(|&j| (0.2..=5.0).contains(&grid.y(j)))
                .map(|j| {
                    (sol.w[0][j] / merton_dual_value(0.5, 1.0, 1.0, 0.6, 1.0, grid.y(j)) - 1.0)
                        .abs()
                })
                .fold(0.0, f64::max)
        };
        let plain = solve_dual(&market(), &b, &grid, &quiet()).unwrap();
        let extrapolated = solve_dual_extrapolated(&market(), &b, &grid, &quiet()).unwrap();
        assert_eq!(extrapolated.w.len(), grid.n_t + 1);
        assert!(
            err(&extrapolated) < 0.1 * err(&plain),
            "{} vs {}",
            err(&extrapolated),
            err(&plain)
        );
    }

    #[test]
    fn merton_consumption_matches_oracle() {
        let b = bundle(0.5, 1.0, 0.0, 0.0);
        let g = LogGrid::standard(1.0);
        let sol = solve_dual(&market(), &b, &g, &SolverSettings::default()).unwrap();
        let w = sol.value_at(0, 1.0);
        assert!((w - 1.203694).abs() / 1.203694 < 5e-3, "{w}");
        let mut worst: f64 = 0.0;
        for n in 0..=180 {
            for j in 0..g.n_y {
                let y = g.y(j);
                if (0.2..=5.0).contains(&y) {
                    let exact = merton_dual_value(0.5, 1.0, 0.0, 0.6, 1.0 - g.t(n), y);
                    worst = worst.max((sol.w[n][j] - exact).abs() / exact);
                }
            }
        }
        assert!(worst < 5e-3, "{worst}");
        assert!(sol.diagnostics.boundary_warning.is_none());
        let report = check_dual_invariants(&sol, &b, &market()).unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn lagged_fit_closure_also_converges() {
        let b = bundle(0.5, 1.0, 0.0, 1.0);
        let g = LogGrid::standard(1.0);
        let s = SolverSettings {
            boundary: BoundaryClosure::LaggedFit,
            ..quiet()
        };
        let sol = solve_dual(&market(), &b, &g, &s).unwrap();
        let exact = merton_dual_value(0.5, 1.0, 1.0, 0.6, 1.0, 1.0);
        assert!((sol.value_at(0, 1.0) - exact).abs() / exact < 5e-3);
    }

    #[test]
    fn boundary_fit_reproduces_power_law() {
        let g = LogGrid::standard(1.0);
        let slice: Vec<f64> = g.ys().iter().map(|y| 1.7 / y).collect();
        let fit = boundary_values(&slice, &g, 1.0, 5).unwrap();
        assert!((fit.left / slice[0] - 1.0).abs() < 1e-6);
        assert!((fit.right / slice[g.n_y - 1] - 1.0).abs() < 1e-6);
        let zero = boundary_values(&vec![0.0; g.n_y], &g, 1.0, 5).unwrap();
        assert_eq!((zero.left, zero.right), (0.0, 0.0));
        assert!(zero.degenerate);
    }

    #[test]
    fn doubling_y_max_barely_moves_interior() {
        let b = bundle(0.5, 1.0, 0.0, 0.0);
        let s = SolverSettings {
            boundary: BoundaryClosure::LaggedFit,
            ..quiet()
        };
        let g = LogGrid::new(1e-3, 1e3, 400, 50, 1.0).unwrap();
        let wide = LogGrid::new(
            1e-3,
            2e3,
            400 + (2f64.ln() / g.d_xi()).round() as usize,
            50,
            1.0,
        )
        .unwrap();
        let a = solve_dual(&market(), &b, &g, &s).unwrap();
        let c = solve_dual(&market(), &b, &wide, &s).unwrap();
        for j in 0..g.n_y {
            let y = g.y(j);
            if (0.2..=5.0).contains(&y) {
                let other = c.value_at(0, y);
                assert!((a.w[0][j] - other).abs() / other < 1e-4);
            }
        }
    }

    #[test]
    fn wealth_utility_keeps_invariants() {
        let b = bundle(0.5, 1.0, 1.0, 1.0);
        let g = LogGrid::new(1e-3, 1e3, 200, 100, 1.0).unwrap();
        let sol = solve_dual(&market(), &b, &g, &SolverSettings::default()).unwrap();
        let report = check_dual_invariants(&sol, &b, &market()).unwrap();
        assert!(report.passed(), "{report:?}");
        assert!(report.clamp_inactive_share > 0.99);
        assert!(sol.diagnostics.iterations.iter().all(|&k| k < 50));
        // wealth utility raises the value above the consumption-only case
        let base = solve_dual(&market(), &bundle(0.5, 1.0, 0.0, 1.0), &g, &quiet()).unwrap();
        assert!(sol.w[0][100] > base.w[0][100]);
    }

    #[test]
    fn wealth_utility_without_bequest() {
        let b = bundle(0.5, 1.0, 1.0, 0.0);
        let g = LogGrid::new(1e-3, 1e3, 200, 100, 1.0).unwrap();
        let sol = solve_dual(&market(), &b, &g, &quiet()).unwrap();
        let report = check_dual_invariants(&sol, &b, &market()).unwrap();
        assert!(report.passed(), "{report:?}");
    }
}
