//! Recovery of the primal value function and the optimal feedback maps
//! from a dual solution:
//!
//! ```text
//! V(t, x) = inf_y {W(t, y) + x y},   V_x = [W_y(t, .)]^-1(-x),   V_xx = -1 / W_yy
//! ```

use serde::Serialize;
use thiserror::Error;

use crate::checks::{InvariantCheck, Tracker};
use crate::dual_solver::DualSolution;
use crate::interp::Pchip;
use crate::model::MarketModel;
use crate::transforms::{
    discrete_inf_transform, discrete_sup_transform, ConjugateBundle, TransformError,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PrimalError {
    #[error("minimiser for x = {x:e} at slice {slice} sits on the grid boundary")]
    ArgminAtBoundary { slice: usize, x: f64 },
    #[error("x = {x:e} at slice {slice} is outside the dual gradient range; widen the dual grid")]
    OutOfRange { slice: usize, x: f64 },
    #[error("curvature {v_xx:e} at t = {t}, x = {x:e} is too close to zero")]
    DegenerateCurvature { t: f64, x: f64, v_xx: f64 },
    #[error("duality gap {gap:e} at slice {slice}, x = {x:e} is below tolerance")]
    NegativeGapBeyondTolerance { slice: usize, x: f64, gap: f64 },
    #[error("the dual gradient ranges of the slices do not overlap")]
    EmptyRange,
    #[error(transparent)]
    Transform(#[from] TransformError),
}

/// Smallest admissible `|V_xx|` for the portfolio map.
pub const MIN_CURVATURE: f64 = 1e-12;

/// Lower gap tolerance of [`weak_duality_gap`].
pub const GAP_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RecoverySettings {
    pub n_x: usize,
    /// Explicit `[x_min, x_max]`; derived from the dual gradients otherwise.
    pub x_range: Option<(f64, f64)>,
    /// Shrink factor applied at both ends of the derived range.
    pub shrink: f64,
}

impl Default for RecoverySettings {
    fn default() -> Self {
        Self {
            n_x: 400,
            x_range: None,
            shrink: 1.05,
        }
    }
}

/// Minimum of `W(t_n, y) + x y`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LegendreMin {
    pub value: f64,
    /// Refined minimiser.
    pub y_star: f64,
    /// Minimum over the grid nodes alone.
    pub discrete: f64,
    /// Bound on `discrete - value` from the local curvature.
    pub grid_tol: f64,
}

/// Parabola through three equally spaced samples: returns the vertex
/// offset (in units of the spacing) and the vertex value.
fn parabola_vertex(left: f64, mid: f64, right: f64) -> (f64, f64) {
    let curvature = left - 2.0 * mid + right;
    if curvature <= 0.0 {
        return (0.0, mid);
    }
    let offset = (left - right) / (2.0 * curvature);
    (
        offset.clamp(-1.0, 1.0),
        mid - (right - left).powi(2) / (8.0 * curvature),
    )
}

fn refine_min(dual: &DualSolution, n: usize, x: f64, j: usize) -> Result<LegendreMin, PrimalError> {
    let grid = &dual.grid;
    if j == 0 || j == grid.n_y - 1 {
        return Err(PrimalError::ArgminAtBoundary { slice: n, x });
    }
    let f = |k: usize| dual.w[n][k] + x * grid.y(k);
    let (left, mid, right) = (f(j - 1), f(j), f(j + 1));
    let (offset, value) = parabola_vertex(left, mid, right);
    let curvature = (left - 2.0 * mid + right).max(0.0);
    Ok(LegendreMin {
        value: value.min(mid),
        y_star: grid.y(j) * (offset * grid.d_xi()).exp(),
        discrete: mid,
        grid_tol: curvature / 8.0,
    })
}

/// `inf_y {W(t_n, y) + x y}` over the grid with parabolic refinement in
/// `log y` around the discrete minimiser.
pub fn legendre_min(dual: &DualSolution, n: usize, x: f64) -> Result<LegendreMin, PrimalError> {
    let grid = &dual.grid;
    let mut best = 0;
    let mut best_value = f64::INFINITY;
    for j in 0..grid.n_y {
        let v = dual.w[n][j] + x * grid.y(j);
        if v < best_value {
            best_value = v;
            best = j;
        }
    }
    refine_min(dual, n, x, best)
}

/// Inverse of the dual gradient on one slice: `y` as a function of
/// `s = -log(-W_y)`, monotone cubic in `log y`.
#[derive(Debug, Clone)]
pub struct GradientInverse {
    slice: usize,
    spline: Pchip,
}

impl GradientInverse {
    pub fn new(dual: &DualSolution, n: usize) -> Result<Self, PrimalError> {
        let grid = &dual.grid;
        let mut s = Vec::with_capacity(grid.n_y);
        let mut xi = Vec::with_capacity(grid.n_y);
        for j in 1..grid.n_y - 1 {
            let g = -dual.w_y[n][j];
            if !(g > 0.0) {
                continue;
            }
            let sj = -g.ln();
            if s.last().is_some_and(|&last| sj <= last) {
                continue;
            }
            s.push(sj);
            xi.push(grid.y(j).ln());
        }
        if s.len() < 2 {
            return Err(PrimalError::OutOfRange {
                slice: n,
                x: f64::NAN,
            });
        }
        Ok(Self {
            slice: n,
            spline: Pchip::new(s, xi),
        })
    }

    /// `[x_lo, x_hi]` covered by the interior gradients.
    pub fn x_range(&self) -> (f64, f64) {
        let (lo, hi) = self.spline.domain();
        ((-hi).exp(), (-lo).exp())
    }

    /// The `y` with `W_y(t_n, y) = -x`.
    pub fn y_for(&self, x: f64) -> Result<f64, PrimalError> {
        let s = -x.ln();
        let (lo, hi) = self.spline.domain();
        if !(s >= lo && s <= hi) {
            return Err(PrimalError::OutOfRange {
                slice: self.slice,
                x,
            });
        }
        Ok(self.spline.eval(s).exp())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Derivatives {
    pub v_x: f64,
    pub v_xx: f64,
    pub v_t: f64,
}

fn interp_in_log(
    dual: &DualSolution,
    y: f64,
    field: impl Fn(usize) -> f64,
) -> (f64, f64, usize, f64) {
    let grid = &dual.grid;
    let pos = (y / grid.y_min).ln() / grid.d_xi();
    let j = (pos.floor().max(1.0) as usize).min(grid.n_y - 3);
    let w = (pos - j as f64).clamp(0.0, 1.0);
    (field(j), field(j + 1), j, w)
}

/// `V_x`, `V_xx`, `V_t` at `(t_n, x)` for a non-terminal slice, given the
/// slice's gradient inverse.
pub fn recover_derivatives_with(
    dual: &DualSolution,
    inverse: &GradientInverse,
    n: usize,
    x: f64,
) -> Result<Derivatives, PrimalError> {
    let y = inverse.y_for(x)?;
    let (a, b, _, w) = interp_in_log(dual, y, |k| dual.w_yy[n][k]);
    let w_yy = if a > 0.0 && b > 0.0 {
        (a.ln() * (1.0 - w) + b.ln() * w).exp()
    } else {
        a * (1.0 - w) + b * w
    };
    let (ta, tb, _, w) = interp_in_log(dual, y, |k| dual.w_t(n, k));
    Ok(Derivatives {
        v_x: y,
        v_xx: -1.0 / w_yy,
        v_t: ta * (1.0 - w) + tb * w,
    })
}

pub fn recover_derivatives(
    dual: &DualSolution,
    n: usize,
    x: f64,
) -> Result<Derivatives, PrimalError> {
    recover_derivatives_with(dual, &GradientInverse::new(dual, n)?, n, x)
}

/// Optimal consumption rate at marginal utility `v_x`: zero at `x = 0` and
/// without consumption utility.
pub fn consumption_feedback(
    bundle: &ConjugateBundle,
    t: f64,
    x: f64,
    v_x: f64,
) -> Result<f64, PrimalError> {
    if x <= 0.0 {
        return Ok(0.0);
    }
    Ok(bundle.c_star(t, v_x, x)?)
}

/// Optimal amount in the risky asset, `-b V_x / (sigma^2 V_xx)`.
pub fn portfolio_feedback(
    market: &MarketModel,
    t: f64,
    x: f64,
    v_x: f64,
    v_xx: f64,
) -> Result<f64, PrimalError> {
    if x <= 0.0 {
        return Ok(0.0);
    }
    if !(v_xx.abs() >= MIN_CURVATURE) {
        return Err(PrimalError::DegenerateCurvature { t, x, v_xx });
    }
    let sigma = market.sigma(t);
    Ok(-market.b(t) * v_x / (sigma * sigma * v_xx))
}

/// `min_j {W(t_n, y_j) + x y_j} - v`. Fails below `-GAP_FLOOR`.
pub fn weak_duality_gap(dual: &DualSolution, n: usize, x: f64, v: f64) -> Result<f64, PrimalError> {
    let grid = &dual.grid;
    let discrete = (0..grid.n_y)
        .map(|j| dual.w[n][j] + x * grid.y(j))
        .fold(f64::INFINITY, f64::min);
    let gap = discrete - v;
    if gap < -GAP_FLOOR {
        return Err(PrimalError::NegativeGapBeyondTolerance { slice: n, x, gap });
    }
    Ok(gap)
}

/// Grid-sampled primal value function and feedback maps, indexed
/// `[time slice][x node]` on the time grid of the dual solution.
#[derive(Debug, Clone)]
pub struct PrimalSolution {
    pub times: Vec<f64>,
    pub x_grid: Vec<f64>,
    pub v: Vec<Vec<f64>>,
    pub v_x: Vec<Vec<f64>>,
    pub v_xx: Vec<Vec<f64>>,
    pub v_t: Vec<Vec<f64>>,
    /// Consumption rate; infinite where the marginal value vanishes.
    pub consumption: Vec<Vec<f64>>,
    /// Amount held in the risky asset.
    pub investment: Vec<Vec<f64>>,
    pub duality_gap: Vec<Vec<f64>>,
    /// Curvature bound on the gap per node.
    pub grid_tol: Vec<Vec<f64>>,
    /// Refined minimiser `y*(x)` (`NaN` on a degenerate terminal slice).
    pub argmin: Vec<Vec<f64>>,
}

impl PrimalSolution {
    pub fn n_t(&self) -> usize {
        self.times.len() - 1
    }

    /// Linear interpolation of `V(t_n, .)` in `log x`, flat outside.
    pub fn value_at(&self, n: usize, x: f64) -> f64 {
        let lx: Vec<f64> = self.x_grid.iter().map(|v| v.ln()).collect();
        crate::numeric::interp_linear(&lx, &self.v[n], x.ln())
    }

    pub fn max_gap(&self) -> f64 {
        self.duality_gap
            .iter()
            .flatten()
            .cloned()
            .fold(0.0, f64::max)
    }
}

/// Geometric x-grid inside every non-terminal slice's gradient range.
fn x_grid(
    inverses: &[GradientInverse],
    settings: &RecoverySettings,
) -> Result<Vec<f64>, PrimalError> {
    let (lo, hi) = match settings.x_range {
        Some(r) => r,
        None => {
            let (mut lo, mut hi) = (0.0f64, f64::INFINITY);
            for inv in inverses {
                let (a, b) = inv.x_range();
                lo = lo.max(a);
                hi = hi.min(b);
            }
            (lo * settings.shrink, hi / settings.shrink)
        }
    };
    if !(lo > 0.0 && hi > lo) || settings.n_x < 2 {
        return Err(PrimalError::EmptyRange);
    }
    let step = (hi / lo).ln() / (settings.n_x - 1) as f64;
    Ok((0..settings.n_x)
        .map(|i| {
            if i == settings.n_x - 1 {
                hi
            } else {
                lo * (i as f64 * step).exp()
            }
        })
        .collect())
}

/// Recovers `V` and the feedback maps on every slice of the dual solution.
/// The terminal slice uses `U2` and its derivatives directly.
pub fn recover_primal(
    dual: &DualSolution,
    bundle: &ConjugateBundle,
    market: &MarketModel,
    settings: &RecoverySettings,
) -> Result<PrimalSolution, PrimalError> {
    let nt = dual.grid.n_t;
    let inverses: Vec<GradientInverse> = (0..nt)
        .map(|n| GradientInverse::new(dual, n))
        .collect::<Result<_, _>>()?;
    let xs = x_grid(&inverses, settings)?;
    let nx = xs.len();
    let rows = || vec![vec![0.0; nx]; nt + 1];
    let mut sol = PrimalSolution {
        times: dual.grid.times(),
        x_grid: xs.clone(),
        v: rows(),
        v_x: rows(),
        v_xx: rows(),
        v_t: rows(),
        consumption: rows(),
        investment: rows(),
        duality_gap: rows(),
        grid_tol: rows(),
        argmin: rows(),
    };
    let ys = dual.grid.ys();
    for n in 0..nt {
        let t = dual.grid.t(n);
        let mins = discrete_inf_transform(&ys, &dual.w[n], &xs);
        for (i, &x) in xs.iter().enumerate() {
            let m = refine_min(dual, n, x, mins[i].1)?;
            let d = recover_derivatives_with(dual, &inverses[n], n, x)?;
            sol.v[n][i] = m.value;
            sol.argmin[n][i] = m.y_star;
            sol.grid_tol[n][i] = m.grid_tol;
            sol.duality_gap[n][i] = weak_duality_gap(dual, n, x, m.value)?;
            sol.v_x[n][i] = d.v_x;
            sol.v_xx[n][i] = d.v_xx;
            sol.v_t[n][i] = d.v_t;
            sol.consumption[n][i] = consumption_feedback(bundle, t, x, d.v_x)?;
            sol.investment[n][i] = portfolio_feedback(market, t, x, d.v_x, d.v_xx)?;
        }
    }
    let utility = bundle.utility();
    let t_end = dual.grid.horizon;
    let dt = dual.grid.dt();
    for (i, &x) in xs.iter().enumerate() {
        let v = utility.u2(x);
        let v_x = utility.u2_x(x);
        let v_xx = utility.u2_xx(x);
        sol.v[nt][i] = v;
        sol.v_x[nt][i] = v_x;
        sol.v_xx[nt][i] = v_xx;
        sol.v_t[nt][i] = (v - sol.v[nt - 1][i]) / dt;
        sol.argmin[nt][i] = if v_x > 0.0 { v_x } else { f64::NAN };
        sol.consumption[nt][i] = if v_x > 0.0 {
            consumption_feedback(bundle, t_end, x, v_x)?
        } else {
            f64::INFINITY
        };
        sol.investment[nt][i] = if v_xx.abs() >= MIN_CURVATURE {
            portfolio_feedback(market, t_end, x, v_x, v_xx)?
        } else {
            sol.investment[nt - 1][i]
        };
    }
    Ok(sol)
}

/// Residual of the primal equation `-V_t - U1*(t, V_x, x) + lambda V_x^2 / V_xx`.
#[derive(Debug, Clone, Serialize)]
pub struct ResidualReport {
    /// Max of `|r| / (1 + |V_t|)` over interior nodes of non-terminal slices.
    pub max_scaled: f64,
    /// Root mean square of `r` over the same nodes.
    pub l2: f64,
    #[serde(skip)]
    pub field: Vec<Vec<f64>>,
}

pub fn primal_hjb_residual(
    primal: &PrimalSolution,
    market: &MarketModel,
    bundle: &ConjugateBundle,
) -> Result<ResidualReport, PrimalError> {
    let nt = primal.n_t();
    let nx = primal.x_grid.len();
    let mut field = vec![vec![0.0; nx]; nt];
    let (mut worst, mut sq, mut count) = (0.0f64, 0.0, 0usize);
    for n in 0..nt {
        let t = primal.times[n];
        let lambda = market.lambda(t);
        for i in 1..nx - 1 {
            let x = primal.x_grid[i];
            let (v_x, v_xx, v_t) = (primal.v_x[n][i], primal.v_xx[n][i], primal.v_t[n][i]);
            if v_x == 0.0 && v_xx == 0.0 && v_t == 0.0 {
                continue;
            }
            let r = -v_t - bundle.u1_star(t, v_x, x)? + lambda * v_x * v_x / v_xx;
            field[n][i] = r;
            worst = worst.max(r.abs() / (1.0 + v_t.abs()));
            sq += r * r;
            count += 1;
        }
    }
    let l2 = if count > 0 {
        (sq / count as f64).sqrt()
    } else {
        0.0
    };
    Ok(ResidualReport {
        max_scaled: worst,
        l2,
        field,
    })
}

/// Sup-transform of the recovered `V` in `x`, compared with `W` at the dual
/// nodes inside `y_window`.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct InvolutionReport {
    pub max_error: f64,
    /// Interpolation tolerance at the worst node: the curvature bound of the
    /// discrete sup plus the recovery tolerance of `V` at its maximiser.
    pub tolerance: f64,
    /// Largest `error / tolerance` over the window.
    pub worst_ratio: f64,
}

pub fn involution_check(
    primal: &PrimalSolution,
    dual: &DualSolution,
    n: usize,
    y_window: (f64, f64),
) -> InvolutionReport {
    let xs = &primal.x_grid;
    let ys: Vec<f64> = dual.grid.ys();
    let selected: Vec<usize> = (0..ys.len())
        .filter(|&j| ys[j] >= y_window.0 && ys[j] <= y_window.1)
        .collect();
    let slopes: Vec<f64> = selected.iter().map(|&j| ys[j]).collect();
    let sups = discrete_sup_transform(xs, &primal.v[n], &slopes);
    let mut report = InvolutionReport {
        max_error: 0.0,
        tolerance: 0.0,
        worst_ratio: 0.0,
    };
    for (k, &j) in selected.iter().enumerate() {
        let (value, i) = sups[k];
        let y = ys[j];
        let error = (value - dual.w[n][j]).abs();
        let local = |m: usize| primal.v[n][m] - xs[m] * y;
        let curvature = if i > 0 && i + 1 < xs.len() {
            -(local(i - 1) - 2.0 * local(i) + local(i + 1))
        } else {
            f64::INFINITY
        };
        let tolerance =
            curvature.max(0.0) / 8.0 + primal.grid_tol[n][i] + 1e-14 * (1.0 + value.abs());
        let ratio = error / tolerance;
        report.max_error = report.max_error.max(error);
        if k == 0 || ratio > report.worst_ratio {
            report.worst_ratio = ratio;
            report.tolerance = tolerance;
        }
    }
    report
}

/// Discrete checks that the recovered value function is a classical
/// candidate: terminal value, growth, signs of the derivatives, shape and
/// duality gap.
pub fn check_primal(primal: &PrimalSolution, bundle: &ConjugateBundle) -> Vec<InvariantCheck> {
    let utility = bundle.utility();
    let nt = primal.n_t();
    let xs = &primal.x_grid;
    let nx = xs.len();
    let p = utility.p;
    let mut terminal = Tracker::new("terminal_value");
    let mut nonneg = Tracker::new("nonnegative");
    let mut growth = Tracker::new("growth_bound");
    let mut increasing = Tracker::new("v_x_positive");
    let mut concave = Tracker::new("v_xx_negative");
    let mut shape = Tracker::new("concave_nondecreasing");
    let mut gap = Tracker::new("duality_gap");
    let mut argmin = Tracker::new("argmin_monotone");
    let mut consumption = Tracker::new("consumption_nonnegative");
    let k0 = (0..=nt)
        .flat_map(|n| (0..nx).map(move |i| (n, i)))
        .map(|(n, i)| primal.v[n][i] / (1.0 + xs[i].powf(p)))
        .fold(0.0, f64::max);
    for (i, &x) in xs.iter().enumerate() {
        let diff = (primal.v[nt][i] - utility.u2(x)).abs();
        if diff > 1e-12 * (1.0 + diff) {
            terminal.record(diff, nt, i);
        }
    }
    for n in 0..=nt {
        for i in 0..nx {
            let v = primal.v[n][i];
            if v < 0.0 {
                nonneg.record(-v, n, i);
            }
            if !(v.is_finite() && v <= k0 * (1.0 + xs[i].powf(p)) * (1.0 + 1e-12)) {
                growth.record(v, n, i);
            }
            if primal.consumption[n][i] < 0.0 {
                consumption.record(-primal.consumption[n][i], n, i);
            }
            if n == nt || i == 0 || i == nx - 1 {
                continue;
            }
            if !(primal.v_x[n][i] > 0.0) {
                increasing.record(-primal.v_x[n][i], n, i);
            }
            if !(primal.v_xx[n][i] < 0.0) {
                concave.record(primal.v_xx[n][i], n, i);
            }
            let left = (v - primal.v[n][i - 1]) / (xs[i] - xs[i - 1]);
            let right = (primal.v[n][i + 1] - v) / (xs[i + 1] - xs[i]);
            let scale = 1e-9 * (1.0 + left.abs());
            if right < -scale {
                shape.record(-right, n, i);
            }
            if right > left + scale {
                shape.record(right - left, n, i);
            }
            if primal.argmin[n][i + 1] > primal.argmin[n][i] * (1.0 + 1e-12) {
                argmin.record(primal.argmin[n][i + 1] / primal.argmin[n][i] - 1.0, n, i);
            }
        }
        if n < nt {
            for i in 0..nx {
                let g = primal.duality_gap[n][i];
                if g < -GAP_FLOOR
                    || g > primal.grid_tol[n][i] + 1e-14 * (1.0 + primal.v[n][i].abs())
                {
                    gap.record(g.abs(), n, i);
                }
            }
        }
    }
    [
        terminal,
        nonneg,
        growth,
        increasing,
        concave,
        shape,
        gap,
        argmin,
        consumption,
    ]
    .into_iter()
    .map(Tracker::finish)
    .collect()
}

/// Merton value `g(t)^(1-p) x^p / p` with constant weights and market:
/// `g = e^(nu tau) a_T^(1/(1-p)) + a_c^(1/(1-p)) (e^(nu tau) - 1) / nu`,
/// `nu = p theta^2 / (2 (1-p)^2)`.
pub fn merton_value(p: f64, a_c: f64, a_terminal: f64, theta: f64, tau: f64, x: f64) -> f64 {
    let nu = p * theta * theta / (2.0 * (1.0 - p).powi(2));
    let growth = (nu * tau).exp();
    let running = if nu.abs() < 1e-14 {
        tau
    } else {
        (growth - 1.0) / nu
    };
    let e = 1.0 / (1.0 - p);
    let g = growth * a_terminal.powf(e) + a_c.powf(e) * running;
    g.powf(1.0 - p) * x.powf(p) / p
}
