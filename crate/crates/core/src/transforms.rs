//! Legendre conjugates of the utilities.
//!
//! * `U1*(t, y, x) = sup_c {U1(t, c, x) - c y}` with maximiser `c*(t, y, x)`;
//! * `~U1*(t, y, u) = sup_x {U1*(t, y, x) - x u}`;
//! * `~U2(y) = sup_x {U2(x) - x y}`.
//!
//! Closed forms are used when the utility provides them; otherwise the
//! conjugates are computed by log-space bisection on the first-order
//! condition or golden-section search on the concave objective. The
//! envelope identity reads `d/dy U1*(t, y, x) = -c*(t, y, x)`.

use std::cell::RefCell;

use serde::Serialize;
use thiserror::Error;

use crate::model::{InadaCase, UtilityModel};
use crate::numeric::{concave_max_half_line, decreasing_root_log};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TransformError {
    #[error("conjugate diverges at dual argument {at}: growth condition violated")]
    UnboundedConjugate { at: f64 },
    #[error("could not bracket U1_c(t, ., x) = {y} at (t, x) = ({t}, {x}); utility is not Inada")]
    RootBracketFailure { t: f64, y: f64, x: f64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// Largest wealth explored when maximising over `x >= 0`.
pub const SEARCH_CAP: f64 = 1e15;

/// `sup_{x >= 0} {U2(x) - x y}` for an arbitrary concave `U2` with
/// `U2(0) = 0`.
pub fn conjugate_u2(u2: impl Fn(f64) -> f64, y: f64) -> Result<f64, TransformError> {
    if !(y > 0.0) {
        return Err(TransformError::InvalidArgument(format!(
            "dual argument must be positive, got {y}"
        )));
    }
    let r = concave_max_half_line(|x| u2(x) - x * y, 1.0 / y, SEARCH_CAP);
    if r.hit_cap {
        return Err(TransformError::UnboundedConjugate { at: y });
    }
    Ok(r.value.max(0.0))
}

/// The maximiser of `c -> U1(t, c, x) - c y`.
pub fn optimal_c(utility: &UtilityModel, t: f64, y: f64, x: f64) -> Result<f64, TransformError> {
    if !(y > 0.0) {
        return Err(TransformError::InvalidArgument(format!(
            "dual argument must be positive, got {y}"
        )));
    }
    if utility.inada == InadaCase::NoConsumption {
        return Ok(0.0);
    }
    if let Some(c) = utility.utility().optimal_c(t, y, x) {
        return Ok(c);
    }
    decreasing_root_log(|c| utility.u1_c(t, c, x) - y, 1.0, 1.0, 40, 1e-14)
        .ok_or(TransformError::RootBracketFailure { t, y, x })
}

/// `U1*(t, y, x)`.
pub fn conjugate_c_u1(
    utility: &UtilityModel,
    t: f64,
    y: f64,
    x: f64,
) -> Result<f64, TransformError> {
    if let Some(v) = utility.utility().conjugate_c(t, y, x) {
        return Ok(v);
    }
    let c = optimal_c(utility, t, y, x)?;
    Ok(utility.u1(t, c, x) - c * y)
}

/// `~U1*(t, y, u)`.
pub fn double_conjugate_u1(
    utility: &UtilityModel,
    t: f64,
    y: f64,
    u: f64,
) -> Result<f64, TransformError> {
    if !(y > 0.0 && u >= 0.0) {
        return Err(TransformError::InvalidArgument(format!(
            "need y > 0 and u >= 0, got ({y}, {u})"
        )));
    }
    if let Some(v) = utility.utility().double_conjugate(t, y, u) {
        if v.is_infinite() {
            return Err(TransformError::UnboundedConjugate { at: u });
        }
        return Ok(v);
    }
    if !utility.depends_on_wealth() {
        return conjugate_c_u1(utility, t, y, 0.0);
    }
    let failure = RefCell::new(None);
    let r = concave_max_half_line(
        |x| match conjugate_c_u1(utility, t, y, x) {
            Ok(v) => v - x * u,
            Err(e) => {
                failure.borrow_mut().get_or_insert(e);
                f64::NEG_INFINITY
            }
        },
        1.0 / u.max(1e-12),
        SEARCH_CAP,
    );
    if let Some(e) = failure.into_inner() {
        return Err(e);
    }
    if r.hit_cap {
        return Err(TransformError::UnboundedConjugate { at: u });
    }
    Ok(r.value)
}

/// Minimiser of `u -> ~U1*(t, y, u) - u q` over `u >= 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MarginalX {
    pub u: f64,
    /// The minimum sits on the boundary `u = 0` (no interior minimiser).
    pub boundary: bool,
}

/// Solves the inner minimisation of the dual Hamiltonian for `q < 0`.
/// At the minimiser, `~U1*(t, y, u*) - u* q = U1*(t, y, -q)`.
pub fn inverse_marginal_x(
    utility: &UtilityModel,
    t: f64,
    y: f64,
    q: f64,
) -> Result<MarginalX, TransformError> {
    if !(q < 0.0) {
        return Err(TransformError::InvalidArgument(format!(
            "gradient argument must be negative, got {q}"
        )));
    }
    if !utility.depends_on_wealth() {
        return Ok(MarginalX {
            u: 0.0,
            boundary: true,
        });
    }
    let failure = RefCell::new(None);
    let r = concave_max_half_line(
        |u| {
            if u <= 0.0 {
                return f64::NEG_INFINITY;
            }
            match double_conjugate_u1(utility, t, y, u) {
                Ok(v) => -(v - u * q),
                Err(e) => {
                    failure.borrow_mut().get_or_insert(e);
                    f64::NEG_INFINITY
                }
            }
        },
        1.0,
        SEARCH_CAP,
    );
    if let Some(e) = failure.into_inner() {
        return Err(e);
    }
    Ok(MarginalX {
        u: r.argmax,
        boundary: r.argmax <= 0.0,
    })
}

/// The conjugates of one utility model, bundled with the dual growth
/// constant `K~` such that `~U1* + ~U2 <= K~ (1 + y^-q + u^-q)`.
#[derive(Debug, Clone)]
pub struct ConjugateBundle {
    utility: UtilityModel,
    pub k_tilde: f64,
}

impl ConjugateBundle {
    /// Builds the bundle and fits `K~` on a sampled `(t, y, u)` grid over
    /// `[0, horizon) x [1e-3, 1e3]^2`.
    pub fn new(utility: UtilityModel, horizon: f64) -> Result<Self, TransformError> {
        let mut bundle = Self {
            utility,
            k_tilde: 0.0,
        };
        let q = bundle.utility.q();
        let levels: Vec<f64> = (0..13).map(|k| 10f64.powf(-3.0 + 0.5 * k as f64)).collect();
        let mut k: f64 = f64::MIN_POSITIVE;
        for it in 0..8 {
            let t = horizon * it as f64 / 8.0;
            for &y in &levels {
                let tail = bundle.u2_tilde(y)?;
                for &u in &levels {
                    let v = bundle.u1_star_tilde(t, y, u)? + tail;
                    k = k.max(v / (1.0 + y.powf(-q) + u.powf(-q)));
                }
            }
        }
        bundle.k_tilde = k;
        Ok(bundle)
    }

    pub fn utility(&self) -> &UtilityModel {
        &self.utility
    }

    pub fn u1_star(&self, t: f64, y: f64, x: f64) -> Result<f64, TransformError> {
        conjugate_c_u1(&self.utility, t, y, x)
    }

    pub fn u1_star_tilde(&self, t: f64, y: f64, u: f64) -> Result<f64, TransformError> {
        double_conjugate_u1(&self.utility, t, y, u)
    }

    pub fn u2_tilde(&self, y: f64) -> Result<f64, TransformError> {
        if let Some(v) = self.utility.utility().conjugate_u2(y) {
            return Ok(v);
        }
        conjugate_u2(|x| self.utility.u2(x), y)
    }

    pub fn c_star(&self, t: f64, y: f64, x: f64) -> Result<f64, TransformError> {
        optimal_c(&self.utility, t, y, x)
    }
}

/// Lower convex hull (indices) of points with increasing abscissae.
fn lower_hull(nodes: &[f64], values: &[f64]) -> Vec<usize> {
    let mut hull: Vec<usize> = Vec::with_capacity(nodes.len());
    for i in 0..nodes.len() {
        while hull.len() >= 2 {
            let (a, b) = (hull[hull.len() - 2], hull[hull.len() - 1]);
            let cross = (nodes[b] - nodes[a]) * (values[i] - values[a])
                - (values[b] - values[a]) * (nodes[i] - nodes[a]);
            if cross <= 0.0 {
                hull.pop();
            } else {
                break;
            }
        }
        hull.push(i);
    }
    hull
}

/// `min_j {values_j + s nodes_j}` for every slope `s` in increasing order,
/// in linear time. Returns `(minimum, argmin index)` per slope.
///
/// The argmin along the lower hull is nonincreasing in `s`, so one sweep
/// of a pointer from the right end of the hull suffices.
pub fn discrete_inf_transform(nodes: &[f64], values: &[f64], slopes: &[f64]) -> Vec<(f64, usize)> {
    assert_eq!(nodes.len(), values.len());
    debug_assert!(
        slopes.windows(2).all(|w| w[0] <= w[1]),
        "slopes must be sorted"
    );
    let hull = lower_hull(nodes, values);
    let mut k = hull.len() - 1;
    slopes
        .iter()
        .map(|&s| {
            let f = |j: usize| values[hull[j]] + s * nodes[hull[j]];
            while k > 0 && f(k - 1) <= f(k) {
                k -= 1;
            }
            (f(k), hull[k])
        })
        .collect()
}

/// `max_i {values_i - s nodes_i}` for increasing slopes `s` (concave data).
pub fn discrete_sup_transform(nodes: &[f64], values: &[f64], slopes: &[f64]) -> Vec<(f64, usize)> {
    let neg: Vec<f64> = values.iter().map(|v| -v).collect();
    discrete_inf_transform(nodes, &neg, slopes)
        .into_iter()
        .map(|(v, i)| (-v, i))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ClosureUtility, DivergentSide, PowerUtility};
    use proptest::prelude::*;
    use std::sync::Arc;

    fn power(a_c: f64, a_x: f64, a_t: f64) -> UtilityModel {
        UtilityModel::power(PowerUtility::new(0.5, a_c, a_x, a_t), 1.0).unwrap()
    }

    /// The same sqrt utilities with analytic marginals but no closed-form
    /// conjugates, so every transform runs its numerical path.
    fn numeric_sqrt(a_x: f64) -> UtilityModel {
        let u = ClosureUtility::new(
            move |_, c, x| 2.0 * c.sqrt() + 2.0 * a_x * x.sqrt(),
            |x| 2.0 * x.sqrt(),
        )
        .with_u1_c(|_, c, _| 1.0 / c.sqrt())
        .with_u1_x(move |_, _, x| a_x / x.sqrt());
        let u = if a_x == 0.0 {
            u.wealth_independent()
        } else {
            u
        };
        UtilityModel::custom(
            Arc::new(u),
            0.5,
            4.0,
            InadaCase::Inada,
            Some(DivergentSide::Both),
            true,
        )
        .unwrap()
    }

    fn brute_sup(f: impl Fn(f64) -> f64, hi: f64, n: usize) -> f64 {
        (0..=n)
            .map(|i| f(hi * i as f64 / n as f64))
            .fold(f64::NEG_INFINITY, f64::max)
    }

    #[test]
    fn conjugate_u2_sqrt_matches_brute_force() {
        // Grid oracle over [0, 100] with 1e6 points; maximiser x = 1/y^2.
        let oracle = brute_sup(|x| 2.0 * x.sqrt() - 2.0 * x, 100.0, 1_000_000);
        let v = conjugate_u2(|x| 2.0 * x.sqrt(), 2.0).unwrap();
        assert!((v - 0.5).abs() < 1e-12);
        assert!((v - oracle).abs() < 1e-6);
    }

    #[test]
    fn conjugate_u2_zero_and_power_closed_form() {
        assert_eq!(conjugate_u2(|_| 0.0, 3.0).unwrap(), 0.0);
        // x^p/p with p = 1/2 is 2 sqrt(x); ((1-p)/p) y^{-p/(1-p)} = 1/y
        for y in [0.1, 0.5, 1.0, 4.0, 30.0] {
            let v = conjugate_u2(|x| x.powf(0.5) / 0.5, y).unwrap();
            assert!((v - 1.0 / y).abs() < 1e-10 * (1.0 + 1.0 / y), "y={y}: {v}");
        }
    }

    #[test]
    fn conjugate_u2_reports_divergence() {
        assert!(matches!(
            conjugate_u2(|x| 2.0 * x, 1.0),
            Err(TransformError::UnboundedConjugate { .. })
        ));
    }

    #[test]
    fn optimal_c_examples() {
        let numeric = numeric_sqrt(0.0);
        let c = optimal_c(&numeric, 0.0, 2.0, 1.0).unwrap();
        assert!((c - 0.25).abs() < 1e-14);
        // Inada limit: c* = y^-2 = 1e-12.
        let c = optimal_c(&numeric, 0.0, 1e6, 1.0).unwrap();
        assert!((c - 1e-12).abs() < 1e-15);
        assert_eq!(
            optimal_c(&power(2.0, 0.0, 0.0), 0.0, 2.0, 1.0).unwrap(),
            1.0
        );
        assert_eq!(
            optimal_c(&power(0.0, 1.0, 1.0), 0.3, 5.0, 2.0).unwrap(),
            0.0
        );
    }

    #[test]
    fn optimal_c_non_inada_fails_bracketing() {
        let u = ClosureUtility::new(|_, c, _| c.min(1.0), |x| x.sqrt());
        let m = UtilityModel::custom(
            Arc::new(u),
            0.5,
            10.0,
            InadaCase::Inada,
            Some(DivergentSide::Both),
            true,
        )
        .unwrap();
        assert!(matches!(
            optimal_c(&m, 0.0, 2.0, 1.0),
            Err(TransformError::RootBracketFailure { .. })
        ));
    }

    #[test]
    fn conjugate_c_examples() {
        let numeric = numeric_sqrt(0.0);
        // Brute force over a c-grid for 2 sqrt(c) - 4 c: max 1/4 at c = 1/16.
        let oracle = brute_sup(|c| 2.0 * c.sqrt() - 4.0 * c, 1.0, 1_000_000);
        let v = conjugate_c_u1(&numeric, 0.0, 4.0, 7.0).unwrap();
        assert!((v - 0.25).abs() < 1e-12 && (v - oracle).abs() < 1e-6);
        let sep = numeric_sqrt(1.0);
        let v = conjugate_c_u1(&sep, 0.0, 1.0, 4.0).unwrap();
        assert!((v - 5.0).abs() < 1e-12);
        assert!(
            (conjugate_c_u1(&power(1.0, 1.0, 0.0), 0.0, 1.0, 4.0).unwrap() - 5.0).abs() < 1e-14
        );
        assert_eq!(
            conjugate_c_u1(&power(0.0, 0.0, 0.0), 0.2, 1.3, 0.4).unwrap(),
            0.0
        );
    }

    #[test]
    fn double_conjugate_examples() {
        let sep = numeric_sqrt(1.0);
        let v = double_conjugate_u1(&sep, 0.0, 1.0, 1.0).unwrap();
        assert!((v - 2.0).abs() < 1e-9, "{v}");
        assert!(
            (double_conjugate_u1(&power(1.0, 1.0, 0.0), 0.0, 1.0, 1.0).unwrap() - 2.0).abs()
                < 1e-14
        );
        let c_only = numeric_sqrt(0.0);
        for u in [0.1, 1.0, 10.0] {
            assert!((double_conjugate_u1(&c_only, 0.0, 1.0, u).unwrap() - 1.0).abs() < 1e-12);
        }
        assert_eq!(
            double_conjugate_u1(&power(0.0, 0.0, 0.0), 0.0, 1.0, 1.0).unwrap(),
            0.0
        );
    }

    #[test]
    fn separable_decomposition_is_exact() {
        let m = power(1.5, 0.7, 0.0);
        for &(y, u) in &[(0.3, 2.0), (1.0, 1.0), (4.0, 0.2)] {
            let whole = double_conjugate_u1(&m, 0.0, y, u).unwrap();
            let part_c = conjugate_u2(|c| 1.5 * c.sqrt() / 0.5, y).unwrap();
            let part_x = conjugate_u2(|x| 0.7 * x.sqrt() / 0.5, u).unwrap();
            assert!((whole - (part_c + part_x)).abs() < 1e-9 * (1.0 + whole));
        }
    }

    #[test]
    fn inverse_marginal_x_examples() {
        // Golden-section oracle on 1/u + u gives u* = 1.
        let sep = numeric_sqrt(1.0);
        let r = inverse_marginal_x(&sep, 0.0, 1.0, -1.0).unwrap();
        assert!((r.u - 1.0).abs() < 1e-5 && !r.boundary, "{r:?}");
        let r = inverse_marginal_x(&power(1.0, 1.0, 0.0), 0.0, 1.0, -1.0).unwrap();
        assert!((r.u - 1.0).abs() < 1e-6);
        let r = inverse_marginal_x(&power(1.0, 0.0, 0.0), 0.0, 1.0, -1.0).unwrap();
        assert!(r.boundary && r.u == 0.0);
        assert!(inverse_marginal_x(&sep, 0.0, 1.0, 0.5).is_err());
    }

    #[test]
    fn inf_conjugate_identity_at_minimiser() {
        // ~U1*(t,1,u*) - u* q equals U1*(t, 1, -q) = 1/1 + 2 sqrt(1) = 3.
        let m = power(1.0, 1.0, 0.0);
        for q in [-0.25, -1.0, -3.0] {
            let r = inverse_marginal_x(&m, 0.0, 1.0, q).unwrap();
            let lhs = double_conjugate_u1(&m, 0.0, 1.0, r.u).unwrap() - r.u * q;
            let rhs = conjugate_c_u1(&m, 0.0, 1.0, -q).unwrap();
            assert!(
                (lhs - rhs).abs() < 1e-10 * (1.0 + rhs),
                "q={q}: {lhs} vs {rhs}"
            );
            // envelope: u* = U1_x(t, c*, -q)
            let env = m.u1_x(0.0, 1.0, -q);
            assert!((r.u - env).abs() < 1e-6 * env);
        }
    }

    #[test]
    fn envelope_gradient_matches_minus_c_star() {
        for m in [
            power(1.0, 1.0, 0.0),
            numeric_sqrt(1.0),
            power(0.6, 0.0, 1.0),
        ] {
            for &(y, x) in &[(0.3, 1.0), (1.0, 2.0), (5.0, 0.5)] {
                let h = 1e-4 * y;
                let fd = (conjugate_c_u1(&m, 0.0, y + h, x).unwrap()
                    - conjugate_c_u1(&m, 0.0, y - h, x).unwrap())
                    / (2.0 * h);
                let c = optimal_c(&m, 0.0, y, x).unwrap();
                assert!((fd + c).abs() <= 1e-5 * c, "y={y} x={x}: fd={fd} c*={c}");
            }
        }
    }

    #[test]
    fn conjugates_are_monotone_convex_and_decay() {
        let b = ConjugateBundle::new(power(1.0, 1.0, 1.0), 1.0).unwrap();
        let ys: Vec<f64> = (0..40).map(|k| 0.05 * 1.2f64.powi(k)).collect();
        let vals: Vec<f64> = ys
            .iter()
            .map(|&y| b.u1_star_tilde(0.0, y, 0.7 * y).unwrap())
            .collect();
        let tails: Vec<f64> = ys.iter().map(|&y| b.u2_tilde(y).unwrap()).collect();
        for series in [&vals, &tails] {
            assert!(series.iter().all(|&v| v >= 0.0));
            assert!(series.windows(2).all(|w| w[1] <= w[0]));
            for i in 1..ys.len() - 1 {
                let l = (series[i] - series[i - 1]) / (ys[i] - ys[i - 1]);
                let r = (series[i + 1] - series[i]) / (ys[i + 1] - ys[i]);
                assert!(r >= l - 1e-12);
            }
        }
        // Decay along the diagonal: ~U1*(t, 10^k, 10^k) decreases to 0.
        let diag: Vec<f64> = (1..=6)
            .map(|k| b.u1_star_tilde(0.0, 10f64.powi(k), 10f64.powi(k)).unwrap())
            .collect();
        assert!(diag.windows(2).all(|w| w[1] < w[0]));
        assert!(diag[5] < 1e-5);
        // Growth with the fitted constant.
        for &y in &ys {
            for &u in &ys {
                let lhs = b.u1_star_tilde(0.5, y, u).unwrap() + b.u2_tilde(y).unwrap();
                assert!(lhs <= b.k_tilde * (1.0 + 1.0 / y + 1.0 / u) * (1.0 + 1e-12));
            }
        }
    }

    #[test]
    fn biconjugate_recovers_u2_on_grid() {
        let b = ConjugateBundle::new(power(1.0, 0.0, 1.0), 1.0).unwrap();
        let ys: Vec<f64> = (0..2000)
            .map(|k| 1e-3 * (1e6f64).powf(k as f64 / 1999.0))
            .collect();
        let w: Vec<f64> = ys.iter().map(|&y| b.u2_tilde(y).unwrap()).collect();
        let xs: Vec<f64> = (1..50).map(|k| 0.1 * k as f64).collect();
        for ((v, _), x) in discrete_inf_transform(&ys, &w, &xs).into_iter().zip(&xs) {
            let exact = 2.0 * x.sqrt();
            assert!((v - exact).abs() < 2e-4 * exact, "x={x}: {v} vs {exact}");
        }
    }

    proptest! {
        #[test]
        fn merge_transform_equals_double_loop(
            pts in proptest::collection::vec((0.01f64..10.0, -5.0f64..5.0), 2..40),
            mut slopes in proptest::collection::vec(-3.0f64..3.0, 1..30),
        ) {
            let mut pts = pts;
            pts.sort_by(|a, b| a.0.total_cmp(&b.0));
            pts.dedup_by(|a, b| a.0 == b.0);
            // Convex data: cumulative sums of increasing slopes.
            let nodes: Vec<f64> = pts.iter().map(|p| p.0).collect();
            let mut incs: Vec<f64> = pts.iter().map(|p| p.1).collect();
            incs.sort_by(f64::total_cmp);
            let mut acc = 0.0;
            let values: Vec<f64> = (0..nodes.len()).map(|i| {
                if i > 0 { acc += incs[i] * (nodes[i] - nodes[i - 1]); }
                acc
            }).collect();
            slopes.sort_by(f64::total_cmp);
            let fast = discrete_inf_transform(&nodes, &values, &slopes);
            for (s, (v, _)) in slopes.iter().zip(fast) {
                let brute = nodes.iter().zip(&values).map(|(n, w)| w + s * n).fold(f64::INFINITY, f64::min);
                prop_assert!((v - brute).abs() < 1e-9);
            }
        }
    }
}
