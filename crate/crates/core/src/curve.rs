use std::fmt;
use std::sync::Arc;

/// A deterministic function of time: market coefficients and
/// time-dependent utility weights are all expressed as curves.
#[derive(Clone)]
pub enum Curve {
    Constant(f64),
    /// Knots `(t, value)` with increasing `t`; flat outside the knot range.
    PiecewiseLinear(Vec<(f64, f64)>),
    Function(Arc<dyn Fn(f64) -> f64 + Send + Sync>),
}

impl Curve {
    pub fn constant(v: f64) -> Self {
        Curve::Constant(v)
    }

    pub fn function(f: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        Curve::Function(Arc::new(f))
    }

    pub fn eval(&self, t: f64) -> f64 {
        match self {
            Curve::Constant(v) => *v,
            Curve::PiecewiseLinear(knots) => {
                let first = knots[0];
                let last = knots[knots.len() - 1];
                if t <= first.0 {
                    return first.1;
                }
                if t >= last.0 {
                    return last.1;
                }
                let i = knots.partition_point(|k| k.0 <= t) - 1;
                let (t0, v0) = knots[i];
                let (t1, v1) = knots[i + 1];
                v0 + (v1 - v0) * (t - t0) / (t1 - t0)
            }
            Curve::Function(f) => f(t),
        }
    }

    pub fn as_constant(&self) -> Option<f64> {
        match self {
            Curve::Constant(v) => Some(*v),
            _ => None,
        }
    }

    /// True when the curve is the constant zero (known structurally).
    pub fn is_zero(&self) -> bool {
        matches!(self, Curve::Constant(v) if *v == 0.0)
    }

    /// Supremum over `n + 1` evenly spaced samples of `[0, horizon]`.
    pub fn sampled_max(&self, horizon: f64, n: usize) -> f64 {
        (0..=n)
            .map(|k| self.eval(horizon * k as f64 / n as f64))
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Multiplies the curve pointwise by another curve.
    pub fn times(&self, other: &Curve) -> Curve {
        match (self, other) {
            (Curve::Constant(a), Curve::Constant(b)) => Curve::Constant(a * b),
            _ => {
                let (a, b) = (self.clone(), other.clone());
                Curve::function(move |t| a.eval(t) * b.eval(t))
            }
        }
    }
}

impl fmt::Debug for Curve {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Curve::Constant(v) => write!(f, "Constant({v})"),
            Curve::PiecewiseLinear(k) => write!(f, "PiecewiseLinear({k:?})"),
            Curve::Function(_) => write!(f, "Function(..)"),
        }
    }
}

impl From<f64> for Curve {
    fn from(v: f64) -> Self {
        Curve::Constant(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn piecewise_linear_interpolates_and_clamps() {
        let c = Curve::PiecewiseLinear(vec![(0.0, 1.0), (1.0, 3.0)]);
        assert_eq!(c.eval(-1.0), 1.0);
        assert_eq!(c.eval(0.5), 2.0);
        assert_eq!(c.eval(2.0), 3.0);
    }
}
