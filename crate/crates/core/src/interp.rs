//! Monotone piecewise-cubic Hermite interpolation (Fritsch–Carlson).

/// Shape-preserving cubic interpolant through `(x_i, y_i)` with strictly
/// increasing `x`. Monotone data produce a monotone interpolant.
#[derive(Debug, Clone)]
pub struct Pchip {
    xs: Vec<f64>,
    ys: Vec<f64>,
    slopes: Vec<f64>,
}

impl Pchip {
    pub fn new(xs: Vec<f64>, ys: Vec<f64>) -> Self {
        let n = xs.len();
        assert!(
            n >= 2 && ys.len() == n,
            "pchip needs at least two matching samples"
        );
        let h: Vec<f64> = xs.windows(2).map(|w| w[1] - w[0]).collect();
        let delta: Vec<f64> = (0..n - 1).map(|i| (ys[i + 1] - ys[i]) / h[i]).collect();
        let mut slopes = vec![0.0; n];
        if n == 2 {
            slopes[0] = delta[0];
            slopes[1] = delta[0];
            return Self { xs, ys, slopes };
        }
        for i in 1..n - 1 {
            if delta[i - 1] * delta[i] <= 0.0 {
                slopes[i] = 0.0;
            } else {
                let w1 = 2.0 * h[i] + h[i - 1];
                let w2 = h[i] + 2.0 * h[i - 1];
                slopes[i] = (w1 + w2) / (w1 / delta[i - 1] + w2 / delta[i]);
            }
        }
        slopes[0] = end_slope(h[0], h[1], delta[0], delta[1]);
        slopes[n - 1] = end_slope(h[n - 2], h[n - 3], delta[n - 2], delta[n - 3]);
        Self { xs, ys, slopes }
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.xs[0], self.xs[self.xs.len() - 1])
    }

    /// Evaluates the interpolant; outside the data range the end cubic is
    /// extended, so callers should check [`Pchip::domain`] first.
    pub fn eval(&self, x: f64) -> f64 {
        let n = self.xs.len();
        let i = self.xs.partition_point(|&v| v <= x).clamp(1, n - 1) - 1;
        let h = self.xs[i + 1] - self.xs[i];
        let s = (x - self.xs[i]) / h;
        let s2 = s * s;
        let s3 = s2 * s;
        let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
        let h10 = s3 - 2.0 * s2 + s;
        let h01 = -2.0 * s3 + 3.0 * s2;
        let h11 = s3 - s2;
        h00 * self.ys[i]
            + h10 * h * self.slopes[i]
            + h01 * self.ys[i + 1]
            + h11 * h * self.slopes[i + 1]
    }
}

fn end_slope(h0: f64, h1: f64, d0: f64, d1: f64) -> f64 {
    let d = ((2.0 * h0 + h1) * d0 - h0 * d1) / (h0 + h1);
    if d * d0 <= 0.0 {
        0.0
    } else if d0 * d1 <= 0.0 && d.abs() > 3.0 * d0.abs() {
        3.0 * d0
    } else {
        d
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn reproduces_linear_data() {
        let xs: Vec<f64> = (0..10).map(|i| i as f64 * 0.3).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 2.0 - 3.0 * x).collect();
        let p = Pchip::new(xs, ys);
        for k in 0..50 {
            let x = k as f64 * 0.05;
            assert!((p.eval(x) - (2.0 - 3.0 * x)).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn monotone_data_stay_monotone(steps in proptest::collection::vec(0.01f64..5.0, 3..20)) {
            let xs: Vec<f64> = (0..steps.len()).map(|i| i as f64).collect();
            let mut acc = 0.0;
            let ys: Vec<f64> = steps.iter().map(|s| { acc += s; acc }).collect();
            let last = xs[xs.len() - 1];
            let p = Pchip::new(xs, ys);
            let mut prev = f64::NEG_INFINITY;
            for k in 0..=400 {
                let v = p.eval(last * k as f64 / 400.0);
                prop_assert!(v >= prev - 1e-12);
                prev = v;
            }
        }
    }
}
