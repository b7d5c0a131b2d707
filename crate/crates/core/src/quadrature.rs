//! Gauss–Hermite expectations under the standard normal law.

use std::f64::consts::{PI, SQRT_2};

use gauss_quad::hermite::GaussHermite;

/// Nodes and weights such that `E[f(Z)] ~ sum w_i f(z_i)` for `Z ~ N(0, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl NormalRule {
    /// Rule with `order` nodes; `None` below two nodes.
    pub fn new(order: usize) -> Option<Self> {
        let rule = GaussHermite::new(order).ok()?;
        let scale = 1.0 / PI.sqrt();
        let (nodes, weights) = rule.iter().map(|(x, w)| (SQRT_2 * x, w * scale)).unzip();
        Some(Self { nodes, weights })
    }

    pub fn order(&self) -> usize {
        self.nodes.len()
    }

    pub fn expect(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&z, &w)| w * f(z))
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn normal_moments() {
        let rule = NormalRule::new(12).unwrap();
        assert_relative_eq!(rule.expect(|_| 1.0), 1.0, epsilon = 1e-14);
        assert_relative_eq!(rule.expect(|z| z * z), 1.0, epsilon = 1e-13);
        assert_relative_eq!(rule.expect(|z| z.powi(4)), 3.0, epsilon = 1e-12);
        assert!(rule.expect(|z| z).abs() < 1e-14);
    }

    #[test]
    fn lognormal_moment() {
        let rule = NormalRule::new(32).unwrap();
        let (m, s, p): (f64, f64, f64) = (0.1, 0.4, 0.5);
        let exact = (p * m + 0.5 * p * p * s * s).exp();
        assert_relative_eq!(
            rule.expect(|z| (m + s * z).exp().powf(p)),
            exact,
            max_relative = 1e-13
        );
    }

    #[test]
    fn rejects_degenerate_order() {
        assert!(NormalRule::new(1).is_none());
    }
}
