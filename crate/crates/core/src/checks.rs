//! Discrete invariant checks shared by the dual and primal solvers.

use serde::Serialize;

/// One discrete invariant and its worst violation.
#[derive(Debug, Clone, Serialize)]
pub struct InvariantCheck {
    pub name: &'static str,
    pub passed: bool,
    /// Largest violation found (0 when none).
    pub worst: f64,
    /// `(time slice, node)` of the worst violation.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub at: Option<(usize, usize)>,
}

/// Accumulates the worst violation of one invariant.
pub(crate) struct Tracker {
    name: &'static str,
    worst: f64,
    at: Option<(usize, usize)>,
}

impl Tracker {
    pub(crate) fn new(name: &'static str) -> Self {
        Self {
            name,
            worst: 0.0,
            at: None,
        }
    }

    /// Records a violation of the given (positive) size.
    pub(crate) fn record(&mut self, violation: f64, n: usize, j: usize) {
        if self.at.is_none() || violation > self.worst {
            self.worst = violation.max(self.worst);
            self.at = Some((n, j));
        }
    }

    pub(crate) fn finish(self) -> InvariantCheck {
        InvariantCheck {
            name: self.name,
            passed: self.at.is_none(),
            worst: self.worst,
            at: self.at,
        }
    }
}
