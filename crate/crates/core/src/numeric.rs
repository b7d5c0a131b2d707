//! Small numerical kernels shared by the solver modules: tridiagonal solves,
//! bracketing root finders, golden-section search and order-stable summation.

/// Solves a tridiagonal system in place with the Thomas recursion.
///
/// `lower[i]` multiplies `x[i-1]` in row `i` (`lower[0]` is ignored) and
/// `upper[i]` multiplies `x[i+1]` (`upper[n-1]` is ignored). The matrix is
/// expected to be diagonally dominant, which the implicit diffusion
/// operator guarantees.
pub fn solve_tridiagonal(lower: &[f64], diag: &[f64], upper: &[f64], rhs: &mut [f64]) {
    let n = rhs.len();
    assert!(n > 0 && lower.len() == n && diag.len() == n && upper.len() == n);
    let mut c_prime = vec![0.0; n];
    let mut denom = diag[0];
    c_prime[0] = upper[0] / denom;
    rhs[0] /= denom;
    for i in 1..n {
        denom = diag[i] - lower[i] * c_prime[i - 1];
        c_prime[i] = upper[i] / denom;
        rhs[i] = (rhs[i] - lower[i] * rhs[i - 1]) / denom;
    }
    for i in (0..n - 1).rev() {
        rhs[i] -= c_prime[i] * rhs[i + 1];
    }
}

/// Finds the root of a function that is strictly decreasing on `(0, inf)`,
/// searching in log-space.
///
/// The bracket starts at `[lo, hi]` and is expanded geometrically, up to
/// `max_expansions` times on each side. Returns `None` when no sign change
/// is found, which for a marginal utility means the Inada limits fail.
pub fn decreasing_root_log(
    f: impl Fn(f64) -> f64,
    mut lo: f64,
    mut hi: f64,
    max_expansions: usize,
    rel_tol: f64,
) -> Option<f64> {
    let mut expansions = 0;
    while f(lo) <= 0.0 {
        if expansions == max_expansions {
            return None;
        }
        lo *= 1e-4;
        expansions += 1;
    }
    expansions = 0;
    while f(hi) >= 0.0 {
        if expansions == max_expansions {
            return None;
        }
        hi *= 1e4;
        expansions += 1;
    }
    let (mut a, mut b) = (lo.ln(), hi.ln());
    for _ in 0..200 {
        let mid = 0.5 * (a + b);
        if f(mid.exp()) > 0.0 {
            a = mid;
        } else {
            b = mid;
        }
        if (b - a) < rel_tol {
            break;
        }
    }
    Some((0.5 * (a + b)).exp())
}

const INV_PHI: f64 = 0.618_033_988_749_894_8;

/// Golden-section maximisation of a unimodal function on `[a, b]`.
/// Returns `(argmax, max)`.
pub fn golden_max(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> (f64, f64) {
    let mut x1 = b - INV_PHI * (b - a);
    let mut x2 = a + INV_PHI * (b - a);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    for _ in 0..400 {
        if (b - a).abs() <= tol * (1.0 + x1.abs().min(x2.abs())) {
            break;
        }
        if f1 < f2 {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + INV_PHI * (b - a);
            f2 = f(x2);
        } else {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - INV_PHI * (b - a);
            f1 = f(x1);
        }
    }
    let candidates = [(a, f(a)), (x1, f1), (x2, f2), (b, f(b))];
    candidates.into_iter().filter(|(_, v)| !v.is_nan()).fold(
        (a, f64::NEG_INFINITY),
        |best, cand| if cand.1 > best.1 { cand } else { best },
    )
}

/// Outcome of maximising a concave function on `[0, inf)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HalfLineMax {
    pub argmax: f64,
    pub value: f64,
    /// The maximiser ran into the search cap: the supremum may be infinite.
    pub hit_cap: bool,
}

/// Maximises a concave function on the half line `[0, inf)`.
///
/// The search doubles an upper bracket from `scale` until the function
/// starts decreasing or `cap` is reached, then runs golden-section search.
pub fn concave_max_half_line(f: impl Fn(f64) -> f64, scale: f64, cap: f64) -> HalfLineMax {
    let f0 = f(0.0);
    let mut hi = scale.max(1e-12);
    let mut prev = f0;
    let mut lo = 0.0;
    let mut hit_cap = false;
    loop {
        let v = f(hi);
        if v < prev {
            break;
        }
        if hi >= cap {
            hit_cap = true;
            break;
        }
        lo = 0.5 * hi;
        prev = v;
        hi *= 2.0;
    }
    if lo > 0.0 {
        lo *= 0.5;
    }
    let (argmax, value) = golden_max(&f, lo, hi, 1e-14);
    if f0 >= value {
        return HalfLineMax {
            argmax: 0.0,
            value: f0,
            hit_cap: false,
        };
    }
    HalfLineMax {
        argmax,
        value,
        hit_cap: hit_cap && argmax >= 0.5 * cap,
    }
}

/// Pairwise (cascade) summation; the result depends only on the order of
/// `values`, never on how the values were produced.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    const BLOCK: usize = 32;
    if values.len() <= BLOCK {
        return values.iter().sum();
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

/// Sample mean and standard error of the mean.
pub fn mean_and_std_error(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = pairwise_sum(values) / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let sq: Vec<f64> = values.iter().map(|v| (v - mean) * (v - mean)).collect();
    let var = pairwise_sum(&sq) / (n as f64 - 1.0);
    (mean, (var / n as f64).sqrt())
}

/// Linear interpolation on an increasing abscissa with flat extrapolation.
pub fn interp_linear(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    debug_assert_eq!(xs.len(), ys.len());
    let n = xs.len();
    if x <= xs[0] {
        return ys[0];
    }
    if x >= xs[n - 1] {
        return ys[n - 1];
    }
    let i = xs.partition_point(|&v| v <= x) - 1;
    let w = (x - xs[i]) / (xs[i + 1] - xs[i]);
    ys[i] * (1.0 - w) + ys[i + 1] * w
}
