//! Adaptive Gauss-Legendre quadrature for one-dimensional reference
//! integrals (partition functions, free-energy profiles, histogram bin
//! probabilities).

use std::sync::OnceLock;

/// Number of nodes in the base panel rule.
const ORDER: usize = 24;

fn nodes_weights() -> &'static (Vec<f64>, Vec<f64>) {
    static CACHE: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    CACHE.get_or_init(|| gauss_legendre(ORDER))
}

/// Nodes and weights of the `n`-point Gauss-Legendre rule on `[-1, 1]`,
/// computed by Newton iteration on the Legendre polynomial.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        // Tricomi initial guess for the i-th positive root.
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre_with_derivative(n, x);
            dp = d;
            let step = p / d;
            x -= step;
            if step.abs() < 1e-15 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

fn panel(f: &mut dyn FnMut(f64) -> f64, a: f64, b: f64) -> f64 {
    let (nodes, weights) = nodes_weights();
    let mid = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let mut acc = 0.0;
    for (x, w) in nodes.iter().zip(weights) {
        acc += w * f(mid + half * x);
    }
    acc * half
}

fn adaptive(f: &mut dyn FnMut(f64) -> f64, a: f64, b: f64, whole: f64, tol: f64, depth: u32) -> f64 {
    let mid = 0.5 * (a + b);
    let left = panel(f, a, mid);
    let right = panel(f, mid, b);
    let delta = left + right - whole;
    if delta.abs() <= tol || depth >= 40 {
        return left + right;
    }
    adaptive(f, a, mid, left, 0.5 * tol, depth + 1) + adaptive(f, mid, b, right, 0.5 * tol, depth + 1)
}

/// Integrate `f` over `[a, b]` with adaptive panel bisection to absolute
/// tolerance `tol`.
pub fn integrate<F: FnMut(f64) -> f64>(mut f: F, a: f64, b: f64, tol: f64) -> f64 {
    let whole = panel(&mut f, a, b);
    adaptive(&mut f, a, b, whole, tol.max(1e-15), 0)
}

/// Integrate a decaying integrand over the whole line by expanding a
/// symmetric window around `center` until the added tail mass is below
/// `tol`.
pub fn integrate_line<F: FnMut(f64) -> f64>(mut f: F, center: f64, initial_halfwidth: f64, tol: f64) -> f64 {
    let mut half = initial_halfwidth.max(1e-8);
    let mut total = integrate(&mut f, center - half, center + half, tol * 0.1);
    for _ in 0..60 {
        let grown = 2.0 * half;
        let tail = integrate(&mut f, center + half, center + grown, tol * 0.1)
            + integrate(&mut f, center - grown, center - half, tol * 0.1);
        total += tail;
        half = grown;
        if tail.abs() < tol {
            return total;
        }
    }
    total
}
