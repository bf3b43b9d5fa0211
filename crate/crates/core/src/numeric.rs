//! Log-space reductions and quadrature rules shared by every module.

use crate::error::{Result, TvoError};

/// `log Σ exp(x_i)` with max subtraction. Empty input or all `-inf` gives `-inf`.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    let sum: f64 = xs.iter().map(|&x| (x - max).exp()).sum();
    max + sum.ln()
}

/// `log (1/n Σ exp(x_i))`.
pub fn log_mean_exp(xs: &[f64]) -> f64 {
    logsumexp(xs) - (xs.len() as f64).ln()
}

/// Normalizes unnormalized log-weights into probabilities (a softmax).
pub fn softmax(log_weights: &[f64]) -> Vec<f64> {
    let lse = logsumexp(log_weights);
    log_weights.iter().map(|&l| (l - lse).exp()).collect()
}

/// Weighted mean of `values` under normalized `probs`.
pub fn weighted_mean(probs: &[f64], values: &[f64]) -> f64 {
    probs.iter().zip(values).map(|(p, v)| p * v).sum()
}

/// Weighted population covariance of two sequences under normalized `probs`.
pub fn weighted_cov(probs: &[f64], a: &[f64], b: &[f64]) -> f64 {
    let ma = weighted_mean(probs, a);
    let mb = weighted_mean(probs, b);
    probs
        .iter()
        .zip(a.iter().zip(b))
        .map(|(p, (x, y))| p * (x - ma) * (y - mb))
        .sum()
}

/// Weighted population variance; never negative.
pub fn weighted_var(probs: &[f64], values: &[f64]) -> f64 {
    let m = weighted_mean(probs, values);
    probs
        .iter()
        .zip(values)
        .map(|(p, v)| p * (v - m) * (v - m))
        .sum::<f64>()
        .max(0.0)
}

/// `n` evenly spaced points on `[a, b]`, endpoints exact.
pub fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![a],
        _ => {
            let step = (b - a) / (n - 1) as f64;
            let mut out: Vec<f64> = (0..n).map(|i| a + step * i as f64).collect();
            out[n - 1] = b;
            out
        }
    }
}

/// Composite Simpson rule on a (possibly non-uniform) grid.
///
/// Pairs of intervals use the irregular-spacing Simpson weights. When the
/// number of intervals is odd the final interval is integrated with the
/// quadratic through the last three points.
pub fn simpson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(TvoError::LengthMismatch {
            expected: xs.len(),
            actual: ys.len(),
        });
    }
    if xs.len() < 3 {
        return Err(TvoError::QuadratureTooShort(xs.len()));
    }
    let n = xs.len() - 1;
    let pairs = n / 2;
    let mut total = 0.0;
    for p in 0..pairs {
        let i = 2 * p;
        let h0 = xs[i + 1] - xs[i];
        let h1 = xs[i + 2] - xs[i + 1];
        let hs = h0 + h1;
        total += hs / 6.0
            * ((2.0 - h1 / h0) * ys[i] + hs * hs / (h0 * h1) * ys[i + 1] + (2.0 - h0 / h1) * ys[i + 2]);
    }
    if n % 2 == 1 {
        let h0 = xs[n - 1] - xs[n - 2];
        let h1 = xs[n] - xs[n - 1];
        let alpha = (2.0 * h1 * h1 + 3.0 * h0 * h1) / (6.0 * (h0 + h1));
        let beta = (h1 * h1 + 3.0 * h0 * h1) / (6.0 * h0);
        let gamma = h1 * h1 * h1 / (6.0 * h0 * (h0 + h1));
        total += alpha * ys[n] + beta * ys[n - 1] - gamma * ys[n - 2];
    }
    Ok(total)
}

/// Simpson integral of `f` over `[a, b]` using `n` evenly spaced points.
pub fn simpson_fn<F>(a: f64, b: f64, n: usize, mut f: F) -> Result<f64>
where
    F: FnMut(f64) -> Result<f64>,
{
    if n < 3 {
        return Err(TvoError::QuadratureTooShort(n));
    }
    let xs = linspace(a, b, n);
    let ys = xs.iter().map(|&x| f(x)).collect::<Result<Vec<_>>>()?;
    simpson(&xs, &ys)
}

/// Gauss–Hermite rule for expectations under a standard normal.
///
/// Returns `(nodes, weights)` with weights summing to one, so that
/// `E[g(ε)] ≈ Σ w_i g(ε_i)` for `ε ~ N(0, 1)`.
pub fn gauss_hermite_standard(n: usize) -> (Vec<f64>, Vec<f64>) {
    // Newton iteration on orthonormal Hermite polynomials (physicists'
    // convention), then rescale to the probabilists' weight.
    const PI_M4: f64 = 0.751_125_544_464_942_5;
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let nf = n as f64;
    let m = n.div_ceil(2);
    let mut z = 0.0_f64;
    for i in 0..m {
        z = match i {
            0 => (2.0 * nf + 1.0).sqrt() - 1.855_75 * (2.0 * nf + 1.0).powf(-1.0 / 6.0),
            1 => z - 1.14 * nf.powf(0.426) / z,
            2 => 1.86 * z - 0.86 * x[0],
            3 => 1.91 * z - 0.91 * x[1],
            _ => 2.0 * z - x[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..100 {
            let mut p1 = PI_M4;
            let mut p2 = 0.0;
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = z * (2.0 / (jf + 1.0)).sqrt() * p2 - (jf / (jf + 1.0)).sqrt() * p3;
            }
            pp = (2.0 * nf).sqrt() * p2;
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() <= 1e-15 * z.abs().max(1.0) {
                break;
            }
        }
        x[i] = z;
        x[n - 1 - i] = -z;
        w[i] = 2.0 / (pp * pp);
        w[n - 1 - i] = w[i];
    }
    let sqrt_pi = std::f64::consts::PI.sqrt();
    let nodes = x.iter().rev().map(|&v| v * std::f64::consts::SQRT_2).collect();
    let weights = w.iter().rev().map(|&v| v / sqrt_pi).collect();
    (nodes, weights)
}
