//! Gauss–Legendre rules and fixed-order summation.

use num_complex::Complex64;
use std::f64::consts::PI;

/// Nodes and weights of the `n`-point Gauss–Legendre rule on `[-1, 1]`,
/// nodes ascending.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1, "rule needs at least one node");
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let half = n.div_ceil(2);
    for i in 0..half {
        // Tricomi's initial guess for the i-th largest root.
        let k = (i + 1) as f64;
        let nf = n as f64;
        let mut x = ((4.0 * k - 1.0) * PI / (4.0 * nf + 2.0)).cos()
            * (1.0 - (nf - 1.0) / (8.0 * nf * nf * nf));
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre(n, x);
            dp = d;
            let dx = p / d;
            x -= dx;
            if dx.abs() <= 1e-16 * x.abs().max(1.0) {
                break;
            }
        }
        let (_, d) = legendre(n, x);
        if d.is_finite() {
            dp = d;
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[n - 1 - i] = x;
        nodes[i] = -x;
        weights[n - 1 - i] = w;
        weights[i] = w;
    }
    (nodes, weights)
}

/// `P_n(x)` and `P_n'(x)` by the three-term recurrence.
fn legendre(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// Pairwise sum; the reduction tree depends only on the length, so results
/// are reproducible regardless of how the terms were produced.
pub fn pairwise_sum(values: &[Complex64]) -> Complex64 {
    if values.len() <= 16 {
        return values.iter().fold(Complex64::new(0.0, 0.0), |a, b| a + b);
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn integrates_polynomials_exactly() {
        for n in [1usize, 2, 5, 16, 64] {
            let (x, w) = gauss_legendre(n);
            assert!((w.iter().sum::<f64>() - 2.0).abs() < 1e-13);
            let deg = 2 * n - 1;
            let approx: f64 = x
                .iter()
                .zip(&w)
                .map(|(x, w)| w * x.powi(deg as i32 - 1))
                .sum();
            let exact = if (deg - 1) % 2 == 0 {
                2.0 / deg as f64
            } else {
                0.0
            };
            assert!((approx - exact).abs() < 1e-12, "n = {n}");
        }
    }

    #[test]
    fn large_rule_is_sorted_and_symmetric() {
        let (x, w) = gauss_legendre(1024);
        assert!(x.windows(2).all(|p| p[0] < p[1]));
        assert!((x[0] + x[1023]).abs() < 1e-15);
        assert!((w.iter().sum::<f64>() - 2.0).abs() < 1e-12);
        let cos: f64 = x.iter().zip(&w).map(|(x, w)| w * x.cos()).sum();
        assert!((cos - 2.0 * 1f64.sin()).abs() < 1e-13);
    }

    #[test]
    fn pairwise_matches_naive_sum() {
        let v: Vec<Complex64> = (0..1000)
            .map(|k| Complex64::new(k as f64, -(k as f64)))
            .collect();
        assert_eq!(pairwise_sum(&v), Complex64::new(499500.0, -499500.0));
    }
}
