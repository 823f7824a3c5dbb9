//! Small numerical utilities shared across modules.

/// Natural log of the Gamma function, Lanczos approximation (g = 7, n = 9).
///
/// Accurate to about 1e-14 relative for x > 0, which is all this crate needs
/// (Poisson weights and the Brownian Green kernel constant).
pub fn ln_gamma(x: f64) -> f64 {
    const COEFFS: [f64; 9] = [
        0.999_999_999_999_809_93,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_13,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_571_6e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        // reflection formula
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = COEFFS[0];
    let t = x + 7.5;
    for (i, &c) in COEFFS.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// ln(n!) via `ln_gamma`.
pub fn ln_factorial(n: usize) -> f64 {
    ln_gamma(n as f64 + 1.0)
}

/// Compensated (Kahan) summation accumulator.
#[derive(Debug, Clone, Copy, Default)]
pub struct Kahan {
    sum: f64,
    c: f64,
}

impl Kahan {
    pub fn add(&mut self, x: f64) {
        let y = x - self.c;
        let t = self.sum + y;
        self.c = (t - self.sum) - y;
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum
    }
}

/// Least-squares slope and intercept of y against x.
///
/// Returns `None` when fewer than two points are given or x is degenerate.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> Option<(f64, f64)> {
    let n = xs.len();
    if n < 2 || n != ys.len() {
        return None;
    }
    let nf = n as f64;
    let mx = xs.iter().sum::<f64>() / nf;
    let my = ys.iter().sum::<f64>() / nf;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
    }
    if sxx == 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    Some((slope, my - slope * mx))
}

/// Chernoff bound on a single coordinate of a uniformized lattice walk.
///
/// A walk that jumps at rate at most `lambda` and moves a single coordinate by
/// at most 1 per jump satisfies
/// `P[|X_i(t)| >= m] <= 2 exp(lambda t (cosh s - 1) - s m)` for every s > 0.
/// This returns the bound minimized over s (closed form s = asinh(m / lambda t)).
pub fn jump_tail_bound(lambda_t: f64, m: f64) -> f64 {
    if m <= 0.0 {
        return 1.0;
    }
    if lambda_t <= 0.0 {
        return 0.0;
    }
    let s = (m / lambda_t).asinh();
    let log_bound = lambda_t * (s.cosh() - 1.0) - s * m;
    2.0 * log_bound.exp()
}

/// Smallest integer margin m with `2d * jump_tail_bound(lambda t, m) < eps`.
pub fn displacement_margin(d: usize, lambda_t: f64, eps: f64) -> i64 {
    let mut m = 1i64;
    while (2 * d) as f64 * jump_tail_bound(lambda_t, m as f64) >= eps {
        m += 1;
        if m > 100_000_000 {
            break;
        }
    }
    m
}

/// Nodes and weights of the n-point Gauss-Legendre rule on [-1, 1].
///
/// Newton iteration on Legendre polynomials; n is small (<= 32) everywhere in
/// this crate.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let nf = n as f64;
    for i in 0..(n + 1) / 2 {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            // evaluate P_n and P_n' at x by recurrence
            let mut p0 = 1.0;
            let mut p1 = x;
            for k in 2..=n {
                let kf = k as f64;
                let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
                p0 = p1;
                p1 = p2;
            }
            dp = nf * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

/// Hill estimator of the tail exponent gamma of P[W > t] ~ t^(-gamma),
/// computed from the top `k` order statistics.
pub fn hill_tail_exponent(samples: &[f64], k: usize) -> Option<f64> {
    if samples.len() < k + 1 || k < 2 {
        return None;
    }
    let mut sorted: Vec<f64> = samples.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let threshold = sorted[k];
    if threshold <= 0.0 {
        return None;
    }
    let mean_log: f64 = sorted[..k].iter().map(|&w| (w / threshold).ln()).sum::<f64>() / k as f64;
    if mean_log <= 0.0 {
        return None;
    }
    Some(1.0 / mean_log)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ln_gamma_matches_factorials() {
        for n in 1..15usize {
            let exact: f64 = (1..n).map(|k| (k as f64).ln()).sum();
            assert!((ln_gamma(n as f64) - exact).abs() < 1e-12, "n={n}");
        }
        // Gamma(1/2) = sqrt(pi)
        assert!((ln_gamma(0.5) - 0.5 * std::f64::consts::PI.ln()).abs() < 1e-13);
    }

    #[test]
    fn gauss_legendre_integrates_polynomials() {
        let (x, w) = gauss_legendre(8);
        // degree-15 polynomial integrated exactly
        let int: f64 = x.iter().zip(&w).map(|(&x, &w)| w * x.powi(14)).sum();
        assert!((int - 2.0 / 15.0).abs() < 1e-13);
    }

    #[test]
    fn margin_grows_with_horizon() {
        let m1 = displacement_margin(2, 10.0, 1e-12);
        let m2 = displacement_margin(2, 100.0, 1e-12);
        assert!(m2 > m1);
        assert!((4.0) * jump_tail_bound(100.0, m2 as f64) < 1e-12);
    }
}
