//! Shared numerical oracles for the integration and acceptance suites.
//!
//! Everything here recomputes target quantities by an independent route:
//! brute-force minimization, series summation, quadrature, bisection, or
//! Monte Carlo. None of it calls the closed forms under test.

#![allow(dead_code)]

use ilora::distributions::laplace_cdf;
use ilora::distributions::LaplaceParams;

/// Minimizes a strictly convex scalar function by repeated grid scans with
/// bracket shrinking, until the grid step drops below `target_step`.
/// Returns the approximate argmin.
pub fn grid_refine_min(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, target_step: f64) -> f64 {
    const STEPS: usize = 4000;
    loop {
        let h = (hi - lo) / STEPS as f64;
        let mut best_i = 0;
        let mut best_v = f64::INFINITY;
        for i in 0..=STEPS {
            let x = lo + h * i as f64;
            let v = f(x);
            if v < best_v {
                best_v = v;
                best_i = i;
            }
        }
        let center = lo + h * best_i as f64;
        if h <= target_step {
            return center;
        }
        lo = (center - 2.0 * h).max(lo);
        hi = (center + 2.0 * h).min(hi);
    }
}

/// KL(Pois(m) || Pois(m0)) by direct series summation over the support,
/// with iteratively built pmf terms. Truncates once the accumulated mass
/// exceeds 1 - 1e-13 (and the index has passed both modes).
pub fn poisson_kl_series(m: f64, m0: f64) -> f64 {
    let log_ratio = (m / m0).ln();
    let mut pmf = (-m).exp();
    let mut mass = pmf;
    // k = 0 term: pmf * (m0 - m + 0 * log_ratio)
    let mut kl = pmf * (m0 - m);
    let mut k = 0u64;
    let k_floor = (m.max(m0) * 4.0 + 200.0) as u64;
    loop {
        k += 1;
        pmf *= m / k as f64;
        mass += pmf;
        kl += pmf * (m0 - m + k as f64 * log_ratio);
        if (mass >= 1.0 - 1e-13 && k as f64 > m) || k > k_floor {
            break;
        }
    }
    kl
}

/// KL between zero-mean Laplace densities by composite Simpson quadrature
/// over [0, 60 b] (the integrand is even).
pub fn laplace_kl_quadrature(b: f64, b0: f64) -> f64 {
    let integrand = |x: f64| {
        let p = (0.5 / b) * (-x / b).exp();
        let log_ratio = (b0 / b).ln() - x * (1.0 / b - 1.0 / b0);
        p * log_ratio
    };
    2.0 * simpson(integrand, 0.0, 60.0 * b, 40_000)
}

/// Composite Simpson rule with `n` panels (n must be even).
pub fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    assert!(n.is_multiple_of(2));
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        let x = a + h * i as f64;
        s += f(x) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

/// Standard normal CDF by quadrature of the density, independent of any
/// erf implementation.
pub fn normal_cdf_quadrature(z: f64) -> f64 {
    let pdf = |x: f64| (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    if z >= 0.0 {
        0.5 + simpson(pdf, 0.0, z, 40_000)
    } else {
        0.5 - simpson(pdf, 0.0, -z, 40_000)
    }
}

/// Laplace quantile by bisection on the CDF.
pub fn laplace_quantile_bisect(p: f64, params: LaplaceParams) -> f64 {
    let mut lo = params.loc() - 80.0 * params.scale();
    let mut hi = params.loc() + 80.0 * params.scale();
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if laplace_cdf(mid, params) < p {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-13 * params.scale().max(1.0) {
            break;
        }
    }
    0.5 * (lo + hi)
}

/// One-sample Kolmogorov-Smirnov statistic against a reference CDF.
/// `samples` need not be sorted.
pub fn ks_statistic(samples: &mut [f64], cdf: impl Fn(f64) -> f64) -> f64 {
    samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = samples.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in samples.iter().enumerate() {
        let f = cdf(x);
        d = d.max((f - i as f64 / n).abs());
        d = d.max((f - (i as f64 + 1.0) / n).abs());
    }
    d
}

/// Two-sample Kolmogorov-Smirnov statistic.
pub fn ks_two_sample(a: &mut [f64], b: &mut [f64]) -> f64 {
    a.sort_by(|x, y| x.partial_cmp(y).unwrap());
    b.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let (na, nb) = (a.len(), b.len());
    let mut i = 0;
    let mut j = 0;
    let mut d: f64 = 0.0;
    while i < na && j < nb {
        let xa = a[i];
        let xb = b[j];
        if xa <= xb {
            i += 1;
        }
        if xb <= xa {
            j += 1;
        }
        let diff = (i as f64 / na as f64 - j as f64 / nb as f64).abs();
        d = d.max(diff);
    }
    d
}

/// Asymptotic one-sample KS critical value at significance 0.01.
pub fn ks_critical_one_sample(n: usize) -> f64 {
    1.62762 / (n as f64).sqrt()
}

/// Asymptotic two-sample KS critical value at significance 0.01.
pub fn ks_critical_two_sample(n: usize, m: usize) -> f64 {
    1.62762 * ((n + m) as f64 / (n as f64 * m as f64)).sqrt()
}

/// Relative error with a unit floor, so near-zero pairs compare absolutely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}
