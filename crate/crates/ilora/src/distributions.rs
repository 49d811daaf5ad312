//! Closed-form divergences, moment matching, and edge-weight sampling.
//!
//! The edge model keeps three coupled views of an edge: a Gaussian
//! variational posterior `N(u, delta^2)` over a latent count intensity, the
//! Poisson rate `m` whose mean/variance profile best matches that Gaussian,
//! and a zero-mean Laplace weight distribution with scale `b` that carries
//! the sparsity prior. Everything here is scalar; tensorized variants live
//! on the autodiff tape and call into these functions for their forward
//! values.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Posterior probabilities are clamped to this interval before the Laplace
/// quantile map, keeping sampled weights finite.
pub const PROB_CLAMP: f64 = 1e-12;

/// Additive floor applied to every strictly-positive head output
/// (rates, scales, standard deviations).
pub const POSITIVE_FLOOR: f64 = 1e-6;

/// Gaussian with mean and variance. Variance is strictly positive.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianParams {
    mean: f64,
    var: f64,
}

impl GaussianParams {
    pub fn new(mean: f64, var: f64) -> Result<Self> {
        if !mean.is_finite() || !var.is_finite() {
            return Err(Error::arg(format!("gaussian params must be finite, got ({mean}, {var})")));
        }
        if var <= 0.0 {
            return Err(Error::arg(format!("gaussian variance must be > 0, got {var}")));
        }
        Ok(GaussianParams { mean, var })
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn var(&self) -> f64 {
        self.var
    }
}

/// Laplace location/scale pair. Scale is strictly positive.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LaplaceParams {
    loc: f64,
    scale: f64,
}

impl LaplaceParams {
    pub fn new(loc: f64, scale: f64) -> Result<Self> {
        if !loc.is_finite() || !scale.is_finite() {
            return Err(Error::arg(format!("laplace params must be finite, got ({loc}, {scale})")));
        }
        if scale <= 0.0 {
            return Err(Error::arg(format!("laplace scale must be > 0, got {scale}")));
        }
        Ok(LaplaceParams { loc, scale })
    }

    pub fn loc(&self) -> f64 {
        self.loc
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }
}

/// Strictly positive Poisson rate.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoissonRate(f64);

impl PoissonRate {
    pub fn new(rate: f64) -> Result<Self> {
        if !rate.is_finite() || rate <= 0.0 {
            return Err(Error::arg(format!("poisson rate must be finite and > 0, got {rate}")));
        }
        Ok(PoissonRate(rate))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// KL(p || q) between two Gaussians.
pub fn kl_gaussian(p: GaussianParams, q: GaussianParams) -> f64 {
    let d = p.mean - q.mean;
    0.5 * ((q.var / p.var).ln() + (p.var + d * d) / q.var - 1.0)
}

/// KL(Pois(m) || Pois(m0)) = m0 - m + m ln(m/m0).
pub fn kl_poisson(m: f64, m0: f64) -> Result<f64> {
    if !(m.is_finite() && m0.is_finite() && m > 0.0 && m0 > 0.0) {
        return Err(Error::arg(format!("poisson rates must be finite and > 0, got ({m}, {m0})")));
    }
    Ok(m0 - m + m * (m / m0).ln())
}

/// KL between zero-mean Laplace distributions with scales b and b0:
/// log(b0/b) + b/b0 - 1.
pub fn kl_laplace_scale(b: f64, b0: f64) -> Result<f64> {
    if !(b.is_finite() && b0.is_finite() && b > 0.0 && b0 > 0.0) {
        return Err(Error::arg(format!("laplace scales must be finite and > 0, got ({b}, {b0})")));
    }
    Ok((b0 / b).ln() + b / b0 - 1.0)
}

/// Rate of the Poisson distribution whose Gaussian moment profile
/// `N(m, m)` is KL-closest to the variational posterior `q`.
///
/// The minimizer is the unique positive root of
/// `2 m^2 + (1 - 2u) m - delta^2 = 0`, written in the form that avoids
/// cancellation when `2u - 1` is negative:
///
/// ```text
/// t = 2u - 1,  R = sqrt(t^2 + 8 delta^2)
/// m = (t + R) / 4            for t >= 0
/// m = 2 delta^2 / (R - t)    for t <  0
/// ```
pub fn match_poisson_rate(q: GaussianParams) -> f64 {
    let t = 2.0 * q.mean() - 1.0;
    let r = (t * t + 8.0 * q.var()).sqrt();
    let m = if t >= 0.0 {
        (t + r) / 4.0
    } else {
        2.0 * q.var() / (r - t)
    };
    // The root is strictly positive for any var > 0; guard against f64
    // underflow at extreme posteriors so downstream logs stay finite.
    m.max(f64::MIN_POSITIVE)
}

/// Partial derivatives of [`match_poisson_rate`] with respect to the
/// posterior mean `u` and standard deviation `delta`.
pub fn match_poisson_rate_grad(u: f64, delta: f64) -> (f64, f64) {
    let t = 2.0 * u - 1.0;
    let r = (t * t + 8.0 * delta * delta).sqrt();
    ((1.0 + t / r) / 2.0, 2.0 * delta / r)
}

/// Standard normal density.
pub fn std_normal_pdf(z: f64) -> f64 {
    const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;
    INV_SQRT_2PI * (-0.5 * z * z).exp()
}

/// Standard normal CDF, accurate to better than 1e-12 absolute.
///
/// Uses the all-positive-term series for erf on the central range and a
/// continued fraction for erfc in the tails, so there is no subtractive
/// cancellation in either regime.
pub fn std_normal_cdf(z: f64) -> f64 {
    if z.is_nan() {
        return f64::NAN;
    }
    let x = z / std::f64::consts::SQRT_2;
    if z >= 0.0 {
        1.0 - 0.5 * erfc(x)
    } else {
        0.5 * erfc(-x)
    }
}

/// Complementary error function for x >= 0.
fn erfc(x: f64) -> f64 {
    debug_assert!(x >= 0.0);
    if x < 2.0 {
        1.0 - erf_series(x)
    } else {
        erfc_cf(x)
    }
}

/// erf via the series  erf(x) = 2/sqrt(pi) e^{-x^2} sum_n (2x^2)^n x / (2n+1)!!
/// whose terms are all positive.
fn erf_series(x: f64) -> f64 {
    const TWO_OVER_SQRT_PI: f64 = 1.128_379_167_095_512_6;
    let x2 = 2.0 * x * x;
    let mut term = x;
    let mut sum = x;
    let mut n = 1.0;
    loop {
        term *= x2 / (2.0 * n + 1.0);
        sum += term;
        n += 1.0;
        if term < sum * 1e-17 || n > 200.0 {
            break;
        }
    }
    TWO_OVER_SQRT_PI * (-x * x).exp() * sum
}

/// erfc via the Laplace continued fraction
/// erfc(x) = e^{-x^2}/sqrt(pi) * 1/(x + (1/2)/(x + 1/(x + (3/2)/(x + ...))))
/// evaluated bottom-up from a fixed depth. Valid for x >= 2, where 120
/// levels are far more than full f64 precision requires.
fn erfc_cf(x: f64) -> f64 {
    const SQRT_PI: f64 = 1.772_453_850_905_516;
    let mut tail = 0.0;
    for k in (1..=120).rev() {
        tail = (k as f64 / 2.0) / (x + tail);
    }
    (-x * x).exp() / (SQRT_PI * (x + tail))
}

/// Laplace quantile function.
///
/// `F^{-1}(p) = loc - scale * sign(p - 1/2) * ln(1 - 2|p - 1/2|)`, computed
/// branch-wise as `loc + scale * ln(2p)` below the median and
/// `loc - scale * ln(2(1-p))` above it; the branch arguments are exact in
/// f64, where the literal `1 - 2|p - 1/2|` loses half its digits in the
/// tails. `p` must lie strictly inside (0, 1).
pub fn laplace_inverse_cdf(p: f64, params: LaplaceParams) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::arg(format!("quantile probability must be in (0, 1), got {p}")));
    }
    if p <= 0.5 {
        Ok(params.loc() + params.scale() * (2.0 * p).ln())
    } else {
        Ok(params.loc() - params.scale() * (2.0 * (1.0 - p)).ln())
    }
}

/// Laplace CDF (used by the sampling fidelity tests).
pub fn laplace_cdf(x: f64, params: LaplaceParams) -> f64 {
    let t = (x - params.loc()) / params.scale();
    if t < 0.0 {
        0.5 * t.exp()
    } else {
        1.0 - 0.5 * (-t).exp()
    }
}

/// One latent edge-weight draw.
///
/// Pushes a standard normal draw `eps` through the Gaussian posterior
/// `N(u, delta^2)`, maps it to a probability with the standard normal CDF,
/// clamps to `[PROB_CLAMP, 1 - PROB_CLAMP]`, and evaluates the zero-mean
/// Laplace quantile with scale `b`. The result is the signed weight before
/// any nonnegativity is applied.
pub fn npn_edge_sample(u: f64, delta: f64, b: f64, eps: f64) -> Result<f64> {
    if !(delta.is_finite() && delta > 0.0) {
        return Err(Error::arg(format!("posterior stddev must be > 0, got {delta}")));
    }
    if !(b.is_finite() && b > 0.0) {
        return Err(Error::arg(format!("laplace scale must be > 0, got {b}")));
    }
    if !u.is_finite() || !eps.is_finite() {
        return Err(Error::arg("edge sample inputs must be finite".to_string()));
    }
    let z = u + delta * eps;
    let p = std_normal_cdf(z).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    laplace_inverse_cdf(p, LaplaceParams::new(0.0, b)?)
}

/// Intermediate quantities of [`npn_edge_sample`], used by the tape op to
/// assemble exact partial derivatives around the same forward value.
pub(crate) struct EdgeSampleParts {
    pub w: f64,
    /// d w / d p at the clamped probability.
    pub dw_dp: f64,
    /// Normal density at z, zeroed when the probability hit a clamp bound.
    pub dp_dz: f64,
    /// Sign of p - 1/2 (0 at the median).
    pub side: i8,
    /// -1 / +1 when the probability was clamped low / high, 0 otherwise.
    pub clamped: i8,
}

pub(crate) fn npn_edge_sample_parts(u: f64, delta: f64, b: f64, eps: f64) -> Result<EdgeSampleParts> {
    let w = npn_edge_sample(u, delta, b, eps)?;
    let z = u + delta * eps;
    let p_raw = std_normal_cdf(z);
    let clamped = if p_raw < PROB_CLAMP {
        -1
    } else if p_raw > 1.0 - PROB_CLAMP {
        1
    } else {
        0
    };
    let p = p_raw.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    let q = 1.0 - 2.0 * (p - 0.5).abs();
    let side = if p > 0.5 {
        1
    } else if p < 0.5 {
        -1
    } else {
        0
    };
    Ok(EdgeSampleParts {
        w,
        dw_dp: 2.0 * b / q,
        dp_dz: if clamped == 0 { std_normal_pdf(z) } else { 0.0 },
        side,
        clamped,
    })
}

/// Laplace(0, b) draw by the Gaussian scale-mixture route: a Rayleigh(b)
/// scale `sigma = b * sqrt(-2 ln U)` applied to an independent standard
/// normal. Distributionally identical to inverse-CDF sampling.
pub fn rayleigh_mixture_sample<R: Rng + ?Sized>(b: f64, rng: &mut R) -> Result<f64> {
    if !(b.is_finite() && b > 0.0) {
        return Err(Error::arg(format!("laplace scale must be > 0, got {b}")));
    }
    // Open interval on both sides keeps the log finite.
    let mut u: f64 = rng.gen();
    while u <= 0.0 {
        u = rng.gen();
    }
    let sigma = b * (-2.0 * u.ln()).sqrt();
    let z: f64 = standard_normal(rng);
    Ok(sigma * z)
}

/// Box-Muller standard normal draw.
pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let mut u1: f64 = rng.gen();
    while u1 <= 0.0 {
        u1 = rng.gen();
    }
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gaussian_kl_unit_shift() {
        let p = GaussianParams::new(0.0, 1.0).unwrap();
        let q = GaussianParams::new(1.0, 1.0).unwrap();
        assert!((kl_gaussian(p, q) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn gaussian_kl_self_is_zero() {
        let p = GaussianParams::new(-2.3, 0.7).unwrap();
        assert_eq!(kl_gaussian(p, p), 0.0);
    }

    #[test]
    fn poisson_kl_frozen_value() {
        // m = 2, m0 = 1: 1 - 2 + 2 ln 2.
        let expected = 2.0 * std::f64::consts::LN_2 - 1.0;
        assert!((kl_poisson(2.0, 1.0).unwrap() - expected).abs() < 1e-15);
        assert_eq!(kl_poisson(3.0, 3.0).unwrap(), 0.0);
    }

    #[test]
    fn laplace_kl_frozen_value() {
        // b = 1, b0 = 2: ln 2 + 1/2 - 1.
        let expected = std::f64::consts::LN_2 - 0.5;
        assert!((kl_laplace_scale(1.0, 2.0).unwrap() - expected).abs() < 1e-15);
        assert_eq!(kl_laplace_scale(1.5, 1.5).unwrap(), 0.0);
    }

    #[test]
    fn invalid_parameters_rejected() {
        assert!(GaussianParams::new(0.0, 0.0).is_err());
        assert!(GaussianParams::new(0.0, -1.0).is_err());
        assert!(GaussianParams::new(f64::NAN, 1.0).is_err());
        assert!(LaplaceParams::new(0.0, 0.0).is_err());
        assert!(PoissonRate::new(-2.0).is_err());
        assert!(kl_poisson(0.0, 1.0).is_err());
        assert!(kl_laplace_scale(1.0, f64::INFINITY).is_err());
    }

    #[test]
    fn matched_rate_frozen_values() {
        // u = 3, var = 3: m = (5 + sqrt(25 + 24)) / 4 = 3.
        let m = match_poisson_rate(GaussianParams::new(3.0, 3.0).unwrap());
        assert!((m - 3.0).abs() < 1e-12);
        // u = 0.5, var = 0.5: m = sqrt(4) / 4 = 0.5.
        let m = match_poisson_rate(GaussianParams::new(0.5, 0.5).unwrap());
        assert!((m - 0.5).abs() < 1e-12);
    }

    #[test]
    fn matched_rate_satisfies_quadratic() {
        let cases = [(3.0, 3.0), (0.5, 0.5), (-4.0, 0.01), (10.0, 2.0), (-0.2, 4.0)];
        for (u, var) in cases {
            let m = match_poisson_rate(GaussianParams::new(u, var).unwrap());
            assert!(m > 0.0);
            let residual = 2.0 * m * m + (1.0 - 2.0 * u) * m - var;
            let scale = (2.0 * m * m).abs().max(((1.0 - 2.0 * u) * m).abs()).max(var);
            assert!(
                residual.abs() <= 1e-9 * scale.max(1.0),
                "residual {residual} too large at u={u} var={var}"
            );
        }
    }

    #[test]
    fn laplace_quantile_frozen_values() {
        let std = LaplaceParams::new(0.0, 1.0).unwrap();
        let q = laplace_inverse_cdf(0.75, std).unwrap();
        assert!((q - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(laplace_inverse_cdf(0.5, std).unwrap(), 0.0);
        assert!(laplace_inverse_cdf(0.0, std).is_err());
        assert!(laplace_inverse_cdf(1.0, std).is_err());
    }

    #[test]
    fn laplace_quantile_inverts_cdf() {
        let params = LaplaceParams::new(-1.0, 2.5).unwrap();
        for &p in &[0.001, 0.2, 0.5, 0.77, 0.999] {
            let x = laplace_inverse_cdf(p, params).unwrap();
            assert!((laplace_cdf(x, params) - p).abs() < 1e-12);
        }
    }

    #[test]
    fn normal_cdf_frozen_values() {
        assert!((std_normal_cdf(0.0) - 0.5).abs() < 1e-15);
        // 97.5th percentile of the standard normal.
        assert!((std_normal_cdf(1.959963985) - 0.975).abs() < 1e-9);
        // Symmetry.
        for &z in &[0.3, 1.0, 2.5, 4.0, 7.5] {
            assert!((std_normal_cdf(z) + std_normal_cdf(-z) - 1.0).abs() < 1e-14);
        }
        // Monotone.
        let mut prev = 0.0;
        let mut z = -9.0;
        while z <= 9.0 {
            let c = std_normal_cdf(z);
            assert!(c >= prev);
            prev = c;
            z += 0.05;
        }
    }

    #[test]
    fn edge_sample_median_is_zero() {
        // u = 0 with eps = 0 puts the probability exactly at 1/2.
        let w = npn_edge_sample(0.0, 1.0, 2.0, 0.0).unwrap();
        assert_eq!(w, 0.0);
    }

    #[test]
    fn edge_sample_extreme_draw_stays_finite() {
        let w = npn_edge_sample(50.0, 1.0, 1.0, 0.0).unwrap();
        assert!(w.is_finite());
        // Clamped at 1 - 1e-12, whose quantile is -ln(2e-12) up to the
        // representation error of the clamp bound itself near 1.
        assert!((w - -(2e-12f64).ln()).abs() < 1e-3);
    }
}
