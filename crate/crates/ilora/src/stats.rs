//! Cohort-level statistics used to build a reference edge set from labeled
//! compositional data.
//!
//! A candidate pair earns a reference edge only if it passes two independent
//! screens after multiplicity control: a rank-correlation screen between the
//! centered log-ratio values of the two entities, and a label-association
//! screen where the pair's log-ratio feeds a logistic model of the sample
//! label. The final set is the intersection at the chosen false discovery
//! rate.
//!
//! Distribution functions are implemented directly: the Student-t tail goes
//! through the regularized incomplete beta evaluated by continued fraction,
//! and small-sample rank correlations use the exact permutation null.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::distributions::std_normal_cdf;
use crate::error::{Error, Result};

/// Sample size at or below which the rank-correlation null is enumerated
/// exactly instead of using the t approximation.
pub const EXACT_PERMUTATION_LIMIT: usize = 8;
const IRLS_MAX_ITER: usize = 50;
const IRLS_TOL: f64 = 1e-8;
const BETA_DIVERGENCE_LIMIT: f64 = 20.0;

/// Centered log-ratio transform with pseudocount closure: each row is
/// shifted by the pseudocount, renormalized, logged, and centered, so every
/// output row sums to zero.
pub fn clr_transform(rows: &[Vec<f64>], pseudocount: f64) -> Result<Vec<Vec<f64>>> {
    if rows.is_empty() {
        return Err(Error::arg("clr over an empty table"));
    }
    if !(pseudocount >= 0.0 && pseudocount.is_finite()) {
        return Err(Error::arg(format!("pseudocount must be nonnegative, got {pseudocount}")));
    }
    let k = rows[0].len();
    if k == 0 {
        return Err(Error::arg("clr rows need at least one entity"));
    }
    let mut out = Vec::with_capacity(rows.len());
    for (r, row) in rows.iter().enumerate() {
        if row.len() != k {
            return Err(Error::shape("clr row", format!("{k} entries"), format!("{} in row {r}", row.len())));
        }
        let shifted: Vec<f64> = row.iter().map(|&v| v + pseudocount).collect();
        let total: f64 = shifted.iter().sum();
        if !(total > 0.0) || shifted.iter().any(|&v| v <= 0.0) {
            return Err(Error::arg(format!("row {r} is not strictly positive after the pseudocount")));
        }
        let logs: Vec<f64> = shifted.iter().map(|&v| (v / total).ln()).collect();
        let mean = logs.iter().sum::<f64>() / k as f64;
        out.push(logs.into_iter().map(|v| v - mean).collect());
    }
    Ok(out)
}

/// Mid-rank assignment: tied values share the average of their 1-based
/// positions.
pub fn mid_ranks(xs: &[f64]) -> Vec<f64> {
    let n = xs.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).expect("ranks need finite values").then(a.cmp(&b)));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for t in i..=j {
            ranks[idx[t]] = rank;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (&a, &b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SpearmanResult {
    pub rho: f64,
    pub p_value: f64,
    /// True when the p-value came from full permutation enumeration.
    pub exact: bool,
}

/// Spearman rank correlation with a two-sided p-value: exact permutation
/// null for small n, t approximation otherwise. Degenerate inputs (a
/// constant margin) report zero correlation with p = 1.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<SpearmanResult> {
    let n = x.len();
    if y.len() != n {
        return Err(Error::shape("spearman", format!("{n} paired values"), format!("{}", y.len())));
    }
    if n < 3 {
        return Err(Error::arg("spearman needs at least three pairs"));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::arg("spearman inputs must be finite"));
    }
    let rx = mid_ranks(x);
    let ry = mid_ranks(y);
    let Some(rho) = pearson(&rx, &ry) else {
        return Ok(SpearmanResult { rho: 0.0, p_value: 1.0, exact: false });
    };
    if n <= EXACT_PERMUTATION_LIMIT {
        let p_value = exact_permutation_p(&rx, &ry, rho.abs());
        return Ok(SpearmanResult { rho, p_value, exact: true });
    }
    if rho.abs() >= 1.0 {
        return Ok(SpearmanResult { rho, p_value: 0.0, exact: false });
    }
    let dof = (n - 2) as f64;
    let t = rho * (dof / (1.0 - rho * rho)).sqrt();
    let tail = 1.0 - student_t_cdf(t.abs(), dof)?;
    Ok(SpearmanResult { rho, p_value: (2.0 * tail).min(1.0), exact: false })
}

/// Two-sided permutation p-value over every reordering of the y ranks.
/// Means and variances are permutation invariant, so only the cross sum
/// varies; the observed statistic counts itself, keeping p positive.
fn exact_permutation_p(rx: &[f64], ry: &[f64], abs_rho: f64) -> f64 {
    let n = rx.len();
    let mx = rx.iter().sum::<f64>() / n as f64;
    let my = ry.iter().sum::<f64>() / n as f64;
    let cx: Vec<f64> = rx.iter().map(|&v| v - mx).collect();
    let mut cy: Vec<f64> = ry.iter().map(|&v| v - my).collect();
    let sxx: f64 = cx.iter().map(|v| v * v).sum();
    let syy: f64 = cy.iter().map(|v| v * v).sum();
    let denom = (sxx * syy).sqrt();
    let threshold = abs_rho * denom - 1e-12 * denom.max(1.0);

    let mut hits = 0usize;
    let mut total = 0usize;
    // Heap's algorithm over cy in place.
    let mut counters = vec![0usize; n];
    let mut tally = |cy: &[f64]| {
        let dot: f64 = cx.iter().zip(cy).map(|(a, b)| a * b).sum();
        total += 1;
        if dot.abs() >= threshold {
            hits += 1;
        }
    };
    tally(&cy);
    let mut i = 1;
    while i < n {
        if counters[i] < i {
            if i % 2 == 0 {
                cy.swap(0, i);
            } else {
                cy.swap(counters[i], i);
            }
            tally(&cy);
            counters[i] += 1;
            i = 1;
        } else {
            counters[i] = 0;
            i += 1;
        }
    }
    hits as f64 / total as f64
}

/// Natural log of the gamma function, Lanczos approximation with reflection
/// below one half.
pub fn ln_gamma(x: f64) -> f64 {
    const COEF: [f64; 8] = [
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        // Reflection keeps the argument in the stable half line.
        return std::f64::consts::PI.ln() - (std::f64::consts::PI * x).sin().ln() - ln_gamma(1.0 - x);
    }
    let z = x - 1.0;
    let mut acc = 0.999_999_999_999_809_9;
    for (i, &c) in COEF.iter().enumerate() {
        acc += c / (z + i as f64 + 1.0);
    }
    let t = z + 7.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (z + 0.5) * t.ln() - t + acc.ln()
}

/// Continued fraction for the regularized incomplete beta, evaluated by the
/// modified Lentz scheme.
fn beta_continued_fraction(a: f64, b: f64, x: f64) -> Result<f64> {
    const FPMIN: f64 = 1e-300;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < FPMIN {
        d = FPMIN;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=300 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < FPMIN {
            d = FPMIN;
        }
        c = 1.0 + aa / c;
        if c.abs() < FPMIN {
            c = FPMIN;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < FPMIN {
            d = FPMIN;
        }
        c = 1.0 + aa / c;
        if c.abs() < FPMIN {
            c = FPMIN;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < 3e-16 {
            return Ok(h);
        }
    }
    Err(Error::arg(format!("incomplete beta continued fraction stalled at a={a} b={b} x={x}")))
}

/// Regularized incomplete beta I_x(a, b).
pub fn incomplete_beta(a: f64, b: f64, x: f64) -> Result<f64> {
    if !(a > 0.0 && b > 0.0) {
        return Err(Error::arg(format!("incomplete beta needs positive shape, got a={a} b={b}")));
    }
    if !(0.0..=1.0).contains(&x) {
        return Err(Error::arg(format!("incomplete beta argument must be in [0, 1], got {x}")));
    }
    if x == 0.0 {
        return Ok(0.0);
    }
    if x == 1.0 {
        return Ok(1.0);
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        Ok(front * beta_continued_fraction(a, b, x)? / a)
    } else {
        Ok(1.0 - front * beta_continued_fraction(b, a, 1.0 - x)? / b)
    }
}

/// Student-t distribution function P(T <= t) with `dof` degrees of freedom.
pub fn student_t_cdf(t: f64, dof: f64) -> Result<f64> {
    if !(dof > 0.0 && dof.is_finite()) {
        return Err(Error::arg(format!("degrees of freedom must be positive, got {dof}")));
    }
    if !t.is_finite() {
        return Err(Error::arg("t statistic must be finite"));
    }
    let x = dof / (dof + t * t);
    let half_tail = 0.5 * incomplete_beta(0.5 * dof, 0.5, x)?;
    Ok(if t >= 0.0 { 1.0 - half_tail } else { half_tail })
}

/// Step-up false-discovery-rate adjustment: adjusted q-values in input
/// order, each the running minimum of p * m / rank from the largest p down.
pub fn bh_adjust(p_values: &[f64]) -> Result<Vec<f64>> {
    let m = p_values.len();
    if m == 0 {
        return Err(Error::arg("adjustment over an empty p-value list"));
    }
    for (i, &p) in p_values.iter().enumerate() {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::arg(format!("p-value {p} at index {i} is outside [0, 1]")));
        }
    }
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p_values[a].partial_cmp(&p_values[b]).expect("p-values are finite").then(a.cmp(&b)));
    let mut adjusted = vec![0.0; m];
    let mut running = 1.0f64;
    for rank in (0..m).rev() {
        let i = order[rank];
        let q = (p_values[i] * m as f64 / (rank + 1) as f64).min(1.0);
        running = running.min(q);
        adjusted[i] = running;
    }
    Ok(adjusted)
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LogisticFit {
    pub alpha: f64,
    pub beta: f64,
    pub std_err: f64,
    pub p_value: f64,
    pub converged: bool,
    /// True when the penalized (bias-reduced) fallback produced the fit.
    pub firth: bool,
}

struct LogisticState {
    alpha: f64,
    beta: f64,
    info: [f64; 3],
    converged: bool,
}

/// One Newton pass: plain score for the standard fit, bias-corrected score
/// for the penalized fallback.
fn logistic_newton(x: &[f64], y: &[u8], firth: bool) -> LogisticState {
    let n = x.len();
    let mut alpha = 0.0f64;
    let mut beta = 0.0f64;
    let mut info = [0.0f64; 3];
    let mut converged = false;
    for _ in 0..IRLS_MAX_ITER {
        let mut s0 = 0.0;
        let mut s1 = 0.0;
        let (mut i00, mut i01, mut i11) = (0.0, 0.0, 0.0);
        let mut probs = Vec::with_capacity(n);
        for (&xi, &yi) in x.iter().zip(y) {
            let eta = alpha + beta * xi;
            let p = 1.0 / (1.0 + (-eta).exp());
            let w = p * (1.0 - p);
            probs.push(p);
            i00 += w;
            i01 += w * xi;
            i11 += w * xi * xi;
            s0 += f64::from(yi) - p;
            s1 += (f64::from(yi) - p) * xi;
        }
        let det = i00 * i11 - i01 * i01;
        if det.abs() < 1e-12 || !det.is_finite() {
            break;
        }
        if firth {
            // Leverages of the weighted design shrink the score toward
            // one half, which keeps separated data finite.
            for (k, &xi) in x.iter().enumerate() {
                let p = probs[k];
                let w = p * (1.0 - p);
                let quad = (i11 - 2.0 * xi * i01 + xi * xi * i00) / det;
                let h = w * quad;
                s0 += h * (0.5 - p);
                s1 += h * (0.5 - p) * xi;
            }
        }
        let da = (i11 * s0 - i01 * s1) / det;
        let db = (-i01 * s0 + i00 * s1) / det;
        alpha += da;
        beta += db;
        info = [i00, i01, i11];
        if da.abs().max(db.abs()) < IRLS_TOL {
            converged = true;
            break;
        }
        if !alpha.is_finite() || !beta.is_finite() {
            break;
        }
    }
    LogisticState { alpha, beta, info, converged }
}

/// Logistic regression of a binary label on one covariate with a Wald test
/// on the slope. Separation or non-convergence falls back to the penalized
/// fit and flags it.
pub fn logistic_logratio(x: &[f64], y: &[u8]) -> Result<LogisticFit> {
    let n = x.len();
    if y.len() != n {
        return Err(Error::shape("logistic fit", format!("{n} labels"), format!("{}", y.len())));
    }
    if n < 4 {
        return Err(Error::arg("logistic fit needs at least four samples"));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::arg("logistic covariate must be finite"));
    }
    if y.iter().any(|&v| v > 1) {
        return Err(Error::arg("labels must be 0 or 1"));
    }
    if y.iter().all(|&v| v == y[0]) {
        return Err(Error::arg("logistic fit needs both classes present"));
    }

    let mut state = logistic_newton(x, y, false);
    let mut firth = false;
    if !state.converged || state.beta.abs() > BETA_DIVERGENCE_LIMIT {
        state = logistic_newton(x, y, true);
        firth = true;
    }
    let [i00, i01, i11] = state.info;
    let det = i00 * i11 - i01 * i01;
    if det.abs() < 1e-12 || !det.is_finite() {
        // Constant covariate carries no signal.
        return Ok(LogisticFit {
            alpha: state.alpha,
            beta: 0.0,
            std_err: f64::INFINITY,
            p_value: 1.0,
            converged: false,
            firth,
        });
    }
    let var_beta = i00 / det;
    let std_err = var_beta.sqrt();
    let z = state.beta / std_err;
    let p_value = (2.0 * (1.0 - std_normal_cdf(z.abs()))).min(1.0);
    Ok(LogisticFit {
        alpha: state.alpha,
        beta: state.beta,
        std_err,
        p_value,
        converged: state.converged,
        firth,
    })
}

/// One screened candidate pair with both adjusted significance levels.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PairScreen {
    pub pair: (usize, usize),
    pub spearman_rho: f64,
    pub spearman_p: f64,
    pub spearman_q: f64,
    pub logistic_beta: f64,
    pub logistic_p: f64,
    pub logistic_q: f64,
    pub logistic_firth: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReferenceEdges {
    pub screens: Vec<PairScreen>,
    pub q_threshold: f64,
    /// Pairs passing both screens at the threshold.
    pub edges: BTreeSet<(usize, usize)>,
}

/// Runs both screens over every unordered entity pair of a labeled
/// compositional table and intersects the discoveries.
pub fn build_reference(
    rows: &[Vec<f64>],
    labels: &[u8],
    pseudocount: f64,
    q_threshold: f64,
) -> Result<ReferenceEdges> {
    if rows.len() != labels.len() {
        return Err(Error::shape("reference build", format!("{} labels", rows.len()), format!("{}", labels.len())));
    }
    if !(q_threshold > 0.0 && q_threshold < 1.0) {
        return Err(Error::arg(format!("q threshold must be in (0, 1), got {q_threshold}")));
    }
    let clr = clr_transform(rows, pseudocount)?;
    let k = clr[0].len();
    if k < 2 {
        return Err(Error::arg("reference build needs at least two entities"));
    }

    let mut pairs = Vec::new();
    let mut sp_p = Vec::new();
    let mut lg_p = Vec::new();
    let mut sp_rho = Vec::new();
    let mut lg_beta = Vec::new();
    let mut lg_firth = Vec::new();
    for i in 0..k {
        for j in (i + 1)..k {
            let xi: Vec<f64> = clr.iter().map(|r| r[i]).collect();
            let xj: Vec<f64> = clr.iter().map(|r| r[j]).collect();
            let sp = spearman(&xi, &xj)?;
            // CLR difference is exactly the pair's log-ratio.
            let ratio: Vec<f64> = xi.iter().zip(&xj).map(|(a, b)| a - b).collect();
            let fit = logistic_logratio(&ratio, labels)?;
            pairs.push((i, j));
            sp_rho.push(sp.rho);
            sp_p.push(sp.p_value);
            lg_beta.push(fit.beta);
            lg_p.push(fit.p_value);
            lg_firth.push(fit.firth);
        }
    }
    let sp_q = bh_adjust(&sp_p)?;
    let lg_q = bh_adjust(&lg_p)?;

    let mut screens = Vec::with_capacity(pairs.len());
    let mut edges = BTreeSet::new();
    for (idx, &pair) in pairs.iter().enumerate() {
        if sp_q[idx] < q_threshold && lg_q[idx] < q_threshold {
            edges.insert(pair);
        }
        screens.push(PairScreen {
            pair,
            spearman_rho: sp_rho[idx],
            spearman_p: sp_p[idx],
            spearman_q: sp_q[idx],
            logistic_beta: lg_beta[idx],
            logistic_p: lg_p[idx],
            logistic_q: lg_q[idx],
            logistic_firth: lg_firth[idx],
        });
    }
    Ok(ReferenceEdges { screens, q_threshold, edges })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clr_frozen_example() {
        let rows = vec![vec![0.5, 0.25, 0.25]];
        let clr = clr_transform(&rows, 0.0).unwrap();
        let ln2 = std::f64::consts::LN_2;
        assert!((clr[0][0] - 2.0 / 3.0 * ln2).abs() < 1e-15);
        assert!((clr[0][1] + ln2 / 3.0).abs() < 1e-15);
        assert!((clr[0][2] + ln2 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn clr_rows_sum_to_zero() {
        let rows = vec![vec![0.7, 0.1, 0.15, 0.05], vec![0.01, 0.02, 0.9, 0.07]];
        for row in clr_transform(&rows, 1e-6).unwrap() {
            assert!(row.iter().sum::<f64>().abs() < 1e-12);
        }
    }

    #[test]
    fn clr_scale_invariance() {
        let a = clr_transform([vec![2.0, 6.0, 12.0]].as_ref(), 0.0).unwrap();
        let b = clr_transform([vec![1.0, 3.0, 6.0]].as_ref(), 0.0).unwrap();
        for (x, y) in a[0].iter().zip(&b[0]) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn clr_rejects_zeros_without_pseudocount() {
        assert!(clr_transform([vec![0.0, 1.0]].as_ref(), 0.0).is_err());
        assert!(clr_transform([vec![0.0, 1.0]].as_ref(), 1e-6).is_ok());
    }

    #[test]
    fn mid_ranks_average_ties() {
        assert_eq!(mid_ranks(&[10.0, 20.0, 20.0, 5.0]), vec![2.0, 3.5, 3.5, 1.0]);
    }

    #[test]
    fn spearman_frozen_example() {
        let r = spearman(&[1.0, 2.0, 3.0, 4.0], &[2.0, 1.0, 4.0, 3.0]).unwrap();
        assert!((r.rho - 0.6).abs() < 1e-15);
        assert!(r.exact);
        // Brute-force two-sided permutation p over all 24 orderings.
        let perms = permutations(&[2.0, 1.0, 4.0, 3.0]);
        let base = [1.0, 2.0, 3.0, 4.0];
        let hits = perms
            .iter()
            .filter(|p| {
                let rho = rank_pearson(&base, p);
                rho.abs() >= 0.6 - 1e-12
            })
            .count();
        assert!((r.p_value - hits as f64 / perms.len() as f64).abs() < 1e-15);
    }

    fn permutations(xs: &[f64]) -> Vec<Vec<f64>> {
        if xs.len() == 1 {
            return vec![xs.to_vec()];
        }
        let mut out = Vec::new();
        for i in 0..xs.len() {
            let mut rest = xs.to_vec();
            let head = rest.remove(i);
            for mut tail in permutations(&rest) {
                tail.insert(0, head);
                out.push(tail);
            }
        }
        out
    }

    fn rank_pearson(x: &[f64], y: &[f64]) -> f64 {
        let rx = mid_ranks(x);
        let ry = mid_ranks(y);
        pearson(&rx, &ry).unwrap()
    }

    #[test]
    fn spearman_equals_rank_then_pearson() {
        let x = [0.3, -1.2, 0.8, 0.8, 2.5, -0.4, 1.1, 0.0, -2.0, 0.9, 1.7, -0.6];
        let y = [1.0, 0.2, -0.5, 0.9, 2.2, 0.2, 1.4, -0.1, -1.5, 0.3, 2.0, 0.5];
        let r = spearman(&x, &y).unwrap();
        assert!(!r.exact);
        assert!((r.rho - rank_pearson(&x, &y)).abs() < 1e-12);
    }

    #[test]
    fn spearman_perfect_monotone() {
        let x: Vec<f64> = (0..12).map(|i| i as f64).collect();
        let y: Vec<f64> = x.iter().map(|v| v * v + 1.0).collect();
        let r = spearman(&x, &y).unwrap();
        assert_eq!(r.rho, 1.0);
        assert_eq!(r.p_value, 0.0);
        let yn: Vec<f64> = x.iter().map(|v| -v).collect();
        assert_eq!(spearman(&x, &yn).unwrap().rho, -1.0);
    }

    #[test]
    fn spearman_constant_margin_is_null() {
        let x = [1.0; 6];
        let y = [0.3, 0.9, 0.1, 0.5, 0.7, 0.2];
        let r = spearman(&x, &y).unwrap();
        assert_eq!(r.rho, 0.0);
        assert_eq!(r.p_value, 1.0);
    }

    #[test]
    fn ln_gamma_known_values() {
        assert!((ln_gamma(1.0)).abs() < 1e-13);
        assert!((ln_gamma(5.0) - 24.0f64.ln()).abs() < 1e-12);
        assert!((ln_gamma(0.5) - 0.5 * std::f64::consts::PI.ln()).abs() < 1e-13);
        // Gamma(10) = 9!.
        assert!((ln_gamma(10.0) - 362_880.0f64.ln()).abs() < 1e-11);
    }

    #[test]
    fn incomplete_beta_closed_forms() {
        for x in [0.05, 0.3, 0.5, 0.77, 0.99] {
            assert!((incomplete_beta(1.0, 1.0, x).unwrap() - x).abs() < 1e-13);
            // I_x(2, 1) = x^2 and I_x(1, b) = 1 - (1 - x)^b.
            assert!((incomplete_beta(2.0, 1.0, x).unwrap() - x * x).abs() < 1e-13);
            let b = 3.5;
            assert!((incomplete_beta(1.0, b, x).unwrap() - (1.0 - (1.0 - x).powf(b))).abs() < 1e-13);
            // Complement identity.
            let lhs = incomplete_beta(2.3, 4.1, x).unwrap();
            let rhs = 1.0 - incomplete_beta(4.1, 2.3, 1.0 - x).unwrap();
            assert!((lhs - rhs).abs() < 1e-13);
        }
        assert_eq!(incomplete_beta(2.0, 3.0, 0.0).unwrap(), 0.0);
        assert_eq!(incomplete_beta(2.0, 3.0, 1.0).unwrap(), 1.0);
    }

    #[test]
    fn t_cdf_closed_forms_and_symmetry() {
        for t in [-4.0f64, -1.3, -0.2, 0.0, 0.7, 2.9, 6.0] {
            // One degree of freedom is the Cauchy distribution.
            let cauchy = 0.5 + t.atan() / std::f64::consts::PI;
            assert!((student_t_cdf(t, 1.0).unwrap() - cauchy).abs() < 1e-13, "t={t}");
            // Two degrees of freedom has an elementary form.
            let two = 0.5 + t / (2.0 * (t * t + 2.0).sqrt());
            assert!((student_t_cdf(t, 2.0).unwrap() - two).abs() < 1e-13, "t={t}");
            // Symmetry.
            let sum = student_t_cdf(t, 7.0).unwrap() + student_t_cdf(-t, 7.0).unwrap();
            assert!((sum - 1.0).abs() < 1e-13);
        }
    }

    #[test]
    fn t_cdf_approaches_normal_for_many_dof() {
        for t in [-2.0, -0.5, 0.8, 1.9] {
            let tv = student_t_cdf(t, 500.0).unwrap();
            let nv = std_normal_cdf(t);
            assert!((tv - nv).abs() < 1.5e-3, "t={t}: {tv} vs {nv}");
        }
    }

    #[test]
    fn bh_frozen_example() {
        let q = bh_adjust(&[0.01, 0.04, 0.03, 0.02]).unwrap();
        for v in &q {
            assert!((v - 0.04).abs() < 1e-15);
        }
    }

    #[test]
    fn bh_respects_bounds_and_order() {
        let p = [0.001, 0.2, 0.8, 0.012, 0.03, 1.0, 0.05];
        let q = bh_adjust(&p).unwrap();
        for (&pi, &qi) in p.iter().zip(&q) {
            assert!(qi >= pi - 1e-15 && qi <= 1.0);
        }
        // Adjusted values preserve the p-value ordering.
        let mut idx: Vec<usize> = (0..p.len()).collect();
        idx.sort_by(|&a, &b| p[a].partial_cmp(&p[b]).unwrap());
        for w in idx.windows(2) {
            assert!(q[w[0]] <= q[w[1]] + 1e-15);
        }
        assert_eq!(bh_adjust(&[0.25]).unwrap(), vec![0.25]);
        assert!(bh_adjust(&[1.2]).is_err());
    }

    fn logistic_data(beta_true: f64, n: usize, seed: u64) -> (Vec<f64>, Vec<u8>) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let y: Vec<u8> = x
            .iter()
            .map(|&xi| {
                let p = 1.0 / (1.0 + (-(0.3 + beta_true * xi)).exp());
                u8::from(rng.gen_bool(p))
            })
            .collect();
        (x, y)
    }

    #[test]
    fn logistic_matches_grid_search_mle() {
        let (x, y) = logistic_data(1.2, 60, 4);
        let fit = logistic_logratio(&x, &y).unwrap();
        assert!(fit.converged && !fit.firth);

        // Independent oracle: coarse-to-fine grid over the log-likelihood.
        let loglik = |a: f64, b: f64| -> f64 {
            x.iter()
                .zip(&y)
                .map(|(&xi, &yi)| {
                    let eta = a + b * xi;
                    f64::from(yi) * eta - (1.0 + eta.exp()).ln()
                })
                .sum()
        };
        let (mut best_a, mut best_b) = (0.0, 0.0);
        let (mut lo_a, mut hi_a, mut lo_b, mut hi_b) = (-5.0, 5.0, -5.0, 5.0);
        for _ in 0..6 {
            let mut best = f64::NEG_INFINITY;
            for ia in 0..=40 {
                for ib in 0..=40 {
                    let a = lo_a + (hi_a - lo_a) * ia as f64 / 40.0;
                    let b = lo_b + (hi_b - lo_b) * ib as f64 / 40.0;
                    let ll = loglik(a, b);
                    if ll > best {
                        best = ll;
                        best_a = a;
                        best_b = b;
                    }
                }
            }
            let span_a = (hi_a - lo_a) / 10.0;
            let span_b = (hi_b - lo_b) / 10.0;
            lo_a = best_a - span_a;
            hi_a = best_a + span_a;
            lo_b = best_b - span_b;
            hi_b = best_b + span_b;
        }
        assert!((fit.alpha - best_a).abs() < 1e-4, "alpha {} vs {best_a}", fit.alpha);
        assert!((fit.beta - best_b).abs() < 1e-4, "beta {} vs {best_b}", fit.beta);
        assert!(fit.beta > 0.0);
        assert!(fit.p_value > 0.0 && fit.p_value < 1.0);
    }

    #[test]
    fn strong_signal_is_more_significant() {
        let (x1, y1) = logistic_data(0.1, 80, 9);
        let (x2, y2) = logistic_data(2.5, 80, 9);
        let weak = logistic_logratio(&x1, &y1).unwrap();
        let strong = logistic_logratio(&x2, &y2).unwrap();
        assert!(strong.p_value < weak.p_value);
    }

    #[test]
    fn separated_data_falls_back_to_penalized_fit() {
        let x: Vec<f64> = (0..12).map(|i| i as f64 - 5.5).collect();
        let y: Vec<u8> = x.iter().map(|&v| u8::from(v > 0.0)).collect();
        let fit = logistic_logratio(&x, &y).unwrap();
        assert!(fit.firth);
        assert!(fit.beta.is_finite());
        assert!(fit.beta.abs() < BETA_DIVERGENCE_LIMIT);
        assert!(fit.p_value < 0.2);
    }

    #[test]
    fn logistic_rejects_degenerate_inputs() {
        assert!(logistic_logratio(&[1.0, 2.0, 3.0], &[0, 1, 1]).is_err());
        assert!(logistic_logratio(&[1.0, 2.0, 3.0, 4.0], &[1, 1, 1, 1]).is_err());
        let const_x = [2.0, 2.0, 2.0, 2.0, 2.0, 2.0];
        let fit = logistic_logratio(&const_x, &[0, 1, 0, 1, 0, 1]).unwrap();
        assert_eq!(fit.p_value, 1.0);
        assert!(!fit.converged);
    }

    #[test]
    fn reference_build_smoke() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let n = 40;
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for s in 0..n {
            let label = u8::from(s % 2 == 0);
            let shift: f64 = if label == 1 { 0.8 } else { -0.8 };
            let mut jitter = || 0.1f64 * rng.gen_range(-1.0..1.0);
            let raw = [
                (1.0 + shift + jitter()).exp(),
                (1.0 - shift + jitter()).exp(),
                (0.5 + jitter()).exp(),
                (0.2 + jitter()).exp(),
            ];
            let total: f64 = raw.iter().sum();
            rows.push(raw.iter().map(|v| v / total).collect::<Vec<f64>>());
            labels.push(label);
        }
        let result = build_reference(&rows, &labels, 1e-6, 0.05).unwrap();
        assert_eq!(result.screens.len(), 6);
        // The engineered anti-correlated, label-coupled pair must appear.
        assert!(result.edges.contains(&(0, 1)), "edges: {:?}", result.edges);
    }
}
