//! Calibration, ranking, and graph-recovery metrics.
//!
//! Predictions are binary with `prob` the predicted probability of the
//! positive class. Graph recovery is scored on unordered node pairs.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Copy, Clone, Debug, Serialize, Deserialize)]
pub struct PredictionRecord {
    /// Predicted probability of the positive class.
    pub prob: f64,
    /// True label, 0 or 1.
    pub label: u8,
}

impl PredictionRecord {
    pub fn new(prob: f64, label: u8) -> Result<Self> {
        if !(0.0..=1.0).contains(&prob) || !prob.is_finite() {
            return Err(Error::arg(format!("probability must be in [0, 1], got {prob}")));
        }
        if label > 1 {
            return Err(Error::arg(format!("label must be 0 or 1, got {label}")));
        }
        Ok(PredictionRecord { prob, label })
    }

    fn confidence(&self) -> f64 {
        self.prob.max(1.0 - self.prob)
    }

    fn predicted(&self) -> u8 {
        u8::from(self.prob >= 0.5)
    }

    fn correct(&self) -> bool {
        self.predicted() == self.label
    }
}

/// Expected calibration error: equal-width bins over confidence, weighting
/// each bin's |accuracy - mean confidence| by its share of the records.
/// Predictions are thresholded at 0.5 and confidence is max(p, 1-p).
pub fn ece(records: &[PredictionRecord], bins: usize) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::arg("ece over an empty prediction set"));
    }
    if bins == 0 {
        return Err(Error::arg("ece needs at least one bin"));
    }
    let mut count = vec![0usize; bins];
    let mut acc_sum = vec![0.0; bins];
    let mut conf_sum = vec![0.0; bins];
    for r in records {
        let c = r.confidence();
        let idx = ((c * bins as f64) as usize).min(bins - 1);
        count[idx] += 1;
        acc_sum[idx] += f64::from(r.correct());
        conf_sum[idx] += c;
    }
    let n = records.len() as f64;
    let mut e = 0.0;
    for b in 0..bins {
        if count[b] == 0 {
            continue;
        }
        let cb = count[b] as f64;
        e += (acc_sum[b] / cb - conf_sum[b] / cb).abs() * (cb / n);
    }
    Ok(e)
}

/// Area under the ROC curve by the rank statistic, with tied scores sharing
/// mid-ranks (each tied positive/negative pair counts one half).
/// Both classes must be present.
pub fn auroc(records: &[PredictionRecord]) -> Result<f64> {
    let n1 = records.iter().filter(|r| r.label == 1).count();
    let n0 = records.len() - n1;
    if n1 == 0 || n0 == 0 {
        return Err(Error::arg("auroc needs both classes present"));
    }
    let n = records.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| {
        records[a]
            .prob
            .partial_cmp(&records[b].prob)
            .expect("probabilities are finite")
            .then(a.cmp(&b))
    });
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && records[idx[j + 1]].prob == records[idx[i]].prob {
            j += 1;
        }
        // 1-based mid-rank shared by the tie group [i, j].
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for t in i..=j {
            ranks[idx[t]] = rank;
        }
        i = j + 1;
    }
    let rank_sum_pos: f64 = records
        .iter()
        .zip(&ranks)
        .filter(|(r, _)| r.label == 1)
        .map(|(_, rk)| rk)
        .sum();
    let u = rank_sum_pos - (n1 * (n1 + 1)) as f64 / 2.0;
    Ok(u / (n1 as f64 * n0 as f64))
}

/// Average precision: precision summed at each positive in score-descending
/// order (ties broken by record index), divided by the number of positives.
pub fn auprc(records: &[PredictionRecord]) -> Result<f64> {
    let n_pos = records.iter().filter(|r| r.label == 1).count();
    if n_pos == 0 || n_pos == records.len() {
        return Err(Error::arg("auprc needs both classes present"));
    }
    let mut idx: Vec<usize> = (0..records.len()).collect();
    idx.sort_by(|&a, &b| {
        records[b]
            .prob
            .partial_cmp(&records[a].prob)
            .expect("probabilities are finite")
            .then(a.cmp(&b))
    });
    let mut tp = 0usize;
    let mut ap = 0.0;
    for (pos, &i) in idx.iter().enumerate() {
        if records[i].label == 1 {
            tp += 1;
            ap += tp as f64 / (pos + 1) as f64;
        }
    }
    Ok(ap / n_pos as f64)
}

/// F1 for the positive class at a 0.5 threshold; 0 when precision and
/// recall are both undefined or zero.
pub fn f1_positive(records: &[PredictionRecord]) -> f64 {
    let mut tp = 0.0;
    let mut fp = 0.0;
    let mut fne = 0.0;
    for r in records {
        match (r.predicted(), r.label) {
            (1, 1) => tp += 1.0,
            (1, 0) => fp += 1.0,
            (0, 1) => fne += 1.0,
            _ => {}
        }
    }
    if tp == 0.0 {
        return 0.0;
    }
    let precision = tp / (tp + fp);
    let recall = tp / (tp + fne);
    2.0 * precision * recall / (precision + recall)
}

/// Balanced graph-recovery error for a predicted top-K edge set against a
/// reference set over a fixed candidate universe:
/// mean of the miss rate |GT \ P| / |GT| and the false-alarm rate
/// |P \ GT| / (total - |GT|). A uniformly random predictor scores 0.5 in
/// expectation for any K.
pub fn err_at_k(
    gt_edges: &BTreeSet<(usize, usize)>,
    predicted: &BTreeSet<(usize, usize)>,
    total_pairs: usize,
) -> Result<f64> {
    if gt_edges.is_empty() {
        return Err(Error::arg("err_at_k with an empty reference edge set"));
    }
    if gt_edges.len() >= total_pairs {
        return Err(Error::arg(format!(
            "reference set ({}) must be smaller than the candidate universe ({total_pairs})",
            gt_edges.len()
        )));
    }
    if predicted.len() > total_pairs {
        return Err(Error::arg("predicted set larger than the candidate universe"));
    }
    let overlap = gt_edges.intersection(predicted).count();
    let miss = (gt_edges.len() - overlap) as f64 / gt_edges.len() as f64;
    let false_alarm = (predicted.len() - overlap) as f64 / (total_pairs - gt_edges.len()) as f64;
    Ok(0.5 * (miss + false_alarm))
}

/// Monte Carlo mean of err_at_k for uniformly random top-K subsets of the
/// candidate universe. The exact expectation is 0.5 for every (total, gt, k).
pub fn random_baseline_err(total_pairs: usize, gt_size: usize, k: usize, trials: usize, seed: u64) -> Result<f64> {
    if gt_size == 0 || gt_size >= total_pairs {
        return Err(Error::arg("reference size must be in [1, total_pairs)"));
    }
    if k == 0 || k > total_pairs {
        return Err(Error::arg("k must be in [1, total_pairs]"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices: Vec<usize> = (0..total_pairs).collect();
    let mut sum = 0.0;
    for _ in 0..trials {
        // Uniform k-subset via partial shuffle; the reference set is taken
        // as the first gt_size indices, which is distribution-equivalent.
        let (sel, _) = indices.partial_shuffle(&mut rng, k);
        let overlap = sel.iter().filter(|&&i| i < gt_size).count();
        let miss = (gt_size - overlap) as f64 / gt_size as f64;
        let fa = (k - overlap) as f64 / (total_pairs - gt_size) as f64;
        sum += 0.5 * (miss + fa);
    }
    Ok(sum / trials as f64)
}

/// One evaluation run's metric bundle; `err_at_k` is present only when a
/// reference edge set was available.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsReport {
    pub ece: f64,
    pub f1_pos: f64,
    pub auroc: f64,
    pub auprc: f64,
    pub err_at_k: Option<f64>,
    pub n: usize,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "S")]
    pub s: usize,
    pub seed: u64,
}

impl MetricsReport {
    pub fn from_records(
        records: &[PredictionRecord],
        err: Option<f64>,
        k: usize,
        s: usize,
        seed: u64,
        bins: usize,
    ) -> Result<Self> {
        Ok(MetricsReport {
            ece: ece(records, bins)?,
            f1_pos: f1_positive(records),
            auroc: auroc(records)?,
            auprc: auprc(records)?,
            err_at_k: err,
            n: records.len(),
            k,
            s,
            seed,
        })
    }

    /// Fixed-width text table for terminal output.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let row = |name: &str, value: String| format!("{name:<10} {value:>12}\n");
        out.push_str(&row("metric", "value".to_string()));
        out.push_str(&row("ece", format!("{:.6}", self.ece)));
        out.push_str(&row("f1_pos", format!("{:.6}", self.f1_pos)));
        out.push_str(&row("auroc", format!("{:.6}", self.auroc)));
        out.push_str(&row("auprc", format!("{:.6}", self.auprc)));
        match self.err_at_k {
            Some(e) => out.push_str(&row("err_at_k", format!("{e:.6}"))),
            None => out.push_str(&row("err_at_k", "n/a".to_string())),
        }
        out.push_str(&row("n", format!("{}", self.n)));
        out.push_str(&row("K", format!("{}", self.k)));
        out.push_str(&row("S", format!("{}", self.s)));
        out.push_str(&row("seed", format!("{}", self.seed)));
        out
    }
}
