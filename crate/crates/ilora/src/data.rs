//! Cohort data: synthetic generation, dataset files, abundance tables, and
//! graph export.
//!
//! The synthetic generator plants one fixed interaction structure over a
//! blocked entity set and labels each sample by a noisy pairwise interaction
//! score thresholded at the cohort median, so classes are balanced and the
//! planted edges are the recoverable signal.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::distributions::standard_normal;
use crate::error::{Error, Result};
use crate::graph::{EntityProfile, RankedEdges};

/// One sample ready for the model: entity profile plus binary label.
#[derive(Clone, Debug)]
pub struct LabeledSample {
    pub profile: EntityProfile,
    pub label: u8,
}

/// Stored form of one sample; entity ids live once on the dataset.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CohortSample {
    pub values: Vec<f64>,
    pub label: u8,
    /// Pairs (i < j) of the interaction graph realized for this sample;
    /// absent for imported data without per-sample ground truth.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub planted_edges: Option<Vec<(usize, usize)>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Dataset {
    pub entity_ids: Vec<String>,
    pub train: Vec<CohortSample>,
    pub val: Vec<CohortSample>,
    pub test: Vec<CohortSample>,
    /// Cohort-level reference pairs (i < j): the high-probability pattern the
    /// per-sample graphs are thinned from, or an external reference set.
    pub reference_edges: Vec<(usize, usize)>,
    /// Echo of the generating configuration, absent for imported data.
    pub generator: Option<SyntheticSpec>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Dataset {
    pub fn k(&self) -> usize {
        self.entity_ids.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.k();
        if k < 2 {
            return Err(Error::arg("dataset needs at least two entities"));
        }
        for (name, split) in [("train", &self.train), ("val", &self.val), ("test", &self.test)] {
            for (i, s) in split.iter().enumerate() {
                if s.values.len() != k {
                    return Err(Error::shape(
                        "dataset sample",
                        format!("{k} values"),
                        format!("{} in {name}[{i}]", s.values.len()),
                    ));
                }
                if s.label > 1 {
                    return Err(Error::arg(format!("label must be 0 or 1 in {name}[{i}]")));
                }
                if s.values.iter().any(|v| !v.is_finite()) {
                    return Err(Error::arg(format!("non-finite value in {name}[{i}]")));
                }
                if let Some(edges) = &s.planted_edges {
                    for &(a, b) in edges {
                        if a >= b || b >= k {
                            return Err(Error::arg(format!(
                                "planted edge ({a}, {b}) in {name}[{i}] is not an ordered pair under {k}"
                            )));
                        }
                    }
                }
            }
        }
        for &(i, j) in &self.reference_edges {
            if i >= j || j >= k {
                return Err(Error::arg(format!("reference edge ({i}, {j}) is not an ordered pair under {k}")));
            }
        }
        Ok(())
    }

    pub fn split(&self, which: Split) -> &[CohortSample] {
        match which {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    /// Materializes one split as model-ready samples.
    pub fn labeled(&self, which: Split) -> Result<Vec<LabeledSample>> {
        self.split(which)
            .iter()
            .map(|s| {
                Ok(LabeledSample {
                    profile: EntityProfile::dense(self.entity_ids.clone(), s.values.clone())?,
                    label: s.label,
                })
            })
            .collect()
    }

    pub fn reference_set(&self) -> std::collections::BTreeSet<(usize, usize)> {
        self.reference_edges.iter().copied().collect()
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let mut file = std::fs::File::create(path)?;
        let body = serde_json::to_string_pretty(self)?;
        file.write_all(body.as_bytes())?;
        file.write_all(b"\n")?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let body = std::fs::read_to_string(path)?;
        let data: Dataset = serde_json::from_str(&body)?;
        data.validate()?;
        Ok(data)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_entities: usize,
    pub n_blocks: usize,
    /// Explicit block sizes summing to `n_entities`; empty means an even
    /// split into `n_blocks`. Uneven blocks give the label rule distinct
    /// per-block coefficients, which rewards block-aware readouts.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub block_sizes: Vec<usize>,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// Within-block feature spread around the per-sample block prototype.
    pub feature_noise: f64,
    pub within_block_prob: f64,
    pub cross_block_prob: f64,
    pub within_weight: f64,
    pub cross_weight: f64,
    pub label_noise: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_entities: 20,
            n_blocks: 4,
            block_sizes: Vec::new(),
            n_train: 600,
            n_val: 150,
            n_test: 150,
            feature_noise: 0.6,
            within_block_prob: 0.9,
            cross_block_prob: 0.1,
            within_weight: 1.0,
            cross_weight: 0.35,
            label_noise: 0.25,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_entities < 4 {
            return Err(Error::arg("need at least four entities"));
        }
        if self.n_blocks < 2 || self.n_blocks > self.n_entities {
            return Err(Error::arg("block count must be in [2, n_entities]"));
        }
        if !self.block_sizes.is_empty() {
            if self.block_sizes.len() != self.n_blocks {
                return Err(Error::arg(format!(
                    "block_sizes lists {} blocks but n_blocks is {}",
                    self.block_sizes.len(),
                    self.n_blocks
                )));
            }
            if self.block_sizes.contains(&0) {
                return Err(Error::arg("block sizes must be positive"));
            }
            let total: usize = self.block_sizes.iter().sum();
            if total != self.n_entities {
                return Err(Error::arg(format!(
                    "block sizes sum to {total} but n_entities is {}",
                    self.n_entities
                )));
            }
        }
        if self.n_train < 2 || self.n_val < 2 || self.n_test < 2 {
            return Err(Error::arg("every split needs at least two samples"));
        }
        for (name, p) in [("within_block_prob", self.within_block_prob), ("cross_block_prob", self.cross_block_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::arg(format!("{name} must be in [0, 1], got {p}")));
            }
        }
        for (name, v) in [
            ("feature_noise", self.feature_noise),
            ("within_weight", self.within_weight),
            ("cross_weight", self.cross_weight),
            ("label_noise", self.label_noise),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::arg(format!("{name} must be finite and nonnegative, got {v}")));
            }
        }
        Ok(())
    }

    fn block_of(&self, entity: usize) -> usize {
        if self.block_sizes.is_empty() {
            return entity * self.n_blocks / self.n_entities;
        }
        let mut start = 0;
        for (b, &size) in self.block_sizes.iter().enumerate() {
            if entity < start + size {
                return b;
            }
            start += size;
        }
        self.block_sizes.len() - 1
    }
}

fn entity_names(k: usize) -> Vec<String> {
    let width = (k.max(2) - 1).to_string().len();
    (0..k).map(|i| format!("ent{i:0width$}")).collect()
}

/// Draws the planted structure and the cohort. Same (spec, seed) pairs
/// produce identical datasets byte for byte.
pub fn gen_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7379_6e74_6800_0001);
    let k = spec.n_entities;

    // The cohort reference is the within-block pattern; each sample realizes
    // its own planted graph by Bernoulli thinning of that pattern plus sparse
    // cross-block edges. Weights stay nonnegative so the rectified adjacency
    // can represent them.
    let mut reference: Vec<(usize, usize)> = Vec::new();
    for i in 0..k {
        for j in (i + 1)..k {
            if spec.block_of(i) == spec.block_of(j) {
                reference.push((i, j));
            }
        }
    }
    let universe = k * (k - 1) / 2;
    if reference.is_empty() || reference.len() >= universe {
        return Err(Error::arg(format!(
            "within-block pattern of size {} in a universe of {universe} cannot be scored; adjust the partition",
            reference.len()
        )));
    }

    let n_total = spec.n_train + spec.n_val + spec.n_test;
    let mut features: Vec<Vec<f64>> = Vec::with_capacity(n_total);
    let mut planted: Vec<Vec<(usize, usize)>> = Vec::with_capacity(n_total);
    let mut scores: Vec<f64> = Vec::with_capacity(n_total);
    for _ in 0..n_total {
        let mut edges: Vec<(usize, usize, f64)> = Vec::new();
        for i in 0..k {
            for j in (i + 1)..k {
                let within = spec.block_of(i) == spec.block_of(j);
                let p = if within { spec.within_block_prob } else { spec.cross_block_prob };
                if rng.gen_bool(p) {
                    let base = if within { spec.within_weight } else { spec.cross_weight };
                    if base > 0.0 {
                        edges.push((i, j, base));
                    }
                }
            }
        }
        let prototypes: Vec<f64> = (0..spec.n_blocks).map(|_| standard_normal(&mut rng)).collect();
        let z: Vec<f64> = (0..k)
            .map(|i| prototypes[spec.block_of(i)] + spec.feature_noise * standard_normal(&mut rng))
            .collect();
        let mut score = 0.0;
        for &(i, j, w) in &edges {
            score += w * z[i] * z[j];
        }
        score += spec.label_noise * standard_normal(&mut rng);
        features.push(z);
        planted.push(edges.iter().map(|&(i, j, _)| (i, j)).collect());
        scores.push(score);
    }

    let mut sorted = scores.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("scores are finite"));
    let median = if n_total.is_multiple_of(2) {
        0.5 * (sorted[n_total / 2 - 1] + sorted[n_total / 2])
    } else {
        sorted[n_total / 2]
    };

    let samples: Vec<CohortSample> = features
        .into_iter()
        .zip(planted)
        .zip(&scores)
        .map(|((values, edges), &s)| CohortSample {
            values,
            label: u8::from(s > median),
            planted_edges: Some(edges),
        })
        .collect();

    let mut iter = samples.into_iter();
    let train: Vec<_> = iter.by_ref().take(spec.n_train).collect();
    let val: Vec<_> = iter.by_ref().take(spec.n_val).collect();
    let test: Vec<_> = iter.collect();

    let data = Dataset {
        entity_ids: entity_names(k),
        train,
        val,
        test,
        reference_edges: reference,
        generator: Some(spec.clone()),
    };
    data.validate()?;
    Ok(data)
}

/// Compositional abundance table: rows are samples over a shared entity set,
/// each row normalized to sum one.
#[derive(Clone, Debug)]
pub struct AbundanceTable {
    pub sample_ids: Vec<String>,
    pub entity_ids: Vec<String>,
    pub labels: Option<Vec<u8>>,
    pub rows: Vec<Vec<f64>>,
}

impl AbundanceTable {
    pub fn n_samples(&self) -> usize {
        self.rows.len()
    }

    pub fn k(&self) -> usize {
        self.entity_ids.len()
    }

    /// Model-ready profiles over a column subset, in the given column order.
    pub fn to_profiles(&self, columns: &[usize]) -> Result<Vec<EntityProfile>> {
        if columns.is_empty() {
            return Err(Error::arg("entity selection is empty"));
        }
        for &c in columns {
            if c >= self.k() {
                return Err(Error::arg(format!("column {c} out of range for {} entities", self.k())));
            }
        }
        let ids: Vec<String> = columns.iter().map(|&c| self.entity_ids[c].clone()).collect();
        self.rows
            .iter()
            .map(|row| {
                let values: Vec<f64> = columns.iter().map(|&c| row[c]).collect();
                EntityProfile::dense(ids.clone(), values)
            })
            .collect()
    }
}

/// Loads a CSV with a sample-id first column, an optional `label` column,
/// and one column per entity. Rows whose mass is off unity by more than
/// 1e-6 are renormalized with a warning; negative entries are errors.
pub fn load_abundance(path: &Path) -> Result<(AbundanceTable, Vec<String>)> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let headers = reader.headers()?.clone();
    if headers.len() < 2 {
        return Err(Error::Data("abundance table needs a sample-id column and at least one entity".into()));
    }
    let label_col = headers.iter().position(|h| h == "label");
    let entity_cols: Vec<usize> = (1..headers.len()).filter(|&c| Some(c) != label_col).collect();
    if entity_cols.is_empty() {
        return Err(Error::Data("abundance table has no entity columns".into()));
    }
    let entity_ids: Vec<String> = entity_cols.iter().map(|&c| headers[c].to_string()).collect();

    let mut sample_ids = Vec::new();
    let mut labels: Vec<u8> = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut warnings = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let record = record?;
        if record.len() != headers.len() {
            return Err(Error::Data(format!("row {} has {} fields, header has {}", r + 1, record.len(), headers.len())));
        }
        sample_ids.push(record[0].to_string());
        if let Some(lc) = label_col {
            let raw = &record[lc];
            let v: u8 = raw
                .parse()
                .map_err(|_| Error::Data(format!("row {} label {raw:?} is not 0/1", r + 1)))?;
            if v > 1 {
                return Err(Error::Data(format!("row {} label {v} is not 0/1", r + 1)));
            }
            labels.push(v);
        }
        let mut row = Vec::with_capacity(entity_cols.len());
        for (e, &c) in entity_cols.iter().enumerate() {
            let raw = &record[c];
            let v: f64 = raw
                .parse()
                .map_err(|_| Error::Data(format!("row {} column {:?} value {raw:?} is not numeric", r + 1, entity_ids[e])))?;
            if !v.is_finite() {
                return Err(Error::Data(format!("row {} column {:?} is not finite", r + 1, entity_ids[e])));
            }
            if v < 0.0 {
                return Err(Error::Data(format!(
                    "negative abundance {v} at row {} column {:?}",
                    r + 1,
                    entity_ids[e]
                )));
            }
            row.push(v);
        }
        let total: f64 = row.iter().sum();
        if total <= 0.0 {
            return Err(Error::Data(format!("row {} has zero total abundance", r + 1)));
        }
        if (total - 1.0).abs() > 1e-6 {
            warnings.push(format!("row {} sums to {total}; renormalized", r + 1));
        }
        for v in &mut row {
            *v /= total;
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Data("abundance table has no data rows".into()));
    }
    let table = AbundanceTable {
        sample_ids,
        entity_ids,
        labels: if label_col.is_some() { Some(labels) } else { None },
        rows,
    };
    Ok((table, warnings))
}

/// Picks the `k` highest-variance entity columns; equal variances fall back
/// to column order. Returned indices are sorted ascending so profiles keep
/// the table's column order.
pub fn select_entities(table: &AbundanceTable, k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > table.k() {
        return Err(Error::arg(format!("selection size must be in [1, {}], got {k}", table.k())));
    }
    let n = table.n_samples() as f64;
    let mut scored: Vec<(usize, f64)> = (0..table.k())
        .map(|c| {
            let mean: f64 = table.rows.iter().map(|r| r[c]).sum::<f64>() / n;
            let var: f64 = table.rows.iter().map(|r| (r[c] - mean).powi(2)).sum::<f64>() / n;
            (c, var)
        })
        .collect();
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("variance is finite").then(a.0.cmp(&b.0)));
    let mut selected: Vec<usize> = scored.into_iter().take(k).map(|(c, _)| c).collect();
    selected.sort_unstable();
    Ok(selected)
}

/// Ranked edge list as CSV: `entity_i,entity_j,weight,in_topk`, strongest
/// first. Weights print in shortest round-trip form.
pub fn export_edge_csv(ranked: &RankedEdges, ids: &[String]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["entity_i", "entity_j", "weight", "in_topk"])?;
    for e in &ranked.edges {
        let (i, j) = e.pair;
        if i >= ids.len() || j >= ids.len() {
            return Err(Error::arg(format!("edge ({i}, {j}) outside the {}-entity id list", ids.len())));
        }
        w.write_record([
            ids[i].as_str(),
            ids[j].as_str(),
            &e.weight.to_string(),
            if e.in_topk { "true" } else { "false" },
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(format!("csv flush failed: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::Data(format!("csv is not utf-8: {e}")))
}

/// Dense adjacency as CSV with an id header column and row labels.
pub fn export_adjacency_csv(adjacency: &Tensor, ids: &[String]) -> Result<String> {
    if adjacency.rows() != ids.len() || adjacency.cols() != ids.len() {
        return Err(Error::shape(
            "adjacency export",
            format!("{0}x{0}", ids.len()),
            format!("{}x{}", adjacency.rows(), adjacency.cols()),
        ));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["entity".to_string()];
    header.extend(ids.iter().cloned());
    w.write_record(&header)?;
    for i in 0..ids.len() {
        let mut row = vec![ids[i].clone()];
        for j in 0..ids.len() {
            row.push(adjacency.get(i, j).to_string());
        }
        w.write_record(&row)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(format!("csv flush failed: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::Data(format!("csv is not utf-8: {e}")))
}

fn dot_quote(id: &str) -> String {
    format!("\"{}\"", id.replace('\\', "\\\\").replace('"', "\\\""))
}

/// Selected edges in Graphviz form; weights become edge labels.
pub fn export_dot(ranked: &RankedEdges, ids: &[String]) -> Result<String> {
    let mut out = String::from("graph interactions {\n");
    for id in ids {
        out.push_str(&format!("  {};\n", dot_quote(id)));
    }
    for e in ranked.edges.iter().filter(|e| e.in_topk) {
        let (i, j) = e.pair;
        if i >= ids.len() || j >= ids.len() {
            return Err(Error::arg(format!("edge ({i}, {j}) outside the {}-entity id list", ids.len())));
        }
        out.push_str(&format!(
            "  {} -- {} [label={}];\n",
            dot_quote(&ids[i]),
            dot_quote(&ids[j]),
            e.weight
        ));
    }
    out.push_str("}\n");
    Ok(out)
}
