//! Latent interaction graph over profiled entities.
//!
//! Nodes are entities with an observed scalar value; node features are a
//! frozen hash embedding of the entity id concatenated with a sinusoidal
//! encoding of the value. Edges carry an uncertainty-aware weight built in
//! stages on the tape: shared pair features, a prior rate head, posterior
//! location/spread heads, rate matching, a Laplace scale head, and a
//! reparameterized draw that is rectified and scattered into an adjacency
//! matrix. Everything downstream of the parameter leaves is differentiable.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::autodiff::{EdgeFeatureMode, Tape, Tensor, VarId};
use crate::distributions::POSITIVE_FLOOR;
use crate::error::{Error, Result};

const EMBED_RANGE: f64 = 1.732_050_807_568_877_2; // sqrt(3), unit-variance uniform

/// One sample's view of the entity set: ids, observed scalar values, and a
/// mask selecting the entities present in this sample.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EntityProfile {
    pub entity_ids: Vec<String>,
    pub values: Vec<f64>,
    pub node_mask: Vec<bool>,
}

impl EntityProfile {
    pub fn new(entity_ids: Vec<String>, values: Vec<f64>, node_mask: Vec<bool>) -> Result<Self> {
        let profile = EntityProfile { entity_ids, values, node_mask };
        profile.validate()?;
        Ok(profile)
    }

    /// Profile with every entity present.
    pub fn dense(entity_ids: Vec<String>, values: Vec<f64>) -> Result<Self> {
        let mask = vec![true; entity_ids.len()];
        Self::new(entity_ids, values, mask)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.entity_ids.len();
        if k == 0 {
            return Err(Error::arg("profile has no entities"));
        }
        if self.values.len() != k || self.node_mask.len() != k {
            return Err(Error::shape(
                "entity profile",
                format!("ids/values/mask of equal length {k}"),
                format!("{}/{}/{}", k, self.values.len(), self.node_mask.len()),
            ));
        }
        let mut seen = BTreeSet::new();
        for id in &self.entity_ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::arg(format!("duplicate entity id {id:?}")));
            }
        }
        for (i, v) in self.values.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::arg(format!("non-finite value {v} for entity {i}")));
            }
        }
        if !self.node_mask.iter().any(|&m| m) {
            return Err(Error::arg("profile masks out every entity"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entity_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entity_ids.is_empty()
    }

    pub fn n_active(&self) -> usize {
        self.node_mask.iter().filter(|&&m| m).count()
    }
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn unit_uniform(bits: u64) -> f64 {
    (bits >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Frozen unit-variance embedding of an entity id. The same (id, seed)
/// always maps to the same vector, so unseen entities need no lookup table.
pub fn hash_embedding(id: &str, dim: usize, seed: u64) -> Vec<f64> {
    let mut state = fnv1a64(id.as_bytes()) ^ seed;
    (0..dim)
        .map(|_| (2.0 * unit_uniform(splitmix64(&mut state)) - 1.0) * EMBED_RANGE)
        .collect()
}

/// Four-dimensional sinusoidal encoding of a scalar value.
pub fn scalar_encoding(value: f64) -> [f64; 4] {
    // Frequency ladder: the slow pair stays monotone over the typical value
    // range so magnitudes survive the encoding; the fast pair adds detail.
    [(0.5 * value).sin(), (0.5 * value).cos(), (2.0 * value).sin(), (2.0 * value).cos()]
}

/// Width of a frozen node-feature row for a given embedding size.
pub fn node_feature_width(d_embed: usize) -> usize {
    d_embed + 4
}

/// Frozen node features for every entity in the profile, masked or not:
/// hash embedding of the id followed by the sinusoidal value encoding.
pub fn frozen_node_features(profile: &EntityProfile, d_embed: usize, seed: u64) -> Result<Tensor> {
    profile.validate()?;
    let k = profile.len();
    let width = node_feature_width(d_embed);
    let mut data = Vec::with_capacity(k * width);
    for i in 0..k {
        data.extend(hash_embedding(&profile.entity_ids[i], d_embed, seed));
        data.extend(scalar_encoding(profile.values[i]));
    }
    Tensor::new(k, width, data)
}

/// Projects frozen node features into the graph width and zeroes masked
/// rows, so absent entities contribute nothing downstream.
pub fn encode_nodes(
    tape: &mut Tape,
    features: &Tensor,
    proj_w: VarId,
    proj_b: VarId,
    mask: &[bool],
) -> Result<VarId> {
    if features.rows() != mask.len() {
        return Err(Error::shape("encode_nodes", format!("{} mask entries", features.rows()), format!("{}", mask.len())));
    }
    let x = tape.constant(features.clone());
    let projected = tape.matmul(x, proj_w)?;
    let shifted = tape.add_row_vec(projected, proj_b)?;
    let mask_col = Tensor::new(mask.len(), 1, mask.iter().map(|&m| f64::from(m)).collect())?;
    let mask_var = tape.constant(mask_col);
    tape.scale_rows(shifted, mask_var)
}

/// Candidate pairs among active nodes: unordered (i < j) when symmetric,
/// all ordered pairs with i != j otherwise. Lexicographic order throughout.
pub fn pair_list(mask: &[bool], symmetric: bool) -> Vec<(usize, usize)> {
    let k = mask.len();
    let mut pairs = Vec::new();
    for i in 0..k {
        if !mask[i] {
            continue;
        }
        for j in 0..k {
            if i == j || !mask[j] {
                continue;
            }
            if symmetric && j < i {
                continue;
            }
            pairs.push((i, j));
        }
    }
    pairs
}

/// All unordered pairs over `k` nodes, the candidate universe for ranking.
pub fn total_pairs(k: usize) -> usize {
    k * (k - 1) / 2
}

/// Shared per-pair feature rows for the edge heads.
pub fn edge_features(
    tape: &mut Tape,
    h: VarId,
    pairs: &[(usize, usize)],
    mode: EdgeFeatureMode,
) -> Result<VarId> {
    tape.pair_features(h, pairs, mode)
}

/// Strictly positive rate from a linear head: softplus(e w + b) + floor.
pub fn rate_head(tape: &mut Tape, e: VarId, w: VarId, b: VarId) -> Result<VarId> {
    let lin = tape.matmul(e, w)?;
    let lin = tape.add_row_vec(lin, b)?;
    let sp = tape.softplus(lin)?;
    tape.affine(sp, 1.0, POSITIVE_FLOOR)
}

/// Posterior location (unconstrained) and spread (positive) per pair.
pub fn posterior_heads(
    tape: &mut Tape,
    e: VarId,
    loc_w: VarId,
    loc_b: VarId,
    spread_w: VarId,
    spread_b: VarId,
) -> Result<(VarId, VarId)> {
    let loc = tape.matmul(e, loc_w)?;
    let loc = tape.add_row_vec(loc, loc_b)?;
    let spread = rate_head(tape, e, spread_w, spread_b)?;
    Ok((loc, spread))
}

/// Poisson rates matched to the posterior by moment agreement; positive and
/// differentiable in both inputs.
pub fn matched_rates(tape: &mut Tape, loc: VarId, spread: VarId) -> Result<VarId> {
    tape.match_poisson_rate(loc, spread)
}

/// Per-pair Laplace scale conditioned on the pair features and the matched
/// rate.
pub fn scale_head(
    tape: &mut Tape,
    e: VarId,
    matched: VarId,
    w: VarId,
    b: VarId,
) -> Result<VarId> {
    let joint = tape.concat_cols(e, matched)?;
    rate_head(tape, joint, w, b)
}

/// One adjacency draw: reparameterized Laplace weights, rectified, scattered
/// into a dense matrix. Symmetric scattering mirrors each unordered pair.
pub fn sample_adjacency(
    tape: &mut Tape,
    loc: VarId,
    spread: VarId,
    scales: VarId,
    eps: &[f64],
    pairs: &[(usize, usize)],
    n_nodes: usize,
    symmetric: bool,
) -> Result<VarId> {
    let raw = tape.laplace_reparam(loc, spread, scales, eps)?;
    let weights = tape.relu(raw)?;
    tape.scatter_pairs(weights, pairs, n_nodes, symmetric)
}

/// Deterministic per-pair posterior summary, read back off the tape.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EdgePosteriors {
    pub pairs: Vec<(usize, usize)>,
    pub location: Vec<f64>,
    pub spread: Vec<f64>,
    pub prior_rate: Vec<f64>,
    pub matched_rate: Vec<f64>,
    pub scale: Vec<f64>,
}

impl EdgePosteriors {
    pub fn from_tape(
        tape: &Tape,
        pairs: &[(usize, usize)],
        loc: VarId,
        spread: VarId,
        prior: VarId,
        matched: VarId,
        scale: VarId,
    ) -> Result<Self> {
        let column = |id: VarId, name: &'static str| -> Result<Vec<f64>> {
            let t = tape.value(id);
            if t.rows() != pairs.len() || t.cols() != 1 {
                return Err(Error::shape(name, format!("{}x1", pairs.len()), format!("{}x{}", t.rows(), t.cols())));
            }
            Ok(t.data().to_vec())
        };
        Ok(EdgePosteriors {
            pairs: pairs.to_vec(),
            location: column(loc, "posterior location")?,
            spread: column(spread, "posterior spread")?,
            prior_rate: column(prior, "prior rate")?,
            matched_rate: column(matched, "matched rate")?,
            scale: column(scale, "edge scale")?,
        })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Inferred graph for one sample: the Monte Carlo mean adjacency over
/// `draws` samples plus the deterministic posterior summary.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LatentGraph {
    pub n_nodes: usize,
    pub adjacency: Tensor,
    pub posteriors: EdgePosteriors,
    pub draws: usize,
}

impl LatentGraph {
    pub fn ranked(&self, k_sel: usize) -> Result<RankedEdges> {
        symmetrize_topk(&self.adjacency, k_sel)
    }
}

/// One candidate edge in the symmetrized ranking.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RankedEdge {
    pub pair: (usize, usize),
    pub weight: f64,
    pub in_topk: bool,
}

/// All unordered pairs sorted by symmetrized weight, strongest first.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RankedEdges {
    pub edges: Vec<RankedEdge>,
    pub k_sel: usize,
}

impl RankedEdges {
    pub fn topk_pairs(&self) -> BTreeSet<(usize, usize)> {
        self.edges.iter().filter(|e| e.in_topk).map(|e| e.pair).collect()
    }
}

/// Ranks unordered pairs by (A + A^T) / 2 and marks the top k_sel. Equal
/// weights break ties in lexicographic pair order, so the selection is a
/// pure function of the adjacency.
pub fn symmetrize_topk(adjacency: &Tensor, k_sel: usize) -> Result<RankedEdges> {
    let n = adjacency.rows();
    if adjacency.cols() != n {
        return Err(Error::shape("symmetrize_topk", format!("{n}x{n}"), format!("{n}x{}", adjacency.cols())));
    }
    if n < 2 {
        return Err(Error::arg("ranking needs at least two nodes"));
    }
    adjacency.check_finite("symmetrize_topk adjacency")?;
    let universe = total_pairs(n);
    if k_sel == 0 || k_sel > universe {
        return Err(Error::arg(format!("k_sel must be in [1, {universe}], got {k_sel}")));
    }
    let mut edges = Vec::with_capacity(universe);
    for i in 0..n {
        for j in (i + 1)..n {
            let w = 0.5 * (adjacency.get(i, j) + adjacency.get(j, i));
            edges.push(RankedEdge { pair: (i, j), weight: w, in_topk: false });
        }
    }
    edges.sort_by(|a, b| {
        b.weight
            .partial_cmp(&a.weight)
            .expect("adjacency checked finite")
            .then(a.pair.cmp(&b.pair))
    });
    for e in edges.iter_mut().take(k_sel) {
        e.in_topk = true;
    }
    Ok(RankedEdges { edges, k_sel })
}

/// Elementwise mean of equally shaped adjacency draws.
pub fn mean_adjacency(draws: &[Tensor]) -> Result<Tensor> {
    let first = draws.first().ok_or_else(|| Error::arg("mean over zero adjacency draws"))?;
    let mut mean = Tensor::zeros(first.rows(), first.cols());
    for d in draws {
        if d.rows() != first.rows() || d.cols() != first.cols() {
            return Err(Error::shape(
                "mean_adjacency",
                format!("{}x{}", first.rows(), first.cols()),
                format!("{}x{}", d.rows(), d.cols()),
            ));
        }
        mean.add_scaled(d, 1.0 / draws.len() as f64)?;
    }
    Ok(mean)
}
