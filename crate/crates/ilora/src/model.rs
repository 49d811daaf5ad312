//! Graph-conditioned low-rank adaptation of a frozen backbone.
//!
//! The backbone is a fixed random-feature classifier: a tanh feature layer,
//! an inner linear map W0, and a linear head. Only W0 is adapted, by a
//! low-rank update s * B A with s = alpha / rank. B is a trained matrix
//! initialized to zero, so adaptation starts exactly at the frozen model. A
//! is produced per sample by a hypernetwork reading a pooled embedding of
//! that sample's inferred interaction graph; the `Static` adapter mode
//! replaces the generated A with a single trained matrix and skips the graph
//! branch entirely, keeping every other piece identical.
//!
//! All row vectors: a sample is 1 x K, node embeddings are K x d_g, and the
//! adapted map is applied as phi (W0 + s A^T B^T).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{EdgeFeatureMode, Tape, Tensor, VarId};
use crate::distributions::standard_normal;
use crate::error::{Error, Result};
use crate::graph::{
    edge_features, encode_nodes, frozen_node_features, matched_rates, mean_adjacency,
    node_feature_width, pair_list, posterior_heads, rate_head, sample_adjacency, scale_head,
    EdgePosteriors, EntityProfile, LatentGraph,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GcnActivation {
    Tanh,
    Relu,
    Identity,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterMode {
    /// Per-sample A from the graph hypernetwork.
    Generated,
    /// One trained A shared by all samples; no graph branch.
    Static,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub feat_hidden: usize,
    pub d_in: usize,
    pub d_out: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig { feat_hidden: 64, d_in: 32, d_out: 32 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Width of the frozen per-entity hash embedding.
    pub d_embed: usize,
    /// Node embedding width used by the graph branch.
    pub d_g: usize,
    /// Pair feature width after the edge MLP.
    pub d_e: usize,
    pub edge_features: EdgeFeatureMode,
    /// Unordered pairs with mirrored noise; false gives ordered pairs.
    pub symmetric: bool,
    pub gcn_activation: GcnActivation,
    /// Add the attention readout to the propagated embedding instead of
    /// replacing it.
    pub attention_residual: bool,
    pub hyper_hidden: usize,
    pub rank: usize,
    pub alpha: f64,
    pub adapter: AdapterMode,
    /// Scale of the zero-centered Laplace reference the edge scales are
    /// regularized toward.
    pub prior_scale: f64,
    /// Initial bias of the edge location head. Positive values start the
    /// graph connected; rectified sampling makes silenced edges absorbing,
    /// so edges must begin alive for the task signal to sort them.
    pub location_bias: f64,
    /// Initial bias of the edge spread head (softplus pre-activation).
    /// Negative values start the edge noise small.
    pub spread_bias: f64,
    pub backbone: BackboneConfig,
    /// Seed for every frozen component: hash embeddings and backbone.
    pub frozen_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_embed: 32,
            d_g: 128,
            d_e: 128,
            edge_features: EdgeFeatureMode::FourBlock,
            symmetric: true,
            gcn_activation: GcnActivation::Tanh,
            attention_residual: true,
            hyper_hidden: 64,
            rank: 4,
            alpha: 8.0,
            adapter: AdapterMode::Generated,
            prior_scale: 1.0,
            location_bias: 1.0,
            spread_bias: -1.0,
            backbone: BackboneConfig::default(),
            frozen_seed: 7,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("d_embed", self.d_embed),
            ("d_g", self.d_g),
            ("d_e", self.d_e),
            ("hyper_hidden", self.hyper_hidden),
            ("rank", self.rank),
            ("backbone.feat_hidden", self.backbone.feat_hidden),
            ("backbone.d_in", self.backbone.d_in),
            ("backbone.d_out", self.backbone.d_out),
        ] {
            if v == 0 {
                return Err(Error::arg(format!("{name} must be positive")));
            }
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::arg(format!("alpha must be positive, got {}", self.alpha)));
        }
        if !(self.prior_scale > 0.0 && self.prior_scale.is_finite()) {
            return Err(Error::arg(format!("prior_scale must be positive, got {}", self.prior_scale)));
        }
        for (name, v) in [("location_bias", self.location_bias), ("spread_bias", self.spread_bias)] {
            if !v.is_finite() {
                return Err(Error::arg(format!("{name} must be finite, got {v}")));
            }
        }
        Ok(())
    }

    pub fn lora_scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| standard_normal(rng) * std).collect();
    Tensor::new(rows, cols, data).expect("dimensions match data length")
}

fn xavier_uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-limit..limit)).collect();
    Tensor::new(rows, cols, data).expect("dimensions match data length")
}

/// Frozen random-feature backbone; never trained, regenerated from
/// (input_dim, config, seed) on load.
#[derive(Clone, Debug)]
pub struct FrozenBackbone {
    pub feat_w: Tensor,
    pub feat_b: Tensor,
    pub feat_v: Tensor,
    pub feat_c: Tensor,
    pub w0: Tensor,
    pub b0: Tensor,
    pub head_w: Tensor,
    pub head_b: Tensor,
}

impl FrozenBackbone {
    fn init(input_dim: usize, cfg: &BackboneConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6261_636b_626f_6e65);
        let h = cfg.feat_hidden;
        FrozenBackbone {
            feat_w: gaussian_matrix(&mut rng, input_dim, h, 1.0 / (input_dim as f64).sqrt()),
            feat_b: gaussian_matrix(&mut rng, 1, h, 0.1),
            feat_v: gaussian_matrix(&mut rng, h, cfg.d_in, 1.0 / (h as f64).sqrt()),
            feat_c: Tensor::zeros(1, cfg.d_in),
            w0: gaussian_matrix(&mut rng, cfg.d_in, cfg.d_out, 1.0 / (cfg.d_in as f64).sqrt()),
            b0: Tensor::zeros(1, cfg.d_out),
            head_w: gaussian_matrix(&mut rng, cfg.d_out, 2, 1.0 / (cfg.d_out as f64).sqrt()),
            head_b: Tensor::zeros(1, 2),
        }
    }
}

/// Every trained tensor. Field order is the canonical parameter order used
/// by the optimizer and checkpoints.
#[derive(Clone, Debug)]
pub struct ModelParams {
    pub proj_w: Tensor,
    pub proj_b: Tensor,
    pub edge_w1: Tensor,
    pub edge_b1: Tensor,
    pub edge_w2: Tensor,
    pub edge_b2: Tensor,
    pub prior_w: Tensor,
    pub prior_b: Tensor,
    pub loc_w: Tensor,
    pub loc_b: Tensor,
    pub spread_w: Tensor,
    pub spread_b: Tensor,
    pub scale_w: Tensor,
    pub scale_b: Tensor,
    pub gcn_w1: Tensor,
    pub gcn_w2: Tensor,
    pub attn_q: Tensor,
    pub attn_k: Tensor,
    pub hyper_w1: Tensor,
    pub hyper_b1: Tensor,
    pub hyper_w2: Tensor,
    pub hyper_b2: Tensor,
    pub lora_b: Tensor,
    pub static_a: Tensor,
}

impl ModelParams {
    /// Xavier-uniform weights, zero biases, zero B so the adapted model
    /// starts exactly at the frozen backbone.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7061_7261_6d73_0001);
        let node_w = node_feature_width(cfg.d_embed);
        let pair_w = cfg.edge_features.width(cfg.d_g);
        let d_in = cfg.backbone.d_in;
        ModelParams {
            proj_w: xavier_uniform(&mut rng, node_w, cfg.d_g),
            proj_b: Tensor::zeros(1, cfg.d_g),
            edge_w1: xavier_uniform(&mut rng, pair_w, cfg.d_e),
            edge_b1: Tensor::zeros(1, cfg.d_e),
            edge_w2: xavier_uniform(&mut rng, cfg.d_e, cfg.d_e),
            edge_b2: Tensor::zeros(1, cfg.d_e),
            prior_w: xavier_uniform(&mut rng, cfg.d_e, 1),
            prior_b: Tensor::zeros(1, 1),
            loc_w: xavier_uniform(&mut rng, cfg.d_e, 1),
            loc_b: Tensor::full(1, 1, cfg.location_bias),
            spread_w: xavier_uniform(&mut rng, cfg.d_e, 1),
            spread_b: Tensor::full(1, 1, cfg.spread_bias),
            scale_w: xavier_uniform(&mut rng, cfg.d_e + 1, 1),
            scale_b: Tensor::zeros(1, 1),
            gcn_w1: xavier_uniform(&mut rng, cfg.d_g, cfg.d_g),
            gcn_w2: xavier_uniform(&mut rng, cfg.d_g, cfg.d_g),
            attn_q: xavier_uniform(&mut rng, cfg.d_g, cfg.d_g),
            attn_k: xavier_uniform(&mut rng, cfg.d_g, cfg.d_g),
            hyper_w1: xavier_uniform(&mut rng, cfg.d_g, cfg.hyper_hidden),
            hyper_b1: Tensor::zeros(1, cfg.hyper_hidden),
            hyper_w2: xavier_uniform(&mut rng, cfg.hyper_hidden, cfg.rank * d_in),
            hyper_b2: Tensor::zeros(1, cfg.rank * d_in),
            lora_b: Tensor::zeros(cfg.backbone.d_out, cfg.rank),
            static_a: xavier_uniform(&mut rng, cfg.rank, d_in),
        }
    }

    pub fn visit(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("proj_w", &self.proj_w),
            ("proj_b", &self.proj_b),
            ("edge_w1", &self.edge_w1),
            ("edge_b1", &self.edge_b1),
            ("edge_w2", &self.edge_w2),
            ("edge_b2", &self.edge_b2),
            ("prior_w", &self.prior_w),
            ("prior_b", &self.prior_b),
            ("loc_w", &self.loc_w),
            ("loc_b", &self.loc_b),
            ("spread_w", &self.spread_w),
            ("spread_b", &self.spread_b),
            ("scale_w", &self.scale_w),
            ("scale_b", &self.scale_b),
            ("gcn_w1", &self.gcn_w1),
            ("gcn_w2", &self.gcn_w2),
            ("attn_q", &self.attn_q),
            ("attn_k", &self.attn_k),
            ("hyper_w1", &self.hyper_w1),
            ("hyper_b1", &self.hyper_b1),
            ("hyper_w2", &self.hyper_w2),
            ("hyper_b2", &self.hyper_b2),
            ("lora_b", &self.lora_b),
            ("static_a", &self.static_a),
        ]
    }

    pub fn visit_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![
            ("proj_w", &mut self.proj_w),
            ("proj_b", &mut self.proj_b),
            ("edge_w1", &mut self.edge_w1),
            ("edge_b1", &mut self.edge_b1),
            ("edge_w2", &mut self.edge_w2),
            ("edge_b2", &mut self.edge_b2),
            ("prior_w", &mut self.prior_w),
            ("prior_b", &mut self.prior_b),
            ("loc_w", &mut self.loc_w),
            ("loc_b", &mut self.loc_b),
            ("spread_w", &mut self.spread_w),
            ("spread_b", &mut self.spread_b),
            ("scale_w", &mut self.scale_w),
            ("scale_b", &mut self.scale_b),
            ("gcn_w1", &mut self.gcn_w1),
            ("gcn_w2", &mut self.gcn_w2),
            ("attn_q", &mut self.attn_q),
            ("attn_k", &mut self.attn_k),
            ("hyper_w1", &mut self.hyper_w1),
            ("hyper_b1", &mut self.hyper_b1),
            ("hyper_w2", &mut self.hyper_w2),
            ("hyper_b2", &mut self.hyper_b2),
            ("lora_b", &mut self.lora_b),
            ("static_a", &mut self.static_a),
        ]
    }
}

/// Tape handles for one bound copy of the parameters and the frozen
/// backbone. Trainable binding makes the parameters gradient leaves;
/// constant binding shares the same forward graph with no gradients.
pub struct BoundParams {
    pub proj_w: VarId,
    pub proj_b: VarId,
    pub edge_w1: VarId,
    pub edge_b1: VarId,
    pub edge_w2: VarId,
    pub edge_b2: VarId,
    pub prior_w: VarId,
    pub prior_b: VarId,
    pub loc_w: VarId,
    pub loc_b: VarId,
    pub spread_w: VarId,
    pub spread_b: VarId,
    pub scale_w: VarId,
    pub scale_b: VarId,
    pub gcn_w1: VarId,
    pub gcn_w2: VarId,
    pub attn_q: VarId,
    pub attn_k: VarId,
    pub hyper_w1: VarId,
    pub hyper_b1: VarId,
    pub hyper_w2: VarId,
    pub hyper_b2: VarId,
    pub lora_b: VarId,
    pub static_a: VarId,
    feat_w: VarId,
    feat_b: VarId,
    feat_v: VarId,
    feat_c: VarId,
    w0: VarId,
    b0: VarId,
    head_w: VarId,
    head_b: VarId,
}

impl BoundParams {
    /// Trainable leaves in canonical parameter order.
    pub fn leaves(&self) -> Vec<(&'static str, VarId)> {
        vec![
            ("proj_w", self.proj_w),
            ("proj_b", self.proj_b),
            ("edge_w1", self.edge_w1),
            ("edge_b1", self.edge_b1),
            ("edge_w2", self.edge_w2),
            ("edge_b2", self.edge_b2),
            ("prior_w", self.prior_w),
            ("prior_b", self.prior_b),
            ("loc_w", self.loc_w),
            ("loc_b", self.loc_b),
            ("spread_w", self.spread_w),
            ("spread_b", self.spread_b),
            ("scale_w", self.scale_w),
            ("scale_b", self.scale_b),
            ("gcn_w1", self.gcn_w1),
            ("gcn_w2", self.gcn_w2),
            ("attn_q", self.attn_q),
            ("attn_k", self.attn_k),
            ("hyper_w1", self.hyper_w1),
            ("hyper_b1", self.hyper_b1),
            ("hyper_w2", self.hyper_w2),
            ("hyper_b2", self.hyper_b2),
            ("lora_b", self.lora_b),
            ("static_a", self.static_a),
        ]
    }
}

/// Deterministic per-pair posterior variables shared by every draw of one
/// sample.
#[derive(Clone, Copy, Debug)]
pub struct PosteriorVars {
    pub location: VarId,
    pub spread: VarId,
    pub prior_rate: VarId,
    pub matched_rate: VarId,
    pub scale: VarId,
}

/// Forward pass of one sample across draws: log-probabilities per draw,
/// plus the posterior variables and adjacency draws when the graph branch
/// ran.
pub struct SampleForward {
    pub log_probs: Vec<VarId>,
    pub posterior: Option<PosteriorVars>,
    pub adjacency: Vec<VarId>,
    pub pairs: Vec<(usize, usize)>,
}

/// Monte Carlo prediction summary for one sample.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct McPrediction {
    pub prob_positive: f64,
    /// Sample standard deviation of the positive-class probability across
    /// draws; zero for a single draw.
    pub spread: f64,
    pub draws: usize,
}

fn linear(tape: &mut Tape, x: VarId, w: VarId, b: VarId) -> Result<VarId> {
    let xw = tape.matmul(x, w)?;
    tape.add_row_vec(xw, b)
}

/// Symmetric normalization of the self-looped adjacency:
/// D^{-1/2} (A + I) D^{-1/2} with D the self-looped degree.
pub(crate) fn gcn_normalize(tape: &mut Tape, adj: VarId, n: usize) -> Result<VarId> {
    let eye = tape.constant(Tensor::identity(n));
    let hat = tape.add(adj, eye)?;
    let ones = tape.constant(Tensor::full(n, 1, 1.0));
    let deg = tape.matmul(hat, ones)?;
    let root = tape.sqrt(deg)?;
    let dinv = tape.recip(root)?;
    let scaled = tape.scale_rows(hat, dinv)?;
    let dinv_row = tape.transpose(dinv)?;
    tape.scale_cols(scaled, dinv_row)
}

pub struct Model {
    pub cfg: ModelConfig,
    pub input_dim: usize,
    pub backbone: FrozenBackbone,
    pub params: ModelParams,
}

impl Model {
    /// Fresh model over `input_dim` entities; `param_seed` controls only the
    /// trainable initialization, frozen parts come from the config seed.
    pub fn new(cfg: ModelConfig, input_dim: usize, param_seed: u64) -> Result<Self> {
        cfg.validate()?;
        if input_dim == 0 {
            return Err(Error::arg("model needs at least one input entity"));
        }
        let backbone = FrozenBackbone::init(input_dim, &cfg.backbone, cfg.frozen_seed);
        let params = ModelParams::init(&cfg, param_seed);
        Ok(Model { cfg, input_dim, backbone, params })
    }

    /// Model around existing parameters, used by checkpoint restore.
    pub fn from_params(cfg: ModelConfig, input_dim: usize, params: ModelParams) -> Result<Self> {
        cfg.validate()?;
        if input_dim == 0 {
            return Err(Error::arg("model needs at least one input entity"));
        }
        let backbone = FrozenBackbone::init(input_dim, &cfg.backbone, cfg.frozen_seed);
        Ok(Model { cfg, input_dim, backbone, params })
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundParams {
        let mut put = |t: &Tensor| {
            if trainable {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        let p = &self.params;
        let proj_w = put(&p.proj_w);
        let proj_b = put(&p.proj_b);
        let edge_w1 = put(&p.edge_w1);
        let edge_b1 = put(&p.edge_b1);
        let edge_w2 = put(&p.edge_w2);
        let edge_b2 = put(&p.edge_b2);
        let prior_w = put(&p.prior_w);
        let prior_b = put(&p.prior_b);
        let loc_w = put(&p.loc_w);
        let loc_b = put(&p.loc_b);
        let spread_w = put(&p.spread_w);
        let spread_b = put(&p.spread_b);
        let scale_w = put(&p.scale_w);
        let scale_b = put(&p.scale_b);
        let gcn_w1 = put(&p.gcn_w1);
        let gcn_w2 = put(&p.gcn_w2);
        let attn_q = put(&p.attn_q);
        let attn_k = put(&p.attn_k);
        let hyper_w1 = put(&p.hyper_w1);
        let hyper_b1 = put(&p.hyper_b1);
        let hyper_w2 = put(&p.hyper_w2);
        let hyper_b2 = put(&p.hyper_b2);
        let lora_b = put(&p.lora_b);
        let static_a = put(&p.static_a);
        let b = &self.backbone;
        BoundParams {
            proj_w,
            proj_b,
            edge_w1,
            edge_b1,
            edge_w2,
            edge_b2,
            prior_w,
            prior_b,
            loc_w,
            loc_b,
            spread_w,
            spread_b,
            scale_w,
            scale_b,
            gcn_w1,
            gcn_w2,
            attn_q,
            attn_k,
            hyper_w1,
            hyper_b1,
            hyper_w2,
            hyper_b2,
            lora_b,
            static_a,
            feat_w: tape.constant(b.feat_w.clone()),
            feat_b: tape.constant(b.feat_b.clone()),
            feat_v: tape.constant(b.feat_v.clone()),
            feat_c: tape.constant(b.feat_c.clone()),
            w0: tape.constant(b.w0.clone()),
            b0: tape.constant(b.b0.clone()),
            head_w: tape.constant(b.head_w.clone()),
            head_b: tape.constant(b.head_b.clone()),
        }
    }

    /// Candidate pair count for one profile under the configured symmetry.
    pub fn n_pairs(&self, profile: &EntityProfile) -> usize {
        pair_list(&profile.node_mask, self.cfg.symmetric).len()
    }

    /// Standard-normal noise for `s` draws; empty vectors in static mode
    /// where no edge noise is consumed.
    pub fn draw_eps<R: Rng + ?Sized>(&self, n_pairs: usize, s: usize, rng: &mut R) -> Vec<Vec<f64>> {
        match self.cfg.adapter {
            AdapterMode::Static => vec![Vec::new(); s],
            AdapterMode::Generated => (0..s)
                .map(|_| (0..n_pairs).map(|_| standard_normal(rng)).collect())
                .collect(),
        }
    }

    /// Builds one sample's forward pass for each noise draw on the tape.
    /// Posterior heads run once per sample; only the draw-dependent part
    /// (adjacency, propagation, hypernetwork, backbone) repeats.
    pub fn forward_draws(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        profile: &EntityProfile,
        draws: &[Vec<f64>],
    ) -> Result<SampleForward> {
        profile.validate()?;
        if profile.len() != self.input_dim {
            return Err(Error::shape("model input", format!("{} entities", self.input_dim), format!("{}", profile.len())));
        }
        if draws.is_empty() {
            return Err(Error::arg("forward needs at least one draw"));
        }
        let phi = self.backbone_features(tape, bound, profile)?;

        if self.cfg.adapter == AdapterMode::Static {
            let lp = self.adapted_log_probs(tape, bound, phi, bound.static_a)?;
            return Ok(SampleForward {
                log_probs: vec![lp; draws.len()],
                posterior: None,
                adjacency: Vec::new(),
                pairs: Vec::new(),
            });
        }

        let k = profile.len();
        let node_x = frozen_node_features(profile, self.cfg.d_embed, self.cfg.frozen_seed)?;
        let h0 = encode_nodes(tape, &node_x, bound.proj_w, bound.proj_b, &profile.node_mask)?;
        let pairs = pair_list(&profile.node_mask, self.cfg.symmetric);
        if pairs.is_empty() {
            return Err(Error::arg("graph adapter needs at least two active entities"));
        }

        let e_raw = edge_features(tape, h0, &pairs, self.cfg.edge_features)?;
        let e_hidden = linear(tape, e_raw, bound.edge_w1, bound.edge_b1)?;
        let e_hidden = tape.relu(e_hidden)?;
        let e = linear(tape, e_hidden, bound.edge_w2, bound.edge_b2)?;

        let prior_rate = rate_head(tape, e, bound.prior_w, bound.prior_b)?;
        let (location, spread) =
            posterior_heads(tape, e, bound.loc_w, bound.loc_b, bound.spread_w, bound.spread_b)?;
        let matched_rate = matched_rates(tape, location, spread)?;
        let scale = scale_head(tape, e, matched_rate, bound.scale_w, bound.scale_b)?;
        let posterior = PosteriorVars { location, spread, prior_rate, matched_rate, scale };

        let mask_col = Tensor::new(k, 1, profile.node_mask.iter().map(|&m| f64::from(m)).collect())?;
        let mask_var = tape.constant(mask_col);

        let mut log_probs = Vec::with_capacity(draws.len());
        let mut adjacency = Vec::with_capacity(draws.len());
        for eps in draws {
            if eps.len() != pairs.len() {
                return Err(Error::shape("edge noise", format!("{} draws", pairs.len()), format!("{}", eps.len())));
            }
            let adj = sample_adjacency(tape, location, spread, scale, eps, &pairs, k, self.cfg.symmetric)?;
            let h_graph = self.graph_readout(tape, bound, h0, adj, &profile.node_mask, mask_var, k)?;

            let hyper_hidden = linear(tape, h_graph, bound.hyper_w1, bound.hyper_b1)?;
            let hyper_hidden = tape.relu(hyper_hidden)?;
            let a_flat = linear(tape, hyper_hidden, bound.hyper_w2, bound.hyper_b2)?;
            let a_gen = tape.reshape(a_flat, self.cfg.rank, self.cfg.backbone.d_in)?;

            log_probs.push(self.adapted_log_probs(tape, bound, phi, a_gen)?);
            adjacency.push(adj);
        }
        Ok(SampleForward { log_probs, posterior: Some(posterior), adjacency, pairs })
    }

    /// Frozen feature map of the backbone: masked entities contribute zero.
    fn backbone_features(&self, tape: &mut Tape, bound: &BoundParams, profile: &EntityProfile) -> Result<VarId> {
        let values: Vec<f64> = profile
            .values
            .iter()
            .zip(&profile.node_mask)
            .map(|(&v, &m)| if m { v } else { 0.0 })
            .collect();
        let x = tape.constant(Tensor::new(1, profile.len(), values)?);
        let f = linear(tape, x, bound.feat_w, bound.feat_b)?;
        let f = tape.tanh(f)?;
        linear(tape, f, bound.feat_v, bound.feat_c)
    }

    /// Two propagation steps over the normalized sampled graph, an attention
    /// read against the pre-propagation embedding, and a masked mean pool.
    fn graph_readout(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        h0: VarId,
        adj: VarId,
        mask: &[bool],
        mask_var: VarId,
        k: usize,
    ) -> Result<VarId> {
        let s_norm = gcn_normalize(tape, adj, k)?;
        let act = |tape: &mut Tape, x: VarId| -> Result<VarId> {
            match self.cfg.gcn_activation {
                GcnActivation::Tanh => tape.tanh(x),
                GcnActivation::Relu => tape.relu(x),
                GcnActivation::Identity => Ok(x),
            }
        };
        let sh0 = tape.matmul(s_norm, h0)?;
        let h1 = tape.matmul(sh0, bound.gcn_w1)?;
        let h1 = act(tape, h1)?;
        let sh1 = tape.matmul(s_norm, h1)?;
        let h2 = tape.matmul(sh1, bound.gcn_w2)?;
        let h2 = act(tape, h2)?;

        let q = tape.matmul(h2, bound.attn_q)?;
        let key = tape.matmul(h0, bound.attn_k)?;
        let key_t = tape.transpose(key)?;
        let scores = tape.matmul(q, key_t)?;
        let scores = tape.affine(scores, 1.0 / (self.cfg.d_g as f64).sqrt(), 0.0)?;
        let weights = tape.masked_softmax_rows(scores, mask)?;
        let context = tape.matmul(weights, h0)?;
        let fused = if self.cfg.attention_residual {
            tape.add(h2, context)?
        } else {
            context
        };
        let fused = tape.scale_rows(fused, mask_var)?;
        tape.mean_pool_rows(fused, mask)
    }

    /// Log-probabilities through the adapted inner map:
    /// phi (W0 + s A^T B^T) + b0, then the frozen head and log-softmax.
    fn adapted_log_probs(&self, tape: &mut Tape, bound: &BoundParams, phi: VarId, a_gen: VarId) -> Result<VarId> {
        let a_t = tape.transpose(a_gen)?;
        let b_t = tape.transpose(bound.lora_b)?;
        let ab = tape.matmul(a_t, b_t)?;
        let delta_w = tape.affine(ab, self.cfg.lora_scale(), 0.0)?;
        let w_eff = tape.add(bound.w0, delta_w)?;
        let y = tape.matmul(phi, w_eff)?;
        let y = tape.add_row_vec(y, bound.b0)?;
        let logits = linear(tape, y, bound.head_w, bound.head_b)?;
        tape.log_softmax_rows(logits)
    }

    /// Prediction marginalized over `s` adjacency draws.
    pub fn mc_predict<R: Rng + ?Sized>(&self, profile: &EntityProfile, s: usize, rng: &mut R) -> Result<McPrediction> {
        if s == 0 {
            return Err(Error::arg("prediction needs at least one draw"));
        }
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let draws = self.draw_eps(self.n_pairs(profile), s, rng);
        let fwd = self.forward_draws(&mut tape, &bound, profile, &draws)?;
        let probs: Vec<f64> = fwd
            .log_probs
            .iter()
            .map(|&lp| tape.value(lp).get(0, 1).exp())
            .collect();
        let mean = probs.iter().sum::<f64>() / s as f64;
        let spread = if s > 1 {
            let var = probs.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / (s - 1) as f64;
            var.sqrt()
        } else {
            0.0
        };
        Ok(McPrediction { prob_positive: mean, spread, draws: s })
    }

    /// Posterior summary plus the mean sampled adjacency over `s` draws.
    pub fn infer_graph<R: Rng + ?Sized>(&self, profile: &EntityProfile, s: usize, rng: &mut R) -> Result<LatentGraph> {
        if self.cfg.adapter == AdapterMode::Static {
            return Err(Error::arg("static adapter has no latent graph"));
        }
        if s == 0 {
            return Err(Error::arg("graph inference needs at least one draw"));
        }
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let draws = self.draw_eps(self.n_pairs(profile), s, rng);
        let fwd = self.forward_draws(&mut tape, &bound, profile, &draws)?;
        let post = fwd.posterior.expect("generated mode always has a posterior");
        let posteriors = EdgePosteriors::from_tape(
            &tape,
            &fwd.pairs,
            post.location,
            post.spread,
            post.prior_rate,
            post.matched_rate,
            post.scale,
        )?;
        let tensors: Vec<Tensor> = fwd.adjacency.iter().map(|&a| tape.value(a).clone()).collect();
        Ok(LatentGraph {
            n_nodes: profile.len(),
            adjacency: mean_adjacency(&tensors)?,
            posteriors,
            draws: s,
        })
    }

    /// Marginalized prediction and the mean sampled adjacency from a single
    /// forward pass; the adjacency is absent in static mode. Matches
    /// `mc_predict` and `infer_graph` run on the same draw stream.
    pub fn predict_with_graph<R: Rng + ?Sized>(
        &self,
        profile: &EntityProfile,
        s: usize,
        rng: &mut R,
    ) -> Result<(McPrediction, Option<Tensor>)> {
        if s == 0 {
            return Err(Error::arg("prediction needs at least one draw"));
        }
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let draws = self.draw_eps(self.n_pairs(profile), s, rng);
        let fwd = self.forward_draws(&mut tape, &bound, profile, &draws)?;
        let probs: Vec<f64> = fwd
            .log_probs
            .iter()
            .map(|&lp| tape.value(lp).get(0, 1).exp())
            .collect();
        let mean = probs.iter().sum::<f64>() / s as f64;
        let spread = if s > 1 {
            let var = probs.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / (s - 1) as f64;
            var.sqrt()
        } else {
            0.0
        };
        let prediction = McPrediction { prob_positive: mean, spread, draws: s };
        let graph = if fwd.adjacency.is_empty() {
            None
        } else {
            let tensors: Vec<Tensor> = fwd.adjacency.iter().map(|&a| tape.value(a).clone()).collect();
            Some(mean_adjacency(&tensors)?)
        };
        Ok((prediction, graph))
    }
}
