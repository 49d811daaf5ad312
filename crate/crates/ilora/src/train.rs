//! Training: regularized objective, AdamW, the epoch loop, gradient
//! checking, and checkpoints.
//!
//! The objective is mean task cross-entropy plus two rate penalties summed
//! over candidate pairs and averaged over the batch: a Poisson divergence
//! tying each matched rate to its prior rate, and a Laplace scale divergence
//! tying each edge scale to the configured reference scale. With both
//! multipliers zero the total is bit-identical to the task term.
//!
//! Model selection keeps the parameters of the best validation ranking
//! epoch. A non-finite or runaway loss aborts training and restores that
//! checkpoint instead of failing the run.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, VarId};
use crate::data::LabeledSample;
use crate::error::{Error, Result};
use crate::eval::{auroc, PredictionRecord};
use crate::model::{BoundParams, Model, ModelConfig, ModelParams};

const DIVERGENCE_LIMIT: f64 = 1e8;
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling.
    pub clip_norm: f64,
    /// Steps of linear learning-rate ramp from zero.
    pub warmup_steps: usize,
    pub lambda_poisson: f64,
    pub lambda_laplace: f64,
    /// Adjacency draws per sample during training.
    pub train_draws: usize,
    /// Adjacency draws per sample for validation scoring.
    pub eval_draws: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 40,
            batch_size: 32,
            learning_rate: 3e-3,
            weight_decay: 1e-4,
            clip_norm: 1.0,
            warmup_steps: 20,
            lambda_poisson: 1e-3,
            lambda_laplace: 1e-3,
            train_draws: 1,
            eval_draws: 8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.train_draws == 0 || self.eval_draws == 0 {
            return Err(Error::arg("epochs, batch_size, and draw counts must be positive"));
        }
        for (name, v) in [
            ("learning_rate", self.learning_rate),
            ("clip_norm", self.clip_norm),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::arg(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [
            ("weight_decay", self.weight_decay),
            ("lambda_poisson", self.lambda_poisson),
            ("lambda_laplace", self.lambda_laplace),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::arg(format!("{name} must be nonnegative, got {v}")));
            }
        }
        Ok(())
    }
}

/// Scalar readings of one built objective.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub task: f64,
    pub kl_poisson: f64,
    pub kl_laplace: f64,
    pub total: f64,
}

/// Builds the batch objective on the tape and returns the total node plus
/// its scalar breakdown.
pub fn build_loss(
    model: &Model,
    tape: &mut Tape,
    bound: &BoundParams,
    batch: &[&LabeledSample],
    draws: &[Vec<Vec<f64>>],
    cfg: &TrainConfig,
) -> Result<(VarId, LossBreakdown)> {
    if batch.is_empty() {
        return Err(Error::arg("loss over an empty batch"));
    }
    if draws.len() != batch.len() {
        return Err(Error::shape("loss draws", format!("{} per-sample draw sets", batch.len()), format!("{}", draws.len())));
    }
    let ln_b0 = model.cfg.prior_scale.ln();
    let mut ce_terms: Vec<VarId> = Vec::with_capacity(batch.len());
    let mut pois_terms: Vec<VarId> = Vec::new();
    let mut lap_terms: Vec<VarId> = Vec::new();

    for (sample, sample_draws) in batch.iter().zip(draws) {
        let fwd = model.forward_draws(tape, bound, &sample.profile, sample_draws)?;
        if sample.label > 1 {
            return Err(Error::arg(format!("label must be 0 or 1, got {}", sample.label)));
        }
        let mut onehot = Tensor::zeros(1, 2);
        onehot.set(0, sample.label as usize, 1.0);
        let onehot = tape.constant(onehot);
        // Cross-entropy averaged over this sample's draws.
        let mut ce_sum: Option<VarId> = None;
        for &lp in &fwd.log_probs {
            let picked = tape.mul(lp, onehot)?;
            let ll = tape.sum(picked)?;
            ce_sum = Some(match ce_sum {
                None => ll,
                Some(acc) => tape.add(acc, ll)?,
            });
        }
        let ce_sum = ce_sum.expect("forward_draws yields at least one draw");
        let ce = tape.affine(ce_sum, -1.0 / fwd.log_probs.len() as f64, 0.0)?;
        ce_terms.push(ce);

        if let Some(post) = fwd.posterior {
            // sum_p m0 - m + m (ln m - ln m0)
            let lm = tape.log(post.matched_rate)?;
            let lm0 = tape.log(post.prior_rate)?;
            let lratio = tape.sub(lm, lm0)?;
            let mlog = tape.mul(post.matched_rate, lratio)?;
            let mdiff = tape.sub(post.prior_rate, post.matched_rate)?;
            let pois_elem = tape.add(mdiff, mlog)?;
            pois_terms.push(tape.sum(pois_elem)?);

            // sum_p ln(b0 / b) + b / b0 - 1
            let lb = tape.log(post.scale)?;
            let neg_lb = tape.affine(lb, -1.0, ln_b0)?;
            let ratio = tape.affine(post.scale, 1.0 / model.cfg.prior_scale, -1.0)?;
            let lap_elem = tape.add(neg_lb, ratio)?;
            lap_terms.push(tape.sum(lap_elem)?);
        }
    }

    let mean_of = |tape: &mut Tape, terms: &[VarId], n: usize| -> Result<VarId> {
        let mut acc: Option<VarId> = None;
        for &t in terms {
            acc = Some(match acc {
                None => t,
                Some(a) => tape.add(a, t)?,
            });
        }
        match acc {
            Some(a) => tape.affine(a, 1.0 / n as f64, 0.0),
            None => Ok(tape.constant(Tensor::zeros(1, 1))),
        }
    };
    let n = batch.len();
    let task = mean_of(tape, &ce_terms, n)?;
    let kl_poisson = mean_of(tape, &pois_terms, n)?;
    let kl_laplace = mean_of(tape, &lap_terms, n)?;

    // Zero multipliers keep the total bit-identical to the task term.
    let mut total = task;
    if cfg.lambda_poisson != 0.0 {
        let scaled = tape.affine(kl_poisson, cfg.lambda_poisson, 0.0)?;
        total = tape.add(total, scaled)?;
    }
    if cfg.lambda_laplace != 0.0 {
        let scaled = tape.affine(kl_laplace, cfg.lambda_laplace, 0.0)?;
        total = tape.add(total, scaled)?;
    }

    let breakdown = LossBreakdown {
        task: tape.value(task).item()?,
        kl_poisson: tape.value(kl_poisson).item()?,
        kl_laplace: tape.value(kl_laplace).item()?,
        total: tape.value(total).item()?,
    };
    Ok((total, breakdown))
}

/// AdamW with decoupled weight decay. Moment buffers follow the canonical
/// parameter order.
pub struct AdamW {
    learning_rate: f64,
    weight_decay: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u32,
}

impl AdamW {
    pub fn new(params: &ModelParams, learning_rate: f64, weight_decay: f64) -> Self {
        let shapes: Vec<Tensor> = params.visit().iter().map(|(_, t)| Tensor::zeros(t.rows(), t.cols())).collect();
        AdamW {
            learning_rate,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: shapes.clone(),
            v: shapes,
            t: 0,
        }
    }

    /// One update step; `lr_scale` carries warmup. Decay multiplies the
    /// parameter directly, not the gradient.
    pub fn step(&mut self, params: &mut ModelParams, grads: &[Tensor], lr_scale: f64) -> Result<()> {
        let mut views = params.visit_mut();
        if grads.len() != views.len() {
            return Err(Error::shape("optimizer step", format!("{} gradients", views.len()), format!("{}", grads.len())));
        }
        self.t += 1;
        let lr = self.learning_rate * lr_scale;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (k, (name, param)) in views.iter_mut().enumerate() {
            let g = &grads[k];
            if g.rows() != param.rows() || g.cols() != param.cols() {
                return Err(Error::shape(
                    "optimizer step",
                    format!("{}x{} gradient for {name}", param.rows(), param.cols()),
                    format!("{}x{}", g.rows(), g.cols()),
                ));
            }
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            let p = param.data_mut();
            for i in 0..p.len() {
                let gi = g.data()[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr * self.weight_decay * p[i];
                p[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Scales all gradients so their joint norm is at most `max_norm`; returns
/// the pre-clip norm.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let mut sq = 0.0;
    for g in grads.iter() {
        for &v in g.data() {
            sq += v * v;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= scale;
            }
        }
    }
    norm
}

/// Per-epoch training record.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct CurveRow {
    pub epoch: usize,
    pub task: f64,
    pub kl_poisson: f64,
    pub kl_laplace: f64,
    pub total: f64,
    pub val_auroc: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainReport {
    pub curve: Vec<CurveRow>,
    pub best_epoch: usize,
    pub best_val_auroc: f64,
    /// Reason training stopped early, if it did; the model still holds the
    /// best checkpoint.
    pub diverged: Option<String>,
}

fn gather_grads(tape: &Tape, bound: &BoundParams, grads: &crate::autodiff::Gradients) -> Vec<Tensor> {
    bound
        .leaves()
        .iter()
        .map(|&(_, id)| {
            let t = tape.value(id);
            match grads.wrt(id) {
                Some(g) => g.clone(),
                None => Tensor::zeros(t.rows(), t.cols()),
            }
        })
        .collect()
}

/// Scores the validation split by marginalized prediction and ranking
/// quality.
pub fn validation_auroc<R: Rng + ?Sized>(model: &Model, val: &[LabeledSample], draws: usize, rng: &mut R) -> Result<f64> {
    let mut records = Vec::with_capacity(val.len());
    for s in val {
        let p = model.mc_predict(&s.profile, draws, rng)?;
        records.push(PredictionRecord::new(p.prob_positive, s.label)?);
    }
    auroc(&records)
}

/// Runs the full loop and leaves the best-epoch parameters in the model.
pub fn train(
    model: &mut Model,
    train_set: &[LabeledSample],
    val_set: &[LabeledSample],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::arg("training needs non-empty train and validation splits"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7472_6169_6e00_0001);
    let mut opt = AdamW::new(&model.params, cfg.learning_rate, cfg.weight_decay);
    let mut best_params = model.params.clone();
    let mut best_auroc = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut diverged = None;
    let mut step = 0usize;

    'epochs: for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng);
        let mut sums = (0.0, 0.0, 0.0, 0.0);
        let mut batches = 0.0;

        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&LabeledSample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let draws: Vec<Vec<Vec<f64>>> = batch
                .iter()
                .map(|s| model.draw_eps(model.n_pairs(&s.profile), cfg.train_draws, &mut rng))
                .collect();
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, true);
            let built = build_loss(model, &mut tape, &bound, &batch, &draws, cfg);
            let (total, breakdown) = match built {
                Ok(ok) => ok,
                Err(Error::NonFinite { context }) => {
                    diverged = Some(format!("non-finite forward value in {context}"));
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            if !breakdown.total.is_finite() || breakdown.total.abs() > DIVERGENCE_LIMIT {
                diverged = Some(format!("loss {} left the stable range", breakdown.total));
                break 'epochs;
            }
            let grad_result = tape.backward(total, Tensor::full(1, 1, 1.0));
            let grads_raw = match grad_result {
                Ok(g) => g,
                Err(Error::NonFinite { context }) => {
                    diverged = Some(format!("non-finite gradient in {context}"));
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            let mut grads = gather_grads(&tape, &bound, &grads_raw);
            clip_global_norm(&mut grads, cfg.clip_norm);
            let lr_scale = if cfg.warmup_steps > 0 {
                ((step + 1) as f64 / cfg.warmup_steps as f64).min(1.0)
            } else {
                1.0
            };
            opt.step(&mut model.params, &grads, lr_scale)?;
            step += 1;

            sums.0 += breakdown.task;
            sums.1 += breakdown.kl_poisson;
            sums.2 += breakdown.kl_laplace;
            sums.3 += breakdown.total;
            batches += 1.0;
        }

        let mut val_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7661_6c00_0000_0000 ^ epoch as u64);
        let val_auroc = validation_auroc(model, val_set, cfg.eval_draws, &mut val_rng)?;
        curve.push(CurveRow {
            epoch,
            task: sums.0 / batches,
            kl_poisson: sums.1 / batches,
            kl_laplace: sums.2 / batches,
            total: sums.3 / batches,
            val_auroc,
        });
        if val_auroc > best_auroc {
            best_auroc = val_auroc;
            best_params = model.params.clone();
            best_epoch = epoch;
        }
    }

    if best_auroc.is_finite() {
        model.params = best_params;
    }
    Ok(TrainReport {
        curve,
        best_epoch,
        best_val_auroc: best_auroc,
        diverged,
    })
}

/// Smooth-coordinate finite-difference audit of the full objective.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_err: f64,
    pub mean_rel_err: f64,
}

/// Compares tape gradients of the batch objective against central
/// differences, coordinate by coordinate. Perturbations that flip any kink
/// sign (a rectifier, clamp, or absolute-value branch) are skipped; the
/// check runs until `min_smooth` smooth coordinates have been compared.
pub fn grad_check(
    model: &Model,
    batch: &[&LabeledSample],
    cfg: &TrainConfig,
    min_smooth: usize,
    step: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::arg("finite-difference step must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6763_6865_636b_0001);
    let draws: Vec<Vec<Vec<f64>>> = batch
        .iter()
        .map(|s| model.draw_eps(model.n_pairs(&s.profile), cfg.train_draws, &mut rng))
        .collect();

    let build = |m: &Model| -> Result<(f64, Vec<i8>, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let bound = m.bind(&mut tape, true);
        let (total, breakdown) = build_loss(m, &mut tape, &bound, batch, &draws, cfg)?;
        let grads = tape.backward(total, Tensor::full(1, 1, 1.0))?;
        Ok((breakdown.total, tape.kink_signature().to_vec(), gather_grads(&tape, &bound, &grads)))
    };
    let (_, base_signature, analytic) = build(model)?;

    let sizes: Vec<usize> = analytic.iter().map(|g| g.rows() * g.cols()).collect();
    let total_coords: usize = sizes.iter().sum();
    let mut checked = 0usize;
    let mut skipped = 0usize;
    let mut max_rel = 0.0f64;
    let mut sum_rel = 0.0f64;
    let mut attempts = 0usize;
    let attempt_limit = min_smooth.saturating_mul(50).max(1000);

    while checked < min_smooth {
        attempts += 1;
        if attempts > attempt_limit {
            return Err(Error::arg(format!(
                "only {checked} smooth coordinates found in {attempts} attempts; loss landscape too kinked for the check"
            )));
        }
        let flat = rng.gen_range(0..total_coords);
        let (mut param_idx, mut offset) = (0usize, flat);
        while offset >= sizes[param_idx] {
            offset -= sizes[param_idx];
            param_idx += 1;
        }

        let eval_at = |shift: f64| -> Result<(f64, Vec<i8>)> {
            let mut perturbed = model.params.clone();
            {
                let mut views = perturbed.visit_mut();
                views[param_idx].1.data_mut()[offset] += shift;
            }
            let probe = Model::from_params(model.cfg.clone(), model.input_dim, perturbed)?;
            let mut tape = Tape::new();
            let bound = probe.bind(&mut tape, true);
            let (_, breakdown) = build_loss(&probe, &mut tape, &bound, batch, &draws, cfg)?;
            Ok((breakdown.total, tape.kink_signature().to_vec()))
        };
        let (f_plus, sig_plus) = eval_at(step)?;
        let (f_minus, sig_minus) = eval_at(-step)?;
        if sig_plus != base_signature || sig_minus != base_signature {
            skipped += 1;
            continue;
        }
        let fd = (f_plus - f_minus) / (2.0 * step);
        let an = analytic[param_idx].data()[offset];
        let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1.0);
        max_rel = max_rel.max(rel);
        sum_rel += rel;
        checked += 1;
    }
    Ok(GradCheckReport {
        checked,
        skipped,
        max_rel_err: max_rel,
        mean_rel_err: sum_rel / checked.max(1) as f64,
    })
}

#[derive(Serialize, Deserialize)]
struct NamedTensor {
    name: String,
    tensor: Tensor,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    version: u32,
    input_dim: usize,
    config: ModelConfig,
    params: Vec<NamedTensor>,
}

/// Writes config plus trained tensors as JSON. Frozen components are not
/// stored; they regenerate from the config seed.
pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let file = CheckpointFile {
        version: CHECKPOINT_VERSION,
        input_dim: model.input_dim,
        config: model.cfg.clone(),
        params: model
            .params
            .visit()
            .into_iter()
            .map(|(name, t)| NamedTensor { name: name.to_string(), tensor: t.clone() })
            .collect(),
    };
    let mut out = std::fs::File::create(path)?;
    out.write_all(serde_json::to_string_pretty(&file)?.as_bytes())?;
    out.write_all(b"\n")?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let body = std::fs::read_to_string(path)?;
    let file: CheckpointFile = serde_json::from_str(&body)?;
    if file.version != CHECKPOINT_VERSION {
        return Err(Error::Data(format!(
            "checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
            file.version
        )));
    }
    let mut params = ModelParams::init(&file.config, 0);
    {
        let mut views = params.visit_mut();
        if file.params.len() != views.len() {
            return Err(Error::Data(format!(
                "checkpoint holds {} tensors, model has {}",
                file.params.len(),
                views.len()
            )));
        }
        for (stored, (name, slot)) in file.params.iter().zip(views.iter_mut()) {
            if stored.name != *name {
                return Err(Error::Data(format!("checkpoint tensor {:?} where {name:?} expected", stored.name)));
            }
            if stored.tensor.rows() != slot.rows() || stored.tensor.cols() != slot.cols() {
                return Err(Error::shape(
                    "checkpoint tensor",
                    format!("{}x{} for {name}", slot.rows(), slot.cols()),
                    format!("{}x{}", stored.tensor.rows(), stored.tensor.cols()),
                ));
            }
            stored.tensor.check_finite("checkpoint tensor")?;
            **slot = stored.tensor.clone();
        }
    }
    Model::from_params(file.config, file.input_dim, params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, Split, SyntheticSpec};
    use crate::model::AdapterMode;

    fn tiny_model(adapter: AdapterMode) -> Model {
        let cfg = ModelConfig {
            d_embed: 4,
            d_g: 6,
            d_e: 8,
            hyper_hidden: 6,
            rank: 2,
            adapter,
            backbone: crate::model::BackboneConfig { feat_hidden: 8, d_in: 5, d_out: 4 },
            ..ModelConfig::default()
        };
        Model::new(cfg, 8, 3).unwrap()
    }

    fn tiny_data(seed: u64) -> Vec<LabeledSample> {
        let spec = SyntheticSpec {
            n_entities: 8,
            n_blocks: 2,
            n_train: 12,
            n_val: 2,
            n_test: 2,
            ..SyntheticSpec::default()
        };
        gen_synthetic(&spec, seed).unwrap().labeled(Split::Train).unwrap()
    }

    fn loss_for(model: &Model, samples: &[LabeledSample], cfg: &TrainConfig, seed: u64) -> LossBreakdown {
        let batch: Vec<&LabeledSample> = samples.iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let draws: Vec<Vec<Vec<f64>>> = batch
            .iter()
            .map(|s| model.draw_eps(model.n_pairs(&s.profile), cfg.train_draws, &mut rng))
            .collect();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, true);
        build_loss(model, &mut tape, &bound, &batch, &draws, cfg).unwrap().1
    }

    #[test]
    fn zero_multipliers_keep_total_equal_to_task() {
        let model = tiny_model(AdapterMode::Generated);
        let samples = tiny_data(2);
        let cfg = TrainConfig { lambda_poisson: 0.0, lambda_laplace: 0.0, ..TrainConfig::default() };
        let b = loss_for(&model, &samples[..4], &cfg, 7);
        assert_eq!(b.total, b.task);
        assert!(b.kl_poisson >= 0.0 && b.kl_laplace >= 0.0);
    }

    #[test]
    fn positive_multipliers_add_penalties() {
        let model = tiny_model(AdapterMode::Generated);
        let samples = tiny_data(2);
        let cfg = TrainConfig { lambda_poisson: 0.5, lambda_laplace: 0.25, ..TrainConfig::default() };
        let b = loss_for(&model, &samples[..4], &cfg, 7);
        let expect = b.task + 0.5 * b.kl_poisson + 0.25 * b.kl_laplace;
        assert!((b.total - expect).abs() < 1e-12);
        assert!(b.kl_poisson > 0.0 && b.kl_laplace > 0.0);
    }

    #[test]
    fn static_mode_has_zero_penalties() {
        let model = tiny_model(AdapterMode::Static);
        let samples = tiny_data(2);
        let cfg = TrainConfig::default();
        let b = loss_for(&model, &samples[..4], &cfg, 7);
        assert_eq!(b.kl_poisson, 0.0);
        assert_eq!(b.kl_laplace, 0.0);
        assert_eq!(b.total, b.task);
    }

    #[test]
    fn adamw_descends_and_decays() {
        let cfg = ModelConfig {
            d_embed: 4,
            d_g: 4,
            d_e: 4,
            hyper_hidden: 4,
            rank: 2,
            backbone: crate::model::BackboneConfig { feat_hidden: 4, d_in: 3, d_out: 3 },
            ..ModelConfig::default()
        };
        let mut params = ModelParams::init(&cfg, 1);
        let before = params.proj_w.get(0, 0);
        let mut opt = AdamW::new(&params, 0.1, 0.0);
        let grads: Vec<Tensor> = params
            .visit()
            .iter()
            .map(|(_, t)| Tensor::full(t.rows(), t.cols(), 1.0))
            .collect();
        opt.step(&mut params, &grads, 1.0).unwrap();
        assert!(params.proj_w.get(0, 0) < before);

        // Pure decay: zero gradient shrinks magnitudes.
        let mut params = ModelParams::init(&cfg, 1);
        let before = params.proj_w.get(0, 1).abs();
        let mut opt = AdamW::new(&params, 0.1, 0.5);
        let zeros: Vec<Tensor> = params
            .visit()
            .iter()
            .map(|(_, t)| Tensor::zeros(t.rows(), t.cols()))
            .collect();
        opt.step(&mut params, &zeros, 1.0).unwrap();
        assert!(params.proj_w.get(0, 1).abs() < before);
    }

    #[test]
    fn clip_caps_global_norm() {
        let mut grads = vec![Tensor::full(2, 2, 3.0), Tensor::full(1, 2, 3.0)];
        let norm = clip_global_norm(&mut grads, 1.0);
        assert!((norm - (9.0f64 * 6.0).sqrt()).abs() < 1e-12);
        let mut sq = 0.0;
        for g in &grads {
            for &v in g.data() {
                sq += v * v;
            }
        }
        assert!((sq.sqrt() - 1.0).abs() < 1e-12);
        // Under the ceiling nothing changes.
        let mut small = vec![Tensor::full(1, 1, 0.3)];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0].get(0, 0), 0.3);
    }

    #[test]
    fn training_improves_and_is_deterministic() {
        let samples = tiny_data(4);
        let (train_half, val_half) = samples.split_at(8);
        let cfg = TrainConfig {
            epochs: 4,
            batch_size: 4,
            warmup_steps: 2,
            eval_draws: 2,
            ..TrainConfig::default()
        };
        let mut model_a = tiny_model(AdapterMode::Generated);
        let report_a = train(&mut model_a, train_half, val_half, &cfg, 11).unwrap();
        let mut model_b = tiny_model(AdapterMode::Generated);
        let report_b = train(&mut model_b, train_half, val_half, &cfg, 11).unwrap();
        assert!(report_a.diverged.is_none());
        assert_eq!(report_a.curve.len(), 4);
        assert_eq!(
            serde_json::to_string(&report_a.curve).unwrap(),
            serde_json::to_string(&report_b.curve).unwrap()
        );
        for ((_, ta), (_, tb)) in model_a.params.visit().into_iter().zip(model_b.params.visit()) {
            assert_eq!(ta.data(), tb.data());
        }
        let last = report_a.curve.last().unwrap();
        let first = &report_a.curve[0];
        assert!(last.task < first.task, "task {} -> {}", first.task, last.task);
        assert!(report_a.best_val_auroc >= report_a.curve[0].val_auroc);
    }

    #[test]
    fn divergent_run_aborts_and_keeps_best() {
        let samples = tiny_data(4);
        let (train_half, val_half) = samples.split_at(8);
        let cfg = TrainConfig {
            epochs: 6,
            batch_size: 4,
            learning_rate: 1e12,
            warmup_steps: 0,
            clip_norm: 1e12,
            ..TrainConfig::default()
        };
        let mut model = tiny_model(AdapterMode::Generated);
        let report = train(&mut model, train_half, val_half, &cfg, 5).unwrap();
        assert!(report.diverged.is_some(), "curve: {:?}", report.curve);
        for (_, t) in model.params.visit() {
            t.check_finite("restored params").unwrap();
        }
    }

    #[test]
    fn gradients_match_finite_differences_on_the_full_objective() {
        let model = tiny_model(AdapterMode::Generated);
        let samples = tiny_data(9);
        let batch: Vec<&LabeledSample> = samples[..3].iter().collect();
        let cfg = TrainConfig { train_draws: 2, ..TrainConfig::default() };
        let report = grad_check(&model, &batch, &cfg, 60, 1e-5, 13).unwrap();
        assert_eq!(report.checked, 60);
        assert!(report.max_rel_err < 1e-4, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn checkpoint_roundtrip_preserves_behavior() {
        let mut model = tiny_model(AdapterMode::Generated);
        let samples = tiny_data(4);
        let (train_half, val_half) = samples.split_at(8);
        let cfg = TrainConfig { epochs: 2, batch_size: 4, eval_draws: 2, ..TrainConfig::default() };
        train(&mut model, train_half, val_half, &cfg, 3).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        save_checkpoint(&model, &path).unwrap();
        let restored = load_checkpoint(&path).unwrap();
        for ((name, ta), (_, tb)) in model.params.visit().into_iter().zip(restored.params.visit()) {
            assert_eq!(ta.data(), tb.data(), "{name} drifted through the checkpoint");
        }
        let p1 = model.mc_predict(&samples[0].profile, 3, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let p2 = restored.mc_predict(&samples[0].profile, 3, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(p1.prob_positive, p2.prob_positive);
    }

    #[test]
    fn checkpoint_rejects_foreign_versions() {
        let model = tiny_model(AdapterMode::Generated);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        save_checkpoint(&model, &path).unwrap();
        let body = std::fs::read_to_string(&path).unwrap().replace("\"version\": 1", "\"version\": 9");
        std::fs::write(&path, body).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
