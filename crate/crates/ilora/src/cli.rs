//! Command-line front end. Every subcommand reads an optional JSON config,
//! applies flag overrides, writes its artifacts into the output directory,
//! and finishes with a `manifest.json` recording the resolved config, the
//! seed, and content hashes of all inputs and outputs. Manifests carry no
//! timestamps or paths, so identical config and seed reproduce identical
//! bytes.

use std::collections::{BTreeMap, BTreeSet};
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Tensor;
use crate::data::{
    export_adjacency_csv, export_dot, export_edge_csv, gen_synthetic, load_abundance,
    select_entities, Dataset, LabeledSample, Split, SyntheticSpec,
};
use crate::error::{Error, Result};
use crate::eval::{err_at_k, random_baseline_err, MetricsReport, PredictionRecord};
use crate::graph::{symmetrize_topk, total_pairs};
use crate::model::{AdapterMode, Model, ModelConfig};
use crate::stats::{build_reference, PairScreen};
use crate::train::{grad_check, load_checkpoint, save_checkpoint, train, CurveRow, TrainConfig};

/// Seed used when neither flag, config, nor environment provides one.
pub const DEFAULT_SEED: u64 = 7;
/// Environment fallback consulted after the --seed flag and the config.
pub const SEED_ENV: &str = "ILORA_SEED";

const SAMPLE_MIX: u64 = 0x9E37_79B9_7F4A_7C15;
const EVAL_SALT: u64 = 0x6576_616c_0000_0001;
const INFER_SALT: u64 = 0x696e_6665_7200_0001;
const COMPARE_SALT: u64 = 0x636f_6d70_0000_0001;

/// Independent noise stream for one sample, stable under reordering.
fn sample_rng(seed: u64, salt: u64, index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ salt ^ (index as u64).wrapping_mul(SAMPLE_MIX))
}

#[derive(Parser, Debug)]
#[command(
    name = "ilora",
    version,
    about = "Latent interaction-graph adapters: synthetic data, training, graph inference, and cohort statistics"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a planted-graph synthetic dataset.
    Synth(CommonArgs),
    /// Train on a dataset and save the best-validation checkpoint.
    Train(DataArgs),
    /// Score a checkpoint on a dataset split.
    Eval(CheckpointArgs),
    /// Export the inferred interaction graph for a dataset split.
    InferGraph(CheckpointArgs),
    /// Build a reference edge set from a labeled abundance table.
    StatsRef(DataArgs),
    /// Score an exported edge list against a dataset's reference edges.
    Compare(CompareArgs),
    /// Verify analytic gradients against finite differences.
    Gradcheck(CommonArgs),
    /// Re-run generation and training across entity counts.
    SweepK(CommonArgs),
}

#[derive(Args, Debug)]
struct CommonArgs {
    /// JSON config file; built-in defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed override; precedence is flag, config, ILORA_SEED, then 7.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for artifacts and manifest.json.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct DataArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Input data file, overriding the config `data` entry.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CheckpointArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Dataset JSON, overriding the config `data` entry.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Checkpoint JSON from `train`, overriding the config entry.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CompareArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Dataset JSON providing entity ids and reference edges.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Edge-list CSV from `infer-graph`, overriding the config entry.
    #[arg(long)]
    edges: Option<PathBuf>,
}

/// Parses real process arguments; help and usage errors exit directly.
pub fn main_entry() -> i32 {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

/// Programmatic entry point used by tests; argument errors come back as
/// config errors instead of terminating the process.
pub fn run_from<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| Error::Config(e.to_string()))?;
    run(cli)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::InferGraph(args) => cmd_infer_graph(args),
        Command::StatsRef(args) => cmd_stats_ref(args),
        Command::Compare(args) => cmd_compare(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
        Command::SweepK(args) => cmd_sweep_k(args),
    }
}

// ---- shared plumbing ----

fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(7 + 64);
    out.push_str("sha256:");
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

fn hash_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path)?))
}

fn to_pretty<T: Serialize>(value: &T) -> Result<String> {
    Ok(format!("{}\n", serde_json::to_string_pretty(value)?))
}

fn resolve_seed(flag: Option<u64>, config: Option<u64>) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    if let Some(s) = config {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(raw) => raw
            .trim()
            .parse::<u64>()
            .map_err(|_| Error::Config(format!("{SEED_ENV} must be an unsigned integer, got {raw:?}"))),
        Err(std::env::VarError::NotPresent) => Ok(DEFAULT_SEED),
        Err(std::env::VarError::NotUnicode(_)) => {
            Err(Error::Config(format!("{SEED_ENV} holds non-unicode bytes")))
        }
    }
}

/// Loads a config file or falls back to defaults; returns the content hash
/// alongside so manifests can pin the exact bytes that were read.
fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<(T, Option<String>)> {
    match path {
        None => Ok((T::default(), None)),
        Some(p) => {
            let body = std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?;
            let cfg = serde_json::from_str(&body)
                .map_err(|e| Error::Config(format!("invalid config {}: {e}", p.display())))?;
            Ok((cfg, Some(sha256_hex(body.as_bytes()))))
        }
    }
}

fn resolve_input(flag: Option<PathBuf>, config: &Option<String>, flag_name: &str, command: &str) -> Result<PathBuf> {
    flag.or_else(|| config.as_ref().map(PathBuf::from)).ok_or_else(|| {
        Error::Config(format!(
            "{command} needs an input: pass --{flag_name} or set \"{flag_name}\" in the config"
        ))
    })
}

/// Collects artifact hashes while files are written, then seals the
/// manifest. Output keys are file names, never paths.
struct OutDir {
    dir: PathBuf,
    outputs: BTreeMap<String, String>,
}

impl OutDir {
    fn create(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(OutDir { dir: dir.to_path_buf(), outputs: BTreeMap::new() })
    }

    fn write(&mut self, name: &str, content: &str) -> Result<()> {
        std::fs::write(self.dir.join(name), content)?;
        self.outputs.insert(name.to_string(), sha256_hex(content.as_bytes()));
        Ok(())
    }

    /// Registers a file another writer already placed in the directory.
    fn add_existing(&mut self, name: &str) -> Result<()> {
        let hash = hash_file(&self.dir.join(name))?;
        self.outputs.insert(name.to_string(), hash);
        Ok(())
    }

    fn finish(
        self,
        command: &'static str,
        seed: u64,
        config: serde_json::Value,
        inputs: BTreeMap<&'static str, String>,
    ) -> Result<()> {
        let manifest = Manifest { command, seed, config, inputs, outputs: self.outputs };
        std::fs::write(self.dir.join("manifest.json"), to_pretty(&manifest)?)?;
        Ok(())
    }
}

#[derive(Serialize)]
struct Manifest {
    command: &'static str,
    seed: u64,
    /// Resolved configuration after flag overrides, with input paths
    /// blanked; the hashes under `inputs` identify those files instead.
    config: serde_json::Value,
    inputs: BTreeMap<&'static str, String>,
    outputs: BTreeMap<String, String>,
}

// ---- synth ----

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: Option<u64>,
    pub spec: SyntheticSpec,
}

fn cmd_synth(args: CommonArgs) -> Result<()> {
    let (cfg, cfg_hash) = load_config::<SynthConfig>(args.config.as_deref())?;
    let seed = resolve_seed(args.seed, cfg.seed)?;
    let dataset = gen_synthetic(&cfg.spec, seed)?;

    let mut out = OutDir::create(&args.out)?;
    dataset.save_json(&out.dir.join("dataset.json"))?;
    out.add_existing("dataset.json")?;

    let mut inputs = BTreeMap::new();
    if let Some(h) = cfg_hash {
        inputs.insert("config", h);
    }
    let echo = SynthConfig { seed: Some(seed), spec: cfg.spec };
    out.finish("synth", seed, serde_json::to_value(&echo)?, inputs)?;
    println!(
        "synth: {} train / {} val / {} test samples, {} entities, {} reference edges",
        dataset.train.len(),
        dataset.val.len(),
        dataset.test.len(),
        dataset.k(),
        dataset.reference_edges.len()
    );
    Ok(())
}

// ---- train ----

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainCliConfig {
    pub seed: Option<u64>,
    pub data: Option<String>,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

fn curve_csv(rows: &[CurveRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(format!("curve buffer flush failed: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::Data(format!("curve is not utf-8: {e}")))
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    best_epoch: usize,
    best_val_auroc: f64,
    epochs_run: usize,
    diverged: &'a Option<String>,
}

fn cmd_train(args: DataArgs) -> Result<()> {
    let (cfg, cfg_hash) = load_config::<TrainCliConfig>(args.common.config.as_deref())?;
    let seed = resolve_seed(args.common.seed, cfg.seed)?;
    let data_path = resolve_input(args.data, &cfg.data, "data", "train")?;

    let dataset = Dataset::load_json(&data_path)?;
    let train_set = dataset.labeled(Split::Train)?;
    let val_set = dataset.labeled(Split::Val)?;
    let mut model = Model::new(cfg.model.clone(), dataset.k(), seed)?;
    let report = train(&mut model, &train_set, &val_set, &cfg.train, seed)?;

    let mut out = OutDir::create(&args.common.out)?;
    save_checkpoint(&model, &out.dir.join("checkpoint.json"))?;
    out.add_existing("checkpoint.json")?;
    out.write("curve.csv", &curve_csv(&report.curve)?)?;
    let summary = TrainSummary {
        best_epoch: report.best_epoch,
        best_val_auroc: report.best_val_auroc,
        epochs_run: report.curve.len(),
        diverged: &report.diverged,
    };
    out.write("report.json", &to_pretty(&summary)?)?;

    let mut inputs = BTreeMap::new();
    if let Some(h) = cfg_hash {
        inputs.insert("config", h);
    }
    inputs.insert("data", hash_file(&data_path)?);
    let echo = TrainCliConfig { seed: Some(seed), data: None, model: cfg.model, train: cfg.train };
    out.finish("train", seed, serde_json::to_value(&echo)?, inputs)?;
    println!(
        "train: best val auroc {:.4} at epoch {} ({} epochs run{})",
        report.best_val_auroc,
        report.best_epoch,
        report.curve.len(),
        if report.diverged.is_some() { ", stopped early" } else { "" }
    );
    Ok(())
}

// ---- eval ----

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalCliConfig {
    pub seed: Option<u64>,
    pub data: Option<String>,
    pub checkpoint: Option<String>,
    pub split: Split,
    /// Monte Carlo draws marginalized per prediction.
    pub draws: usize,
    /// Calibration histogram bins.
    pub bins: usize,
    /// Edges kept when scoring graph recovery; entity count minus one when
    /// unset.
    pub err_topk: Option<usize>,
    /// Skip graph scoring even when reference edges exist.
    pub skip_graph: bool,
}

impl Default for EvalCliConfig {
    fn default() -> Self {
        EvalCliConfig {
            seed: None,
            data: None,
            checkpoint: None,
            split: Split::Test,
            draws: 16,
            bins: 10,
            err_topk: None,
            skip_graph: false,
        }
    }
}

/// Scores one split: marginalized predictions for the classification
/// metrics plus, when a reference exists and the model carries a graph,
/// the mean top-k recovery error.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_split(
    model: &Model,
    dataset: &Dataset,
    split: Split,
    draws: usize,
    bins: usize,
    err_topk: Option<usize>,
    skip_graph: bool,
    seed: u64,
) -> Result<MetricsReport> {
    let samples = dataset.labeled(split)?;
    if samples.is_empty() {
        return Err(Error::Data(format!("split {split:?} is empty")));
    }
    if model.input_dim != dataset.k() {
        return Err(Error::Data(format!(
            "checkpoint expects {} entities, dataset has {}",
            model.input_dim,
            dataset.k()
        )));
    }
    let cohort = dataset.split(split);
    let reference = dataset.reference_set();
    let want_graph = !skip_graph
        && (!reference.is_empty() || cohort.iter().any(|s| s.planted_edges.is_some()))
        && model.cfg.adapter == AdapterMode::Generated;
    let k_sel = err_topk.unwrap_or_else(|| (dataset.k() - 1).max(1));
    let universe = total_pairs(dataset.k());

    let mut records = Vec::with_capacity(samples.len());
    let mut errs = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        let mut rng = sample_rng(seed, EVAL_SALT, i);
        let (pred, adjacency) = model.predict_with_graph(&s.profile, draws, &mut rng)?;
        records.push(PredictionRecord::new(pred.prob_positive, s.label)?);
        if want_graph {
            // Per-sample graphs are scored against the cohort reference; a
            // sample's own realized graph is the fallback when no cohort
            // reference exists.
            let own: Option<BTreeSet<(usize, usize)>> = if reference.is_empty() {
                cohort[i].planted_edges.as_ref().map(|e| e.iter().copied().collect())
            } else {
                None
            };
            let gt = own.as_ref().unwrap_or(&reference);
            if gt.is_empty() || gt.len() >= universe {
                continue;
            }
            let adjacency = adjacency.ok_or_else(|| Error::Data("graph scoring needs sampled adjacencies".into()))?;
            let ranked = symmetrize_topk(&adjacency, k_sel)?;
            errs.push(err_at_k(gt, &ranked.topk_pairs(), universe)?);
        }
    }
    let err = if errs.is_empty() {
        None
    } else {
        Some(errs.iter().sum::<f64>() / errs.len() as f64)
    };
    MetricsReport::from_records(&records, err, dataset.k(), draws, seed, bins)
}

fn cmd_eval(args: CheckpointArgs) -> Result<()> {
    let (cfg, cfg_hash) = load_config::<EvalCliConfig>(args.common.config.as_deref())?;
    let seed = resolve_seed(args.common.seed, cfg.seed)?;
    let data_path = resolve_input(args.data, &cfg.data, "data", "eval")?;
    let ckpt_path = resolve_input(args.checkpoint, &cfg.checkpoint, "checkpoint", "eval")?;

    let dataset = Dataset::load_json(&data_path)?;
    let model = load_checkpoint(&ckpt_path)?;
    let metrics = evaluate_split(
        &model,
        &dataset,
        cfg.split,
        cfg.draws,
        cfg.bins,
        cfg.err_topk,
        cfg.skip_graph,
        seed,
    )?;

    let mut out = OutDir::create(&args.common.out)?;
    out.write("metrics.json", &to_pretty(&metrics)?)?;

    let mut inputs = BTreeMap::new();
    if let Some(h) = cfg_hash {
        inputs.insert("config", h);
    }
    inputs.insert("data", hash_file(&data_path)?);
    inputs.insert("checkpoint", hash_file(&ckpt_path)?);
    let echo = EvalCliConfig { seed: Some(seed), data: None, checkpoint: None, ..cfg };
    out.finish("eval", seed, serde_json::to_value(&echo)?, inputs)?;
    print!("{}", metrics.render_table());
    Ok(())
}

// ---- infer-graph ----

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferGraphCliConfig {
    pub seed: Option<u64>,
    pub data: Option<String>,
    pub checkpoint: Option<String>,
    pub split: Split,
    /// Adjacency draws averaged per sample.
    pub draws: usize,
    /// Edges marked as kept in the export; entity count minus one when
    /// unset.
    pub topk: Option<usize>,
    /// Export a single sample's graph instead of the split mean.
    pub sample_index: Option<usize>,
}

impl Default for InferGraphCliConfig {
    fn default() -> Self {
        InferGraphCliConfig {
            seed: None,
            data: None,
            checkpoint: None,
            split: Split::Test,
            draws: 16,
            topk: None,
            sample_index: None,
        }
    }
}

fn cmd_infer_graph(args: CheckpointArgs) -> Result<()> {
    let (cfg, cfg_hash) = load_config::<InferGraphCliConfig>(args.common.config.as_deref())?;
    let seed = resolve_seed(args.common.seed, cfg.seed)?;
    let data_path = resolve_input(args.data, &cfg.data, "data", "infer-graph")?;
    let ckpt_path = resolve_input(args.checkpoint, &cfg.checkpoint, "checkpoint", "infer-graph")?;

    let dataset = Dataset::load_json(&data_path)?;
    let model = load_checkpoint(&ckpt_path)?;
    if model.input_dim != dataset.k() {
        return Err(Error::Data(format!(
            "checkpoint expects {} entities, dataset has {}",
            model.input_dim,
            dataset.k()
        )));
    }
    let samples = dataset.labeled(cfg.split)?;
    if samples.is_empty() {
        return Err(Error::Data(format!("split {:?} is empty", cfg.split)));
    }
    let chosen: Vec<(usize, &LabeledSample)> = match cfg.sample_index {
        Some(i) => {
            let s = samples
                .get(i)
                .ok_or_else(|| Error::arg(format!("sample_index {i} outside split of {}", samples.len())))?;
            vec![(i, s)]
        }
        None => samples.iter().enumerate().collect(),
    };

    let mut mean = Tensor::zeros(dataset.k(), dataset.k());
    let mut single_posterior = None;
    for &(i, s) in &chosen {
        let mut rng = sample_rng(seed, INFER_SALT, i);
        let lg = model.infer_graph(&s.profile, cfg.draws, &mut rng)?;
        mean.add_scaled(&lg.adjacency, 1.0 / chosen.len() as f64)?;
        if cfg.sample_index.is_some() {
            single_posterior = Some(lg.posteriors);
        }
    }
    // Symmetrized view, matching the exported ranking.
    let mut sym = Tensor::zeros(dataset.k(), dataset.k());
    for i in 0..dataset.k() {
        for j in 0..dataset.k() {
            sym.set(i, j, 0.5 * (mean.get(i, j) + mean.get(j, i)));
        }
    }
    let k_sel = cfg.topk.unwrap_or_else(|| (dataset.k() - 1).max(1));
    let ranked = symmetrize_topk(&mean, k_sel)?;

    let mut out = OutDir::create(&args.common.out)?;
    out.write("edges.csv", &export_edge_csv(&ranked, &dataset.entity_ids)?)?;
    out.write("adjacency.csv", &export_adjacency_csv(&sym, &dataset.entity_ids)?)?;
    out.write("graph.dot", &export_dot(&ranked, &dataset.entity_ids)?)?;
    if let Some(post) = single_posterior {
        out.write("posterior.json", &to_pretty(&post)?)?;
    }

    let mut inputs = BTreeMap::new();
    if let Some(h) = cfg_hash {
        inputs.insert("config", h);
    }
    inputs.insert("data", hash_file(&data_path)?);
    inputs.insert("checkpoint", hash_file(&ckpt_path)?);
    let echo = InferGraphCliConfig { seed: Some(seed), data: None, checkpoint: None, ..cfg };
    out.finish("infer-graph", seed, serde_json::to_value(&echo)?, inputs)?;
    println!(
        "infer-graph: {} samples averaged, top {} of {} pairs marked",
        chosen.len(),
        k_sel,
        ranked.edges.len()
    );
    Ok(())
}

// ---- stats-ref ----

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StatsRefCliConfig {
    pub seed: Option<u64>,
    /// Abundance CSV: sample_id, optional label column, entity columns.
    pub data: Option<String>,
    /// Restrict to the top K entities by variance before screening.
    pub select_k: Option<usize>,
    pub pseudocount: f64,
    pub fdr: f64,
}

impl Default for StatsRefCliConfig {
    fn default() -> Self {
        StatsRefCliConfig { seed: None, data: None, select_k: None, pseudocount: 1e-6, fdr: 0.05 }
    }
}

#[derive(Serialize)]
struct StatsRefOutput {
    entity_ids: Vec<String>,
    n_samples: usize,
    q_threshold: f64,
    pseudocount: f64,
    screens: Vec<PairScreen>,
    /// Index pairs into entity_ids passing both screens.
    edges: Vec<(usize, usize)>,
    edge_names: Vec<(String, String)>,
}

fn cmd_stats_ref(args: DataArgs) -> Result<()> {
    let (cfg, cfg_hash) = load_config::<StatsRefCliConfig>(args.common.config.as_deref())?;
    let seed = resolve_seed(args.common.seed, cfg.seed)?;
    let data_path = resolve_input(args.data, &cfg.data, "data", "stats-ref")?;

    let (table, warnings) = load_abundance(&data_path)?;
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    let labels = table
        .labels
        .clone()
        .ok_or_else(|| Error::Data("abundance table has no label column".into()))?;
    let columns: Vec<usize> = match cfg.select_k {
        Some(k) => select_entities(&table, k)?,
        None => (0..table.k()).collect(),
    };
    let rows: Vec<Vec<f64>> = table
        .rows
        .iter()
        .map(|r| columns.iter().map(|&c| r[c]).collect())
        .collect();
    let names: Vec<String> = columns.iter().map(|&c| table.entity_ids[c].clone()).collect();

    let result = build_reference(&rows, &labels, cfg.pseudocount, cfg.fdr)?;
    let edges: Vec<(usize, usize)> = result.edges.iter().copied().collect();
    let edge_names = edges.iter().map(|&(i, j)| (names[i].clone(), names[j].clone())).collect();
    let output = StatsRefOutput {
        entity_ids: names,
        n_samples: rows.len(),
        q_threshold: cfg.fdr,
        pseudocount: cfg.pseudocount,
        screens: result.screens,
        edges,
        edge_names,
    };

    let mut out = OutDir::create(&args.common.out)?;
    out.write("reference.json", &to_pretty(&output)?)?;

    let mut inputs = BTreeMap::new();
    if let Some(h) = cfg_hash {
        inputs.insert("config", h);
    }
    inputs.insert("data", hash_file(&data_path)?);
    let echo = StatsRefCliConfig { seed: Some(seed), data: None, ..cfg };
    out.finish("stats-ref", seed, serde_json::to_value(&echo)?, inputs)?;
    println!(
        "stats-ref: {} pairs screened, {} reference edges at q < {}",
        output.screens.len(),
        output.edges.len(),
        cfg.fdr
    );
    Ok(())
}

// ---- compare ----

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareCliConfig {
    pub seed: Option<u64>,
    pub data: Option<String>,
    pub edges: Option<String>,
    /// Edges scored as the prediction; the file's kept marks when unset.
    pub k: Option<usize>,
    /// Monte Carlo trials for the random-selection baseline.
    pub trials: usize,
}

impl Default for CompareCliConfig {
    fn default() -> Self {
        CompareCliConfig { seed: None, data: None, edges: None, k: None, trials: 100_000 }
    }
}

#[derive(Serialize)]
struct ComparisonReport {
    err_at_k: f64,
    random_baseline: f64,
    k: usize,
    gt_size: usize,
    total_pairs: usize,
    trials: usize,
    seed: u64,
}

/// Reads an exported edge list back into index pairs, in file order.
fn parse_edge_csv(path: &Path, ids: &[String]) -> Result<Vec<(usize, usize, bool)>> {
    let index: BTreeMap<&str, usize> = ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let headers = reader.headers()?.clone();
    let expected = ["entity_i", "entity_j", "weight", "in_topk"];
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(Error::Data(format!("edge csv header {:?}, expected {expected:?}", headers)));
    }
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record?;
        let lookup = |name: &str| -> Result<usize> {
            index
                .get(name)
                .copied()
                .ok_or_else(|| Error::Data(format!("edge csv names unknown entity {name:?}")))
        };
        let i = lookup(&record[0])?;
        let j = lookup(&record[1])?;
        let kept = match &record[3] {
            "true" => true,
            "false" => false,
            other => return Err(Error::Data(format!("in_topk must be true or false, got {other:?}"))),
        };
        let (a, b) = if i <= j { (i, j) } else { (j, i) };
        rows.push((a, b, kept));
    }
    Ok(rows)
}

fn cmd_compare(args: CompareArgs) -> Result<()> {
    let (cfg, cfg_hash) = load_config::<CompareCliConfig>(args.common.config.as_deref())?;
    let seed = resolve_seed(args.common.seed, cfg.seed)?;
    let data_path = resolve_input(args.data, &cfg.data, "data", "compare")?;
    let edges_path = resolve_input(args.edges, &cfg.edges, "edges", "compare")?;

    let dataset = Dataset::load_json(&data_path)?;
    let gt = dataset.reference_set();
    if gt.is_empty() {
        return Err(Error::Data("dataset carries no reference edges to compare against".into()));
    }
    let rows = parse_edge_csv(&edges_path, &dataset.entity_ids)?;
    let predicted: BTreeSet<(usize, usize)> = match cfg.k {
        // The file is strongest-first, so the top of the file is the top-k.
        Some(k) => {
            if k == 0 || k > rows.len() {
                return Err(Error::arg(format!("k must be in [1, {}], got {k}", rows.len())));
            }
            rows.iter().take(k).map(|&(i, j, _)| (i, j)).collect()
        }
        None => rows.iter().filter(|r| r.2).map(|&(i, j, _)| (i, j)).collect(),
    };
    if predicted.is_empty() {
        return Err(Error::Data("edge list marks no edges as kept".into()));
    }
    let universe = total_pairs(dataset.k());
    let err = err_at_k(&gt, &predicted, universe)?;
    let k = predicted.len();
    let baseline = random_baseline_err(universe, gt.len(), k, cfg.trials, seed ^ COMPARE_SALT)?;
    let report = ComparisonReport {
        err_at_k: err,
        random_baseline: baseline,
        k,
        gt_size: gt.len(),
        total_pairs: universe,
        trials: cfg.trials,
        seed,
    };

    let mut out = OutDir::create(&args.common.out)?;
    out.write("comparison.json", &to_pretty(&report)?)?;

    let mut inputs = BTreeMap::new();
    if let Some(h) = cfg_hash {
        inputs.insert("config", h);
    }
    inputs.insert("data", hash_file(&data_path)?);
    inputs.insert("edges", hash_file(&edges_path)?);
    let echo = CompareCliConfig { seed: Some(seed), data: None, edges: None, ..cfg };
    out.finish("compare", seed, serde_json::to_value(&echo)?, inputs)?;
    println!("compare: err@{k} = {err:.4}, random baseline {baseline:.4}");
    Ok(())
}

// ---- gradcheck ----

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradCheckCliConfig {
    pub seed: Option<u64>,
    pub spec: SyntheticSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub batch_size: usize,
    /// Smooth coordinates required before the check stops.
    pub min_smooth: usize,
    pub step: f64,
    /// Largest tolerated relative error; exceeding it fails the command.
    pub tolerance: f64,
}

impl Default for GradCheckCliConfig {
    fn default() -> Self {
        GradCheckCliConfig {
            seed: None,
            spec: SyntheticSpec {
                n_entities: 8,
                n_blocks: 2,
                n_train: 8,
                n_val: 2,
                n_test: 2,
                ..SyntheticSpec::default()
            },
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            batch_size: 4,
            min_smooth: 200,
            step: 1e-5,
            tolerance: 1e-3,
        }
    }
}

fn cmd_gradcheck(args: CommonArgs) -> Result<()> {
    let (cfg, cfg_hash) = load_config::<GradCheckCliConfig>(args.config.as_deref())?;
    let seed = resolve_seed(args.seed, cfg.seed)?;
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }

    let dataset = gen_synthetic(&cfg.spec, seed)?;
    let train_set = dataset.labeled(Split::Train)?;
    let batch: Vec<&LabeledSample> = train_set.iter().take(cfg.batch_size).collect();
    let model = Model::new(cfg.model.clone(), dataset.k(), seed)?;
    let report = grad_check(&model, &batch, &cfg.train, cfg.min_smooth, cfg.step, seed)?;

    let mut out = OutDir::create(&args.out)?;
    out.write("gradcheck.json", &to_pretty(&report)?)?;

    let mut inputs = BTreeMap::new();
    if let Some(h) = cfg_hash {
        inputs.insert("config", h);
    }
    let echo = GradCheckCliConfig { seed: Some(seed), ..cfg.clone() };
    out.finish("gradcheck", seed, serde_json::to_value(&echo)?, inputs)?;
    println!(
        "gradcheck: {} smooth coordinates ({} skipped), max rel err {:.3e}, mean {:.3e}",
        report.checked, report.skipped, report.max_rel_err, report.mean_rel_err
    );
    if report.max_rel_err > cfg.tolerance {
        return Err(Error::Data(format!(
            "gradient check failed: max relative error {:.3e} exceeds tolerance {:.1e}",
            report.max_rel_err, cfg.tolerance
        )));
    }
    Ok(())
}

// ---- sweep-k ----

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepKCliConfig {
    pub seed: Option<u64>,
    pub k_values: Vec<usize>,
    pub spec: SyntheticSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub draws: usize,
    pub bins: usize,
}

impl Default for SweepKCliConfig {
    fn default() -> Self {
        SweepKCliConfig {
            seed: None,
            k_values: vec![8, 12, 16, 20],
            spec: SyntheticSpec::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            draws: 16,
            bins: 10,
        }
    }
}

#[derive(Serialize)]
struct SweepRow {
    k: usize,
    best_val_auroc: f64,
    test_auroc: f64,
    test_ece: f64,
    test_err_at_k: Option<f64>,
}

fn cmd_sweep_k(args: CommonArgs) -> Result<()> {
    let (cfg, cfg_hash) = load_config::<SweepKCliConfig>(args.config.as_deref())?;
    let seed = resolve_seed(args.seed, cfg.seed)?;
    if cfg.k_values.is_empty() {
        return Err(Error::Config("k_values must list at least one entity count".into()));
    }

    let mut rows = Vec::with_capacity(cfg.k_values.len());
    for &k in &cfg.k_values {
        let mut spec = cfg.spec.clone();
        spec.n_entities = k;
        let dataset = gen_synthetic(&spec, seed)?;
        let train_set = dataset.labeled(Split::Train)?;
        let val_set = dataset.labeled(Split::Val)?;
        let mut model = Model::new(cfg.model.clone(), k, seed)?;
        let report = train(&mut model, &train_set, &val_set, &cfg.train, seed)?;
        let metrics =
            evaluate_split(&model, &dataset, Split::Test, cfg.draws, cfg.bins, None, false, seed)?;
        println!(
            "sweep-k: k={k} val auroc {:.4}, test auroc {:.4}, ece {:.4}, err {}",
            report.best_val_auroc,
            metrics.auroc,
            metrics.ece,
            metrics.err_at_k.map_or("n/a".to_string(), |e| format!("{e:.4}"))
        );
        rows.push(SweepRow {
            k,
            best_val_auroc: report.best_val_auroc,
            test_auroc: metrics.auroc,
            test_ece: metrics.ece,
            test_err_at_k: metrics.err_at_k,
        });
    }

    let mut out = OutDir::create(&args.out)?;
    out.write("sweep.json", &to_pretty(&rows)?)?;
    let mut inputs = BTreeMap::new();
    if let Some(h) = cfg_hash {
        inputs.insert("config", h);
    }
    let echo = SweepKCliConfig { seed: Some(seed), ..cfg.clone() };
    out.finish("sweep-k", seed, serde_json::to_value(&echo)?, inputs)?;
    Ok(())
}
