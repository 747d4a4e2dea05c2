//! Losses, the AdamW optimizer, the three training strategies, and the
//! checkpointed, resumable training runner.

use crate::data::{batches, generate_modadd, load_mnist, BatchPlan};
use crate::error::{GrokError, Result};
use crate::metrics::{
    abelian_accuracy, abelian_logit_distance, argmax, forward_outputs, input_gradient_norm,
    perturbation_error, sharpness, weight_norm, EvalData, InfoParams, OwnedEval,
};
use crate::model::{
    mlp_forward, read_checkpoint, transformer_forward, write_checkpoint, MlpModel,
    Model, TransformerConfig, TransformerModel, SEQ_LEN,
};
use crate::runlog::{read_runlog, MetricRecord, RunLogWriter};
use crate::tensor::{NodeId, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Mnist,
    ModAdd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Standard,
    Perturb,
    Abelian,
}

/// Transformer/dataset knobs for the modular-addition task.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModAddConfig {
    pub p: usize,
    pub train_frac: f64,
    pub d_model: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub hidden: usize,
    pub layer_norm: bool,
}

impl Default for ModAddConfig {
    fn default() -> Self {
        let c = TransformerConfig::default();
        ModAddConfig {
            p: c.p,
            train_frac: 0.3,
            d_model: c.d_model,
            heads: c.heads,
            head_dim: c.head_dim,
            hidden: c.hidden,
            layer_norm: c.layer_norm,
        }
    }
}

impl ModAddConfig {
    pub fn transformer(&self) -> TransformerConfig {
        TransformerConfig {
            p: self.p,
            d_model: self.d_model,
            heads: self.heads,
            head_dim: self.head_dim,
            hidden: self.hidden,
            layer_norm: self.layer_norm,
            ..TransformerConfig::default()
        }
    }
}

/// MNIST file locations and split size.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct MnistConfig {
    pub images: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub train_count: Option<usize>,
}

/// Which metrics to log and with what knobs. Sigma defaults are per
/// task and resolved before the run starts.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricConfig {
    pub weight_norms: bool,
    pub sharpness: bool,
    pub sharpness_probes: usize,
    pub sharpness_fd_eps: f64,
    /// Examples used for the sharpness loss; 0 = full train set.
    pub sharpness_data_cap: usize,
    pub perturb_err: bool,
    pub perturb_err_sigma: Option<f64>,
    pub abelian: bool,
    pub input_grad_norm: bool,
    pub info: bool,
    pub info_sigma: Option<f64>,
    pub info_alpha: f64,
    pub info_batch_size: usize,
    /// Examples used for the information metrics; 0 = full train set.
    pub info_data_cap: usize,
}

impl Default for MetricConfig {
    fn default() -> Self {
        MetricConfig {
            weight_norms: true,
            sharpness: false,
            sharpness_probes: 4,
            sharpness_fd_eps: 1e-3,
            sharpness_data_cap: 512,
            perturb_err: false,
            perturb_err_sigma: None,
            abelian: false,
            input_grad_norm: false,
            info: false,
            info_sigma: None,
            info_alpha: 1.0,
            info_batch_size: 200,
            info_data_cap: 1000,
        }
    }
}

/// The full experiment configuration (TOML document).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub task: Task,
    pub strategy: Strategy,
    pub steps: u64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    /// Defaults per task: 1.0 (modadd), 0.01 (mnist).
    #[serde(default)]
    pub weight_decay: Option<f64>,
    /// Perturb schedule σ = max(λ1·(1−train_acc), λ2). Defaults per
    /// task: (0.5, 0.4) modadd, (0.06, 0.03) mnist.
    #[serde(default)]
    pub lambda1: Option<f64>,
    #[serde(default)]
    pub lambda2: Option<f64>,
    #[serde(default = "default_abelian_coeff")]
    pub abelian_coeff: f64,
    #[serde(default = "default_init_scale")]
    pub init_scale: f64,
    #[serde(default)]
    pub init_seed: u64,
    #[serde(default)]
    pub data_seed: u64,
    #[serde(default)]
    pub noise_seed: u64,
    #[serde(default = "default_log_every")]
    pub log_every: u64,
    /// Checkpoint cadence in steps; 0 = final checkpoint only.
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: u64,
    #[serde(default)]
    pub modadd: ModAddConfig,
    #[serde(default)]
    pub mnist: MnistConfig,
    #[serde(default)]
    pub metrics: MetricConfig,
}

fn default_batch_size() -> usize {
    200
}
fn default_lr() -> f64 {
    1e-3
}
fn default_abelian_coeff() -> f64 {
    100.0
}
fn default_init_scale() -> f64 {
    1.0
}
fn default_log_every() -> u64 {
    100
}
fn default_checkpoint_every() -> u64 {
    1000
}

impl TrainConfig {
    /// Fill task-dependent defaults and check cross-field invariants.
    pub fn resolve(&mut self) -> Result<()> {
        let (wd, l1, l2, info_sigma, pe_sigma) = match self.task {
            Task::ModAdd => (1.0, 0.5, 0.4, 0.4, 0.04),
            Task::Mnist => (0.01, 0.06, 0.03, 0.1, 0.04),
        };
        self.weight_decay.get_or_insert(wd);
        self.lambda1.get_or_insert(l1);
        self.lambda2.get_or_insert(l2);
        self.metrics.info_sigma.get_or_insert(info_sigma);
        self.metrics.perturb_err_sigma.get_or_insert(pe_sigma);
        if self.task == Task::Mnist {
            self.mnist.train_count.get_or_insert(1000);
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(GrokError::Config(msg));
        let l1 = self.lambda1.unwrap_or(0.0);
        let l2 = self.lambda2.unwrap_or(0.0);
        if !(l1 >= l2 && l2 >= 0.0) {
            return bad(format!("need lambda1 >= lambda2 >= 0, got {l1} and {l2}"));
        }
        if self.abelian_coeff < 0.0 {
            return bad("abelian_coeff must be >= 0".into());
        }
        if self.strategy == Strategy::Abelian && self.task != Task::ModAdd {
            return bad("the abelian strategy is only valid for the modadd task".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.learning_rate <= 0.0 {
            return bad("learning_rate must be > 0".into());
        }
        if self.weight_decay.unwrap_or(0.0) < 0.0 {
            return bad("weight_decay must be >= 0".into());
        }
        if self.log_every == 0 {
            return bad("log_every must be >= 1".into());
        }
        if self.init_scale <= 0.0 {
            return bad("init_scale must be > 0".into());
        }
        if self.task == Task::Mnist && (self.mnist.images.is_none() || self.mnist.labels.is_none())
        {
            return bad("mnist task needs mnist.images and mnist.labels paths".into());
        }
        Ok(())
    }
}

/// (1/2B)·Σᵢ‖scoresᵢ − onehot(yᵢ)‖², built on the tape.
pub fn mse_onehot_loss(tape: &mut Tape, scores: NodeId, labels: &[usize]) -> Result<NodeId> {
    let (b, c) = tape.shape(scores);
    if labels.len() != b {
        return Err(GrokError::ShapeMismatch {
            op: "mse_onehot_loss",
            left: vec![b],
            right: vec![labels.len()],
        });
    }
    let mut onehot = vec![0.0; b * c];
    for (i, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(GrokError::LabelOutOfRange { label: y, classes: c });
        }
        onehot[i * c + y] = 1.0;
    }
    let target = tape.leaf_matrix(b, c, onehot, false)?;
    let diff = tape.sub(scores, target)?;
    let sq = tape.sum_squares(diff)?;
    tape.scale(sq, 1.0 / (2.0 * b as f64))
}

/// Mean cross-entropy over the batch (stable log-sum-exp tape op).
pub fn cross_entropy_loss(tape: &mut Tape, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
    tape.cross_entropy_mean(logits, labels)
}

/// AdamW moment buffers over the flat parameter vector.
#[derive(Debug, Clone)]
pub struct AdamWState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamWState {
    pub fn new(dim: usize) -> Self {
        AdamWState {
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One decoupled-decay AdamW update in place:
/// θ ← θ·(1 − lr·wd) − lr·m̂/(√v̂ + ε).
pub fn adamw_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamWState,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(GrokError::ShapeMismatch {
            op: "adamw_step",
            left: vec![params.len()],
            right: vec![grads.len()],
        });
    }
    state.t += 1;
    let bc1 = 1.0 - state.beta1.powi(state.t as i32);
    let bc2 = 1.0 - state.beta2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] = params[i] * (1.0 - lr * weight_decay) - lr * m_hat / (v_hat.sqrt() + state.eps);
        if !params[i].is_finite() {
            return Err(GrokError::NonFinite {
                op: "adamw_step",
                index: i,
            });
        }
    }
    Ok(())
}

/// Adaptive perturbation scale σ = max(λ1·(1 − train_acc), λ2).
pub fn perturb_sigma(train_acc: f64, lambda1: f64, lambda2: f64) -> f64 {
    (lambda1 * (1.0 - train_acc)).max(lambda2)
}

/// Batch views handed to one training step.
pub enum TrainBatch<'a> {
    ModAdd {
        pairs: &'a [(usize, usize)],
        labels: &'a [usize],
    },
    Mnist {
        /// b×dim row-major pixels.
        images: &'a [f64],
        dim: usize,
        labels: &'a [usize],
    },
}

impl TrainBatch<'_> {
    fn len(&self) -> usize {
        match self {
            TrainBatch::ModAdd { labels, .. } | TrainBatch::Mnist { labels, .. } => labels.len(),
        }
    }
}

/// One forward/backward/optimizer step. `sigma` is the perturbation
/// scale (0 for the standard and abelian strategies); `abelian_coeff`
/// adds the symmetry regularizer when positive. Returns the total loss.
#[allow(clippy::too_many_arguments)]
pub fn training_step(
    model: &mut Model,
    batch: &TrainBatch,
    sigma: f64,
    abelian_coeff: f64,
    state: &mut AdamWState,
    lr: f64,
    weight_decay: f64,
    noise_rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let b = batch.len();
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, true)?;
    let loss = match (&*model, batch) {
        (Model::Mlp(m), TrainBatch::Mnist { images, dim, labels }) => {
            let mut pixels = images.to_vec();
            if sigma > 0.0 {
                let mut normal = box_muller();
                for v in pixels.iter_mut() {
                    *v += sigma * normal(noise_rng);
                }
            }
            let x = tape.leaf_matrix(b, *dim, pixels, false)?;
            let out = mlp_forward(&mut tape, m, &bound, x)?;
            mse_onehot_loss(&mut tape, out.scores, labels)?
        }
        (Model::Transformer(t), TrainBatch::ModAdd { pairs, labels }) => {
            let noise_node = if sigma > 0.0 {
                let rows = b * SEQ_LEN;
                let mut normal = box_muller();
                let block: Vec<f64> = (0..rows * t.cfg.d_model)
                    .map(|_| sigma * normal(noise_rng))
                    .collect();
                Some(tape.leaf_matrix(rows, t.cfg.d_model, block, false)?)
            } else {
                None
            };
            let out = transformer_forward(&mut tape, t, &bound, pairs, noise_node)?;
            let base = cross_entropy_loss(&mut tape, out.logits, labels)?;
            if abelian_coeff > 0.0 {
                let swapped: Vec<(usize, usize)> = pairs.iter().map(|&(x, y)| (y, x)).collect();
                let rev = transformer_forward(&mut tape, t, &bound, &swapped, None)?;
                let diff = tape.sub(out.logits, rev.logits)?;
                let sq = tape.sum_squares(diff)?;
                let reg = tape.scale(sq, abelian_coeff / b as f64)?;
                tape.add(base, reg)?
            } else {
                base
            }
        }
        _ => {
            return Err(GrokError::InvalidArgument(
                "model kind does not match batch kind".into(),
            ))
        }
    };
    tape.backward(loss)?;
    let loss_value = tape.value(loss)[0];
    let mut flat = model.flatten();
    let mut grads = vec![0.0; flat.len()];
    let mut off = 0;
    for &id in &bound {
        let (r, c) = tape.shape(id);
        if let Some(g) = tape.grad(id) {
            grads[off..off + r * c].copy_from_slice(g);
        }
        off += r * c;
    }
    adamw_step(&mut flat, &grads, state, lr, weight_decay)?;
    model.load_flat(&flat)?;
    Ok(loss_value)
}

// Box-Muller standard normals; keeps the per-step noise stream
// self-contained and reproducible.
fn box_muller() -> impl FnMut(&mut ChaCha8Rng) -> f64 {
    use rand::Rng;
    let mut cache: Option<f64> = None;
    move |rng| {
        if let Some(v) = cache.take() {
            return v;
        }
        let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        cache = Some(r * theta.sin());
        r * theta.cos()
    }
}

/// Fraction of examples whose argmax output matches the label.
pub fn dataset_accuracy(model: &Model, data: &EvalData) -> Result<f64> {
    let out = forward_outputs(model, data)?;
    let (n, c) = out.matrix_dims();
    let labels = data.labels();
    let mut hits = 0usize;
    for i in 0..n {
        if argmax(&out.data()[i * c..(i + 1) * c]) == labels[i] {
            hits += 1;
        }
    }
    Ok(hits as f64 / n as f64)
}

/// Full-dataset task loss computed directly from outputs (no tape).
pub fn dataset_loss(model: &Model, data: &EvalData) -> Result<f64> {
    let out = forward_outputs(model, data)?;
    let (n, c) = out.matrix_dims();
    let labels = data.labels();
    let mut total = 0.0;
    match data {
        EvalData::Mnist { .. } => {
            for i in 0..n {
                for j in 0..c {
                    let target = if j == labels[i] { 1.0 } else { 0.0 };
                    let d = out.data()[i * c + j] - target;
                    total += d * d;
                }
            }
            Ok(total / (2.0 * n as f64))
        }
        EvalData::ModAdd { .. } => {
            for i in 0..n {
                let row = &out.data()[i * c..(i + 1) * c];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                total += lse - row[labels[i]];
            }
            Ok(total / n as f64)
        }
    }
}

/// Everything the runner needs in memory for one task.
pub struct TaskData {
    pub train: OwnedEval,
    pub test: OwnedEval,
}

/// Load/generate the dataset named by the config.
pub fn load_task_data(cfg: &TrainConfig) -> Result<TaskData> {
    match cfg.task {
        Task::ModAdd => {
            let ds = generate_modadd(cfg.modadd.p, cfg.modadd.train_frac, cfg.data_seed)?;
            Ok(TaskData {
                train: OwnedEval::ModAdd {
                    pairs: ds.pairs_at(&ds.train_indices),
                    labels: ds.labels_at(&ds.train_indices),
                },
                test: OwnedEval::ModAdd {
                    pairs: ds.pairs_at(&ds.test_indices),
                    labels: ds.labels_at(&ds.test_indices),
                },
            })
        }
        Task::Mnist => {
            let images = cfg.mnist.images.as_ref().ok_or_else(|| {
                GrokError::Config("mnist.images path missing".into())
            })?;
            let labels = cfg.mnist.labels.as_ref().ok_or_else(|| {
                GrokError::Config("mnist.labels path missing".into())
            })?;
            let count = cfg.mnist.train_count.unwrap_or(1000);
            let ds = load_mnist(images, labels, count, cfg.data_seed)?;
            let dim = ds.dim();
            Ok(TaskData {
                train: OwnedEval::Mnist {
                    images: ds.image_batch(&ds.train_indices),
                    dim,
                    labels: ds.labels_at(&ds.train_indices),
                },
                test: OwnedEval::Mnist {
                    images: ds.image_batch(&ds.test_indices),
                    dim,
                    labels: ds.labels_at(&ds.test_indices),
                },
            })
        }
    }
}

/// Fresh model for the config's task.
pub fn init_model(cfg: &TrainConfig) -> Model {
    match cfg.task {
        Task::Mnist => Model::Mlp(MlpModel::init(cfg.init_seed, cfg.init_scale)),
        Task::ModAdd => Model::Transformer(TransformerModel::init(
            &cfg.modadd.transformer(),
            cfg.init_seed,
            cfg.init_scale,
        )),
    }
}

/// Evaluate accuracies plus every enabled metric on frozen weights.
pub fn evaluate_record(
    cfg: &TrainConfig,
    model: &Model,
    data: &TaskData,
    step: u64,
    train_loss: f64,
    train_acc: f64,
    test_acc: f64,
) -> Result<MetricRecord> {
    let m = &cfg.metrics;
    let mut rec = MetricRecord::new(step);
    rec.insert("train_loss", train_loss)?;
    rec.insert("train_acc", train_acc)?;
    rec.insert("test_acc", test_acc)?;
    if m.weight_norms {
        rec.insert("weight_l2", weight_norm(model, 2))?;
        rec.insert("weight_l1", weight_norm(model, 1))?;
    }
    if m.sharpness {
        let capped = data.train.capped(m.sharpness_data_cap);
        rec.insert(
            "sharpness",
            sharpness(
                model,
                &capped.view(),
                m.sharpness_probes,
                m.sharpness_fd_eps,
                cfg.noise_seed,
            )?,
        )?;
    }
    if m.perturb_err {
        let sigma = m.perturb_err_sigma.unwrap_or(0.04);
        rec.insert(
            "perturb_err",
            perturbation_error(model, &data.train.view(), sigma, cfg.noise_seed)?,
        )?;
    }
    if m.abelian {
        let pairs_of = |d: &OwnedEval| match d {
            OwnedEval::ModAdd { pairs, .. } => Ok(pairs.clone()),
            _ => Err(GrokError::InvalidArgument(
                "abelian metrics need modadd data".into(),
            )),
        };
        let train_pairs = pairs_of(&data.train)?;
        let test_pairs = pairs_of(&data.test)?;
        rec.insert("abelian_acc_train", abelian_accuracy(model, &train_pairs)?)?;
        rec.insert("abelian_acc_test", abelian_accuracy(model, &test_pairs)?)?;
        rec.insert(
            "abelian_logit_dist",
            abelian_logit_distance(model, &train_pairs)?,
        )?;
    }
    if m.input_grad_norm {
        let capped = data.train.capped(m.sharpness_data_cap);
        rec.insert("input_grad_norm", input_gradient_norm(model, &capped.view())?)?;
    }
    if m.info {
        let capped = data.train.capped(m.info_data_cap);
        let params = InfoParams {
            sigma: m.info_sigma.unwrap_or(0.1),
            alpha: m.info_alpha,
            batch_size: m.info_batch_size,
            noise_seed: cfg.noise_seed,
        };
        let view = capped.view();
        rec.insert("pmi", crate::metrics::pmi(model, &view, &params)?)?;
        rec.insert("pe", crate::metrics::pe(model, &view, &params)?)?;
        rec.insert("mid", crate::metrics::mid(model, &view, &params)?)?;
        rec.insert("ed", crate::metrics::ed(model, &view, &params)?)?;
        rec.insert(
            "pmi_labels",
            crate::metrics::pmi_labels(model, &view, &params)?,
        )?;
    }
    Ok(rec)
}

fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("step-{step:08}.ckpt"))
}

fn log_path(dir: &Path) -> PathBuf {
    dir.join("run.jsonl")
}

/// Serialize weights + optimizer + step meta into one checkpoint file.
fn save_state(
    dir: &Path,
    step: u64,
    model: &Model,
    state: &AdamWState,
    last_train_acc: f64,
) -> Result<()> {
    let mut entries: Vec<(String, Tensor)> = model
        .params()
        .into_iter()
        .map(|(n, t)| (n, t.clone()))
        .collect();
    let dim = state.m.len();
    entries.push(("adamw.m".into(), Tensor::new(vec![1, dim], state.m.clone())?));
    entries.push(("adamw.v".into(), Tensor::new(vec![1, dim], state.v.clone())?));
    entries.push(("meta.step".into(), Tensor::scalar(step as f64)));
    entries.push(("meta.last_train_acc".into(), Tensor::scalar(last_train_acc)));
    write_checkpoint(&checkpoint_path(dir, step), model.arch().tag(), &entries)
}

/// Find the highest-step checkpoint in a run directory.
pub fn latest_checkpoint(dir: &Path) -> Result<Option<(u64, PathBuf)>> {
    let mut best: Option<(u64, PathBuf)> = None;
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        if let Some(step) = name
            .strip_prefix("step-")
            .and_then(|s| s.strip_suffix(".ckpt"))
            .and_then(|s| s.parse::<u64>().ok())
        {
            if best.as_ref().is_none_or(|(b, _)| step > *b) {
                best = Some((step, path));
            }
        }
    }
    Ok(best)
}

/// Load model weights, optimizer moments, and step meta from a
/// checkpoint, verifying the architecture tag.
pub fn restore_state(
    path: &Path,
    cfg: &TrainConfig,
) -> Result<(Model, AdamWState, u64, f64)> {
    let (tag, entries) = read_checkpoint(path)?;
    let mut model = init_model(cfg);
    if tag != model.arch().tag() {
        return Err(GrokError::Checkpoint(format!(
            "architecture mismatch: checkpoint is '{tag}', config wants '{}'",
            model.arch().tag()
        )));
    }
    let mut state = AdamWState::new(model.param_count());
    let mut step = 0u64;
    let mut last_train_acc = 0.0;
    let mut weights: Vec<(String, Tensor)> = Vec::new();
    for (name, tensor) in entries {
        match name.as_str() {
            "adamw.m" => state.m = tensor.data().to_vec(),
            "adamw.v" => state.v = tensor.data().to_vec(),
            "meta.step" => step = tensor.data()[0] as u64,
            "meta.last_train_acc" => last_train_acc = tensor.data()[0],
            _ => weights.push((name, tensor)),
        }
    }
    state.t = step;
    {
        let params = model.params_mut();
        if weights.len() != params.len() {
            return Err(GrokError::Checkpoint(format!(
                "expected {} weight tensors, found {}",
                params.len(),
                weights.len()
            )));
        }
        for ((want_name, slot), (name, tensor)) in params.into_iter().zip(weights) {
            if want_name != name || slot.shape() != tensor.shape() {
                return Err(GrokError::Checkpoint(format!(
                    "tensor '{name}' does not match expected '{want_name}'"
                )));
            }
            *slot = tensor;
        }
    }
    if state.m.len() != model.param_count() || state.v.len() != model.param_count() {
        return Err(GrokError::Checkpoint("optimizer state size mismatch".into()));
    }
    Ok((model, state, step, last_train_acc))
}

/// Run (or resume) training in `dir`, appending JSONL records and
/// writing checkpoints. The config must already be resolved.
pub fn run_training(cfg: &TrainConfig, dir: &Path, resume: bool) -> Result<()> {
    cfg.validate()?;
    std::fs::create_dir_all(dir)?;
    let data = load_task_data(cfg)?;
    let wd = cfg.weight_decay.unwrap_or(0.0);
    let (l1, l2) = (cfg.lambda1.unwrap_or(0.0), cfg.lambda2.unwrap_or(0.0));

    let train_indices: Vec<usize> = (0..data.train.len()).collect();
    let plan = BatchPlan {
        batch_size: cfg.batch_size.min(train_indices.len().max(1)),
        shuffle_seed: cfg.data_seed,
    };
    let batches_per_epoch = train_indices.len().div_ceil(plan.batch_size).max(1) as u64;

    let (mut model, mut state, start_step, mut last_train_acc, mut writer);
    let existing = if resume { latest_checkpoint(dir)? } else { None };
    match existing {
        Some((step, path)) => {
            let (m, s, st, acc) = restore_state(&path, cfg)?;
            model = m;
            state = s;
            start_step = st;
            last_train_acc = acc;
            // Drop any records past the checkpoint, keeping the
            // surviving lines byte-for-byte (re-serializing floats
            // can change their shortest decimal form).
            read_runlog(&log_path(dir))?;
            let text = std::fs::read_to_string(log_path(dir))?;
            let mut kept = String::new();
            for (i, line) in text.lines().enumerate() {
                if i > 0 {
                    let rec: MetricRecord =
                        serde_json::from_str(line).map_err(|e| GrokError::LogParse {
                            line: i + 1,
                            reason: e.to_string(),
                        })?;
                    if rec.step > step {
                        continue;
                    }
                }
                kept.push_str(line);
                kept.push('\n');
            }
            std::fs::write(log_path(dir), kept)?;
            writer = RunLogWriter::append_to(&log_path(dir))?;
        }
        None => {
            model = init_model(cfg);
            state = AdamWState::new(model.param_count());
            start_step = 0;
            writer = RunLogWriter::create(&log_path(dir))?;
            let (acc, loss, test_acc) = full_eval(&model, &data)?;
            last_train_acc = acc;
            let rec = evaluate_record(cfg, &model, &data, 0, loss, acc, test_acc)
                .map_err(|e| abort(0, e))?;
            writer.append(&rec)?;
            save_state(dir, 0, &model, &state, last_train_acc)?;
        }
    }

    let mut epoch_cache: Option<(u64, Vec<Vec<usize>>)> = None;
    for step in start_step..cfg.steps {
        let epoch = step / batches_per_epoch;
        let batch_idx = (step % batches_per_epoch) as usize;
        if epoch_cache.as_ref().map(|(e, _)| *e) != Some(epoch) {
            epoch_cache = Some((epoch, batches(&train_indices, &plan, epoch)?));
        }
        let batch_indices = &epoch_cache.as_ref().unwrap().1[batch_idx];

        let sigma = match cfg.strategy {
            Strategy::Perturb => perturb_sigma(last_train_acc, l1, l2),
            _ => 0.0,
        };
        let abelian_coeff = match cfg.strategy {
            Strategy::Abelian => cfg.abelian_coeff,
            _ => 0.0,
        };
        // Stateless per-step noise stream so resume replays exactly.
        let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.noise_seed);
        noise_rng.set_stream(step + 1);

        let result = match &data.train {
            OwnedEval::ModAdd { pairs, labels } => {
                let bp: Vec<(usize, usize)> = batch_indices.iter().map(|&i| pairs[i]).collect();
                let bl: Vec<usize> = batch_indices.iter().map(|&i| labels[i]).collect();
                training_step(
                    &mut model,
                    &TrainBatch::ModAdd { pairs: &bp, labels: &bl },
                    sigma,
                    abelian_coeff,
                    &mut state,
                    cfg.learning_rate,
                    wd,
                    &mut noise_rng,
                )
            }
            OwnedEval::Mnist { images, dim, labels } => {
                let mut bi = Vec::with_capacity(batch_indices.len() * dim);
                for &i in batch_indices {
                    bi.extend_from_slice(&images[i * dim..(i + 1) * dim]);
                }
                let bl: Vec<usize> = batch_indices.iter().map(|&i| labels[i]).collect();
                training_step(
                    &mut model,
                    &TrainBatch::Mnist { images: &bi, dim: *dim, labels: &bl },
                    sigma,
                    abelian_coeff,
                    &mut state,
                    cfg.learning_rate,
                    wd,
                    &mut noise_rng,
                )
            }
        };
        result.map_err(|e| abort(step + 1, e))?;

        let done = step + 1;
        if done % cfg.log_every == 0 || done == cfg.steps {
            let (acc, loss, test_acc) = full_eval(&model, &data).map_err(|e| abort(done, e))?;
            last_train_acc = acc;
            let rec = evaluate_record(cfg, &model, &data, done, loss, acc, test_acc)
                .map_err(|e| abort(done, e))?;
            writer.append(&rec)?;
            let ckpt_due = cfg.checkpoint_every != 0 && done % cfg.checkpoint_every == 0;
            if ckpt_due || done == cfg.steps {
                save_state(dir, done, &model, &state, last_train_acc)?;
            }
        }
    }
    Ok(())
}

fn abort(step: u64, source: GrokError) -> GrokError {
    GrokError::RunAborted {
        step,
        source: Box::new(source),
    }
}

fn full_eval(model: &Model, data: &TaskData) -> Result<(f64, f64, f64)> {
    let train_acc = dataset_accuracy(model, &data.train.view())?;
    let train_loss = dataset_loss(model, &data.train.view())?;
    let test_acc = dataset_accuracy(model, &data.test.view())?;
    Ok((train_acc, train_loss, test_acc))
}

#[cfg(test)]
#[path = "train_tests.rs"]
mod tests;
