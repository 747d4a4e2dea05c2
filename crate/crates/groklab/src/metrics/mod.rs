//! Measured quantities: weight norms, Hutchinson sharpness, perturbation
//! error, abelian tests, and the matrix-information metrics.

mod entropy;
mod info;

pub use entropy::{
    entropy2_frobenius, matrix_entropy, matrix_mutual_information, mi2_frobenius, GramMatrix,
    EIGEN_FLOOR,
};
pub use info::{ed, mid, pe, pmi, pmi_labels, InfoParams};

use crate::error::{GrokError, Result};
use crate::model::{mlp_forward, transformer_forward, Model};
use crate::tensor::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Metric names that may appear in a run log.
pub const METRIC_NAMES: [&str; 13] = [
    "weight_l2",
    "weight_l1",
    "sharpness",
    "perturb_err",
    "abelian_acc_train",
    "abelian_acc_test",
    "abelian_logit_dist",
    "pmi",
    "pe",
    "mid",
    "ed",
    "pmi_labels",
    "input_grad_norm",
];

const EVAL_CHUNK: usize = 256;

/// A frozen view of evaluation data for one task.
#[derive(Debug, Clone, Copy)]
pub enum EvalData<'a> {
    ModAdd {
        pairs: &'a [(usize, usize)],
        labels: &'a [usize],
    },
    Mnist {
        /// n×dim row-major pixels.
        images: &'a [f64],
        dim: usize,
        labels: &'a [usize],
    },
}

impl<'a> EvalData<'a> {
    pub fn len(&self) -> usize {
        match self {
            EvalData::ModAdd { pairs, .. } => pairs.len(),
            EvalData::Mnist { labels, .. } => labels.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn labels(&self) -> &'a [usize] {
        match self {
            EvalData::ModAdd { labels, .. } => labels,
            EvalData::Mnist { labels, .. } => labels,
        }
    }

    /// Flattened per-example perturbation dimension: pixels for MNIST,
    /// the whole 3×d embedding block for modadd.
    pub fn noise_dim(&self, model: &Model) -> usize {
        match self {
            EvalData::ModAdd { .. } => match model {
                Model::Transformer(t) => crate::model::SEQ_LEN * t.cfg.d_model,
                Model::Mlp(_) => 0,
            },
            EvalData::Mnist { dim, .. } => *dim,
        }
    }

    /// Smallest squared input norm over the dataset (embedding inputs for
    /// modadd), as used by the robustness lemma.
    pub fn min_input_norm_sq(&self, model: &Model) -> Result<f64> {
        match self {
            EvalData::Mnist { images, dim, labels } => {
                let mut best = f64::INFINITY;
                for i in 0..labels.len() {
                    let sq: f64 = images[i * dim..(i + 1) * dim].iter().map(|v| v * v).sum();
                    best = best.min(sq);
                }
                Ok(best)
            }
            EvalData::ModAdd { pairs, .. } => {
                let Model::Transformer(t) = model else {
                    return Err(GrokError::InvalidArgument(
                        "modadd data needs a transformer model".into(),
                    ));
                };
                let d = t.cfg.d_model;
                let mut best = f64::INFINITY;
                for &(a, b) in *pairs {
                    let toks = [a, b, t.cfg.eq_token()];
                    let mut sq = 0.0;
                    for (pos, &tok) in toks.iter().enumerate() {
                        for j in 0..d {
                            let v = t.tok_embed.data()[tok * d + j] + t.pos_embed.data()[pos * d + j];
                            sq += v * v;
                        }
                    }
                    best = best.min(sq);
                }
                Ok(best)
            }
        }
    }
}

/// Owned evaluation buffers backing an [`EvalData`] view.
#[derive(Debug, Clone)]
pub enum OwnedEval {
    ModAdd {
        pairs: Vec<(usize, usize)>,
        labels: Vec<usize>,
    },
    Mnist {
        images: Vec<f64>,
        dim: usize,
        labels: Vec<usize>,
    },
}

impl OwnedEval {
    pub fn view(&self) -> EvalData<'_> {
        match self {
            OwnedEval::ModAdd { pairs, labels } => EvalData::ModAdd { pairs, labels },
            OwnedEval::Mnist { images, dim, labels } => EvalData::Mnist {
                images,
                dim: *dim,
                labels,
            },
        }
    }

    pub fn len(&self) -> usize {
        self.view().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Truncate to the first `cap` examples (cost control for expensive
    /// metrics); `cap` of 0 means no cap.
    pub fn capped(&self, cap: usize) -> OwnedEval {
        if cap == 0 || cap >= self.len() {
            return self.clone();
        }
        match self {
            OwnedEval::ModAdd { pairs, labels } => OwnedEval::ModAdd {
                pairs: pairs[..cap].to_vec(),
                labels: labels[..cap].to_vec(),
            },
            OwnedEval::Mnist { images, dim, labels } => OwnedEval::Mnist {
                images: images[..cap * dim].to_vec(),
                dim: *dim,
                labels: labels[..cap].to_vec(),
            },
        }
    }
}

/// Argmax with ties broken toward the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Batched forward pass over evaluation data with optional input noise
/// Δ = σ·ξ (ξ laid out one example per row). Returns (first-layer
/// features, output features), one row per example.
pub fn forward_captures(
    model: &Model,
    data: &EvalData,
    noise: Option<(&[f64], f64)>,
) -> Result<(Tensor, Tensor)> {
    let n = data.len();
    let mut first: Vec<f64> = Vec::new();
    let mut out: Vec<f64> = Vec::new();
    let mut first_w = 0;
    let mut out_w = 0;
    let mut start = 0;
    while start < n {
        let len = EVAL_CHUNK.min(n - start);
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, false)?;
        let (f_id, o_id) = match (model, data) {
            (Model::Mlp(m), EvalData::Mnist { images, dim, .. }) => {
                let mut chunk = images[start * dim..(start + len) * dim].to_vec();
                if let Some((xi, sigma)) = noise {
                    if sigma != 0.0 {
                        for (i, v) in chunk.iter_mut().enumerate() {
                            *v += sigma * xi[start * dim + i];
                        }
                    }
                }
                let x = tape.leaf_matrix(len, *dim, chunk, false)?;
                let o = mlp_forward(&mut tape, m, &bound, x)?;
                (o.first_layer, o.scores)
            }
            (Model::Transformer(t), EvalData::ModAdd { pairs, .. }) => {
                let d = t.cfg.d_model;
                let nd = crate::model::SEQ_LEN * d;
                let noise_node = match noise {
                    Some((xi, sigma)) if sigma != 0.0 => {
                        let block: Vec<f64> = xi[start * nd..(start + len) * nd]
                            .iter()
                            .map(|v| v * sigma)
                            .collect();
                        Some(tape.leaf_matrix(len * crate::model::SEQ_LEN, d, block, false)?)
                    }
                    _ => None,
                };
                let o = transformer_forward(
                    &mut tape,
                    t,
                    &bound,
                    &pairs[start..start + len],
                    noise_node,
                )?;
                (o.first_layer, o.logits)
            }
            _ => {
                return Err(GrokError::InvalidArgument(
                    "model kind does not match evaluation data".into(),
                ))
            }
        };
        let (_, fw) = tape.shape(f_id);
        let (_, ow) = tape.shape(o_id);
        first_w = fw;
        out_w = ow;
        first.extend_from_slice(tape.value(f_id));
        out.extend_from_slice(tape.value(o_id));
        start += len;
    }
    Ok((
        Tensor::new(vec![n, first_w], first)?,
        Tensor::new(vec![n, out_w], out)?,
    ))
}

/// Output features only (logits / scores), one row per example.
pub fn forward_outputs(model: &Model, data: &EvalData) -> Result<Tensor> {
    Ok(forward_captures(model, data, None)?.1)
}

/// p = 2: Frobenius norm of all parameters concatenated; p = 1: sum of
/// absolute values.
pub fn weight_norm(model: &Model, p: u8) -> f64 {
    let flat = model.flatten();
    match p {
        1 => flat.iter().map(|v| v.abs()).sum(),
        _ => flat.iter().map(|v| v * v).sum::<f64>().sqrt(),
    }
}

/// Draw i.i.d. standard normals for every example's perturbation slot.
pub fn sample_unit_noise(n: usize, dim: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normal = rand_distr_standard();
    (0..n * dim).map(|_| normal(&mut rng)).collect()
}

// Box-Muller keeps the dependency surface small and the stream reproducible.
fn rand_distr_standard() -> impl FnMut(&mut ChaCha8Rng) -> f64 {
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

/// Hutchinson trace estimate of the Hessian of `loss_grad`'s loss:
/// (1/m) Σ vᵀHv with Rademacher probes, Hv by central finite differences
/// of the gradient.
pub fn hutchinson_trace(
    base: &[f64],
    probes: usize,
    fd_eps: f64,
    seed: u64,
    mut grad_fn: impl FnMut(&[f64]) -> Result<Vec<f64>>,
) -> Result<f64> {
    if probes == 0 {
        return Err(GrokError::InvalidArgument("probes must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = base.len();
    let mut total = 0.0;
    let mut plus = vec![0.0; dim];
    let mut minus = vec![0.0; dim];
    for _ in 0..probes {
        let v: Vec<f64> = (0..dim)
            .map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 })
            .collect();
        for i in 0..dim {
            plus[i] = base[i] + fd_eps * v[i];
            minus[i] = base[i] - fd_eps * v[i];
        }
        let gp = grad_fn(&plus)?;
        let gm = grad_fn(&minus)?;
        let mut quad = 0.0;
        for i in 0..dim {
            let hv = (gp[i] - gm[i]) / (2.0 * fd_eps);
            if !hv.is_finite() {
                return Err(GrokError::NonFinite {
                    op: "hutchinson hessian-vector product",
                    index: i,
                });
            }
            quad += v[i] * hv;
        }
        total += quad;
    }
    Ok(total / probes as f64)
}

/// Full-batch task loss and flat gradient at the given parameter vector.
/// MSE against one-hot targets for MNIST, mean cross-entropy for modadd.
pub fn task_loss_grad(model: &Model, data: &EvalData, flat: &[f64]) -> Result<(f64, Vec<f64>)> {
    let mut work = model.clone();
    work.load_flat(flat)?;
    let n = data.len();
    let mut loss_total = 0.0;
    let mut grad = vec![0.0; flat.len()];
    let mut start = 0;
    while start < n {
        let len = EVAL_CHUNK.min(n - start);
        let weight = len as f64 / n as f64;
        let mut tape = Tape::new();
        let bound = work.bind(&mut tape, true)?;
        let loss = match (&work, data) {
            (Model::Mlp(m), EvalData::Mnist { images, dim, labels }) => {
                let x = tape.leaf_matrix(len, *dim, images[start * dim..(start + len) * dim].to_vec(), false)?;
                let out = mlp_forward(&mut tape, m, &bound, x)?;
                crate::train::mse_onehot_loss(&mut tape, out.scores, &labels[start..start + len])?
            }
            (Model::Transformer(t), EvalData::ModAdd { pairs, labels }) => {
                let out = transformer_forward(&mut tape, t, &bound, &pairs[start..start + len], None)?;
                tape.cross_entropy_mean(out.logits, &labels[start..start + len])?
            }
            _ => {
                return Err(GrokError::InvalidArgument(
                    "model kind does not match evaluation data".into(),
                ))
            }
        };
        let weighted = tape.scale(loss, weight)?;
        tape.backward(weighted)?;
        loss_total += tape.value(loss)[0] * weight;
        let mut off = 0;
        for &id in &bound {
            let (r, c) = tape.shape(id);
            if let Some(g) = tape.grad(id) {
                for (i, &gv) in g.iter().enumerate() {
                    grad[off + i] += gv;
                }
            }
            off += r * c;
        }
        start += len;
    }
    Ok((loss_total, grad))
}

/// Hutchinson estimate of Tr ∇²L on the task loss over `data`.
pub fn sharpness(
    model: &Model,
    data: &EvalData,
    probes: usize,
    fd_eps: f64,
    seed: u64,
) -> Result<f64> {
    let base = model.flatten();
    hutchinson_trace(&base, probes, fd_eps, seed, |flat| {
        Ok(task_loss_grad(model, data, flat)?.1)
    })
}

/// Σᵢ ‖f(xᵢ+Δᵢ) − f(xᵢ)‖² with one sampled Δᵢ ~ N(0, σ²I) per example.
pub fn perturbation_error(
    model: &Model,
    data: &EvalData,
    sigma: f64,
    noise_seed: u64,
) -> Result<f64> {
    if sigma < 0.0 {
        return Err(GrokError::InvalidArgument("sigma must be >= 0".into()));
    }
    if sigma == 0.0 {
        return Ok(0.0);
    }
    let xi = sample_unit_noise(data.len(), data.noise_dim(model), noise_seed);
    let (_, clean) = forward_captures(model, data, None)?;
    let (_, noisy) = forward_captures(model, data, Some((&xi, sigma)))?;
    Ok(clean
        .data()
        .iter()
        .zip(noisy.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum())
}

/// Mean over examples of the squared Frobenius norm of the output-input
/// Jacobian, one reverse pass per output coordinate.
pub fn input_gradient_norm(model: &Model, data: &EvalData) -> Result<f64> {
    let n = data.len();
    if n == 0 {
        return Err(GrokError::InvalidArgument("empty dataset".into()));
    }
    let mut total = 0.0;
    let mut start = 0;
    while start < n {
        let len = EVAL_CHUNK.min(n - start);
        let classes = match model {
            Model::Mlp(m) => m.widths[3],
            Model::Transformer(t) => t.cfg.p,
        };
        for class in 0..classes {
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, false)?;
            let (input_id, out_id) = match (model, data) {
                (Model::Mlp(m), EvalData::Mnist { images, dim, .. }) => {
                    let x = tape.leaf_matrix(
                        len,
                        *dim,
                        images[start * dim..(start + len) * dim].to_vec(),
                        true,
                    )?;
                    let o = mlp_forward(&mut tape, m, &bound, x)?;
                    (x, o.scores)
                }
                (Model::Transformer(t), EvalData::ModAdd { pairs, .. }) => {
                    // Gradient w.r.t. the embedding input enters through a
                    // zero noise leaf.
                    let rows = len * crate::model::SEQ_LEN;
                    let zero = tape.leaf_matrix(rows, t.cfg.d_model, vec![0.0; rows * t.cfg.d_model], true)?;
                    let o = transformer_forward(
                        &mut tape,
                        t,
                        &bound,
                        &pairs[start..start + len],
                        Some(zero),
                    )?;
                    (zero, o.logits)
                }
                _ => {
                    return Err(GrokError::InvalidArgument(
                        "model kind does not match evaluation data".into(),
                    ))
                }
            };
            let loss = tape.column_sum(out_id, class)?;
            tape.backward(loss)?;
            if let Some(g) = tape.grad(input_id) {
                total += g.iter().map(|v| v * v).sum::<f64>();
            }
        }
        start += len;
    }
    Ok(total / n as f64)
}

/// Fraction of pairs (a, b) whose argmax prediction matches that of
/// (b, a); ties break toward the lowest index on both sides.
pub fn abelian_accuracy(model: &Model, pairs: &[(usize, usize)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(GrokError::InvalidArgument("no pairs".into()));
    }
    let swapped: Vec<(usize, usize)> = pairs.iter().map(|&(a, b)| (b, a)).collect();
    let labels = vec![0usize; pairs.len()];
    let fwd = forward_outputs(model, &EvalData::ModAdd { pairs, labels: &labels })?;
    let rev = forward_outputs(
        model,
        &EvalData::ModAdd {
            pairs: &swapped,
            labels: &labels,
        },
    )?;
    let (_, c) = fwd.matrix_dims();
    let mut agree = 0usize;
    for i in 0..pairs.len() {
        let a = argmax(&fwd.data()[i * c..(i + 1) * c]);
        let b = argmax(&rev.data()[i * c..(i + 1) * c]);
        if a == b {
            agree += 1;
        }
    }
    Ok(agree as f64 / pairs.len() as f64)
}

/// Mean over pairs of ‖logits(a, b) − logits(b, a)‖² (squared l2).
pub fn abelian_logit_distance(model: &Model, pairs: &[(usize, usize)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(GrokError::InvalidArgument("no pairs".into()));
    }
    let swapped: Vec<(usize, usize)> = pairs.iter().map(|&(a, b)| (b, a)).collect();
    let labels = vec![0usize; pairs.len()];
    let fwd = forward_outputs(model, &EvalData::ModAdd { pairs, labels: &labels })?;
    let rev = forward_outputs(
        model,
        &EvalData::ModAdd {
            pairs: &swapped,
            labels: &labels,
        },
    )?;
    let total: f64 = fwd
        .data()
        .iter()
        .zip(rev.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(total / pairs.len() as f64)
}
