//! Perturbation-based information metrics: PMI, PE, MID, ED, and the
//! label variant PMI′. All are batch-averaged estimates with a single
//! noise draw Δᵢ ~ N(0, σ²I) per example.

use super::entropy::{matrix_entropy, matrix_mutual_information, GramMatrix};
use super::{forward_captures, sample_unit_noise, EvalData};
use crate::error::{GrokError, Result};
use crate::model::Model;
use crate::tensor::Tensor;

/// Shared knobs for the information metrics.
#[derive(Debug, Clone, Copy)]
pub struct InfoParams {
    pub sigma: f64,
    pub alpha: f64,
    /// Estimation batch size; the final partial batch is included.
    pub batch_size: usize,
    pub noise_seed: u64,
}

impl InfoParams {
    fn check(&self) -> Result<()> {
        if self.sigma < 0.0 {
            return Err(GrokError::InvalidArgument("sigma must be >= 0".into()));
        }
        if self.alpha <= 0.0 {
            return Err(GrokError::InvalidArgument("alpha must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(GrokError::InvalidArgument("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// First-layer and output features of every example under the params'
/// noise draw; `sigma` overrides the params' σ so the σ=0 baseline of
/// MID/ED reuses the exact same draw.
fn captures_at_sigma(
    model: &Model,
    data: &EvalData,
    params: &InfoParams,
    sigma: f64,
) -> Result<(Tensor, Tensor)> {
    let noise;
    let arg = if sigma == 0.0 {
        None
    } else {
        noise = sample_unit_noise(data.len(), data.noise_dim(model), params.noise_seed);
        Some((noise.as_slice(), sigma))
    };
    forward_captures(model, data, arg)
}

fn feature_slice(t: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let (_, w) = t.matrix_dims();
    Tensor::new(vec![len, w], t.data()[start * w..(start + len) * w].to_vec())
}

fn batch_ranges(n: usize, batch_size: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = 0;
    while start < n {
        let len = batch_size.min(n - start);
        out.push((start, len));
        start += len;
    }
    out
}

/// Perturb mutual information: batch-averaged I_α between the gram of
/// perturbed first-layer features and the gram of perturbed outputs.
pub fn pmi(model: &Model, data: &EvalData, params: &InfoParams) -> Result<f64> {
    pmi_at_sigma(model, data, params, params.sigma)
}

fn pmi_at_sigma(model: &Model, data: &EvalData, params: &InfoParams, sigma: f64) -> Result<f64> {
    params.check()?;
    let (first, out) = captures_at_sigma(model, data, params, sigma)?;
    let ranges = batch_ranges(data.len(), params.batch_size);
    let mut total = 0.0;
    for &(start, len) in &ranges {
        let g1 = GramMatrix::from_feature_rows(&feature_slice(&first, start, len)?)?;
        let g2 = GramMatrix::from_feature_rows(&feature_slice(&out, start, len)?)?;
        total += matrix_mutual_information(&g1, &g2, params.alpha)?;
    }
    Ok(total / ranges.len() as f64)
}

/// Perturb entropy: batch-averaged H_α of the perturbed output gram.
pub fn pe(model: &Model, data: &EvalData, params: &InfoParams) -> Result<f64> {
    pe_at_sigma(model, data, params, params.sigma)
}

fn pe_at_sigma(model: &Model, data: &EvalData, params: &InfoParams, sigma: f64) -> Result<f64> {
    params.check()?;
    let (_, out) = captures_at_sigma(model, data, params, sigma)?;
    let ranges = batch_ranges(data.len(), params.batch_size);
    let mut total = 0.0;
    for &(start, len) in &ranges {
        let g = GramMatrix::from_feature_rows(&feature_slice(&out, start, len)?)?;
        total += matrix_entropy(&g, params.alpha)?;
    }
    Ok(total / ranges.len() as f64)
}

/// Mutual information difference |PMI(σ) − PMI(0)| on the same draw.
pub fn mid(model: &Model, data: &EvalData, params: &InfoParams) -> Result<f64> {
    let perturbed = pmi_at_sigma(model, data, params, params.sigma)?;
    let clean = pmi_at_sigma(model, data, params, 0.0)?;
    Ok((perturbed - clean).abs())
}

/// Entropy difference |PE(σ) − PE(0)| on the same draw.
pub fn ed(model: &Model, data: &EvalData, params: &InfoParams) -> Result<f64> {
    let perturbed = pe_at_sigma(model, data, params, params.sigma)?;
    let clean = pe_at_sigma(model, data, params, 0.0)?;
    Ok((perturbed - clean).abs())
}

/// PMI′: batch-averaged I_α between the perturbed output gram and the
/// one-hot label gram (entries 1 iff same label).
pub fn pmi_labels(model: &Model, data: &EvalData, params: &InfoParams) -> Result<f64> {
    params.check()?;
    let (_, out) = captures_at_sigma(model, data, params, params.sigma)?;
    let labels = data.labels();
    let ranges = batch_ranges(data.len(), params.batch_size);
    let mut total = 0.0;
    for &(start, len) in &ranges {
        let g1 = GramMatrix::from_feature_rows(&feature_slice(&out, start, len)?)?;
        let g2 = GramMatrix::from_labels(&labels[start..start + len]);
        total += matrix_mutual_information(&g1, &g2, params.alpha)?;
    }
    Ok(total / ranges.len() as f64)
}
