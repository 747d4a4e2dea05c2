//! Randomized numerical verification of the information-theoretic
//! inequalities and identities: Hadamard, gram perturbation, entropy
//! and mutual-information differences, ED/MID bound theorems, and the
//! Rényi-2 closed forms.

use crate::error::{GrokError, Result};
use crate::metrics::{
    entropy2_frobenius, forward_captures, matrix_entropy, matrix_mutual_information,
    mi2_frobenius, sample_unit_noise, EvalData, GramMatrix,
};
use crate::model::Model;
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

/// Absolute slack tolerance: a trial is a violation when
/// quantity > bound + SLACK_TOL.
pub const SLACK_TOL: f64 = 1e-9;

/// Outcome of one randomized check. `max_slack` is the largest observed
/// quantity − bound (≤ 0 when the bound holds with room); `worst_case`
/// describes the tightest trial.
#[derive(Debug, Clone, Serialize)]
pub struct TrialReport {
    pub check: String,
    pub trials: usize,
    pub violations: usize,
    pub max_slack: f64,
    pub worst_case: String,
}

impl TrialReport {
    fn new(check: &str) -> Self {
        TrialReport {
            check: check.to_string(),
            trials: 0,
            violations: 0,
            max_slack: f64::NEG_INFINITY,
            worst_case: String::new(),
        }
    }

    fn record(&mut self, quantity: f64, bound: f64, describe: impl FnOnce() -> String) {
        self.trials += 1;
        let slack = quantity - bound;
        if slack > self.max_slack {
            self.max_slack = slack;
            self.worst_case = describe();
        }
        if slack > SLACK_TOL {
            self.violations += 1;
        }
    }

    pub fn passed(&self) -> bool {
        self.violations == 0
    }
}

fn trial_rng(seed: u64, trial: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial + 1);
    rng
}

fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-3 {
            return v.iter().map(|x| x / norm).collect();
        }
    }
}

fn perturbed_unit(rng: &mut ChaCha8Rng, base: &[f64], scale: f64) -> Vec<f64> {
    loop {
        let v: Vec<f64> = base
            .iter()
            .map(|&x| x + scale * rng.gen_range(-1.0..1.0))
            .collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-3 {
            return v.iter().map(|x| x / norm).collect();
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// |ab − a′b′| ≤ |a − a′| + |b − b′| for values in [−1, 1].
pub fn check_hadamard(trials: usize, seed: u64) -> TrialReport {
    let mut report = TrialReport::new("hadamard");
    for t in 0..trials {
        let mut rng = trial_rng(seed, t as u64);
        let (a, ap, b, bp): (f64, f64, f64, f64) = (
            rng.gen_range(-1.0..=1.0),
            rng.gen_range(-1.0..=1.0),
            rng.gen_range(-1.0..=1.0),
            rng.gen_range(-1.0..=1.0),
        );
        let quantity = (a * b - ap * bp).abs();
        let bound = (a - ap).abs() + (b - bp).abs();
        report.record(quantity, bound, || {
            format!("a={a} a'={ap} b={b} b'={bp}")
        });
    }
    report
}

/// |⟨aᵢ,aⱼ⟩ − ⟨bᵢ,bⱼ⟩| ≤ 4(‖aᵢ−bᵢ‖ + ‖aⱼ−bⱼ‖) on unit vectors.
pub fn check_gram_perturb(trials: usize, dim: usize, seed: u64) -> TrialReport {
    let mut report = TrialReport::new(&format!("gram_perturb dim={dim}"));
    let scales = [0.01, 0.1, 1.0];
    for t in 0..trials {
        let mut rng = trial_rng(seed, t as u64);
        let scale = scales[t % scales.len()];
        let ai = unit_vector(&mut rng, dim);
        let aj = unit_vector(&mut rng, dim);
        let bi = perturbed_unit(&mut rng, &ai, scale);
        let bj = perturbed_unit(&mut rng, &aj, scale);
        let quantity = (dot(&ai, &aj) - dot(&bi, &bj)).abs();
        let bound = 4.0 * (dist(&ai, &bi) + dist(&aj, &bj));
        report.record(quantity, bound, || {
            format!("dim={dim} scale={scale} trial={t}")
        });
    }
    report
}

/// Unit-column feature matrix (d×n) drawn uniformly, plus a column-wise
/// perturbed copy; returns (columns, perturbed columns).
fn paired_columns(
    rng: &mut ChaCha8Rng,
    n: usize,
    d: usize,
    scale: f64,
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let z: Vec<Vec<f64>> = (0..n).map(|_| unit_vector(rng, d)).collect();
    let zp: Vec<Vec<f64>> = z.iter().map(|c| perturbed_unit(rng, c, scale)).collect();
    (z, zp)
}

fn gram_of_columns(cols: &[Vec<f64>]) -> Result<GramMatrix> {
    let n = cols.len();
    let d = cols[0].len();
    let mut rows = Vec::with_capacity(n * d);
    for c in cols {
        rows.extend_from_slice(c);
    }
    GramMatrix::from_feature_rows(&Tensor::new(vec![n, d], rows)?)
}

/// |H₂(G) − H₂(G′)| ≤ 8·Σᵢ‖zᵢ − z′ᵢ‖, with the eigenvalue and
/// Frobenius entropy routes agreeing within 1e-9 on every trial.
pub fn check_entropy_diff(trials: usize, n: usize, d: usize, seed: u64) -> Result<TrialReport> {
    let mut report = TrialReport::new(&format!("entropy_diff n={n} d={d}"));
    let scales = [0.01, 0.1, 1.0];
    for t in 0..trials {
        let mut rng = trial_rng(seed, t as u64);
        let scale = scales[t % scales.len()];
        let (z, zp) = paired_columns(&mut rng, n, d, scale);
        let g = gram_of_columns(&z)?;
        let gp = gram_of_columns(&zp)?;
        let (h, hp) = (matrix_entropy(&g, 2.0)?, matrix_entropy(&gp, 2.0)?);
        if (h - entropy2_frobenius(&g)).abs() > 1e-9
            || (hp - entropy2_frobenius(&gp)).abs() > 1e-9
        {
            return Err(GrokError::GramInvariant(format!(
                "entropy route disagreement at trial {t}"
            )));
        }
        let quantity = (h - hp).abs();
        let bound = 8.0 * z.iter().zip(&zp).map(|(a, b)| dist(a, b)).sum::<f64>();
        report.record(quantity, bound, || format!("n={n} d={d} scale={scale} trial={t}"));
    }
    Ok(report)
}

/// |I₂(G1,G2) − I₂(G1′,G2′)| ≤ 16·ΣⱼΣᵢ‖zᵢ⁽ʲ⁾ − (z′ᵢ)⁽ʲ⁾‖.
pub fn check_mi_diff(trials: usize, n: usize, d: usize, seed: u64) -> Result<TrialReport> {
    let mut report = TrialReport::new(&format!("mi_diff n={n} d={d}"));
    let scales = [0.01, 0.1, 1.0];
    for t in 0..trials {
        let mut rng = trial_rng(seed, t as u64);
        let scale = scales[t % scales.len()];
        // Perturb only the second family on every third trial (the
        // lemma's sub-case with a vanishing j=1 term).
        let (z1, z1p) = if t % 3 == 2 {
            let z = paired_columns(&mut rng, n, d, 0.0).0;
            (z.clone(), z)
        } else {
            paired_columns(&mut rng, n, d, scale)
        };
        let (z2, z2p) = paired_columns(&mut rng, n, d, scale);
        let i = matrix_mutual_information(&gram_of_columns(&z1)?, &gram_of_columns(&z2)?, 2.0)?;
        let ip =
            matrix_mutual_information(&gram_of_columns(&z1p)?, &gram_of_columns(&z2p)?, 2.0)?;
        let quantity = (i - ip).abs();
        let sum1: f64 = z1.iter().zip(&z1p).map(|(a, b)| dist(a, b)).sum();
        let sum2: f64 = z2.iter().zip(&z2p).map(|(a, b)| dist(a, b)).sum();
        let bound = 16.0 * (sum1 + sum2);
        report.record(quantity, bound, || format!("n={n} d={d} scale={scale} trial={t}"));
    }
    Ok(report)
}

fn normalized_row(t: &Tensor, i: usize) -> Vec<f64> {
    let (_, w) = t.matrix_dims();
    let row = &t.data()[i * w..(i + 1) * w];
    let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
    row.iter().map(|v| v / norm).collect()
}

/// ED ≤ 8·Σ‖output diff‖ and MID ≤ 16·Σ(output diff + first-layer diff)
/// per batch at α = 2, on one sampled Δ, with normalized features.
pub fn check_ed_mid_bounds(
    model: &Model,
    data: &EvalData,
    sigma: f64,
    batch_size: usize,
    seed: u64,
) -> Result<TrialReport> {
    let mut report = TrialReport::new(&format!("ed_mid_bounds sigma={sigma}"));
    let xi = sample_unit_noise(data.len(), data.noise_dim(model), seed);
    let (first_c, out_c) = forward_captures(model, data, None)?;
    let (first_p, out_p) = if sigma == 0.0 {
        (first_c.clone(), out_c.clone())
    } else {
        forward_captures(model, data, Some((&xi, sigma)))?
    };
    let slice = |t: &Tensor, start: usize, len: usize| -> Result<Tensor> {
        let (_, w) = t.matrix_dims();
        Tensor::new(vec![len, w], t.data()[start * w..(start + len) * w].to_vec())
    };
    let mut start = 0;
    while start < data.len() {
        let len = batch_size.min(data.len() - start);
        let g_out_c = GramMatrix::from_feature_rows(&slice(&out_c, start, len)?)?;
        let g_out_p = GramMatrix::from_feature_rows(&slice(&out_p, start, len)?)?;
        let g_first_c = GramMatrix::from_feature_rows(&slice(&first_c, start, len)?)?;
        let g_first_p = GramMatrix::from_feature_rows(&slice(&first_p, start, len)?)?;

        let ed = (matrix_entropy(&g_out_p, 2.0)? - matrix_entropy(&g_out_c, 2.0)?).abs();
        let mid = (matrix_mutual_information(&g_first_p, &g_out_p, 2.0)?
            - matrix_mutual_information(&g_first_c, &g_out_c, 2.0)?)
        .abs();

        let mut out_sum = 0.0;
        let mut first_sum = 0.0;
        for i in start..start + len {
            out_sum += dist(&normalized_row(&out_c, i), &normalized_row(&out_p, i));
            first_sum += dist(&normalized_row(&first_c, i), &normalized_row(&first_p, i));
        }
        report.record(ed, 8.0 * out_sum, || format!("ED batch at {start}"));
        report.record(mid, 16.0 * (out_sum + first_sum), || {
            format!("MID batch at {start}")
        });
        start += len;
    }
    Ok(report)
}

/// A small random MLP with positive hidden and output biases so that no
/// example maps to an all-zero feature row (zero rows cannot be
/// ℓ2-normalized for the gram construction).
fn lively_mlp(seed: u64) -> Model {
    let mut mlp = crate::model::MlpModel::init_with_widths([4, 3, 3, 2], seed, 1.0);
    for (_, bias) in mlp.layers.iter_mut() {
        for v in bias.data_mut() {
            *v = 1.0;
        }
    }
    Model::Mlp(mlp)
}

/// Eigenvalue-route H₂/I₂ equal the Frobenius closed forms within 1e-9
/// on random unit-column grams.
pub fn check_renyi2_identities(trials: usize, n: usize, seed: u64) -> Result<TrialReport> {
    let mut report = TrialReport::new(&format!("renyi2_identities n={n}"));
    for t in 0..trials {
        let mut rng = trial_rng(seed, t as u64);
        let d = n / 2 + 2;
        let g1 = gram_of_columns(&(0..n).map(|_| unit_vector(&mut rng, d)).collect::<Vec<_>>())?;
        let g2 = gram_of_columns(&(0..n).map(|_| unit_vector(&mut rng, d)).collect::<Vec<_>>())?;
        let h_dev = (matrix_entropy(&g1, 2.0)? - entropy2_frobenius(&g1)).abs();
        let i_dev =
            (matrix_mutual_information(&g1, &g2, 2.0)? - mi2_frobenius(&g1, &g2)?).abs();
        report.record(h_dev.max(i_dev), SLACK_TOL, || format!("n={n} trial={t}"));
    }
    Ok(report)
}

/// The full documented verification schedule. Any violation anywhere is
/// a build-blocking failure for the caller.
pub fn run_all_checks(seed: u64) -> Result<Vec<TrialReport>> {
    let mut reports = vec![check_hadamard(100_000, seed)];
    for dim in [2, 16, 128] {
        reports.push(check_gram_perturb(10_000, dim, seed + 1));
    }
    reports.push(check_entropy_diff(10_000, 8, 6, seed + 2)?);
    reports.push(check_mi_diff(10_000, 8, 6, seed + 3)?);
    for n in [4, 32, 200] {
        reports.push(check_renyi2_identities(1_000, n, seed + 4)?);
    }
    let model = lively_mlp(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 5);
    let n = 400;
    let images: Vec<f64> = (0..n * 4).map(|_| rng.gen_range(0.0..1.0)).collect();
    let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..2)).collect();
    let data = EvalData::Mnist {
        images: &images,
        dim: 4,
        labels: &labels,
    };
    reports.push(check_ed_mid_bounds(&model, &data, 0.1, 4, seed + 6)?);
    Ok(reports)
}
