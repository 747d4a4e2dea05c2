//! Analytical objects of the robustness theory: the ε(W*) neighborhood
//! threshold, nearest-neighbor distance profiles, and the predicted
//! phase-transition accuracy curve.

use crate::error::{GrokError, Result};
use crate::metrics::{input_gradient_norm, sharpness, weight_norm, EvalData};
use crate::model::Model;
use serde::Serialize;

/// Parameters of the predicted-accuracy curve.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct TheoryParams {
    /// Lipschitz constant of the output gradient (user-supplied).
    pub l: f64,
    /// Variance of the neighboring-distance Gaussian.
    pub mu: f64,
    /// Norm-decay schedule intercept.
    pub a: f64,
    /// Norm-decay schedule slope per decade.
    pub b: f64,
    pub steps: u64,
}

impl Default for TheoryParams {
    fn default() -> Self {
        TheoryParams {
            l: 0.5,
            mu: 0.01,
            a: 1925.0,
            b: 500.0,
            steps: 15000,
        }
    }
}

impl TheoryParams {
    pub fn validate(&self) -> Result<()> {
        if self.l <= 0.0 || self.mu <= 0.0 || self.b < 0.0 {
            return Err(GrokError::InvalidArgument(
                "need L > 0, mu > 0, b >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// Robustness radius ε = min{1, 1/(2(√(n/min‖xᵢ‖² · ‖W‖²_F · S(W)) + L))}.
pub fn epsilon_threshold(
    weight_l2_sq: f64,
    sharpness: f64,
    n: usize,
    min_input_norm_sq: f64,
    l: f64,
) -> Result<f64> {
    if weight_l2_sq <= 0.0 || sharpness <= 0.0 || n == 0 || min_input_norm_sq <= 0.0 || l <= 0.0 {
        return Err(GrokError::InvalidArgument(
            "epsilon_threshold needs positive inputs".into(),
        ));
    }
    let root = (n as f64 / min_input_norm_sq * weight_l2_sq * sharpness).sqrt();
    Ok((1.0 / (2.0 * (root + l))).min(1.0))
}

/// The ℓ1 variant substitutes ‖W‖₁² for ‖W‖²_F.
pub fn epsilon_threshold_l1(
    weight_l1: f64,
    sharpness: f64,
    n: usize,
    min_input_norm_sq: f64,
    l: f64,
) -> Result<f64> {
    epsilon_threshold(weight_l1 * weight_l1, sharpness, n, min_input_norm_sq, l)
}

/// Sorted distances d(x, D_train) = min over train of ‖x − y‖₂,
/// one per test point.
#[derive(Debug, Clone)]
pub struct NeighborProfile {
    distances: Vec<f64>,
}

impl NeighborProfile {
    pub fn distances(&self) -> &[f64] {
        &self.distances
    }
}

/// Brute-force exact nearest-neighbor distances. Inputs are row-major
/// flat buffers of `dim`-dimensional points.
pub fn neighbor_profile(
    test_inputs: &[f64],
    train_inputs: &[f64],
    dim: usize,
) -> Result<NeighborProfile> {
    if dim == 0 || train_inputs.is_empty() {
        return Err(GrokError::InvalidArgument(
            "neighbor_profile needs a nonempty train set and dim > 0".into(),
        ));
    }
    if test_inputs.len() % dim != 0 || train_inputs.len() % dim != 0 {
        return Err(GrokError::InvalidArgument(
            "input buffers are not a whole number of points".into(),
        ));
    }
    let n_test = test_inputs.len() / dim;
    let n_train = train_inputs.len() / dim;
    let mut distances = Vec::with_capacity(n_test);
    for i in 0..n_test {
        let x = &test_inputs[i * dim..(i + 1) * dim];
        let mut best = f64::INFINITY;
        for j in 0..n_train {
            let y = &train_inputs[j * dim..(j + 1) * dim];
            let sq: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
            best = best.min(sq);
        }
        distances.push(best.sqrt());
    }
    distances.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(NeighborProfile { distances })
}

/// Fraction of test points within distance r of the training set.
pub fn neighbor_fraction(profile: &NeighborProfile, r: f64) -> f64 {
    let n = profile.distances.len();
    if n == 0 {
        return 0.0;
    }
    let hits = profile.distances.partition_point(|&d| d <= r);
    hits as f64 / n as f64
}

/// Predicted test accuracy at a training step:
/// r = 1/(2L + max{a − b·log₁₀(step), 0}), returns erf(r/√(2μ)).
pub fn predicted_accuracy(step: u64, params: &TheoryParams) -> Result<f64> {
    params.validate()?;
    if step < 1 {
        return Err(GrokError::InvalidArgument("step must be >= 1".into()));
    }
    let decay = (params.a - params.b * (step as f64).log10()).max(0.0);
    let r = 1.0 / (2.0 * params.l + decay);
    Ok(libm::erf(r / (2.0 * params.mu).sqrt()).clamp(0.0, 1.0))
}

/// Theorem check at an interpolation snapshot: ε from measured
/// quantities, δ = neighbor_fraction(ε), compared to measured accuracy.
#[derive(Debug, Clone, Serialize)]
pub struct TheoremReport {
    pub epsilon: f64,
    pub delta: f64,
    pub test_acc: f64,
    pub holds: bool,
}

#[allow(clippy::too_many_arguments)]
pub fn theorem_check(
    weight_l2_sq: f64,
    sharpness: f64,
    n: usize,
    min_input_norm_sq: f64,
    l: f64,
    profile: &NeighborProfile,
    train_acc: f64,
    test_acc: f64,
) -> Result<TheoremReport> {
    if train_acc < 1.0 {
        return Err(GrokError::InvalidArgument(format!(
            "theorem_check requires train accuracy 1.0 (interpolation proxy), got {train_acc}"
        )));
    }
    let epsilon = epsilon_threshold(weight_l2_sq, sharpness, n, min_input_norm_sq, l)?;
    let delta = neighbor_fraction(profile, epsilon);
    Ok(TheoremReport {
        epsilon,
        delta,
        test_acc,
        holds: test_acc >= delta,
    })
}

/// Lemma report: LHS = mean squared input-Jacobian norm, RHS =
/// (‖W‖²_F / min‖xᵢ‖²) · S(W).
#[derive(Debug, Clone, Serialize)]
pub struct LemmaReport {
    pub lhs: f64,
    pub rhs: f64,
    pub ratio: f64,
}

/// Evaluate both sides of the robustness lemma on frozen weights.
pub fn robust_lemma_check(
    model: &Model,
    data: &EvalData,
    probes: usize,
    fd_eps: f64,
    seed: u64,
) -> Result<LemmaReport> {
    let lhs = input_gradient_norm(model, data)?;
    let w_sq = weight_norm(model, 2).powi(2);
    let min_sq = data.min_input_norm_sq(model)?;
    let s = sharpness(model, data, probes, fd_eps, seed)?;
    let rhs = if min_sq > 0.0 { w_sq / min_sq * s } else { 0.0 };
    let ratio = if rhs != 0.0 { lhs / rhs } else { 0.0 };
    if !lhs.is_finite() || !rhs.is_finite() {
        return Err(GrokError::NonFinite {
            op: "robust_lemma_check",
            index: 0,
        });
    }
    Ok(LemmaReport { lhs, rhs, ratio })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{MlpModel, Model};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Independent erf oracle: Maclaurin series for small arguments
    /// (where it converges without cancellation), complementary-error
    /// continued fraction for large ones. Accurate well past 1e-12.
    fn erf_oracle(x: f64) -> f64 {
        if x < 0.0 {
            return -erf_oracle(-x);
        }
        if x <= 2.5 {
            let mut term = x;
            let mut sum = x;
            for n in 1..200 {
                let nf = n as f64;
                term *= -x * x / nf;
                let contrib = term / (2.0 * nf + 1.0);
                sum += contrib;
                if contrib.abs() < 1e-18 {
                    break;
                }
            }
            return sum * 2.0 / std::f64::consts::PI.sqrt();
        }
        // erfc(x) = e^{−x²}/(x√π) · 1/(1 + u/(1 + 2u/(1 + 3u/(…)))),
        // u = 1/(2x²), evaluated bottom-up.
        let u = 1.0 / (2.0 * x * x);
        let mut frac = 1.0;
        for k in (1..200).rev() {
            frac = 1.0 + k as f64 * u / frac;
        }
        let erfc = (-x * x).exp() / (x * std::f64::consts::PI.sqrt()) / frac;
        1.0 - erfc
    }

    #[test]
    fn erf_backend_matches_series_oracle() {
        for i in 0..1000 {
            let x = -6.0 + 12.0 * i as f64 / 999.0;
            assert!(
                (libm::erf(x) - erf_oracle(x)).abs() < 1e-12,
                "x = {x}"
            );
        }
    }

    #[test]
    fn epsilon_threshold_limit_and_hand_cases() {
        // Tiny norm·sharpness drives the root to ~0: ε = 1/(2L) capped at 1.
        let eps = epsilon_threshold(1e-30, 1e-30, 1, 1.0, 0.5).unwrap();
        assert!((eps - 1.0).abs() < 1e-9);
        // n=1, min‖x‖²=1, ‖W‖²·S=1, L=0.5 → 1/(2·1.5) = 1/3.
        let eps = epsilon_threshold(1.0, 1.0, 1, 1.0, 0.5).unwrap();
        assert!((eps - 1.0 / 3.0).abs() < 1e-12);
        assert!(epsilon_threshold(0.0, 1.0, 1, 1.0, 0.5).is_err());
    }

    #[test]
    fn epsilon_threshold_monotone_in_weight_norm() {
        let mut prev = f64::INFINITY;
        for i in 1..20 {
            let w_sq = i as f64 * 0.5;
            let eps = epsilon_threshold(w_sq, 2.0, 10, 1.0, 0.5).unwrap();
            assert!(eps <= prev + 1e-15);
            prev = eps;
        }
    }

    #[test]
    fn epsilon_l1_at_most_l2() {
        // ‖w‖₂ ≤ ‖w‖₁ makes the ℓ1 radius no larger.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let w: Vec<f64> = (0..10).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let l1: f64 = w.iter().map(|v| v.abs()).sum();
            let l2_sq: f64 = w.iter().map(|v| v * v).sum();
            let e1 = epsilon_threshold_l1(l1, 2.0, 5, 1.0, 0.5).unwrap();
            let e2 = epsilon_threshold(l2_sq, 2.0, 5, 1.0, 0.5).unwrap();
            assert!(e1 <= e2 + 1e-12);
        }
    }

    #[test]
    fn neighbor_profile_hand_geometry() {
        // train {(0,0)}, test {(1,0), (0,2)} → distances {1, 2}.
        let profile =
            neighbor_profile(&[1.0, 0.0, 0.0, 2.0], &[0.0, 0.0], 2).unwrap();
        assert_eq!(profile.distances(), &[1.0, 2.0]);
        assert_eq!(neighbor_fraction(&profile, 1.5), 0.5);
        assert_eq!(neighbor_fraction(&profile, 0.5), 0.0);
        assert_eq!(neighbor_fraction(&profile, 2.0), 1.0);
    }

    #[test]
    fn neighbor_profile_subset_and_disjoint_cases() {
        let train = [0.0, 0.0, 1.0, 1.0];
        let profile = neighbor_profile(&train, &train, 2).unwrap();
        assert!(profile.distances().iter().all(|&d| d == 0.0));
        assert_eq!(neighbor_fraction(&profile, 0.0), 1.0);

        let disjoint = neighbor_profile(&[5.0, 5.0], &train, 2).unwrap();
        assert_eq!(neighbor_fraction(&disjoint, 0.0), 0.0);
    }

    #[test]
    fn neighbor_profile_rejects_empty_train() {
        assert!(neighbor_profile(&[1.0], &[], 1).is_err());
    }

    #[test]
    fn predicted_accuracy_matches_oracle_at_key_steps() {
        let params = TheoryParams::default();
        let expect = |step: u64| {
            let decay = (params.a - params.b * (step as f64).log10()).max(0.0);
            let r = 1.0 / (2.0 * params.l + decay);
            erf_oracle(r / (2.0 * params.mu).sqrt())
        };
        for (step, approx) in [(1000, 0.0187), (5011, 0.1047), (7080, 0.999), (15000, 1.0)] {
            let got = predicted_accuracy(step, &params).unwrap();
            assert!((got - expect(step)).abs() < 1e-6, "step {step}");
            if step <= 5011 {
                assert!((got - approx).abs() < 5e-4, "step {step}: {got}");
            } else {
                assert!(got > 0.99);
            }
        }
        assert!((predicted_accuracy(15000, &params).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn predicted_accuracy_is_monotone_in_unit_interval() {
        let params = TheoryParams::default();
        let mut prev = 0.0;
        for i in 0..200 {
            let step = 1 + (15000.0f64.powf(i as f64 / 199.0)) as u64;
            let v = predicted_accuracy(step, &params).unwrap();
            assert!((0.0..=1.0).contains(&v));
            assert!(v >= prev - 1e-15);
            prev = v;
        }
    }

    #[test]
    fn predicted_accuracy_transition_is_sharp() {
        let params = TheoryParams::default();
        assert!(predicted_accuracy(5000, &params).unwrap() < 0.2);
        assert!(predicted_accuracy(7500, &params).unwrap() > 0.99);
        assert!(predicted_accuracy(0, &params).is_err());
    }

    #[test]
    fn theorem_check_trivial_cases() {
        // ε below every distance → δ = 0 → trivially holds.
        let profile = neighbor_profile(&[5.0, 5.0], &[0.0, 0.0], 2).unwrap();
        let report =
            theorem_check(1.0, 1.0, 1, 1.0, 0.5, &profile, 1.0, 0.0).unwrap();
        assert_eq!(report.delta, 0.0);
        assert!(report.holds);

        // test ⊂ train → δ = 1, perfect accuracy passes.
        let train = [0.0, 0.0, 1.0, 1.0];
        let profile = neighbor_profile(&train, &train, 2).unwrap();
        let report =
            theorem_check(1.0, 1.0, 1, 1.0, 0.5, &profile, 1.0, 1.0).unwrap();
        assert_eq!(report.delta, 1.0);
        assert!(report.holds);

        assert!(theorem_check(1.0, 1.0, 1, 1.0, 0.5, &profile, 0.9, 1.0).is_err());
    }

    #[test]
    fn lemma_report_is_finite_with_ratio() {
        let model = Model::Mlp(MlpModel::init_with_widths([4, 3, 3, 2], 2, 1.0));
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let images: Vec<f64> = (0..6 * 4).map(|_| rng.gen_range(0.1..1.0)).collect();
        let labels: Vec<usize> = (0..6).map(|_| rng.gen_range(0..2)).collect();
        let data = EvalData::Mnist {
            images: &images,
            dim: 4,
            labels: &labels,
        };
        let report = robust_lemma_check(&model, &data, 4, 1e-3, 1).unwrap();
        assert!(report.lhs.is_finite() && report.rhs.is_finite() && report.ratio.is_finite());
    }

    #[test]
    fn lemma_zero_model_degenerate_pass() {
        let model = Model::Mlp(MlpModel::init_with_widths([4, 3, 3, 2], 0, 0.0));
        let images = vec![0.5; 4 * 4];
        let labels = vec![0usize; 4];
        let data = EvalData::Mnist {
            images: &images,
            dim: 4,
            labels: &labels,
        };
        let report = robust_lemma_check(&model, &data, 2, 1e-3, 0).unwrap();
        assert_eq!(report.lhs, 0.0);
        assert!(report.lhs <= report.rhs.abs() + 1e-9);
    }
}
