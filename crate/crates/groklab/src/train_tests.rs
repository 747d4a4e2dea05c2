use super::*;
use crate::metrics::OwnedEval;
use crate::model::{MlpModel, TransformerConfig, TransformerModel};
use rand::Rng;
use tempfile::tempdir;

fn tiny_modadd_config(steps: u64) -> TrainConfig {
    let mut cfg: TrainConfig = toml::from_str(
        r#"
        task = "mod_add"
        strategy = "standard"
        steps = 0
        batch_size = 8
        log_every = 2
        checkpoint_every = 2

        [modadd]
        p = 5
        train_frac = 0.5
        d_model = 4
        heads = 1
        head_dim = 4
        hidden = 8
        "#,
    )
    .unwrap();
    cfg.steps = steps;
    cfg.resolve().unwrap();
    cfg
}

fn tiny_transformer_model(seed: u64) -> Model {
    let cfg = TransformerConfig::tiny(5, 4, 1, 8);
    Model::Transformer(TransformerModel::init(&cfg, seed, 1.0))
}

fn sample_batch(p: usize) -> (Vec<(usize, usize)>, Vec<usize>) {
    let mut pairs = Vec::new();
    let mut labels = Vec::new();
    for a in 0..p {
        for b in 0..p {
            pairs.push((a, b));
            labels.push((a + b) % p);
        }
    }
    (pairs, labels)
}

// ---- losses ----

#[test]
fn mse_onehot_exact_fit_is_zero() {
    let mut tape = Tape::new();
    let scores = tape
        .leaf_matrix(2, 3, vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0], false)
        .unwrap();
    let loss = mse_onehot_loss(&mut tape, scores, &[0, 2]).unwrap();
    assert_eq!(tape.value(loss)[0], 0.0);
}

#[test]
fn mse_onehot_zero_scores_half_per_example() {
    let mut tape = Tape::new();
    let scores = tape.leaf_matrix(3, 10, vec![0.0; 30], false).unwrap();
    let loss = mse_onehot_loss(&mut tape, scores, &[4, 0, 9]).unwrap();
    assert!((tape.value(loss)[0] - 0.5).abs() < 1e-15);
}

#[test]
fn mse_onehot_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (b, c) = (7, 5);
    let scores: Vec<f64> = (0..b * c).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let labels: Vec<usize> = (0..b).map(|_| rng.gen_range(0..c)).collect();
    let mut want = 0.0;
    for i in 0..b {
        for j in 0..c {
            let target = if j == labels[i] { 1.0 } else { 0.0 };
            let d = scores[i * c + j] - target;
            want += d * d;
        }
    }
    want /= 2.0 * b as f64;
    let mut tape = Tape::new();
    let node = tape.leaf_matrix(b, c, scores, false).unwrap();
    let loss = mse_onehot_loss(&mut tape, node, &labels).unwrap();
    assert!((tape.value(loss)[0] - want).abs() < 1e-12);
}

#[test]
fn mse_onehot_rejects_bad_label() {
    let mut tape = Tape::new();
    let scores = tape.leaf_matrix(1, 3, vec![0.0; 3], false).unwrap();
    assert!(matches!(
        mse_onehot_loss(&mut tape, scores, &[3]),
        Err(GrokError::LabelOutOfRange { .. })
    ));
}

#[test]
fn cross_entropy_uniform_logits_is_log_classes() {
    let mut tape = Tape::new();
    let logits = tape.leaf_matrix(2, 113, vec![0.3; 226], false).unwrap();
    let loss = cross_entropy_loss(&mut tape, logits, &[5, 80]).unwrap();
    assert!((tape.value(loss)[0] - (113.0f64).ln()).abs() < 1e-12);
}

#[test]
fn cross_entropy_large_margin_tends_to_zero() {
    let mut tape = Tape::new();
    let mut row = vec![0.0; 4];
    row[2] = 50.0;
    let logits = tape.leaf_matrix(1, 4, row, false).unwrap();
    let loss = cross_entropy_loss(&mut tape, logits, &[2]).unwrap();
    assert!(tape.value(loss)[0] < 1e-12);
}

#[test]
fn cross_entropy_matches_direct_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (b, c) = (6, 9);
    let logits: Vec<f64> = (0..b * c).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let labels: Vec<usize> = (0..b).map(|_| rng.gen_range(0..c)).collect();
    let mut want = 0.0;
    for i in 0..b {
        let row = &logits[i * c..(i + 1) * c];
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        want += -(row[labels[i]].exp() / z).ln();
    }
    want /= b as f64;
    let mut tape = Tape::new();
    let node = tape.leaf_matrix(b, c, logits, false).unwrap();
    let loss = cross_entropy_loss(&mut tape, node, &labels).unwrap();
    assert!((tape.value(loss)[0] - want).abs() < 1e-10);
}

// ---- AdamW ----

#[test]
fn adamw_zero_grad_zero_decay_is_identity() {
    let mut params = vec![1.5, -0.25];
    let mut state = AdamWState::new(2);
    adamw_step(&mut params, &[0.0, 0.0], &mut state, 1e-3, 0.0).unwrap();
    assert_eq!(params, vec![1.5, -0.25]);
}

#[test]
fn adamw_first_step_moves_by_learning_rate() {
    // Bias-corrected first step: m̂ = g, v̂ = g², update = lr·g/(|g|+ε).
    let mut params = vec![0.0];
    let mut state = AdamWState::new(1);
    adamw_step(&mut params, &[1.0], &mut state, 1e-3, 0.0).unwrap();
    let want = -1e-3 / (1.0 + 1e-8);
    assert!((params[0] - want).abs() < 1e-15);
}

#[test]
fn adamw_pure_decay_branch() {
    let mut params = vec![2.0];
    let mut state = AdamWState::new(1);
    adamw_step(&mut params, &[0.0], &mut state, 1e-3, 1.0).unwrap();
    assert!((params[0] - 1.998).abs() < 1e-15);
}

#[test]
fn adamw_decay_is_exactly_geometric() {
    let mut params = vec![3.0];
    let mut state = AdamWState::new(1);
    for _ in 0..5 {
        adamw_step(&mut params, &[0.0], &mut state, 0.01, 2.0).unwrap();
    }
    let want = 3.0 * (1.0 - 0.01 * 2.0f64).powi(5);
    assert!((params[0] - want).abs() < 1e-12);
}

// ---- perturb schedule ----

#[test]
fn perturb_sigma_schedule() {
    assert_eq!(perturb_sigma(1.0, 0.5, 0.4), 0.4);
    assert_eq!(perturb_sigma(0.0, 0.5, 0.4), 0.5);
    assert_eq!(perturb_sigma(0.75, 0.06, 0.03), 0.03);
}

// ---- training_step ----

#[test]
fn perturb_with_zero_sigma_is_bitwise_standard() {
    let (pairs, labels) = sample_batch(5);
    let mut standard = tiny_transformer_model(4);
    let mut perturb = standard.clone();
    let mut s1 = AdamWState::new(standard.param_count());
    let mut s2 = s1.clone();
    for step in 0..50u64 {
        let mut rng1 = ChaCha8Rng::seed_from_u64(9);
        rng1.set_stream(step + 1);
        let mut rng2 = rng1.clone();
        let batch = TrainBatch::ModAdd {
            pairs: &pairs,
            labels: &labels,
        };
        let l1 = training_step(&mut standard, &batch, 0.0, 0.0, &mut s1, 1e-3, 1.0, &mut rng1)
            .unwrap();
        let batch = TrainBatch::ModAdd {
            pairs: &pairs,
            labels: &labels,
        };
        // σ = max(0·(1−acc), 0) = 0: the perturb strategy collapses to
        // the standard one.
        let l2 = training_step(&mut perturb, &batch, perturb_sigma(0.0, 0.0, 0.0), 0.0, &mut s2, 1e-3, 1.0, &mut rng2)
            .unwrap();
        assert_eq!(l1.to_bits(), l2.to_bits());
    }
    let a = standard.flatten();
    let b = perturb.flatten();
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn abelian_loss_is_base_plus_scaled_symmetry_term() {
    let (pairs, labels) = sample_batch(5);
    let model = tiny_transformer_model(6);
    let dist = crate::metrics::abelian_logit_distance(&model, &pairs).unwrap();
    let mut base_model = model.clone();
    let mut reg_model = model.clone();
    let mut s1 = AdamWState::new(model.param_count());
    let mut s2 = s1.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let batch = TrainBatch::ModAdd {
        pairs: &pairs,
        labels: &labels,
    };
    let base = training_step(&mut base_model, &batch, 0.0, 0.0, &mut s1, 1e-3, 0.0, &mut rng)
        .unwrap();
    let batch = TrainBatch::ModAdd {
        pairs: &pairs,
        labels: &labels,
    };
    let total = training_step(&mut reg_model, &batch, 0.0, 100.0, &mut s2, 1e-3, 0.0, &mut rng)
        .unwrap();
    assert!(
        (total - (base + 100.0 * dist)).abs() < 1e-9 * total.abs().max(1.0),
        "total {total}, base {base}, dist {dist}"
    );
}

#[test]
fn training_step_rejects_mismatched_batch() {
    let mut model = Model::Mlp(MlpModel::init_with_widths([4, 3, 3, 2], 0, 1.0));
    let (pairs, labels) = sample_batch(3);
    let batch = TrainBatch::ModAdd {
        pairs: &pairs,
        labels: &labels,
    };
    let mut state = AdamWState::new(model.param_count());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(
        training_step(&mut model, &batch, 0.0, 0.0, &mut state, 1e-3, 0.0, &mut rng).is_err()
    );
}

// ---- config ----

#[test]
fn config_rejects_unknown_key_by_name() {
    let err = toml::from_str::<TrainConfig>(
        r#"
        task = "mnist"
        strategy = "standard"
        steps = 10
        momentum = 0.9
        "#,
    )
    .unwrap_err()
    .to_string();
    assert!(err.contains("momentum"), "error was: {err}");
}

#[test]
fn config_validates_lambda_ordering() {
    let mut cfg = tiny_modadd_config(1);
    cfg.lambda1 = Some(0.1);
    cfg.lambda2 = Some(0.2);
    assert!(matches!(cfg.validate(), Err(GrokError::Config(_))));
}

#[test]
fn config_rejects_abelian_on_mnist() {
    let mut cfg = tiny_modadd_config(1);
    cfg.task = Task::Mnist;
    cfg.strategy = Strategy::Abelian;
    assert!(cfg.validate().is_err());
}

#[test]
fn config_resolve_fills_task_defaults() {
    let cfg = tiny_modadd_config(1);
    assert_eq!(cfg.weight_decay, Some(1.0));
    assert_eq!(cfg.lambda1, Some(0.5));
    assert_eq!(cfg.lambda2, Some(0.4));
    assert_eq!(cfg.metrics.info_sigma, Some(0.4));
}

// ---- runner ----

#[test]
fn zero_steps_logs_only_step_zero() {
    let dir = tempdir().unwrap();
    let cfg = tiny_modadd_config(0);
    run_training(&cfg, dir.path(), false).unwrap();
    let records = read_runlog(&log_path(dir.path())).unwrap();
    assert_eq!(records.len(), 1);
    assert_eq!(records[0].step, 0);
    assert!(records[0].get("train_acc").is_some());
    assert!(records[0].get("weight_l2").is_some());
}

#[test]
fn identical_configs_produce_byte_identical_logs() {
    let cfg = tiny_modadd_config(6);
    let d1 = tempdir().unwrap();
    let d2 = tempdir().unwrap();
    run_training(&cfg, d1.path(), false).unwrap();
    run_training(&cfg, d2.path(), false).unwrap();
    let a = std::fs::read(log_path(d1.path())).unwrap();
    let b = std::fs::read(log_path(d2.path())).unwrap();
    assert!(!a.is_empty());
    assert_eq!(a, b);
}

#[test]
fn resume_reproduces_uninterrupted_log_bytes() {
    let d1 = tempdir().unwrap();
    run_training(&tiny_modadd_config(6), d1.path(), false).unwrap();

    // Interrupted run: stop at step 4, then resume to 6.
    let d2 = tempdir().unwrap();
    run_training(&tiny_modadd_config(4), d2.path(), false).unwrap();
    run_training(&tiny_modadd_config(6), d2.path(), true).unwrap();

    let a = std::fs::read(log_path(d1.path())).unwrap();
    let b = std::fs::read(log_path(d2.path())).unwrap();
    assert_eq!(a, b);

    // Final checkpoints hold bit-identical weights.
    let (_, p1) = latest_checkpoint(d1.path()).unwrap().unwrap();
    let (_, p2) = latest_checkpoint(d2.path()).unwrap().unwrap();
    let cfg = tiny_modadd_config(6);
    let (m1, s1, step1, _) = restore_state(&p1, &cfg).unwrap();
    let (m2, s2, step2, _) = restore_state(&p2, &cfg).unwrap();
    assert_eq!(step1, 6);
    assert_eq!(step2, 6);
    let (f1, f2) = (m1.flatten(), m2.flatten());
    assert!(f1.iter().zip(&f2).all(|(x, y)| x.to_bits() == y.to_bits()));
    assert!(s1.m.iter().zip(&s2.m).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn restore_rejects_architecture_mismatch() {
    let dir = tempdir().unwrap();
    let cfg = tiny_modadd_config(0);
    run_training(&cfg, dir.path(), false).unwrap();
    let (_, path) = latest_checkpoint(dir.path()).unwrap().unwrap();
    let mut mnist_cfg = cfg.clone();
    mnist_cfg.task = Task::Mnist;
    assert!(matches!(
        restore_state(&path, &mnist_cfg),
        Err(GrokError::Checkpoint(_))
    ));
}

#[test]
fn training_reduces_loss_on_tiny_task() {
    let dir = tempdir().unwrap();
    let mut cfg = tiny_modadd_config(60);
    cfg.log_every = 30;
    cfg.checkpoint_every = 0;
    cfg.weight_decay = Some(0.0);
    run_training(&cfg, dir.path(), false).unwrap();
    let records = read_runlog(&log_path(dir.path())).unwrap();
    let first = records.first().unwrap().get("train_loss").unwrap();
    let last = records.last().unwrap().get("train_loss").unwrap();
    assert!(last < first, "loss did not drop: {first} -> {last}");
}

#[test]
fn dataset_loss_of_zero_transformer_is_log_p() {
    let cfg = TransformerConfig::tiny(5, 4, 1, 8);
    let model = Model::Transformer(TransformerModel::init(&cfg, 0, 0.0));
    let (pairs, labels) = sample_batch(5);
    let data = OwnedEval::ModAdd { pairs, labels };
    let loss = dataset_loss(&model, &data.view()).unwrap();
    assert!((loss - (5.0f64).ln()).abs() < 1e-12);
}
