//! Deterministic dataset construction: the modulo-addition generator, the
//! MNIST IDX ingester, and seeded epoch batching.

mod mnist;

pub use mnist::{load_mnist, MnistDataset};

use crate::error::{GrokError, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// All P² pairs (a, b) labelled (a + b) mod P, with a seeded disjoint
/// train/test split.
#[derive(Debug, Clone)]
pub struct ModAddDataset {
    pub p: usize,
    /// Lexicographic pair enumeration; index i holds (i / P, i % P).
    pub pairs: Vec<(usize, usize)>,
    pub labels: Vec<usize>,
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
    pub seed: u64,
}

pub fn generate_modadd(p: usize, train_frac: f64, seed: u64) -> Result<ModAddDataset> {
    if p < 2 {
        return Err(GrokError::InvalidArgument(format!("modulus {p} < 2")));
    }
    if !(train_frac > 0.0 && train_frac < 1.0) {
        return Err(GrokError::InvalidArgument(format!(
            "train_frac {train_frac} outside (0, 1)"
        )));
    }
    let total = p * p;
    let mut pairs = Vec::with_capacity(total);
    let mut labels = Vec::with_capacity(total);
    for a in 0..p {
        for b in 0..p {
            pairs.push((a, b));
            labels.push((a + b) % p);
        }
    }
    let mut order: Vec<usize> = (0..total).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let train_count = (train_frac * total as f64).floor() as usize;
    let train_indices = order[..train_count].to_vec();
    let test_indices = order[train_count..].to_vec();
    Ok(ModAddDataset {
        p,
        pairs,
        labels,
        train_indices,
        test_indices,
        seed,
    })
}

impl ModAddDataset {
    pub fn pairs_at(&self, indices: &[usize]) -> Vec<(usize, usize)> {
        indices.iter().map(|&i| self.pairs[i]).collect()
    }

    pub fn labels_at(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }
}

/// Epoch batching: every epoch is a fresh permutation of the training
/// indices, fully determined by (shuffle_seed, epoch).
#[derive(Debug, Clone, Copy)]
pub struct BatchPlan {
    pub batch_size: usize,
    pub shuffle_seed: u64,
}

/// Ordered index slices covering the whole train set; the final partial
/// batch is included.
pub fn batches(train_indices: &[usize], plan: &BatchPlan, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if plan.batch_size == 0 || plan.batch_size > train_indices.len() {
        return Err(GrokError::InvalidArgument(format!(
            "batch size {} invalid for train size {}",
            plan.batch_size,
            train_indices.len()
        )));
    }
    let mut order = train_indices.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(plan.shuffle_seed);
    rng.set_stream(epoch.wrapping_add(1));
    order.shuffle(&mut rng);
    Ok(order
        .chunks(plan.batch_size)
        .map(|c| c.to_vec())
        .collect())
}
