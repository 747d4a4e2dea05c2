//! The two experiment architectures plus the checkpoint container.

mod checkpoint;
mod mlp;
mod transformer;

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use mlp::{mlp_forward, MlpModel, MlpOut, MLP_WIDTHS};
pub use transformer::{
    transformer_forward, CapturePoint, TransformerConfig, TransformerModel, TransformerOut,
    SEQ_LEN,
};

use crate::error::{GrokError, Result};
use crate::tensor::{NodeId, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchKind {
    Mlp,
    Transformer,
}

impl ArchKind {
    pub fn tag(self) -> &'static str {
        match self {
            ArchKind::Mlp => "mlp",
            ArchKind::Transformer => "transformer",
        }
    }
}

#[derive(Debug, Clone)]
pub enum Model {
    Mlp(MlpModel),
    Transformer(TransformerModel),
}

impl Model {
    pub fn arch(&self) -> ArchKind {
        match self {
            Model::Mlp(_) => ArchKind::Mlp,
            Model::Transformer(_) => ArchKind::Transformer,
        }
    }

    /// Parameters in canonical order. The order is the contract for
    /// checkpoints, optimizer state and tape binding.
    pub fn params(&self) -> Vec<(String, &Tensor)> {
        match self {
            Model::Mlp(m) => m.params(),
            Model::Transformer(m) => m.params(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        match self {
            Model::Mlp(m) => m.params_mut(),
            Model::Transformer(m) => m.params_mut(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.len()).sum()
    }

    /// Bind every parameter onto a tape, in canonical order.
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> Result<Vec<NodeId>> {
        self.params()
            .iter()
            .map(|(_, t)| tape.leaf(t, requires_grad))
            .collect()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for (_, t) in self.params() {
            out.extend_from_slice(t.data());
        }
        out
    }

    pub fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(GrokError::InvalidArgument(format!(
                "flat vector has {} values, model has {}",
                flat.len(),
                self.param_count()
            )));
        }
        let mut off = 0;
        for (_, t) in self.params_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }
}

/// Captured activations from one forward pass: the first-layer feature and
/// the output feature, both for the same inputs.
#[derive(Debug, Clone)]
pub struct ForwardCapture {
    pub first_layer: Tensor,
    pub output: Tensor,
}

/// Kaiming-uniform fill: U(-sqrt(6/fan_in), sqrt(6/fan_in)) times
/// init_scale. The RNG consumption is independent of init_scale so the same
/// seed at two scales yields exactly proportional weights.
pub(crate) fn kaiming_fill(rng: &mut ChaCha8Rng, t: &mut Tensor, fan_in: usize, scale: f64) {
    let limit = (6.0 / fan_in as f64).sqrt();
    for v in t.data_mut() {
        *v = rng.gen_range(-limit..limit) * scale;
    }
}

pub(crate) fn init_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
