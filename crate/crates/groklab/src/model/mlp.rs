//! Width-200 depth-3 ReLU MLP for MNIST. Raw 10-dimensional scores, no
//! terminal nonlinearity (the loss is MSE against one-hot targets).

use super::{init_rng, kaiming_fill, ForwardCapture};
use crate::error::{GrokError, Result};
use crate::tensor::{NodeId, Tape, Tensor};

pub const MLP_WIDTHS: [usize; 4] = [784, 200, 200, 10];

#[derive(Debug, Clone)]
pub struct MlpModel {
    pub widths: [usize; 4],
    /// (weight in×out, bias out) per affine layer.
    pub layers: Vec<(Tensor, Tensor)>,
    pub init_scale: f64,
}

impl MlpModel {
    pub fn init(seed: u64, init_scale: f64) -> Self {
        Self::init_with_widths(MLP_WIDTHS, seed, init_scale)
    }

    /// Non-standard widths are for oracles and bound checks only; the
    /// experiment architecture is fixed at [784, 200, 200, 10].
    pub fn init_with_widths(widths: [usize; 4], seed: u64, init_scale: f64) -> Self {
        let mut rng = init_rng(seed);
        let mut layers = Vec::with_capacity(3);
        for l in 0..3 {
            let (fan_in, fan_out) = (widths[l], widths[l + 1]);
            let mut w = Tensor::zeros(vec![fan_in, fan_out]);
            kaiming_fill(&mut rng, &mut w, fan_in, init_scale);
            layers.push((w, Tensor::zeros(vec![fan_out])));
        }
        MlpModel {
            widths,
            layers,
            init_scale,
        }
    }

    pub fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, (w, b)) in self.layers.iter().enumerate() {
            out.push((format!("mlp.w{}", i + 1), w));
            out.push((format!("mlp.b{}", i + 1), b));
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, (w, b)) in self.layers.iter_mut().enumerate() {
            out.push((format!("mlp.w{}", i + 1), &mut *w));
            out.push((format!("mlp.b{}", i + 1), &mut *b));
        }
        out
    }
}

pub struct MlpOut {
    pub scores: NodeId,
    pub first_layer: NodeId,
}

/// Forward pass on an already-bound parameter list (canonical order
/// w1,b1,w2,b2,w3,b3). `images` must already be a node of shape B×784.
pub fn mlp_forward(
    tape: &mut Tape,
    model: &MlpModel,
    bound: &[NodeId],
    images: NodeId,
) -> Result<MlpOut> {
    let (_, width) = tape.shape(images);
    if width != model.widths[0] {
        return Err(GrokError::ShapeMismatch {
            op: "mlp_forward",
            left: vec![width],
            right: vec![model.widths[0]],
        });
    }
    let a1 = tape.matmul(images, bound[0])?;
    let a1 = tape.add_row(a1, bound[1])?;
    let h1 = tape.relu(a1)?;
    let a2 = tape.matmul(h1, bound[2])?;
    let a2 = tape.add_row(a2, bound[3])?;
    let h2 = tape.relu(a2)?;
    let a3 = tape.matmul(h2, bound[4])?;
    let scores = tape.add_row(a3, bound[5])?;
    Ok(MlpOut {
        scores,
        first_layer: h1,
    })
}

impl MlpModel {
    /// Convenience full pass from plain tensors: returns scores plus the
    /// forward capture on a throwaway tape.
    pub fn run(&self, images: &Tensor) -> Result<(Tensor, ForwardCapture)> {
        let mut tape = Tape::new();
        let bound = self
            .params()
            .iter()
            .map(|(_, t)| tape.leaf(t, false))
            .collect::<Result<Vec<_>>>()?;
        let x = tape.leaf(images, false)?;
        let out = mlp_forward(&mut tape, self, &bound, x)?;
        let (br, bc) = tape.shape(out.scores);
        let (fr, fc) = tape.shape(out.first_layer);
        let scores = Tensor::new(vec![br, bc], tape.value(out.scores).to_vec())?;
        let first = Tensor::new(vec![fr, fc], tape.value(out.first_layer).to_vec())?;
        Ok((
            scores.clone(),
            ForwardCapture {
                first_layer: first,
                output: scores,
            },
        ))
    }
}
