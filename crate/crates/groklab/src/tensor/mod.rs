//! Dense double-precision tensors and a define-by-run reverse-mode tape.

mod tape;

pub use tape::{NodeId, Tape};

use crate::error::{GrokError, Result};

/// Floor below which a feature column counts as degenerate for normalization.
pub const COLUMN_NORM_FLOOR: f64 = 1e-30;

/// Dense row-major tensor of f64 values. Plain storage: autodiff state lives
/// on the [`Tape`], not here.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(GrokError::InvalidArgument(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(GrokError::NonFinite {
                op: "tensor construction",
                index: i,
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rows/cols view of a rank-1 or rank-2 tensor. Rank-1 counts as one row.
    pub fn matrix_dims(&self) -> (usize, usize) {
        match self.shape.len() {
            1 => (1, self.shape[0]),
            2 => (self.shape[0], self.shape[1]),
            _ => {
                let cols = *self.shape.last().unwrap();
                (self.data.len() / cols, cols)
            }
        }
    }
}

/// Scale every column of a d×n matrix to unit l2 norm.
///
/// A column with norm below [`COLUMN_NORM_FLOOR`] is an error rather than a
/// silent fallback: a zero feature vector has no direction and would break
/// the unit-diagonal gram invariant downstream.
pub fn l2_normalize_columns(z: &Tensor) -> Result<Tensor> {
    let (d, n) = z.matrix_dims();
    let mut out = z.data().to_vec();
    for j in 0..n {
        let mut sq = 0.0;
        for i in 0..d {
            let v = out[i * n + j];
            sq += v * v;
        }
        let norm = sq.sqrt();
        if norm < COLUMN_NORM_FLOOR {
            return Err(GrokError::DegenerateColumn { column: j, norm });
        }
        for i in 0..d {
            out[i * n + j] /= norm;
        }
    }
    Tensor::new(z.shape().to_vec(), out)
}
