//! Matrix Rényi entropy and matrix mutual information over unit-diagonal
//! gram matrices.

use crate::error::{GrokError, Result};
use crate::tensor::{l2_normalize_columns, Tensor};
use nalgebra::DMatrix;

/// Tiny negative eigenvalues of a PSD gram are numerical noise; anything
/// below this is a real invariant violation.
pub const EIGEN_FLOOR: f64 = -1e-9;
const DIAG_TOL: f64 = 1e-9;

/// n×n symmetric PSD matrix with unit diagonal, built from l2-normalized
/// feature columns.
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix {
    n: usize,
    entries: Vec<f64>,
}

impl GramMatrix {
    /// Build from features laid out one example per row (n×d). Rows are
    /// normalized via the column-normalization primitive on the transpose.
    pub fn from_feature_rows(features: &Tensor) -> Result<Self> {
        let (n, d) = features.matrix_dims();
        // transpose to d×n so examples are columns
        let mut zt = vec![0.0; n * d];
        for i in 0..n {
            for j in 0..d {
                zt[j * n + i] = features.data()[i * d + j];
            }
        }
        let z = l2_normalize_columns(&Tensor::new(vec![d, n], zt)?)?;
        let zd = z.data();
        let mut entries = vec![0.0; n * n];
        for i in 0..n {
            for j in i..n {
                let mut acc = 0.0;
                for k in 0..d {
                    acc += zd[k * n + i] * zd[k * n + j];
                }
                entries[i * n + j] = acc;
                entries[j * n + i] = acc;
            }
            entries[i * n + i] = 1.0;
        }
        Ok(GramMatrix { n, entries })
    }

    /// Wrap raw entries; validates the unit diagonal and symmetry.
    pub fn from_entries(n: usize, entries: Vec<f64>) -> Result<Self> {
        if entries.len() != n * n {
            return Err(GrokError::GramInvariant(format!(
                "entry count {} for size {n}",
                entries.len()
            )));
        }
        let g = GramMatrix { n, entries };
        g.validate()?;
        Ok(g)
    }

    pub fn identity(n: usize) -> Self {
        let mut entries = vec![0.0; n * n];
        for i in 0..n {
            entries[i * n + i] = 1.0;
        }
        GramMatrix { n, entries }
    }

    /// Label gram for one-hot labels: entry (i, j) is 1 iff the labels
    /// match. Equals YᵀY for one-hot columns Y.
    pub fn from_labels(labels: &[usize]) -> Self {
        let n = labels.len();
        let mut entries = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                entries[i * n + j] = if labels[i] == labels[j] { 1.0 } else { 0.0 };
            }
        }
        GramMatrix { n, entries }
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n;
        for i in 0..n {
            if (self.entries[i * n + i] - 1.0).abs() > DIAG_TOL {
                return Err(GrokError::GramInvariant(format!(
                    "diagonal entry {i} is {}",
                    self.entries[i * n + i]
                )));
            }
            for j in 0..i {
                if (self.entries[i * n + j] - self.entries[j * n + i]).abs() > DIAG_TOL {
                    return Err(GrokError::GramInvariant(format!(
                        "asymmetry at ({i}, {j})"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Hadamard (elementwise) product; unit diagonal is preserved
    /// automatically.
    pub fn hadamard(&self, other: &GramMatrix) -> Result<GramMatrix> {
        if self.n != other.n {
            return Err(GrokError::ShapeMismatch {
                op: "hadamard",
                left: vec![self.n, self.n],
                right: vec![other.n, other.n],
            });
        }
        let entries: Vec<f64> = self
            .entries
            .iter()
            .zip(&other.entries)
            .map(|(&a, &b)| a * b)
            .collect();
        Ok(GramMatrix {
            n: self.n,
            entries,
        })
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.entries.iter().map(|v| v * v).sum()
    }

    /// Eigenvalues of G/n, ascending, clamped to [0, inf). Values below the
    /// noise floor are an invariant violation.
    pub fn scaled_eigenvalues(&self) -> Result<Vec<f64>> {
        let n = self.n;
        let scaled = DMatrix::from_fn(n, n, |i, j| self.entries[i * n + j] / n as f64);
        let eig = scaled.symmetric_eigen();
        let mut vals: Vec<f64> = eig.eigenvalues.iter().copied().collect();
        for v in &mut vals {
            if *v < EIGEN_FLOOR {
                return Err(GrokError::GramInvariant(format!(
                    "eigenvalue {v} below PSD floor"
                )));
            }
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        Ok(vals)
    }
}

/// α-order matrix entropy H_α(G) = (1/(1-α)) ln tr((G/n)^α); α = 1 is the
/// von Neumann entropy -Σ λ ln λ with 0 ln 0 := 0. Natural logarithm.
pub fn matrix_entropy(g: &GramMatrix, alpha: f64) -> Result<f64> {
    if alpha <= 0.0 {
        return Err(GrokError::InvalidArgument(format!(
            "entropy order alpha {alpha} must be positive"
        )));
    }
    g.validate()?;
    let eigs = g.scaled_eigenvalues()?;
    let mass: f64 = eigs.iter().sum();
    if mass <= 0.0 {
        return Err(GrokError::ZeroSpectrum);
    }
    if (alpha - 1.0).abs() < 1e-12 {
        Ok(-eigs
            .iter()
            .map(|&l| if l > 0.0 { l * l.ln() } else { 0.0 })
            .sum::<f64>())
    } else {
        let tr: f64 = eigs.iter().map(|&l| l.powf(alpha)).sum();
        Ok(tr.ln() / (1.0 - alpha))
    }
}

/// I_α(G1; G2) = H_α(G1) + H_α(G2) - H_α(G1 ⊙ G2).
pub fn matrix_mutual_information(g1: &GramMatrix, g2: &GramMatrix, alpha: f64) -> Result<f64> {
    let had = g1.hadamard(g2)?;
    Ok(matrix_entropy(g1, alpha)? + matrix_entropy(g2, alpha)? - matrix_entropy(&had, alpha)?)
}

/// Closed form for α = 2: H₂(G) = 2 ln n - ln ||G||²_F.
pub fn entropy2_frobenius(g: &GramMatrix) -> f64 {
    2.0 * (g.size() as f64).ln() - g.frobenius_sq().ln()
}

/// Closed form for α = 2:
/// I₂ = 2 ln n - ln (||G1||²_F ||G2||²_F / ||G1 ⊙ G2||²_F).
pub fn mi2_frobenius(g1: &GramMatrix, g2: &GramMatrix) -> Result<f64> {
    let had = g1.hadamard(g2)?;
    Ok(2.0 * (g1.size() as f64).ln()
        - (g1.frobenius_sq() * g2.frobenius_sq() / had.frobenius_sq()).ln())
}
