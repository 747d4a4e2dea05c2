//! MNIST IDX ingestion: big-endian IDX3 images (magic 2051) and IDX1
//! labels (magic 2049), pixels scaled to [0, 1] as byte / 255.

use crate::error::{GrokError, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;

const IDX3_MAGIC: u32 = 2051;
const IDX1_MAGIC: u32 = 2049;

#[derive(Debug, Clone)]
pub struct MnistDataset {
    /// n×784 row-major pixels in [0, 1].
    pub images: Vec<f64>,
    pub labels: Vec<usize>,
    pub rows: usize,
    pub cols: usize,
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
    pub seed: u64,
}

impl MnistDataset {
    pub fn count(&self) -> usize {
        self.labels.len()
    }

    pub fn dim(&self) -> usize {
        self.rows * self.cols
    }

    pub fn image_batch(&self, indices: &[usize]) -> Vec<f64> {
        let d = self.dim();
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            out.extend_from_slice(&self.images[i * d..(i + 1) * d]);
        }
        out
    }

    pub fn labels_at(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }
}

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    if offset + 4 > bytes.len() {
        return Err(GrokError::IdxParse {
            offset,
            reason: format!("truncated: need 4 bytes, file has {}", bytes.len()),
        });
    }
    Ok(u32::from_be_bytes([
        bytes[offset],
        bytes[offset + 1],
        bytes[offset + 2],
        bytes[offset + 3],
    ]))
}

pub fn load_mnist(
    image_path: &Path,
    label_path: &Path,
    train_count: usize,
    seed: u64,
) -> Result<MnistDataset> {
    let img = std::fs::read(image_path)?;
    let lab = std::fs::read(label_path)?;

    let magic = be_u32(&img, 0)?;
    if magic != IDX3_MAGIC {
        return Err(GrokError::IdxParse {
            offset: 0,
            reason: format!("image magic {magic}, expected {IDX3_MAGIC}"),
        });
    }
    let n = be_u32(&img, 4)? as usize;
    let rows = be_u32(&img, 8)? as usize;
    let cols = be_u32(&img, 12)? as usize;
    let pixel_bytes = n * rows * cols;
    if img.len() != 16 + pixel_bytes {
        return Err(GrokError::IdxParse {
            offset: img.len().min(16 + pixel_bytes),
            reason: format!(
                "image payload is {} bytes, header implies {}",
                img.len() - 16.min(img.len()),
                pixel_bytes
            ),
        });
    }

    let lmagic = be_u32(&lab, 0)?;
    if lmagic != IDX1_MAGIC {
        return Err(GrokError::IdxParse {
            offset: 0,
            reason: format!("label magic {lmagic}, expected {IDX1_MAGIC}"),
        });
    }
    let ln = be_u32(&lab, 4)? as usize;
    if lab.len() != 8 + ln {
        return Err(GrokError::IdxParse {
            offset: lab.len().min(8 + ln),
            reason: format!("label payload is {} bytes, header implies {ln}", lab.len() - 8.min(lab.len())),
        });
    }
    if ln != n {
        return Err(GrokError::IdxParse {
            offset: 4,
            reason: format!("count mismatch: {n} images vs {ln} labels"),
        });
    }
    if train_count > n {
        return Err(GrokError::InvalidArgument(format!(
            "train_count {train_count} exceeds dataset size {n}"
        )));
    }

    let images: Vec<f64> = img[16..].iter().map(|&b| b as f64 / 255.0).collect();
    let labels: Vec<usize> = lab[8..].iter().map(|&b| b as usize).collect();

    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let train_indices = order[..train_count].to_vec();
    let test_indices = order[train_count..].to_vec();

    Ok(MnistDataset {
        images,
        labels,
        rows,
        cols,
        train_indices,
        test_indices,
        seed,
    })
}

#[cfg(test)]
pub(crate) fn write_idx_pair(
    dir: &Path,
    images: &[Vec<u8>],
    labels: &[u8],
    rows: usize,
    cols: usize,
) -> (std::path::PathBuf, std::path::PathBuf) {
    let img_path = dir.join("images.idx3");
    let lab_path = dir.join("labels.idx1");
    let mut img = Vec::new();
    img.extend_from_slice(&IDX3_MAGIC.to_be_bytes());
    img.extend_from_slice(&(images.len() as u32).to_be_bytes());
    img.extend_from_slice(&(rows as u32).to_be_bytes());
    img.extend_from_slice(&(cols as u32).to_be_bytes());
    for im in images {
        img.extend_from_slice(im);
    }
    let mut lab = Vec::new();
    lab.extend_from_slice(&IDX1_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    lab.extend_from_slice(labels);
    std::fs::write(&img_path, img).unwrap();
    std::fs::write(&lab_path, lab).unwrap();
    (img_path, lab_path)
}
