//! Deterministic pseudo word embeddings: a stand-in for pretrained vectors.
//!
//! Each class row is seeded by a stable content hash of the class name, so
//! the same name maps to the same unit-norm vector on every run and
//! platform.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::data::Vocab;
use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    vectors: Matrix,
}

/// Stable 64-bit seed from a list of string parts; identical across runs
/// and platforms.
pub(crate) fn stable_seed(parts: &[&str]) -> u64 {
    let mut hasher = Sha256::new();
    for p in parts {
        hasher.update(p.as_bytes());
        hasher.update([0u8]);
    }
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

fn name_seed(name: &str) -> u64 {
    stable_seed(&["embed", name])
}

/// Build the class embedding table; rows have unit Euclidean norm.
pub fn pseudo_embedding(vocab: &Vocab, e_dim: usize) -> Result<EmbeddingTable> {
    if e_dim < 4 {
        return Err(Error::Config(format!(
            "embedding dimension must be at least 4, got {e_dim}"
        )));
    }
    let mut vectors = Matrix::zeros(vocab.num_classes(), e_dim);
    for (i, name) in vocab.class_names().iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(name_seed(name));
        let mut norm_sq = 0.0;
        let row = vectors.row_mut(i);
        for v in row.iter_mut() {
            let x: f64 = StandardNormal.sample(&mut rng);
            *v = x;
            norm_sq += x * x;
        }
        let norm = norm_sq.sqrt();
        for v in row.iter_mut() {
            *v /= norm;
        }
    }
    Ok(EmbeddingTable { vectors })
}

impl EmbeddingTable {
    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.vectors.rows()
    }

    pub fn row(&self, class: usize) -> &[f64] {
        self.vectors.row(class)
    }

    /// probsᵀ · table: convex combination of class rows.
    pub fn semantic_feature(&self, class_probs: &[f64]) -> Vec<f64> {
        debug_assert_eq!(class_probs.len(), self.num_classes());
        let mut out = vec![0.0; self.dim()];
        for (c, &p) in class_probs.iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            for (o, v) in out.iter_mut().zip(self.row(c)) {
                *o += p * v;
            }
        }
        out
    }
}
