use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::numeric::Matrix;
use crate::types::TokenId;

/// A vision token, possibly standing in for several merged patches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisionToken {
    pub id: TokenId,
    pub embedding: Vec<f64>,
    /// Mass-weighted centroid of the absorbed patches, as (row, col).
    pub position: (f64, f64),
    /// Number of original patches absorbed; always `provenance.len()`.
    pub mass: usize,
    pub provenance: BTreeSet<TokenId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenGrid {
    /// Live tokens in ascending id order.
    pub tokens: Vec<VisionToken>,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub cls: Vec<f64>,
    /// Encoder layers already applied to the embeddings held here.
    pub layers_applied: usize,
}

impl TokenGrid {
    /// CLS followed by every live token, one row each.
    pub fn stacked(&self) -> Matrix {
        let width = self.cls.len();
        let mut data = Vec::with_capacity((self.tokens.len() + 1) * width);
        data.extend_from_slice(&self.cls);
        for t in &self.tokens {
            data.extend_from_slice(&t.embedding);
        }
        Matrix::from_vec(self.tokens.len() + 1, width, data).expect("grid rows share a width")
    }

    /// Replaces CLS and token embeddings with the rows of `stacked`.
    pub(crate) fn with_states(&self, stacked: &Matrix, layers_applied: usize) -> TokenGrid {
        let mut out = self.clone();
        out.cls = stacked.row(0).to_vec();
        for (i, t) in out.tokens.iter_mut().enumerate() {
            t.embedding = stacked.row(i + 1).to_vec();
        }
        out.layers_applied = layers_applied;
        out
    }

    pub fn ids(&self) -> Vec<TokenId> {
        self.tokens.iter().map(|t| t.id).collect()
    }

    pub fn total_mass(&self) -> usize {
        self.tokens.iter().map(|t| t.mass).sum()
    }

    pub fn original_patches(&self) -> usize {
        self.grid_rows * self.grid_cols
    }

    pub fn get(&self, id: TokenId) -> Option<&VisionToken> {
        self.tokens.iter().find(|t| t.id == id)
    }
}
