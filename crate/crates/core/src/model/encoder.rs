use std::collections::BTreeSet;

use crate::encode::{TokenGrid, VisionToken};
use crate::error::{Error, Result};
use crate::numeric::{matmul, Matrix};
use crate::types::TokenId;

use super::block::block_forward;
use super::weights::ToyWeights;

/// Projects patches to the model width and lays them out on a square grid.
/// Patch `i` (row-major) becomes token id `i + 1`; the CLS embedding is kept
/// beside the grid as token 0.
pub fn encode_patches(patches: &Matrix, weights: &ToyWeights) -> Result<TokenGrid> {
    let n = patches.rows();
    let side = (n as f64).sqrt().round() as usize;
    if n == 0 || side * side != n {
        return Err(Error::Shape(format!(
            "{n} patches do not form a square grid"
        )));
    }
    if patches.cols() != weights.config.patch_dim {
        return Err(Error::Shape(format!(
            "patches have {} values, the model expects {}",
            patches.cols(),
            weights.config.patch_dim
        )));
    }
    let projected = matmul(patches, &weights.patch_proj)?;
    let tokens = (0..n)
        .map(|i| {
            let id = TokenId::from(i + 1);
            VisionToken {
                id,
                embedding: projected
                    .row(i)
                    .iter()
                    .zip(&weights.patch_bias)
                    .map(|(p, b)| p + b)
                    .collect(),
                position: ((i / side) as f64, (i % side) as f64),
                mass: 1,
                provenance: BTreeSet::from([id]),
            }
        })
        .collect();
    Ok(TokenGrid {
        tokens,
        grid_rows: side,
        grid_cols: side,
        cls: weights.cls.clone(),
        layers_applied: 0,
    })
}

/// Bidirectional encoder block over `tokens` (CLS first when present).
/// Returns the new states and the head-averaged attention map.
pub fn encoder_layer_forward(
    tokens: &Matrix,
    weights: &ToyWeights,
    layer: usize,
) -> Result<(Matrix, Matrix)> {
    let block = weights.encoder.get(layer).ok_or_else(|| {
        Error::Config(format!(
            "encoder layer {layer} out of range (depth {})",
            weights.encoder.len()
        ))
    })?;
    let out = block_forward(block, weights.config.num_heads, tokens, None, None)?;
    Ok((out.hidden, out.attn))
}

/// Runs encoder layers `from..to` over CLS plus grid tokens, returning the
/// final states and each layer's attention map.
pub fn forward_encoder(
    stacked: &Matrix,
    weights: &ToyWeights,
    from: usize,
    to: usize,
) -> Result<(Matrix, Vec<Matrix>)> {
    let mut x = stacked.clone();
    let mut maps = Vec::with_capacity(to.saturating_sub(from));
    for layer in from..to {
        let (next, attn) = encoder_layer_forward(&x, weights, layer)?;
        x = next;
        maps.push(attn);
    }
    Ok((x, maps))
}
