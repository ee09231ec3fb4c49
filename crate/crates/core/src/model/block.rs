use crate::error::{Error, Result};
use crate::numeric::{matmul, scaled_attention, Mask, Matrix};

use super::weights::BlockWeights;

const RMS_EPS: f64 = 1e-6;

pub fn rms_norm_row(x: &[f64]) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms + RMS_EPS).sqrt();
    x.iter().map(|v| v * inv).collect()
}

pub fn rms_norm(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for r in 0..x.rows() {
        let normed = rms_norm_row(x.row(r));
        out.row_mut(r).copy_from_slice(&normed);
    }
    out
}

pub(crate) struct BlockOutput {
    pub hidden: Matrix,
    /// Head-averaged attention, `rows x (context + rows)`.
    pub attn: Matrix,
    pub keys: Matrix,
    pub values: Matrix,
}

/// Pre-norm block: `x + MHSA(norm x)` then `+ FFN(norm ·)` with a ReLU FFN.
///
/// `context` holds already-projected keys and values that precede the new
/// rows (a KV cache layer); the mask, when given, covers `context + rows`
/// columns.
pub(crate) fn block_forward(
    block: &BlockWeights,
    num_heads: usize,
    x: &Matrix,
    context: Option<(&Matrix, &Matrix)>,
    mask: Option<&Mask>,
) -> Result<BlockOutput> {
    let d = x.cols();
    if block.wq.rows() != d {
        return Err(Error::Shape(format!(
            "block expects width {}, got {d}",
            block.wq.rows()
        )));
    }
    let head_dim = d / num_heads;
    let xn = rms_norm(x);
    let q = matmul(&xn, &block.wq)?;
    let k_new = matmul(&xn, &block.wk)?;
    let v_new = matmul(&xn, &block.wv)?;
    let (k_all, v_all) = match context {
        Some((ck, cv)) => (ck.vstack(&k_new)?, cv.vstack(&v_new)?),
        None => (k_new.clone(), v_new.clone()),
    };

    let mut concat = Matrix::zeros(x.rows(), d);
    let mut attn = Matrix::zeros(x.rows(), k_all.rows());
    for h in 0..num_heads {
        let start = h * head_dim;
        let (out_h, attn_h) = scaled_attention(
            &q.column_block(start, head_dim),
            &k_all.column_block(start, head_dim),
            &v_all.column_block(start, head_dim),
            mask,
        )?;
        for r in 0..x.rows() {
            concat.row_mut(r)[start..start + head_dim].copy_from_slice(out_h.row(r));
            for (a, &b) in attn.row_mut(r).iter_mut().zip(attn_h.row(r)) {
                *a += b;
            }
        }
    }
    let attn = attn.scale(1.0 / num_heads as f64);

    let x1 = x.add(&matmul(&concat, &block.wo)?)?;
    let up = matmul(&rms_norm(&x1), &block.ffn_up)?.map(|v| v.max(0.0));
    let hidden = x1.add(&matmul(&up, &block.ffn_down)?)?;
    Ok(BlockOutput {
        hidden,
        attn,
        keys: k_new,
        values: v_new,
    })
}
