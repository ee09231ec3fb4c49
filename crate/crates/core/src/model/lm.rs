use crate::cache::{CacheEntry, KVCache};
use crate::error::{Error, Result};
use crate::numeric::{Mask, Matrix};
use crate::types::{Modality, TokenId};

use super::block::{block_forward, rms_norm_row};
use super::weights::{BlockWeights, ToyWeights};

fn lm_block(weights: &ToyWeights, layer: usize) -> Result<&BlockWeights> {
    weights.lm.get(layer).ok_or_else(|| {
        Error::Config(format!(
            "LM layer {layer} out of range (depth {})",
            weights.lm.len()
        ))
    })
}

/// Causal LM block over `hidden` (one row per entry in `entries`).
///
/// With a cache, the rows attend to every entry already cached at `layer`
/// plus the new rows up to their own position, and their keys and values
/// are appended afterwards. The returned attention map has
/// `cached + rows` columns.
pub fn lm_layer_forward(
    hidden: &Matrix,
    entries: &[(TokenId, Modality)],
    weights: &ToyWeights,
    layer: usize,
    cache: Option<&mut KVCache>,
) -> Result<(Matrix, Matrix)> {
    let block = lm_block(weights, layer)?;
    if entries.len() != hidden.rows() {
        return Err(Error::Shape(format!(
            "{} ids for {} hidden rows",
            entries.len(),
            hidden.rows()
        )));
    }
    let heads = weights.config.num_heads;
    let d = weights.config.hidden_dim;
    let n = hidden.rows();
    match cache {
        None => {
            let mask = Mask::causal(n, n, 0);
            let out = block_forward(block, heads, hidden, None, Some(&mask))?;
            Ok((out.hidden, out.attn))
        }
        Some(cache) => {
            if cache.num_layers() != weights.lm.len() {
                return Err(Error::Cache(format!(
                    "cache has {} layers, the model has {}",
                    cache.num_layers(),
                    weights.lm.len()
                )));
            }
            let c = cache.len(layer);
            let mask = Mask::causal(n, c + n, c);
            let out = if c == 0 {
                block_forward(block, heads, hidden, None, Some(&mask))?
            } else {
                let keys = cache.keys(layer, d);
                let values = cache.values(layer, d);
                block_forward(block, heads, hidden, Some((&keys, &values)), Some(&mask))?
            };
            for (r, &(id, modality)) in entries.iter().enumerate() {
                cache.push(
                    layer,
                    CacheEntry {
                        id,
                        modality,
                        key: out.keys.row(r).to_vec(),
                        value: out.values.row(r).to_vec(),
                    },
                )?;
            }
            Ok((out.hidden, out.attn))
        }
    }
}

/// Dense LM block with an arbitrary `rows x rows` visibility mask. This is
/// the reference path pruning and caching are checked against.
pub fn lm_layer_forward_masked(
    hidden: &Matrix,
    mask: &Mask,
    weights: &ToyWeights,
    layer: usize,
) -> Result<(Matrix, Matrix)> {
    let block = lm_block(weights, layer)?;
    let out = block_forward(block, weights.config.num_heads, hidden, None, Some(mask))?;
    Ok((out.hidden, out.attn))
}

/// Vocabulary logits for one final hidden state.
pub fn output_logits(hidden: &[f64], weights: &ToyWeights) -> Vec<f64> {
    let normed = rms_norm_row(hidden);
    let head = &weights.lm_head;
    (0..head.cols())
        .map(|v| {
            normed
                .iter()
                .enumerate()
                .map(|(i, x)| x * head.get(i, v))
                .sum()
        })
        .collect()
}

/// Greedy choice; ties go to the smallest token id.
pub fn argmax_token(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &l) in logits.iter().enumerate() {
        if l > logits[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ToyConfig;
    use crate::numeric::SeededSource;

    fn setup(n: usize) -> (ToyWeights, Matrix, Vec<(TokenId, Modality)>) {
        let w = ToyWeights::synthesize(&ToyConfig::default(), 7).unwrap();
        let x = SeededSource::new(3).matrix(n, 32, 1.0);
        let ids = (0..n)
            .map(|i| {
                let m = if i < n - 2 {
                    Modality::Vision
                } else {
                    Modality::Text
                };
                (TokenId::from(i + 1), m)
            })
            .collect();
        (w, x, ids)
    }

    #[test]
    fn cached_step_matches_full_recompute() {
        let n = 10;
        let (w, x, ids) = setup(n);
        let prefix = x.select_rows(&(0..n - 1).collect::<Vec<_>>());
        let last = x.select_rows(&[n - 1]);

        let mut cache = KVCache::new(4);
        let mut h = prefix;
        let mut step = last;
        for layer in 0..4 {
            let (out, _) =
                lm_layer_forward(&h, &ids[..n - 1], &w, layer, Some(&mut cache)).unwrap();
            h = out;
            let (s, _) =
                lm_layer_forward(&step, &ids[n - 1..], &w, layer, Some(&mut cache)).unwrap();
            step = s;
        }

        let mut full = x.clone();
        for layer in 0..4 {
            full = lm_layer_forward(&full, &ids, &w, layer, None).unwrap().0;
        }
        for (a, b) in step.row(0).iter().zip(full.row(n - 1)) {
            assert!((a - b).abs() < 1e-9);
        }
        assert_eq!(cache.len(3), n);
    }

    #[test]
    fn vision_prefix_sees_only_vision() {
        let (w, x, ids) = setup(6);
        let (_, attn) = lm_layer_forward(&x, &ids, &w, 0, None).unwrap();
        for r in 0..4 {
            for c in 4..6 {
                assert_eq!(attn.get(r, c), 0.0);
            }
        }
    }

    #[test]
    fn empty_cache_fills_to_sequence_length() {
        let (w, x, ids) = setup(6);
        let mut cache = KVCache::new(4);
        lm_layer_forward(&x, &ids, &w, 0, Some(&mut cache)).unwrap();
        assert_eq!(cache.len(0), 6);
        assert_eq!(cache.len(1), 0);
    }

    #[test]
    fn cache_layer_mismatch() {
        let (w, x, ids) = setup(4);
        let mut cache = KVCache::new(2);
        assert!(matches!(
            lm_layer_forward(&x, &ids, &w, 0, Some(&mut cache)),
            Err(Error::Cache(_))
        ));
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax_token(&[1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax_token(&[0.0, 0.0]), 0);
    }

    #[test]
    fn pruned_sequence_matches_masked_full_sequence() {
        let n = 9;
        let (w, x, ids) = setup(n);
        let keep = [0usize, 2, 3, 6, 7, 8];
        let reduced = x.select_rows(&keep);
        let reduced_ids: Vec<_> = keep.iter().map(|&i| ids[i]).collect();
        let (short, _) = lm_layer_forward(&reduced, &reduced_ids, &w, 1, None).unwrap();
        let mut mask = Mask::causal(n, n, 0);
        for r in 0..n {
            for c in 0..n {
                if !keep.contains(&c) {
                    mask.set(r, c, false);
                }
            }
        }
        let (long, _) = lm_layer_forward_masked(&x, &mask, &w, 1).unwrap();
        for (j, &i) in keep.iter().enumerate() {
            for (a, b) in short.row(j).iter().zip(long.row(i)) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }
}
