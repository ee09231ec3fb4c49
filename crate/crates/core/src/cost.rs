//! Closed-form KV-cache memory and FLOPs accounting.

use serde::{Deserialize, Serialize};

use crate::cache::KVCache;
use crate::error::{Error, Result};
use crate::model::ModelGeometry;

pub const BYTES_PER_MB: f64 = 1e6;

/// `tokens × 2 × layers × hidden × bytes_per_element`.
pub fn kv_bytes(tokens: u64, geometry: &ModelGeometry) -> u64 {
    tokens * per_token_bytes(geometry)
}

/// Same as [`kv_bytes`] for averaged (fractional) token counts, in MB.
pub fn kv_megabytes(tokens: f64, geometry: &ModelGeometry) -> f64 {
    tokens * per_token_bytes(geometry) as f64 / BYTES_PER_MB
}

fn per_token_bytes(g: &ModelGeometry) -> u64 {
    2 * (g.num_layers * g.hidden_dim * g.bytes_per_element) as u64
}

/// Bytes held by a cache, counted from the stored vectors.
pub fn cache_bytes(cache: &KVCache, bytes_per_element: usize) -> u64 {
    (0..cache.num_layers())
        .flat_map(|l| cache.layer(l))
        .map(|e| ((e.key.len() + e.value.len()) * bytes_per_element) as u64)
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FlopsMode {
    Prefill,
    /// One new token attending over `cache_len` entries (itself included).
    Decode {
        cache_len: f64,
    },
}

/// Multiply-adds count as 2 FLOPs; norms and softmax are ignored.
///
/// Prefill: `4nd² + 2n²d + 2ndm` (projections, scores plus weighted sum,
/// FFN). Decode step: `4d² + 2cd + 2dm`.
pub fn flops_layer(n_tokens: f64, geometry: &ModelGeometry, mode: FlopsMode) -> f64 {
    let d = geometry.hidden_dim as f64;
    let m = geometry.ffn_dim as f64;
    match mode {
        FlopsMode::Prefill => {
            let n = n_tokens;
            4.0 * n * d * d + 2.0 * n * n * d + 2.0 * n * d * m
        }
        FlopsMode::Decode { cache_len } => 4.0 * d * d + 2.0 * cache_len * d + 2.0 * d * m,
    }
}

/// Prefill FLOPs summed over layers with each layer's live token count.
pub fn prefill_flops(layer_tokens: &[f64], geometry: &ModelGeometry) -> f64 {
    layer_tokens
        .iter()
        .map(|&n| flops_layer(n, geometry, FlopsMode::Prefill))
        .sum()
}

pub fn compression_ratio(original: f64, final_avg: f64) -> Result<f64> {
    if original.is_nan() || original <= 0.0 {
        return Err(Error::Config(format!(
            "original token count must be positive, got {original}"
        )));
    }
    Ok(1.0 - final_avg / original)
}

/// Vision-token counts of one run (or a mean over runs) on the toy model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageCounts {
    pub original: f64,
    pub post_encode: f64,
    /// Vision tokens in each LM layer's cache after prefill.
    pub prefill_layers: Vec<f64>,
    /// Same, after output-aware eviction.
    pub decode_layers: Vec<f64>,
    pub text: f64,
    pub decode_steps: f64,
}

impl StageCounts {
    /// Field-wise mean; every element must share the layer count.
    pub fn mean(all: &[StageCounts]) -> Result<StageCounts> {
        let first = all
            .first()
            .ok_or_else(|| Error::Config("no runs to average".into()))?;
        let depth = first.prefill_layers.len();
        if all
            .iter()
            .any(|c| c.prefill_layers.len() != depth || c.decode_layers.len() != depth)
        {
            return Err(Error::Shape("runs disagree on layer count".into()));
        }
        let n = all.len() as f64;
        let avg = |f: &dyn Fn(&StageCounts) -> f64| all.iter().map(f).sum::<f64>() / n;
        Ok(StageCounts {
            original: avg(&|c| c.original),
            post_encode: avg(&|c| c.post_encode),
            prefill_layers: (0..depth).map(|l| avg(&|c| c.prefill_layers[l])).collect(),
            decode_layers: (0..depth).map(|l| avg(&|c| c.decode_layers[l])).collect(),
            text: avg(&|c| c.text),
            decode_steps: avg(&|c| c.decode_steps),
        })
    }

    /// Rescales the vision counts so that `original` becomes `target`.
    pub fn rescaled(&self, target: f64) -> StageCounts {
        let f = if self.original > 0.0 {
            target / self.original
        } else {
            0.0
        };
        StageCounts {
            original: target,
            post_encode: self.post_encode * f,
            prefill_layers: self.prefill_layers.iter().map(|v| v * f).collect(),
            decode_layers: self.decode_layers.iter().map(|v| v * f).collect(),
            ..self.clone()
        }
    }
}

/// Maps accounting layer `p` of `target` layers onto toy layer
/// `min(p, toy − 1)`: shallow layers keep their index, every deeper layer
/// behaves like the deepest toy layer.
pub fn stretch_layers(toy: &[f64], target: usize) -> Vec<f64> {
    if toy.is_empty() {
        return vec![0.0; target];
    }
    (0..target).map(|p| toy[p.min(toy.len() - 1)]).collect()
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KvStages {
    pub original: f64,
    pub post_encode: f64,
    pub prefill: f64,
    pub decode: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopStages {
    pub prefill_vanilla: f64,
    pub prefill: f64,
    pub decode_vanilla: f64,
    pub decode: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub geometry: String,
    pub original_tokens: f64,
    pub post_encode_tokens: f64,
    pub prefill_layer_tokens: Vec<f64>,
    pub prefill_avg_tokens: f64,
    pub decode_layer_tokens: Vec<f64>,
    pub final_avg_tokens: f64,
    pub kv_mb: KvStages,
    pub flops: FlopStages,
    pub compression_ratio: f64,
    pub flops_reduction: f64,
}

impl CostReport {
    /// Prices `counts` under `geometry`, stretching toy layers to its depth.
    pub fn from_counts(counts: &StageCounts, geometry: &ModelGeometry) -> Result<Self> {
        geometry.validate()?;
        let layers = geometry.num_layers;
        let prefill = stretch_layers(&counts.prefill_layers, layers);
        let decode = stretch_layers(&counts.decode_layers, layers);
        let prefill_avg = mean(&prefill);
        let final_avg = mean(&decode);

        let with_text = |v: &[f64]| v.iter().map(|n| n + counts.text).collect::<Vec<_>>();
        let vanilla_layers = vec![counts.original + counts.text; layers];
        let prefill_vanilla = prefill_flops(&vanilla_layers, geometry);
        let prefill_actual = prefill_flops(&with_text(&prefill), geometry);

        let steps = counts.decode_steps.round() as usize;
        let decode_cost = |layer_tokens: &[f64]| -> f64 {
            (0..steps)
                .map(|s| {
                    layer_tokens
                        .iter()
                        .map(|&v| {
                            let c = v + counts.text + s as f64 + 1.0;
                            flops_layer(1.0, geometry, FlopsMode::Decode { cache_len: c })
                        })
                        .sum::<f64>()
                })
                .sum()
        };
        let decode_vanilla = decode_cost(&vec![counts.original; layers]);
        let decode_actual = decode_cost(&decode);

        let total_vanilla = prefill_vanilla + decode_vanilla;
        Ok(Self {
            geometry: geometry.name.clone(),
            original_tokens: counts.original,
            post_encode_tokens: counts.post_encode,
            prefill_layer_tokens: prefill,
            prefill_avg_tokens: prefill_avg,
            decode_layer_tokens: decode,
            final_avg_tokens: final_avg,
            kv_mb: KvStages {
                original: kv_megabytes(counts.original, geometry),
                post_encode: kv_megabytes(counts.post_encode, geometry),
                prefill: kv_megabytes(prefill_avg, geometry),
                decode: kv_megabytes(final_avg, geometry),
            },
            flops: FlopStages {
                prefill_vanilla,
                prefill: prefill_actual,
                decode_vanilla,
                decode: decode_actual,
            },
            compression_ratio: compression_ratio(counts.original, final_avg)?,
            flops_reduction: 1.0 - (prefill_actual + decode_actual) / total_vanilla,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cache::CacheEntry;
    use crate::types::{Modality, TokenId};

    fn v15() -> ModelGeometry {
        ModelGeometry::llava_15_7b()
    }

    #[test]
    fn kv_bytes_examples() {
        assert_eq!(kv_bytes(576, &v15()), 301_989_888);
        assert!((kv_megabytes(64.0, &v15()) - 33.554432).abs() < 1e-9);
        let next = ModelGeometry::llava_next_7b();
        assert!((kv_megabytes(320.0, &next) - 167.77216).abs() < 1e-9);
        assert!((kv_megabytes(2880.0, &next) - 1509.94944).abs() < 1e-9);
        assert_eq!(kv_bytes(0, &v15()), 0);
    }

    #[test]
    fn kv_bytes_is_linear() {
        let g = v15();
        for (a, b) in [(1, 2), (45, 64), (100, 476)] {
            assert_eq!(kv_bytes(a + b, &g), kv_bytes(a, &g) + kv_bytes(b, &g));
        }
    }

    #[test]
    fn single_token_layer() {
        let g = v15();
        let (d, m) = (4096.0, 11008.0);
        let f = flops_layer(1.0, &g, FlopsMode::Prefill);
        assert_eq!(f, 4.0 * d * d + 2.0 * d + 2.0 * d * m);
        let dec = flops_layer(1.0, &g, FlopsMode::Decode { cache_len: 1.0 });
        assert_eq!(dec, f);
    }

    #[test]
    fn prefill_is_superlinear() {
        let g = v15();
        for n in [1.0, 10.0, 576.0] {
            let one = flops_layer(n, &g, FlopsMode::Prefill);
            let two = flops_layer(2.0 * n, &g, FlopsMode::Prefill);
            assert!(two > 2.0 * one);
        }
    }

    #[test]
    fn compression_examples() {
        assert!((compression_ratio(576.0, 45.0).unwrap() - 0.921875).abs() < 1e-12);
        assert!((compression_ratio(2880.0, 320.0).unwrap() - 0.888_888_888_888_889).abs() < 1e-12);
        assert_eq!(compression_ratio(7.0, 7.0).unwrap(), 0.0);
        assert!(compression_ratio(0.0, 0.0).is_err());
    }

    #[test]
    fn stretch_clamps_to_deepest() {
        let toy = [64.0, 40.0, 10.0, 8.0];
        let s = stretch_layers(&toy, 32);
        assert_eq!(&s[..4], &toy);
        assert_eq!(&s[4..], &[8.0; 28]);
        assert_eq!(stretch_layers(&toy, 4), toy.to_vec());
    }

    #[test]
    fn identity_run_has_no_savings() {
        let counts = StageCounts {
            original: 64.0,
            post_encode: 64.0,
            prefill_layers: vec![64.0; 4],
            decode_layers: vec![64.0; 4],
            text: 4.0,
            decode_steps: 7.0,
        };
        let r = CostReport::from_counts(&counts, &v15()).unwrap();
        assert_eq!(r.compression_ratio, 0.0);
        assert_eq!(r.flops_reduction, 0.0);
        assert_eq!(r.kv_mb.decode, r.kv_mb.original);
    }

    #[test]
    fn mean_of_counts() {
        let a = StageCounts {
            original: 64.0,
            post_encode: 50.0,
            prefill_layers: vec![50.0, 20.0],
            decode_layers: vec![50.0, 10.0],
            text: 4.0,
            decode_steps: 7.0,
        };
        let b = StageCounts {
            post_encode: 40.0,
            prefill_layers: vec![40.0, 10.0],
            decode_layers: vec![40.0, 6.0],
            ..a.clone()
        };
        let m = StageCounts::mean(&[a, b.clone()]).unwrap();
        assert_eq!(m.post_encode, 45.0);
        assert_eq!(m.decode_layers, vec![45.0, 8.0]);
        let short = StageCounts {
            prefill_layers: vec![1.0],
            ..b
        };
        assert!(StageCounts::mean(&[m, short]).is_err());
    }

    #[test]
    fn measured_cache_bytes_match_formula() {
        let geometry = ModelGeometry {
            name: "toy".into(),
            num_layers: 3,
            hidden_dim: 8,
            ffn_dim: 16,
            num_heads: 2,
            bytes_per_element: 2,
            reference_vision_tokens: 5,
        };
        let mut cache = KVCache::new(3);
        for l in 0..3 {
            for id in 0..5u32 {
                cache
                    .push(
                        l,
                        CacheEntry {
                            id: TokenId(id),
                            modality: Modality::Vision,
                            key: vec![0.0; 8],
                            value: vec![0.0; 8],
                        },
                    )
                    .unwrap();
            }
        }
        assert_eq!(cache_bytes(&cache, 2), kv_bytes(5, &geometry));
    }
}
