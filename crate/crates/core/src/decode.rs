use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::cache::KVCache;
use crate::encode::KeyTokenSet;
use crate::error::{Error, Result};
use crate::model::{argmax_token, lm_layer_forward, output_logits, ToyWeights};
use crate::numeric::Matrix;
use crate::types::{Modality, TokenId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    /// First LM layer whose cache keeps only surviving vision tokens.
    pub keep_from_layer: usize,
    pub max_new_tokens: usize,
    pub greedy: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            keep_from_layer: 2,
            max_new_tokens: 8,
            greedy: true,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self, lm_depth: usize) -> Result<()> {
        if self.keep_from_layer > lm_depth {
            return Err(Error::Config(format!(
                "decode.keep_from_layer {} exceeds the LM depth {lm_depth}",
                self.keep_from_layer
            )));
        }
        if !self.greedy {
            return Err(Error::Config("only greedy decoding is supported".into()));
        }
        Ok(())
    }
}

/// Vision entries removed from one cache layer.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvictEvent {
    pub layer: usize,
    pub ids: Vec<TokenId>,
}

/// Drops, from every layer at or past `keep_from_layer`, the cached vision
/// entries outside `s_few ∪ key_set`.
pub fn evict_output_aware(
    cache: &KVCache,
    s_few: &BTreeSet<TokenId>,
    key_set: &KeyTokenSet,
    config: &DecodeConfig,
) -> Result<(KVCache, Vec<EvictEvent>)> {
    let mut out = cache.clone();
    let mut events = Vec::new();
    for layer in config.keep_from_layer..cache.num_layers() {
        let doomed: Vec<TokenId> = cache
            .vision_ids(layer)
            .into_iter()
            .filter(|id| !s_few.contains(id) && !key_set.contains(*id))
            .collect();
        for &id in &doomed {
            out.evict(layer, id)?;
        }
        if !doomed.is_empty() {
            events.push(EvictEvent { layer, ids: doomed });
        }
    }
    Ok((out, events))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeStep {
    pub next_token: usize,
    pub logits: Vec<f64>,
    pub hidden: Vec<f64>,
    /// Final-layer attention of the new row over the cache, new row last.
    pub final_attention: Vec<(TokenId, f64)>,
}

/// Runs one new token (`id`, `embedding`) through every layer against the
/// cache, appending its keys and values.
pub fn decode_step(
    cache: &mut KVCache,
    id: TokenId,
    embedding: &[f64],
    weights: &ToyWeights,
) -> Result<DecodeStep> {
    if let Some(layer) = (0..cache.num_layers()).find(|&l| cache.len(l) == 0) {
        return Err(Error::Cache(format!("layer {layer} cache is empty")));
    }
    let mut x = Matrix::from_vec(1, embedding.len(), embedding.to_vec())?;
    let mut attn = Matrix::zeros(1, 0);
    let last = weights.lm.len().saturating_sub(1);
    let mut ids = Vec::new();
    for layer in 0..weights.lm.len() {
        if layer == last {
            ids = cache.ids(layer);
            ids.push(id);
        }
        let (h, a) = lm_layer_forward(&x, &[(id, Modality::Text)], weights, layer, Some(cache))?;
        x = h;
        attn = a;
    }
    let hidden = x.row(0).to_vec();
    let logits = output_logits(&hidden, weights);
    Ok(DecodeStep {
        next_token: argmax_token(&logits),
        logits,
        hidden,
        final_attention: ids.into_iter().zip(attn.row(0).iter().copied()).collect(),
    })
}

/// Cache occupancy right after one decode step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepStats {
    pub step: usize,
    pub entries: Vec<usize>,
    pub vision_ids: Vec<Vec<TokenId>>,
}

#[derive(Debug, Clone)]
pub struct DecodeOutcome {
    pub generated: Vec<usize>,
    pub evictions: Vec<EvictEvent>,
    /// Cache right after eviction, before any generated token.
    pub evicted_cache: KVCache,
    pub cache: KVCache,
    pub steps: Vec<DecodeStep>,
    pub stats: Vec<StepStats>,
}

/// Ids given to generated tokens when they enter the cache.
pub const GENERATED_ID_BASE: u32 = 1 << 20;

/// Evicts once, takes the first token from the prefill's last hidden state,
/// then feeds each generated token back until `max_new_tokens` exist.
pub fn run_decode(
    cache: &KVCache,
    prefill_hidden: &[f64],
    s_few: &BTreeSet<TokenId>,
    key_set: &KeyTokenSet,
    weights: &ToyWeights,
    config: &DecodeConfig,
) -> Result<DecodeOutcome> {
    config.validate(weights.lm.len())?;
    let (evicted, evictions) = evict_output_aware(cache, s_few, key_set, config)?;
    let mut live = evicted.clone();
    let mut generated = Vec::new();
    let mut steps = Vec::new();
    let mut stats = Vec::new();
    if config.max_new_tokens > 0 {
        generated.push(argmax_token(&output_logits(prefill_hidden, weights)));
    }
    while generated.len() < config.max_new_tokens {
        let step = steps.len();
        let prev = *generated.last().expect("first token exists");
        let id = TokenId(GENERATED_ID_BASE + step as u32);
        let out = decode_step(&mut live, id, &weights.embed_token(prev), weights)?;
        generated.push(out.next_token);
        steps.push(out);
        stats.push(StepStats {
            step,
            entries: (0..live.num_layers()).map(|l| live.len(l)).collect(),
            vision_ids: (0..live.num_layers()).map(|l| live.vision_ids(l)).collect(),
        });
    }
    Ok(DecodeOutcome {
        generated,
        evictions,
        evicted_cache: evicted,
        cache: live,
        steps,
        stats,
    })
}
