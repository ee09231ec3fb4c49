//! Vision-encoding stage: local spatial merging of near-duplicate k×k
//! windows in the first encoder layer, then the CLS-attention key set that
//! later stages must never drop.

mod grid;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

pub use grid::{TokenGrid, VisionToken};

use crate::error::{Error, Result};
use crate::model::{encoder_layer_forward, forward_encoder, ToyWeights};
use crate::numeric::cosine_sim;
use crate::types::TokenId;

/// Attention at or below this counts as no signal when weighting a merge.
const CLS_ATTENTION_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncodeConfig {
    /// Window side; windows are `window_k x window_k` tiles.
    pub window_k: usize,
    /// A window merges when its mean ordered-pair cosine similarity exceeds this.
    pub tau_mean: f64,
    /// Encoder layer whose CLS attention scores the key set. `None` means
    /// the penultimate layer.
    pub key_layer: Option<usize>,
    pub iqr_factor: f64,
}

impl Default for EncodeConfig {
    fn default() -> Self {
        Self {
            window_k: 2,
            tau_mean: 0.8,
            key_layer: None,
            iqr_factor: 1.5,
        }
    }
}

impl EncodeConfig {
    pub fn validate(&self, encoder_depth: usize, grid_side: usize) -> Result<()> {
        if self.window_k < 2 {
            return Err(Error::Config("encode.window_k must be at least 2".into()));
        }
        if self.window_k * self.window_k > grid_side * grid_side {
            return Err(Error::Config(format!(
                "encode.window_k {} needs more than {} tokens",
                self.window_k,
                grid_side * grid_side
            )));
        }
        if !(self.tau_mean > 0.0 && self.tau_mean < 1.0) {
            return Err(Error::Config("encode.tau_mean must lie in (0, 1)".into()));
        }
        if self.iqr_factor < 0.0 || !self.iqr_factor.is_finite() {
            return Err(Error::Config("encode.iqr_factor must be >= 0".into()));
        }
        let key_layer = self.key_layer(encoder_depth);
        if key_layer >= encoder_depth {
            return Err(Error::Config(format!(
                "encode.key_layer {key_layer} is outside the {encoder_depth}-layer encoder"
            )));
        }
        Ok(())
    }

    pub fn key_layer(&self, encoder_depth: usize) -> usize {
        self.key_layer
            .unwrap_or_else(|| encoder_depth.saturating_sub(2))
    }
}

/// One window collapsed into a representative token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeEvent {
    pub window: usize,
    /// Ascending; the first id is the surviving representative.
    pub members: Vec<TokenId>,
    pub similarity: f64,
    pub threshold: f64,
    pub result: TokenId,
}

/// Vision-critical tokens, protected from every later drop.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct KeyTokenSet {
    pub member_ids: BTreeSet<TokenId>,
    /// CLS attention of every scored token, members or not.
    pub scores: BTreeMap<TokenId, f64>,
    pub threshold_used: f64,
}

impl KeyTokenSet {
    pub fn contains(&self, id: TokenId) -> bool {
        self.member_ids.contains(&id)
    }

    pub fn len(&self) -> usize {
        self.member_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.member_ids.is_empty()
    }
}

/// Non-overlapping `k x k` tiles in row-major order, as indices into
/// `grid.tokens`. Boundary tiles are ragged when the grid side is not a
/// multiple of `k`.
pub fn partition_windows(grid: &TokenGrid, k: usize) -> Result<Vec<Vec<usize>>> {
    if k < 2 {
        return Err(Error::Config(format!("window size {k} is below 2")));
    }
    if k > grid.grid_rows && k > grid.grid_cols {
        return Err(Error::Config(format!(
            "window size {k} exceeds the {}x{} grid",
            grid.grid_rows, grid.grid_cols
        )));
    }
    let win_cols = grid.grid_cols.div_ceil(k);
    let win_rows = grid.grid_rows.div_ceil(k);
    let mut windows = vec![Vec::new(); win_rows * win_cols];
    for (i, t) in grid.tokens.iter().enumerate() {
        let (r, c) = (t.position.0 as usize, t.position.1 as usize);
        windows[(r / k) * win_cols + c / k].push(i);
    }
    windows.retain(|w| !w.is_empty());
    Ok(windows)
}

/// Sum of cosine similarity over ordered pairs of distinct window members.
pub fn window_similarity(tokens: &[&VisionToken]) -> Result<f64> {
    if tokens.len() < 2 {
        return Err(Error::Config(
            "window similarity needs at least two tokens".into(),
        ));
    }
    let mut total = 0.0;
    for i in 0..tokens.len() {
        for j in i + 1..tokens.len() {
            total += 2.0 * cosine_sim(&tokens[i].embedding, &tokens[j].embedding)?;
        }
    }
    Ok(total)
}

/// Pair-sum threshold for a window: `tau_mean` times the number of ordered pairs.
pub fn merge_threshold(window_size: usize, tau_mean: f64) -> f64 {
    tau_mean * (window_size * (window_size - 1)) as f64
}

pub fn merge_decision(similarity: f64, window_size: usize, tau_mean: f64) -> bool {
    window_size >= 2 && similarity > merge_threshold(window_size, tau_mean)
}

/// Convex weights `mass × cls_attention`, normalized; mass alone when no
/// member carries CLS attention.
pub fn merge_weights(tokens: &[&VisionToken], cls_attention: &[f64]) -> Vec<f64> {
    let raw: Vec<f64> = if cls_attention.iter().all(|&a| a <= CLS_ATTENTION_FLOOR) {
        tokens.iter().map(|t| t.mass as f64).collect()
    } else {
        tokens
            .iter()
            .zip(cls_attention)
            .map(|(t, &a)| t.mass as f64 * a.max(0.0))
            .collect()
    };
    let total: f64 = raw.iter().sum();
    raw.iter().map(|w| w / total).collect()
}

/// Collapses a window into one token carrying the smallest member id.
pub fn merge_window(tokens: &[&VisionToken], cls_attention: &[f64]) -> VisionToken {
    let weights = merge_weights(tokens, cls_attention);
    let anchor = &tokens[0].embedding;
    // anchor + Σ w (e - anchor) keeps identical members exactly fixed
    let mut embedding = anchor.clone();
    for (t, &w) in tokens.iter().zip(&weights).skip(1) {
        for ((out, &e), &a) in embedding.iter_mut().zip(&t.embedding).zip(anchor) {
            *out += w * (e - a);
        }
    }

    let mass: usize = tokens.iter().map(|t| t.mass).sum();
    let (mut row, mut col) = (0.0, 0.0);
    for t in tokens {
        row += t.mass as f64 * t.position.0;
        col += t.mass as f64 * t.position.1;
    }
    VisionToken {
        id: tokens
            .iter()
            .map(|t| t.id)
            .min()
            .expect("window is nonempty"),
        embedding,
        position: (row / mass as f64, col / mass as f64),
        mass,
        provenance: tokens
            .iter()
            .flat_map(|t| t.provenance.iter().copied())
            .collect(),
    }
}

/// Runs encoder layer 0 and merges every window whose pre-layer similarity
/// passes the threshold. Merged tokens are built from layer-0 outputs and
/// spliced into the layer-1 input; layer 0 is not re-run.
pub fn local_spatial_merge(
    grid: &TokenGrid,
    weights: &ToyWeights,
    config: &EncodeConfig,
) -> Result<(TokenGrid, Vec<MergeEvent>)> {
    if grid.layers_applied != 0 || grid.tokens.iter().any(|t| t.mass != 1) {
        return Err(Error::Config(
            "local spatial merging needs a fresh, unmerged grid".into(),
        ));
    }
    let (after_first, attn) = encoder_layer_forward(&grid.stacked(), weights, 0)?;
    let cls_row = &attn.row(0)[1..];
    let layer_one_input = grid.with_states(&after_first, 1);

    let windows = partition_windows(grid, config.window_k)?;
    let mut tokens = Vec::with_capacity(grid.tokens.len());
    let mut events = Vec::new();
    for (w, members) in windows.iter().enumerate() {
        if members.len() < 2 {
            tokens.extend(members.iter().map(|&i| layer_one_input.tokens[i].clone()));
            continue;
        }
        let before: Vec<&VisionToken> = members.iter().map(|&i| &grid.tokens[i]).collect();
        let similarity = window_similarity(&before)?;
        if !merge_decision(similarity, members.len(), config.tau_mean) {
            tokens.extend(members.iter().map(|&i| layer_one_input.tokens[i].clone()));
            continue;
        }
        let after: Vec<&VisionToken> = members
            .iter()
            .map(|&i| &layer_one_input.tokens[i])
            .collect();
        let attention: Vec<f64> = members.iter().map(|&i| cls_row[i]).collect();
        let merged = merge_window(&after, &attention);
        let mut ids: Vec<TokenId> = after.iter().map(|t| t.id).collect();
        ids.sort();
        events.push(MergeEvent {
            window: w,
            members: ids,
            similarity,
            threshold: merge_threshold(members.len(), config.tau_mean),
            result: merged.id,
        });
        tokens.push(merged);
    }
    tokens.sort_by_key(|t| t.id);
    Ok((
        TokenGrid {
            tokens,
            ..layer_one_input
        },
        events,
    ))
}

/// Quantile with linear interpolation between order statistics.
fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Upper outlier fence over CLS scores: `Q3 + factor × IQR`, or
/// `mean + factor × stddev` when fewer than four scores exist.
pub fn adaptive_threshold(scores: &[f64], factor: f64) -> f64 {
    if scores.is_empty() {
        return 0.0;
    }
    if scores.len() < 4 {
        let n = scores.len() as f64;
        let mean = scores.iter().sum::<f64>() / n;
        let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
        return mean + factor * var.sqrt();
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let q1 = quantile(&sorted, 0.25);
    let q3 = quantile(&sorted, 0.75);
    q3 + factor * (q3 - q1)
}

/// Scores every live token by CLS attention at the key layer and keeps the
/// outliers above the adaptive fence.
pub fn build_key_set(
    grid: &TokenGrid,
    weights: &ToyWeights,
    config: &EncodeConfig,
) -> Result<KeyTokenSet> {
    let key_layer = config.key_layer(weights.encoder.len());
    if key_layer < grid.layers_applied {
        return Err(Error::Config(format!(
            "key layer {key_layer} was already passed (grid is at layer {})",
            grid.layers_applied
        )));
    }
    let (_, maps) = forward_encoder(&grid.stacked(), weights, grid.layers_applied, key_layer + 1)?;
    let attn = maps.last().expect("at least one layer ran");
    let raw: Vec<f64> = attn.row(0)[1..].to_vec();
    Ok(key_set_from_scores(&grid.ids(), &raw, config.iqr_factor))
}

pub fn key_set_from_scores(ids: &[TokenId], scores: &[f64], factor: f64) -> KeyTokenSet {
    let threshold = adaptive_threshold(scores, factor);
    KeyTokenSet {
        member_ids: ids
            .iter()
            .zip(scores)
            .filter(|(_, &s)| s > threshold)
            .map(|(&id, _)| id)
            .collect(),
        scores: ids.iter().copied().zip(scores.iter().copied()).collect(),
        threshold_used: threshold,
    }
}

/// Runs the remaining encoder layers; the result feeds the language model.
pub fn finish_encoder(grid: &TokenGrid, weights: &ToyWeights) -> Result<TokenGrid> {
    let depth = weights.encoder.len();
    let (out, _) = forward_encoder(&grid.stacked(), weights, grid.layers_applied, depth)?;
    Ok(grid.with_states(&out, depth))
}
