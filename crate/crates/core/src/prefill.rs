use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cache::KVCache;
use crate::encode::KeyTokenSet;
use crate::error::{Error, Result};
use crate::model::{lm_layer_forward, ToyWeights};
use crate::numeric::{Matrix, SeededSource};
use crate::types::{Modality, TokenId};

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceEntry {
    pub id: TokenId,
    pub modality: Modality,
    pub embedding: Vec<f64>,
}

/// Vision tokens followed by text tokens, as fed to the language model.
#[derive(Debug, Clone, PartialEq)]
pub struct MultimodalSequence {
    entries: Vec<SequenceEntry>,
}

impl MultimodalSequence {
    pub fn new(entries: Vec<SequenceEntry>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        let mut in_text = false;
        let width = entries.first().map_or(0, |e| e.embedding.len());
        for e in &entries {
            if !seen.insert(e.id) {
                return Err(Error::Shape(format!("duplicate token id {}", e.id)));
            }
            if e.embedding.len() != width {
                return Err(Error::Shape(format!(
                    "token {} has width {}, expected {width}",
                    e.id,
                    e.embedding.len()
                )));
            }
            match e.modality {
                Modality::Text => in_text = true,
                Modality::Vision if in_text => {
                    return Err(Error::Shape(format!(
                        "vision token {} follows a text token",
                        e.id
                    )))
                }
                Modality::Vision => {}
            }
        }
        if !in_text {
            return Err(Error::Shape("sequence has no text tokens".into()));
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[SequenceEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn vision_count(&self) -> usize {
        self.entries
            .iter()
            .take_while(|e| e.modality == Modality::Vision)
            .count()
    }

    pub fn text_count(&self) -> usize {
        self.len() - self.vision_count()
    }

    pub fn vision_ids(&self) -> Vec<TokenId> {
        self.entries[..self.vision_count()]
            .iter()
            .map(|e| e.id)
            .collect()
    }

    pub fn tags(&self) -> Vec<(TokenId, Modality)> {
        self.entries.iter().map(|e| (e.id, e.modality)).collect()
    }

    pub fn hidden(&self) -> Matrix {
        let width = self.entries[0].embedding.len();
        let rows: Vec<Vec<f64>> = self.entries.iter().map(|e| e.embedding.clone()).collect();
        Matrix::from_rows(&rows, width).expect("entries share one width")
    }

    fn set_hidden(&mut self, hidden: &Matrix) {
        for (r, e) in self.entries.iter_mut().enumerate() {
            e.embedding = hidden.row(r).to_vec();
        }
    }

    fn without(&self, drop: &BTreeSet<TokenId>) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .filter(|e| !drop.contains(&e.id))
                .cloned()
                .collect(),
        }
    }
}

/// Exactly one of `gamma` and `budget` must be set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrefillConfig {
    /// LM layers after which pruning runs, ascending.
    #[serde(default = "default_prune_layers")]
    pub prune_layers: Vec<usize>,
    #[serde(default)]
    pub gamma: Option<f64>,
    /// Target mean count of surviving vision tokens; resolved to `gamma`
    /// by calibration.
    #[serde(default)]
    pub budget: Option<f64>,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_spare")]
    pub spare_key_set: bool,
}

/// 64 of 576 reference tokens on the default 8x8 grid.
pub const DEFAULT_BUDGET: f64 = 64.0 * 64.0 / 576.0;

fn default_prune_layers() -> Vec<usize> {
    vec![1, 2]
}

fn default_alpha() -> f64 {
    0.05
}

fn default_spare() -> bool {
    true
}

impl Default for PrefillConfig {
    fn default() -> Self {
        Self {
            prune_layers: default_prune_layers(),
            gamma: None,
            budget: Some(DEFAULT_BUDGET),
            alpha: default_alpha(),
            spare_key_set: default_spare(),
        }
    }
}

impl PrefillConfig {
    pub fn with_gamma(gamma: f64) -> Self {
        Self {
            gamma: Some(gamma),
            budget: None,
            ..Self::default()
        }
    }
}

impl PrefillConfig {
    pub fn validate(&self, lm_depth: usize) -> Result<()> {
        if self.prune_layers.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(
                "prefill.prune_layers must be strictly ascending".into(),
            ));
        }
        if let Some(&l) = self.prune_layers.iter().find(|&&l| l >= lm_depth) {
            return Err(Error::Config(format!(
                "prune layer {l} is outside the LM depth {lm_depth}"
            )));
        }
        match (self.gamma, self.budget) {
            (Some(_), Some(_)) => {
                return Err(Error::Config(
                    "set exactly one of prefill.gamma and prefill.budget".into(),
                ))
            }
            (None, None) => {
                return Err(Error::Config(
                    "one of prefill.gamma or prefill.budget is required".into(),
                ))
            }
            (Some(g), None) if !(g.is_finite() && g >= 0.0) => {
                return Err(Error::Config(format!("prefill.gamma {g} must be >= 0")))
            }
            (None, Some(b)) if !(b.is_finite() && b >= 0.0) => {
                return Err(Error::Config(format!("prefill.budget {b} must be >= 0")))
            }
            _ => {}
        }
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(Error::Config(format!(
                "prefill.alpha {} must be >= 0",
                self.alpha
            )));
        }
        Ok(())
    }

    fn resolved_gamma(&self) -> Result<f64> {
        self.gamma.ok_or_else(|| {
            Error::Config("prefill.gamma is unset; calibrate the budget first".into())
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PruneDecision {
    pub layer: usize,
    pub global_scores: BTreeMap<TokenId, f64>,
    /// `γ × ΣV`, the candidate cutoff.
    pub threshold: f64,
    pub candidates: BTreeSet<TokenId>,
    pub individual_max: BTreeMap<TokenId, f64>,
    pub pruned: BTreeSet<TokenId>,
    pub spared_by_key: BTreeSet<TokenId>,
}

/// Column sums of text-row attention over each vision column.
pub fn global_scores(
    attn: &Matrix,
    sequence: &MultimodalSequence,
) -> Result<BTreeMap<TokenId, f64>> {
    let m = sequence.vision_count();
    check_attn(attn, sequence)?;
    let ids = sequence.vision_ids();
    Ok((0..m)
        .map(|j| {
            let v = (m..sequence.len()).map(|i| attn.get(i, j)).sum();
            (ids[j], v)
        })
        .collect())
}

/// Largest single text-row attention on each vision column.
pub fn individual_max(
    attn: &Matrix,
    sequence: &MultimodalSequence,
) -> Result<BTreeMap<TokenId, f64>> {
    let m = sequence.vision_count();
    check_attn(attn, sequence)?;
    let ids = sequence.vision_ids();
    Ok((0..m)
        .map(|j| {
            let v = (m..sequence.len())
                .map(|i| attn.get(i, j))
                .fold(f64::NEG_INFINITY, f64::max);
            (ids[j], v)
        })
        .collect())
}

fn check_attn(attn: &Matrix, sequence: &MultimodalSequence) -> Result<()> {
    if sequence.text_count() == 0 {
        return Err(Error::Config("no text rows to score vision tokens".into()));
    }
    if attn.rows() != sequence.len() || attn.cols() < sequence.len() {
        return Err(Error::Shape(format!(
            "attention map {}x{} does not cover a sequence of {}",
            attn.rows(),
            attn.cols(),
            sequence.len()
        )));
    }
    Ok(())
}

pub fn candidate_threshold(scores: &BTreeMap<TokenId, f64>, gamma: f64) -> f64 {
    gamma * scores.values().sum::<f64>()
}

pub fn candidate_set(scores: &BTreeMap<TokenId, f64>, gamma: f64) -> BTreeSet<TokenId> {
    let cut = candidate_threshold(scores, gamma);
    scores
        .iter()
        .filter(|(_, &v)| v <= cut)
        .map(|(&id, _)| id)
        .collect()
}

/// Candidates whose best single-text attention is also below `alpha`.
pub fn individual_filter(
    maxima: &BTreeMap<TokenId, f64>,
    candidates: &BTreeSet<TokenId>,
    alpha: f64,
) -> BTreeSet<TokenId> {
    candidates
        .iter()
        .copied()
        .filter(|id| maxima.get(id).is_some_and(|&m| m < alpha))
        .collect()
}

/// Dual-filter pruning of `sequence`, whose embeddings are the outputs of
/// `layer` and whose attention map at that layer is `attn`.
pub fn prune_at_layer(
    sequence: &MultimodalSequence,
    attn: &Matrix,
    key_set: &KeyTokenSet,
    config: &PrefillConfig,
    layer: usize,
) -> Result<(MultimodalSequence, PruneDecision)> {
    if !config.prune_layers.contains(&layer) {
        return Err(Error::Config(format!(
            "layer {layer} is not in the prune schedule {:?}",
            config.prune_layers
        )));
    }
    let gamma = config.resolved_gamma()?;
    let scores = global_scores(attn, sequence)?;
    let maxima = individual_max(attn, sequence)?;
    let candidates = candidate_set(&scores, gamma);
    let confirmed = individual_filter(&maxima, &candidates, config.alpha);
    let (spared, pruned): (BTreeSet<TokenId>, BTreeSet<TokenId>) = confirmed
        .into_iter()
        .partition(|&id| config.spare_key_set && key_set.contains(id));
    let decision = PruneDecision {
        layer,
        threshold: candidate_threshold(&scores, gamma),
        global_scores: scores,
        candidates,
        individual_max: maxima,
        pruned,
        spared_by_key: spared,
    };
    Ok((sequence.without(&decision.pruned), decision))
}

/// How vision tokens are dropped at scheduled layers.
#[derive(Debug, Clone, PartialEq)]
pub enum PruneRule {
    /// Global-score candidates confirmed by the individual filter.
    Dual(PrefillConfig),
    /// Keep the `keep` highest global scores; no key protection.
    TopGlobal {
        layers: Vec<usize>,
        keep: usize,
    },
    /// Keep `keep` uniformly chosen vision tokens.
    Random {
        layers: Vec<usize>,
        keep: usize,
        seed: u64,
    },
    Disabled,
}

impl PruneRule {
    fn layers(&self) -> &[usize] {
        match self {
            Self::Dual(c) => &c.prune_layers,
            Self::TopGlobal { layers, .. } | Self::Random { layers, .. } => layers,
            Self::Disabled => &[],
        }
    }
}

#[derive(Debug, Clone)]
pub struct PrefillOutcome {
    pub s_few: BTreeSet<TokenId>,
    pub cache: KVCache,
    pub decisions: Vec<PruneDecision>,
    /// Vision ids alive when each LM layer ran.
    pub layer_vision: Vec<Vec<TokenId>>,
    /// Sequence after the last layer (embeddings are final hidden states).
    pub final_sequence: MultimodalSequence,
}

impl PrefillOutcome {
    pub fn last_hidden(&self) -> &[f64] {
        &self
            .final_sequence
            .entries()
            .last()
            .expect("text is never pruned")
            .embedding
    }
}

pub fn run_prefill(
    sequence: &MultimodalSequence,
    weights: &ToyWeights,
    key_set: &KeyTokenSet,
    config: &PrefillConfig,
) -> Result<PrefillOutcome> {
    config.validate(weights.lm.len())?;
    config.resolved_gamma()?;
    run_prefill_with(sequence, weights, key_set, &PruneRule::Dual(config.clone()))
}

/// Forwards every LM layer with a fresh cache. Each layer's cache holds the
/// tokens alive when it ran; tokens dropped at a layer leave the sequence
/// for the next one.
pub fn run_prefill_with(
    sequence: &MultimodalSequence,
    weights: &ToyWeights,
    key_set: &KeyTokenSet,
    rule: &PruneRule,
) -> Result<PrefillOutcome> {
    let depth = weights.lm.len();
    let mut cache = KVCache::new(depth);
    let mut seq = sequence.clone();
    let mut decisions = Vec::new();
    let mut layer_vision = Vec::with_capacity(depth);
    let first_layer = rule.layers().first().copied();
    for layer in 0..depth {
        layer_vision.push(seq.vision_ids());
        let (hidden, attn) =
            lm_layer_forward(&seq.hidden(), &seq.tags(), weights, layer, Some(&mut cache))?;
        seq.set_hidden(&hidden);
        if !rule.layers().contains(&layer) {
            continue;
        }
        let (next, decision) = match rule {
            PruneRule::Dual(config) => prune_at_layer(&seq, &attn, key_set, config, layer)?,
            PruneRule::TopGlobal { keep, .. } => {
                if Some(layer) != first_layer {
                    continue;
                }
                let scores = global_scores(&attn, &seq)?;
                let mut ranked: Vec<(TokenId, f64)> =
                    scores.iter().map(|(&k, &v)| (k, v)).collect();
                ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
                let pruned: BTreeSet<TokenId> =
                    ranked.iter().skip(*keep).map(|&(id, _)| id).collect();
                let threshold = ranked.get(keep.saturating_sub(1)).map_or(0.0, |r| r.1);
                let decision = PruneDecision {
                    layer,
                    threshold,
                    candidates: pruned.clone(),
                    individual_max: BTreeMap::new(),
                    global_scores: scores,
                    pruned,
                    spared_by_key: BTreeSet::new(),
                };
                (seq.without(&decision.pruned), decision)
            }
            PruneRule::Random { keep, seed, .. } => {
                if Some(layer) != first_layer {
                    continue;
                }
                let mut ids = seq.vision_ids();
                let mut src = SeededSource::new(*seed);
                // Partial Fisher-Yates: the first `keep` slots are the survivors.
                let keep = (*keep).min(ids.len());
                for i in 0..keep {
                    let j = i + src.next_index(ids.len() - i);
                    ids.swap(i, j);
                }
                let pruned: BTreeSet<TokenId> = ids[keep..].iter().copied().collect();
                let decision = PruneDecision {
                    layer,
                    threshold: 0.0,
                    global_scores: BTreeMap::new(),
                    candidates: pruned.clone(),
                    individual_max: BTreeMap::new(),
                    pruned,
                    spared_by_key: BTreeSet::new(),
                };
                (seq.without(&decision.pruned), decision)
            }
            PruneRule::Disabled => unreachable!("no scheduled layers"),
        };
        seq = next;
        decisions.push(decision);
    }
    Ok(PrefillOutcome {
        s_few: seq.vision_ids().into_iter().collect(),
        cache,
        decisions,
        layer_vision,
        final_sequence: seq,
    })
}

/// One fixture ready for the language model.
#[derive(Debug, Clone)]
pub struct PrefillInput {
    pub sequence: MultimodalSequence,
    pub key_set: KeyTokenSet,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Calibration {
    pub gamma: f64,
    pub achieved_mean: f64,
    pub budget: f64,
    pub iterations: usize,
}

const CALIBRATION_TOLERANCE: f64 = 0.05;
const CALIBRATION_STEPS: usize = 40;

pub fn mean_survivors(
    inputs: &[PrefillInput],
    weights: &ToyWeights,
    config: &PrefillConfig,
) -> Result<f64> {
    if inputs.is_empty() {
        return Err(Error::Config("no fixtures to evaluate".into()));
    }
    let counts = inputs
        .par_iter()
        .map(|inp| {
            run_prefill_with(
                &inp.sequence,
                weights,
                &inp.key_set,
                &PruneRule::Dual(config.clone()),
            )
            .map(|o| o.s_few.len())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(counts.iter().sum::<usize>() as f64 / counts.len() as f64)
}

/// Bisects `gamma` until the mean survivor count is within ±5% of the
/// configured budget, keeping the closest value seen.
pub fn calibrate_gamma(
    inputs: &[PrefillInput],
    weights: &ToyWeights,
    config: &PrefillConfig,
) -> Result<Calibration> {
    let budget = config
        .budget
        .ok_or_else(|| Error::Config("calibration needs prefill.budget".into()))?;
    let mut probe = PrefillConfig {
        gamma: Some(0.0),
        budget: None,
        ..config.clone()
    };
    probe.validate(weights.lm.len())?;
    if inputs.is_empty() {
        return Err(Error::Config("no fixtures to calibrate on".into()));
    }
    if config.spare_key_set {
        let floor =
            inputs.iter().map(|i| i.key_set.len()).sum::<usize>() as f64 / inputs.len() as f64;
        if budget < floor {
            return Err(Error::Calibration {
                budget,
                floor,
                reason: "below the mean key-set size".into(),
            });
        }
    }
    let within = |m: f64| (m - budget).abs() <= CALIBRATION_TOLERANCE * budget;

    let full = mean_survivors(inputs, weights, &probe)?;
    if full <= budget || within(full) {
        return Ok(Calibration {
            gamma: 0.0,
            achieved_mean: full,
            budget,
            iterations: 0,
        });
    }
    let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
    let mut best = (f64::INFINITY, 0.0, full);
    for step in 1..=CALIBRATION_STEPS {
        let mid = 0.5 * (lo + hi);
        probe.gamma = Some(mid);
        let m = mean_survivors(inputs, weights, &probe)?;
        let err = (m - budget).abs();
        if err < best.0 {
            best = (err, mid, m);
        }
        if within(m) {
            return Ok(Calibration {
                gamma: mid,
                achieved_mean: m,
                budget,
                iterations: step,
            });
        }
        if m > budget {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(Calibration {
        gamma: best.1,
        achieved_mean: best.2,
        budget,
        iterations: CALIBRATION_STEPS,
    })
}
