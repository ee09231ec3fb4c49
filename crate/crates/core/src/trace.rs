//! Line-delimited audit stream of every token removal, and its replay.

use std::collections::BTreeSet;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::TokenId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Encode,
    Prefill,
    Decode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DropKind {
    Merge,
    Prune,
    Evict,
}

/// Field order is the serialized order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DropEvent {
    pub seq: u64,
    pub stage: Stage,
    pub kind: DropKind,
    pub layer: usize,
    /// Merge: all members, survivor first. Prune and evict: removed ids.
    pub ids: Vec<TokenId>,
    pub score: Option<f64>,
    pub threshold: Option<f64>,
}

/// Append-only event log that numbers events as they arrive.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trace {
    events: Vec<DropEvent>,
}

impl Trace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(
        &mut self,
        stage: Stage,
        kind: DropKind,
        layer: usize,
        ids: Vec<TokenId>,
        score: Option<f64>,
        threshold: Option<f64>,
    ) {
        let seq = self.events.len() as u64;
        self.events.push(DropEvent {
            seq,
            stage,
            kind,
            layer,
            ids,
            score,
            threshold,
        });
    }

    pub fn events(&self) -> &[DropEvent] {
        &self.events
    }
}

pub fn emit_trace(events: &[DropEvent], mut out: impl Write) -> Result<()> {
    for e in events {
        serde_json::to_writer(&mut out, e)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn parse_trace(text: &str) -> Result<Vec<DropEvent>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

/// Token sets rebuilt from a trace.
#[derive(Debug, Clone, PartialEq)]
pub struct Replay {
    pub post_encode: BTreeSet<TokenId>,
    /// Vision ids alive when each LM layer ran.
    pub layer_alive: Vec<BTreeSet<TokenId>>,
    pub s_few: BTreeSet<TokenId>,
    /// Per-layer cached vision ids after eviction.
    pub cached: Vec<BTreeSet<TokenId>>,
    /// Prefill-pruned count before each layer ran.
    pub pruned_before: Vec<usize>,
    pub evicted: Vec<usize>,
}

impl Replay {
    /// `post_encode − pruned_before(l) − evicted(l) = cached(l)` for all `l`.
    pub fn accounting_holds(&self) -> bool {
        (0..self.cached.len()).all(|l| {
            self.post_encode.len() as i64 - self.pruned_before[l] as i64 - self.evicted[l] as i64
                == self.cached[l].len() as i64
        })
    }
}

fn trace_err(e: &DropEvent, msg: impl std::fmt::Display) -> Error {
    Error::Fixture(format!("trace event {}: {msg}", e.seq))
}

/// Replays events over the initial vision ids of a model with `num_layers`
/// LM layers. Malformed traces (out-of-order, unknown or repeated ids)
/// are errors.
pub fn replay(events: &[DropEvent], initial: &[TokenId], num_layers: usize) -> Result<Replay> {
    let mut live: BTreeSet<TokenId> = initial.iter().copied().collect();
    let mut last: Option<(u64, Stage)> = None;
    let mut post_encode = None;
    let mut prunes: Vec<Vec<TokenId>> = vec![Vec::new(); num_layers];
    let mut evictions: Vec<Option<Vec<TokenId>>> = vec![None; num_layers];

    for e in events {
        if let Some((seq, stage)) = last {
            if e.seq <= seq || e.stage < stage {
                return Err(trace_err(e, "out of order"));
            }
        }
        last = Some((e.seq, e.stage));
        match (e.stage, e.kind) {
            (Stage::Encode, DropKind::Merge) => {
                let (survivor, rest) = e
                    .ids
                    .split_first()
                    .ok_or_else(|| trace_err(e, "empty merge"))?;
                if !live.contains(survivor) {
                    return Err(trace_err(e, format!("survivor {survivor} is not live")));
                }
                for id in rest {
                    if !live.remove(id) {
                        return Err(trace_err(e, format!("{id} is not live")));
                    }
                }
            }
            (Stage::Encode, DropKind::Prune) => {
                for id in &e.ids {
                    if !live.remove(id) {
                        return Err(trace_err(e, format!("{id} is not live")));
                    }
                }
            }
            (Stage::Prefill, DropKind::Prune) => {
                let encoded = post_encode.get_or_insert_with(|| live.clone());
                if e.layer >= num_layers {
                    return Err(trace_err(e, "layer out of range"));
                }
                for id in &e.ids {
                    if !encoded.contains(id) || prunes.iter().flatten().any(|p| p == id) {
                        return Err(trace_err(e, format!("{id} is not live")));
                    }
                    prunes[e.layer].push(*id);
                }
            }
            (Stage::Decode, DropKind::Evict) => {
                post_encode.get_or_insert_with(|| live.clone());
                if e.layer >= num_layers || evictions[e.layer].is_some() {
                    return Err(trace_err(e, "bad or repeated eviction layer"));
                }
                evictions[e.layer] = Some(e.ids.clone());
            }
            _ => return Err(trace_err(e, "stage and kind do not match")),
        }
    }

    let post_encode = post_encode.unwrap_or(live);
    let mut alive = post_encode.clone();
    let mut layer_alive = Vec::with_capacity(num_layers);
    let mut pruned_before = Vec::with_capacity(num_layers);
    let mut removed = 0;
    for layer_prunes in &prunes {
        layer_alive.push(alive.clone());
        pruned_before.push(removed);
        for id in layer_prunes {
            alive.remove(id);
            removed += 1;
        }
    }
    let mut cached = layer_alive.clone();
    let mut evicted = vec![0; num_layers];
    for (l, ev) in evictions.iter().enumerate() {
        for id in ev.iter().flatten() {
            if !cached[l].remove(id) {
                return Err(Error::Fixture(format!(
                    "eviction of {id} at layer {l}, which was not cached"
                )));
            }
            evicted[l] += 1;
        }
    }
    Ok(Replay {
        post_encode,
        layer_alive,
        s_few: alive,
        cached,
        pruned_before,
        evicted,
    })
}
