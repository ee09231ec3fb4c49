//! End-to-end acceptance gate. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.

use std::collections::{BTreeMap, BTreeSet};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use mustdrop_core::cost::{compression_ratio, kv_megabytes, prefill_flops};
use mustdrop_core::encode::local_spatial_merge;
use mustdrop_core::harness::{
    high_res_schedule, run_pipeline, write_report, write_trace, Baseline, FixtureKind, FixtureRun,
    Harness, PipelineConfig, Policy,
};
use mustdrop_core::model::{
    argmax_token, encode_patches, encoder_layer_forward, lm_layer_forward, lm_layer_forward_masked,
    output_logits, ModelGeometry,
};
use mustdrop_core::numeric::Mask;
use mustdrop_core::prefill::{
    prune_at_layer, Calibration, MultimodalSequence, PrefillConfig, SequenceEntry,
};
use mustdrop_core::trace::{replay, DropKind};
use mustdrop_core::{Matrix, Modality, TokenId};

type Outcome = Result<String, String>;

/// Suite state shared between criteria so each calibration runs once.
struct Context {
    harness: Harness,
    calibrations: BTreeMap<u64, Calibration>,
    runs: BTreeMap<u64, Vec<FixtureRun>>,
}

const REFERENCE_BUDGETS: [f64; 3] = [192.0, 128.0, 64.0];

impl Context {
    fn new() -> Self {
        Self {
            harness: Harness::new(PipelineConfig::default()).expect("default config is valid"),
            calibrations: BTreeMap::new(),
            runs: BTreeMap::new(),
        }
    }

    fn calibration(&mut self, reference: f64) -> Result<Calibration, String> {
        let key = reference as u64;
        if let Some(c) = self.calibrations.get(&key) {
            return Ok(*c);
        }
        let budget = self
            .harness
            .config
            .scaled_budget(reference)
            .map_err(|e| e.to_string())?;
        let c = self
            .harness
            .calibrate(budget, &self.harness.suite_seeds())
            .map_err(|e| e.to_string())?;
        self.calibrations.insert(key, c);
        Ok(c)
    }

    fn runs(&mut self, reference: f64) -> Result<&[FixtureRun], String> {
        let key = reference as u64;
        if !self.runs.contains_key(&key) {
            let gamma = self.calibration(reference)?.gamma;
            let runs = self
                .harness
                .run_suite(Baseline::Mustdrop, &self.harness.suite_seeds(), |_| {
                    Policy {
                        gamma: Some(gamma),
                        keep: None,
                    }
                })
                .map_err(|e| e.to_string())?;
            self.runs.insert(key, runs);
        }
        Ok(&self.runs[&key])
    }
}

fn within_rel(value: f64, expected: f64, tol: f64) -> bool {
    ((value - expected) / expected).abs() <= tol
}

fn mb_rows(geometry: &ModelGeometry, rows: &[(f64, f64)]) -> Outcome {
    let mut detail = Vec::new();
    let mut ok = true;
    for &(tokens, expected) in rows {
        let mb = kv_megabytes(tokens, geometry);
        ok &= within_rel(mb, expected, 0.01);
        detail.push(format!("{tokens} -> {mb:.1} MB (expected {expected})"));
    }
    let line = detail.join(", ");
    if ok {
        Ok(line)
    } else {
        Err(line)
    }
}

fn kv_memory_standard(_: &mut Context) -> Outcome {
    mb_rows(
        &ModelGeometry::llava_15_7b(),
        &[(576.0, 302.4), (440.0, 231.0), (64.0, 33.6), (45.0, 23.6)],
    )
}

fn kv_memory_high_res(_: &mut Context) -> Outcome {
    mb_rows(
        &ModelGeometry::llava_next_7b(),
        &[(2880.0, 1512.1), (320.0, 168.0)],
    )
}

fn compression_ratios(_: &mut Context) -> Outcome {
    let a = compression_ratio(576.0, 45.0).map_err(|e| e.to_string())?;
    let b = compression_ratio(2880.0, 320.0).map_err(|e| e.to_string())?;
    let line = format!("576->45 = {:.2}%, 2880->320 = {:.2}%", 100.0 * a, 100.0 * b);
    if (a - 0.922).abs() <= 0.001 && (b - 0.889).abs() <= 0.001 {
        Ok(line)
    } else {
        Err(line)
    }
}

fn flops_reduction(_: &mut Context) -> Outcome {
    let g = ModelGeometry::llava_next_7b();
    let schedule = high_res_schedule();
    let avg = schedule.iter().sum::<f64>() / schedule.len() as f64;
    let vanilla = prefill_flops(&vec![2880.0; g.num_layers], &g);
    let pruned = prefill_flops(&schedule, &g);
    let reduction = 1.0 - pruned / vanilla;
    let line = format!(
        "{:.2} T -> {:.2} T at mean {avg:.1} tokens, reduction {:.2}%",
        vanilla / 1e12,
        pruned / 1e12,
        100.0 * reduction
    );
    if (avg - 320.0).abs() < 1e-9 && (0.85..=0.92).contains(&reduction) {
        Ok(line)
    } else {
        Err(line)
    }
}

/// Direct loops over the attention map: V_j, the γΣV cutoff, the per-text
/// maximum, and key-set sparing.
fn brute_force_pruned(
    attn: &Matrix,
    seq: &MultimodalSequence,
    gamma: f64,
    alpha: f64,
    keys: &BTreeSet<TokenId>,
) -> BTreeSet<TokenId> {
    let entries = seq.entries();
    let m = entries
        .iter()
        .filter(|e| e.modality == Modality::Vision)
        .count();
    let n = entries.len();
    let mut v = vec![0.0; m];
    let mut max = vec![f64::NEG_INFINITY; m];
    for (j, (vj, mj)) in v.iter_mut().zip(max.iter_mut()).enumerate() {
        for i in m..n {
            *vj += attn.get(i, j);
            *mj = mj.max(attn.get(i, j));
        }
    }
    let total: f64 = v.iter().sum();
    (0..m)
        .filter(|&j| v[j] <= gamma * total && max[j] < alpha && !keys.contains(&entries[j].id))
        .map(|j| entries[j].id)
        .collect()
}

fn prune_oracle(ctx: &mut Context) -> Outcome {
    let calibrated = ctx.calibration(64.0)?.gamma;
    let h = &ctx.harness;
    let w = &h.weights;
    let mut compared = 0;
    let mut nonempty = 0;
    for seed in 0..50u64 {
        let enc = h
            .encode(
                h.fixture(seed).map_err(|e| e.to_string())?,
                Baseline::Mustdrop,
                None,
            )
            .map_err(|e| e.to_string())?;
        for (gamma, alpha) in [(calibrated, 0.05), (0.05, 0.02), (0.5, 0.2)] {
            let config = PrefillConfig {
                alpha,
                ..PrefillConfig::with_gamma(gamma)
            };
            let mut seq = enc.sequence.clone();
            for layer in 0..w.lm.len() {
                let tags: Vec<(TokenId, Modality)> =
                    seq.entries().iter().map(|e| (e.id, e.modality)).collect();
                let (hidden, attn) = lm_layer_forward(&seq.hidden(), &tags, w, layer, None)
                    .map_err(|e| e.to_string())?;
                let entries: Vec<SequenceEntry> = seq
                    .entries()
                    .iter()
                    .enumerate()
                    .map(|(r, e)| SequenceEntry {
                        embedding: hidden.row(r).to_vec(),
                        ..e.clone()
                    })
                    .collect();
                seq = MultimodalSequence::new(entries).map_err(|e| e.to_string())?;
                if !config.prune_layers.contains(&layer) {
                    continue;
                }
                let (next, decision) = prune_at_layer(&seq, &attn, &enc.key_set, &config, layer)
                    .map_err(|e| e.to_string())?;
                let expected =
                    brute_force_pruned(&attn, &seq, gamma, alpha, &enc.key_set.member_ids);
                if decision.pruned != expected {
                    return Err(format!(
                        "seed {seed} layer {layer} gamma {gamma}: got {:?}, oracle {:?}",
                        decision.pruned, expected
                    ));
                }
                compared += 1;
                nonempty += usize::from(!expected.is_empty());
                seq = next;
            }
        }
    }
    Ok(format!(
        "{compared} pruning decisions identical ({nonempty} non-empty)"
    ))
}

/// Dense masked recompute of the whole prompt plus generated tokens with
/// the visibility each cached row had; returns final hidden rows.
fn dense_recompute(run: &FixtureRun, harness: &Harness) -> Result<Matrix, String> {
    let w = &harness.weights;
    let d = &run.details;
    let prompt = d.encoded.sequence.entries();
    let np = prompt.len();
    let steps = run.generated.len().saturating_sub(1);
    let mut rows: Vec<Vec<f64>> = prompt.iter().map(|e| e.embedding.clone()).collect();
    rows.extend(run.generated[..steps].iter().map(|&t| w.embed_token(t)));
    let total = rows.len();
    let mut x = Matrix::from_rows(&rows, w.config.hidden_dim).map_err(|e| e.to_string())?;
    for layer in 0..w.lm.len() {
        let alive: BTreeSet<TokenId> = d.prefill.layer_vision[layer].iter().copied().collect();
        let cached: BTreeSet<TokenId> = d
            .decode
            .evicted_cache
            .vision_ids(layer)
            .into_iter()
            .collect();
        let visible_to_prompt =
            |j: usize| prompt[j].modality == Modality::Text || alive.contains(&prompt[j].id);
        let visible_to_generated =
            |j: usize| prompt[j].modality == Modality::Text || cached.contains(&prompt[j].id);
        let mut mask = Mask::all_visible(total, total);
        for r in 0..total {
            for c in 0..total {
                let v = if r < np {
                    if visible_to_prompt(r) {
                        c <= r && c < np && visible_to_prompt(c)
                    } else {
                        c == r
                    }
                } else if c < np {
                    visible_to_generated(c)
                } else {
                    c <= r
                };
                mask.set(r, c, v);
            }
        }
        x = lm_layer_forward_masked(&x, &mask, w, layer)
            .map_err(|e| e.to_string())?
            .0;
    }
    Ok(x)
}

fn cache_equivalence(ctx: &mut Context) -> Outcome {
    ctx.runs(64.0)?;
    let runs = &ctx.runs[&64];
    let h = &ctx.harness;
    let mut worst: f64 = 0.0;
    let mut tokens = 0;
    for run in runs {
        let dense = dense_recompute(run, h)?;
        let np = run.details.encoded.sequence.len();
        let mut pairs: Vec<(&[f64], Vec<f64>)> = vec![(
            run.details.prefill.last_hidden(),
            dense.row(np - 1).to_vec(),
        )];
        for (k, step) in run.details.decode.steps.iter().enumerate() {
            pairs.push((&step.hidden, dense.row(np + k).to_vec()));
        }
        if pairs.len() != 8 {
            return Err(format!(
                "seed {}: {} positions, expected 8",
                run.seed,
                pairs.len()
            ));
        }
        for (k, (cached, full)) in pairs.iter().enumerate() {
            let diff = cached
                .iter()
                .zip(full)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            worst = worst.max(diff);
            let token = argmax_token(&output_logits(full, &h.weights));
            if token != run.generated[k] {
                return Err(format!(
                    "seed {} step {k}: cached token {}, recomputed {token}",
                    run.seed, run.generated[k]
                ));
            }
            tokens += 1;
        }
    }
    let line = format!(
        "{} fixtures, {tokens} tokens agree, max hidden diff {worst:.2e}",
        runs.len()
    );
    if worst <= 1e-9 {
        Ok(line)
    } else {
        Err(line)
    }
}

fn key_protection(ctx: &mut Context) -> Outcome {
    let depth = ctx.harness.weights.lm.len();
    let initial: Vec<TokenId> = (1..=ctx.harness.config.toy.num_patches() as u32)
        .map(TokenId)
        .collect();
    let mut violations = 0;
    let mut members = 0;
    let mut checked = 0;
    for reference in REFERENCE_BUDGETS {
        for run in ctx.runs(reference)? {
            let r = replay(&run.trace, &initial, depth)
                .map_err(|e| format!("seed {}: {e}", run.seed))?;
            if r.s_few.iter().copied().collect::<Vec<_>>() != run.s_few {
                return Err(format!("seed {}: replayed survivors differ", run.seed));
            }
            for l in 0..depth {
                let cached: BTreeSet<TokenId> = run
                    .details
                    .decode
                    .evicted_cache
                    .vision_ids(l)
                    .into_iter()
                    .collect();
                if r.cached[l] != cached {
                    return Err(format!(
                        "seed {} layer {l}: replayed cache differs",
                        run.seed
                    ));
                }
            }
            if !r.accounting_holds() {
                return Err(format!("seed {}: accounting identity broken", run.seed));
            }
            let removed: BTreeSet<TokenId> = run
                .trace
                .iter()
                .flat_map(|e| match e.kind {
                    DropKind::Merge => e.ids[1..].to_vec(),
                    _ => e.ids.clone(),
                })
                .collect();
            for &k in &run.key_set {
                members += 1;
                let lost = !r.post_encode.contains(&k)
                    || removed.contains(&k)
                    || !r.s_few.contains(&k)
                    || r.cached.iter().any(|c| !c.contains(&k));
                violations += usize::from(lost);
            }
            checked += 1;
        }
    }
    let line = format!("{checked} runs replayed, {members} key members, {violations} violations");
    if violations == 0 {
        Ok(line)
    } else {
        Err(line)
    }
}

fn mass_and_convexity(ctx: &mut Context) -> Outcome {
    let base = &ctx.harness.config;
    let mut fixtures = 0;
    let mut merged = 0;
    for kind in [FixtureKind::Needle, FixtureKind::Blocks, FixtureKind::Noise] {
        let mut config = base.clone();
        config.fixture.kind = kind;
        let h = Harness::new(config).map_err(|e| e.to_string())?;
        let w = &h.weights;
        for seed in h.suite_seeds() {
            let f = h.fixture(seed).map_err(|e| e.to_string())?;
            let grid = encode_patches(&f.patches, w).map_err(|e| e.to_string())?;
            let (after, _) =
                encoder_layer_forward(&grid.stacked(), w, 0).map_err(|e| e.to_string())?;
            let (out, _) =
                local_spatial_merge(&grid, w, &h.config.encode).map_err(|e| e.to_string())?;
            if out.total_mass() != f.patches.rows() {
                return Err(format!("{kind:?} seed {seed}: mass {}", out.total_mass()));
            }
            for t in out.tokens.iter().filter(|t| t.mass > 1) {
                merged += 1;
                let members: Vec<&[f64]> = t
                    .provenance
                    .iter()
                    .map(|id| after.row(id.index()))
                    .collect();
                for (c, &x) in t.embedding.iter().enumerate() {
                    let lo = members.iter().map(|m| m[c]).fold(f64::INFINITY, f64::min);
                    let hi = members
                        .iter()
                        .map(|m| m[c])
                        .fold(f64::NEG_INFINITY, f64::max);
                    if x < lo - 1e-12 || x > hi + 1e-12 {
                        return Err(format!(
                            "{kind:?} seed {seed} token {}: coordinate {c} = {x} outside [{lo}, {hi}]",
                            t.id
                        ));
                    }
                }
            }
            fixtures += 1;
        }
    }
    Ok(format!(
        "{fixtures} fixtures, {merged} merged tokens inside member bounds"
    ))
}

fn calibration(ctx: &mut Context) -> Outcome {
    let mut detail = Vec::new();
    let mut ok = true;
    for reference in REFERENCE_BUDGETS {
        let c = ctx.calibration(reference)?;
        ok &= within_rel(c.achieved_mean, c.budget, 0.05);
        detail.push(format!(
            "{reference}: target {:.2}, mean {:.2} (gamma {:.5})",
            c.budget, c.achieved_mean, c.gamma
        ));
    }
    let line = detail.join("; ");
    if ok {
        Ok(line)
    } else {
        Err(line)
    }
}

fn needle_retention(ctx: &mut Context) -> Outcome {
    let budget = ctx.calibration(64.0)?.budget;
    let runs = ctx.runs(64.0)?.to_vec();
    let keep: BTreeMap<u64, usize> = runs.iter().map(|r| (r.seed, r.s_few.len())).collect();
    let h = &ctx.harness;
    let random = h
        .run_suite(Baseline::RandomDrop, &h.suite_seeds(), |s| Policy {
            gamma: None,
            keep: Some(keep[&s]),
        })
        .map_err(|e| e.to_string())?;
    let kept = |rs: &[FixtureRun]| {
        rs.iter()
            .filter(|r| r.needle_retained == Some(true))
            .count()
    };
    let (ours, theirs) = (kept(&runs), kept(&random));
    let n = runs.len() as f64;
    let fraction = budget / h.config.toy.num_patches() as f64;
    let ceiling = (fraction + 0.10) * n;
    let line = format!("mustdrop {ours}/{n}, random_drop {theirs}/{n} (ceiling {ceiling:.1})");
    if ours as f64 >= 0.95 * n && theirs as f64 <= ceiling {
        Ok(line)
    } else {
        Err(line)
    }
}

fn eviction_constraint(ctx: &mut Context) -> Outcome {
    let keep_from = ctx.harness.config.decode.keep_from_layer;
    let mut violations = 0;
    let mut checks = 0;
    let mut evicted = 0;
    for reference in REFERENCE_BUDGETS {
        for run in ctx.runs(reference)? {
            let allowed: BTreeSet<TokenId> =
                run.s_few.iter().chain(&run.key_set).copied().collect();
            evicted += run
                .details
                .decode
                .evictions
                .iter()
                .map(|e| e.ids.len())
                .sum::<usize>();
            let d = &run.details.decode;
            let snapshots = std::iter::once(
                (0..d.evicted_cache.num_layers())
                    .map(|l| d.evicted_cache.vision_ids(l))
                    .collect::<Vec<_>>(),
            )
            .chain(d.stats.iter().map(|s| s.vision_ids.clone()));
            for layers in snapshots {
                for ids in &layers[keep_from..] {
                    checks += 1;
                    violations += ids.iter().filter(|id| !allowed.contains(id)).count();
                }
            }
        }
    }
    let line =
        format!("{checks} layer snapshots, {evicted} entries evicted, {violations} violations");
    if violations == 0 {
        Ok(line)
    } else {
        Err(line)
    }
}

fn determinism(_: &mut Context) -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut files = Vec::new();
    for i in 0..2 {
        let out = run_pipeline(&PipelineConfig::default()).map_err(|e| e.to_string())?;
        let trace = dir.path().join(format!("trace{i}.jsonl"));
        let report = dir.path().join(format!("report{i}.json"));
        write_trace(&out.trace, &trace).map_err(|e| e.to_string())?;
        write_report(&out.report, &report).map_err(|e| e.to_string())?;
        let read = |p: &std::path::Path| std::fs::read(p).map_err(|e| e.to_string());
        files.push((read(&trace)?, read(&report)?));
    }
    let line = format!(
        "trace {} bytes, report {} bytes",
        files[0].0.len(),
        files[0].1.len()
    );
    if files[0] == files[1] && !files[0].0.is_empty() {
        Ok(line)
    } else {
        Err(line)
    }
}

type Criterion = (&'static str, Duration, fn(&mut Context) -> Outcome);

fn main() -> ExitCode {
    let criteria: [Criterion; 12] = [
        (
            "kv memory, 576/440/64/45 tokens on llava-1.5-7b",
            Duration::from_secs(1),
            kv_memory_standard,
        ),
        (
            "kv memory, 2880/320 tokens on llava-next-7b",
            Duration::from_secs(1),
            kv_memory_high_res,
        ),
        (
            "compression ratios",
            Duration::from_secs(1),
            compression_ratios,
        ),
        (
            "prefill FLOPs reduction at 320/2880",
            Duration::from_secs(1),
            flops_reduction,
        ),
        (
            "pruning matches brute-force set algebra (50 fixtures)",
            Duration::from_secs(30),
            prune_oracle,
        ),
        (
            "cached decode equals dense recompute (100 x 8)",
            Duration::from_secs(60),
            cache_equivalence,
        ),
        (
            "key tokens never dropped, by trace replay",
            Duration::from_secs(60),
            key_protection,
        ),
        (
            "merge mass conservation and convexity",
            Duration::from_secs(30),
            mass_and_convexity,
        ),
        (
            "gamma calibration hits 3 budgets within 5%",
            Duration::from_secs(120),
            calibration,
        ),
        (
            "needle retention vs random drop",
            Duration::from_secs(120),
            needle_retention,
        ),
        (
            "post-eviction caches hold only survivors and keys",
            Duration::from_secs(60),
            eviction_constraint,
        ),
        (
            "run artifacts are byte-identical",
            Duration::from_secs(10),
            determinism,
        ),
    ];
    let mut ctx = Context::new();
    let mut failed = 0;
    for (i, (name, limit, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = check(&mut ctx);
        let elapsed = start.elapsed();
        let (status, detail) = match &outcome {
            Ok(d) if elapsed <= *limit => ("PASS", d.clone()),
            Ok(d) => ("FAIL", format!("{d}; took longer than {limit:?}")),
            Err(d) => ("FAIL", d.clone()),
        };
        failed += usize::from(status == "FAIL");
        println!(
            "{status} {:>2} {name} [{:.2}s]: {detail}",
            i + 1,
            elapsed.as_secs_f64()
        );
    }
    println!(
        "{} of {} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
