use std::path::Path;

use serde::Serialize;

use crate::encode::finish_encoder;
use crate::error::{Error, Result};
use crate::model::{encode_patches, lm_layer_forward, rms_norm, ToyWeights};
use crate::numeric::{matmul, norm, Matrix, SeededSource};
use crate::types::{Modality, TokenId};

use super::config::{FixtureKind, FixtureSpec};

/// Background noise of needle fixtures when `FixtureSpec::noise` is unset.
pub const NEEDLE_NOISE: f64 = 0.61;
/// Attention the query row must put on the needle at its layer.
pub const NEEDLE_MIN_SHARE: f64 = 0.05;
const MAX_ATTEMPTS: u64 = 32;
/// Query embedding norm in units of `√hidden`.
const QUERY_SCALE: f64 = 16.0;

pub const TEXT_ID_BASE: u32 = 1 << 16;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Fixture {
    pub kind: FixtureKind,
    pub seed: u64,
    /// Regenerations needed before the needle check passed.
    pub attempt: u64,
    #[serde(skip)]
    pub patches: Matrix,
    pub text_ids: Vec<usize>,
    /// Text positions whose embedding is replaced by a constructed query.
    #[serde(skip)]
    pub queries: Vec<(usize, Vec<f64>)>,
    pub needle: Option<TokenId>,
}

impl Fixture {
    pub fn text_embeddings(&self, weights: &ToyWeights) -> Vec<Vec<f64>> {
        self.text_ids
            .iter()
            .enumerate()
            .map(|(i, &t)| match self.queries.iter().find(|q| q.0 == i) {
                Some((_, e)) => e.clone(),
                None => weights.embed_token(t),
            })
            .collect()
    }

    pub fn text_entries(&self, weights: &ToyWeights) -> Vec<(TokenId, Vec<f64>)> {
        self.text_embeddings(weights)
            .into_iter()
            .enumerate()
            .map(|(i, e)| (TokenId(TEXT_ID_BASE + i as u32), e))
            .collect()
    }
}

fn derive_seed(seed: u64, salt: u64) -> u64 {
    SeededSource::new(seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15)).next_u64()
}

/// Builds the fixture for `seed`. Needle fixtures aim one query token per
/// entry of `prune_layers` at the needle and are regenerated until, in the
/// no-drop model, each query's attention peaks on the needle with at least
/// [`NEEDLE_MIN_SHARE`] of its row.
pub fn generate_fixture(
    spec: &FixtureSpec,
    seed: u64,
    weights: &ToyWeights,
    prune_layers: &[usize],
) -> Result<Fixture> {
    spec.validate()?;
    let cfg = &weights.config;
    let patches = match spec.kind {
        FixtureKind::Noise => {
            let mut src = SeededSource::new(derive_seed(seed, 1));
            src.matrix(cfg.num_patches(), cfg.patch_dim, 1.0)
        }
        FixtureKind::Blocks => blocks(
            cfg.grid_side,
            cfg.patch_dim,
            spec.noise.unwrap_or(0.0),
            seed,
        ),
        FixtureKind::ImageFile => {
            let path = spec.path.as_deref().expect("validated");
            let (w, h, pixels) = read_pgm(path)?;
            tile_image(w, h, &pixels, cfg.patch_dim)?
        }
        FixtureKind::Needle => return needle(spec, seed, weights, prune_layers),
    };
    Ok(Fixture {
        kind: spec.kind,
        seed,
        attempt: 0,
        patches,
        text_ids: random_text(cfg.text_len, cfg.vocab_size, seed),
        queries: Vec::new(),
        needle: None,
    })
}

fn random_text(len: usize, vocab: usize, seed: u64) -> Vec<usize> {
    let mut src = SeededSource::new(derive_seed(seed, 2));
    (0..len).map(|_| src.next_index(vocab)).collect()
}

/// Four rectangles split at a seeded row and column, each one colour.
fn blocks(side: usize, dim: usize, noise: f64, seed: u64) -> Matrix {
    let mut src = SeededSource::new(derive_seed(seed, 3));
    let colours: Vec<Vec<f64>> = (0..4).map(|_| src.vector(dim, 1.0)).collect();
    let cut = |src: &mut SeededSource| {
        if side < 2 {
            side
        } else {
            1 + src.next_index(side - 1)
        }
    };
    let (rc, cc) = (cut(&mut src), cut(&mut src));
    let mut m = Matrix::zeros(side * side, dim);
    for r in 0..side {
        for c in 0..side {
            let region = usize::from(r >= rc) * 2 + usize::from(c >= cc);
            let row = m.row_mut(r * side + c);
            for (x, &base) in row.iter_mut().zip(&colours[region]) {
                *x = base + noise * src.next_uniform();
            }
        }
    }
    m
}

fn needle(
    spec: &FixtureSpec,
    seed: u64,
    weights: &ToyWeights,
    prune_layers: &[usize],
) -> Result<Fixture> {
    let cfg = &weights.config;
    let mut layers: Vec<usize> = if prune_layers.is_empty() {
        vec![0]
    } else {
        prune_layers.to_vec()
    };
    layers.truncate(cfg.text_len);
    let noise = spec.noise.unwrap_or(NEEDLE_NOISE);
    for attempt in 0..MAX_ATTEMPTS {
        let s = derive_seed(seed, 100 + attempt);
        let mut src = SeededSource::new(s);
        let background = src.vector(cfg.patch_dim, 1.0);
        let mut spike = src.vector(cfg.patch_dim, 1.0);
        let bb: f64 = background.iter().map(|x| x * x).sum();
        let proj: f64 = spike
            .iter()
            .zip(&background)
            .map(|(a, b)| a * b)
            .sum::<f64>()
            / bb;
        for (x, b) in spike.iter_mut().zip(&background) {
            *x -= proj * b;
        }
        let ratio = spec.needle_scale * bb.sqrt() / norm(&spike);
        spike.iter_mut().for_each(|x| *x *= ratio);

        let n = cfg.num_patches();
        let cell = src.next_index(n);
        let mut patches = Matrix::zeros(n, cfg.patch_dim);
        for i in 0..n {
            let row = patches.row_mut(i);
            if i == cell {
                row.copy_from_slice(&spike);
            } else {
                for (x, &b) in row.iter_mut().zip(&background) {
                    *x = b + noise * src.next_uniform();
                }
            }
        }
        let needle_id = TokenId::from(cell + 1);
        let mut fixture = Fixture {
            kind: FixtureKind::Needle,
            seed,
            attempt,
            patches,
            text_ids: random_text(cfg.text_len, cfg.vocab_size, s),
            queries: Vec::new(),
            needle: Some(needle_id),
        };
        let vision = unmerged_vision(&fixture.patches, weights)?;
        let first_query = cfg.text_len - layers.len();
        for (q, &layer) in layers.iter().enumerate() {
            let e = query_embedding(&vision, cell, layer, weights)?;
            fixture.queries.push((first_query + q, e));
        }
        if needle_is_attended(&fixture, &vision, &layers, weights)? {
            return Ok(fixture);
        }
    }
    Err(Error::Fixture(format!(
        "no needle construction for seed {seed} passed the attention check in {MAX_ATTEMPTS} attempts"
    )))
}

/// Encoder output for every patch, no merging.
fn unmerged_vision(patches: &Matrix, weights: &ToyWeights) -> Result<Matrix> {
    let grid = finish_encoder(&encode_patches(patches, weights)?, weights)?;
    let rows: Vec<Vec<f64>> = grid.tokens.iter().map(|t| t.embedding.clone()).collect();
    Matrix::from_rows(&rows, weights.config.hidden_dim)
}

/// Direction that maximises the head-summed score gap between the needle's
/// key and the mean background key at `layer`.
fn query_embedding(
    vision: &Matrix,
    cell: usize,
    layer: usize,
    weights: &ToyWeights,
) -> Result<Vec<f64>> {
    let n = vision.rows();
    let tags: Vec<(TokenId, Modality)> = (0..n)
        .map(|i| (TokenId::from(i + 1), Modality::Vision))
        .collect();
    let mut h = vision.clone();
    for l in 0..layer {
        h = lm_layer_forward(&h, &tags, weights, l, None)?.0;
    }
    let keys = matmul(&rms_norm(&h), &weights.lm[layer].wk)?;
    let d = weights.config.hidden_dim;
    let mut gap = keys.row(cell).to_vec();
    for (c, v) in gap.iter_mut().enumerate() {
        let bg: f64 = (0..n)
            .filter(|&i| i != cell)
            .map(|i| keys.get(i, c))
            .sum::<f64>()
            / (n - 1).max(1) as f64;
        *v -= bg;
    }
    let wq = &weights.lm[layer].wq;
    let g: Vec<f64> = (0..d)
        .map(|i| (0..d).map(|c| wq.get(i, c) * gap[c]).sum())
        .collect();
    let len = norm(&g);
    if len == 0.0 {
        return Err(Error::Fixture("needle key equals the background".into()));
    }
    let scale = QUERY_SCALE * (d as f64).sqrt() / len;
    Ok(g.iter().map(|x| x * scale).collect())
}

fn needle_is_attended(
    fixture: &Fixture,
    vision: &Matrix,
    layers: &[usize],
    weights: &ToyWeights,
) -> Result<bool> {
    let m = vision.rows();
    let text = fixture.text_embeddings(weights);
    let mut rows: Vec<Vec<f64>> = vision.row_iter().map(<[f64]>::to_vec).collect();
    rows.extend(text);
    let mut h = Matrix::from_rows(&rows, weights.config.hidden_dim)?;
    let tags: Vec<(TokenId, Modality)> = (0..rows.len())
        .map(|i| {
            let m_ = if i < m {
                Modality::Vision
            } else {
                Modality::Text
            };
            (TokenId::from(i + 1), m_)
        })
        .collect();
    let needle = fixture.needle.expect("needle fixture").index() - 1;
    let deepest = *layers.iter().max().expect("at least one layer");
    for l in 0..=deepest {
        let (next, attn) = lm_layer_forward(&h, &tags, weights, l, None)?;
        h = next;
        for (q, &layer) in layers.iter().enumerate() {
            if layer != l {
                continue;
            }
            let row = m + fixture.queries[q].0;
            let best = (0..m)
                .max_by(|&a, &b| {
                    attn.get(row, a)
                        .total_cmp(&attn.get(row, b))
                        .then(b.cmp(&a))
                })
                .expect("vision tokens exist");
            if best != needle || attn.get(row, needle) < NEEDLE_MIN_SHARE {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

/// Reads a binary (P5) portable graymap as values in `[0, 1]`.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    parse_pgm(&std::fs::read(path)?)
}

pub fn parse_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<f64>)> {
    let err = |offset: usize, message: &str| Error::Parse {
        offset,
        message: message.into(),
    };
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(err(0, "missing P5 magic number"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (i, field) in fields.iter_mut().enumerate() {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            let what = ["width", "height", "maxval"][i];
            return Err(err(start, &format!("expected {what}")));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("ascii digits");
        *field = text.parse().map_err(|_| err(start, "number too large"))?;
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(err(2, "image has a zero dimension"));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(err(pos, "maxval must be in 1..=65535"));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(err(pos, "expected whitespace before pixel data"));
    }
    pos += 1;
    let depth = if maxval < 256 { 1 } else { 2 };
    let need = width * height * depth;
    let data = &bytes[pos..];
    if data.len() < need {
        return Err(err(
            pos + data.len(),
            &format!("pixel data truncated: {} of {need} bytes", data.len()),
        ));
    }
    let scale = maxval as f64;
    let pixels = (0..width * height)
        .map(|i| {
            let v = if depth == 1 {
                data[i] as usize
            } else {
                (data[2 * i] as usize) << 8 | data[2 * i + 1] as usize
            };
            (v.min(maxval)) as f64 / scale
        })
        .collect();
    Ok((width, height, pixels))
}

/// Cuts the largest top-left square of whole `p x p` tiles, `p² = patch_dim`,
/// into row-major patches.
pub fn tile_image(width: usize, height: usize, pixels: &[f64], patch_dim: usize) -> Result<Matrix> {
    let p = (patch_dim as f64).sqrt().round() as usize;
    if p * p != patch_dim {
        return Err(Error::Fixture(format!(
            "patch_dim {patch_dim} is not a square tile"
        )));
    }
    let side = (width / p).min(height / p);
    if side == 0 {
        return Err(Error::Fixture(format!(
            "{width}x{height} image is smaller than one {p}x{p} tile"
        )));
    }
    let mut m = Matrix::zeros(side * side, patch_dim);
    for tr in 0..side {
        for tc in 0..side {
            let row = m.row_mut(tr * side + tc);
            for y in 0..p {
                for x in 0..p {
                    row[y * p + x] = pixels[(tr * p + y) * width + tc * p + x];
                }
            }
        }
    }
    Ok(m)
}

/// Grid files written by [`write_pgm`] round-trip through [`read_pgm`].
pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    std::fs::write(path, out)?;
    Ok(())
}
