//! Dense kernels shared by every stage: row-major `f64` matrices, masked
//! row softmax, scaled dot-product attention, cosine similarity, and the
//! splitmix64 source that makes weight synthesis reproducible everywhere.

use crate::error::{Error, Result};

/// Row-major dense matrix of finite `f64` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Shape("matrix contains a non-finite value".into()));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equally long rows. An empty slice yields a
    /// `0 x cols` matrix where `cols` is taken from `width`.
    pub fn from_rows(rows: &[Vec<f64>], width: usize) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * width);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != width {
                return Err(Error::Shape(format!(
                    "row {i} has {} values, expected {width}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Self::from_vec(rows.len(), width, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact panics on a zero chunk size
        let width = self.cols.max(1);
        self.data.chunks_exact(width).take(self.rows)
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    /// New matrix made of the given rows, in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    /// Columns `[start, start + width)` as a new matrix.
    pub fn column_block(&self, start: usize, width: usize) -> Self {
        let mut data = Vec::with_capacity(self.rows * width);
        for r in 0..self.rows {
            data.extend_from_slice(&self.row(r)[start..start + width]);
        }
        Self {
            rows: self.rows,
            cols: width,
            data,
        }
    }

    /// Appends `other`'s rows below `self`.
    pub fn vstack(&self, other: &Matrix) -> Result<Self> {
        if self.cols != other.cols {
            return Err(Error::Shape(format!(
                "cannot stack {} columns onto {}",
                other.cols, self.cols
            )));
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(Self {
            rows: self.rows + other.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn add(&self, other: &Matrix) -> Result<Self> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::Shape(format!(
                "cannot add {}x{} to {}x{}",
                other.rows, other.cols, self.rows, self.cols
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn scale(&self, factor: f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Per-entry visibility for attention scores; `true` means the entry takes
/// part in the softmax, `false` forces its probability to exactly zero.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    visible: Vec<bool>,
}

impl Mask {
    pub fn all_visible(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            visible: vec![true; rows * cols],
        }
    }

    /// Lower-triangular mask: row `i` sees columns `0..=i + offset`.
    pub fn causal(rows: usize, cols: usize, offset: usize) -> Self {
        let mut m = Self::all_visible(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                m.visible[r * cols + c] = c <= r + offset;
            }
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_visible(&self, r: usize, c: usize) -> bool {
        self.visible[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, visible: bool) {
        self.visible[r * self.cols + c] = visible;
    }
}

pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::Shape(format!(
            "cannot multiply {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let a_row = a.row(i);
        let o_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for (k, &a_ik) in a_row.iter().enumerate() {
            if a_ik == 0.0 {
                continue;
            }
            let b_row = &b.data[k * b.cols..(k + 1) * b.cols];
            for (o, &b_kj) in o_row.iter_mut().zip(b_row) {
                *o += a_ik * b_kj;
            }
        }
    }
    Ok(out)
}

/// Softmax over each row, with per-row max subtraction. Masked entries come
/// out as exactly zero.
pub fn row_softmax(m: &Matrix, mask: Option<&Mask>) -> Result<Matrix> {
    if let Some(mask) = mask {
        if mask.rows != m.rows || mask.cols != m.cols {
            return Err(Error::Shape(format!(
                "mask {}x{} does not match scores {}x{}",
                mask.rows, mask.cols, m.rows, m.cols
            )));
        }
    }
    let visible = |r: usize, c: usize| mask.is_none_or(|mk| mk.is_visible(r, c));
    let mut out = Matrix::zeros(m.rows, m.cols);
    for r in 0..m.rows {
        let row = m.row(r);
        let max = (0..m.cols)
            .filter(|&c| visible(r, c))
            .map(|c| row[c])
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(Error::DegenerateRow { row: r });
        }
        let o = out.row_mut(r);
        let mut sum = 0.0;
        for c in 0..m.cols {
            if visible(r, c) {
                let e = (row[c] - max).exp();
                o[c] = e;
                sum += e;
            }
        }
        for v in o.iter_mut() {
            *v /= sum;
        }
    }
    Ok(out)
}

/// `softmax(q kᵀ / √d_k) v`, returning both the output and the attention map.
pub fn scaled_attention(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    mask: Option<&Mask>,
) -> Result<(Matrix, Matrix)> {
    if q.cols != k.cols {
        return Err(Error::Shape(format!(
            "query width {} differs from key width {}",
            q.cols, k.cols
        )));
    }
    if v.rows != k.rows {
        return Err(Error::Shape(format!(
            "{} values for {} keys",
            v.rows, k.rows
        )));
    }
    let scores = matmul(q, &k.transpose())?.scale(1.0 / (k.cols as f64).sqrt());
    let attn = row_softmax(&scores, mask)?;
    let output = matmul(&attn, v)?;
    Ok((output, attn))
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "cosine of vectors with lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::UndefinedSimilarity);
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

const TWO_POW_62: f64 = 4_611_686_018_427_387_904.0;

/// splitmix64 stream. Uniform draws take the high 63 bits `h` of each
/// output and return `h / 2^62 - 1`, i.e. `(2h) / 2^63 - 1`, in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeededSource {
    state: u64,
}

impl SeededSource {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    pub fn next_uniform(&mut self) -> f64 {
        let high = self.next_u64() >> 1;
        high as f64 / TWO_POW_62 - 1.0
    }

    /// Uniform in `[0, 1]`.
    pub fn next_unit(&mut self) -> f64 {
        (self.next_uniform() + 1.0) * 0.5
    }

    /// Uniform integer in `0..n`; `n` must be nonzero.
    pub fn next_index(&mut self, n: usize) -> usize {
        (self.next_u64() % n as u64) as usize
    }

    pub fn matrix(&mut self, rows: usize, cols: usize, scale: f64) -> Matrix {
        let data = (0..rows * cols)
            .map(|_| self.next_uniform() * scale)
            .collect();
        Matrix { rows, cols, data }
    }

    pub fn vector(&mut self, len: usize, scale: f64) -> Vec<f64> {
        (0..len).map(|_| self.next_uniform() * scale).collect()
    }
}
