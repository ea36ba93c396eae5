//! Small dense-vector helpers shared by the ranking and matching stages.

use serde::{Deserialize, Serialize};

const LANES: usize = 8;

/// Dot product of two equal-length slices.
///
/// Accumulates in eight independent f32 lanes so the loop vectorizes; the
/// summation order is fixed, so the result is bit-reproducible for a given
/// pair of inputs.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f32; LANES];
    let chunks = n / LANES;
    for c in 0..chunks {
        let base = c * LANES;
        for l in 0..LANES {
            acc[l] += a[base + l] * b[base + l];
        }
    }
    let mut tail = 0.0f32;
    for i in chunks * LANES..n {
        tail += a[i] * b[i];
    }
    let mut sum = tail;
    for v in acc {
        sum += v;
    }
    sum
}

/// Rows stored column by column, so one vector can be dotted against all
/// of them with contiguous, vectorizable updates. Each result is
/// bit-identical to [`dot`]: lane `l` accumulates the terms `k ≡ l (mod 8)`
/// in order, the tail accumulates separately, and the lanes are summed onto
/// the tail in lane order.
#[derive(Debug, Clone)]
pub struct ColumnBlock {
    n: usize,
    d: usize,
    cols: Vec<f32>,
    lanes: Vec<f32>,
}

impl ColumnBlock {
    /// `rows` must all have length `d`.
    pub fn new<'a>(rows: impl ExactSizeIterator<Item = &'a [f32]>, d: usize) -> Self {
        let n = rows.len();
        let mut cols = vec![0.0f32; n * d];
        for (j, row) in rows.enumerate() {
            debug_assert_eq!(row.len(), d);
            for (k, &v) in row.iter().enumerate().take(d) {
                cols[k * n + j] = v;
            }
        }
        Self { n, d, cols, lanes: vec![0.0; LANES * n] }
    }

    pub fn rows(&self) -> usize {
        self.n
    }

    /// Writes `dot(a, row_j)` into `out[j]`. `out` must hold `rows()` values.
    pub fn dots(&mut self, a: &[f32], out: &mut [f32]) {
        let (n, d) = (self.n, self.d);
        debug_assert_eq!(a.len(), d);
        if n == 0 {
            return;
        }
        let out = &mut out[..n];
        let full = d / LANES * LANES;
        self.lanes.fill(0.0);
        for (k, &x) in a.iter().enumerate().take(full) {
            let lane = &mut self.lanes[(k % LANES) * n..(k % LANES + 1) * n];
            for (acc, &c) in lane.iter_mut().zip(&self.cols[k * n..(k + 1) * n]) {
                *acc += x * c;
            }
        }
        out.fill(0.0);
        for (k, &x) in a.iter().enumerate().take(d).skip(full) {
            for (acc, &c) in out.iter_mut().zip(&self.cols[k * n..(k + 1) * n]) {
                *acc += x * c;
            }
        }
        for lane in self.lanes.chunks_exact(n) {
            for (acc, &v) in out.iter_mut().zip(lane) {
                *acc += v;
            }
        }
    }
}

/// Euclidean norm, accumulated in f64.
pub fn norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt()
}

/// Returns `v / ‖v‖`, or `None` when the norm is zero or not finite.
pub fn normalized(v: &[f32]) -> Option<Vec<f32>> {
    let n = norm(v);
    if n == 0.0 || !n.is_finite() {
        return None;
    }
    Some(v.iter().map(|&x| (x as f64 / n) as f32).collect())
}

/// Row-major dense f32 matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Builds a matrix from row-major data; `None` if the length is wrong.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Option<Self> {
        (rows.checked_mul(cols)? == data.len()).then_some(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Option<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return None;
        }
        Some(Self {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f32) {
        self.data[i * self.cols + j] = v;
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// `self · rhs`, accumulated in f64 per output element.
    pub fn matmul(&self, rhs: &Matrix) -> Option<Matrix> {
        if self.cols != rhs.rows {
            return None;
        }
        let mut out = vec![0.0f64; self.rows * rhs.cols];
        for i in 0..self.rows {
            let out_row = &mut out[i * rhs.cols..(i + 1) * rhs.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                let a = a as f64;
                for (o, &b) in out_row.iter_mut().zip(rhs.row(k)) {
                    *o += a * b as f64;
                }
            }
        }
        Some(Matrix {
            rows: self.rows,
            cols: rhs.cols,
            data: out.into_iter().map(|x| x as f32).collect(),
        })
    }
}
