//! Minimal dense kernel: row-major `f64` matrices, vectors, masked softmax,
//! and the seeded generator used for weight and embedding initialization.

use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
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
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                op: "Matrix::from_vec",
                expected: rows * cols,
                actual: data.len(),
            });
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("Matrix::from_vec"));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from nested rows. All rows must share a length.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::DimensionMismatch {
                    op: "Matrix::from_rows",
                    expected: cols,
                    actual: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Self::from_vec(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0 || self.cols == 0
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact panics on 0; a zero-column matrix still has `rows` empty rows
        (0..self.rows).map(move |i| self.row(i))
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[(j, i)] = self[(i, j)];
            }
        }
        out
    }

    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.rows {
            return Err(Error::DimensionMismatch {
                op: "matmul",
                expected: self.cols,
                actual: rhs.rows,
            });
        }
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            let lhs_row = self.row(i);
            let out_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
            for (k, &a) in lhs_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(rhs.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// Copies the block `rows x cols` out of `self`.
    pub fn slice(
        &self,
        rows: std::ops::Range<usize>,
        cols: std::ops::Range<usize>,
    ) -> Result<Matrix> {
        if rows.end > self.rows
            || cols.end > self.cols
            || rows.start > rows.end
            || cols.start > cols.end
        {
            return Err(Error::DimensionMismatch {
                op: "Matrix::slice",
                expected: self.rows.max(self.cols),
                actual: rows.end.max(cols.end),
            });
        }
        let mut data = Vec::with_capacity(rows.len() * cols.len());
        for i in rows.clone() {
            data.extend_from_slice(&self.row(i)[cols.clone()]);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols: cols.len(),
            data,
        })
    }

    /// Keeps the listed rows, in the given order.
    pub fn select_rows(&self, keep: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(keep.len() * self.cols);
        for &i in keep {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: keep.len(),
            cols: self.cols,
            data,
        }
    }

    /// Column range `[start, start + width)` as a new matrix.
    pub fn column_block(&self, start: usize, width: usize) -> Matrix {
        let mut out = Matrix::zeros(self.rows, width);
        for i in 0..self.rows {
            out.row_mut(i)
                .copy_from_slice(&self.row(i)[start..start + width]);
        }
        out
    }

    pub fn add_assign(&mut self, rhs: &Matrix) -> Result<()> {
        if self.shape() != rhs.shape() {
            return Err(Error::DimensionMismatch {
                op: "add_assign",
                expected: self.data.len(),
                actual: rhs.data.len(),
            });
        }
        for (a, b) in self.data.iter_mut().zip(&rhs.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&mut self, alpha: f64) {
        self.data.iter_mut().for_each(|x| *x *= alpha);
    }

    pub fn map_inplace(&mut self, f: impl Fn(f64) -> f64) {
        self.data.iter_mut().for_each(|x| *x = f(*x));
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

/// Dense `f64` vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vector(Vec<f64>);

impl Vector {
    pub fn new(data: Vec<f64>) -> Self {
        Self(data)
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn sum(&self) -> f64 {
        self.0.iter().sum()
    }

    pub fn scaled(&self, alpha: f64) -> Vector {
        Vector(self.0.iter().map(|x| x * alpha).collect())
    }
}

impl From<Vec<f64>> for Vector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

impl std::ops::Deref for Vector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// Boolean matrix of allowed (`true`) attention positions.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl Mask {
    /// Lower-triangular mask: position `(i, j)` is allowed iff `j <= i`.
    pub fn causal(rows: usize, cols: usize) -> Self {
        let mut allowed = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            allowed.extend((0..cols).map(|j| j <= i));
        }
        Self {
            rows,
            cols,
            allowed,
        }
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut allowed = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            allowed.extend((0..cols).map(|j| f(i, j)));
        }
        Self {
            rows,
            cols,
            allowed,
        }
    }

    pub fn is_allowed(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.cols + j]
    }
}

/// Row-wise softmax with max subtraction. Masked positions are exactly zero.
pub fn softmax_rows(m: &Matrix, mask: Option<&Mask>) -> Result<Matrix> {
    if m.is_empty() {
        return Err(Error::Empty("softmax_rows"));
    }
    if !m.all_finite() {
        return Err(Error::NonFinite("softmax_rows input"));
    }
    if let Some(mask) = mask {
        if (mask.rows, mask.cols) != m.shape() {
            return Err(Error::DimensionMismatch {
                op: "softmax_rows mask",
                expected: m.rows * m.cols,
                actual: mask.rows * mask.cols,
            });
        }
    }
    let allowed = |i: usize, j: usize| mask.is_none_or(|mk| mk.is_allowed(i, j));

    let mut out = Matrix::zeros(m.rows, m.cols);
    for i in 0..m.rows {
        let row = m.row(i);
        let max = row
            .iter()
            .enumerate()
            .filter(|&(j, _)| allowed(i, j))
            .map(|(_, &x)| x)
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(Error::FullyMaskedRow { row: i });
        }
        let out_row = out.row_mut(i);
        let mut total = 0.0;
        for (j, (o, &x)) in out_row.iter_mut().zip(row).enumerate() {
            if allowed(i, j) {
                *o = (x - max).exp();
                total += *o;
            }
        }
        for o in out_row.iter_mut() {
            *o /= total;
        }
    }
    Ok(out)
}

/// `out[j] = sum_i w[i] * m[i][j]`, i.e. `w^T m`.
pub fn matvec_left(w: &[f64], m: &Matrix) -> Result<Vector> {
    if w.len() != m.rows {
        return Err(Error::DimensionMismatch {
            op: "matvec_left",
            expected: m.rows,
            actual: w.len(),
        });
    }
    let mut out = vec![0.0; m.cols];
    for (wi, row) in w.iter().zip(m.iter_rows()) {
        for (o, &x) in out.iter_mut().zip(row) {
            *o += wi * x;
        }
    }
    Ok(Vector(out))
}

/// Sums over the row (query) dimension: `out[i] = sum_j m[j][i]`.
pub fn column_sums(m: &Matrix) -> Result<Vector> {
    if m.is_empty() {
        return Err(Error::Empty("column_sums"));
    }
    let ones = vec![1.0; m.rows];
    matvec_left(&ones, m)
}

/// SplitMix64 counter generator.
///
/// Each draw advances the counter by `0x9E3779B97F4A7C15` and returns the
/// standard SplitMix64 finalizer of the new counter. Floats take the top 53
/// bits; normals use Box-Muller and consume exactly two `u64` draws each
/// (the cosine branch only), so the stream is reproducible from the
/// description alone.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeededRng {
    seed: u64,
    state: u64,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self { seed, state: seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in `[0, 1)`.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal.
    pub fn next_normal(&mut self) -> f64 {
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Uniform integer in `[0, bound)` by rejection sampling.
    pub fn below(&mut self, bound: u64) -> u64 {
        assert!(bound > 0, "below() needs a positive bound");
        let zone = u64::MAX - (u64::MAX % bound);
        loop {
            let x = self.next_u64();
            if x < zone {
                return x % bound;
            }
        }
    }

    /// `k` distinct indices from `0..n`, sorted ascending (partial Fisher-Yates).
    pub fn sample_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n, "cannot sample {k} of {n}");
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.below((n - i) as u64) as usize;
            pool.swap(i, j);
        }
        let mut out = pool[..k].to_vec();
        out.sort_unstable();
        out
    }

    pub fn normal_matrix(&mut self, rows: usize, cols: usize, std: f64) -> Matrix {
        let data = (0..rows * cols).map(|_| self.next_normal() * std).collect();
        Matrix { rows, cols, data }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn naive_matvec_left(w: &[f64], m: &Matrix) -> Vec<f64> {
        let mut out = vec![0.0; m.cols()];
        for j in 0..m.cols() {
            for i in 0..m.rows() {
                out[j] += w[i] * m[(i, j)];
            }
        }
        out
    }

    #[test]
    fn softmax_single_element() {
        let m = Matrix::from_rows(&[[3.7]]).unwrap();
        assert_eq!(softmax_rows(&m, None).unwrap().data(), &[1.0]);
    }

    #[test]
    fn softmax_zeros_unmasked_and_causal() {
        let z = Matrix::zeros(2, 2);
        assert_eq!(
            softmax_rows(&z, None).unwrap().data(),
            &[0.5, 0.5, 0.5, 0.5]
        );
        let mask = Mask::causal(2, 2);
        assert_eq!(
            softmax_rows(&z, Some(&mask)).unwrap().data(),
            &[1.0, 0.0, 0.5, 0.5]
        );
    }

    #[test]
    fn softmax_rejects_empty_and_fully_masked() {
        assert!(matches!(
            softmax_rows(&Matrix::zeros(0, 3), None),
            Err(Error::Empty(_))
        ));
        let mask = Mask::from_fn(2, 2, |i, _| i == 0);
        assert!(matches!(
            softmax_rows(&Matrix::zeros(2, 2), Some(&mask)),
            Err(Error::FullyMaskedRow { row: 1 })
        ));
    }

    #[test]
    fn softmax_large_logits_stay_finite() {
        let m = Matrix::from_rows(&[[1e300, -1e300, 0.0]]).unwrap();
        let s = softmax_rows(&m, None).unwrap();
        assert_eq!(s.data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn matvec_left_examples() {
        let m = Matrix::from_rows(&[[2.0, 3.0], [5.0, 7.0]]).unwrap();
        assert_eq!(
            matvec_left(&[1.0, 0.0], &m).unwrap().as_slice(),
            &[2.0, 3.0]
        );
        assert_eq!(
            matvec_left(&[1.0, 1.0], &Matrix::identity(2))
                .unwrap()
                .as_slice(),
            &[1.0, 1.0]
        );
        let m = Matrix::from_rows(&[[0.2, 0.8], [0.5, 0.5]]).unwrap();
        let got = matvec_left(&[1.0, 2.0], &m).unwrap();
        // oracle: 1*0.2 + 2*0.5, 1*0.8 + 2*0.5
        let want = naive_matvec_left(&[1.0, 2.0], &m);
        assert_eq!(got.as_slice(), want.as_slice());
        assert!((got[0] - 1.2).abs() < 1e-15 && (got[1] - 1.8).abs() < 1e-15);
    }

    #[test]
    fn matvec_left_dimension_mismatch() {
        assert!(matches!(
            matvec_left(&[1.0], &Matrix::identity(2)),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn column_sums_examples() {
        assert_eq!(
            column_sums(&Matrix::identity(3)).unwrap().as_slice(),
            &[1.0, 1.0, 1.0]
        );
        let m = Matrix::from_rows(&[[0.5, 0.5], [1.0, 0.0]]).unwrap();
        assert_eq!(column_sums(&m).unwrap().as_slice(), &[1.5, 0.5]);
        assert!(column_sums(&Matrix::zeros(0, 0)).is_err());
    }

    #[test]
    fn rng_known_stream() {
        // reference SplitMix64 outputs for seed 0
        let mut rng = SeededRng::new(0);
        assert_eq!(rng.next_u64(), 0xE220_A839_7B1D_CDAF);
        assert_eq!(rng.next_u64(), 0x6E78_9E6A_A1B9_65F4);
        assert_eq!(rng.next_u64(), 0x06C4_5D18_8009_454F);
    }

    #[test]
    fn rng_streams_identical_for_equal_seeds() {
        let mut a = SeededRng::new(0xDEAD_BEEF);
        let mut b = SeededRng::new(0xDEAD_BEEF);
        let sa: Vec<u8> = (0..10_000)
            .flat_map(|_| a.next_u64().to_le_bytes())
            .collect();
        let sb: Vec<u8> = (0..10_000)
            .flat_map(|_| b.next_u64().to_le_bytes())
            .collect();
        assert_eq!(sa, sb);
    }

    #[test]
    fn sample_indices_distinct_sorted() {
        let mut rng = SeededRng::new(9);
        let s = rng.sample_indices(100, 30);
        assert_eq!(s.len(), 30);
        assert!(s.windows(2).all(|w| w[0] < w[1]));
        assert!(s.iter().all(|&i| i < 100));
    }

    fn matrix_strategy(max: usize) -> impl Strategy<Value = Matrix> {
        (1..=max, 1..=max).prop_flat_map(|(r, c)| {
            proptest::collection::vec(-50.0f64..50.0, r * c)
                .prop_map(move |d| Matrix::from_vec(r, c, d).unwrap())
        })
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(m in matrix_strategy(12), causal in any::<bool>()) {
            let mask = causal.then(|| Mask::causal(m.rows(), m.cols()));
            let s = softmax_rows(&m, mask.as_ref()).unwrap();
            for (i, row) in s.iter_rows().enumerate() {
                let total: f64 = row.iter().sum();
                prop_assert!((total - 1.0).abs() < 1e-9);
                if causal {
                    prop_assert!(row[(i + 1).min(row.len())..].iter().all(|&x| x == 0.0));
                }
            }
        }

        #[test]
        fn matvec_left_matches_double_loop(m in matrix_strategy(64), seed in any::<u64>()) {
            let mut rng = SeededRng::new(seed);
            let w: Vec<f64> = (0..m.rows()).map(|_| rng.next_normal()).collect();
            let got = matvec_left(&w, &m).unwrap();
            let want = naive_matvec_left(&w, &m);
            for (g, e) in got.iter().zip(&want) {
                let scale = e.abs().max(1.0);
                prop_assert!((g - e).abs() / scale <= 1e-12);
            }
        }

        #[test]
        fn column_sums_of_row_stochastic(m in matrix_strategy(16)) {
            let s = softmax_rows(&m, None).unwrap();
            let total = column_sums(&s).unwrap().sum();
            prop_assert!((total - m.rows() as f64).abs() < 1e-9);
        }
    }
}
