//! Dense row-major matrices, cosine activations and stable reductions.
//!
//! Everything here works in `f64`. With `s = 32` the exponentials reach `e^32` per
//! class, and sums over a million classes stay well inside `f64` range while `f32`
//! would already have lost most of the low-order mass.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::RngCore;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::io::write_atomic;

/// Cosines are pulled this far inside [-1, 1] before any `acos`.
pub const COS_CLAMP: f64 = 1e-9;

/// Magic bytes of the matrix snapshot format.
pub const MATRIX_MAGIC: &[u8; 5] = b"DSFX1";

#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Builds a matrix from row-major data, rejecting NaN/Inf entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows.checked_mul(cols) != Some(data.len()) {
            return Err(Error::Shape {
                context: "Matrix::new",
                expected: format!("{rows}x{cols} = {} entries", rows * cols),
                got: format!("{} entries", data.len()),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "matrix data",
            });
        }
        Ok(Self { rows, cols, data })
    }

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

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(Error::Shape {
                context: "Matrix::from_rows",
                expected: format!("{cols} columns"),
                got: format!("{} columns", bad.len()),
            });
        }
        Self::new(rows.len(), cols, rows.concat())
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
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    /// Copies the listed rows, in order, into a new matrix.
    pub fn gather_rows(&self, ids: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(ids.len() * self.cols);
        for &id in ids {
            if id >= self.rows {
                return Err(Error::UnknownClass(id));
            }
            data.extend_from_slice(self.row(id));
        }
        Ok(Self {
            rows: ids.len(),
            cols: self.cols,
            data,
        })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self * rhs^T`, i.e. entry (i, j) is the dot product of row i and row j of `rhs`.
    pub fn matmul_transposed(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.cols {
            return Err(shape_err("matmul_transposed", self.cols, rhs.cols));
        }
        let mut out = Matrix::zeros(self.rows, rhs.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..rhs.rows {
                out.data[i * rhs.rows + j] = dot(a, rhs.row(j));
            }
        }
        Ok(out)
    }

    /// Writes the `DSFX1` snapshot: magic, rows (u64 LE), cols (u64 LE), then `f64` LE data.
    pub fn write_snapshot(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(5 + 16 + self.data.len() * 8);
        buf.extend_from_slice(MATRIX_MAGIC);
        buf.extend_from_slice(&(self.rows as u64).to_le_bytes());
        buf.extend_from_slice(&(self.cols as u64).to_le_bytes());
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        write_atomic(path, &buf)
    }

    pub fn read_snapshot(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::decode_snapshot(&bytes)
    }

    pub fn decode_snapshot(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 21 || &bytes[..5] != MATRIX_MAGIC {
            return Err(Error::Format("missing DSFX1 header".into()));
        }
        let rows = u64::from_le_bytes(bytes[5..13].try_into().unwrap()) as usize;
        let cols = u64::from_le_bytes(bytes[13..21].try_into().unwrap()) as usize;
        let expected = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(8))
            .and_then(|n| n.checked_add(21))
            .ok_or_else(|| Error::Format("matrix dimensions overflow".into()))?;
        if bytes.len() != expected {
            return Err(Error::Format(format!(
                "DSFX1 body is {} bytes, expected {expected}",
                bytes.len()
            )));
        }
        let data = bytes[21..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::new(rows, cols, data)
    }

    /// Writes the matrix as plain text rows, mostly useful for debugging.
    pub fn write_text<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for row in self.row_iter() {
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            writeln!(w, "{}", line.join(" "))?;
        }
        Ok(())
    }
}

fn shape_err(context: &'static str, expected: usize, got: usize) -> Error {
    Error::Shape {
        context,
        expected: format!("{expected} columns"),
        got: format!("{got} columns"),
    }
}

/// Dot product with eight independent partial sums so the loop vectorizes.
/// The summation order is fixed, so results are reproducible.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in ca.by_ref().zip(cb.by_ref()) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

#[inline]
pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Scales `v` to unit length. Zero or non-finite norms are rejected.
pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite {
            context: "l2_normalize input",
        });
    }
    let n = norm(v);
    if n == 0.0 {
        return Err(Error::ZeroNorm {
            side: "vector",
            row: 0,
        });
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Row-normalized copy of a matrix together with the original row norms.
#[derive(Clone, Debug)]
pub struct NormalizedRows {
    pub unit: Matrix,
    pub norms: Vec<f64>,
}

impl NormalizedRows {
    pub fn new(m: &Matrix, side: &'static str) -> Result<Self> {
        if !m.is_finite() {
            return Err(Error::NonFinite { context: side });
        }
        let mut unit = m.clone();
        let mut norms = Vec::with_capacity(m.rows());
        for i in 0..m.rows() {
            let n = norm(m.row(i));
            if n == 0.0 {
                return Err(Error::ZeroNorm { side, row: i });
            }
            unit.row_mut(i).iter_mut().for_each(|x| *x /= n);
            norms.push(n);
        }
        Ok(Self { unit, norms })
    }

    pub fn min_norm(&self) -> f64 {
        self.norms.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

#[inline]
pub fn clamp_cos(c: f64) -> f64 {
    c.clamp(-1.0, 1.0)
}

/// B x S matrix of cosines between every feature row and every weight row.
pub fn cosine_activations(features: &Matrix, weights: &Matrix) -> Result<Matrix> {
    cosine_activations_with(features, weights, false)
}

/// Like [`cosine_activations`]; `parallel` splits rows across the rayon pool.
/// Each entry is computed independently, so the result is bitwise identical either way.
pub fn cosine_activations_with(features: &Matrix, weights: &Matrix, parallel: bool) -> Result<Matrix> {
    let fx = NormalizedRows::new(features, "feature")?;
    let fw = NormalizedRows::new(weights, "weight")?;
    cosine_from_unit(&fx.unit, &fw.unit, parallel)
}

pub(crate) fn cosine_from_unit(x: &Matrix, w: &Matrix, parallel: bool) -> Result<Matrix> {
    if x.cols() != w.cols() {
        return Err(shape_err("cosine_activations", x.cols(), w.cols()));
    }
    if x.cols() == 0 {
        return Err(Error::Empty("cosine_activations"));
    }
    let (b, s) = (x.rows(), w.rows());
    let mut out = Matrix::zeros(b, s);
    if s == 0 || b == 0 {
        return Ok(out);
    }
    // Fill blocks of weight rows so each weight row is read once while the (small)
    // feature matrix stays in cache.
    const BLOCK: usize = 256;
    let mut block_t = vec![0.0; BLOCK * b];
    let fill = |(jb, tile): (usize, &mut [f64])| {
        for (jj, col) in tile.chunks_mut(b).enumerate() {
            let wj = w.row(jb * BLOCK + jj);
            for (i, o) in col.iter_mut().enumerate() {
                *o = clamp_cos(dot(x.row(i), wj));
            }
        }
    };
    for start in (0..s).step_by(BLOCK * if parallel { 64 } else { 1 }) {
        let end = (start + BLOCK * if parallel { 64 } else { 1 }).min(s);
        let rows = end - start;
        if block_t.len() < rows * b {
            block_t.resize(rows * b, 0.0);
        }
        let tiles = &mut block_t[..rows * b];
        if parallel {
            tiles
                .par_chunks_mut(BLOCK * b)
                .enumerate()
                .for_each(|(t, tile)| fill((start / BLOCK + t, tile)));
        } else {
            fill((start / BLOCK, tiles));
        }
        for i in 0..b {
            let orow = &mut out.row_mut(i)[start..end];
            for (jj, o) in orow.iter_mut().enumerate() {
                *o = tiles[jj * b + i];
            }
        }
    }
    Ok(out)
}

/// `log(sum(exp(v)))` with a max shift.
pub fn log_sum_exp(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty("log_sum_exp"));
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite {
            context: "log_sum_exp input",
        });
    }
    Ok(lse(values.iter().copied()))
}

/// Unchecked log-sum-exp over an iterator; `-inf` for an empty iterator.
pub(crate) fn lse<I>(values: I) -> f64
where
    I: Iterator<Item = f64> + Clone,
{
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max.is_infinite() {
        return max;
    }
    let sum: f64 = values.map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

/// `log(1 + e^t)` without overflow or cancellation.
#[inline]
pub fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

/// `1 / (1 + e^{-t})`.
#[inline]
pub fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// Seeded counter-based generator (ChaCha8).
///
/// Independent streams of the same seed are used for separate purposes (weight init,
/// shuffling, sampling, evaluation) so that changing how many draws one consumer makes
/// never perturbs another.
#[derive(Clone, Debug)]
pub struct RngState {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self {
            seed,
            stream,
            inner,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Number of 32-bit words consumed so far.
    pub fn position(&self) -> u128 {
        self.inner.get_word_pos()
    }

    pub fn gaussian(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }
}

impl RngCore for RngState {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

/// `rows x cols` matrix of i.i.d. standard normal entries.
pub fn seeded_gaussian_matrix(rows: usize, cols: usize, rng: &mut RngState) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.gaussian()).collect();
    Matrix { rows, cols, data }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn normalize_examples() {
        let v = l2_normalize(&[3.0, 4.0]).unwrap();
        assert!(close(v[0], 0.6, 1e-15) && close(v[1], 0.8, 1e-15));
        assert_eq!(l2_normalize(&[1.0, 0.0, 0.0]).unwrap(), vec![1.0, 0.0, 0.0]);
        assert_eq!(l2_normalize(&[2.0; 4]).unwrap(), vec![0.5; 4]);
        assert!(matches!(l2_normalize(&[0.0, 0.0]), Err(Error::ZeroNorm { .. })));
        assert!(l2_normalize(&[f64::NAN, 1.0]).is_err());
    }

    #[test]
    fn cosine_examples() {
        let c = |x: Vec<f64>, w: Vec<f64>| {
            let x = Matrix::from_rows(&[x]).unwrap();
            let w = Matrix::from_rows(&[w]).unwrap();
            cosine_activations(&x, &w).unwrap().get(0, 0)
        };
        assert_eq!(c(vec![1.0, 0.0], vec![0.0, 1.0]), 0.0);
        assert_eq!(c(vec![2.0, 0.0], vec![5.0, 0.0]), 1.0);
        assert!(close(c(vec![1.0, 1.0], vec![1.0, 0.0]), std::f64::consts::FRAC_1_SQRT_2, 1e-15));
    }

    #[test]
    fn cosine_reports_offending_row() {
        let x = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
        let w = Matrix::from_rows(&[vec![1.0, 1.0]]).unwrap();
        match cosine_activations(&x, &w) {
            Err(Error::ZeroNorm { side: "feature", row: 1 }) => {}
            other => panic!("unexpected {other:?}"),
        }
        match cosine_activations(&w, &x) {
            Err(Error::ZeroNorm { side: "weight", row: 1 }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn parallel_cosine_is_bitwise_equal() {
        let mut rng = RngState::new(3);
        let x = seeded_gaussian_matrix(17, 9, &mut rng);
        let w = seeded_gaussian_matrix(23, 9, &mut rng);
        let a = cosine_activations_with(&x, &w, false).unwrap();
        let b = cosine_activations_with(&x, &w, true).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn log_sum_exp_examples() {
        assert!(close(log_sum_exp(&[0.0, 0.0]).unwrap(), 2f64.ln(), 1e-15));
        assert_eq!(log_sum_exp(&[100.0]).unwrap(), 100.0);
        // 32 + log(1 + e^-32) = 32.0000000000000127 (mpmath, 40 digits)
        let v = log_sum_exp(&[32.0, 0.0]).unwrap();
        assert!(close(v, 32.000_000_000_000_012_66, 8e-15));
        assert!(v > 32.0);
        assert!(log_sum_exp(&[700.0, 699.0]).unwrap().is_finite());
        assert!(matches!(log_sum_exp(&[]), Err(Error::Empty(_))));
    }

    #[test]
    fn softplus_and_sigmoid_are_stable() {
        assert_eq!(softplus(-800.0), 0.0);
        assert_eq!(softplus(800.0), 800.0);
        assert!(close(softplus(0.0), 2f64.ln(), 1e-16));
        // log(1 + e^-32) from mpmath
        assert!(close(softplus(-32.0), 1.266_416_554_909_409_6e-14, 1e-28));
        assert_eq!(sigmoid(0.0), 0.5);
        assert_eq!(sigmoid(-1000.0), 0.0);
        assert_eq!(sigmoid(1000.0), 1.0);
    }

    #[test]
    fn gaussian_matrix_is_deterministic() {
        let a = seeded_gaussian_matrix(1, 1, &mut RngState::new(7));
        let b = seeded_gaussian_matrix(1, 1, &mut RngState::new(7));
        assert_eq!(a, b);
        let c = seeded_gaussian_matrix(1, 1, &mut RngState::new(8));
        assert_ne!(a, c);
        let d = seeded_gaussian_matrix(1, 1, &mut RngState::with_stream(7, 1));
        assert_ne!(a, d);
    }

    #[test]
    fn gaussian_matrix_moments() {
        let m = seeded_gaussian_matrix(10_000, 256, &mut RngState::new(11));
        let n = m.as_slice().len() as f64;
        let mean = m.as_slice().iter().sum::<f64>() / n;
        let var = m.as_slice().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "var {var}");
    }

    #[test]
    fn matrix_rejects_bad_input() {
        assert!(Matrix::new(2, 2, vec![0.0; 3]).is_err());
        assert!(Matrix::new(1, 2, vec![0.0, f64::INFINITY]).is_err());
        assert!(Matrix::from_rows(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn matrix_snapshot_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.dsfx");
        let m = seeded_gaussian_matrix(4, 3, &mut RngState::new(1));
        m.write_snapshot(&path).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[..5], b"DSFX1");
        assert_eq!(bytes.len(), 5 + 16 + 12 * 8);
        assert_eq!(Matrix::read_snapshot(&path).unwrap(), m);
        assert!(Matrix::decode_snapshot(&bytes[..bytes.len() - 1]).is_err());
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(Matrix::decode_snapshot(&wrong).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn row(n: usize) -> impl Strategy<Value = Vec<f64>> {
            proptest::collection::vec(-10.0f64..10.0, n)
                .prop_filter("nonzero", |v| norm(v) > 1e-3)
        }

        proptest! {
            #[test]
            fn cosine_is_scale_invariant(x in row(5), w in row(5), a in 0.01f64..100.0, b in 0.01f64..100.0) {
                let c1 = cosine_activations(&Matrix::from_rows(&[x.clone()]).unwrap(), &Matrix::from_rows(&[w.clone()]).unwrap()).unwrap();
                let xs: Vec<f64> = x.iter().map(|v| v * a).collect();
                let ws: Vec<f64> = w.iter().map(|v| v * b).collect();
                let c2 = cosine_activations(&Matrix::from_rows(&[xs]).unwrap(), &Matrix::from_rows(&[ws]).unwrap()).unwrap();
                prop_assert!((c1.get(0, 0) - c2.get(0, 0)).abs() <= 1e-12);
                prop_assert!(c1.get(0, 0).abs() <= 1.0);
            }

            #[test]
            fn lse_shift_identity(v in proptest::collection::vec(-300.0f64..300.0, 1..20), c in -300.0f64..300.0) {
                let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
                let lhs = log_sum_exp(&shifted).unwrap();
                let rhs = log_sum_exp(&v).unwrap() + c;
                prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + rhs.abs()));
            }

            #[test]
            fn normalized_has_unit_norm(v in row(7)) {
                let u = l2_normalize(&v).unwrap();
                prop_assert!((norm(&u) - 1.0).abs() < 1e-12);
                prop_assert!(dot(&u, &v) > 0.0);
            }
        }
    }
}
