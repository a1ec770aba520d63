//! Dense 64-bit vectors and matrices plus the seeded generator used by every
//! other module.
//!
//! The generator is ChaCha8 (`rand_chacha`) seeded through
//! `SeedableRng::seed_from_u64`. Gaussian draws use `rand_distr::StandardNormal`.
//! Sub-generators for data, initialization, batching and weighting are derived
//! from a base seed and a purpose tag, so each stream can be reproduced on its
//! own.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Flat vector of `f64`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Vector(Vec<f64>);

impl Vector {
    pub fn new(data: Vec<f64>) -> Self {
        Vector(data)
    }

    pub fn zeros(len: usize) -> Self {
        Vector(vec![0.0; len])
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

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn norm_sq(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn scale(&self, alpha: f64) -> Vector {
        Vector(self.0.iter().map(|v| alpha * v).collect())
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// `self += alpha * x` in place.
    pub fn add_scaled(&mut self, alpha: f64, x: &Vector) -> Result<()> {
        check_len(self.len(), x.len())?;
        for (y, x) in self.0.iter_mut().zip(&x.0) {
            *y += alpha * x;
        }
        Ok(())
    }
}

impl From<Vec<f64>> for Vector {
    fn from(v: Vec<f64>) -> Self {
        Vector(v)
    }
}

impl std::ops::Index<usize> for Vector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl std::ops::IndexMut<usize> for Vector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.0[i]
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "matrix {rows}x{cols} needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        let data = rows.iter().flatten().copied().collect();
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
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

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// `self * x` for a column vector `x` of length `cols`.
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_len(self.cols, x.len())?;
        Ok((0..self.rows)
            .map(|r| self.row(r).iter().zip(x).map(|(a, b)| a * b).sum())
            .collect())
    }

    /// Elementwise sum of two equally shaped matrices.
    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::Shape(format!(
                "{}x{} + {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        })
    }

    /// Copies the listed rows into a new matrix.
    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }
}

fn check_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("length mismatch: {a} vs {b}")));
    }
    Ok(())
}

/// Inner product, summed left to right.
pub fn dot(a: &Vector, b: &Vector) -> Result<f64> {
    check_len(a.len(), b.len())?;
    Ok(dot_slices(a.as_slice(), b.as_slice()))
}

pub(crate) fn dot_slices(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Returns `y + alpha * x`.
pub fn axpy(alpha: f64, x: &Vector, y: &Vector) -> Result<Vector> {
    let mut out = y.clone();
    out.add_scaled(alpha, x)?;
    Ok(out)
}

/// Matrix with i.i.d. `Normal(0, std^2)` entries drawn in row-major order.
pub fn gaussian_matrix(rng: &mut Rng, rows: usize, cols: usize, std: f64) -> Result<Matrix> {
    if !(std >= 0.0) || !std.is_finite() {
        return Err(Error::Config(format!("gaussian std must be >= 0, got {std}")));
    }
    let data = (0..rows * cols).map(|_| std * rng.normal()).collect();
    Matrix::from_vec(rows, cols, data)
}

/// Seeded ChaCha8 generator.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent stream for `purpose`, derived from `seed` alone.
    pub fn derive(seed: u64, purpose: &str) -> Self {
        Rng::new(splitmix64(seed ^ fnv1a(purpose.as_bytes())))
    }

    /// Sub-generator keyed on this generator's seed and `purpose`; the
    /// parent's stream position is untouched.
    pub fn fork(&self, purpose: &str) -> Self {
        Rng::derive(self.seed, purpose)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform draw in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.inner.random::<f64>()
    }

    /// Uniform index in `0..n`.
    pub fn index(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    /// `k` distinct indices from `0..n`, chosen uniformly, returned sorted.
    pub fn choose_distinct(&mut self, n: usize, k: usize) -> Vec<usize> {
        let mut idx = rand::seq::index::sample(&mut self.inner, n, k.min(n)).into_vec();
        idx.sort_unstable();
        idx
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        use rand::seq::SliceRandom;
        items.shuffle(&mut self.inner);
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use super::Rng;

    #[test]
    fn dot_small_cases() {
        let a = Vector::new(vec![1.0, 2.0]);
        let b = Vector::new(vec![3.0, -1.0]);
        assert_eq!(dot(&a, &b).unwrap(), 1.0);
        let z = Vector::zeros(3);
        let f = Vector::new(vec![5.0; 3]);
        assert_eq!(dot(&z, &f).unwrap(), 0.0);
    }

    #[test]
    fn dot_self_is_squared_norm() {
        let mut rng = Rng::new(7);
        let a = Vector::new((0..10).map(|_| rng.normal()).collect());
        let mut sq = 0.0;
        for k in 0..a.len() {
            sq += a[k] * a[k];
        }
        assert_eq!(dot(&a, &a).unwrap(), sq);
    }

    #[test]
    fn dot_rejects_mismatch() {
        let err = dot(&Vector::zeros(2), &Vector::zeros(3)).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn axpy_cases() {
        let x = Vector::new(vec![1.0, 0.0]);
        let y = Vector::new(vec![1.0, 1.0]);
        assert_eq!(axpy(0.0, &x, &y).unwrap(), y);
        assert_eq!(axpy(-0.1, &x, &y).unwrap().as_slice(), &[0.9, 1.0]);
        assert!(axpy(1.0, &Vector::zeros(1), &y).is_err());
    }

    #[test]
    fn axpy_matches_loop() {
        let mut rng = Rng::new(11);
        let g = Vector::new((0..50).map(|_| rng.normal()).collect());
        let theta = Vector::new((0..50).map(|_| rng.normal()).collect());
        let eta = 0.037;
        let out = axpy(-eta, &g, &theta).unwrap();
        for k in 0..50 {
            assert_eq!(out[k], theta[k] + (-eta) * g[k]);
        }
    }

    #[test]
    fn gaussian_zero_std_is_zero() {
        let m = gaussian_matrix(&mut Rng::new(3), 4, 5, 0.0).unwrap();
        assert!(m.data().iter().all(|&v| v == 0.0));
        assert!(gaussian_matrix(&mut Rng::new(3), 1, 1, -1.0).is_err());
    }

    #[test]
    fn gaussian_is_reproducible() {
        let a = gaussian_matrix(&mut Rng::new(42), 6, 7, 1.3).unwrap();
        let b = gaussian_matrix(&mut Rng::new(42), 6, 7, 1.3).unwrap();
        assert_eq!(
            a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn gaussian_moments() {
        let m = gaussian_matrix(&mut Rng::new(2024), 1000, 100, 1.0).unwrap();
        let n = m.data().len() as f64;
        let mean = m.sum() / n;
        let var = m.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var.sqrt() - 1.0).abs() < 0.02, "std {}", var.sqrt());
    }

    #[test]
    fn forks_are_independent_and_stable() {
        let base = Rng::new(5);
        let mut a = base.fork("data");
        let mut b = base.fork("init");
        let mut a2 = Rng::derive(5, "data");
        let x = a.normal();
        assert_ne!(x, b.normal());
        assert_eq!(x, a2.normal());
    }

    #[test]
    fn choose_distinct_is_distinct() {
        let mut rng = Rng::new(9);
        let idx = rng.choose_distinct(100, 40);
        assert_eq!(idx.len(), 40);
        assert!(idx.windows(2).all(|w| w[0] < w[1]));
    }

    fn finite_vec(len: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-1e6f64..1e6, len)
    }

    proptest! {
        #[test]
        fn dot_symmetric_and_nonneg((a, b) in (1usize..40).prop_flat_map(|n| (finite_vec(n), finite_vec(n)))) {
            let a = Vector::new(a);
            let b = Vector::new(b);
            prop_assert_eq!(dot(&a, &b).unwrap(), dot(&b, &a).unwrap());
            prop_assert!(dot(&a, &a).unwrap() >= 0.0);
            prop_assert!(axpy(0.5, &a, &b).unwrap().is_finite());
        }
    }
}
