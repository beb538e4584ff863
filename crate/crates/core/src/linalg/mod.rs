//! Dense row-major matrices and the handful of kernels the rest of the
//! crate is built on.
//!
//! Storage is generic over [`Scalar`] (`f32` by default, `f64` for oracle
//! and finite-difference paths). Every reduction accumulates in `f64`
//! regardless of the storage type and sums in a fixed left-to-right order,
//! so results are deterministic for a given input.

mod rng;
mod svd;

pub use rng::{seeded_random, seeded_rng, Dist, SeededRng};
pub use svd::{truncated_svd, SingularSpectrum, SvdFactors, SVD_MAX_SWEEPS, SVD_TOLERANCE};

use std::fmt::Debug;

use num_traits::NumAssign;

use crate::error::{Error, Result};

/// Floating-point storage type for [`TensorGrid`].
pub trait Scalar: NumAssign + Copy + PartialOrd + Default + Debug + Send + Sync + 'static {
    /// Size of one element in bytes.
    const BYTES: usize;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    const BYTES: usize = 4;

    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v as f32
    }

    #[inline(always)]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const BYTES: usize = 8;

    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v
    }

    #[inline(always)]
    fn to_f64(self) -> f64 {
        self
    }
}

/// Dense 2-D array stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorGrid<T = f32> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> TensorGrid<T> {
    /// Wraps `data` as a `rows × cols` grid. Rejects wrong lengths and
    /// non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "TensorGrid::new",
                format!("{} elements for a {rows}x{cols} grid", data.len()),
            ));
        }
        if let Some(i) = data.iter().position(|v| !v.to_f64().is_finite()) {
            return Err(Error::NonFinite(format!("TensorGrid::new element {i}")));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut g = Self::zeros(n, n);
        for i in 0..n {
            g.data[i * n + i] = T::one();
        }
        g
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    /// A `len × 1` column.
    pub fn column_vector(values: &[T]) -> Self {
        Self {
            rows: values.len(),
            cols: 1,
            data: values.to_vec(),
        }
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
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        let cols = self.cols;
        &mut self.data[r * cols..(r + 1) * cols]
    }

    pub fn column(&self, c: usize) -> Vec<T> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn set_column(&mut self, c: usize, values: &[T]) {
        debug_assert_eq!(values.len(), self.rows);
        for (r, &v) in values.iter().enumerate() {
            self.set(r, c, v);
        }
    }

    /// Rows `start..end` as a new grid.
    pub fn row_block(&self, start: usize, end: usize) -> Self {
        Self {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    /// Columns `start..end` as a new grid.
    pub fn col_block(&self, start: usize, end: usize) -> Self {
        let w = end - start;
        let mut data = Vec::with_capacity(self.rows * w);
        for r in 0..self.rows {
            data.extend_from_slice(&self.row(r)[start..end]);
        }
        Self {
            rows: self.rows,
            cols: w,
            data,
        }
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn cast<U: Scalar>(&self) -> TensorGrid<U> {
        TensorGrid {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|v| T::from_f64(v.to_f64() * s))
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "hadamard", |a, b| a * b)
    }

    /// `self += other` elementwise.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        check_same_shape("add_assign", self, other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        Ok(())
    }

    fn zip_with(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        check_same_shape(op, self, other)?;
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.to_f64().is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.to_f64().abs()))
    }

    /// Largest elementwise absolute difference; `None` on shape mismatch.
    pub fn max_abs_diff(&self, other: &Self) -> Option<f64> {
        if self.shape() != other.shape() {
            return None;
        }
        Some(
            self.data
                .iter()
                .zip(&other.data)
                .fold(0.0, |m, (a, b)| m.max((a.to_f64() - b.to_f64()).abs())),
        )
    }

    /// Size of the element payload in bytes.
    pub fn nbytes(&self) -> usize {
        self.data.len() * T::BYTES
    }
}

fn check_same_shape<T>(op: &'static str, a: &TensorGrid<T>, b: &TensorGrid<T>) -> Result<()> {
    if a.rows != b.rows || a.cols != b.cols {
        return Err(Error::shape(
            op,
            format!("{}x{} vs {}x{}", a.rows, a.cols, b.rows, b.cols),
        ));
    }
    Ok(())
}

/// `a · b`, accumulating each output row in `f64` in row-major,
/// left-to-right order.
pub fn matmul<T: Scalar>(a: &TensorGrid<T>, b: &TensorGrid<T>) -> Result<TensorGrid<T>> {
    if a.cols != b.rows {
        return Err(Error::shape(
            "matmul",
            format!("{}x{} · {}x{}", a.rows, a.cols, b.rows, b.cols),
        ));
    }
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut out = TensorGrid::zeros(m, n);
    let mut acc = vec![0.0f64; n];
    for i in 0..m {
        acc.iter_mut().for_each(|v| *v = 0.0);
        let a_row = a.row(i);
        for p in 0..k {
            let aip = a_row[p].to_f64();
            if aip == 0.0 {
                continue;
            }
            let b_row = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in acc.iter_mut().zip(b_row) {
                *o += aip * bv.to_f64();
            }
        }
        for (o, &v) in out.row_mut(i).iter_mut().zip(&acc) {
            *o = T::from_f64(v);
        }
    }
    Ok(out)
}

/// `aᵀ · b` without materializing the transpose.
pub fn matmul_at_b<T: Scalar>(a: &TensorGrid<T>, b: &TensorGrid<T>) -> Result<TensorGrid<T>> {
    if a.rows != b.rows {
        return Err(Error::shape(
            "matmul_at_b",
            format!("({}x{})ᵀ · {}x{}", a.rows, a.cols, b.rows, b.cols),
        ));
    }
    let (k, m, n) = (a.rows, a.cols, b.cols);
    let mut acc = vec![0.0f64; m * n];
    for p in 0..k {
        let a_row = a.row(p);
        let b_row = b.row(p);
        for (i, &av) in a_row.iter().enumerate() {
            let av = av.to_f64();
            if av == 0.0 {
                continue;
            }
            let dst = &mut acc[i * n..(i + 1) * n];
            for (o, &bv) in dst.iter_mut().zip(b_row) {
                *o += av * bv.to_f64();
            }
        }
    }
    Ok(TensorGrid {
        rows: m,
        cols: n,
        data: acc.into_iter().map(T::from_f64).collect(),
    })
}

/// `a · bᵀ` as row-by-row dot products.
pub fn matmul_a_bt<T: Scalar>(a: &TensorGrid<T>, b: &TensorGrid<T>) -> Result<TensorGrid<T>> {
    if a.cols != b.cols {
        return Err(Error::shape(
            "matmul_a_bt",
            format!("{}x{} · ({}x{})ᵀ", a.rows, a.cols, b.rows, b.cols),
        ));
    }
    let mut out = TensorGrid::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let a_row = a.row(i);
        for j in 0..b.rows {
            out.data[i * b.rows + j] = T::from_f64(dot(a_row, b.row(j)));
        }
    }
    Ok(out)
}

/// `y_i = Σ_j a_ij x_j`.
pub fn matvec<T: Scalar>(a: &TensorGrid<T>, x: &[T]) -> Result<Vec<T>> {
    if a.cols != x.len() {
        return Err(Error::shape(
            "matvec",
            format!("{}x{} · vector of {}", a.rows, a.cols, x.len()),
        ));
    }
    Ok((0..a.rows).map(|i| T::from_f64(dot(a.row(i), x))).collect())
}

/// Dot product accumulated in `f64`.
#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    a.iter()
        .zip(b)
        .fold(0.0, |s, (&x, &y)| s + x.to_f64() * y.to_f64())
}

/// `√Σ a_ij²`.
pub fn frobenius_norm<T: Scalar>(a: &TensorGrid<T>) -> f64 {
    a.data
        .iter()
        .fold(0.0, |s, v| s + v.to_f64() * v.to_f64())
        .sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn naive_f64(a: &TensorGrid<f32>, b: &TensorGrid<f32>) -> Vec<f64> {
        let mut out = vec![0.0; a.rows() * b.cols()];
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                for p in 0..a.cols() {
                    out[i * b.cols() + j] += a.get(i, p) as f64 * b.get(p, j) as f64;
                }
            }
        }
        out
    }

    #[test]
    fn identity_times_m_is_m() {
        let m: TensorGrid = seeded_random(3, 5, 1, Dist::Gaussian { std: 1.0 });
        assert_eq!(matmul(&TensorGrid::identity(3), &m).unwrap(), m);
    }

    #[test]
    fn zero_annihilates() {
        let m: TensorGrid = seeded_random(4, 2, 2, Dist::Gaussian { std: 1.0 });
        let z = matmul(&TensorGrid::zeros(3, 4), &m).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let a: TensorGrid = seeded_random(3, 4, 10, Dist::Gaussian { std: 1.0 });
        let b: TensorGrid = seeded_random(4, 2, 11, Dist::Gaussian { std: 1.0 });
        let c = matmul(&a, &b).unwrap();
        for (got, want) in c.data().iter().zip(naive_f64(&a, &b)) {
            assert_relative_eq!(*got as f64, want, max_relative = 1e-6);
        }
    }

    #[test]
    fn transposed_products_agree_with_explicit_transpose() {
        let a: TensorGrid<f64> = seeded_random(5, 3, 3, Dist::Gaussian { std: 1.0 });
        let b: TensorGrid<f64> = seeded_random(5, 4, 4, Dist::Gaussian { std: 1.0 });
        let c1 = matmul_at_b(&a, &b).unwrap();
        let c2 = matmul(&a.transpose(), &b).unwrap();
        assert!(c1.max_abs_diff(&c2).unwrap() < 1e-12);
        let d: TensorGrid<f64> = seeded_random(6, 3, 5, Dist::Gaussian { std: 1.0 });
        let e1 = matmul_a_bt(&d, &a).unwrap();
        let e2 = matmul(&d, &a.transpose()).unwrap();
        assert!(e1.max_abs_diff(&e2).unwrap() < 1e-12);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let a: TensorGrid = TensorGrid::zeros(2, 3);
        assert!(matches!(matmul(&a, &a), Err(Error::Shape { .. })));
        assert!(matvec(&a, &[1.0, 2.0]).is_err());
    }

    #[test]
    fn matvec_cases() {
        let x = [1.5f32, -2.0, 0.25];
        assert_eq!(matvec(&TensorGrid::identity(3), &x).unwrap(), x.to_vec());
        let w: TensorGrid = seeded_random(2, 3, 9, Dist::Gaussian { std: 1.0 });
        assert_eq!(matvec(&w, &[0.0; 3]).unwrap(), vec![0.0; 2]);

        let a: TensorGrid = seeded_random(2, 2, 12, Dist::Uniform { lo: -1.0, hi: 1.0 });
        let v = [0.3f32, -0.7];
        let y = matvec(&a, &v).unwrap();
        for i in 0..2 {
            let want = a.get(i, 0) as f64 * 0.3f32 as f64 + a.get(i, 1) as f64 * (-0.7f32) as f64;
            assert_relative_eq!(y[i] as f64, want, max_relative = 1e-6);
        }
    }

    #[test]
    fn frobenius_cases() {
        assert_eq!(frobenius_norm(&TensorGrid::<f32>::zeros(3, 3)), 0.0);
        assert_relative_eq!(frobenius_norm(&TensorGrid::<f32>::identity(7)), 7f64.sqrt());
        let a: TensorGrid = seeded_random(5, 5, 13, Dist::Gaussian { std: 1.0 });
        let oracle = a
            .data()
            .iter()
            .map(|&v| (v as f64).powi(2))
            .sum::<f64>()
            .sqrt();
        assert_relative_eq!(frobenius_norm(&a), oracle, max_relative = 1e-12);
    }

    #[test]
    fn new_rejects_bad_input() {
        assert!(TensorGrid::<f32>::new(2, 2, vec![0.0; 3]).is_err());
        assert!(TensorGrid::<f32>::new(1, 2, vec![0.0, f32::NAN]).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn matmul_is_associative(seed in 0u64..10_000, m in 1usize..6, k in 1usize..6, p in 1usize..6, n in 1usize..6) {
                let a: TensorGrid<f64> = seeded_random(m, k, seed, Dist::Uniform { lo: -1.0, hi: 1.0 });
                let b: TensorGrid<f64> = seeded_random(k, p, seed + 1, Dist::Uniform { lo: -1.0, hi: 1.0 });
                let c: TensorGrid<f64> = seeded_random(p, n, seed + 2, Dist::Uniform { lo: -1.0, hi: 1.0 });
                let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
                let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
                let scale = left.max_abs().max(1.0);
                prop_assert!(left.max_abs_diff(&right).unwrap() <= 1e-10 * scale);

                let a32: TensorGrid = a.cast();
                let b32: TensorGrid = b.cast();
                let c32: TensorGrid = c.cast();
                let l32 = matmul(&matmul(&a32, &b32).unwrap(), &c32).unwrap();
                let r32 = matmul(&a32, &matmul(&b32, &c32).unwrap()).unwrap();
                prop_assert!(l32.max_abs_diff(&r32).unwrap() <= 1e-5 * scale);
            }
        }
    }
}
