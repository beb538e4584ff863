//! Per-row asymmetric min-max quantization to 8 or 4 bits.
//!
//! Each row keeps its minimum as `offset` and `(max - min) / (2^bits - 1)`
//! as `scale`; codes are `round((x - offset) / scale)` with halves rounded
//! away from zero. Four-bit codes are packed two per byte with the even
//! column in the low nibble, and every row starts on a byte boundary.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Scalar, TensorGrid};

/// `bits`-wide codes plus per-row scale and offset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantizedMatrix {
    rows: usize,
    cols: usize,
    bits: u8,
    codes: Vec<u8>,
    scale: Vec<f32>,
    offset: Vec<f32>,
}

fn check_bits(bits: u8) -> Result<()> {
    match bits {
        4 | 8 => Ok(()),
        _ => Err(Error::InvalidArgument(format!(
            "quantization width must be 4 or 8 bits, got {bits}"
        ))),
    }
}

/// Bytes needed for one packed row.
fn row_bytes(cols: usize, bits: u8) -> usize {
    if bits == 8 {
        cols
    } else {
        cols.div_ceil(2)
    }
}

/// Largest code for a width.
fn max_code(bits: u8) -> u32 {
    (1u32 << bits) - 1
}

/// Picks an `f32` scale close to `(max - min) / levels` for which the top
/// code lands exactly on `max` after rounding, when such a scale exists
/// within a few ulps.
fn exact_scale(min: f32, max: f32, levels: u32) -> f32 {
    let target = (max as f64 - min as f64) / levels as f64;
    let nearest = target as f32;
    let hits = |s: f32| (min as f64 + levels as f64 * s as f64) as f32 == max;
    if hits(nearest) {
        return nearest;
    }
    let mut below = nearest;
    let mut above = nearest;
    for _ in 0..8 {
        below = f32::from_bits(below.to_bits().saturating_sub(1));
        above = f32::from_bits(above.to_bits() + 1);
        if hits(below) {
            return below;
        }
        if hits(above) {
            return above;
        }
    }
    nearest
}

impl QuantizedMatrix {
    /// Quantizes every row of `w` independently.
    pub fn quantize_rows<T: Scalar>(w: &TensorGrid<T>, bits: u8) -> Result<Self> {
        check_bits(bits)?;
        if !w.is_finite() {
            return Err(Error::NonFinite("quantize_rows input".into()));
        }
        let (rows, cols) = w.shape();
        let stride = row_bytes(cols, bits);
        let levels = max_code(bits);
        let mut codes = vec![0u8; rows * stride];
        let mut scale = Vec::with_capacity(rows);
        let mut offset = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = w.row(r);
            let (lo, hi) = row.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
                let v = v.to_f64();
                (lo.min(v), hi.max(v))
            });
            let (lo, hi) = if cols == 0 { (0.0, 0.0) } else { (lo, hi) };
            let lo32 = lo as f32;
            let hi32 = hi as f32;
            let s = if hi32 > lo32 {
                exact_scale(lo32, hi32, levels)
            } else {
                0.0
            };
            let out = &mut codes[r * stride..(r + 1) * stride];
            for (c, v) in row.iter().enumerate() {
                let code = if s == 0.0 {
                    0
                } else {
                    let q = ((v.to_f64() - lo32 as f64) / s as f64).round();
                    q.clamp(0.0, levels as f64) as u8
                };
                write_code(out, c, code, bits);
            }
            scale.push(s);
            offset.push(lo32);
        }
        Ok(Self {
            rows,
            cols,
            bits,
            codes,
            scale,
            offset,
        })
    }

    /// Reassembles a matrix from stored parts, validating every invariant.
    pub fn from_parts(
        rows: usize,
        cols: usize,
        bits: u8,
        codes: Vec<u8>,
        scale: Vec<f32>,
        offset: Vec<f32>,
    ) -> Result<Self> {
        check_bits(bits)?;
        if codes.len() != rows * row_bytes(cols, bits) || scale.len() != rows || offset.len() != rows {
            return Err(Error::shape(
                "QuantizedMatrix::from_parts",
                format!(
                    "{} code bytes, {} scales, {} offsets for {rows}x{cols} at {bits} bits",
                    codes.len(),
                    scale.len(),
                    offset.len()
                ),
            ));
        }
        if scale.iter().chain(&offset).any(|v| !v.is_finite()) || scale.iter().any(|&s| s < 0.0) {
            return Err(Error::InvalidArgument("scale must be finite and non-negative".into()));
        }
        let q = Self {
            rows,
            cols,
            bits,
            codes,
            scale,
            offset,
        };
        for r in 0..rows {
            if q.scale[r] == 0.0 && (0..cols).any(|c| q.code(r, c) != 0) {
                return Err(Error::InvalidArgument(format!("row {r} has zero scale but non-zero codes")));
            }
        }
        Ok(q)
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

    pub fn bits(&self) -> u8 {
        self.bits
    }

    /// Packed code bytes, row-major.
    pub fn codes(&self) -> &[u8] {
        &self.codes
    }

    pub fn scale(&self) -> &[f32] {
        &self.scale
    }

    pub fn offset(&self) -> &[f32] {
        &self.offset
    }

    /// Unpacked code at `(r, c)`.
    pub fn code(&self, r: usize, c: usize) -> u8 {
        let row = &self.codes[r * self.stride()..];
        if self.bits == 8 {
            row[c]
        } else {
            let byte = row[c / 2];
            if c % 2 == 0 {
                byte & 0x0F
            } else {
                byte >> 4
            }
        }
    }

    fn stride(&self) -> usize {
        row_bytes(self.cols, self.bits)
    }

    fn row_codes(&self, r: usize) -> impl Iterator<Item = u8> + '_ {
        (0..self.cols).map(move |c| self.code(r, c))
    }

    /// `code · scale + offset`, evaluated in `f64` and rounded once.
    pub fn dequantize_rows<T: Scalar>(&self) -> TensorGrid<T> {
        TensorGrid::from_fn(self.rows, self.cols, |r, c| {
            let v = self.code(r, c) as f64 * self.scale[r] as f64 + self.offset[r] as f64;
            T::from_f64(v as f32 as f64)
        })
    }

    /// `y_i = scale_i · (codes_i · x) + offset_i · Σx`, without dequantizing.
    pub fn qmatvec<T: Scalar>(&self, x: &[T]) -> Result<Vec<T>> {
        if x.len() != self.cols {
            return Err(Error::shape(
                "qmatvec",
                format!("{}x{} codes times a vector of {}", self.rows, self.cols, x.len()),
            ));
        }
        let xs: Vec<f64> = x.iter().map(|v| v.to_f64()).collect();
        let sum_x: f64 = xs.iter().sum();
        let stride = self.stride();
        Ok((0..self.rows)
            .map(|r| {
                let row = &self.codes[r * stride..(r + 1) * stride];
                let mut dot = 0.0f64;
                if self.bits == 8 {
                    for (&code, v) in row.iter().zip(&xs) {
                        dot += code as f64 * v;
                    }
                } else {
                    for (&byte, pair) in row.iter().zip(xs.chunks(2)) {
                        dot += (byte & 0x0F) as f64 * pair[0];
                        if let Some(v) = pair.get(1) {
                            dot += (byte >> 4) as f64 * v;
                        }
                    }
                }
                T::from_f64(self.scale[r] as f64 * dot + self.offset[r] as f64 * sum_x)
            })
            .collect())
    }

    /// Column-wise [`qmatvec`](Self::qmatvec) over an `cols × l` grid.
    pub fn qmatmul<T: Scalar>(&self, x: &TensorGrid<T>) -> Result<TensorGrid<T>> {
        if x.rows() != self.cols {
            return Err(Error::shape(
                "qmatmul",
                format!("{}x{} codes times {}x{}", self.rows, self.cols, x.rows(), x.cols()),
            ));
        }
        let l = x.cols();
        let mut col_sums = vec![0.0f64; l];
        for k in 0..x.rows() {
            for (s, v) in col_sums.iter_mut().zip(x.row(k)) {
                *s += v.to_f64();
            }
        }
        let mut out = TensorGrid::zeros(self.rows, l);
        let mut acc = vec![0.0f64; l];
        for r in 0..self.rows {
            acc.iter_mut().for_each(|a| *a = 0.0);
            for (k, code) in self.row_codes(r).enumerate() {
                if code == 0 {
                    continue;
                }
                let c = code as f64;
                for (a, v) in acc.iter_mut().zip(x.row(k)) {
                    *a += c * v.to_f64();
                }
            }
            let (s, o) = (self.scale[r] as f64, self.offset[r] as f64);
            for ((dst, a), cs) in out.row_mut(r).iter_mut().zip(&acc).zip(&col_sums) {
                *dst = T::from_f64(s * a + o * cs);
            }
        }
        Ok(out)
    }

    /// Storage in bytes: packed codes plus two `f32` per row.
    pub fn nbytes(&self) -> usize {
        self.codes.len() + 8 * self.rows
    }
}

fn write_code(row: &mut [u8], c: usize, code: u8, bits: u8) {
    if bits == 8 {
        row[c] = code;
    } else if c % 2 == 0 {
        row[c / 2] = (row[c / 2] & 0xF0) | code;
    } else {
        row[c / 2] = (row[c / 2] & 0x0F) | (code << 4);
    }
}

/// Quantizes one activation vector with the same rule as a weight row.
pub fn quantize_activations<T: Scalar>(x: &[T], bits: u8) -> Result<QuantizedMatrix> {
    let grid = TensorGrid::new(1, x.len(), x.to_vec())
        .map_err(|_| Error::NonFinite("quantize_activations input".into()))?;
    QuantizedMatrix::quantize_rows(&grid, bits)
}

/// Storage for `param_count` weights at `bits` per weight, laid out in rows
/// of `row_len`: `ceil(count · bits / 8)` code bytes plus 8 bytes of scale
/// and offset per row. Widths of 16 and 32 bits are plain floats with no
/// per-row metadata.
pub fn quantized_size_bytes(param_count: u64, bits: u32, row_len: u64) -> u64 {
    if param_count == 0 {
        return 0;
    }
    let codes = (param_count * bits as u64).div_ceil(8);
    if bits >= 16 {
        return codes;
    }
    codes + 8 * param_count.div_ceil(row_len.max(1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{matvec, seeded_random, Dist};
    use proptest::prelude::*;

    fn grid(rows: usize, cols: usize, v: &[f32]) -> TensorGrid {
        TensorGrid::new(rows, cols, v.to_vec()).unwrap()
    }

    #[test]
    fn constant_row_has_zero_scale() {
        let q = QuantizedMatrix::quantize_rows(&grid(1, 4, &[2.5; 4]), 8).unwrap();
        assert_eq!(q.scale()[0], 0.0);
        assert!((0..4).all(|c| q.code(0, c) == 0));
        assert_eq!(q.dequantize_rows::<f32>().data(), &[2.5; 4]);
    }

    #[test]
    fn on_grid_row_is_exact() {
        let w = grid(1, 4, &[0.0, 1.0, 2.0, 3.0]);
        let q = QuantizedMatrix::quantize_rows(&w, 8).unwrap();
        // scale = 3/255, so value k lands on code 85k.
        assert_eq!((0..4).map(|c| q.code(0, c)).collect::<Vec<_>>(), vec![0, 85, 170, 255]);
        assert_eq!(q.dequantize_rows::<f32>(), w);
    }

    #[test]
    fn four_bit_packing_low_nibble_first() {
        let w = grid(1, 3, &[0.0, 15.0, 5.0]);
        let q = QuantizedMatrix::quantize_rows(&w, 4).unwrap();
        assert_eq!(q.codes(), &[0xF0, 0x05]);
        assert_eq!(q.dequantize_rows::<f32>(), w);
    }

    #[test]
    fn zero_matrix_roundtrip() {
        let w = TensorGrid::<f32>::zeros(3, 5);
        for bits in [4, 8] {
            let q = QuantizedMatrix::quantize_rows(&w, bits).unwrap();
            assert_eq!(q.dequantize_rows::<f32>(), w);
        }
    }

    #[test]
    fn rejects_bad_width_and_shape() {
        let w = TensorGrid::<f32>::zeros(2, 2);
        assert!(QuantizedMatrix::quantize_rows(&w, 3).is_err());
        let q = QuantizedMatrix::quantize_rows(&w, 8).unwrap();
        assert!(q.qmatvec(&[1.0f32]).is_err());
        assert!(QuantizedMatrix::from_parts(2, 2, 8, vec![0; 3], vec![0.0; 2], vec![0.0; 2]).is_err());
        assert!(QuantizedMatrix::from_parts(1, 2, 8, vec![0, 1], vec![0.0], vec![0.0]).is_err());
    }

    #[test]
    fn random_8x8_bound() {
        let w: TensorGrid = seeded_random(8, 8, 11, Dist::Gaussian { std: 1.0 });
        for bits in [4, 8] {
            let q = QuantizedMatrix::quantize_rows(&w, bits).unwrap();
            let d = q.dequantize_rows::<f32>();
            for r in 0..8 {
                for c in 0..8 {
                    let err = (w.get(r, c) as f64 - d.get(r, c) as f64).abs();
                    assert!(err <= q.scale()[r] as f64 / 2.0 + 1e-6);
                }
            }
        }
    }

    #[test]
    fn qmatvec_special_cases() {
        let w: TensorGrid = seeded_random(4, 6, 2, Dist::Gaussian { std: 1.0 });
        let q = QuantizedMatrix::quantize_rows(&w, 8).unwrap();
        assert!(q.qmatvec(&[0.0f32; 6]).unwrap().iter().all(|&y| y == 0.0));

        let c = grid(2, 3, &[1.5, 1.5, 1.5, -2.0, -2.0, -2.0]);
        let q = QuantizedMatrix::quantize_rows(&c, 4).unwrap();
        let y = q.qmatvec(&[1.0f32, 2.0, 3.0]).unwrap();
        assert_eq!(y, vec![9.0, -12.0]);
    }

    #[test]
    fn qmatmul_matches_columnwise_qmatvec() {
        let w: TensorGrid = seeded_random(5, 7, 3, Dist::Gaussian { std: 1.0 });
        let x: TensorGrid = seeded_random(7, 3, 4, Dist::Gaussian { std: 1.0 });
        let q = QuantizedMatrix::quantize_rows(&w, 4).unwrap();
        let y = q.qmatmul(&x).unwrap();
        for c in 0..3 {
            let col = q.qmatvec(&x.column(c)).unwrap();
            for r in 0..5 {
                assert!((y.get(r, c) - col[r]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn activations_quantize_like_rows() {
        let x = [0.0f32, 0.25, 0.5, 0.75, 1.0];
        let q = quantize_activations(&x, 4).unwrap();
        // Grid step is 1/15; every point above is within half a step.
        let d = q.dequantize_rows::<f32>();
        for (a, b) in x.iter().zip(d.data()) {
            assert!((a - b).abs() as f64 <= q.scale()[0] as f64 / 2.0 + 1e-6);
        }
        let on_grid: Vec<f32> = (0..16).map(|k| k as f32 / 15.0 * 3.0).collect();
        let q = quantize_activations(&on_grid, 4).unwrap();
        let d = q.dequantize_rows::<f32>();
        for (a, b) in on_grid.iter().zip(d.data()) {
            assert!((a - b).abs() <= 1e-6);
        }
        let k = quantize_activations(&[7.0f32; 4], 8).unwrap();
        assert_eq!(k.dequantize_rows::<f32>().data(), &[7.0; 4]);
        assert!(quantize_activations(&[f32::NAN], 8).is_err());
    }

    #[test]
    fn size_arithmetic() {
        assert_eq!(quantized_size_bytes(0, 8, 4096), 0);
        assert_eq!(quantized_size_bytes(7_000_000_000, 16, 4096), 14_000_000_000);
        let eight = quantized_size_bytes(7_000_000_000, 8, 4096);
        // 7e9 code bytes plus 8 bytes for each of ceil(7e9 / 4096) rows.
        assert_eq!(eight, 7_000_000_000 + 8 * 1_708_985);
        assert!((eight as f64 / 1e9 - 7.01).abs() < 0.005);
        assert_eq!(quantized_size_bytes(3, 4, 3), 2 + 8);
    }

    proptest! {
        #[test]
        fn roundtrip_properties(
            rows in 1usize..6,
            cols in 1usize..20,
            seed in any::<u64>(),
            spread in 0.01f64..100.0,
            four in any::<bool>(),
        ) {
            let bits = if four { 4 } else { 8 };
            let w: TensorGrid = seeded_random(rows, cols, seed, Dist::Uniform { lo: -spread, hi: spread });
            let q = QuantizedMatrix::quantize_rows(&w, bits).unwrap();
            let d = q.dequantize_rows::<f32>();
            for r in 0..rows {
                let s = q.scale()[r] as f64;
                prop_assert!(s >= 0.0);
                let row = w.row(r);
                for c in 0..cols {
                    prop_assert!((q.code(r, c) as u32) <= max_code(bits));
                    prop_assert!((row[c] as f64 - d.get(r, c) as f64).abs() <= s / 2.0 + 1e-6);
                    for c2 in 0..cols {
                        if row[c] <= row[c2] {
                            prop_assert!(q.code(r, c) <= q.code(r, c2));
                        }
                    }
                }
                // The minimum is reproduced exactly. The maximum is exact up
                // to the resolution of a 32-bit scale: one scale ulp moves the
                // top code by `levels` ulps, which can step over `max`.
                let (imin, imax) = (0..cols).fold((0, 0), |(a, b), c| {
                    (if row[c] < row[a] { c } else { a }, if row[c] > row[b] { c } else { b })
                });
                prop_assert_eq!(d.get(r, imin), row[imin]);
                let s32 = q.scale()[r];
                let scale_ulp = (f32::from_bits(s32.to_bits() + 1) - s32) as f64;
                let top_tol = max_code(bits) as f64 * scale_ulp / 2.0 + row[imax].abs() as f64 * f32::EPSILON as f64;
                prop_assert!((d.get(r, imax) as f64 - row[imax] as f64).abs() <= top_tol);
            }
            // Re-quantizing the dequantized grid is a fixed point.
            let again = QuantizedMatrix::quantize_rows(&d, bits).unwrap();
            prop_assert_eq!(again.codes(), q.codes());

            let x: Vec<f32> = seeded_random::<f32>(1, cols, seed ^ 1, Dist::Gaussian { std: 1.0 }).into_data();
            let fast = q.qmatvec(&x).unwrap();
            let slow = matvec(&d, &x).unwrap();
            let scale = slow.iter().map(|v| v.abs()).fold(1.0f32, f32::max);
            for (a, b) in fast.iter().zip(&slow) {
                prop_assert!(((a - b).abs() / scale) as f64 <= 1e-5);
            }
        }
    }
}
