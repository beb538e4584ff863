//! Building blocks of the decoder layer and their hand-written gradients.
//!
//! Grid-valued functions take feature-major `features × positions` grids.

use crate::error::{Error, Result};
use crate::linalg::{matvec, Scalar, TensorGrid};

/// RMSNorm epsilon.
pub const RMS_EPS: f64 = 1e-5;

/// `x_i / √(mean(x²) + ε) · gain_i`.
pub fn rmsnorm<T: Scalar>(x: &[T], gain: &[T]) -> Result<Vec<T>> {
    if x.len() != gain.len() || x.is_empty() {
        return Err(Error::shape("rmsnorm", format!("input {} vs gain {}", x.len(), gain.len())));
    }
    let ms = x.iter().map(|v| v.to_f64().powi(2)).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms + RMS_EPS).sqrt();
    Ok(x.iter()
        .zip(gain)
        .map(|(v, g)| T::from_f64(v.to_f64() * inv * g.to_f64()))
        .collect())
}

fn inv_rms_cols<T: Scalar>(x: &TensorGrid<T>) -> Vec<f64> {
    let mut ms = vec![0.0f64; x.cols()];
    for i in 0..x.rows() {
        for (s, v) in ms.iter_mut().zip(x.row(i)) {
            *s += v.to_f64() * v.to_f64();
        }
    }
    let n = x.rows() as f64;
    ms.iter().map(|s| 1.0 / (s / n + RMS_EPS).sqrt()).collect()
}

/// [`rmsnorm`] applied to every column; `gain` is `rows × 1`.
pub fn rmsnorm_cols<T: Scalar>(x: &TensorGrid<T>, gain: &TensorGrid<T>) -> TensorGrid<T> {
    let inv = inv_rms_cols(x);
    TensorGrid::from_fn(x.rows(), x.cols(), |i, j| {
        T::from_f64(x.get(i, j).to_f64() * inv[j] * gain.get(i, 0).to_f64())
    })
}

/// Gradients of [`rmsnorm_cols`]: `(d input, d gain)`.
pub fn rmsnorm_cols_backward<T: Scalar>(
    x: &TensorGrid<T>,
    gain: &TensorGrid<T>,
    dy: &TensorGrid<T>,
) -> (TensorGrid<T>, TensorGrid<T>) {
    let (n, l) = x.shape();
    let inv = inv_rms_cols(x);
    let mut dot = vec![0.0f64; l];
    let mut dgain = vec![0.0f64; n];
    for i in 0..n {
        let g = gain.get(i, 0).to_f64();
        for (j, (xv, dv)) in x.row(i).iter().zip(dy.row(i)).enumerate() {
            let (xv, dv) = (xv.to_f64(), dv.to_f64());
            dot[j] += dv * g * xv;
            dgain[i] += dv * xv * inv[j];
        }
    }
    let dx = TensorGrid::from_fn(n, l, |i, j| {
        let g = gain.get(i, 0).to_f64();
        let v = g * dy.get(i, j).to_f64() * inv[j] - x.get(i, j).to_f64() * dot[j] * inv[j].powi(3) / n as f64;
        T::from_f64(v)
    });
    let dgain = TensorGrid::from_fn(n, 1, |i, _| T::from_f64(dgain[i]));
    (dx, dgain)
}

fn rope_angle(pair: usize, dim: usize, position: usize, base: f64) -> f64 {
    position as f64 * base.powf(-2.0 * pair as f64 / dim as f64)
}

/// Rotates each pair `(v_{2i}, v_{2i+1})` by `position · base^{-2i/d}`.
pub fn rope_apply<T: Scalar>(v: &[T], position: usize, base: f64) -> Result<Vec<T>> {
    let d = v.len();
    if d % 2 != 0 {
        return Err(Error::InvalidArgument(format!("rotary embedding needs an even width, got {d}")));
    }
    let mut out = v.to_vec();
    for i in 0..d / 2 {
        let (s, c) = rope_angle(i, d, position, base).sin_cos();
        let (a, b) = (v[2 * i].to_f64(), v[2 * i + 1].to_f64());
        out[2 * i] = T::from_f64(a * c - b * s);
        out[2 * i + 1] = T::from_f64(a * s + b * c);
    }
    Ok(out)
}

/// Applies the rotary embedding head by head to a `dim × l` grid whose
/// column `j` sits at position `start + j`. `inverse` rotates backwards,
/// which is also the gradient map since rotations are orthogonal.
pub fn rope_cols<T: Scalar>(x: &mut TensorGrid<T>, heads: usize, start: usize, base: f64, inverse: bool) {
    let (n, l) = x.shape();
    let d = n / heads;
    let sign = if inverse { -1.0 } else { 1.0 };
    for i in 0..d / 2 {
        let trig: Vec<(f64, f64)> = (0..l)
            .map(|j| (sign * rope_angle(i, d, start + j, base)).sin_cos())
            .collect();
        for h in 0..heads {
            let (r0, r1) = (h * d + 2 * i, h * d + 2 * i + 1);
            for (j, &(s, c)) in trig.iter().enumerate() {
                let (a, b) = (x.get(r0, j).to_f64(), x.get(r1, j).to_f64());
                x.set(r0, j, T::from_f64(a * c - b * s));
                x.set(r1, j, T::from_f64(a * s + b * c));
            }
        }
    }
}

/// Scaled causal scores and their softmax, stacked per head as
/// `(heads · l) × l` grids. Masked entries hold 0 in both.
pub fn attention_scores<T: Scalar>(
    q: &TensorGrid<T>,
    k: &TensorGrid<T>,
    heads: usize,
) -> (TensorGrid<T>, TensorGrid<T>) {
    let (n, l) = q.shape();
    let d = n / heads;
    let scale = 1.0 / (d as f64).sqrt();
    let qt = q.transpose();
    let kt = k.transpose();
    let mut scores = TensorGrid::zeros(heads * l, l);
    let mut probs = TensorGrid::zeros(heads * l, l);
    let mut row = vec![0.0f64; l];
    for h in 0..heads {
        let cols = h * d..(h + 1) * d;
        for i in 0..l {
            let qi = &qt.row(i)[cols.clone()];
            for (j, slot) in row.iter_mut().enumerate().take(i + 1) {
                let kj = &kt.row(j)[cols.clone()];
                *slot = crate::linalg::dot(qi, kj) * scale;
            }
            let max = row[..=i].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = row[..=i].iter().map(|v| (v - max).exp()).sum();
            let r = h * l + i;
            for j in 0..=i {
                scores.set(r, j, T::from_f64(row[j]));
                probs.set(r, j, T::from_f64((row[j] - max).exp() / denom));
            }
        }
    }
    (scores, probs)
}

/// `head_h[:, i] = Σ_j s_h[i, j] · v_h[:, j]`, concatenated over heads.
pub fn attention_apply<T: Scalar>(probs: &TensorGrid<T>, v: &TensorGrid<T>, heads: usize) -> TensorGrid<T> {
    let (n, l) = v.shape();
    let d = n / heads;
    let vt = v.transpose();
    let mut out = vec![0.0f64; l * n];
    for h in 0..heads {
        for i in 0..l {
            let dst = &mut out[i * n + h * d..i * n + (h + 1) * d];
            for j in 0..=i {
                let p = probs.get(h * l + i, j).to_f64();
                if p == 0.0 {
                    continue;
                }
                for (o, vv) in dst.iter_mut().zip(&vt.row(j)[h * d..(h + 1) * d]) {
                    *o += p * vv.to_f64();
                }
            }
        }
    }
    TensorGrid::from_fn(n, l, |c, i| T::from_f64(out[i * n + c]))
}

/// Gradients of causal multi-head attention with respect to the rotated
/// `q`, `k` and the values `v`.
pub fn attention_backward<T: Scalar>(
    q: &TensorGrid<T>,
    k: &TensorGrid<T>,
    v: &TensorGrid<T>,
    probs: &TensorGrid<T>,
    d_out: &TensorGrid<T>,
    heads: usize,
) -> (TensorGrid<T>, TensorGrid<T>, TensorGrid<T>) {
    let (n, l) = q.shape();
    let d = n / heads;
    let scale = 1.0 / (d as f64).sqrt();
    let (qt, kt, vt, dot_t) = (q.transpose(), k.transpose(), v.transpose(), d_out.transpose());
    let mut dq = vec![0.0f64; l * n];
    let mut dk = vec![0.0f64; l * n];
    let mut dv = vec![0.0f64; l * n];
    let mut ds = vec![0.0f64; l];
    for h in 0..heads {
        let cols = h * d..(h + 1) * d;
        for i in 0..l {
            let go = &dot_t.row(i)[cols.clone()];
            let mut weighted = 0.0;
            for j in 0..=i {
                let p = probs.get(h * l + i, j).to_f64();
                ds[j] = crate::linalg::dot(go, &vt.row(j)[cols.clone()]);
                weighted += p * ds[j];
                for (acc, g) in dv[j * n + h * d..j * n + (h + 1) * d].iter_mut().zip(go) {
                    *acc += p * g.to_f64();
                }
            }
            let qi = &qt.row(i)[cols.clone()];
            for j in 0..=i {
                let p = probs.get(h * l + i, j).to_f64();
                let dz = p * (ds[j] - weighted) * scale;
                if dz == 0.0 {
                    continue;
                }
                let kj = &kt.row(j)[cols.clone()];
                for (acc, kv) in dq[i * n + h * d..i * n + (h + 1) * d].iter_mut().zip(kj) {
                    *acc += dz * kv.to_f64();
                }
                for (acc, qv) in dk[j * n + h * d..j * n + (h + 1) * d].iter_mut().zip(qi) {
                    *acc += dz * qv.to_f64();
                }
            }
        }
    }
    let back = |buf: &[f64]| TensorGrid::from_fn(n, l, |c, i| T::from_f64(buf[i * n + c]));
    (back(&dq), back(&dk), back(&dv))
}

/// Single-head attention `softmax(qᵀk / √d + mask) · vᵀ` over `d × l`
/// grids, returned as `d × l`.
pub fn attention<T: Scalar>(
    q: &TensorGrid<T>,
    k: &TensorGrid<T>,
    v: &TensorGrid<T>,
    causal: bool,
) -> Result<TensorGrid<T>> {
    if q.shape() != k.shape() || q.shape() != v.shape() {
        return Err(Error::shape(
            "attention",
            format!("q {:?}, k {:?}, v {:?}", q.shape(), k.shape(), v.shape()),
        ));
    }
    if causal {
        let (_, probs) = attention_scores(q, k, 1);
        return Ok(attention_apply(&probs, v, 1));
    }
    let (d, l) = q.shape();
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = TensorGrid::zeros(d, l);
    for i in 0..l {
        let qi = q.column(i);
        let s: Vec<f64> = (0..l).map(|j| crate::linalg::dot(&qi, &k.column(j)) * scale).collect();
        let max = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = s.iter().map(|v| (v - max).exp()).collect();
        let z: f64 = e.iter().sum();
        for c in 0..d {
            let acc: f64 = (0..l).map(|j| e[j] / z * v.get(c, j).to_f64()).sum();
            out.set(c, i, T::from_f64(acc));
        }
    }
    Ok(out)
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `x · σ(x)`.
pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

/// Derivative of [`silu`].
pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// `W^D (W^U x ⊙ SiLU(W^G x))`.
pub fn ffn_forward<T: Scalar>(
    x: &[T],
    up: &TensorGrid<T>,
    gate: &TensorGrid<T>,
    down: &TensorGrid<T>,
) -> Result<Vec<T>> {
    let u = matvec(up, x)?;
    let g = matvec(gate, x)?;
    if u.len() != g.len() {
        return Err(Error::shape("ffn_forward", format!("up {} vs gate {}", u.len(), g.len())));
    }
    let h: Vec<T> = u
        .iter()
        .zip(&g)
        .map(|(u, g)| T::from_f64(u.to_f64() * silu(g.to_f64())))
        .collect();
    matvec(down, &h)
}

/// Numerically stable softmax.
pub fn softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

fn check_targets<T: Scalar>(logits: &TensorGrid<T>, targets: &[usize]) -> Result<()> {
    if logits.cols() != targets.len() || targets.is_empty() {
        return Err(Error::shape(
            "cross_entropy_loss",
            format!("{} logit columns vs {} targets", logits.cols(), targets.len()),
        ));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= logits.rows()) {
        return Err(Error::TokenOutOfRange { token: t, vocab: logits.rows() });
    }
    Ok(())
}

/// Mean over positions of `−log softmax(logits[:, j])[targets[j]]`.
pub fn cross_entropy_loss<T: Scalar>(logits: &TensorGrid<T>, targets: &[usize]) -> Result<f64> {
    Ok(cross_entropy_with_grad(logits, targets)?.0)
}

/// Loss and its gradient `(softmax − onehot) / l` with respect to the
/// logits.
pub fn cross_entropy_with_grad<T: Scalar>(
    logits: &TensorGrid<T>,
    targets: &[usize],
) -> Result<(f64, TensorGrid<T>)> {
    check_targets(logits, targets)?;
    let l = targets.len();
    let lt = logits.transpose();
    let mut grad_t = TensorGrid::zeros(l, logits.rows());
    let mut total = 0.0;
    for (j, &t) in targets.iter().enumerate() {
        let row: Vec<f64> = lt.row(j).iter().map(|v| v.to_f64()).collect();
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let lse = max + z.ln();
        total += lse - row[t];
        for (c, v) in row.iter().enumerate() {
            let p = (v - lse).exp();
            let g = (p - if c == t { 1.0 } else { 0.0 }) / l as f64;
            grad_t.set(j, c, T::from_f64(g));
        }
    }
    Ok((total / l as f64, grad_t.transpose()))
}
