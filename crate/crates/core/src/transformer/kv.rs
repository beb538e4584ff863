use serde::Serialize;

use super::ops::{rmsnorm_cols, rope_cols, silu};
use super::{Linear, MatrixName, Model};
use crate::error::{Error, Result};
use crate::linalg::{dot, Scalar, TensorGrid};

/// Rotated keys and values of every position decoded so far.
#[derive(Clone, Debug)]
pub struct KvCache<T = f32> {
    // layer -> position -> dim-long column
    keys: Vec<Vec<Vec<T>>>,
    values: Vec<Vec<Vec<T>>>,
    max_seq: usize,
}

impl<T: Scalar> KvCache<T> {
    pub fn new<U: Scalar>(model: &Model<U>) -> Self {
        let layers = model.config().layers;
        Self {
            keys: vec![Vec::new(); layers],
            values: vec![Vec::new(); layers],
            max_seq: model.config().max_seq,
        }
    }

    /// Positions cached so far.
    pub fn len(&self) -> usize {
        self.keys.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn capacity(&self) -> usize {
        self.max_seq
    }

    /// Cached keys of a layer as a `dim × len` grid.
    pub fn keys(&self, layer: usize) -> TensorGrid<T> {
        stack(&self.keys[layer])
    }

    /// Cached values of a layer as a `dim × len` grid.
    pub fn values(&self, layer: usize) -> TensorGrid<T> {
        stack(&self.values[layer])
    }
}

fn stack<T: Scalar>(cols: &[Vec<T>]) -> TensorGrid<T> {
    let n = cols.first().map_or(0, Vec::len);
    TensorGrid::from_fn(n, cols.len(), |i, j| cols[j][i])
}

impl<T: Scalar> Model<T> {
    /// Feeds one token at position `cache.len()` and returns its logits
    /// column. Only the new token passes through the layers; earlier
    /// positions are read from the cache.
    pub fn kv_decode_step(&self, cache: &mut KvCache<T>, token: usize) -> Result<Vec<T>> {
        let pos = cache.len();
        if pos >= cache.max_seq {
            return Err(Error::CacheOverflow(cache.max_seq));
        }
        if cache.keys.len() != self.config().layers {
            return Err(Error::InvalidArgument("cache built for a different model".into()));
        }
        let cfg = self.config();
        let (h, d, base) = (cfg.heads, cfg.head_dim(), cfg.rope_base);
        let scale = 1.0 / (d as f64).sqrt();
        let mut x = self.embed_tokens(&[token])?;
        for i in 0..cfg.layers {
            let (attn_norm, ffn_norm, mats) = self.decode_layer(i);
            let mat = |m: MatrixName| -> &Linear<T> { &mats[m.layer_index()] };
            let xn = rmsnorm_cols(&x, attn_norm);
            let mut q = mat(MatrixName::Q).forward(&xn)?;
            let mut k = mat(MatrixName::K).forward(&xn)?;
            let v = mat(MatrixName::V).forward(&xn)?;
            rope_cols(&mut q, h, pos, base, false);
            rope_cols(&mut k, h, pos, base, false);
            cache.keys[i].push(k.into_data());
            cache.values[i].push(v.into_data());

            let (keys, values) = (&cache.keys[i], &cache.values[i]);
            let q = q.data();
            let mut heads = TensorGrid::zeros(cfg.dim, 1);
            let mut scores = vec![0.0f64; pos + 1];
            for hh in 0..h {
                let cols = hh * d..(hh + 1) * d;
                for (j, s) in scores.iter_mut().enumerate() {
                    *s = dot(&q[cols.clone()], &keys[j][cols.clone()]) * scale;
                }
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let denom: f64 = scores.iter().map(|s| (s - max).exp()).sum();
                let mut acc = vec![0.0f64; d];
                for (j, s) in scores.iter().enumerate() {
                    // Same rounding of the weights as the full forward pass.
                    let p = T::from_f64((s - max).exp() / denom).to_f64();
                    if p == 0.0 {
                        continue;
                    }
                    for (a, vv) in acc.iter_mut().zip(&values[j][cols.clone()]) {
                        *a += p * vv.to_f64();
                    }
                }
                for (c, a) in acc.into_iter().enumerate() {
                    heads.set(hh * d + c, 0, T::from_f64(a));
                }
            }
            let xo = mat(MatrixName::O).forward(&heads)?;
            let resid = x.add(&xo)?;
            let xon = rmsnorm_cols(&resid, ffn_norm);
            let xu = mat(MatrixName::Up).forward(&xon)?;
            let xg = mat(MatrixName::Gate).forward(&xon)?;
            let g = TensorGrid::from_fn(xu.rows(), 1, |r, _| {
                T::from_f64(xu.get(r, 0).to_f64() * silu(xg.get(r, 0).to_f64()))
            });
            x = resid.add(&mat(MatrixName::Down).forward(&g)?)?;
        }
        let normed = rmsnorm_cols(&x, self.final_norm());
        Ok(self.head_linear().forward(&normed)?.into_data())
    }
}

/// Generated tokens and how many token passes through the layers were
/// needed to produce them.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct DecodeReport {
    pub tokens: Vec<usize>,
    pub token_passes: usize,
}

fn argmax<T: Scalar>(v: &[T]) -> usize {
    // First maximum wins, so ties resolve identically on both paths.
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding of `gen` tokens after `prompt`.
///
/// With the cache every position passes through the layers once
/// (`prompt + gen − 1` passes); without it each step re-runs the whole
/// prefix.
pub fn greedy_decode<T: Scalar>(model: &Model<T>, prompt: &[usize], gen: usize, use_cache: bool) -> Result<DecodeReport> {
    if prompt.is_empty() || gen == 0 {
        return Err(Error::InvalidArgument("need a non-empty prompt and gen >= 1".into()));
    }
    let total = prompt.len() + gen - 1;
    if total > model.config().max_seq {
        return Err(Error::SequenceTooLong {
            len: total,
            max: model.config().max_seq,
        });
    }
    let mut seq = prompt.to_vec();
    let mut out = Vec::with_capacity(gen);
    let mut passes = 0;
    if use_cache {
        let mut cache = KvCache::new(model);
        let mut logits = Vec::new();
        for &t in prompt {
            logits = model.kv_decode_step(&mut cache, t)?;
            passes += 1;
        }
        for step in 0..gen {
            let next = argmax(&logits);
            out.push(next);
            if step + 1 < gen {
                logits = model.kv_decode_step(&mut cache, next)?;
                passes += 1;
            }
        }
    } else {
        for _ in 0..gen {
            let logits = model.logits(&seq)?;
            passes += seq.len();
            let next = argmax(&logits.column(seq.len() - 1));
            out.push(next);
            seq.push(next);
        }
    }
    Ok(DecodeReport {
        tokens: out,
        token_passes: passes,
    })
}
