use serde::{Deserialize, Serialize};

use super::{Scalar, TensorGrid};
use crate::error::{Error, Result};

/// Sweep cap for the Jacobi iteration.
pub const SVD_MAX_SWEEPS: usize = 100;
/// Converged once the off-diagonal mass of a sweep drops below this
/// fraction of `‖w‖_F²`.
pub const SVD_TOLERANCE: f64 = 1e-10;

/// Singular values in non-increasing order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SingularSpectrum {
    values: Vec<f64>,
}

impl SingularSpectrum {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// `√Σ_{i ≥ r} σ_i²`: the Frobenius error of the best rank-`r`
    /// approximation.
    pub fn tail_norm(&self, r: usize) -> f64 {
        self.values
            .iter()
            .skip(r)
            .map(|s| s * s)
            .sum::<f64>()
            .sqrt()
    }
}

/// Rank-`r` factors of `w ≈ u_sigma · v_t`.
#[derive(Clone, Debug)]
pub struct SvdFactors<T> {
    /// `U_r Σ_r`, `rows × r`.
    pub u_sigma: TensorGrid<T>,
    /// `V_rᵀ`, `r × cols`, orthonormal rows.
    pub v_t: TensorGrid<T>,
    /// All `min(rows, cols)` singular values.
    pub spectrum: SingularSpectrum,
}

/// Truncated SVD by one-sided Jacobi rotations on the smaller dimension,
/// in `f64`.
pub fn truncated_svd<T: Scalar>(w: &TensorGrid<T>, r: usize) -> Result<SvdFactors<T>> {
    let (n, m) = w.shape();
    let k = n.min(m);
    if r == 0 || r > k {
        return Err(Error::InvalidArgument(format!(
            "rank {r} outside 1..={k} for a {n}x{m} matrix"
        )));
    }
    // Orthogonalize the columns of a tall matrix: W itself when cols <= rows,
    // otherwise Wᵀ.
    let tall = m <= n;
    let (p, q) = if tall { (n, m) } else { (m, n) };
    let mut cols: Vec<Vec<f64>> = (0..q)
        .map(|j| {
            (0..p)
                .map(|i| if tall { w.get(i, j) } else { w.get(j, i) }.to_f64())
                .collect()
        })
        .collect();
    let mut v: Vec<Vec<f64>> = (0..q)
        .map(|j| (0..q).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    let norm_sq: f64 = cols.iter().flatten().map(|x| x * x).sum();
    let threshold = SVD_TOLERANCE * norm_sq;
    let mut converged = norm_sq == 0.0;
    let mut residual = 0.0;
    let mut sweep = 0;
    while !converged && sweep < SVD_MAX_SWEEPS {
        let mut off = 0.0;
        for i in 0..q {
            for j in i + 1..q {
                let (alpha, beta, gamma) = column_moments(&cols[i], &cols[j]);
                off += gamma * gamma;
                if gamma == 0.0 {
                    continue;
                }
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, i, j, c, s);
                rotate(&mut v, i, j, c, s);
            }
        }
        residual = off.sqrt();
        converged = residual <= threshold;
        sweep += 1;
    }
    if !converged {
        return Err(Error::NoConvergence {
            sweeps: SVD_MAX_SWEEPS,
            residual: residual / norm_sq,
        });
    }

    let sigma: Vec<f64> = cols
        .iter()
        .map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    let mut order: Vec<usize> = (0..q).collect();
    // Stable: equal values keep column order.
    order.sort_by(|&a, &b| sigma[b].partial_cmp(&sigma[a]).unwrap());
    let values: Vec<f64> = order.iter().map(|&j| sigma[j]).collect();

    let picked = &order[..r];
    let (u_sigma, v_t) = if tall {
        // W = A Vᵀ with A = U Σ.
        let us = TensorGrid::from_fn(n, r, |i, t| T::from_f64(cols[picked[t]][i]));
        let vt = TensorGrid::from_fn(r, m, |t, j| T::from_f64(v[picked[t]][j]));
        (us, vt)
    } else {
        // Wᵀ = A V'ᵀ, so W = V' Aᵀ = (V' Σ)(Σ⁻¹ Aᵀ).
        let mut dirs: Vec<Option<Vec<f64>>> = picked
            .iter()
            .map(|&j| {
                let s = sigma[j];
                (s > f64::EPSILON * norm_sq.sqrt()).then(|| cols[j].iter().map(|x| x / s).collect())
            })
            .collect();
        complete_orthonormal(&mut dirs, m);
        let us = TensorGrid::from_fn(n, r, |i, t| T::from_f64(v[picked[t]][i] * sigma[picked[t]]));
        let vt = TensorGrid::from_fn(r, m, |t, j| T::from_f64(dirs[t].as_ref().unwrap()[j]));
        (us, vt)
    };
    Ok(SvdFactors {
        u_sigma,
        v_t,
        spectrum: SingularSpectrum { values },
    })
}

fn column_moments(a: &[f64], b: &[f64]) -> (f64, f64, f64) {
    let mut alpha = 0.0;
    let mut beta = 0.0;
    let mut gamma = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        alpha += x * x;
        beta += y * y;
        gamma += x * y;
    }
    (alpha, beta, gamma)
}

fn rotate(cols: &mut [Vec<f64>], i: usize, j: usize, c: f64, s: f64) {
    let (left, right) = cols.split_at_mut(j);
    let (a, b) = (&mut left[i], &mut right[0]);
    for (x, y) in a.iter_mut().zip(b.iter_mut()) {
        let (xi, yj) = (*x, *y);
        *x = c * xi - s * yj;
        *y = s * xi + c * yj;
    }
}

/// Fills `None` slots with unit vectors orthogonal to every other slot,
/// drawn from the standard basis by Gram–Schmidt.
fn complete_orthonormal(dirs: &mut [Option<Vec<f64>>], dim: usize) {
    let mut basis = 0;
    for slot in 0..dirs.len() {
        if dirs[slot].is_some() {
            continue;
        }
        while basis < dim {
            let mut cand: Vec<f64> = (0..dim).map(|i| if i == basis { 1.0 } else { 0.0 }).collect();
            basis += 1;
            for other in dirs.iter().flatten() {
                let d: f64 = cand.iter().zip(other).map(|(a, b)| a * b).sum();
                cand.iter_mut().zip(other).for_each(|(a, b)| *a -= d * b);
            }
            let norm = cand.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-8 {
                cand.iter_mut().for_each(|x| *x /= norm);
                dirs[slot] = Some(cand);
                break;
            }
        }
    }
}
