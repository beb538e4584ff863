//! Decomposition, adapters and quantization at model scale.

use lrlm_core::costmodel::count_params;
use lrlm_core::linalg::{frobenius_norm, seeded_random, Dist};
use lrlm_core::lowrank::{decompose_linear, decompose_model};
use lrlm_core::trainer::{Method, TrainConfig, Trainer};
use lrlm_core::transformer::{LayerKind, LayerSpecs, MatrixName, Model, ModelConfig};
use lrlm_core::{QuantizedMatrix, TensorGrid};

/// Symmetric eigenvalues by cyclic Jacobi rotations.
fn jacobi_eigenvalues(mut a: Vec<Vec<f64>>) -> Vec<f64> {
    let n = a.len();
    for _ in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i][j] * a[i][j]).sum();
        if off < 1e-26 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let (c, s) = (1.0 / (t * t + 1.0).sqrt(), t / (t * t + 1.0).sqrt());
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut e: Vec<f64> = (0..n).map(|i| a[i][i].max(0.0)).collect();
    e.sort_by(|x, y| y.partial_cmp(x).unwrap());
    e
}

#[test]
fn rank_four_error_matches_eigen_oracle() {
    let w: TensorGrid<f64> = seeded_random(16, 16, 2024, Dist::Gaussian { std: 1.0 });
    let gram: Vec<Vec<f64>> = (0..16)
        .map(|i| (0..16).map(|j| (0..16).map(|k| w.get(k, i) * w.get(k, j)).sum()).collect())
        .collect();
    let eig = jacobi_eigenvalues(gram);
    let expected = eig[4..].iter().sum::<f64>().sqrt();
    let f = decompose_linear(&w, 4).unwrap();
    assert_eq!((f.down().shape(), f.up().shape()), ((4, 16), (16, 4)));
    let err = frobenius_norm(&w.sub(&f.product()).unwrap());
    assert!((err - expected).abs() <= 1e-9 * expected, "{err} vs {expected}");
}

fn donor() -> Model {
    Model::new(ModelConfig::new(64, 32, 4, 3, 48, 16), LayerSpecs::dense(), 21).unwrap()
}

#[test]
fn decomposition_is_independent_of_worker_count() {
    let d = donor();
    let one = decompose_model(&d, 6, &MatrixName::PER_LAYER, 1).unwrap();
    let four = decompose_model(&d, 6, &MatrixName::PER_LAYER, 4).unwrap();
    assert_eq!(one, four);
    assert!(decompose_model(&d, 6, &MatrixName::PER_LAYER, 0).is_err());
    // Decomposing twice is rejected: the targets are no longer dense.
    assert!(decompose_model(&one, 6, &[MatrixName::Q], 1).is_err());
}

#[test]
fn decomposed_parameter_count_matches_closed_form() {
    let d = donor();
    let targets = [MatrixName::Q, MatrixName::K, MatrixName::Up];
    let m = decompose_model(&d, 5, &targets, 2).unwrap();
    let table = count_params(m.config(), m.specs(), Method::Method2);
    assert_eq!(m.param_count() as u64, table.total);
    let saved: u64 = targets
        .iter()
        .map(|&t| {
            let (o, i) = m.config().matrix_shape(t);
            3 * ((o * i) as u64 - 5 * (o + i) as u64)
        })
        .sum();
    assert_eq!(d.param_count() as u64 - m.param_count() as u64, saved);
}

fn trained_lora() -> (Model, Model) {
    let base = donor();
    let mut m = base.clone();
    m.attach_lora(4, &[MatrixName::Q, MatrixName::V, MatrixName::Up], 3).unwrap();
    let tokens: Vec<usize> = (0..400).map(|i| (i * 7 + i / 5) % 64).collect();
    let cfg = TrainConfig {
        lr: 1e-2,
        method: Method::LoraFinetune,
        ..TrainConfig::new(15, 2, 12)
    };
    Trainer::new(cfg, &tokens).unwrap().run(&mut m, |_| true).unwrap();
    (base, m)
}

#[test]
fn lora_training_leaves_frozen_weights_bit_identical() {
    let (base, m) = trained_lora();
    let before: std::collections::BTreeMap<_, _> = base.params().into_iter().map(|p| (p.name, p.tensor.clone())).collect();
    let mut moved = 0;
    for p in m.params() {
        if p.name.ends_with(".down") || p.name.ends_with(".up") {
            moved += 1;
            continue;
        }
        let key = p.name.strip_suffix(".base").map(|s| format!("{s}.weight")).unwrap_or(p.name.clone());
        assert_eq!(p.tensor, &before[&key], "{}", p.name);
    }
    assert_eq!(moved, 2 * 3 * 3);
}

#[test]
fn merged_model_matches_adapter_model() {
    let (_, m) = trained_lora();
    let tokens = [5, 9, 63, 0, 12, 40];
    let adapted = m.logits(&tokens).unwrap();
    let mut merged = m.clone();
    assert_eq!(merged.merge_lora(false).unwrap(), 9);
    assert!(merged.specs().kind(MatrixName::Q) == LayerKind::Dense);
    let out = merged.logits(&tokens).unwrap();
    assert!(out.max_abs_diff(&adapted).unwrap() <= 1e-5);
}

#[test]
fn quantized_model_matches_dequantized_oracle() {
    let d = donor();
    let tokens = [1, 2, 3, 50, 7];
    let dense = d.logits(&tokens).unwrap();
    for bits in [8u8, 4] {
        let mut q = d.clone();
        q.quantize(bits, &MatrixName::PER_LAYER).unwrap();
        // Oracle: the dense model with every target replaced by its
        // dequantized grid.
        let mut oracle = d.clone();
        let names: Vec<String> = d.params().into_iter().map(|p| p.name).filter(|n| n.starts_with("layers.") && n.ends_with(".weight")).collect();
        for name in &names {
            let w = oracle.param_mut(name).unwrap();
            *w = QuantizedMatrix::quantize_rows(w, bits).unwrap().dequantize_rows();
        }
        let got = q.logits(&tokens).unwrap();
        let want = oracle.logits(&tokens).unwrap();
        assert!(got.max_abs_diff(&want).unwrap() <= 1e-5 * (1.0 + want.max_abs()), "{bits}-bit");
        assert!(got.max_abs_diff(&dense).unwrap() > 0.0);
    }
}
