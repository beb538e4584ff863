use serde::Serialize;

use super::data::Window;
use super::train::{batch_gradients, batch_loss};
use crate::error::{Error, Result};
use crate::linalg::Scalar;
use crate::transformer::{Gradients, Model, RecomputePolicy};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-4;
/// Denominator floor of the relative error, so near-zero gradients are
/// judged on an absolute scale.
pub const REL_FLOOR: f64 = 1e-5;

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Outcome of a finite-difference gradient check.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `tensor[index]` of the worst entry.
    pub worst: String,
    pub checked: usize,
    pub tol: f64,
    pub passed: bool,
}

/// Checks the analytic gradients of `model` on `batch` against central
/// differences computed in f64. At most `per_tensor` entries of each
/// trainable tensor are probed, spread evenly; `None` probes all.
pub fn grad_check<T: Scalar>(
    model: &Model<T>,
    batch: &[Window],
    tol: f64,
    per_tensor: Option<usize>,
) -> Result<GradCheckReport> {
    let m64: Model<f64> = model.cast();
    let (_, analytic, _) = batch_gradients(&m64, batch, &RecomputePolicy::StoreAll)?;
    check_gradients(&m64, batch, &analytic, tol, per_tensor)
}

/// Compares supplied gradients against central differences of `model`.
/// Every trainable tensor must have a gradient.
pub fn check_gradients(
    model: &Model<f64>,
    batch: &[Window],
    analytic: &Gradients<f64>,
    tol: f64,
    per_tensor: Option<usize>,
) -> Result<GradCheckReport> {
    let mut probe = model.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: String::new(),
        checked: 0,
        tol,
        passed: true,
    };
    for name in model.trainable_names() {
        let grad = analytic
            .get(&name)
            .ok_or_else(|| Error::MissingTape(format!("no gradient for {name}")))?;
        let len = grad.len();
        let count = per_tensor.map_or(len, |k| k.min(len));
        for s in 0..count {
            // Evenly spread probe indices, always including the first.
            let idx = s * len / count;
            let orig = probe.param_mut(&name).expect("trainable").data()[idx];
            probe.param_mut(&name).expect("trainable").data_mut()[idx] = orig + FD_STEP;
            let plus = batch_loss(&probe, batch)?;
            probe.param_mut(&name).expect("trainable").data_mut()[idx] = orig - FD_STEP;
            let minus = batch_loss(&probe, batch)?;
            probe.param_mut(&name).expect("trainable").data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let err = relative_error(grad.data()[idx].to_f64(), numeric);
            report.checked += 1;
            if !(err <= report.max_rel_error) {
                report.max_rel_error = err;
                report.worst = format!("{name}[{idx}]");
            }
        }
    }
    report.passed = report.max_rel_error <= tol;
    Ok(report)
}
