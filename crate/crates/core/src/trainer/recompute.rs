use crate::costmodel::{recompute_overhead, RecomputeOverhead};
use crate::error::Result;
use crate::linalg::{Scalar, TensorGrid};
use crate::transformer::{BackwardStats, DecoderState, Gradients, Model};

/// Gradients from a backward pass that re-derived dropped activations,
/// with the analytic cost of doing so.
#[derive(Clone, Debug)]
pub struct RecomputeReport<T = f32> {
    pub grads: Gradients<T>,
    pub stats: BackwardStats,
    pub overhead: RecomputeOverhead,
}

/// Backward pass under the policy the forward pass ran with. Layers whose
/// tape lacks entries are re-run from their kept inputs first.
pub fn recompute_backward<T: Scalar>(
    model: &Model<T>,
    state: &DecoderState<T>,
    dlogits: &TensorGrid<T>,
) -> Result<RecomputeReport<T>> {
    let (grads, stats) = model.backward_with_stats(state, dlogits)?;
    let overhead = recompute_overhead(model.config(), model.specs(), state.tokens().len() as u64, state.policy())?;
    Ok(RecomputeReport { grads, stats, overhead })
}
