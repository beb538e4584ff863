use serde::{Deserialize, Serialize};

use crate::costmodel::{GB, GRAD_BYTES, OPTIMIZER_BYTES};
use crate::error::{Error, Result};

/// Per-GPU memory when gradients and optimizer states are split across
/// `gpus` workers and parameters are replicated.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ShardPlan {
    pub gpus: u64,
    pub param_bytes: u64,
    pub grad_bytes: u64,
    pub optimizer_bytes: u64,
    pub grad_shards: Vec<u64>,
    pub optimizer_shards: Vec<u64>,
    /// Replicated parameters plus each worker's shards.
    pub per_gpu_bytes: Vec<u64>,
    pub max_per_gpu_gb: f64,
    pub unsharded_gb: f64,
    /// Gradient bytes each worker sends in the reduce-scatter step.
    pub reduce_scatter_bytes: Vec<u64>,
    /// Parameter bytes each worker receives in the all-gather step.
    pub all_gather_bytes: Vec<u64>,
    pub protocol: Vec<String>,
}

/// `total` split into `parts` contiguous shards, the first ones one byte
/// larger when it does not divide evenly.
fn split(total: u64, parts: u64) -> Vec<u64> {
    let (q, r) = (total / parts, total % parts);
    (0..parts).map(|i| q + u64::from(i < r)).collect()
}

/// Plans sharded training for a model of `param_bytes` (16-bit) with
/// `trainable_bytes` of trainable 16-bit values. Gradients take the same
/// bytes as the trainable values and optimizer state six times as many.
pub fn shard_plan(param_bytes: u64, trainable_bytes: u64, gpus: u64) -> Result<ShardPlan> {
    if gpus == 0 {
        return Err(Error::InvalidArgument("need at least one GPU".into()));
    }
    let grad_bytes = trainable_bytes;
    let optimizer_bytes = trainable_bytes * (OPTIMIZER_BYTES / GRAD_BYTES);
    let grad_shards = split(grad_bytes, gpus);
    let optimizer_shards = split(optimizer_bytes, gpus);
    let param_shards = split(param_bytes, gpus);
    let per_gpu_bytes: Vec<u64> = grad_shards
        .iter()
        .zip(&optimizer_shards)
        .map(|(g, o)| param_bytes + g + o)
        .collect();
    Ok(ShardPlan {
        gpus,
        param_bytes,
        grad_bytes,
        optimizer_bytes,
        max_per_gpu_gb: per_gpu_bytes.iter().copied().max().unwrap_or(0) as f64 / GB,
        unsharded_gb: (param_bytes + grad_bytes + optimizer_bytes) as f64 / GB,
        reduce_scatter_bytes: grad_shards.iter().map(|s| grad_bytes - s).collect(),
        all_gather_bytes: param_shards.iter().map(|s| param_bytes - s).collect(),
        grad_shards,
        optimizer_shards,
        per_gpu_bytes,
        protocol: vec![
            "each worker computes gradients for its own micro-batch".into(),
            "reduce-scatter: worker i receives the summed gradient shard i".into(),
            "worker i updates optimizer shard i and its parameter shard".into(),
            "all-gather: every worker receives the updated parameter shards".into(),
        ],
    })
}

/// Resident bytes of each training component.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Footprint {
    pub params: u64,
    pub grads: u64,
    pub optimizer: u64,
    pub intermediates: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct PhaseResident {
    pub phase: String,
    pub bytes: u64,
}

/// Peak device memory when optimizer state lives off-device except during
/// the update and activations are freed before it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct OffloadReport {
    /// Everything resident at once.
    pub naive_peak: u64,
    pub phases: Vec<PhaseResident>,
    pub peak: u64,
    pub peak_phase: String,
    pub saving: u64,
}

pub fn offload_peak(f: &Footprint) -> OffloadReport {
    let phases = vec![
        PhaseResident {
            phase: "forward".into(),
            bytes: f.params + f.intermediates,
        },
        PhaseResident {
            phase: "backward".into(),
            bytes: f.params + f.grads + f.intermediates,
        },
        PhaseResident {
            phase: "update".into(),
            bytes: f.params + f.grads + f.optimizer,
        },
    ];
    // Ties resolve to the earliest phase.
    let top = phases.iter().fold(&phases[0], |best, p| if p.bytes > best.bytes { p } else { best });
    let naive_peak = f.params + f.grads + f.optimizer + f.intermediates;
    OffloadReport {
        naive_peak,
        peak: top.bytes,
        peak_phase: top.phase.clone(),
        saving: naive_peak - top.bytes,
        phases,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn seventy_b_on_eight_gpus() {
        let p = shard_plan(140_000_000_000, 140_000_000_000, 8).unwrap();
        assert_eq!(p.per_gpu_bytes, vec![262_500_000_000; 8]);
        assert_eq!(p.max_per_gpu_gb, 262.5);
        let one = shard_plan(140_000_000_000, 140_000_000_000, 1).unwrap();
        assert_eq!(one.max_per_gpu_gb, 1120.0);
        assert_eq!(one.reduce_scatter_bytes, vec![0]);
    }

    #[test]
    fn nothing_trainable_leaves_params() {
        let p = shard_plan(1000, 0, 4).unwrap();
        assert_eq!(p.per_gpu_bytes, vec![1000; 4]);
        assert!(shard_plan(1, 1, 0).is_err());
    }

    #[test]
    fn offload_examples() {
        let r = offload_peak(&Footprint {
            params: 10,
            grads: 10,
            optimizer: 60,
            intermediates: 5,
        });
        assert_eq!(r.peak_phase, "update");
        assert_eq!(r.peak, 80);
        assert_eq!(offload_peak(&Footprint::default()).peak, 0);
    }

    proptest! {
        #[test]
        fn shards_sum_to_the_whole(params in 0u64..1 << 40, trainable in 0u64..1 << 40, gpus in 1u64..64) {
            let p = shard_plan(params, trainable, gpus).unwrap();
            prop_assert_eq!(p.optimizer_shards.iter().sum::<u64>(), p.optimizer_bytes);
            prop_assert_eq!(p.grad_shards.iter().sum::<u64>(), p.grad_bytes);
            prop_assert_eq!(p.optimizer_bytes, 6 * trainable);
        }

        #[test]
        fn offload_saves_the_smaller_of_optimizer_and_activations(
            params in 0u64..1 << 40, grads in 0u64..1 << 40, optimizer in 0u64..1 << 40, intermediates in 0u64..1 << 40,
        ) {
            let r = offload_peak(&Footprint { params, grads, optimizer, intermediates });
            prop_assert_eq!(r.saving, optimizer.min(intermediates));
        }
    }
}
