use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::params::count_params;
use super::{Precision, GB};
use crate::error::{Error, Result};
use crate::trainer::Method;
use crate::transformer::{LayerSpecs, ModelConfig, RecomputePolicy, TapeVar};

/// Gradient bytes per trainable parameter (16-bit).
pub const GRAD_BYTES: u64 = 2;
/// AdamW bytes per trainable parameter: 32-bit master, momentum, variance.
pub const OPTIMIZER_BYTES: u64 = 12;
/// Activation bytes per element (16-bit).
pub const ACTIVATION_BYTES: u64 = 2;

/// Inputs of a training memory estimate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemoryQuery {
    pub config: ModelConfig,
    #[serde(default)]
    pub specs: LayerSpecs,
    pub batch: u64,
    pub seq: u64,
    #[serde(default)]
    pub precision: Precision,
    #[serde(default)]
    pub policy: RecomputePolicy,
    #[serde(default)]
    pub method: Method,
    /// Headline parameter count to price instead of the exact one (a
    /// "7B" model has 6.74 B parameters).
    #[serde(default)]
    pub nominal_params: Option<u64>,
}

impl MemoryQuery {
    /// Dense, 16-bit, batch 1 at the config's full context, storing all
    /// activations.
    pub fn new(config: ModelConfig) -> Self {
        Self {
            seq: config.max_seq as u64,
            config,
            specs: LayerSpecs::dense(),
            batch: 1,
            precision: Precision::Fp16,
            policy: RecomputePolicy::StoreAll,
            method: Method::Dense,
            nominal_params: None,
        }
    }

    pub fn report(&self) -> Result<MemoryReport> {
        memory_report(self)
    }
}

/// Footprint of one intermediate variable summed over layers and batch.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VarMemory {
    pub name: String,
    /// Layers holding a copy; 1 for values that exist once per pass.
    pub instances: u64,
    pub elements_per_instance: u64,
    pub elements: u64,
    pub bytes: u64,
    pub gb: f64,
    /// Kept until backward under the policy (otherwise re-derived).
    pub stored: bool,
}

/// Training memory broken into its components.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MemoryReport {
    pub batch: u64,
    pub seq: u64,
    pub precision: Precision,
    pub policy: RecomputePolicy,
    pub method: Method,
    pub param_count: u64,
    pub exact_param_count: u64,
    pub trainable_count: u64,
    pub param_bytes_per_value: f64,
    pub grad_bytes_per_value: u64,
    pub optimizer_bytes_per_value: u64,
    pub activation_bytes_per_value: u64,
    pub params_bytes: u64,
    pub grads_bytes: u64,
    pub optimizer_bytes: u64,
    /// Activations kept from forward to backward.
    pub intermediates_bytes: u64,
    /// Largest set of re-derived activations alive at once (one layer).
    pub recompute_transient_bytes: u64,
    pub params_gb: f64,
    pub grads_gb: f64,
    pub optimizer_gb: f64,
    pub intermediates_gb: f64,
    pub recompute_transient_gb: f64,
    /// Stored plus transient activations.
    pub intermediates_peak_gb: f64,
    /// Params, grads, optimizer and stored intermediates.
    pub total_gb: f64,
    pub breakdown: Vec<VarMemory>,
    pub notes: Vec<String>,
}

#[derive(Clone, Copy)]
enum Extent {
    /// `dim × l`
    Hidden,
    /// `heads × l × l`
    Scores,
    /// `ffn_dim × l`
    Ffn,
}

/// Priced variables: per-layer flag and element extent.
const VARS: [(TapeVar, bool, Extent); 12] = [
    (TapeVar::Xe, false, Extent::Hidden),
    (TapeVar::XeNorm, true, Extent::Hidden),
    (TapeVar::K, true, Extent::Hidden),
    (TapeVar::Q, true, Extent::Hidden),
    (TapeVar::V, true, Extent::Hidden),
    (TapeVar::Qk, true, Extent::Scores),
    (TapeVar::S, true, Extent::Scores),
    (TapeVar::Xo, true, Extent::Hidden),
    (TapeVar::XoNorm, true, Extent::Hidden),
    (TapeVar::Xu, true, Extent::Ffn),
    (TapeVar::Xg, true, Extent::Ffn),
    (TapeVar::Xd, false, Extent::Hidden),
];

const NOTES: [&str; 3] = [
    "x_e is priced once: the embedding output that enters the stack",
    "x_d is priced once as the final hidden state; per-layer FFN outputs are folded into the residual stream and never read by backward",
    "intermediates scale linearly in batch",
];

/// Memory for training `q.config` under the query's precision, method
/// and recompute policy.
pub fn memory_report(q: &MemoryQuery) -> Result<MemoryReport> {
    if q.batch == 0 || q.seq == 0 {
        return Err(Error::InvalidArgument("batch and seq must be at least 1".into()));
    }
    q.config.validate()?;
    let table = count_params(&q.config, &q.specs, q.method);
    let param_count = q.nominal_params.unwrap_or(table.total);
    // A nominal count only stands in for the trainable set when
    // everything is trained.
    let trainable_count = if table.trainable == table.total { param_count } else { table.trainable };

    let (n, h, m, l) = (q.config.dim as u64, q.config.heads as u64, q.config.ffn_dim as u64, q.seq);
    let layers = q.config.layers as u64;
    let mut breakdown = Vec::new();
    let (mut stored, mut transient) = (0u64, 0u64);
    for (var, per_layer, extent) in VARS {
        let per = match extent {
            Extent::Hidden => n * l,
            Extent::Scores => h * l * l,
            Extent::Ffn => m * l,
        } * q.batch;
        let instances = if per_layer { layers } else { 1 };
        let keep = !per_layer || q.policy.keeps(var);
        let elements = per * instances;
        let bytes = elements * ACTIVATION_BYTES;
        if keep {
            stored += bytes;
        } else if layers > 0 {
            transient += per * ACTIVATION_BYTES;
        }
        breakdown.push(VarMemory {
            name: var.as_str().into(),
            instances,
            elements_per_instance: per,
            elements,
            bytes,
            gb: bytes as f64 / GB,
            stored: keep,
        });
    }

    let params_bytes = q.precision.bytes_for(param_count);
    let grads_bytes = trainable_count * GRAD_BYTES;
    let optimizer_bytes = trainable_count * OPTIMIZER_BYTES;
    let gb = |b: u64| b as f64 / GB;
    Ok(MemoryReport {
        batch: q.batch,
        seq: q.seq,
        precision: q.precision,
        policy: q.policy.clone(),
        method: q.method,
        param_count,
        exact_param_count: table.total,
        trainable_count,
        param_bytes_per_value: q.precision.bits() as f64 / 8.0,
        grad_bytes_per_value: GRAD_BYTES,
        optimizer_bytes_per_value: OPTIMIZER_BYTES,
        activation_bytes_per_value: ACTIVATION_BYTES,
        params_bytes,
        grads_bytes,
        optimizer_bytes,
        intermediates_bytes: stored,
        recompute_transient_bytes: transient,
        params_gb: gb(params_bytes),
        grads_gb: gb(grads_bytes),
        optimizer_gb: gb(optimizer_bytes),
        intermediates_gb: gb(stored),
        recompute_transient_gb: gb(transient),
        intermediates_peak_gb: gb(stored + transient),
        total_gb: gb(params_bytes + grads_bytes + optimizer_bytes + stored),
        breakdown,
        notes: NOTES.iter().map(|s| s.to_string()).collect(),
    })
}

impl MemoryReport {
    pub fn var(&self, name: &str) -> Option<&VarMemory> {
        self.breakdown.iter().find(|v| v.name == name)
    }

    /// Aligned text rendering.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "params {} (exact {}), trainable {}, batch {}, seq {}, {}",
            self.param_count, self.exact_param_count, self.trainable_count, self.batch, self.seq, self.precision
        );
        for (k, v) in [
            ("params", self.params_gb),
            ("grads", self.grads_gb),
            ("optimizer", self.optimizer_gb),
            ("intermediates", self.intermediates_gb),
            ("recompute peak", self.recompute_transient_gb),
            ("intermediates peak", self.intermediates_peak_gb),
            ("total", self.total_gb),
        ] {
            let _ = writeln!(out, "{k:<20} {v:>12.3} GB");
        }
        let _ = writeln!(out, "\n{:<10} {:>6} {:>16} {:>10} {:>7}", "variable", "count", "elements", "GB", "stored");
        for v in &self.breakdown {
            let _ = writeln!(
                out,
                "{:<10} {:>6} {:>16} {:>10.3} {:>7}",
                v.name, v.instances, v.elements, v.gb, v.stored
            );
        }
        for n in &self.notes {
            let _ = writeln!(out, "note: {n}");
        }
        out
    }
}
