use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

use super::params::{count_params, layer_matrices};
use super::{HardwareProfile, Precision};
use crate::error::{Error, Result};
use crate::quant::quantized_size_bytes;
use crate::trainer::Method;
use crate::transformer::{LayerSpecs, MatrixName, ModelConfig, RecomputePolicy, TapeVar};

/// Max, exponent and normalization per attention score.
const SOFTMAX_FLOPS_PER_SCORE: u64 = 3;

/// Forward FLOPs of one decoder layer for a sequence.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct LayerFlops {
    /// Two FLOPs per weight per position.
    pub linear: u64,
    /// Query-key products, `2·dim·l²` (the causal half is not skipped).
    pub scores: u64,
    pub softmax: u64,
    /// Probability-weighted sum of values, `2·dim·l²`.
    pub weighted_sum: u64,
    pub total: u64,
}

/// Forward and training FLOPs of a whole sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct FlopBreakdown {
    pub seq: u64,
    pub layer: LayerFlops,
    pub layers: u64,
    /// Output head; the embedding is a lookup and costs nothing.
    pub head: u64,
    pub forward: u64,
    /// Forward plus a backward pass priced at twice the forward.
    pub training: u64,
}

/// FLOPs for one sequence of `seq` positions.
pub fn forward_flops(config: &ModelConfig, specs: &LayerSpecs, seq: u64) -> FlopBreakdown {
    let table = count_params(config, specs, Method::Dense);
    let l = seq;
    let (n, h) = (config.dim as u64, config.heads as u64);
    let weights: u64 = layer_matrices(config.arch)
        .iter()
        .filter_map(|m| table.row(m.as_str()))
        .map(|r| r.per_instance)
        .sum();
    let mut layer = LayerFlops {
        linear: 2 * weights * l,
        scores: 2 * n * l * l,
        softmax: SOFTMAX_FLOPS_PER_SCORE * h * l * l,
        weighted_sum: 2 * n * l * l,
        total: 0,
    };
    layer.total = layer.linear + layer.scores + layer.softmax + layer.weighted_sum;
    let head_weights = table
        .row(MatrixName::Head.as_str())
        .map_or(config.vocab as u64 * n, |r| r.per_instance);
    let head = 2 * head_weights * l;
    let layers = config.layers as u64;
    let forward = layers * layer.total + head;
    FlopBreakdown {
        seq,
        layer,
        layers,
        head,
        forward,
        training: 3 * forward,
    }
}

/// Extra forward work a recompute policy adds to one training step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RecomputeOverhead {
    pub extra_flops: u64,
    pub step_flops: u64,
    /// `extra_flops / step_flops`.
    pub ratio: f64,
}

/// Mirrors the executable backward pass: when only the softmax is missing
/// the scores are re-derived from the kept queries and keys; any other
/// missing entry that backward reads re-runs the whole layer.
pub fn recompute_overhead(
    config: &ModelConfig,
    specs: &LayerSpecs,
    seq: u64,
    policy: &RecomputePolicy,
) -> Result<RecomputeOverhead> {
    if seq == 0 {
        return Err(Error::InvalidArgument("seq must be at least 1".into()));
    }
    let f = forward_flops(config, specs, seq);
    let missing: Vec<TapeVar> = TapeVar::NEEDED.into_iter().filter(|&v| !policy.keeps(v)).collect();
    let per_layer = if missing.is_empty() {
        0
    } else if missing == [TapeVar::S] {
        f.layer.scores + f.layer.softmax
    } else {
        f.layer.total
    };
    let extra = per_layer * f.layers;
    Ok(RecomputeOverhead {
        extra_flops: extra,
        step_flops: f.training,
        ratio: if f.training == 0 { 0.0 } else { extra as f64 / f.training as f64 },
    })
}

/// Two FLOPs (multiply and add) per parameter per token.
pub fn flops_per_token(param_count: u64) -> u64 {
    2 * param_count
}

/// Work of generating `gen` tokens after an `l_in`-token prompt.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WorkloadReport {
    pub l_in: u64,
    pub gen: u64,
    pub kv_cache: bool,
    pub flops_per_token: u64,
    /// Token positions pushed through the model.
    pub token_passes: u64,
    pub total_flops: u64,
    /// Peak-rate lower bounds per precision, once a profile is applied.
    pub est_seconds: BTreeMap<Precision, f64>,
    pub profile: Option<String>,
}

impl WorkloadReport {
    /// Fills `est_seconds` for every precision the profile rates.
    pub fn with_profile(mut self, profile: &HardwareProfile) -> Self {
        self.est_seconds = profile
            .tflops
            .keys()
            .map(|&p| (p, throughput_estimate(&self, profile, p).expect("rated precision")))
            .collect();
        self.profile = Some(profile.name.clone());
        self
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "prompt {} + generate {} (kv cache {}): {} token passes × {:.3} GFLOP = {:.3} TFLOP",
            self.l_in,
            self.gen,
            if self.kv_cache { "on" } else { "off" },
            self.token_passes,
            self.flops_per_token as f64 / 1e9,
            self.total_flops as f64 / 1e12
        );
        for (p, s) in &self.est_seconds {
            let _ = writeln!(out, "  {p:<5} {s:>12.3} s");
        }
        out
    }
}

/// Without a cache every step re-runs the prefix: `Σ (l_in + i)` passes.
/// With one each position passes once: `l_in + gen − 1`.
pub fn inference_workload(l_in: u64, gen: u64, param_count: u64, kv_cache: bool) -> Result<WorkloadReport> {
    if gen == 0 {
        return Err(Error::InvalidArgument("gen must be at least 1".into()));
    }
    let token_passes = if kv_cache {
        l_in + gen - 1
    } else {
        gen * l_in + gen * (gen - 1) / 2
    };
    let fpt = flops_per_token(param_count);
    Ok(WorkloadReport {
        l_in,
        gen,
        kv_cache,
        flops_per_token: fpt,
        token_passes,
        total_flops: fpt * token_passes,
        est_seconds: BTreeMap::new(),
        profile: None,
    })
}

/// `total_flops / rate`: a lower bound that assumes peak throughput.
pub fn throughput_estimate(report: &WorkloadReport, profile: &HardwareProfile, precision: Precision) -> Result<f64> {
    let rate = profile.rate(precision)?;
    Ok(report.total_flops as f64 / (rate * 1e12))
}

/// Bytes to store the model's parameters at `precision`. Below 16 bits
/// each row of `dim` values also carries a 32-bit scale and offset.
pub fn model_size_bytes(config: &ModelConfig, specs: &LayerSpecs, precision: Precision) -> u64 {
    let count = count_params(config, specs, Method::Dense).total;
    if precision.bits() < 16 {
        quantized_size_bytes(count, precision.bits(), config.dim as u64)
    } else {
        precision.bytes_for(count)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presets;

    #[test]
    fn workload_counts() {
        let r = inference_workload(100, 100, 7_000_000_000, false).unwrap();
        assert_eq!(r.token_passes, 14_950);
        assert_eq!(r.total_flops, 14_000_000_000 * 14_950);
        let c = inference_workload(100, 100, 7_000_000_000, true).unwrap();
        assert_eq!(c.token_passes, 199);
        for l_in in [1, 7, 100] {
            let a = inference_workload(l_in, 1, 10, true).unwrap();
            let b = inference_workload(l_in, 1, 10, false).unwrap();
            assert_eq!(a.token_passes, b.token_passes);
        }
        assert!(inference_workload(1, 0, 10, true).is_err());
        assert_eq!(flops_per_token(0), 0);
    }

    #[test]
    fn seconds_are_flops_over_rate() {
        let r = inference_workload(100, 100, 7_000_000_000, false).unwrap();
        let s = throughput_estimate(&r, &HardwareProfile::phone(), Precision::Fp16).unwrap();
        assert!((s - 104.65).abs() < 1e-9);
        let a = HardwareProfile::a100();
        let ratio = throughput_estimate(&r, &a, Precision::Fp16).unwrap() / throughput_estimate(&r, &a, Precision::Int4).unwrap();
        assert!((ratio - 4.0).abs() < 1e-12);
        let zero = inference_workload(0, 1, 0, true).unwrap();
        assert_eq!(throughput_estimate(&zero, &a, Precision::Fp32).unwrap(), 0.0);
        assert_eq!(r.with_profile(&a).est_seconds.len(), 4);
    }

    #[test]
    fn recompute_overheads() {
        let cfg = presets::preset("llama2-7b").unwrap().config;
        let specs = LayerSpecs::dense();
        let f = forward_flops(&cfg, &specs, 4096);
        // Per layer 2·l·(4n² + 3nm) + 4·n·l² + 3·h·l².
        let (n, m, h, l) = (4096u64, 11008u64, 32u64, 4096u64);
        assert_eq!(f.layer.total, 2 * l * (4 * n * n + 3 * n * m) + 4 * n * l * l + 3 * h * l * l);
        let over = |p: RecomputePolicy| recompute_overhead(&cfg, &specs, 4096, &p).unwrap();
        assert_eq!(over(RecomputePolicy::StoreAll).extra_flops, 0);
        let per = over(RecomputePolicy::PerLayer);
        assert_eq!(per.extra_flops, 32 * f.layer.total);
        assert!(per.ratio < 1.0 / 3.0 && per.ratio > 0.32);
        let sel = over(RecomputePolicy::selective_scores());
        assert_eq!(sel.extra_flops, 32 * (f.layer.scores + f.layer.softmax));
        // Dropping only the pre-softmax scores costs nothing.
        let qk_only = RecomputePolicy::Selective {
            drop: [TapeVar::Qk, TapeVar::Xd].into_iter().collect(),
        };
        assert_eq!(over(qk_only).extra_flops, 0);
    }

    #[test]
    fn size_arithmetic() {
        let cfg = presets::preset("llama2-7b").unwrap().config;
        assert_eq!(model_size_bytes(&cfg, &LayerSpecs::dense(), Precision::Fp16), 2 * 6_738_415_616);
        let mut empty = cfg.clone();
        empty.layers = 0;
        empty.vocab = 1;
        assert!(model_size_bytes(&empty, &LayerSpecs::dense(), Precision::Int8) > 0);
    }
}
