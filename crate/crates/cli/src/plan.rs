//! Closed-form planners. None of them allocates model tensors.

use std::fmt::Write as _;

use lrlm_core::costmodel::{
    count_params, forward_flops, inference_workload, recompute_overhead, HardwareProfile, MemoryQuery, GB,
};
use lrlm_core::distsim::{
    federated_comm_report, offload_peak, pipeline_schedule, shard_plan, wire_bytes, FederatedConfig, Footprint,
};
use lrlm_core::presets::preset;
use lrlm_core::trainer::Method;
use lrlm_core::{LayerKind, LayerSpecs, MatrixName, ModelConfig};
use serde_json::json;

use crate::args::{
    KindArg, ModelArgs, PlanCommand, PlanFederatedArgs, PlanFlopsArgs, PlanMemArgs, PlanParamsArgs,
    PlanPipelineArgs, PlanShardArgs, PolicyArg,
};
use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};
use crate::Output;

pub fn run(what: &PlanCommand) -> Result<Output> {
    match what {
        PlanCommand::Params(a) => params(a),
        PlanCommand::Mem(a) => mem(a),
        PlanCommand::Flops(a) => flops(a),
        PlanCommand::Pipeline(a) => pipeline(a),
        PlanCommand::Shard(a) => shard(a),
        PlanCommand::Federated(a) => federated(a),
    }
}

/// A model shape resolved from command-line flags.
pub(crate) struct Resolved {
    pub config: ModelConfig,
    pub specs: LayerSpecs,
    pub method: Method,
    /// Headline count to price, when it stands in for the exact one.
    pub nominal: Option<u64>,
}

impl Resolved {
    /// Priced and trainable parameter counts.
    fn counts(&self) -> (u64, u64) {
        let t = count_params(&self.config, &self.specs, self.method);
        match self.nominal {
            Some(n) => (n, n),
            None => (t.total, t.trainable),
        }
    }
}

fn kinds(specs: &LayerSpecs) -> impl Iterator<Item = LayerKind> + '_ {
    std::iter::once(specs.default).chain(specs.overrides.values().copied())
}

fn infer_method(specs: &LayerSpecs) -> Method {
    let any = |f: fn(&LayerKind) -> bool| kinds(specs).any(|k| f(&k));
    if any(|k| matches!(k, LayerKind::Lora { .. })) {
        Method::LoraFinetune
    } else if any(|k| matches!(k, LayerKind::Blend { .. })) {
        Method::Method3
    } else if any(|k| matches!(k, LayerKind::Lowrank { .. })) {
        Method::Method1
    } else {
        Method::Dense
    }
}

fn required<T>(v: Option<T>, flag: &str, kind: &str) -> Result<T> {
    v.ok_or_else(|| CliError::Config(format!("--layer-kind {kind} needs {flag}")))
}

pub(crate) fn resolve(a: &ModelArgs) -> Result<Resolved> {
    let (config, mut specs, preset_name) = match (&a.preset, &a.config) {
        (Some(name), _) => (preset(name)?.config, LayerSpecs::dense(), Some(name.clone())),
        (None, Some(path)) => {
            let cfg = ExperimentConfig::load(path)?;
            let model = cfg
                .model_config()?
                .ok_or_else(|| CliError::Config(format!("{} names no model", path.display())))?;
            (model, cfg.layers.unwrap_or_default(), cfg.preset)
        }
        (None, None) => return Err(CliError::Config("give --preset or --config".into())),
    };
    let kind = match a.layer_kind {
        KindArg::Dense => None,
        KindArg::Lowrank => Some(LayerKind::Lowrank {
            rank: required(a.rank, "--rank", "lowrank")?,
        }),
        KindArg::Lora => Some(LayerKind::Lora {
            rank: required(a.rank, "--rank", "lora")?,
        }),
        KindArg::Quantized => Some(LayerKind::Quantized {
            bits: required(a.bits, "--bits", "quantized")?,
        }),
    };
    if let Some(kind) = kind {
        let targets: &[MatrixName] = if a.targets.is_empty() { &MatrixName::PER_LAYER } else { &a.targets };
        specs = specs.with(targets, kind);
    }
    specs.validate(&config)?;
    let method = a.method.unwrap_or_else(|| infer_method(&specs));
    let nominal = match preset_name {
        Some(name) if !a.exact && specs == LayerSpecs::dense() && method == Method::Dense => preset(&name)?.nominal_params,
        _ => None,
    };
    Ok(Resolved {
        config,
        specs,
        method,
        nominal,
    })
}

fn params(a: &PlanParamsArgs) -> Result<Output> {
    let r = resolve(&a.model)?;
    let table = count_params(&r.config, &r.specs, r.method);
    let mut text = table.render(a.bytes_per_param);
    let _ = writeln!(text, "trainable {} ({:.2} M)", table.trainable, table.trainable as f64 / 1e6);
    Ok(Output {
        text,
        result: json!({ "table": table, "bytes_per_param": a.bytes_per_param }),
        artifacts: Vec::new(),
    })
}

fn mem_query(r: &Resolved, batch: u64, seq: Option<u64>, policy: PolicyArg) -> MemoryQuery {
    MemoryQuery {
        specs: r.specs.clone(),
        batch,
        seq: seq.unwrap_or(r.config.max_seq as u64),
        policy: policy.policy(),
        method: r.method,
        nominal_params: r.nominal,
        ..MemoryQuery::new(r.config.clone())
    }
}

fn mem(a: &PlanMemArgs) -> Result<Output> {
    let r = resolve(&a.model)?;
    let q = MemoryQuery {
        precision: a.precision,
        ..mem_query(&r, a.batch, a.seq, a.policy)
    };
    let rep = q.report()?;
    Ok(Output {
        text: rep.render(),
        result: serde_json::to_value(&rep).expect("report serializes"),
        artifacts: Vec::new(),
    })
}

fn flops(a: &PlanFlopsArgs) -> Result<Output> {
    let r = resolve(&a.model)?;
    if let Some(gen) = a.gen {
        let count = match a.params {
            Some(p) if !(p >= 0.0 && p.is_finite()) => {
                return Err(CliError::Config("--params must be a non-negative number".into()))
            }
            Some(p) => p.round() as u64,
            None => r.counts().0,
        };
        let mut w = inference_workload(a.l_in, gen, count, a.kv_cache)?;
        if let Some(name) = &a.profile {
            w = w.with_profile(&HardwareProfile::by_name(name)?);
        }
        return Ok(Output {
            text: w.render(),
            result: serde_json::to_value(&w).expect("workload serializes"),
            artifacts: Vec::new(),
        });
    }
    let seq = a.seq.unwrap_or(r.config.max_seq as u64);
    let f = forward_flops(&r.config, &r.specs, seq);
    let mut text = String::new();
    let _ = writeln!(text, "seq {seq}: forward {:.4e} FLOP, training step {:.4e} FLOP", f.forward as f64, f.training as f64);
    let _ = writeln!(
        text,
        "per layer: linear {:.4e}, scores {:.4e}, softmax {:.4e}, weighted sum {:.4e}",
        f.layer.linear as f64, f.layer.scores as f64, f.layer.softmax as f64, f.layer.weighted_sum as f64
    );
    let mut overheads = serde_json::Map::new();
    for p in [PolicyArg::StoreAll, PolicyArg::PerLayer, PolicyArg::Selective] {
        let o = recompute_overhead(&r.config, &r.specs, seq, &p.policy())?;
        let name = serde_json::to_value(p).expect("policy serializes");
        let name = name.as_str().expect("string tag");
        let _ = writeln!(text, "recompute {name:<10} +{:.4e} FLOP ({:.2}% of a step)", o.extra_flops as f64, 100.0 * o.ratio);
        overheads.insert(name.into(), serde_json::to_value(o).expect("overhead serializes"));
    }
    Ok(Output {
        text,
        result: json!({ "flops": f, "recompute": overheads }),
        artifacts: Vec::new(),
    })
}

fn pipeline(a: &PlanPipelineArgs) -> Result<Output> {
    let section = match &a.config {
        Some(p) => ExperimentConfig::load(p)?.pipeline,
        None => None,
    };
    let stages = a.stages.or(section.as_ref().map(|s| s.stages));
    let micro = a.micro_batches.or(section.as_ref().map(|s| s.micro_batches));
    let (Some(stages), Some(micro)) = (stages, micro) else {
        return Err(CliError::Config("need --stages and --micro-batches (or a pipeline section)".into()));
    };
    // Explicit cost flags win only when they differ from their defaults.
    let (fwd, bwd) = match &section {
        Some(s) if a.forward_cost == 1.0 && a.backward_cost == lrlm_core::distsim::BACKWARD_FACTOR => {
            (s.forward_cost, s.backward_cost)
        }
        _ => (a.forward_cost, a.backward_cost),
    };
    let plan = pipeline_schedule(stages, micro, fwd, bwd)?;
    Ok(Output {
        text: plan.gantt(),
        result: serde_json::to_value(&plan).expect("plan serializes"),
        artifacts: Vec::new(),
    })
}

fn shard(a: &PlanShardArgs) -> Result<Output> {
    let r = resolve(&a.model)?;
    let gpus = match (a.gpus, &a.model.config) {
        (Some(g), _) => g,
        (None, Some(p)) => ExperimentConfig::load(p)?
            .shard
            .map(|s| s.gpus)
            .ok_or_else(|| CliError::Config("need --gpus (or a shard section)".into()))?,
        (None, None) => return Err(CliError::Config("need --gpus".into())),
    };
    let (total, trainable) = r.counts();
    let plan = shard_plan(wire_bytes(total), wire_bytes(trainable), gpus)?;
    let mut text = String::new();
    let _ = writeln!(
        text,
        "{} GPUs: {:.3} GB per GPU (unsharded {:.3} GB)",
        plan.gpus, plan.max_per_gpu_gb, plan.unsharded_gb
    );
    for step in &plan.protocol {
        let _ = writeln!(text, "  {step}");
    }
    let mut result = json!({ "shard": plan });
    if a.offload {
        let rep = mem_query(&r, a.batch, a.seq, a.policy).report()?;
        let o = offload_peak(&Footprint {
            params: rep.params_bytes,
            grads: rep.grads_bytes,
            optimizer: rep.optimizer_bytes,
            intermediates: rep.intermediates_bytes,
        });
        let _ = writeln!(
            text,
            "offload: peak {:.3} GB in {} (all resident {:.3} GB)",
            o.peak as f64 / GB,
            o.peak_phase,
            o.naive_peak as f64 / GB
        );
        result["offload"] = serde_json::to_value(&o).expect("offload serializes");
    }
    Ok(Output {
        text,
        result,
        artifacts: Vec::new(),
    })
}

fn federated(a: &PlanFederatedArgs) -> Result<Output> {
    let section = match &a.model.config {
        Some(p) => ExperimentConfig::load(p)?.federated,
        None => None,
    };
    let nodes = a
        .nodes
        .or(section.as_ref().map(|s| s.nodes))
        .ok_or_else(|| CliError::Config("need --nodes (or a federated section)".into()))?;
    let iterations = a.iterations.or(section.as_ref().map(|s| s.iterations)).unwrap_or(1);
    let payload_bytes = match (a.model_gb, a.payload_params) {
        (Some(gb), _) if gb >= 0.0 && gb.is_finite() => (gb * GB).round() as u64,
        (Some(_), _) => return Err(CliError::Config("--model-gb must be a non-negative number".into())),
        (None, Some(n)) if n >= 0.0 && n.is_finite() => wire_bytes(n.round() as u64),
        (None, Some(_)) => return Err(CliError::Config("--payload-params must be a non-negative number".into())),
        (None, None) if a.model.preset.is_some() || a.model.config.is_some() => wire_bytes(resolve(&a.model)?.counts().1),
        (None, None) => {
            return Err(CliError::Config(
                "give --model-gb, --payload-params, or a model whose trainable set is sent".into(),
            ))
        }
    };
    let net_mbps = a.net_mbps.unwrap_or_else(|| HardwareProfile::a100().net_mbps);
    let rep = federated_comm_report(&FederatedConfig {
        nodes,
        payload_bytes,
        iterations,
        net_mbps,
    })?;
    let mut text = String::new();
    let _ = writeln!(text, "{} workers, payload {:.4} GB", rep.workers, rep.payload_bytes as f64 / GB);
    let _ = writeln!(
        text,
        "per iteration: center {:.4} GB, worker {:.4} GB, center link {:.3} s",
        rep.center_bytes_per_iter as f64 / GB,
        rep.worker_bytes_per_iter as f64 / GB,
        rep.center_seconds_per_iter
    );
    let _ = writeln!(
        text,
        "{} iterations: center {:.4} PB, worker {:.4} PB, center link {:.3e} s",
        rep.iterations,
        rep.center_bytes_total as f64 / 1e15,
        rep.worker_bytes_total as f64 / 1e15,
        rep.center_seconds_total
    );
    Ok(Output {
        text,
        result: serde_json::to_value(&rep).expect("report serializes"),
        artifacts: Vec::new(),
    })
}
