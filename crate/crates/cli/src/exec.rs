//! Commands that build, train or run models.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use lrlm_core::lowrank::decompose_model;
use lrlm_core::presets::preset;
use lrlm_core::trainer::data::repetitive_corpus;
use lrlm_core::trainer::{
    byte_tokenize, detokenize, grad_check, metrics_csv, unigram_entropy, BatchSampler, Method, TrainConfig, Trainer,
};
use lrlm_core::transformer::greedy_decode;
use lrlm_core::{AlphaSchedule, LayerKind, LayerSpecs, MatrixName, Model, ModelConfig};
use serde_json::{json, Value};

use crate::args::{
    DecomposeArgs, FinetuneArgs, GradcheckArgs, InferArgs, MergeArgs, PretrainArgs, QuantizeArgs, SaveArgs, TrainArgs,
};
use crate::checkpoint;
use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};
use crate::{Output, RunDir};

/// Length of the built-in training text.
const DEFAULT_CORPUS_BYTES: usize = 64 * 1024;

/// Steps averaged when comparing the loss against the corpus entropy.
const LOSS_WINDOW: usize = 10;

/// Mean loss over the last `LOSS_WINDOW` steps (fewer if the log is short).
fn trailing_loss(log: &[lrlm_core::trainer::StepMetrics]) -> Option<f64> {
    let tail = &log[log.len().saturating_sub(LOSS_WINDOW)..];
    (!tail.is_empty()).then(|| tail.iter().map(|m| m.loss).sum::<f64>() / tail.len() as f64)
}

fn load_config(path: Option<&Path>) -> Result<Option<ExperimentConfig>> {
    path.map(ExperimentConfig::load).transpose()
}

fn corpus_tokens(path: Option<&Path>) -> Result<Vec<usize>> {
    let bytes = match path {
        Some(p) => fs::read(p).map_err(|e| CliError::io(p, e))?,
        None => repetitive_corpus(DEFAULT_CORPUS_BYTES),
    };
    Ok(byte_tokenize(&bytes))
}

/// Flags override the config's `train` section, which overrides defaults.
fn train_config(a: &TrainArgs, cfg: Option<&ExperimentConfig>, method: Method, seed: u64) -> TrainConfig {
    let mut t = cfg
        .and_then(|c| c.train.clone())
        .unwrap_or_else(|| TrainConfig::new(200, 4, 32));
    if let Some(v) = a.steps {
        t.steps = v;
    }
    if let Some(v) = a.batch {
        t.batch = v;
    }
    if let Some(v) = a.seq {
        t.seq = v;
    }
    if let Some(v) = a.lr {
        t.lr = v;
    }
    if let Some(p) = a.policy {
        t.recompute = p.policy();
    }
    t.method = method;
    t.seed = seed;
    t
}

fn targets_or(targets: &[MatrixName], default: &[MatrixName]) -> Vec<MatrixName> {
    if targets.is_empty() {
        default.to_vec()
    } else {
        targets.to_vec()
    }
}

fn save(model: &Model, s: &SaveArgs, run: &RunDir) -> Result<Value> {
    let path = run.output(s.out.as_deref(), "model.lrlm");
    let header = checkpoint::save(model, &path, s.dtype)?;
    Ok(json!({
        "path": run.display(&path),
        "tensor_bytes": header.tensor_bytes(),
        "tensors": header.tensors.len(),
    }))
}

/// Trains `model` and returns the metrics log and the corpus entropy.
fn train(
    model: &mut Model,
    t: &TrainConfig,
    tokens: &[usize],
    stop_below_entropy: bool,
) -> Result<(Vec<lrlm_core::trainer::StepMetrics>, f64)> {
    let entropy = unigram_entropy(tokens);
    let mut trainer = Trainer::new(t.clone(), tokens)?;
    let mut recent = std::collections::VecDeque::with_capacity(LOSS_WINDOW);
    let log = trainer.run(model, |m| {
        if recent.len() == LOSS_WINDOW {
            recent.pop_front();
        }
        recent.push_back(m.loss);
        let mean = recent.iter().sum::<f64>() / recent.len() as f64;
        !(stop_below_entropy && recent.len() == LOSS_WINDOW && mean < entropy)
    })?;
    Ok((log, entropy))
}

fn training_summary(text: &mut String, log: &[lrlm_core::trainer::StepMetrics], entropy: f64) -> Value {
    let last = log.last().map(|m| m.loss);
    let best = log.iter().map(|m| m.loss).fold(f64::INFINITY, f64::min);
    match last {
        Some(l) => {
            let _ = writeln!(text, "{} steps, final loss {l:.4} (corpus unigram entropy {entropy:.4})", log.len());
        }
        None => {
            let _ = writeln!(text, "no steps run");
        }
    }
    json!({
        "steps": log.len(),
        "final_loss": last,
        "best_loss": log.last().map(|_| best),
        "unigram_entropy": entropy,
        "trailing_loss": trailing_loss(log),
        "below_entropy": trailing_loss(log).is_some_and(|l| l < entropy),
    })
}

pub fn pretrain(a: &PretrainArgs, seed: u64, run: &RunDir) -> Result<Output> {
    let cfg = load_config(a.config.as_deref())?;
    let config: ModelConfig = match (&cfg, &a.preset) {
        (Some(c), _) => c
            .model_config()?
            .ok_or_else(|| CliError::Config("the config names no model".into()))?,
        (None, Some(name)) => preset(name)?.config,
        (None, None) => preset("toy")?.config,
    };
    let method = a
        .method
        .or_else(|| cfg.as_ref().and_then(|c| c.train.as_ref()).map(|t| t.method))
        .unwrap_or(Method::Dense);
    let t = train_config(&a.train, cfg.as_ref(), method, seed);
    let targets = targets_or(&a.targets, &MatrixName::PER_LAYER);
    let cfg_layers = cfg.as_ref().and_then(|c| c.layers.clone());
    let rank = || a.rank.ok_or_else(|| CliError::Config(format!("{method} needs --rank")));

    let mut model: Model = match method {
        Method::Dense => Model::new(config, cfg_layers.unwrap_or_default(), seed)?,
        Method::Method1 => {
            let specs = match (a.rank, cfg_layers) {
                (None, Some(l)) => l,
                _ => LayerSpecs::dense().with(&targets, LayerKind::Lowrank { rank: rank()? }),
            };
            Model::new(config, specs, seed)?
        }
        Method::Method3 => {
            let init = a.init.clone().or_else(|| cfg.as_ref().and_then(|c| c.init.clone()));
            let mut m = match init {
                Some(p) => checkpoint::load(&p)?.0,
                None => Model::new(config, LayerSpecs::dense(), seed)?,
            };
            let schedule = AlphaSchedule {
                start_alpha: a.alpha_start,
                end_step: a.alpha_end_step.unwrap_or(t.steps / 2),
            };
            m.attach_blend(rank()?, schedule, &targets, seed)?;
            m
        }
        other => {
            return Err(CliError::Config(format!(
                "pretrain runs dense, method1 or method3, not {other}; see `decompose` and `finetune`"
            )))
        }
    };
    let corpus = a.train.corpus.clone().or_else(|| cfg.as_ref().and_then(|c| c.corpus.clone()));
    let tokens = corpus_tokens(corpus.as_deref())?;
    let (log, entropy) = train(&mut model, &t, &tokens, a.train.stop_below_entropy)?;

    let mut text = String::new();
    let mut result = training_summary(&mut text, &log, entropy);
    if method == Method::Method3 {
        model.set_step(log.len() as u64);
        let alpha = model.blend_alpha();
        let finalized = alpha == Some(0.0);
        if finalized {
            model.finalize_blend()?;
            let _ = writeln!(text, "blend weight reached 0; saved as low-rank");
        }
        result["final_alpha"] = json!(alpha);
        result["finalized"] = json!(finalized);
    }
    result["method"] = json!(method);
    result["param_count"] = json!(model.param_count());
    result["trainable_count"] = json!(model.trainable_count());
    result["checkpoint"] = save(&model, &a.save, run)?;
    Ok(Output {
        text,
        result,
        artifacts: vec![("metrics.csv".into(), metrics_csv(&log).into_bytes())],
    })
}

/// `LRLM_THREADS` if set and positive, else the core count.
fn default_workers() -> usize {
    std::env::var("LRLM_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n: &usize| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

pub fn decompose(a: &DecomposeArgs, run: &RunDir) -> Result<Output> {
    let (model, before) = checkpoint::load(&a.checkpoint)?;
    let targets = targets_or(&a.targets, &MatrixName::PER_LAYER);
    let workers = a.workers.unwrap_or_else(default_workers);
    let low = decompose_model(&model, a.rank, &targets, workers)?;
    let saved = save(&low, &a.save, run)?;
    let after = saved["tensor_bytes"].as_u64().expect("byte count");
    let ratio = after as f64 / before.tensor_bytes() as f64;
    let text = format!(
        "rank {}: {} → {} parameters, tensor bytes {} → {} ({:.4}×)\n",
        a.rank,
        model.param_count(),
        low.param_count(),
        before.tensor_bytes(),
        after,
        ratio
    );
    // Worker count does not change the result, so it stays out of the report.
    Ok(Output {
        text,
        result: json!({
            "rank": a.rank,
            "targets": targets,
            "params_before": model.param_count(),
            "params_after": low.param_count(),
            "tensor_bytes_before": before.tensor_bytes(),
            "tensor_bytes_after": after,
            "ratio": ratio,
            "checkpoint": saved,
        }),
        artifacts: Vec::new(),
    })
}

/// Values of every tensor that training must leave alone.
fn frozen_snapshot(model: &Model) -> BTreeMap<String, Vec<u32>> {
    let live = model.trainable_names();
    model
        .params()
        .into_iter()
        .filter(|p| !live.contains(&p.name))
        .map(|p| (p.name, p.tensor.data().iter().map(|v| v.to_bits()).collect()))
        .collect()
}

pub fn finetune(a: &FinetuneArgs, seed: u64, run: &RunDir) -> Result<Output> {
    let cfg = load_config(a.config.as_deref())?;
    let (mut model, _) = checkpoint::load(&a.checkpoint)?;
    let targets = targets_or(&a.targets, &[MatrixName::Q, MatrixName::V]);
    model.attach_lora(a.rank, &targets, seed)?;
    model.freeze_all_but_adapters();
    let before = frozen_snapshot(&model);
    let t = train_config(&a.train, cfg.as_ref(), Method::LoraFinetune, seed);
    let corpus = a.train.corpus.clone().or_else(|| cfg.as_ref().and_then(|c| c.corpus.clone()));
    let tokens = corpus_tokens(corpus.as_deref())?;
    let (log, entropy) = train(&mut model, &t, &tokens, a.train.stop_below_entropy)?;
    let after = frozen_snapshot(&model);
    if let Some(name) = before.keys().find(|k| before.get(*k) != after.get(*k)) {
        return Err(CliError::NumericCheck {
            what: "finetune".into(),
            detail: format!("frozen tensor {name} changed during training"),
        });
    }
    let mut text = String::new();
    let mut result = training_summary(&mut text, &log, entropy);
    let _ = writeln!(
        text,
        "{} trainable adapter values; {} frozen tensors unchanged",
        model.trainable_count(),
        before.len()
    );
    result["rank"] = json!(a.rank);
    result["targets"] = json!(targets);
    result["trainable_count"] = json!(model.trainable_count());
    result["frozen_tensors_unchanged"] = json!(before.len());
    result["checkpoint"] = save(&model, &a.save, run)?;
    Ok(Output {
        text,
        result,
        artifacts: vec![("metrics.csv".into(), metrics_csv(&log).into_bytes())],
    })
}

pub fn quantize(a: &QuantizeArgs, run: &RunDir) -> Result<Output> {
    let (mut model, before) = checkpoint::load(&a.checkpoint)?;
    let targets = targets_or(&a.targets, &MatrixName::PER_LAYER);
    model.quantize(a.bits, &targets)?;
    let saved = save(&model, &a.save, run)?;
    let after = saved["tensor_bytes"].as_u64().expect("byte count");
    let text = format!(
        "{}-bit: tensor bytes {} → {}\n",
        a.bits,
        before.tensor_bytes(),
        after
    );
    Ok(Output {
        text,
        result: json!({
            "bits": a.bits,
            "targets": targets,
            "tensor_bytes_before": before.tensor_bytes(),
            "tensor_bytes_after": after,
            "checkpoint": saved,
        }),
        artifacts: Vec::new(),
    })
}

pub fn merge(a: &MergeArgs, run: &RunDir) -> Result<Output> {
    let (mut model, _) = checkpoint::load(&a.checkpoint)?;
    let merged = model.merge_lora(a.dequantize)?;
    let saved = save(&model, &a.save, run)?;
    Ok(Output {
        text: format!("merged {merged} adapters\n"),
        result: json!({ "merged": merged, "checkpoint": saved }),
        artifacts: Vec::new(),
    })
}

pub fn infer(a: &InferArgs) -> Result<Output> {
    let (model, _) = checkpoint::load(&a.checkpoint)?;
    let prompt = byte_tokenize(a.prompt.as_bytes());
    let rep = greedy_decode(&model, &prompt, a.gen, !a.no_cache)?;
    let logits = model.logits(&prompt)?;
    let last = logits.cols() - 1;
    let last_logits: Vec<f32> = (0..logits.rows()).map(|i| logits.get(i, last)).collect();
    let generated = String::from_utf8_lossy(&detokenize(&rep.tokens)).into_owned();
    Ok(Output {
        text: format!("{}{generated}\n", a.prompt),
        result: json!({
            "prompt_tokens": prompt,
            "tokens": rep.tokens,
            "text": generated,
            "token_passes": rep.token_passes,
            "kv_cache": !a.no_cache,
            "prompt_last_logits": last_logits,
        }),
        artifacts: Vec::new(),
    })
}

/// Small random model of the requested kind for gradient checks.
fn gradcheck_model(kind: &str, rank: usize, seed: u64) -> Result<Model> {
    let config = ModelConfig::new(lrlm_core::trainer::data::VOCAB, 16, 2, 2, 24, 16);
    let all = &MatrixName::PER_LAYER;
    let model = match kind {
        "dense" => Model::new(config, LayerSpecs::dense(), seed)?,
        "lowrank" => Model::new(config, LayerSpecs::dense().with(all, LayerKind::Lowrank { rank }), seed)?,
        "lora" => {
            let mut m = Model::new(config, LayerSpecs::dense(), seed)?;
            m.attach_lora(rank, all, seed)?;
            m.freeze_all_but_adapters();
            // Fresh adapters have a zero up factor, which hides errors in
            // the down-factor gradient.
            let ups: Vec<String> = m.params().into_iter().filter(|p| p.name.ends_with(".up")).map(|p| p.name).collect();
            for name in ups {
                let t = m.param_mut(&name).expect("adapter factor");
                for (k, v) in t.data_mut().iter_mut().enumerate() {
                    *v = 0.01 * ((k % 7) as f32 - 3.0);
                }
            }
            m
        }
        "blend" => {
            let mut m = Model::new(config, LayerSpecs::dense(), seed)?;
            m.attach_blend(rank, AlphaSchedule { start_alpha: 0.6, end_step: 10 }, all, seed)?;
            m.set_step(2);
            m
        }
        other => {
            return Err(CliError::Config(format!(
                "unknown gradcheck kind {other:?}; expected dense, lowrank, lora or blend"
            )))
        }
    };
    Ok(model)
}

pub fn gradcheck(a: &GradcheckArgs, seed: u64) -> Result<Output> {
    let model = match &a.checkpoint {
        Some(p) => checkpoint::load(p)?.0,
        None => gradcheck_model(&a.kind, a.rank, seed)?,
    };
    let seq = model.config().max_seq.min(8);
    let tokens = byte_tokenize(&repetitive_corpus(512));
    let batch = BatchSampler::new(tokens, 2, seq, seed)?.next_batch();
    let per_tensor = (a.per_tensor > 0).then_some(a.per_tensor);
    let rep = grad_check(&model, &batch, a.tol, per_tensor)?;
    if !rep.passed {
        return Err(CliError::NumericCheck {
            what: "gradcheck".into(),
            detail: format!(
                "max relative error {:.3e} at {} exceeds {:.1e}",
                rep.max_rel_error, rep.worst, rep.tol
            ),
        });
    }
    Ok(Output {
        text: format!(
            "{} entries checked, max relative error {:.3e} at {} (tol {:.1e})\n",
            rep.checked, rep.max_rel_error, rep.worst, rep.tol
        ),
        result: serde_json::to_value(&rep).expect("report serializes"),
        artifacts: Vec::new(),
    })
}
