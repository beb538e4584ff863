use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::adamw::{AdamWConfig, AdamWState};
use super::data::{BatchSampler, Window};
use crate::error::{Error, Result};
use crate::linalg::Scalar;
use crate::transformer::ops::cross_entropy_with_grad;
use crate::transformer::{Gradients, Linear, Model, RecomputePolicy};

/// How the model's linear layers are trained.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Plain dense training.
    #[default]
    Dense,
    /// Low-rank layers trained from random factors.
    Method1,
    /// Low-rank layers initialized from a decomposed dense model.
    Method2,
    /// Blend layers whose dense share decays to zero.
    Method3,
    /// Frozen base with trainable LoRA adapters.
    LoraFinetune,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Dense,
        Method::Method1,
        Method::Method2,
        Method::Method3,
        Method::LoraFinetune,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Dense => "dense",
            Method::Method1 => "method1",
            Method::Method2 => "method2",
            Method::Method3 => "method3",
            Method::LoraFinetune => "lora_finetune",
        }
    }

    /// Checks that the model's layers are what this method trains.
    pub fn check<T: Scalar>(self, model: &Model<T>) -> Result<()> {
        let mismatch = |detail: &str| {
            Err(Error::MethodMismatch {
                method: self.as_str().into(),
                detail: detail.into(),
            })
        };
        let any = |f: fn(&Linear<T>) -> bool| model.has_kind(f);
        match self {
            Method::Dense if !model.linears().iter().all(|(_, l)| matches!(l, Linear::Dense(_))) => {
                mismatch("every linear layer must be dense")
            }
            Method::Method1 | Method::Method2 if !any(|l| matches!(l, Linear::LowRank(_))) => {
                mismatch("no low-rank layers")
            }
            Method::Method1 | Method::Method2 if any(|l| matches!(l, Linear::Lora(_) | Linear::Blend(_))) => {
                mismatch("adapter or blend layers present")
            }
            Method::Method3 if !any(|l| matches!(l, Linear::Blend(_))) => mismatch("no blend layers"),
            Method::LoraFinetune if !any(|l| matches!(l, Linear::Lora(_))) => mismatch("no LoRA adapters"),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown method {s:?}")))
    }
}

fn default_lr() -> f64 {
    AdamWConfig::default().lr
}
fn default_beta1() -> f64 {
    AdamWConfig::default().beta1
}
fn default_beta2() -> f64 {
    AdamWConfig::default().beta2
}
fn default_eps() -> f64 {
    AdamWConfig::default().eps
}
fn default_weight_decay() -> f64 {
    AdamWConfig::default().weight_decay
}

/// Training run settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    pub steps: u64,
    pub batch: usize,
    pub seq: usize,
    #[serde(default)]
    pub method: Method,
    #[serde(default)]
    pub recompute: RecomputePolicy,
    #[serde(default)]
    pub seed: u64,
}

impl TrainConfig {
    /// Default optimizer settings with the given loop sizes.
    pub fn new(steps: u64, batch: usize, seq: usize) -> Self {
        let o = AdamWConfig::default();
        Self {
            lr: o.lr,
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
            weight_decay: o.weight_decay,
            steps,
            batch,
            seq,
            method: Method::Dense,
            recompute: RecomputePolicy::StoreAll,
            seed: 0,
        }
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.adamw().validate()?;
        if self.batch == 0 || self.seq == 0 {
            return Err(Error::InvalidArgument("batch and seq must be at least 1".into()));
        }
        Ok(())
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    /// Dense share of blend layers; 1 when the model has none.
    pub alpha: f64,
    pub peak_tape_bytes: usize,
}

pub const METRICS_HEADER: &str = "step,loss,lr,alpha,peak_tape_bytes";

impl StepMetrics {
    /// Comma-separated line with shortest round-trip float formatting.
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.step, self.loss, self.lr, self.alpha, self.peak_tape_bytes
        )
    }
}

/// Renders a full metrics log including the header.
pub fn metrics_csv(log: &[StepMetrics]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for m in log {
        out.push_str(&m.csv_line());
        out.push('\n');
    }
    out
}

/// Mean loss and gradient over a batch, plus the largest tape footprint.
///
/// Each window contributes the gradient of its own mean loss; the sum is
/// divided by the batch size.
pub fn batch_gradients<T: Scalar>(
    model: &Model<T>,
    batch: &[Window],
    policy: &RecomputePolicy,
) -> Result<(f64, Gradients<T>, usize)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let mut total = Gradients::new();
    let (mut loss, mut peak) = (0.0, 0usize);
    for w in batch {
        let (logits, state) = model.forward(&w.input, policy)?;
        let (l, dlogits) = cross_entropy_with_grad(&logits, &w.target)?;
        let (grads, stats) = model.backward_with_stats(&state, &dlogits)?;
        loss += l;
        peak = peak.max(state.peak_bytes()).max(stats.peak_bytes);
        for (name, g) in grads {
            match total.get_mut(&name) {
                Some(acc) => acc.add_assign(&g)?,
                None => {
                    total.insert(name, g);
                }
            }
        }
    }
    let b = batch.len() as f64;
    let grads = total.into_iter().map(|(k, g)| (k, g.scale(1.0 / b))).collect();
    Ok((loss / b, grads, peak))
}

/// Mean loss over a batch without gradients.
pub fn batch_loss<T: Scalar>(model: &Model<T>, batch: &[Window]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let mut loss = 0.0;
    for w in batch {
        let logits = model.logits(&w.input)?;
        loss += crate::transformer::ops::cross_entropy_loss(&logits, &w.target)?;
    }
    Ok(loss / batch.len() as f64)
}

/// Forward, backward and one optimizer step over the trainable tensors.
/// The step index is the optimizer's count of completed steps.
pub fn train_step<T: Scalar>(
    model: &mut Model<T>,
    batch: &[Window],
    config: &TrainConfig,
    state: &mut AdamWState,
) -> Result<StepMetrics> {
    config.method.check(model)?;
    if config.method == Method::LoraFinetune {
        model.freeze_all_but_adapters();
    }
    let step = state.step();
    model.set_step(step);
    let (loss, grads, peak) = batch_gradients(model, batch, &config.recompute)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("loss at step {step}")));
    }
    state.step_model(model, &grads)?;
    Ok(StepMetrics {
        step,
        loss,
        lr: config.lr,
        alpha: model.blend_alpha().unwrap_or(1.0),
        peak_tape_bytes: peak,
    })
}

/// Owns the optimizer state and batch stream of a run.
#[derive(Clone, Debug)]
pub struct Trainer {
    config: TrainConfig,
    optimizer: AdamWState,
    sampler: BatchSampler,
}

impl Trainer {
    /// Batches are drawn from `tokens` with the config's seed.
    pub fn new(config: TrainConfig, tokens: &[usize]) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            optimizer: AdamWState::new(config.adamw())?,
            sampler: BatchSampler::new(tokens.to_vec(), config.batch, config.seq, config.seed)?,
            config,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn optimizer(&self) -> &AdamWState {
        &self.optimizer
    }

    pub fn step<T: Scalar>(&mut self, model: &mut Model<T>) -> Result<StepMetrics> {
        let batch = self.sampler.next_batch();
        train_step(model, &batch, &self.config, &mut self.optimizer)
    }

    /// Runs up to `config.steps` steps. `on_step` sees every metrics line
    /// and may return `false` to stop early.
    pub fn run<T: Scalar>(
        &mut self,
        model: &mut Model<T>,
        mut on_step: impl FnMut(&StepMetrics) -> bool,
    ) -> Result<Vec<StepMetrics>> {
        let mut log = Vec::new();
        while self.optimizer.step() < self.config.steps {
            let m = self.step(model)?;
            let go_on = on_step(&m);
            log.push(m);
            if !go_on {
                break;
            }
        }
        Ok(log)
    }
}
