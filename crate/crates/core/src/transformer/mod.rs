//! Decoder-only transformer with pluggable linear layers.
//!
//! Activations are stored feature-major: a sequence of `l` positions is a
//! `dim × l` grid, so every linear layer is a plain `W · X`. Each decoder
//! layer is pre-norm: `x + attn(norm(x))` followed by `h + ffn(norm(h))`,
//! and the stack ends with a final RMSNorm before the output head.

mod kv;
mod linear;
mod model;
pub mod ops;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lowrank::AlphaSchedule;

pub use kv::{greedy_decode, DecodeReport, KvCache};
pub use linear::Linear;
pub use model::{BackwardStats, DecoderState, Gradients, Model, ParamRef, RecomputePolicy, TapeVar};

/// Family of layer layout. Only [`Arch::Llama`] is executable; the other
/// exists for closed-form accounting.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    /// RMSNorm, RoPE, gated three-matrix FFN, no biases, untied head.
    #[default]
    Llama,
    /// LayerNorm with bias, learned positions, two-matrix MLP with biases,
    /// head tied to the embedding.
    Gpt2,
}

/// Shape of a decoder-only transformer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab: usize,
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn_dim: usize,
    pub max_seq: usize,
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
    #[serde(default)]
    pub arch: Arch,
}

fn default_rope_base() -> f64 {
    10_000.0
}

impl ModelConfig {
    /// Llama-layout config with the default RoPE base.
    pub fn new(vocab: usize, dim: usize, heads: usize, layers: usize, ffn_dim: usize, max_seq: usize) -> Self {
        Self {
            vocab,
            dim,
            heads,
            layers,
            ffn_dim,
            max_seq,
            rope_base: default_rope_base(),
            arch: Arch::Llama,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// Checks counts and divisibility. `layers` may be 0 (embedding and
    /// head only).
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("vocab", self.vocab),
            ("dim", self.dim),
            ("heads", self.heads),
            ("ffn_dim", self.ffn_dim),
            ("max_seq", self.max_seq),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidArgument(format!("{name} must be at least 1")));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "dim {} is not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        if !(self.rope_base.is_finite() && self.rope_base > 0.0) {
            return Err(Error::InvalidArgument("rope_base must be positive".into()));
        }
        Ok(())
    }

    /// `(fan_out, fan_in)` of a named matrix.
    pub fn matrix_shape(&self, name: MatrixName) -> (usize, usize) {
        let (n, m, t) = (self.dim, self.ffn_dim, self.vocab);
        match name {
            MatrixName::Q | MatrixName::K | MatrixName::V | MatrixName::O => (n, n),
            MatrixName::Up | MatrixName::Gate => (m, n),
            MatrixName::Down => (n, m),
            MatrixName::Embed => (n, t),
            MatrixName::Head => (t, n),
        }
    }
}

/// The named weight matrices of the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum MatrixName {
    #[serde(rename = "wq")]
    Q,
    #[serde(rename = "wk")]
    K,
    #[serde(rename = "wv")]
    V,
    #[serde(rename = "wo")]
    O,
    #[serde(rename = "wu")]
    Up,
    #[serde(rename = "wg")]
    Gate,
    #[serde(rename = "wd")]
    Down,
    #[serde(rename = "we")]
    Embed,
    #[serde(rename = "wh")]
    Head,
}

impl MatrixName {
    pub const ALL: [MatrixName; 9] = [
        MatrixName::Q,
        MatrixName::K,
        MatrixName::V,
        MatrixName::O,
        MatrixName::Up,
        MatrixName::Gate,
        MatrixName::Down,
        MatrixName::Embed,
        MatrixName::Head,
    ];

    /// Matrices repeated in every decoder layer, in storage order.
    pub const PER_LAYER: [MatrixName; 7] = [
        MatrixName::Q,
        MatrixName::K,
        MatrixName::V,
        MatrixName::O,
        MatrixName::Up,
        MatrixName::Gate,
        MatrixName::Down,
    ];

    pub const ATTENTION: [MatrixName; 4] = [MatrixName::Q, MatrixName::K, MatrixName::V, MatrixName::O];

    pub const FFN: [MatrixName; 3] = [MatrixName::Up, MatrixName::Gate, MatrixName::Down];

    pub fn as_str(self) -> &'static str {
        match self {
            MatrixName::Q => "wq",
            MatrixName::K => "wk",
            MatrixName::V => "wv",
            MatrixName::O => "wo",
            MatrixName::Up => "wu",
            MatrixName::Gate => "wg",
            MatrixName::Down => "wd",
            MatrixName::Embed => "we",
            MatrixName::Head => "wh",
        }
    }

    pub fn is_per_layer(self) -> bool {
        !matches!(self, MatrixName::Embed | MatrixName::Head)
    }

    pub(crate) fn layer_index(self) -> usize {
        Self::PER_LAYER
            .iter()
            .position(|&m| m == self)
            .expect("per-layer matrix")
    }
}

impl fmt::Display for MatrixName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for MatrixName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MatrixName::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown matrix name {s:?}")))
    }
}

/// Where a linear layer sits: a per-layer matrix or the embedding/head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LinearId {
    pub layer: Option<usize>,
    pub matrix: MatrixName,
}

impl fmt::Display for LinearId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.layer, self.matrix) {
            (Some(i), m) => write!(f, "layers.{i}.{m}"),
            (None, MatrixName::Embed) => f.write_str("embed"),
            (None, _) => f.write_str("head"),
        }
    }
}

/// Implementation chosen for a linear layer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerKind {
    Dense,
    Lowrank { rank: usize },
    Lora { rank: usize },
    Quantized { bits: u8 },
    Blend { rank: usize, schedule: AlphaSchedule },
}

impl LayerKind {
    pub fn rank(&self) -> Option<usize> {
        match *self {
            LayerKind::Lowrank { rank } | LayerKind::Lora { rank } | LayerKind::Blend { rank, .. } => Some(rank),
            _ => None,
        }
    }
}

/// Layer kind per named matrix; the same choice applies in every layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpecs {
    pub default: LayerKind,
    #[serde(default)]
    pub overrides: BTreeMap<MatrixName, LayerKind>,
}

impl Default for LayerSpecs {
    fn default() -> Self {
        Self::dense()
    }
}

impl LayerSpecs {
    pub fn dense() -> Self {
        Self::uniform(LayerKind::Dense)
    }

    pub fn uniform(kind: LayerKind) -> Self {
        Self {
            default: kind,
            overrides: BTreeMap::new(),
        }
    }

    /// Builder: `kind` for each of `names`.
    pub fn with(mut self, names: &[MatrixName], kind: LayerKind) -> Self {
        for &n in names {
            self.set(n, kind);
        }
        self
    }

    pub fn set(&mut self, name: MatrixName, kind: LayerKind) {
        if kind == self.default {
            self.overrides.remove(&name);
        } else {
            self.overrides.insert(name, kind);
        }
    }

    pub fn kind(&self, name: MatrixName) -> LayerKind {
        self.overrides.get(&name).copied().unwrap_or(self.default)
    }

    /// Rejects ranks outside `1..min(fan_in, fan_out)`, unknown widths and
    /// bad schedules.
    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        for name in MatrixName::ALL {
            let kind = self.kind(name);
            let (fan_out, fan_in) = config.matrix_shape(name);
            if let Some(r) = kind.rank() {
                if r == 0 || r >= fan_in.min(fan_out) {
                    return Err(Error::InvalidArgument(format!(
                        "{name}: rank {r} must satisfy 1 <= r < min({fan_in}, {fan_out})"
                    )));
                }
            }
            match kind {
                LayerKind::Quantized { bits } if bits != 4 && bits != 8 => {
                    return Err(Error::InvalidArgument(format!("{name}: {bits}-bit quantization")));
                }
                LayerKind::Blend { schedule, .. } => schedule.validate()?,
                _ => {}
            }
        }
        Ok(())
    }
}
