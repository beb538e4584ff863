use std::fmt::Write as _;

use serde::Serialize;

use crate::trainer::Method;
use crate::transformer::{Arch, LayerKind, LayerSpecs, MatrixName, ModelConfig};

/// Per-instance counts of one linear layer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct LinearCounts {
    /// Stored values, frozen parts included. A forward pass touches each
    /// of them once.
    pub stored: u64,
    /// Dense or frozen base part (LoRA/blend base, quantized codes).
    pub base: u64,
    /// Trainable factor part of low-rank, LoRA and blend layers.
    pub factors: u64,
    /// Bias values, if the layout has them.
    pub bias: u64,
}

/// Counts for a `fan_out × fan_in` matrix implemented as `kind`.
pub fn linear_counts(kind: LayerKind, fan_out: u64, fan_in: u64, bias: bool) -> LinearCounts {
    let dense = fan_out * fan_in;
    let low = |r: usize| r as u64 * (fan_in + fan_out);
    let bias = if bias { fan_out } else { 0 };
    let (base, factors) = match kind {
        LayerKind::Dense | LayerKind::Quantized { .. } => (dense, 0),
        LayerKind::Lowrank { rank } => (0, low(rank)),
        LayerKind::Lora { rank } | LayerKind::Blend { rank, .. } => (dense, low(rank)),
    };
    LinearCounts {
        stored: base + factors + bias,
        base,
        factors,
        bias,
    }
}

/// One row of a parameter table: a module summed over its instances.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ParamRow {
    pub module: String,
    /// `fan_in × fan_out` for matrices, the length for norm gains.
    pub shape: String,
    pub instances: u64,
    pub per_instance: u64,
    pub total: u64,
    /// Part of `total` that `method` trains.
    pub trainable: u64,
}

impl ParamRow {
    pub fn millions(&self) -> f64 {
        self.total as f64 / 1e6
    }
}

/// Exact parameter counts of a configuration.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParamTable {
    pub rows: Vec<ParamRow>,
    pub total: u64,
    pub trainable: u64,
}

impl ParamTable {
    pub fn row(&self, module: &str) -> Option<&ParamRow> {
        self.rows.iter().find(|r| r.module == module)
    }

    /// Sum of the rows for the given matrices.
    pub fn matrices_total(&self, names: &[MatrixName]) -> u64 {
        names.iter().filter_map(|m| self.row(m.as_str())).map(|r| r.total).sum()
    }

    /// Aligned text table; storage assumes `bytes_per_param`.
    pub fn render(&self, bytes_per_param: f64) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<11} {:>24} {:>12} {:>13} {:>14}",
            "Module", "Size", "Amount (M)", "Storage (GB)", "Percentage (%)"
        );
        for r in &self.rows {
            let gb = r.total as f64 * bytes_per_param / 1e9;
            let pct = if self.total == 0 { 0.0 } else { 100.0 * r.total as f64 / self.total as f64 };
            let _ = writeln!(
                out,
                "{:<11} {:>24} {:>12.2} {:>13.2} {:>14.2}",
                r.module,
                r.shape,
                r.millions(),
                gb,
                pct
            );
        }
        let _ = writeln!(
            out,
            "{:<11} {:>24} {:>12.2} {:>13.2} {:>14.2}",
            "total",
            "",
            self.total as f64 / 1e6,
            self.total as f64 * bytes_per_param / 1e9,
            100.0
        );
        out
    }
}

pub(super) fn layer_matrices(arch: Arch) -> &'static [MatrixName] {
    match arch {
        Arch::Llama => &MatrixName::PER_LAYER,
        Arch::Gpt2 => &[
            MatrixName::Q,
            MatrixName::K,
            MatrixName::V,
            MatrixName::O,
            MatrixName::Up,
            MatrixName::Down,
        ],
    }
}

fn trainable_part(c: LinearCounts, kind: LayerKind, method: Method) -> u64 {
    match (method, kind) {
        (Method::LoraFinetune, LayerKind::Lora { .. }) => c.factors,
        (Method::LoraFinetune, _) => 0,
        (_, LayerKind::Quantized { .. }) => c.bias,
        (_, LayerKind::Lora { .. } | LayerKind::Blend { .. }) => c.factors + c.bias,
        _ => c.stored,
    }
}

fn matrix_row(
    config: &ModelConfig,
    specs: &LayerSpecs,
    method: Method,
    name: MatrixName,
    instances: u64,
    bias: bool,
) -> ParamRow {
    let kind = specs.kind(name);
    let (fan_out, fan_in) = config.matrix_shape(name);
    let c = linear_counts(kind, fan_out as u64, fan_in as u64, bias);
    let mut shape = format!("{fan_in} × {fan_out}");
    if let Some(r) = kind.rank() {
        let _ = write!(shape, " r={r}");
    }
    ParamRow {
        module: name.as_str().into(),
        shape,
        instances,
        per_instance: c.stored,
        total: c.stored * instances,
        trainable: trainable_part(c, kind, method) * instances,
    }
}

/// Counts every stored parameter of `config` under `specs`, in the order
/// embedding, per-layer modules, final norm, head. Low-rank matrices count
/// `r·(fan_in + fan_out)`; adapters count base plus factors.
pub fn count_params(config: &ModelConfig, specs: &LayerSpecs, method: Method) -> ParamTable {
    let (n, layers) = (config.dim as u64, config.layers as u64);
    let gpt2 = config.arch == Arch::Gpt2;
    let frozen_rest = method == Method::LoraFinetune;
    // GPT-2 norms carry a bias next to the gain.
    let norm_len = if gpt2 { 2 * n } else { n };
    let norm_row = |module: &str, instances: u64| ParamRow {
        module: module.into(),
        shape: if gpt2 { format!("{n} ×2") } else { n.to_string() },
        instances,
        per_instance: norm_len,
        total: norm_len * instances,
        trainable: if frozen_rest { 0 } else { norm_len * instances },
    };

    let mut rows = vec![matrix_row(config, specs, method, MatrixName::Embed, 1, false)];
    if gpt2 {
        let pos = config.max_seq as u64 * n;
        rows.push(ParamRow {
            module: "pos_embed".into(),
            shape: format!("{} × {n}", config.max_seq),
            instances: 1,
            per_instance: pos,
            total: pos,
            trainable: if frozen_rest { 0 } else { pos },
        });
    }
    rows.push(norm_row("attn_norm", layers));
    for &m in layer_matrices(config.arch) {
        if m == MatrixName::Up {
            rows.push(norm_row("ffn_norm", layers));
        }
        rows.push(matrix_row(config, specs, method, m, layers, gpt2));
    }
    rows.push(norm_row("final_norm", 1));
    if !gpt2 {
        // GPT-2 ties the head to the embedding.
        rows.push(matrix_row(config, specs, method, MatrixName::Head, 1, false));
    }
    let total = rows.iter().map(|r| r.total).sum();
    let trainable = rows.iter().map(|r| r.trainable).sum();
    ParamTable { rows, total, trainable }
}
