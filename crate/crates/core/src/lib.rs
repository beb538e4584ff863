//! Low-rank language-model laboratory.
//!
//! Dense linear algebra, a from-scratch decoder-only transformer with
//! pluggable linear layers (dense, low-rank, LoRA, quantized, blended),
//! manual reverse-mode differentiation with activation recomputation,
//! AdamW training loops, closed-form memory/FLOP accounting, and
//! simulators for pipeline parallelism, optimizer-state sharding and
//! federated low-rank training.

pub mod costmodel;
pub mod distsim;
pub mod error;
pub mod linalg;
pub mod lowrank;
pub mod presets;
pub mod quant;
pub mod trainer;
pub mod transformer;

pub use error::{Error, Result};
pub use linalg::{Scalar, SingularSpectrum, TensorGrid};
pub use lowrank::{AlphaSchedule, BlendLayer, LoraAdapter, LoraBase, LowRankFactors};
pub use quant::QuantizedMatrix;
pub use transformer::{
    DecoderState, KvCache, LayerKind, LayerSpecs, MatrixName, Model, ModelConfig,
    RecomputePolicy, TapeVar,
};
