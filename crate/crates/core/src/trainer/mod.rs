//! Training: AdamW, the pretraining methods and LoRA finetuning as
//! training loops, recomputation, gradient checking and byte corpora.
//!
//! Arithmetic runs in the model's scalar type with 64-bit optimizer
//! masters. Every loop is deterministic for a fixed seed.

mod adamw;
pub mod data;
mod gradcheck;
mod recompute;
mod train;

pub use adamw::{AdamWConfig, AdamWState, Moments};
pub use data::{byte_tokenize, detokenize, unigram_entropy, BatchSampler, Window};
pub use gradcheck::{check_gradients, grad_check, relative_error, GradCheckReport, FD_STEP, REL_FLOOR};
pub use recompute::{recompute_backward, RecomputeReport};
pub use train::{
    batch_gradients, batch_loss, metrics_csv, train_step, Method, StepMetrics, TrainConfig, Trainer, METRICS_HEADER,
};
