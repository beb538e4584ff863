//! Named model shapes. Presets carry shapes only, never weights.

use crate::error::{Error, Result};
use crate::transformer::{Arch, ModelConfig};

/// A named shape with the headline parameter count it is known by.
#[derive(Clone, Debug, PartialEq)]
pub struct Preset {
    pub name: &'static str,
    pub config: ModelConfig,
    /// Rounded count used when pricing ("7B"), if the model has one.
    pub nominal_params: Option<u64>,
}

pub const NAMES: [&str; 6] = ["llama2-7b", "llama2-13b", "llama2-70b", "gpt2-127m", "gpt2-1.5b", "toy"];

fn gpt2(vocab: usize, dim: usize, heads: usize, layers: usize) -> ModelConfig {
    ModelConfig {
        arch: Arch::Gpt2,
        ..ModelConfig::new(vocab, dim, heads, layers, 4 * dim, 1024)
    }
}

pub fn preset(name: &str) -> Result<Preset> {
    let (config, nominal) = match name {
        "llama2-7b" => (ModelConfig::new(32_000, 4096, 32, 32, 11_008, 4096), Some(7_000_000_000)),
        "llama2-13b" => (ModelConfig::new(32_000, 5120, 40, 40, 13_824, 4096), Some(13_000_000_000)),
        // Priced with full multi-head attention; the released model
        // shares key/value heads.
        "llama2-70b" => (ModelConfig::new(32_000, 8192, 64, 80, 28_672, 4096), Some(70_000_000_000)),
        "gpt2-127m" => (gpt2(50_257, 768, 12, 12), None),
        "gpt2-1.5b" => (gpt2(50_257, 1600, 25, 48), None),
        // Byte vocabulary plus two specials.
        "toy" => (ModelConfig::new(258, 128, 4, 4, 256, 128), None),
        _ => {
            return Err(Error::InvalidArgument(format!(
                "unknown preset {name:?}; expected one of {}",
                NAMES.join(", ")
            )))
        }
    };
    let name = NAMES.iter().find(|n| **n == name).expect("listed");
    Ok(Preset {
        name,
        config,
        nominal_params: nominal,
    })
}
