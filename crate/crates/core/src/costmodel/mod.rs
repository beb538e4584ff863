//! Closed-form accounting of parameters, training memory, FLOPs, model
//! size and inference workload for a [`ModelConfig`].
//!
//! Everything here is pure integer or float arithmetic on shapes; no
//! tensors are allocated. Sizes in GB are decimal (1 GB = 10⁹ bytes).
//!
//! [`ModelConfig`]: crate::transformer::ModelConfig

mod flops;
mod memory;
mod params;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use flops::{
    flops_per_token, forward_flops, inference_workload, model_size_bytes, recompute_overhead, throughput_estimate,
    FlopBreakdown, LayerFlops, RecomputeOverhead, WorkloadReport,
};
pub use memory::{memory_report, MemoryQuery, MemoryReport, VarMemory, ACTIVATION_BYTES, GRAD_BYTES, OPTIMIZER_BYTES};
pub use params::{count_params, linear_counts, LinearCounts, ParamRow, ParamTable};

pub const GB: f64 = 1e9;

/// Numeric storage format.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    Fp32,
    #[default]
    Fp16,
    Int8,
    Int4,
}

impl Precision {
    pub const ALL: [Precision; 4] = [Precision::Fp32, Precision::Fp16, Precision::Int8, Precision::Int4];

    pub fn bits(self) -> u32 {
        match self {
            Precision::Fp32 => 32,
            Precision::Fp16 => 16,
            Precision::Int8 => 8,
            Precision::Int4 => 4,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Precision::Fp32 => "fp32",
            Precision::Fp16 => "fp16",
            Precision::Int8 => "int8",
            Precision::Int4 => "int4",
        }
    }

    /// Bytes for `count` values, without quantization metadata.
    pub fn bytes_for(self, count: u64) -> u64 {
        (count * self.bits() as u64).div_ceil(8)
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Precision::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown precision {s:?}")))
    }
}

/// Peak compute rates and link speeds of a device.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HardwareProfile {
    pub name: String,
    /// Peak TFLOPS per precision.
    pub tflops: BTreeMap<Precision, f64>,
    pub gpu_mem_gb: f64,
    pub host_link_gbps: f64,
    pub disk_gbps: f64,
    pub net_mbps: f64,
}

impl HardwareProfile {
    /// Datacenter GPU with tensor-core peak rates.
    pub fn a100() -> Self {
        Self {
            name: "a100".into(),
            tflops: BTreeMap::from([
                (Precision::Fp32, 19.5),
                (Precision::Fp16, 312.0),
                (Precision::Int8, 624.0),
                (Precision::Int4, 1248.0),
            ]),
            gpu_mem_gb: 80.0,
            host_link_gbps: 32.0,
            disk_gbps: 7.0,
            net_mbps: 1250.0,
        }
    }

    /// Phone-class accelerator at a flat 2 TFLOPS.
    pub fn phone() -> Self {
        Self {
            name: "phone".into(),
            tflops: Precision::ALL.into_iter().map(|p| (p, 2.0)).collect(),
            gpu_mem_gb: 12.0,
            host_link_gbps: 50.0,
            disk_gbps: 4.0,
            net_mbps: 12.5,
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "a100" => Ok(Self::a100()),
            "phone" => Ok(Self::phone()),
            _ => Err(Error::InvalidArgument(format!("unknown hardware profile {name:?}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let rates = self
            .tflops
            .values()
            .chain([&self.gpu_mem_gb, &self.host_link_gbps, &self.disk_gbps, &self.net_mbps]);
        for r in rates {
            if !(*r > 0.0 && r.is_finite()) {
                return Err(Error::InvalidArgument(format!("profile {}: rates must be positive", self.name)));
            }
        }
        Ok(())
    }

    pub fn rate(&self, precision: Precision) -> Result<f64> {
        self.tflops.get(&precision).copied().ok_or_else(|| {
            Error::InvalidArgument(format!("profile {} has no {precision} rate", self.name))
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precision_bytes() {
        assert_eq!(Precision::Fp16.bytes_for(7), 14);
        assert_eq!(Precision::Int4.bytes_for(3), 2);
        assert_eq!(Precision::Fp32.bytes_for(0), 0);
        assert_eq!("int8".parse::<Precision>().unwrap(), Precision::Int8);
        assert!("fp8".parse::<Precision>().is_err());
    }

    #[test]
    fn profiles_are_valid() {
        for p in [HardwareProfile::a100(), HardwareProfile::phone()] {
            p.validate().unwrap();
        }
        let mut bad = HardwareProfile::phone();
        bad.net_mbps = 0.0;
        assert!(bad.validate().is_err());
        let mut partial = HardwareProfile::a100();
        partial.tflops.remove(&Precision::Int4);
        assert!(partial.rate(Precision::Int4).is_err());
    }
}
