use std::collections::{BTreeMap, BTreeSet};

use crate::error::Result;
use crate::linalg::{matmul, matmul_at_b, Scalar, TensorGrid};
use crate::lowrank::{BlendLayer, LoraAdapter, LoraBase, LowRankFactors};
use crate::quant::QuantizedMatrix;

use super::LayerKind;

/// One weight matrix of the model in any of its implementations.
#[derive(Clone, Debug, PartialEq)]
pub enum Linear<T = f32> {
    Dense(TensorGrid<T>),
    LowRank(LowRankFactors<T>),
    Lora(LoraAdapter<T>),
    Quantized(QuantizedMatrix),
    Blend(BlendLayer<T>),
}

/// Named view of a float tensor owned by the model.
pub struct ParamRef<'a, T> {
    pub name: String,
    pub tensor: &'a TensorGrid<T>,
    /// False for tensors that are frozen by construction (LoRA and blend
    /// bases); the model's freeze set is applied on top.
    pub trainable: bool,
}

/// Collects parameter gradients, skipping names that are not wanted.
pub(crate) struct GradSink<'a, T> {
    pub grads: &'a mut BTreeMap<String, TensorGrid<T>>,
    pub wanted: &'a BTreeSet<String>,
}

impl<T: Scalar> GradSink<'_, T> {
    pub fn wants(&self, name: &str) -> bool {
        self.wanted.contains(name)
    }

    pub fn add(&mut self, name: String, g: TensorGrid<T>) -> Result<()> {
        match self.grads.get_mut(&name) {
            Some(acc) => acc.add_assign(&g),
            None => {
                self.grads.insert(name, g);
                Ok(())
            }
        }
    }
}

/// `dy · xᵀ`, via an explicit transpose so the inner loop streams rows.
fn outer<T: Scalar>(dy: &TensorGrid<T>, x: &TensorGrid<T>) -> Result<TensorGrid<T>> {
    matmul(dy, &x.transpose())
}

fn lowrank_backward<T: Scalar>(
    prefix: &str,
    f: &LowRankFactors<T>,
    x: &TensorGrid<T>,
    dy: &TensorGrid<T>,
    need_dx: bool,
    sink: &mut GradSink<'_, T>,
) -> Result<Option<TensorGrid<T>>> {
    let up_name = format!("{prefix}.up");
    let down_name = format!("{prefix}.down");
    if sink.wants(&up_name) {
        let z = matmul(f.down(), x)?;
        sink.add(up_name, outer(dy, &z)?)?;
    }
    let want_down = sink.wants(&down_name);
    if !(want_down || need_dx) {
        return Ok(None);
    }
    let dz = matmul_at_b(f.up(), dy)?;
    if want_down {
        sink.add(down_name, outer(&dz, x)?)?;
    }
    Ok(if need_dx { Some(matmul_at_b(f.down(), &dz)?) } else { None })
}

impl<T: Scalar> Linear<T> {
    /// `(fan_out, fan_in)`.
    pub fn shape(&self) -> (usize, usize) {
        match self {
            Linear::Dense(w) => w.shape(),
            Linear::LowRank(f) => (f.fan_out(), f.fan_in()),
            Linear::Lora(a) => a.base().shape(),
            Linear::Quantized(q) => q.shape(),
            Linear::Blend(b) => b.base().shape(),
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Linear::Dense(_) => "dense",
            Linear::LowRank(_) => "lowrank",
            Linear::Lora(_) => "lora",
            Linear::Quantized(_) => "quantized",
            Linear::Blend(_) => "blend",
        }
    }

    /// Layer kind as it would appear in a spec.
    pub fn kind(&self) -> LayerKind {
        match self {
            Linear::Dense(_) => LayerKind::Dense,
            Linear::LowRank(f) => LayerKind::Lowrank { rank: f.rank() },
            Linear::Lora(a) => LayerKind::Lora { rank: a.delta().rank() },
            Linear::Quantized(q) => LayerKind::Quantized { bits: q.bits() },
            Linear::Blend(b) => LayerKind::Blend {
                rank: b.delta().rank(),
                schedule: b.schedule(),
            },
        }
    }

    /// Stored weights, counting every element once (base and delta for
    /// adapters, codes for quantized matrices).
    pub fn param_count(&self) -> usize {
        match self {
            Linear::Dense(w) => w.len(),
            Linear::LowRank(f) => f.param_count(),
            Linear::Lora(a) => {
                let (o, i) = a.base().shape();
                o * i + a.delta().param_count()
            }
            Linear::Quantized(q) => q.rows() * q.cols(),
            Linear::Blend(b) => b.base().len() + b.delta().param_count(),
        }
    }

    /// `W · x` for a `fan_in × l` grid.
    pub fn forward(&self, x: &TensorGrid<T>) -> Result<TensorGrid<T>> {
        match self {
            Linear::Dense(w) => matmul(w, x),
            Linear::LowRank(f) => f.forward(x),
            Linear::Lora(a) => a.forward(x),
            Linear::Quantized(q) => q.qmatmul(x),
            Linear::Blend(b) => b.forward(x),
        }
    }

    /// Pushes parameter gradients for the input `x` and output gradient
    /// `dy` into `sink`, returning `d x` when `need_dx` is set.
    pub(crate) fn backward(
        &self,
        prefix: &str,
        x: &TensorGrid<T>,
        dy: &TensorGrid<T>,
        need_dx: bool,
        sink: &mut GradSink<'_, T>,
    ) -> Result<Option<TensorGrid<T>>> {
        match self {
            Linear::Dense(w) => {
                let name = format!("{prefix}.weight");
                if sink.wants(&name) {
                    sink.add(name, outer(dy, x)?)?;
                }
                Ok(if need_dx { Some(matmul_at_b(w, dy)?) } else { None })
            }
            Linear::LowRank(f) => lowrank_backward(prefix, f, x, dy, need_dx, sink),
            Linear::Lora(a) => {
                let base_dx = if need_dx {
                    Some(match a.base() {
                        LoraBase::Dense(w) => matmul_at_b(w, dy)?,
                        LoraBase::Quantized(q) => matmul_at_b(&q.dequantize_rows(), dy)?,
                    })
                } else {
                    None
                };
                if a.is_merged() {
                    return Ok(base_dx);
                }
                let delta_dx = lowrank_backward(prefix, a.delta(), x, dy, need_dx, sink)?;
                match (base_dx, delta_dx) {
                    (Some(mut b), Some(d)) => {
                        b.add_assign(&d)?;
                        Ok(Some(b))
                    }
                    _ => Ok(None),
                }
            }
            Linear::Quantized(q) => Ok(if need_dx {
                Some(matmul_at_b(&q.dequantize_rows(), dy)?)
            } else {
                None
            }),
            Linear::Blend(b) => {
                let alpha = b.alpha();
                let low_dy = dy.scale(1.0 - alpha);
                let low_dx = lowrank_backward(prefix, b.delta(), x, &low_dy, need_dx, sink)?;
                if !need_dx {
                    return Ok(None);
                }
                let mut dx = low_dx.expect("requested");
                if alpha > 0.0 {
                    dx.add_assign(&matmul_at_b(b.base(), dy)?.scale(alpha))?;
                }
                Ok(Some(dx))
            }
        }
    }

    pub(crate) fn params<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a, T>>) {
        let mut push = |suffix: &str, tensor: &'a TensorGrid<T>, trainable: bool| {
            out.push(ParamRef {
                name: format!("{prefix}.{suffix}"),
                tensor,
                trainable,
            })
        };
        match self {
            Linear::Dense(w) => push("weight", w, true),
            Linear::LowRank(f) => {
                push("down", f.down(), true);
                push("up", f.up(), true);
            }
            Linear::Lora(a) => {
                if let LoraBase::Dense(w) = a.base() {
                    push("base", w, false);
                }
                let live = !a.is_merged();
                push("down", a.delta().down(), live);
                push("up", a.delta().up(), live);
            }
            Linear::Quantized(_) => {}
            Linear::Blend(b) => {
                push("base", b.base(), false);
                push("down", b.delta().down(), true);
                push("up", b.delta().up(), true);
            }
        }
    }

    /// Mutable access to the tensor called `suffix` (`weight`, `down`,
    /// `up`); bases are deliberately not reachable.
    pub(crate) fn param_mut(&mut self, suffix: &str) -> Option<&mut TensorGrid<T>> {
        let factors = match self {
            Linear::Dense(w) => return (suffix == "weight").then_some(w),
            Linear::LowRank(f) => f,
            Linear::Lora(a) => a.delta_mut(),
            Linear::Blend(b) => b.delta_mut(),
            Linear::Quantized(_) => return None,
        };
        match suffix {
            "down" => Some(factors.down_mut()),
            "up" => Some(factors.up_mut()),
            _ => None,
        }
    }
}
