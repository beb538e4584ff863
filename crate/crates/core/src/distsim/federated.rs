use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Scalar;
use crate::trainer::{batch_gradients, AdamWState, Method, Window};
use crate::transformer::{Gradients, Model, RecomputePolicy};

/// Values cross the wire as 16-bit numbers.
pub const WIRE_BYTES_PER_VALUE: u64 = 2;

/// Bytes to send `values` numbers.
pub fn wire_bytes(values: u64) -> u64 {
    values * WIRE_BYTES_PER_VALUE
}

/// What each round exchanges.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FedMode {
    /// Every trainable tensor.
    Full,
    /// Only the LoRA factors; bases stay put.
    Lora,
}

/// Traffic inputs. `nodes` counts the center.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FederatedConfig {
    pub nodes: u64,
    pub payload_bytes: u64,
    pub iterations: u64,
    pub net_mbps: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FederatedReport {
    pub nodes: u64,
    pub workers: u64,
    pub payload_bytes: u64,
    pub iterations: u64,
    /// Broadcast to and gather from every worker.
    pub center_bytes_per_iter: u64,
    /// One download and one upload.
    pub worker_bytes_per_iter: u64,
    pub center_bytes_total: u128,
    pub worker_bytes_total: u128,
    pub center_seconds_per_iter: f64,
    pub center_seconds_total: f64,
}

pub fn federated_comm_report(cfg: &FederatedConfig) -> Result<FederatedReport> {
    if cfg.nodes < 2 {
        return Err(Error::InvalidArgument("federation needs a center and at least one worker".into()));
    }
    if !(cfg.net_mbps > 0.0) {
        return Err(Error::InvalidArgument("net_mbps must be positive".into()));
    }
    let workers = cfg.nodes - 1;
    let center = 2 * workers * cfg.payload_bytes;
    let worker = 2 * cfg.payload_bytes;
    let per_iter_s = center as f64 / (cfg.net_mbps * 1e6);
    Ok(FederatedReport {
        nodes: cfg.nodes,
        workers,
        payload_bytes: cfg.payload_bytes,
        iterations: cfg.iterations,
        center_bytes_per_iter: center,
        worker_bytes_per_iter: worker,
        center_bytes_total: center as u128 * cfg.iterations as u128,
        worker_bytes_total: worker as u128 * cfg.iterations as u128,
        center_seconds_per_iter: per_iter_s,
        center_seconds_total: per_iter_s * cfg.iterations as f64,
    })
}

/// What one executed round did.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RoundLog {
    pub mode: FedMode,
    pub workers: usize,
    /// Tensors broadcast and gathered, in name order.
    pub transmitted: Vec<String>,
    pub payload_bytes: u64,
    pub center_bytes: u64,
    pub worker_bytes: u64,
    /// Mean of the workers' batch losses before the update.
    pub loss: f64,
}

fn same_state<T: Scalar>(a: &Model<T>, b: &Model<T>) -> bool {
    if a.config() != b.config() || a.specs() != b.specs() || a.frozen() != b.frozen() {
        return false;
    }
    let (pa, pb) = (a.params(), b.params());
    pa.len() == pb.len() && pa.iter().zip(&pb).all(|(x, y)| x.name == y.name && x.tensor == y.tensor)
}

fn copy_tensors<T: Scalar>(from: &Model<T>, to: &mut Model<T>, names: &[String]) {
    for p in from.params() {
        if names.binary_search(&p.name).is_ok() {
            *to.param_mut(&p.name).expect("same layout") = p.tensor.clone();
        }
    }
}

/// One synchronous round: broadcast the transmitted tensors, compute a
/// gradient on every worker (in parallel), gather, average uniformly in
/// worker order and take a single optimizer step on the center. Replicas
/// end equal to the center.
pub fn federated_round<T: Scalar>(
    center: &mut Model<T>,
    replicas: &mut [Model<T>],
    batches: &[Vec<Window>],
    optimizer: &mut AdamWState,
    mode: FedMode,
    policy: &RecomputePolicy,
) -> Result<RoundLog> {
    if replicas.is_empty() || replicas.len() != batches.len() {
        return Err(Error::InvalidArgument(format!(
            "{} replicas for {} batches",
            replicas.len(),
            batches.len()
        )));
    }
    if let Some(k) = replicas.iter().position(|r| !same_state(center, r)) {
        return Err(Error::ReplicaDivergence(k));
    }
    let transmitted: Vec<String> = center.trainable_names().into_iter().collect();
    if mode == FedMode::Lora {
        Method::LoraFinetune.check(center)?;
        let adapters: BTreeSet<String> = center
            .linears()
            .into_iter()
            .filter(|(_, l)| l.kind_name() == "lora")
            .flat_map(|(id, _)| [format!("{id}.down"), format!("{id}.up")])
            .collect();
        if let Some(n) = transmitted.iter().find(|n| !adapters.contains(*n)) {
            return Err(Error::MethodMismatch {
                method: "lora".into(),
                detail: format!("{n} is trainable but not an adapter factor"),
            });
        }
    }
    let values: u64 = center
        .params()
        .iter()
        .filter(|p| transmitted.binary_search(&p.name).is_ok())
        .map(|p| p.tensor.len() as u64)
        .sum();
    let payload = wire_bytes(values);

    // Broadcast.
    let step = optimizer.step();
    center.set_step(step);
    for r in replicas.iter_mut() {
        copy_tensors(center, r, &transmitted);
        r.set_step(step);
    }

    // Local gradients; results are placed by worker index.
    let results: Vec<Result<(f64, Gradients<T>, usize)>> = std::thread::scope(|s| {
        let handles: Vec<_> = replicas
            .iter()
            .zip(batches)
            .map(|(r, b)| s.spawn(move || batch_gradients(r, b, policy)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("worker thread panicked"))
            .collect()
    });

    // Gather and average in worker order.
    let k = replicas.len();
    let mut sum = Gradients::new();
    let mut loss = 0.0;
    for res in results {
        let (l, grads, _) = res?;
        loss += l;
        for (name, g) in grads {
            match sum.get_mut(&name) {
                Some(acc) => acc.add_assign(&g)?,
                None => {
                    sum.insert(name, g);
                }
            }
        }
    }
    let avg: Gradients<T> = sum.into_iter().map(|(n, g)| (n, g.scale(1.0 / k as f64))).collect();
    optimizer.step_model(center, &avg)?;
    for r in replicas.iter_mut() {
        copy_tensors(center, r, &transmitted);
    }
    Ok(RoundLog {
        mode,
        workers: k,
        transmitted,
        payload_bytes: payload,
        center_bytes: 2 * k as u64 * payload,
        worker_bytes: 2 * payload,
        loss: loss / k as f64,
    })
}
