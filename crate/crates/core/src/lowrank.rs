//! Low-rank linear layers, LoRA adapters and the α-blended transition
//! layer, plus SVD-based decomposition of dense layers and whole models.
//!
//! Factors are always applied down-then-up: `y = up · (down · x)` with
//! `down` of shape `r × fan_in` and `up` of shape `fan_out × r`.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{matmul, seeded_random, truncated_svd, Dist, Scalar, TensorGrid};
use crate::quant::QuantizedMatrix;
use crate::transformer::{LayerKind, Linear, LinearId, MatrixName, Model};

/// Standard deviation used for dense and LoRA `down` initialization.
pub const INIT_STD: f64 = 0.02;

/// `(down, up)` pair with `y = up · (down · x)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LowRankFactors<T = f32> {
    down: TensorGrid<T>,
    up: TensorGrid<T>,
}

impl<T: Scalar> LowRankFactors<T> {
    /// Pairs `down` (`r × fan_in`) with `up` (`fan_out × r`). The rank may
    /// reach `min(fan_in, fan_out)` so a full-rank decomposition is
    /// representable; layer specs impose the stricter `r < min` bound.
    pub fn new(down: TensorGrid<T>, up: TensorGrid<T>) -> Result<Self> {
        let r = down.rows();
        if r == 0 || up.cols() != r {
            return Err(Error::shape(
                "LowRankFactors::new",
                format!("down {}x{} with up {}x{}", down.rows(), down.cols(), up.rows(), up.cols()),
            ));
        }
        if r > down.cols().min(up.rows()) {
            return Err(Error::InvalidArgument(format!(
                "rank {r} exceeds min(fan_in {}, fan_out {})",
                down.cols(),
                up.rows()
            )));
        }
        Ok(Self { down, up })
    }

    /// Random factors whose product has entries of standard deviation
    /// [`INIT_STD`]: each factor is drawn with std `√(INIT_STD / √r)`.
    pub fn random(fan_out: usize, fan_in: usize, rank: usize, seed: u64) -> Result<Self> {
        let std = (INIT_STD / (rank as f64).sqrt()).sqrt();
        let down = seeded_random(rank, fan_in, seed, Dist::Gaussian { std });
        let up = seeded_random(fan_out, rank, seed.wrapping_add(1), Dist::Gaussian { std });
        Self::new(down, up)
    }

    pub fn rank(&self) -> usize {
        self.down.rows()
    }

    pub fn fan_in(&self) -> usize {
        self.down.cols()
    }

    pub fn fan_out(&self) -> usize {
        self.up.rows()
    }

    /// `r · (fan_in + fan_out)`.
    pub fn param_count(&self) -> usize {
        self.rank() * (self.fan_in() + self.fan_out())
    }

    pub fn down(&self) -> &TensorGrid<T> {
        &self.down
    }

    pub fn up(&self) -> &TensorGrid<T> {
        &self.up
    }

    pub fn down_mut(&mut self) -> &mut TensorGrid<T> {
        &mut self.down
    }

    pub fn up_mut(&mut self) -> &mut TensorGrid<T> {
        &mut self.up
    }

    /// `up · (down · x)` for one vector.
    pub fn lr_forward(&self, x: &[T]) -> Result<Vec<T>> {
        if x.len() != self.fan_in() {
            return Err(Error::shape(
                "lr_forward",
                format!("fan_in {} vs input of {}", self.fan_in(), x.len()),
            ));
        }
        Ok(self.forward(&TensorGrid::column_vector(x))?.into_data())
    }

    /// `up · (down · x)` for a `fan_in × l` grid.
    pub fn forward(&self, x: &TensorGrid<T>) -> Result<TensorGrid<T>> {
        matmul(&self.up, &matmul(&self.down, x)?)
    }

    /// The dense `fan_out × fan_in` product. Only used for merging and
    /// checks; the forward path never builds it.
    pub fn product(&self) -> TensorGrid<T> {
        matmul(&self.up, &self.down).expect("factor shapes are validated at construction")
    }
}

/// Best rank-`r` factors of `w`: `down = V_rᵀ`, `up = U_r Σ_r`.
pub fn decompose_linear<T: Scalar>(w: &TensorGrid<T>, r: usize) -> Result<LowRankFactors<T>> {
    let f = truncated_svd(w, r)?;
    LowRankFactors::new(f.v_t, f.u_sigma)
}

/// Frozen weight underneath a LoRA adapter.
#[derive(Clone, Debug, PartialEq)]
pub enum LoraBase<T = f32> {
    Dense(TensorGrid<T>),
    Quantized(QuantizedMatrix),
}

impl<T: Scalar> LoraBase<T> {
    pub fn shape(&self) -> (usize, usize) {
        match self {
            LoraBase::Dense(w) => w.shape(),
            LoraBase::Quantized(q) => q.shape(),
        }
    }

    pub fn forward(&self, x: &TensorGrid<T>) -> Result<TensorGrid<T>> {
        match self {
            LoraBase::Dense(w) => matmul(w, x),
            LoraBase::Quantized(q) => q.qmatmul(x),
        }
    }

    /// Full-precision view of the base (dequantized if needed).
    pub fn to_dense(&self) -> TensorGrid<T> {
        match self {
            LoraBase::Dense(w) => w.clone(),
            LoraBase::Quantized(q) => q.dequantize_rows(),
        }
    }
}

/// Frozen base plus a trainable low-rank delta: `y = W x + up · (down · x)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter<T = f32> {
    base: LoraBase<T>,
    delta: LowRankFactors<T>,
    merged: bool,
}

impl<T: Scalar> LoraAdapter<T> {
    /// Wraps `base` with a fresh adapter: `down` gaussian, `up` zero, so
    /// the layer starts out computing exactly the base output.
    pub fn new(base: LoraBase<T>, rank: usize, seed: u64) -> Result<Self> {
        let (fan_out, fan_in) = base.shape();
        let down = seeded_random(rank, fan_in, seed, Dist::Gaussian { std: INIT_STD });
        let up = TensorGrid::zeros(fan_out, rank);
        Self::from_parts(base, LowRankFactors::new(down, up)?, false)
    }

    pub fn from_parts(base: LoraBase<T>, delta: LowRankFactors<T>, merged: bool) -> Result<Self> {
        if base.shape() != (delta.fan_out(), delta.fan_in()) {
            return Err(Error::shape(
                "LoraAdapter",
                format!(
                    "base {:?} vs delta {}x{}",
                    base.shape(),
                    delta.fan_out(),
                    delta.fan_in()
                ),
            ));
        }
        Ok(Self { base, delta, merged })
    }

    pub fn base(&self) -> &LoraBase<T> {
        &self.base
    }

    pub fn delta(&self) -> &LowRankFactors<T> {
        &self.delta
    }

    pub fn delta_mut(&mut self) -> &mut LowRankFactors<T> {
        &mut self.delta
    }

    pub fn is_merged(&self) -> bool {
        self.merged
    }

    /// `W x + up · (down · x)`; after a merge the base already holds the
    /// sum and is applied alone.
    pub fn forward(&self, x: &TensorGrid<T>) -> Result<TensorGrid<T>> {
        let y = self.base.forward(x)?;
        if self.merged {
            return Ok(y);
        }
        y.add(&self.delta.forward(x)?)
    }

    pub fn lora_forward(&self, x: &[T]) -> Result<Vec<T>> {
        Ok(self.forward(&TensorGrid::column_vector(x))?.into_data())
    }

    /// Replaces a quantized base by its dequantized values.
    pub fn dequantize_base(&mut self) {
        if let LoraBase::Quantized(q) = &self.base {
            self.base = LoraBase::Dense(q.dequantize_rows());
        }
    }

    /// Folds the delta into the base (`W + up · down`), marks the adapter
    /// merged and returns the merged weight.
    pub fn lora_merge(&mut self) -> Result<TensorGrid<T>> {
        if self.merged {
            return Err(Error::AlreadyMerged);
        }
        let LoraBase::Dense(w) = &self.base else {
            return Err(Error::QuantizedBase);
        };
        let merged = w.add(&self.delta.product())?;
        self.base = LoraBase::Dense(merged.clone());
        self.merged = true;
        Ok(merged)
    }
}

/// Linear decay of the blend weight from `start_alpha` at step 0 to 0 at
/// `end_step`, constant afterwards.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaSchedule {
    pub start_alpha: f64,
    pub end_step: u64,
}

impl AlphaSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.start_alpha) {
            return Err(Error::InvalidArgument(format!(
                "start_alpha {} outside [0, 1]",
                self.start_alpha
            )));
        }
        Ok(())
    }

    pub fn alpha_at(&self, step: u64) -> f64 {
        if step >= self.end_step {
            return 0.0;
        }
        let frac = 1.0 - step as f64 / self.end_step as f64;
        (self.start_alpha * frac).clamp(0.0, 1.0)
    }
}

/// `y = α W x + (1 − α) up · (down · x)` with `W` frozen.
#[derive(Clone, Debug, PartialEq)]
pub struct BlendLayer<T = f32> {
    base: TensorGrid<T>,
    delta: LowRankFactors<T>,
    schedule: AlphaSchedule,
    alpha: f64,
}

impl<T: Scalar> BlendLayer<T> {
    pub fn new(base: TensorGrid<T>, delta: LowRankFactors<T>, schedule: AlphaSchedule) -> Result<Self> {
        schedule.validate()?;
        if base.shape() != (delta.fan_out(), delta.fan_in()) {
            return Err(Error::shape(
                "BlendLayer",
                format!("base {:?} vs delta {}x{}", base.shape(), delta.fan_out(), delta.fan_in()),
            ));
        }
        Ok(Self {
            base,
            delta,
            alpha: schedule.alpha_at(0),
            schedule,
        })
    }

    pub fn base(&self) -> &TensorGrid<T> {
        &self.base
    }

    pub fn delta(&self) -> &LowRankFactors<T> {
        &self.delta
    }

    pub fn delta_mut(&mut self) -> &mut LowRankFactors<T> {
        &mut self.delta
    }

    pub fn schedule(&self) -> AlphaSchedule {
        self.schedule
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Moves the blend weight to its value at `step`.
    pub fn set_step(&mut self, step: u64) {
        self.alpha = self.schedule.alpha_at(step);
    }

    /// Sets α directly, e.g. when restoring a saved model.
    pub fn set_alpha(&mut self, alpha: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::InvalidArgument(format!("blend weight {alpha} outside [0, 1]")));
        }
        self.alpha = alpha;
        Ok(())
    }

    /// Forward pass at the current α.
    pub fn forward(&self, x: &TensorGrid<T>) -> Result<TensorGrid<T>> {
        blend(self.alpha, &self.base, &self.delta, x)
    }

    /// Forward pass at the α scheduled for `step`.
    pub fn blend_forward(&self, x: &[T], step: u64) -> Result<Vec<T>> {
        let alpha = self.schedule.alpha_at(step);
        Ok(blend(alpha, &self.base, &self.delta, &TensorGrid::column_vector(x))?.into_data())
    }
}

fn blend<T: Scalar>(
    alpha: f64,
    base: &TensorGrid<T>,
    delta: &LowRankFactors<T>,
    x: &TensorGrid<T>,
) -> Result<TensorGrid<T>> {
    // The endpoints skip the inactive path so α = 1 and α = 0 are exact.
    if alpha >= 1.0 {
        return matmul(base, x);
    }
    let low = delta.forward(x)?;
    if alpha <= 0.0 {
        return Ok(low);
    }
    let dense = matmul(base, x)?;
    Ok(TensorGrid::from_fn(low.rows(), low.cols(), |i, j| {
        T::from_f64(alpha * dense.get(i, j).to_f64() + (1.0 - alpha) * low.get(i, j).to_f64())
    }))
}

/// Replaces every dense matrix named in `targets` by its rank-`r` SVD
/// factors, fanning the decompositions out over `workers` threads.
///
/// Each matrix is decomposed by exactly one worker and results are placed
/// by matrix, so the output does not depend on `workers` or scheduling.
pub fn decompose_model<T: Scalar>(
    model: &Model<T>,
    r: usize,
    targets: &[MatrixName],
    workers: usize,
) -> Result<Model<T>> {
    if workers == 0 {
        return Err(Error::InvalidArgument("worker_count must be at least 1".into()));
    }
    let mut specs = model.specs().clone();
    for &name in targets {
        specs.set(name, LayerKind::Lowrank { rank: r });
    }
    specs.validate(model.config())?;

    let jobs: Vec<(LinearId, &TensorGrid<T>)> = model
        .linears()
        .into_iter()
        .filter(|(id, _)| targets.contains(&id.matrix))
        .map(|(id, lin)| match lin {
            Linear::Dense(w) => Ok((id, w)),
            other => Err(Error::Matrix {
                name: id.to_string(),
                source: Box::new(Error::Unsupported(format!(
                    "decomposition needs a dense matrix, found {}",
                    other.kind_name()
                ))),
            }),
        })
        .collect::<Result<_>>()?;

    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<LowRankFactors<T>>>>> =
        Mutex::new((0..jobs.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers.min(jobs.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some((_, w)) = jobs.get(i) else { break };
                let out = decompose_linear(w, r);
                results.lock().unwrap()[i] = Some(out);
            });
        }
    });

    let mut out = model.clone();
    out.set_specs(specs);
    for ((id, _), res) in jobs.iter().zip(results.into_inner().unwrap()) {
        let factors = res.expect("every job runs").map_err(|e| Error::Matrix {
            name: id.to_string(),
            source: Box::new(e),
        })?;
        *out.linear_mut(*id) = Linear::LowRank(factors);
    }
    Ok(out)
}
