use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Scalar, TensorGrid};
use crate::transformer::{Gradients, Model};

/// AdamW hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let open_unit = |b: f64| b > 0.0 && b < 1.0;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("lr must be positive, got {}", self.lr)));
        }
        if !open_unit(self.beta1) || !open_unit(self.beta2) {
            return Err(Error::InvalidArgument(format!(
                "betas must lie in (0, 1), got ({}, {})",
                self.beta1, self.beta2
            )));
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidArgument("eps must be positive and weight_decay non-negative".into()));
        }
        Ok(())
    }
}

/// Moments and 64-bit master copy of one tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub shape: (usize, usize),
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub master: Vec<f64>,
}

/// Optimizer state for every tensor that has been updated at least once.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamWState {
    config: AdamWConfig,
    step: u64,
    slots: BTreeMap<String, Moments>,
}

impl AdamWState {
    pub fn new(config: AdamWConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            step: 0,
            slots: BTreeMap::new(),
        })
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.config
    }

    /// Completed optimizer steps.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn moments(&self, name: &str) -> Option<&Moments> {
        self.slots.get(name)
    }

    pub fn tensor_names(&self) -> impl Iterator<Item = &str> {
        self.slots.keys().map(String::as_str)
    }

    /// Applies one update to `param` using the current step count. The
    /// step counter itself is advanced by [`AdamWState::begin_step`].
    fn update_tensor<T: Scalar>(&mut self, name: &str, param: &mut TensorGrid<T>, grad: &TensorGrid<T>) -> Result<()> {
        if param.shape() != grad.shape() {
            return Err(Error::shape(
                "adamw_step",
                format!("{name}: parameter {:?} vs gradient {:?}", param.shape(), grad.shape()),
            ));
        }
        let c = self.config;
        let t = self.step.max(1) as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let slot = self.slots.entry(name.to_string()).or_insert_with(|| Moments {
            shape: param.shape(),
            m: vec![0.0; param.len()],
            v: vec![0.0; param.len()],
            master: param.data().iter().map(|x| x.to_f64()).collect(),
        });
        if slot.shape != param.shape() {
            return Err(Error::shape(
                "adamw_step",
                format!("{name}: state {:?} vs parameter {:?}", slot.shape, param.shape()),
            ));
        }
        for (i, (p, g)) in param.data_mut().iter_mut().zip(grad.data()).enumerate() {
            let g = g.to_f64();
            let m = c.beta1 * slot.m[i] + (1.0 - c.beta1) * g;
            let v = c.beta2 * slot.v[i] + (1.0 - c.beta2) * g * g;
            slot.m[i] = m;
            slot.v[i] = v;
            let w = slot.master[i];
            let upd = (m / bc1) / ((v / bc2).sqrt() + c.eps) + c.weight_decay * w;
            let w = w - c.lr * upd;
            slot.master[i] = w;
            *p = T::from_f64(w);
        }
        Ok(())
    }

    fn begin_step<T: Scalar>(&mut self, grads: &Gradients<T>) -> Result<()> {
        // Reject before touching anything so a bad step leaves no trace.
        if let Some((name, _)) = grads.iter().find(|(_, g)| !g.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
        self.step += 1;
        Ok(())
    }

    /// One AdamW step over free-standing tensors, keyed by name.
    pub fn step_tensors<T: Scalar>(
        &mut self,
        params: &mut BTreeMap<String, TensorGrid<T>>,
        grads: &Gradients<T>,
    ) -> Result<()> {
        if let Some(name) = grads.keys().find(|n| !params.contains_key(*n)) {
            return Err(Error::InvalidArgument(format!("gradient for unknown tensor {name}")));
        }
        self.begin_step(grads)?;
        for (name, g) in grads {
            let p = params.get_mut(name).expect("checked above");
            self.update_tensor(name, p, g)?;
        }
        Ok(())
    }

    /// One AdamW step over the model tensors named in `grads`. Tensors
    /// without a gradient are left untouched.
    pub fn step_model<T: Scalar>(&mut self, model: &mut Model<T>, grads: &Gradients<T>) -> Result<()> {
        let trainable = model.trainable_names();
        if let Some(name) = grads.keys().find(|n| !trainable.contains(*n)) {
            return Err(Error::InvalidArgument(format!("gradient for non-trainable tensor {name}")));
        }
        self.begin_step(grads)?;
        for (name, g) in grads {
            let p = model.param_mut(name).expect("trainable names resolve");
            self.update_tensor(name, p, g)?;
        }
        Ok(())
    }
}
