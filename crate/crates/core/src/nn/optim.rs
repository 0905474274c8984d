//! SGD (with momentum) and Adam parameter updates.

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use super::layer::ParamMut;
use super::Scalar;
use crate::error::{Error, Result};

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "algo", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimSpec {
    Sgd {
        lr: f64,
        #[serde(default)]
        momentum: f64,
    },
    Adam {
        lr: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
}

impl OptimSpec {
    pub fn lr(&self) -> f64 {
        match self {
            OptimSpec::Sgd { lr, .. } | OptimSpec::Adam { lr, .. } => *lr,
        }
    }

    pub fn with_lr(&self, lr: f64) -> OptimSpec {
        let mut s = *self;
        match &mut s {
            OptimSpec::Sgd { lr: l, .. } | OptimSpec::Adam { lr: l, .. } => *l = lr,
        }
        s
    }
}

#[derive(Debug, Clone)]
struct Slot<F> {
    m: ArrayD<F>,
    v: Option<ArrayD<F>>,
}

#[derive(Debug, Clone)]
pub struct Optimizer<F> {
    pub spec: OptimSpec,
    step: u64,
    slots: Vec<Slot<F>>,
}

impl<F: Scalar> Optimizer<F> {
    pub fn new(spec: OptimSpec) -> Self {
        Optimizer { spec, step: 0, slots: Vec::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.spec = self.spec.with_lr(lr);
    }

    /// Apply one update to every parameter in `params` using the gradients
    /// accumulated on them.
    pub fn step(&mut self, mut params: Vec<ParamMut<'_, F>>) -> Result<()> {
        if self.slots.is_empty() {
            self.slots = params
                .iter()
                .map(|p| Slot {
                    m: ArrayD::zeros(p.value.raw_dim()),
                    v: matches!(self.spec, OptimSpec::Adam { .. })
                        .then(|| ArrayD::zeros(p.value.raw_dim())),
                })
                .collect();
        }
        if self.slots.len() != params.len() {
            return Err(Error::config(format!(
                "optimizer state covers {} parameters, model has {}",
                self.slots.len(),
                params.len()
            )));
        }
        self.step += 1;
        match self.spec {
            OptimSpec::Sgd { lr, momentum } => {
                let lr = F::from_f64(lr);
                let mom = F::from_f64(momentum);
                for (p, slot) in params.iter_mut().zip(&mut self.slots) {
                    for ((w, g), m) in
                        p.value.iter_mut().zip(p.grad.iter()).zip(slot.m.iter_mut())
                    {
                        *m = mom * *m + *g;
                        *w = *w - lr * *m;
                    }
                }
            }
            OptimSpec::Adam { lr, beta1, beta2, eps } => {
                let b1 = F::from_f64(beta1);
                let b2 = F::from_f64(beta2);
                let one = F::one();
                let eps = F::from_f64(eps);
                let bias1 = F::from_f64(1.0 - beta1.powi(self.step as i32));
                let bias2 = F::from_f64(1.0 - beta2.powi(self.step as i32));
                let lr = F::from_f64(lr);
                for (p, slot) in params.iter_mut().zip(&mut self.slots) {
                    let v = slot.v.as_mut().expect("adam second moment");
                    for (((w, g), m), vv) in p
                        .value
                        .iter_mut()
                        .zip(p.grad.iter())
                        .zip(slot.m.iter_mut())
                        .zip(v.iter_mut())
                    {
                        *m = b1 * *m + (one - b1) * *g;
                        *vv = b2 * *vv + (one - b2) * *g * *g;
                        let mhat = *m / bias1;
                        let vhat = *vv / bias2;
                        *w = *w - lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }

    /// Export optimizer state as named f32 blobs for checkpointing.
    pub fn export_state(&self, names: &[String]) -> Vec<(String, Vec<u64>, Vec<f32>)> {
        let mut out = Vec::new();
        for (slot, name) in self.slots.iter().zip(names) {
            let dims: Vec<u64> = slot.m.shape().iter().map(|&d| d as u64).collect();
            out.push((
                format!("optim.{name}.m"),
                dims.clone(),
                slot.m.iter().map(|v| v.as_f32()).collect(),
            ));
            if let Some(v) = &slot.v {
                out.push((
                    format!("optim.{name}.v"),
                    dims,
                    v.iter().map(|x| x.as_f32()).collect(),
                ));
            }
        }
        out
    }
}
