//! Named trainable parameters and the Adam optimiser.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::math;
use crate::tensor::{Shape5, Tensor5};

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor5,
    pub grad: Option<Tensor5>,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
    step: u64,
}

impl Param {
    fn new(value: Tensor5) -> Self {
        let n = value.len();
        Param {
            value,
            grad: None,
            first_moment: vec![0.0; n],
            second_moment: vec![0.0; n],
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[f64], &[f64]) {
        (&self.first_moment, &self.second_moment)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, ..Self::default() }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Parameter paths bound to leaves of one tape.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, path: &str) -> Result<Var> {
        self.vars
            .get(path)
            .copied()
            .ok_or_else(|| Error::MissingParameter(path.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, path: impl Into<String>, value: Tensor5) -> Result<()> {
        let path = path.into();
        if self.params.contains_key(&path) {
            return Err(Error::DuplicateParameter(path));
        }
        self.params.insert(path, Param::new(value));
        Ok(())
    }

    pub fn get(&self, path: &str) -> Option<&Param> {
        self.params.get(path)
    }

    pub fn get_mut(&mut self, path: &str) -> Option<&mut Param> {
        self.params.get_mut(path)
    }

    pub fn value(&self, path: &str) -> Result<&Tensor5> {
        self.get(path)
            .map(|p| &p.value)
            .ok_or_else(|| Error::MissingParameter(path.to_string()))
    }

    pub fn set_value(&mut self, path: &str, value: Tensor5) -> Result<()> {
        let p = self
            .params
            .get_mut(path)
            .ok_or_else(|| Error::MissingParameter(path.to_string()))?;
        if p.value.shape() != value.shape() {
            return Err(Error::ShapeMismatch {
                op: "set_value",
                left: p.value.shape(),
                right: value.shape(),
            });
        }
        p.value = value;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn paths(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    /// Registers every parameter as a differentiable leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(k, p)| (k.clone(), tape.param(p.value.clone())))
            .collect();
        Bound { vars }
    }

    /// Copies gradients out of `tape` after a backward pass. Parameters the
    /// root does not depend on receive an explicit zero gradient.
    pub fn absorb_grads(&mut self, tape: &Tape, bound: &Bound) -> Result<()> {
        for (path, var) in bound.iter() {
            let p = self
                .params
                .get_mut(path)
                .ok_or_else(|| Error::MissingParameter(path.to_string()))?;
            p.grad = Some(match tape.grad(var) {
                Some(g) => g.clone(),
                None => Tensor5::zeros(p.value.shape()),
            });
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad = None;
        }
    }

    pub fn grad_norm(&self, prefix: &str) -> f64 {
        math::sqrt(
            self.params
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .filter_map(|(_, p)| p.grad.as_ref())
                .flat_map(|g| g.data().iter())
                .map(|v| v * v)
                .sum(),
        )
    }

    /// One bias-corrected Adam update of every parameter. Gradients are
    /// consumed.
    pub fn adam_step(&mut self, cfg: &AdamConfig) -> Result<()> {
        if let Some((path, _)) = self.params.iter().find(|(_, p)| p.grad.is_none()) {
            return Err(Error::MissingGradient(path.clone()));
        }
        for p in self.params.values_mut() {
            let g = p.grad.take().expect("checked above");
            p.step += 1;
            let bc1 = 1.0 - math::powi(cfg.beta1, p.step as i32);
            let bc2 = 1.0 - math::powi(cfg.beta2, p.step as i32);
            let values = p.value.data_mut();
            for i in 0..values.len() {
                let gi = g.data()[i];
                let m = cfg.beta1 * p.first_moment[i] + (1.0 - cfg.beta1) * gi;
                let v = cfg.beta2 * p.second_moment[i] + (1.0 - cfg.beta2) * gi * gi;
                p.first_moment[i] = m;
                p.second_moment[i] = v;
                let m_hat = m / bc1;
                let v_hat = v / bc2;
                values[i] -= cfg.lr * m_hat / (math::sqrt(v_hat) + cfg.eps);
            }
        }
        Ok(())
    }
}

/// Uniform initialisation in `±1/sqrt(fan_in)`, where fan-in is the number
/// of inputs feeding one output unit.
pub fn fan_in_uniform<R: Rng + ?Sized>(shape: Shape5, rng: &mut R) -> Tensor5 {
    let fan_in = (shape.channels * shape.voxels()).max(1);
    let bound = 1.0 / math::sqrt(fan_in as f64);
    let data = (0..shape.numel())
        .map(|_| (rng.gen::<f64>() * 2.0 - 1.0) * bound)
        .collect();
    Tensor5::from_vec(shape, data).expect("shape numel")
}
