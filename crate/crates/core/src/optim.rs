//! First-order optimizers over the policy's parameter table, selected by
//! name through [`OptimizerRegistry`].

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::toymodel::{ParamTable, PolicyError, ToyPolicy};

pub trait Optimizer: Send {
    fn name(&self) -> &str;

    /// One descent step along `loss_grad`, the gradient of the loss.
    fn step(&mut self, policy: &mut ToyPolicy, loss_grad: &ParamTable) -> Result<(), PolicyError>;
}

/// Mini-batch gradient descent with optional heavy-ball momentum.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: Option<ParamTable>,
}

impl Sgd {
    pub fn new(learning_rate: f64, momentum: f64) -> Self {
        Self { learning_rate, momentum, velocity: None }
    }
}

impl Optimizer for Sgd {
    fn name(&self) -> &str {
        "sgd"
    }

    fn step(&mut self, policy: &mut ToyPolicy, loss_grad: &ParamTable) -> Result<(), PolicyError> {
        if self.momentum == 0.0 {
            return policy.apply_update(loss_grad, -self.learning_rate);
        }
        let v = self.velocity.get_or_insert_with(|| policy.zero_table());
        for (vi, gi) in v.as_mut_slice().iter_mut().zip(loss_grad.as_slice()) {
            *vi = self.momentum * *vi + gi;
        }
        policy.apply_update(v, -self.learning_rate)
    }
}

/// Adam with bias-corrected moment estimates.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    t: i32,
    m: Option<ParamTable>,
    v: Option<ParamTable>,
}

impl Adam {
    pub fn new(learning_rate: f64, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Self { learning_rate, beta1, beta2, epsilon, t: 0, m: None, v: None }
    }
}

impl Optimizer for Adam {
    fn name(&self) -> &str {
        "adam"
    }

    fn step(&mut self, policy: &mut ToyPolicy, loss_grad: &ParamTable) -> Result<(), PolicyError> {
        if policy.is_frozen() {
            return Err(PolicyError::Frozen);
        }
        self.t += 1;
        let m = self.m.get_or_insert_with(|| policy.zero_table());
        let v = self.v.get_or_insert_with(|| policy.zero_table());
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let mut delta = policy.zero_table();
        let it = m.as_mut_slice().iter_mut().zip(v.as_mut_slice().iter_mut()).zip(loss_grad.as_slice());
        for (d, ((mi, vi), g)) in delta.as_mut_slice().iter_mut().zip(it) {
            *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
            *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
            *d = (*mi / c1) / ((*vi / c2).sqrt() + self.epsilon);
        }
        policy.apply_update(&delta, -self.learning_rate)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    /// Registry name: `sgd` or `adam`.
    pub kind: String,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { kind: "adam".into(), momentum: 0.0, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum OptimizerError {
    #[error("unknown optimizer `{name}` (available: {available})")]
    Unknown { name: String, available: String },
    #[error("invalid optimizer setting: {0}")]
    Invalid(String),
}

pub type OptimizerFactory = Box<dyn Fn(&OptimizerConfig, f64) -> Box<dyn Optimizer> + Send + Sync>;

pub struct OptimizerRegistry {
    factories: BTreeMap<String, OptimizerFactory>,
}

impl Default for OptimizerRegistry {
    /// `sgd` and `adam`.
    fn default() -> Self {
        let mut r = Self { factories: BTreeMap::new() };
        r.register("sgd", |c, lr| Box::new(Sgd::new(lr, c.momentum)));
        r.register("adam", |c, lr| Box::new(Adam::new(lr, c.beta1, c.beta2, c.epsilon)));
        r
    }
}

impl OptimizerRegistry {
    pub fn register(&mut self, name: &str, factory: impl Fn(&OptimizerConfig, f64) -> Box<dyn Optimizer> + Send + Sync + 'static) {
        self.factories.insert(name.to_string(), Box::new(factory));
    }

    pub fn names(&self) -> Vec<&str> {
        self.factories.keys().map(String::as_str).collect()
    }

    pub fn create(&self, config: &OptimizerConfig, learning_rate: f64) -> Result<Box<dyn Optimizer>, OptimizerError> {
        if !learning_rate.is_finite() || learning_rate < 0.0 {
            return Err(OptimizerError::Invalid(format!("learning_rate {learning_rate}")));
        }
        let factory = self.factories.get(&config.kind).ok_or_else(|| OptimizerError::Unknown {
            name: config.kind.clone(),
            available: self.names().join(", "),
        })?;
        Ok(factory(config, learning_rate))
    }
}

/// Builds an optimizer from the default registry.
pub fn build_optimizer(config: &OptimizerConfig, learning_rate: f64) -> Result<Box<dyn Optimizer>, OptimizerError> {
    OptimizerRegistry::default().create(config, learning_rate)
}
