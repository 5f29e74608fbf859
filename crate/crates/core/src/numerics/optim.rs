use std::collections::HashMap;
use std::ops::Index;

use super::tape::{Gradients, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Hyperparameters for SGD with momentum and L2 weight decay.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// A named trainable tensor with its gradient and momentum buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Tensor>,
    pub momentum: Tensor,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let momentum = Tensor::zeros(value.shape());
        Self {
            name: name.into(),
            value,
            grad: None,
            momentum,
        }
    }
}

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Ordered collection of uniquely named parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, usize>,
}

/// Tape handles for every parameter of a store, from [`ParamStore::bind`].
#[derive(Debug)]
pub struct Binding {
    vars: Vec<Var>,
}

impl Index<ParamId> for Binding {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::DuplicateParam(name));
        }
        self.by_name.insert(name.clone(), self.params.len());
        self.params.push(Parameter::new(name, value));
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    /// Places every parameter on `tape` as a leaf.
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> Binding {
        let vars = self
            .params
            .iter()
            .map(|p| tape.leaf(p.value.clone(), requires_grad))
            .collect();
        Binding { vars }
    }

    /// Moves the gradients for `binding` out of `grads` into the parameters,
    /// adding to any gradient already present.
    pub fn collect_grads(&mut self, binding: &Binding, grads: &mut Gradients) -> Result<()> {
        for (p, &var) in self.params.iter_mut().zip(&binding.vars) {
            let g = grads.take(var).ok_or_else(|| Error::MissingGrad(p.name.clone()))?;
            match &mut p.grad {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
                None => p.grad = Some(g),
            }
        }
        Ok(())
    }

    /// Overwrites a parameter's value and momentum buffer, keeping its shape.
    pub fn restore(&mut self, name: &str, value: Tensor, momentum: Tensor) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter `{name}`")))?;
        let p = &mut self.params[id.0];
        if value.shape() != p.value.shape() || momentum.shape() != p.value.shape() {
            return Err(Error::Shape {
                op: "restore",
                detail: format!("`{name}`: stored {:?}, model {:?}", value.shape(), p.value.shape()),
            });
        }
        p.value = value;
        p.momentum = momentum;
        p.grad = None;
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Squared L2 norm over all gradients present.
    pub fn grad_norm_sq(&self) -> f64 {
        self.params
            .iter()
            .filter_map(|p| p.grad.as_ref())
            .flat_map(|g| g.data().iter())
            .map(|v| v * v)
            .sum()
    }
}

/// One SGD step with momentum and weight decay, then clears gradients:
///
/// `v ← momentum·v + grad + weight_decay·θ`, `θ ← θ − lr·v`.
pub fn sgd_step(params: &mut [Parameter], cfg: &OptimizerConfig) -> Result<()> {
    if let Some(p) = params.iter().find(|p| p.grad.is_none()) {
        return Err(Error::MissingGrad(p.name.clone()));
    }
    for p in params.iter_mut() {
        let grad = p.grad.take().expect("checked above");
        let theta = p.value.data_mut();
        let v = p.momentum.data_mut();
        for ((t, m), g) in theta.iter_mut().zip(v.iter_mut()).zip(grad.data()) {
            *m = cfg.momentum * *m + g + cfg.weight_decay * *t;
            *t -= cfg.learning_rate * *m;
        }
    }
    Ok(())
}
