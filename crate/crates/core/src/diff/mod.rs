//! Reverse-mode differentiation over dense tensors, and the Adam optimizer.
//!
//! A [`Tape`] is rebuilt for every evaluation (define-by-run). Leaves are
//! constants, free variables, or [`Param`]s; after [`Tape::backward`] the
//! caller moves gradients into parameters with [`Param::accumulate`].
//! Accumulation adds, so two backward passes without [`Param::zero_grad`]
//! double the stored gradient.
//!
//! ```
//! use handfit::diff::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.variable(Tensor::scalar(3.0));
//! let y = tape.variable(Tensor::scalar(4.0));
//! let l = tape.mul(x, y).unwrap();
//! let g = tape.backward(l).unwrap();
//! assert_eq!(g.get(x).unwrap().item(), 4.0);
//! assert_eq!(g.get(y).unwrap().item(), 3.0);
//! ```

mod tape;
mod tensor;

use std::sync::Arc;

pub use tape::{Gradients, OpKind, Tape, Var, Vjp};
pub use tensor::Tensor;


use crate::error::{Error, Result};

/// A named trainable tensor with its gradient buffer.
#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    value: Arc<Tensor>,
    grad: Tensor,
    pub requires_grad: bool,
}

impl PartialEq for Param {
    fn eq(&self, other: &Self) -> bool {
        self.name == other.name && *self.value == *other.value && self.requires_grad == other.requires_grad
    }
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape().to_vec());
        Param {
            name: name.into(),
            value: Arc::new(value),
            grad,
            requires_grad: true,
        }
    }

    pub fn frozen(name: impl Into<String>, value: Tensor) -> Self {
        let mut p = Self::new(name, value);
        p.requires_grad = false;
        p
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub(crate) fn shared_value(&self) -> Arc<Tensor> {
        Arc::clone(&self.value)
    }

    /// Mutable access to the value. Copies if a live tape still shares it.
    pub fn value_mut(&mut self) -> &mut Tensor {
        Arc::make_mut(&mut self.value)
    }

    pub fn set_value(&mut self, value: Tensor) -> Result<()> {
        if value.shape() != self.value.shape() {
            return Err(Error::shape(
                "set_value",
                format!("{}: {:?} vs {:?}", self.name, value.shape(), self.value.shape()),
            ));
        }
        self.value = Arc::new(value);
        Ok(())
    }

    pub fn grad(&self) -> &Tensor {
        &self.grad
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    /// Adds `g` into the gradient buffer.
    pub fn accumulate(&mut self, g: &Tensor) -> Result<()> {
        if g.shape() != self.grad.shape() {
            return Err(Error::shape(
                "accumulate",
                format!("{}: {:?} vs {:?}", self.name, g.shape(), self.grad.shape()),
            ));
        }
        self.grad.add_assign(g);
        Ok(())
    }

    /// Accumulates the gradient recorded for `var`, if any flowed there.
    pub fn accumulate_from(&mut self, grads: &Gradients, var: Var) -> Result<()> {
        match grads.get(var) {
            Some(g) => self.accumulate(g),
            None => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamSlot {
    pub m: Tensor,
    pub v: Tensor,
    /// Number of updates this slot has received; drives bias correction.
    pub steps: u64,
}

/// Adam with bias correction. One moment slot per parameter position.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step_count: u64,
    pub slots: Vec<AdamSlot>,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step_count: 0,
            slots: Vec::new(),
        }
    }

    fn slot(&mut self, index: usize, shape: &[usize]) -> Result<&mut AdamSlot> {
        while self.slots.len() <= index {
            self.slots.push(AdamSlot {
                m: Tensor::zeros(Vec::new()),
                v: Tensor::zeros(Vec::new()),
                steps: 0,
            });
        }
        let slot = &mut self.slots[index];
        if slot.steps == 0 && slot.m.shape() != shape {
            slot.m = Tensor::zeros(shape.to_vec());
            slot.v = Tensor::zeros(shape.to_vec());
        }
        if slot.m.shape() != shape {
            return Err(Error::shape("adam", format!("slot {index}: {:?} vs {shape:?}", slot.m.shape())));
        }
        Ok(slot)
    }

    /// One update of every parameter that requires a gradient. Slot `i`
    /// belongs to `params[i]`. Gradients are left untouched.
    pub fn step(&mut self, params: &mut [&mut Param]) -> Result<()> {
        let all = vec![true; params.len()];
        self.step_masked(params, &all)
    }

    /// Like [`AdamState::step`] but only parameters with `active[i]` move.
    pub fn step_masked(&mut self, params: &mut [&mut Param], active: &[bool]) -> Result<()> {
        self.step_count += 1;
        let (lr, b1, b2, eps) = (self.lr, self.beta1, self.beta2, self.eps);
        for (i, p) in params.iter_mut().enumerate() {
            if !p.requires_grad || !active.get(i).copied().unwrap_or(false) {
                continue;
            }
            let shape = p.value().shape().to_vec();
            let slot = self.slot(i, &shape)?;
            slot.steps += 1;
            let t = slot.steps as i32;
            let c1 = 1.0 - b1.powi(t);
            let c2 = 1.0 - b2.powi(t);
            let Param { value, grad, .. } = &mut **p;
            let value = Arc::make_mut(value);
            let moments = slot.m.data_mut().iter_mut().zip(slot.v.data_mut());
            for ((x, &g), (m, v)) in value.data_mut().iter_mut().zip(grad.data()).zip(moments) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *x -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}
