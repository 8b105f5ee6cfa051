//! Trainable parameters and the Adam optimizer.

use super::{Storage, Tensor};
use crate::error::{Error, Result};

/// A named trainable tensor with its Adam moment buffers.
pub struct Parameter {
    name: String,
    value: Tensor,
    m: Storage,
    v: Storage,
}

impl Parameter {
    pub fn new(name: impl Into<String>, data: Storage, shape: &[usize]) -> Result<Self> {
        let (m, v) = (Storage::zeros(data.dtype(), data.len()), Storage::zeros(data.dtype(), data.len()));
        Ok(Self { name: name.into(), value: Tensor::variable(data, shape)?, m, v })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// The current value as a graph leaf.
    pub fn tensor(&self) -> &Tensor {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    /// Replaces the value; the shape and dtype must match.
    pub fn set_data(&mut self, data: Storage) -> Result<()> {
        if data.len() != self.value.numel() || data.dtype() != self.value.dtype() {
            return Err(Error::Checkpoint(format!(
                "parameter {}: expected {} {:?} values, got {} {:?}",
                self.name,
                self.value.numel(),
                self.value.dtype(),
                data.len(),
                data.dtype()
            )));
        }
        self.value = Tensor::variable(data, self.value.shape())?;
        Ok(())
    }

    pub fn moments(&self) -> (&Storage, &Storage) {
        (&self.m, &self.v)
    }

    pub(crate) fn set_moments(&mut self, m: Storage, v: Storage) -> Result<()> {
        if m.len() != self.value.numel() || v.len() != self.value.numel() {
            return Err(Error::Checkpoint(format!("optimizer state shape mismatch for {}", self.name)));
        }
        self.m = m;
        self.v = v;
        Ok(())
    }
}

/// Anything that owns parameters.
pub trait Module {
    fn visit(&self, f: &mut dyn FnMut(&Parameter));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter));

    fn num_parameters(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |p| n += p.value.numel());
        n
    }

    fn zero_grad(&self) {
        self.visit(&mut |p| p.value.zero_grad());
    }
}

impl Module for Parameter {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        f(self)
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        f(self)
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self { lr, beta1, beta2, eps, step: 0 }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub(crate) fn set_steps_taken(&mut self, step: u64) {
        self.step = step;
    }

    /// One update of every parameter holding a gradient; gradients are cleared.
    pub fn step(&mut self, modules: &mut [&mut dyn Module]) -> Result<()> {
        let mut any = false;
        for m in modules.iter() {
            m.visit(&mut |p| any |= p.value.grad_storage().is_some());
        }
        if !any {
            return Err(Error::State("adam step without accumulated gradients".into()));
        }
        self.step += 1;
        let (b1, b2, eps, lr) = (self.beta1, self.beta2, self.eps, self.lr);
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        let mut result = Ok(());
        for m in modules.iter_mut() {
            m.visit_mut(&mut |p| {
                if result.is_err() {
                    return;
                }
                let Some(g) = p.value.grad_storage().clone() else { return };
                result = adam_update(p, &g, (b1, b2, eps, lr, bc1, bc2));
            });
        }
        result
    }
}

fn adam_update(p: &mut Parameter, g: &Storage, hp: (f64, f64, f64, f64, f64, f64)) -> Result<()> {
    let (b1, b2, eps, lr, bc1, bc2) = hp;
    let shape = p.value.shape().to_vec();
    let data = match (p.value.storage(), g, &mut p.m, &mut p.v) {
        (Storage::F32(x), Storage::F32(g), Storage::F32(m), Storage::F32(v)) => {
            Storage::F32(update_kernel(x, g, m, v, hp_cast(b1, b2, eps, lr, bc1, bc2)))
        }
        (Storage::F64(x), Storage::F64(g), Storage::F64(m), Storage::F64(v)) => {
            Storage::F64(update_kernel(x, g, m, v, (b1, b2, eps, lr, bc1, bc2)))
        }
        _ => return Err(Error::State(format!("dtype mismatch in optimizer state of {}", p.name))),
    };
    p.value = Tensor::variable(data, &shape)?;
    Ok(())
}

fn hp_cast(b1: f64, b2: f64, eps: f64, lr: f64, bc1: f64, bc2: f64) -> (f32, f32, f32, f32, f32, f32) {
    (b1 as f32, b2 as f32, eps as f32, lr as f32, bc1 as f32, bc2 as f32)
}

fn update_kernel<T: super::Element>(x: &[T], g: &[T], m: &mut [T], v: &mut [T], hp: (T, T, T, T, T, T)) -> Vec<T> {
    let (b1, b2, eps, lr, bc1, bc2) = hp;
    let one = T::one();
    x.iter()
        .zip(g)
        .zip(m.iter_mut().zip(v.iter_mut()))
        .map(|((&x, &g), (m, v))| {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            let mhat = *m / bc1;
            let vhat = *v / bc2;
            x - lr * mhat / (vhat.sqrt() + eps)
        })
        .collect()
}

/// Clones every parameter value of a module, in visiting order.
pub fn snapshot(module: &dyn Module) -> Vec<(String, Storage)> {
    let mut out = Vec::new();
    module.visit(&mut |p| out.push((p.name.clone(), p.value.storage().clone())));
    out
}
