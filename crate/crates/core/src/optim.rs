//! Poly learning-rate schedule and optimizers.

use dapass_tensor::{Element, Tensor};
use log::warn;

use crate::error::{Error, Result};
use crate::params::{Grads, ParamStore};

/// `base_lr * (1 - t / total)^power`.
pub fn poly_lr(base_lr: f64, t: usize, total: usize, power: f64) -> Result<f64> {
    if t > total {
        return Err(Error::Invalid(format!("poly_lr: t={t} exceeds T={total}")));
    }
    if total == 0 {
        return Ok(0.0);
    }
    Ok(base_lr * (1.0 - t as f64 / total as f64).powf(power))
}

/// Whether an optimizer step was applied.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// Non-finite gradients; parameters and state untouched.
    Skipped,
}

pub trait Optimizer<T: Element> {
    fn step(&mut self, params: &mut ParamStore<T>, grads: &Grads<T>, lr: f64) -> Result<StepOutcome>;
}

/// Plain gradient descent, `θ ← θ − lr·g`.
#[derive(Clone, Copy, Debug, Default)]
pub struct Sgd;

impl<T: Element> Optimizer<T> for Sgd {
    fn step(&mut self, params: &mut ParamStore<T>, grads: &Grads<T>, lr: f64) -> Result<StepOutcome> {
        check_shapes(params, grads)?;
        if !grads.all_finite() {
            warn!("sgd: non-finite gradient, step skipped");
            return Ok(StepOutcome::Skipped);
        }
        params.sgd_update(grads, T::cast(lr));
        Ok(StepOutcome::Applied)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
}

/// AdamW with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    pub state: OptimizerState<T>,
}

impl<T: Element> AdamW<T> {
    pub fn new(config: AdamWConfig, params: &ParamStore<T>) -> Self {
        let zeros = || params.tensors().map(|t| Tensor::zeros(t.shape().to_vec())).collect();
        Self {
            config,
            state: OptimizerState {
                m: zeros(),
                v: zeros(),
                step: 0,
            },
        }
    }
}

fn check_shapes<T: Element>(params: &ParamStore<T>, grads: &Grads<T>) -> Result<()> {
    if params.len() != grads.0.len() {
        return Err(Error::ParamSet(format!(
            "{} gradients for {} parameters",
            grads.0.len(),
            params.len()
        )));
    }
    for (p, g) in params.iter().zip(&grads.0) {
        if p.value.shape() != g.shape() {
            return Err(Error::ParamShape {
                name: p.name.clone(),
                expected: p.value.shape().to_vec(),
                found: g.shape().to_vec(),
            });
        }
    }
    Ok(())
}

impl<T: Element> Optimizer<T> for AdamW<T> {
    fn step(&mut self, params: &mut ParamStore<T>, grads: &Grads<T>, lr: f64) -> Result<StepOutcome> {
        check_shapes(params, grads)?;
        if !grads.all_finite() {
            warn!("adamw: non-finite gradient at step {}, skipped", self.state.step);
            return Ok(StepOutcome::Skipped);
        }
        let c = self.config;
        self.state.step += 1;
        let t = self.state.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::cast(c.beta1), T::cast(c.beta2));
        let decay = T::cast(1.0 - lr * c.weight_decay);
        let step_size = T::cast(lr / bc1);
        let inv_bc2 = T::cast(1.0 / bc2);
        let eps = T::cast(c.eps);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(&grads.0)
            .zip(self.state.m.iter_mut().zip(self.state.v.iter_mut()))
        {
            let pd = p.value.data_mut();
            for (i, &gi) in g.data().iter().enumerate() {
                let mi = b1 * m.data()[i] + (T::one() - b1) * gi;
                let vi = b2 * v.data()[i] + (T::one() - b2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                pd[i] = pd[i] * decay - step_size * mi / ((vi * inv_bc2).sqrt() + eps);
            }
        }
        Ok(StepOutcome::Applied)
    }
}
