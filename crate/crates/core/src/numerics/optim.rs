use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Per-parameter optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl OptimizerState {
    pub fn adam(learning_rate: f64, numel: usize) -> Self {
        Self {
            kind: OptimizerKind::Adam,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            m: vec![0.0; numel],
            v: vec![0.0; numel],
        }
    }

    pub fn sgd(learning_rate: f64, numel: usize) -> Self {
        Self { kind: OptimizerKind::Sgd, m: Vec::new(), v: Vec::new(), ..Self::adam(learning_rate, numel) }
    }

    pub fn first_moment(&self) -> &[f64] {
        &self.m
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.v
    }
}

/// One bias-corrected Adam update of `param` in place.
pub fn adam_step(state: &mut OptimizerState, param: &mut Tensor, grad: &Tensor) -> Result<()> {
    if state.kind != OptimizerKind::Adam {
        return Err(Error::InvalidArgument("adam_step on a non-Adam state".into()));
    }
    param.expect_same_shape(grad)?;
    if state.m.len() != param.numel() {
        return Err(Error::Shape(format!(
            "optimizer state tracks {} values, parameter has {}",
            state.m.len(),
            param.numel()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, lr, eps) = (state.beta1, state.beta2, state.learning_rate, state.epsilon);
    for (((p, &g), m), v) in param
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

pub fn sgd_step(state: &mut OptimizerState, param: &mut Tensor, grad: &Tensor) -> Result<()> {
    param.expect_same_shape(grad)?;
    state.step += 1;
    let lr = state.learning_rate;
    for (p, g) in param.data_mut().iter_mut().zip(grad.data()) {
        *p -= lr * g;
    }
    Ok(())
}

/// Optimizer over an ordered list of parameters.
#[derive(Clone, Debug)]
pub struct Optimizer {
    states: Vec<OptimizerState>,
}

impl Optimizer {
    pub fn adam<'a>(learning_rate: f64, params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        Self {
            states: params.into_iter().map(|p| OptimizerState::adam(learning_rate, p.numel())).collect(),
        }
    }

    pub fn sgd<'a>(learning_rate: f64, params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        Self {
            states: params.into_iter().map(|p| OptimizerState::sgd(learning_rate, p.numel())).collect(),
        }
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        for s in &mut self.states {
            s.learning_rate = lr;
        }
    }

    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor]) -> Result<()> {
        if params.len() != self.states.len() || grads.len() != self.states.len() {
            return Err(Error::Shape(format!(
                "optimizer tracks {} params, got {} params / {} grads",
                self.states.len(),
                params.len(),
                grads.len()
            )));
        }
        for ((state, p), g) in self.states.iter_mut().zip(params).zip(grads) {
            match state.kind {
                OptimizerKind::Adam => adam_step(state, p, g)?,
                OptimizerKind::Sgd => sgd_step(state, p, g)?,
            }
        }
        Ok(())
    }
}
