//! Adam with bias correction, plus the plain gradient-descent step.

use thiserror::Error;

use super::tensor::Tensor;

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("parameter {index} has shape {param:?} but gradient has {grad:?}")]
    ShapeMismatch {
        index: usize,
        param: Vec<usize>,
        grad: Vec<usize>,
    },
    #[error("optimizer tracks {expected} parameters, got {got}")]
    ArityMismatch { expected: usize, got: usize },
}

/// Adam hyperparameters. Defaults: lr 0.001, β1 0.9, β2 0.999, ε 1e-8.
#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

/// First/second moment estimates per tracked parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamState {
    config: AdamConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, param_shapes: &[&[usize]]) -> Self {
        Self {
            config,
            m: param_shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: param_shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            step: 0,
        }
    }

    pub fn for_params(config: AdamConfig, params: &[&Tensor]) -> Self {
        let shapes: Vec<&[usize]> = params.iter().map(|t| t.shape()).collect();
        Self::new(config, &shapes)
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }
}

/// One Adam update over a parameter list. Parameters with an all-zero
/// gradient and zero moments stay bit-identical.
pub fn adam_step(params: &mut [&mut Tensor], grads: &[&Tensor], state: &mut AdamState) -> Result<(), OptimError> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(OptimError::ArityMismatch {
            expected: state.m.len(),
            got: params.len(),
        });
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(OptimError::ShapeMismatch {
                index: i,
                param: p.shape().to_vec(),
                grad: g.shape().to_vec(),
            });
        }
    }
    state.step += 1;
    let c = state.config;
    let bc1 = 1.0 - c.beta1.powi(state.step as i32);
    let bc2 = 1.0 - c.beta2.powi(state.step as i32);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let pdata = p.data_mut();
        for (((pk, &gk), mk), vk) in pdata.iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mk = c.beta1 * *mk + (1.0 - c.beta1) * gk;
            *vk = c.beta2 * *vk + (1.0 - c.beta2) * gk * gk;
            let m_hat = *mk / bc1;
            let v_hat = *vk / bc2;
            let update = c.lr * m_hat / (v_hat.sqrt() + c.eps);
            if update != 0.0 {
                *pk -= update;
            }
        }
    }
    Ok(())
}

/// `tensor − eta·grad`. For the differentiable variant that keeps the result
/// in a graph, see `Graph::sgd_step`.
pub fn sgd_step(tensor: &Tensor, grad: &Tensor, eta: f64) -> Result<Tensor, OptimError> {
    if tensor.shape() != grad.shape() {
        return Err(OptimError::ShapeMismatch {
            index: 0,
            param: tensor.shape().to_vec(),
            grad: grad.shape().to_vec(),
        });
    }
    let data = tensor
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&t, &g)| t - eta * g)
        .collect();
    Ok(Tensor::new(tensor.shape().to_vec(), data))
}
