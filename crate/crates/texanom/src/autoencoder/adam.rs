//! ADAM optimizer with bias correction.

use ndarray::{Array1, Array4};

use crate::error::{Result, TexanomError};

use super::{Gradients, ModelParams};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First/second moment estimates per parameter tensor, plus the step count.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<(Array4<f64>, Array1<f64>)>,
    v: Vec<(Array4<f64>, Array1<f64>)>,
    t: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> AdamState {
        let zeros: Vec<_> = params
            .layers
            .iter()
            .map(|l| (Array4::zeros(l.weight.dim()), Array1::zeros(l.bias.dim())))
            .collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// One ADAM update of all parameters in place.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &Gradients,
    state: &mut AdamState,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    if grads.layers.len() != params.layers.len() {
        return Err(TexanomError::Contract(format!(
            "gradient has {} layers, model has {}",
            grads.layers.len(),
            params.layers.len()
        )));
    }
    for (idx, (gw, gb)) in grads.layers.iter().enumerate() {
        if gw.iter().chain(gb.iter()).any(|v| !v.is_finite()) {
            return Err(TexanomError::Training(format!(
                "non-finite gradient in layer {} ({})",
                idx,
                params.layers[idx].describe()
            )));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (idx, layer) in params.layers.iter_mut().enumerate() {
        let (gw, gb) = &grads.layers[idx];
        let (mw, mb) = &mut state.m[idx];
        let (vw, vb) = &mut state.v[idx];
        update_tensor(
            layer.weight.as_slice_mut().unwrap(),
            gw.as_slice().unwrap(),
            mw.as_slice_mut().unwrap(),
            vw.as_slice_mut().unwrap(),
            lr,
            cfg,
            bc1,
            bc2,
        );
        update_tensor(
            layer.bias.as_slice_mut().unwrap(),
            gb.as_slice().unwrap(),
            mb.as_slice_mut().unwrap(),
            vb.as_slice_mut().unwrap(),
            lr,
            cfg,
            bc1,
            bc2,
        );
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn update_tensor(
    p: &mut [f64],
    g: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    lr: f64,
    cfg: &AdamConfig,
    bc1: f64,
    bc2: f64,
) {
    for i in 0..p.len() {
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        p[i] -= lr * m_hat / (v_hat.sqrt() + cfg.epsilon);
    }
}
