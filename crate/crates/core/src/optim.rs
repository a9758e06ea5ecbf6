//! LAMB and AdamW over named parameter tensors, plus the linear
//! warmup/decay learning-rate schedule.

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::model::ParameterStore;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-6,
            weight_decay: 0.01,
        }
    }
}

/// Moments keyed by parameter name and the number of steps taken.
#[derive(Debug, Clone, PartialEq)]
pub struct OptState<T> {
    pub config: OptimizerConfig,
    pub step: u64,
    pub m: ParameterStore<T>,
    pub v: ParameterStore<T>,
}

impl<T: Real> OptState<T> {
    pub fn new(config: OptimizerConfig) -> Self {
        OptState {
            config,
            step: 0,
            m: ParameterStore::new(),
            v: ParameterStore::new(),
        }
    }
}

pub type Grads<T> = IndexMap<String, Tensor<T>>;

fn check_inputs<T: Real>(params: &ParameterStore<T>, grads: &Grads<T>, lr: f64) -> Result<()> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::invalid(format!(
            "learning rate {lr} must be finite and non-negative"
        )));
    }
    for (name, g) in grads {
        let p = params.get(name)?;
        if p.shape() != g.shape() {
            return Err(Error::ShapeMismatch {
                op: "optimizer step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        if !g.is_finite() {
            return Err(Error::NonFinite("gradient"));
        }
    }
    Ok(())
}

/// Updates the moments of one tensor and returns the bias-corrected Adam
/// direction `m_hat / (sqrt(v_hat) + eps)`.
fn adam_direction<T: Real>(state: &mut OptState<T>, name: &str, g: &Tensor<T>) -> Result<Vec<f64>> {
    let c = state.config;
    if !state.m.contains(name) {
        state.m.insert(name, Tensor::zeros(g.shape())?);
        state.v.insert(name, Tensor::zeros(g.shape())?);
    }
    let t = state.step as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    let m = state.m.get_mut(name)?.data_mut();
    let mut dir = Vec::with_capacity(g.numel());
    let v = state.v.get_mut(name)?.data_mut();
    for ((mi, vi), &gi) in m.iter_mut().zip(v.iter_mut()).zip(g.data()) {
        let gi = gi.as_f64();
        let m_new = c.beta1 * mi.as_f64() + (1.0 - c.beta1) * gi;
        let v_new = c.beta2 * vi.as_f64() + (1.0 - c.beta2) * gi * gi;
        *mi = T::lit(m_new);
        *vi = T::lit(v_new);
        dir.push((m_new / bc1) / ((v_new / bc2).sqrt() + c.eps));
    }
    Ok(dir)
}

/// One LAMB step per named tensor. Parameters without a gradient are left
/// alone. With `trust_ratio == false` the ratio is fixed at 1.
pub fn lamb_step_with<T: Real>(
    params: &mut ParameterStore<T>,
    grads: &Grads<T>,
    state: &mut OptState<T>,
    lr: f64,
    trust_ratio: bool,
) -> Result<()> {
    check_inputs(params, grads, lr)?;
    state.step += 1;
    let wd = state.config.weight_decay;
    for (name, g) in grads {
        let dir = adam_direction(state, name, g)?;
        let w = params.get_mut(name)?.data_mut();
        let update: Vec<f64> = dir.iter().zip(w.iter()).map(|(&d, &wi)| d + wd * wi.as_f64()).collect();
        let w_norm = w.iter().map(|x| x.as_f64().powi(2)).sum::<f64>().sqrt();
        let u_norm = update.iter().map(|x| x * x).sum::<f64>().sqrt();
        let r = if trust_ratio && w_norm > 0.0 && u_norm > 0.0 {
            w_norm / u_norm
        } else {
            1.0
        };
        for (wi, u) in w.iter_mut().zip(&update) {
            *wi = T::lit(wi.as_f64() - lr * r * u);
        }
    }
    Ok(())
}

pub fn lamb_step<T: Real>(
    params: &mut ParameterStore<T>,
    grads: &Grads<T>,
    state: &mut OptState<T>,
    lr: f64,
) -> Result<()> {
    lamb_step_with(params, grads, state, lr, true)
}

/// Adam with bias correction followed by decoupled decay `w -= lr * wd * w`.
pub fn adamw_step<T: Real>(
    params: &mut ParameterStore<T>,
    grads: &Grads<T>,
    state: &mut OptState<T>,
    lr: f64,
) -> Result<()> {
    check_inputs(params, grads, lr)?;
    state.step += 1;
    let wd = state.config.weight_decay;
    for (name, g) in grads {
        let dir = adam_direction(state, name, g)?;
        let w = params.get_mut(name)?.data_mut();
        for (wi, d) in w.iter_mut().zip(&dir) {
            let stepped = wi.as_f64() - lr * d;
            *wi = T::lit(stepped - lr * wd * stepped);
        }
    }
    Ok(())
}

/// Linear warmup from 0 to `peak_lr`, then linear decay to 0 at `total_steps`.
pub fn lr_at(step: u64, peak_lr: f64, warmup_steps: u64, total_steps: u64) -> Result<f64> {
    if step > total_steps {
        return Err(Error::invalid(format!("step {step} beyond total_steps {total_steps}")));
    }
    if warmup_steps > total_steps {
        return Err(Error::invalid("warmup_steps exceeds total_steps"));
    }
    if !(peak_lr >= 0.0 && peak_lr.is_finite()) {
        return Err(Error::invalid(format!("peak learning rate {peak_lr} is invalid")));
    }
    if step < warmup_steps {
        return Ok(peak_lr * step as f64 / warmup_steps as f64);
    }
    if total_steps == warmup_steps {
        return Ok(peak_lr);
    }
    Ok(peak_lr * (total_steps - step) as f64 / (total_steps - warmup_steps) as f64)
}
