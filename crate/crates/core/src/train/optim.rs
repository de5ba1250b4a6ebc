use crate::error::{Error, Result};
use crate::net::ParamStore;
use crate::tensor::{Scalar, Tensor};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// AdamW moments, kept in f64 regardless of the parameter type.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    /// Completed steps.
    pub t: u64,
}

impl OptimState {
    pub fn new<T: Scalar>(params: &ParamStore<T>) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.value.numel()]).collect();
        Self {
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }
}

/// One decoupled-weight-decay Adam update:
///
/// `theta <- theta - lr * m_hat / (sqrt(v_hat) + eps) - lr * wd * theta`,
///
/// with the decay term only on parameters flagged for decay.
pub fn adamw_step<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &[Tensor<T>],
    state: &mut OptimState,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Shape(format!(
            "{} parameters, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for (i, g) in grads.iter().enumerate() {
        let p = params.get(i);
        if g.shape() != p.value.shape() {
            return Err(Error::Shape(format!(
                "gradient of {}: {:?} vs {:?}",
                p.name,
                g.shape(),
                p.value.shape()
            )));
        }
        let decay = if p.decay { weight_decay } else { 0.0 };
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let updated: Vec<T> = p
            .value
            .data()
            .iter()
            .zip(g.data())
            .enumerate()
            .map(|(j, (&theta, &g))| {
                let g = g.to_f64_lossy();
                let theta = theta.to_f64_lossy();
                m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * g;
                v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * g * g;
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                T::of(theta - lr * m_hat / (v_hat.sqrt() + ADAM_EPS) - lr * decay * theta)
            })
            .collect();
        let shape = p.value.shape().to_vec();
        params.set(i, Tensor::new(shape, updated)?)?;
    }
    Ok(())
}
