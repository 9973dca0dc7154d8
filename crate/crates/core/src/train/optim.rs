//! AdamW with decoupled weight decay.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use crate::vit::ModelParams;

use super::Gradients;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 2e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid AdamW hyperparameters {self:?}")))
        }
    }

    /// Per-step multiplicative shrink applied to every trainable parameter.
    pub fn decay_factor<T: Scalar>(&self) -> T {
        T::of(1.0 - self.lr * self.weight_decay)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamWState<T: Scalar = f32> {
    pub config: AdamWConfig,
    /// Number of completed steps.
    pub step: u64,
    pub first_moment: BTreeMap<String, Tensor<T>>,
    pub second_moment: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> AdamWState<T> {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            first_moment: BTreeMap::new(),
            second_moment: BTreeMap::new(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> AdamWState<U> {
        let cast = |m: &BTreeMap<String, Tensor<T>>| {
            m.iter().map(|(k, v)| (k.clone(), v.cast::<U>())).collect()
        };
        AdamWState {
            config: self.config,
            step: self.step,
            first_moment: cast(&self.first_moment),
            second_moment: cast(&self.second_moment),
        }
    }
}

/// One AdamW update of every trainable parameter.
///
/// `grads` must hold exactly one correctly shaped entry per trainable
/// parameter. The update is
/// `θ ← θ·(1 − lr·λ) − lr·m̂/(√v̂ + ε)`, with decay independent of the
/// gradient.
pub fn adamw_step<T: Scalar>(
    params: &mut ModelParams<T>,
    grads: &Gradients<T>,
    state: &mut AdamWState<T>,
) -> Result<()> {
    check_coverage(params, grads)?;
    let c = state.config;
    let t = state.step + 1;
    let bias1 = T::of(1.0 - c.beta1.powi(t as i32));
    let bias2 = T::of(1.0 - c.beta2.powi(t as i32));
    let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
    let (lr, eps) = (T::of(c.lr), T::of(c.eps));
    let decay = c.decay_factor::<T>();

    for (name, param) in params.iter_mut().filter(|(_, p)| p.trainable) {
        let g = &grads[name];
        let shape = param.tensor.shape().to_vec();
        let m = state
            .first_moment
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(&shape));
        let v = state
            .second_moment
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(&shape));
        if m.shape() != shape.as_slice() || v.shape() != shape.as_slice() {
            return Err(Error::Consistency(format!(
                "optimizer moments for `{name}` have the wrong shape"
            )));
        }
        let theta = param.tensor.data_mut();
        for (((th, &gv), mv), vv) in theta
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mv = b1 * *mv + (T::one() - b1) * gv;
            *vv = b2 * *vv + (T::one() - b2) * gv * gv;
            let m_hat = *mv / bias1;
            let v_hat = *vv / bias2;
            *th = *th * decay - lr * (m_hat / (v_hat.sqrt() + eps));
        }
        if !theta.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: "adamw_step" });
        }
    }
    state.step = t;
    Ok(())
}

fn check_coverage<T: Scalar>(params: &ModelParams<T>, grads: &Gradients<T>) -> Result<()> {
    for name in params.trainable_names() {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::Consistency(format!("missing gradient for `{name}`")))?;
        let p = params.tensor(name)?;
        if g.shape() != p.shape() {
            return Err(Error::Consistency(format!(
                "gradient for `{name}` has shape {:?}, parameter has {:?}",
                g.shape(),
                p.shape()
            )));
        }
    }
    for name in grads.keys() {
        match params.get(name) {
            Ok(p) if p.trainable => {}
            Ok(_) => {
                return Err(Error::Consistency(format!(
                    "gradient supplied for frozen parameter `{name}`"
                )))
            }
            Err(_) => {
                return Err(Error::Consistency(format!(
                    "gradient supplied for unknown parameter `{name}`"
                )))
            }
        }
    }
    Ok(())
}
