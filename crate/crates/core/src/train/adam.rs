use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Group, Model};
use crate::tensor::Tensor;
use crate::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moments for one list of parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<S: Scalar = f64> {
    pub m: Vec<Tensor<S>>,
    pub v: Vec<Tensor<S>>,
    pub t: u64,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(shapes: impl IntoIterator<Item = Vec<usize>>) -> Self {
        let (m, v) = shapes
            .into_iter()
            .map(|s| (Tensor::zeros(s.clone()), Tensor::zeros(s)))
            .unzip();
        AdamState { m, v, t: 0 }
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step<S: Scalar>(
    params: &mut [&mut Tensor<S>],
    grads: &[Tensor<S>],
    state: &mut AdamState<S>,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::dim(
            "adam_step",
            format!(
                "{} params, {} grads, {} moments",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        ));
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (S::of(cfg.beta1), S::of(cfg.beta2));
    let c1 = S::one() - b1.powi(t);
    let c2 = S::one() - b2.powi(t);
    let (lr, eps) = (S::of(lr), S::of(cfg.eps));
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        if p.shape() != g.shape() || m.shape() != g.shape() {
            return Err(Error::dim(
                "adam_step",
                format!("param {:?} vs grad {:?}", p.shape(), g.shape()),
            ));
        }
        for (((w, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mi = b1 * *mi + (S::one() - b1) * gi;
            *vi = b2 * *vi + (S::one() - b2) * gi * gi;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Adam over a whole model. Groups marked non-trainable are never touched.
#[derive(Clone, Debug)]
pub struct Adam<S: Scalar = f64> {
    pub lr: f64,
    pub cfg: AdamConfig,
    states: [AdamState<S>; 3],
}

impl<S: Scalar> Adam<S> {
    pub fn new(model: &Model<S>, lr: f64, cfg: AdamConfig) -> Self {
        Adam {
            lr,
            cfg,
            states: Group::ALL.map(|g| {
                AdamState::new(
                    model
                        .group(g)
                        .params
                        .iter()
                        .map(|p| p.value.shape().to_vec()),
                )
            }),
        }
    }

    /// `grads[g]` lists gradients for group `g` in parameter order; entries for
    /// frozen groups are ignored and may be empty.
    pub fn step(&mut self, model: &mut Model<S>, grads: &[Vec<Tensor<S>>; 3]) -> Result<()> {
        for g in Group::ALL {
            let group = model.group_mut(g);
            if !group.trainable || group.params.is_empty() {
                continue;
            }
            let mut params: Vec<&mut Tensor<S>> =
                group.params.iter_mut().map(|p| &mut p.value).collect();
            adam_step(
                &mut params,
                &grads[g as usize],
                &mut self.states[g as usize],
                self.lr,
                &self.cfg,
            )?;
        }
        Ok(())
    }
}
