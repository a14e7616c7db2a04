//! Diagonal-Gaussian latent head.
//!
//! The head emits `mu` and a raw variance output `r`; the variance is
//! `σ² = sigmoid(r)`, computed as `ln σ² = ln_sigmoid(r)`, so `σ² ∈ (0, 1)`.
//! The bound applies to the variance; the standard deviation is `exp(½ ln σ²)`.
//! The prior is a fixed `N(0, I)`.

use crate::error::{Error, Result};
use crate::nn::{Group, HeadKind, HeadOutput, Model};
use crate::rng::{self, stream};
use crate::tensor::{self, Tape, Tensor, Var};
use crate::Scalar;

/// Per-example diagonal Gaussian `q(z|x)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPosterior<S: Scalar = f64> {
    mu: Tensor<S>,
    sigma: Tensor<S>,
}

impl<S: Scalar> GaussianPosterior<S> {
    /// Checks `0 < σ ≤ 1` elementwise and matching `[batch × Z]` shapes.
    pub fn new(mu: Tensor<S>, sigma: Tensor<S>) -> Result<Self> {
        mu.dims2("posterior")?;
        if mu.shape() != sigma.shape() {
            return Err(Error::dim(
                "posterior",
                format!("mu {:?} vs sigma {:?}", mu.shape(), sigma.shape()),
            ));
        }
        if let Some(bad) = sigma.data().iter().find(|&&s| !(s > S::zero() && s <= S::one())) {
            return Err(Error::Contract(format!("sigma {bad} outside (0, 1]")));
        }
        Ok(GaussianPosterior { mu, sigma })
    }

    /// Builds the posterior from the mean and the raw variance output.
    pub fn from_raw(mu: Tensor<S>, raw: &Tensor<S>) -> Result<Self> {
        let sigma = raw.map(|r| (tensor::log_sigmoid(r) * S::of(0.5)).exp());
        Self::new(mu, sigma)
    }

    pub fn mu(&self) -> &Tensor<S> {
        &self.mu
    }

    pub fn sigma(&self) -> &Tensor<S> {
        &self.sigma
    }

    pub fn batch(&self) -> usize {
        self.mu.shape()[0]
    }

    pub fn z_dim(&self) -> usize {
        self.mu.shape()[1]
    }
}

/// A reparameterized draw `z = mu + sigma ⊙ eps`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentSample<S: Scalar = f64> {
    pub z: Tensor<S>,
    pub eps: Tensor<S>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PredictConfig {
    /// MC samples at prediction time.
    pub m: usize,
    /// MC samples per example in the training loss.
    pub train_m: usize,
    pub seed: u64,
}

impl Default for PredictConfig {
    fn default() -> Self {
        PredictConfig {
            m: 1,
            train_m: 1,
            seed: 0,
        }
    }
}

impl PredictConfig {
    pub fn with_m(m: usize, seed: u64) -> Self {
        PredictConfig {
            m,
            seed,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.train_m == 0 {
            return Err(Error::Config("MC sample counts must be at least 1".into()));
        }
        Ok(())
    }
}

/// Posterior of a gaussian-head model for precomputed features.
pub fn posterior_params<S: Scalar>(model: &Model<S>, features: &Tensor<S>) -> Result<GaussianPosterior<S>> {
    let tape = Tape::new();
    let bound = model.bind(&tape);
    let f = tape.leaf(features.clone());
    match model.forward_head(&tape, &bound, f)? {
        HeadOutput::Gaussian { mu, sigma, .. } => {
            GaussianPosterior::new(tape.value(mu).clone(), tape.value(sigma).clone())
        }
        HeadOutput::Logits(_) => Err(Error::Contract("model does not have a gaussian head".into())),
    }
}

/// `KL(q ‖ N(0, I))` per example: `½ Σᵢ (μᵢ² + σᵢ² − 1 − ln σᵢ²)`.
pub fn kl_standard_normal<S: Scalar>(q: &GaussianPosterior<S>) -> Result<Vec<S>> {
    let z = q.z_dim();
    let half = S::of(0.5);
    Ok(q.mu
        .data()
        .chunks(z)
        .zip(q.sigma.data().chunks(z))
        .map(|(mu, sigma)| {
            mu.iter()
                .zip(sigma)
                .map(|(&m, &s)| {
                    let var = s * s;
                    m * m + var - S::one() - var.ln()
                })
                .sum::<S>()
                * half
        })
        .collect())
}

/// Differentiable per-example KL from `mu` and `ln σ²`, shape `[batch]`.
pub fn kl_standard_normal_var<S: Scalar>(tape: &Tape<S>, mu: Var, log_var: Var) -> Result<Var> {
    let var = tape.exp(log_var)?;
    let t = tape.add(tape.square(mu)?, var)?;
    let t = tape.sub(t, log_var)?;
    let t = tape.add_scalar(t, -S::one())?;
    tape.scale(tape.sum_rows(t)?, S::of(0.5))
}

/// `z = mu + sigma ⊙ eps` for a given noise tensor.
pub fn reparam_with_eps<S: Scalar>(q: &GaussianPosterior<S>, eps: Tensor<S>) -> Result<LatentSample<S>> {
    let scaled = q.sigma.zip_map(&eps, "reparam", |s, e| s * e)?;
    let z = q.mu.zip_map(&scaled, "reparam", |m, se| m + se)?;
    Ok(LatentSample { z, eps })
}

pub fn reparam_sample<S: Scalar>(q: &GaussianPosterior<S>, rng: &mut rng::Rng) -> Result<LatentSample<S>> {
    let eps = Tensor::from_f64(q.mu.shape().to_vec(), &rng::standard_normals(rng, q.mu.numel()))?;
    reparam_with_eps(q, eps)
}

/// Differentiable `z = mu + sigma ⊙ eps` on a tape; `eps` is a constant.
pub fn reparam_var<S: Scalar>(tape: &Tape<S>, mu: Var, sigma: Var, eps: Tensor<S>) -> Result<Var> {
    let e = tape.leaf(eps);
    tape.add(mu, tape.mul(sigma, e)?)
}

/// Standard-normal noise for example `index`, MC sample `j`. Independent of
/// batch composition and evaluation order.
pub fn prediction_eps(seed: u64, index: usize, j: usize, z_dim: usize) -> Vec<f64> {
    let mut r = rng::rng_from(seed, &[stream::PREDICT_EPS, index as u64, j as u64]);
    rng::standard_normals(&mut r, z_dim)
}

/// Mean of `softmax(nu(z_j))` over explicit noise draws `eps[j]`.
pub fn predictive_with_eps<S: Scalar>(
    model: &Model<S>,
    q: &GaussianPosterior<S>,
    eps: &[Tensor<S>],
) -> Result<Tensor<S>> {
    if eps.is_empty() {
        return Err(Error::Contract("predictive needs at least one sample".into()));
    }
    let nu = &model.group(Group::Nu).params;
    let mut acc: Option<Tensor<S>> = None;
    for e in eps {
        let z = reparam_with_eps(q, e.clone())?.z;
        let probs = softmax_logits(&z, &nu[0].value, &nu[1].value)?;
        match &mut acc {
            Some(a) => a.add_assign(&probs),
            None => acc = Some(probs),
        }
    }
    let inv = S::one() / S::of(eps.len() as f64);
    Ok(acc.expect("non-empty").map(|p| p * inv))
}

fn softmax_logits<S: Scalar>(z: &Tensor<S>, w: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let mut logits = tensor::matmul(z, w)?;
    let k = b.numel();
    for row in logits.data_mut().chunks_mut(k) {
        for (x, &bv) in row.iter_mut().zip(b.data()) {
            *x = *x + bv;
        }
    }
    tensor::softmax_rows(&logits)
}

/// MC predictive `(1/m) Σⱼ softmax(nu(zⱼ))` for precomputed features whose
/// first row is example `first_index` of the evaluated set.
pub fn predictive_mc_from_features<S: Scalar>(
    model: &Model<S>,
    features: &Tensor<S>,
    cfg: &PredictConfig,
    first_index: usize,
) -> Result<Tensor<S>> {
    cfg.validate()?;
    let q = posterior_params(model, features)?;
    let (batch, z_dim) = (q.batch(), q.z_dim());
    let eps = (0..cfg.m)
        .map(|j| {
            let data: Vec<f64> = (0..batch)
                .flat_map(|i| prediction_eps(cfg.seed, first_index + i, j, z_dim))
                .collect();
            Tensor::from_f64(vec![batch, z_dim], &data)
        })
        .collect::<Result<Vec<_>>>()?;
    predictive_with_eps(model, &q, &eps)
}

pub fn predictive_mc<S: Scalar>(model: &Model<S>, x: &Tensor<S>, cfg: &PredictConfig) -> Result<Tensor<S>> {
    predictive_mc_from_features(model, &model.features(x)?, cfg, 0)
}

/// Predictive class probabilities for any head: softmax of the logits for
/// deterministic heads (`cfg.m` is ignored), the MC predictive for gaussian heads.
pub fn predict_probs_from_features<S: Scalar>(
    model: &Model<S>,
    features: &Tensor<S>,
    cfg: &PredictConfig,
    first_index: usize,
) -> Result<Tensor<S>> {
    match model.spec().head_kind {
        HeadKind::Gaussian => predictive_mc_from_features(model, features, cfg, first_index),
        _ => tensor::softmax_rows(&model.logits_from_features(features)?),
    }
}
