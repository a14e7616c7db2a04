//! Losses, the training loop, and the Stage-1 / two-stage / end-to-end
//! procedures.
//!
//! All procedures train with Adam on seeded minibatches and early-stop on the
//! validation loss, returning the parameters of the best validation epoch.
//! Stage 2 freezes beta, so it trains the head on features computed once.

mod adam;
mod temperature;

pub use adam::{adam_step, Adam, AdamConfig, AdamState};
pub use temperature::{
    fit_temperature, nll_at_temperature, TemperatureScale, LOG_T_TOL, T_MAX, T_MIN,
};

use serde::{Deserialize, Serialize};

use crate::data::{minibatches, Dataset};
use crate::error::{Error, Result};
use crate::nn::{Bound, Group, HeadKind, HeadOutput, Model, ModelSpec, StageTag};
use crate::rng::{self, stream};
use crate::tensor::{Tape, Tensor, Var};
use crate::variational::{kl_standard_normal_var, reparam_var};
use crate::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    Ce,
    Elbo,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "defaults::learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::max_epochs")]
    pub max_epochs: usize,
    #[serde(default = "defaults::loss_mode")]
    pub loss_mode: LossMode,
    /// KL multiplier for the ELBO; `None` means `1 / Z`.
    #[serde(default)]
    pub kl_scale: Option<f64>,
    #[serde(default = "defaults::patience")]
    pub patience: usize,
    /// MC samples per example in the ELBO.
    #[serde(default = "defaults::train_m")]
    pub train_m: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub adam: AdamConfig,
}

mod defaults {
    use super::LossMode;

    pub fn learning_rate() -> f64 {
        1e-4
    }
    pub fn batch_size() -> usize {
        128
    }
    pub fn max_epochs() -> usize {
        40
    }
    pub fn loss_mode() -> LossMode {
        LossMode::Ce
    }
    pub fn patience() -> usize {
        10
    }
    pub fn train_m() -> usize {
        1
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: defaults::learning_rate(),
            batch_size: defaults::batch_size(),
            max_epochs: defaults::max_epochs(),
            loss_mode: defaults::loss_mode(),
            kl_scale: None,
            patience: defaults::patience(),
            train_m: defaults::train_m(),
            seed: 0,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate {} must be positive", self.learning_rate)));
        }
        if self.patience < 1 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if self.batch_size < 1 || self.max_epochs < 1 || self.train_m < 1 {
            return Err(Error::Config("batch_size, max_epochs and train_m must be at least 1".into()));
        }
        if let Some(k) = self.kl_scale {
            if !(k > 0.0) {
                return Err(Error::Config(format!("kl_scale {k} must be positive")));
            }
        }
        Ok(())
    }

    pub fn kl_scale_for(&self, z_dim: usize) -> f64 {
        self.kl_scale.unwrap_or(1.0 / z_dim as f64)
    }

    pub fn with_mode(&self, loss_mode: LossMode) -> Self {
        TrainConfig {
            loss_mode,
            ..self.clone()
        }
    }
}

pub fn loss_mode_for(head: HeadKind) -> LossMode {
    match head {
        HeadKind::Gaussian => LossMode::Elbo,
        _ => LossMode::Ce,
    }
}

fn check_labels(labels: &[usize], k: usize) -> Result<()> {
    match labels.iter().find(|&&y| y >= k) {
        Some(&bad) => Err(Error::Contract(format!("label {bad} out of range for {k} classes"))),
        None => Ok(()),
    }
}

/// Mean `−log_softmax(logits)[label]` on a tape.
pub fn cross_entropy_var<S: Scalar>(tape: &Tape<S>, logits: Var, labels: &[usize]) -> Result<Var> {
    let (_, k) = tape.value(logits).dims2("cross_entropy")?;
    check_labels(labels, k)?;
    let picked = tape.gather(tape.log_softmax(logits)?, labels)?;
    tape.scale(tape.mean(picked)?, -S::one())
}

pub fn cross_entropy_loss<S: Scalar>(logits: &Tensor<S>, labels: &[usize]) -> Result<S> {
    let tape = Tape::new();
    let l = tape.leaf(logits.clone());
    let loss = cross_entropy_var(&tape, l, labels)?;
    let v = tape.value(loss).item()?;
    Ok(v)
}

/// ELBO pieces for one batch; `loss = ce + kl_scale · kl`.
#[derive(Clone, Copy, Debug)]
pub struct ElboTerms {
    pub loss: Var,
    /// CE averaged over MC samples.
    pub ce: Var,
    /// Batch-mean KL (unscaled).
    pub kl: Var,
}

/// Negative KL-rescaled ELBO for a gaussian head given head-input features and
/// explicit noise draws (one `[batch × Z]` tensor per MC sample).
pub fn elbo_loss_var<S: Scalar>(
    tape: &Tape<S>,
    model: &Model<S>,
    bound: &Bound,
    features: Var,
    labels: &[usize],
    kl_scale: f64,
    eps: &[Tensor<S>],
) -> Result<ElboTerms> {
    if eps.is_empty() {
        return Err(Error::Contract("ELBO needs at least one MC sample".into()));
    }
    let HeadOutput::Gaussian { mu, log_var, sigma } = model.forward_head(tape, bound, features)? else {
        return Err(Error::Contract("ELBO needs a gaussian head".into()));
    };
    let mut ce_sum: Option<Var> = None;
    for e in eps {
        let z = reparam_var(tape, mu, sigma, e.clone())?;
        let ce = cross_entropy_var(tape, model.forward_logits(tape, bound, z)?, labels)?;
        ce_sum = Some(match ce_sum {
            Some(acc) => tape.add(acc, ce)?,
            None => ce,
        });
    }
    let ce = tape.scale(ce_sum.expect("non-empty"), S::one() / S::of(eps.len() as f64))?;
    let kl = tape.mean(kl_standard_normal_var(tape, mu, log_var)?)?;
    let loss = tape.add(ce, tape.scale(kl, S::of(kl_scale))?)?;
    Ok(ElboTerms { loss, ce, kl })
}

/// Scalar ELBO loss for raw inputs `x` with fixed noise.
pub fn elbo_loss<S: Scalar>(
    model: &Model<S>,
    x: &Tensor<S>,
    labels: &[usize],
    kl_scale: f64,
    eps: &[Tensor<S>],
) -> Result<S> {
    let tape = Tape::new();
    let bound = model.bind(&tape);
    let xv = tape.leaf(x.clone());
    let f = model.forward_features(&tape, &bound, xv)?;
    let terms = elbo_loss_var(&tape, model, &bound, f, labels, kl_scale, eps)?;
    let v = tape.value(terms.loss).item()?;
    Ok(v)
}

fn normal_eps<S: Scalar>(r: &mut rng::Rng, batch: usize, z_dim: usize, m: usize) -> Result<Vec<Tensor<S>>> {
    (0..m)
        .map(|_| Tensor::from_f64(vec![batch, z_dim], &rng::standard_normals(r, batch * z_dim)))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug)]
pub struct EarlyStopState<S: Scalar = f64> {
    pub best_val_loss: f64,
    pub best_epoch: usize,
    pub best: Option<Model<S>>,
    pub epochs_since_improve: usize,
}

impl<S: Scalar> Default for EarlyStopState<S> {
    fn default() -> Self {
        EarlyStopState {
            best_val_loss: f64::INFINITY,
            best_epoch: 0,
            best: None,
            epochs_since_improve: 0,
        }
    }
}

impl<S: Scalar> EarlyStopState<S> {
    /// Records an epoch; returns true when training should stop.
    pub fn update(&mut self, epoch: usize, val_loss: f64, model: &Model<S>, patience: usize) -> bool {
        if val_loss < self.best_val_loss {
            self.best_val_loss = val_loss;
            self.best_epoch = epoch;
            self.best = Some(model.clone());
            self.epochs_since_improve = 0;
        } else {
            self.epochs_since_improve += 1;
        }
        self.epochs_since_improve >= patience
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<S: Scalar = f64> {
    /// Parameters from the best validation epoch.
    pub model: Model<S>,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

/// What the training loop feeds the model: raw inputs through the whole
/// network, or precomputed features through the head only.
struct Feed<S: Scalar> {
    x: Tensor<S>,
    labels: Vec<usize>,
    head_only: bool,
}

impl<S: Scalar> Feed<S> {
    fn raw(ds: &Dataset) -> Self {
        Feed {
            x: ds.inputs(),
            labels: ds.labels().to_vec(),
            head_only: false,
        }
    }

    fn features(model: &Model<S>, ds: &Dataset) -> Result<Self> {
        const CHUNK: usize = 1024;
        let idx: Vec<usize> = (0..ds.len()).collect();
        let mut data = Vec::new();
        let mut width = 0;
        for chunk in idx.chunks(CHUNK) {
            let f = model.features(&ds.batch::<S>(chunk))?;
            width = f.shape()[1];
            data.extend_from_slice(f.data());
        }
        Ok(Feed {
            x: Tensor::new(vec![ds.len(), width], data)?,
            labels: ds.labels().to_vec(),
            head_only: true,
        })
    }

    fn len(&self) -> usize {
        self.labels.len()
    }
}

/// Loss of one batch on `tape`.
fn batch_loss<S: Scalar>(
    tape: &Tape<S>,
    model: &Model<S>,
    bound: &Bound,
    x: Tensor<S>,
    labels: &[usize],
    head_only: bool,
    cfg: &TrainConfig,
    eps_rng: &mut rng::Rng,
) -> Result<Var> {
    let xv = tape.leaf(x);
    let features = if head_only {
        xv
    } else {
        model.forward_features(tape, bound, xv)?
    };
    match cfg.loss_mode {
        LossMode::Ce => match model.forward_head(tape, bound, features)? {
            HeadOutput::Logits(l) => cross_entropy_var(tape, l, labels),
            HeadOutput::Gaussian { .. } => Err(Error::Contract(
                "cross-entropy training needs a deterministic head".into(),
            )),
        },
        LossMode::Elbo => {
            let z = model.spec().z_dim;
            let eps = normal_eps(eps_rng, labels.len(), z, cfg.train_m)?;
            Ok(elbo_loss_var(tape, model, bound, features, labels, cfg.kl_scale_for(z), &eps)?.loss)
        }
    }
}

fn mean_loss<S: Scalar>(
    model: &Model<S>,
    feed: &Feed<S>,
    cfg: &TrainConfig,
    eps_rng: &mut rng::Rng,
) -> Result<f64> {
    const CHUNK: usize = 1024;
    let idx: Vec<usize> = (0..feed.len()).collect();
    let mut total = 0.0;
    for chunk in idx.chunks(CHUNK) {
        let tape = Tape::new();
        let bound = bind_for(model, &tape, feed.head_only);
        let labels: Vec<usize> = chunk.iter().map(|&i| feed.labels[i]).collect();
        let loss = batch_loss(&tape, model, &bound, feed.x.select_rows(chunk), &labels, feed.head_only, cfg, eps_rng)?;
        total += tape.value(loss).item()?.to_f64_lossless() * chunk.len() as f64;
    }
    Ok(total / feed.len() as f64)
}

fn bind_for<S: Scalar>(model: &Model<S>, tape: &Tape<S>, head_only: bool) -> Bound {
    if head_only {
        model.bind_groups(tape, &[Group::Theta, Group::Nu])
    } else {
        model.bind(tape)
    }
}

/// Minibatch Adam with early stopping on validation loss.
fn fit<S: Scalar>(mut model: Model<S>, train: &Feed<S>, val: &Feed<S>, cfg: &TrainConfig) -> Result<TrainOutcome<S>> {
    cfg.validate()?;
    if train.len() == 0 || val.len() == 0 {
        return Err(Error::Data("training and validation sets must be non-empty".into()));
    }
    let mut opt = Adam::new(&model, cfg.learning_rate, cfg.adam);
    let mut stop = EarlyStopState::default();
    let mut history = Vec::new();
    for epoch in 1..=cfg.max_epochs {
        let batches = minibatches(
            train.len(),
            cfg.batch_size,
            rng::derive_seed(cfg.seed, &[stream::SHUFFLE, epoch as u64]),
        )?;
        let mut eps_rng = rng::rng_from(cfg.seed, &[stream::TRAIN_EPS, epoch as u64]);
        let mut train_total = 0.0;
        for batch in &batches {
            let tape = Tape::new();
            let bound = bind_for(&model, &tape, train.head_only);
            let labels: Vec<usize> = batch.iter().map(|&i| train.labels[i]).collect();
            let loss = batch_loss(
                &tape,
                &model,
                &bound,
                train.x.select_rows(batch),
                &labels,
                train.head_only,
                cfg,
                &mut eps_rng,
            )
            .map_err(|e| annotate_epoch(e, epoch))?;
            train_total += tape.value(loss).item()?.to_f64_lossless() * batch.len() as f64;
            let grads = tape.backward(loss)?;
            let per_group = Group::ALL.map(|g| {
                bound
                    .group(g)
                    .iter()
                    .zip(&model.group(g).params)
                    .map(|(&v, p)| grads.get_or_zeros(v, p.value.shape()))
                    .collect::<Vec<_>>()
            });
            opt.step(&mut model, &per_group)?;
        }
        let mut val_rng = rng::rng_from(cfg.seed, &[stream::VAL_EPS]);
        let val_loss = mean_loss(&model, val, cfg, &mut val_rng).map_err(|e| annotate_epoch(e, epoch))?;
        let train_loss = train_total / train.len() as f64;
        if !train_loss.is_finite() || !val_loss.is_finite() {
            return Err(Error::NonFinite(format!("loss at epoch {epoch}")));
        }
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
        });
        if stop.update(epoch, val_loss, &model, cfg.patience) {
            break;
        }
    }
    Ok(TrainOutcome {
        model: stop.best.expect("at least one epoch ran"),
        history,
        best_epoch: stop.best_epoch,
        best_val_loss: stop.best_val_loss,
    })
}

fn annotate_epoch(e: Error, epoch: usize) -> Error {
    match e {
        Error::NonFinite(what) => Error::NonFinite(format!("{what} at epoch {epoch}")),
        other => other,
    }
}

fn require_mode(cfg: &TrainConfig, head: HeadKind) -> Result<()> {
    let expected = loss_mode_for(head);
    if cfg.loss_mode != expected {
        return Err(Error::Config(format!(
            "loss_mode {:?} does not match a {:?} head (expected {:?})",
            cfg.loss_mode, head, expected
        )));
    }
    Ok(())
}

fn check_data(spec: &ModelSpec, train: &Dataset, val: &Dataset) -> Result<()> {
    for ds in [train, val] {
        if ds.is_empty() {
            return Err(Error::Data(format!("{} is empty", ds.name())));
        }
        if ds.num_classes() != spec.num_classes {
            return Err(Error::Data(format!(
                "{} has {} classes, model expects {}",
                ds.name(),
                ds.num_classes(),
                spec.num_classes
            )));
        }
        if ds.sample_shape() != spec.extractor.input_shape().as_slice() {
            return Err(Error::Data(format!(
                "{} samples have shape {:?}, model expects {:?}",
                ds.name(),
                ds.sample_shape(),
                spec.extractor.input_shape()
            )));
        }
    }
    Ok(())
}

/// Stage 1: the whole network trained with CE from a fresh initialization.
pub fn run_stage1<S: Scalar>(
    spec: &ModelSpec,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<S>> {
    if spec.head_kind != HeadKind::Stage1 {
        return Err(Error::Config("stage 1 trains a stage1-head model".into()));
    }
    require_mode(cfg, HeadKind::Stage1)?;
    check_data(spec, train, val)?;
    let model = Model::build(spec.clone(), cfg.seed)?;
    let mut out = fit(model, &Feed::raw(train), &Feed::raw(val), cfg)?;
    out.model.stage = StageTag::Stage1;
    Ok(out)
}

/// Stage 2: freeze beta of a Stage-1 model, reinitialize theta and nu with
/// `head_kind` / `z_dim` from `cfg.seed`, and train the head on the same data.
pub fn run_stage2<S: Scalar>(
    stage1: &Model<S>,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    head_kind: HeadKind,
    z_dim: usize,
) -> Result<TrainOutcome<S>> {
    if stage1.stage != StageTag::Stage1 {
        return Err(Error::Contract(format!(
            "stage 2 starts from a stage1 model, got {}",
            stage1.stage
        )));
    }
    require_mode(cfg, head_kind)?;
    check_data(stage1.spec(), train, val)?;
    let model = stage1.reinit_head(head_kind, z_dim, cfg.seed)?;
    let train_feed = Feed::features(&model, train)?;
    let val_feed = Feed::features(&model, val)?;
    fit(model, &train_feed, &val_feed, cfg)
}

/// The two-stage architecture trained in one stage from scratch.
pub fn run_end_to_end<S: Scalar>(
    spec: &ModelSpec,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    head_kind: HeadKind,
    z_dim: usize,
) -> Result<TrainOutcome<S>> {
    if head_kind == HeadKind::Stage1 {
        return Err(Error::Config("end-to-end runs use a deterministic or gaussian head".into()));
    }
    require_mode(cfg, head_kind)?;
    let spec = spec.with_head(head_kind, z_dim);
    check_data(&spec, train, val)?;
    let model = Model::build(spec, cfg.seed)?;
    let mut out = fit(model, &Feed::raw(train), &Feed::raw(val), cfg)?;
    out.model.stage = match head_kind {
        HeadKind::Gaussian => StageTag::VarE2e,
        _ => StageTag::E2e,
    };
    Ok(out)
}

#[cfg(test)]
mod tests;
