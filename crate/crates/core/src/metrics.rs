//! Calibration, fit and OOD-detection metrics.
//!
//! Confidence bins are right-closed: bin `k` (1-based) holds
//! `(k−1)/10 < c ≤ k/10`, with `c = 0` in bin 1. ECE and MCE are reported in
//! percent. Argmax ties go to the lowest class index.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::Model;
use crate::variational::{predict_probs_from_features, PredictConfig};
use crate::Scalar;

pub const NUM_BINS: usize = 10;
pub const NLL_CLAMP: f64 = 1e-12;
pub const ENTROPY_BINS: usize = 20;

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub probs: Vec<f64>,
    pub label: usize,
    pub confidence: f64,
    pub predicted: usize,
    pub correct: bool,
}

impl Prediction {
    pub fn new(probs: Vec<f64>, label: usize) -> Self {
        let predicted = argmax(&probs);
        Prediction {
            confidence: probs[predicted],
            correct: predicted == label,
            predicted,
            label,
            probs,
        }
    }

    /// A prediction known only through its confidence and correctness.
    pub fn from_confidence(confidence: f64, correct: bool) -> Self {
        let probs = vec![confidence, 1.0 - confidence];
        Prediction {
            probs,
            label: if correct { 0 } else { 1 },
            confidence,
            predicted: 0,
            correct,
        }
    }
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    pub mean_confidence: Option<f64>,
    pub accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBins {
    pub bins: Vec<Bin>,
}

impl ReliabilityBins {
    pub fn total(&self) -> usize {
        self.bins.iter().map(|b| b.count).sum()
    }
}

/// 0-based index of the right-closed bin containing `c`.
pub fn bin_index(c: f64) -> usize {
    let mut k = ((c * NUM_BINS as f64).ceil() as isize).clamp(1, NUM_BINS as isize) as usize;
    // settle rounding of c·10 against the exact edges k/10
    while k > 1 && c <= (k - 1) as f64 / NUM_BINS as f64 {
        k -= 1;
    }
    while k < NUM_BINS && c > k as f64 / NUM_BINS as f64 {
        k += 1;
    }
    k - 1
}

/// `(ECE %, MCE %, bins)`.
pub fn ece_mce(preds: &[Prediction]) -> Result<(f64, f64, ReliabilityBins)> {
    if preds.is_empty() {
        return Err(Error::Contract("ECE of an empty prediction list".into()));
    }
    let mut count = [0usize; NUM_BINS];
    let mut conf_sum = [0.0f64; NUM_BINS];
    let mut correct = [0usize; NUM_BINS];
    for p in preds {
        let b = bin_index(p.confidence);
        count[b] += 1;
        conf_sum[b] += p.confidence;
        correct[b] += p.correct as usize;
    }
    let n = preds.len() as f64;
    let (mut ece, mut mce) = (0.0f64, 0.0f64);
    let mut bins = Vec::with_capacity(NUM_BINS);
    for b in 0..NUM_BINS {
        let (mean_confidence, accuracy) = if count[b] > 0 {
            let conf = conf_sum[b] / count[b] as f64;
            let acc = correct[b] as f64 / count[b] as f64;
            let gap = (acc - conf).abs();
            ece += count[b] as f64 / n * gap;
            mce = mce.max(gap);
            (Some(conf), Some(acc))
        } else {
            (None, None)
        };
        bins.push(Bin {
            lower: b as f64 / NUM_BINS as f64,
            upper: (b + 1) as f64 / NUM_BINS as f64,
            count: count[b],
            mean_confidence,
            accuracy,
        });
    }
    // a weighted mean never exceeds its max; clamp away rounding
    let ece = ece.min(mce);
    Ok((ece * 100.0, mce * 100.0, ReliabilityBins { bins }))
}

/// Mean `−ln p(label)` in nats, with `p` clamped below at 1e-12.
pub fn nll(probs: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if probs.len() != labels.len() || probs.is_empty() {
        return Err(Error::dim("nll", format!("{} rows, {} labels", probs.len(), labels.len())));
    }
    let total: f64 = probs
        .iter()
        .zip(labels)
        .map(|(p, &y)| -p[y].max(NLL_CLAMP).ln())
        .sum();
    Ok(total / probs.len() as f64)
}

/// `−Σ p ln p` with `0 ln 0 = 0`.
pub fn predictive_entropy(probs: &[f64]) -> f64 {
    -probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum::<f64>()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lower: f64,
    pub upper: f64,
    pub counts: Vec<usize>,
}

impl Histogram {
    /// Equal-width histogram over `[lower, upper]`; out-of-range values go to
    /// the end bins.
    pub fn build(values: &[f64], lower: f64, upper: f64, bins: usize) -> Self {
        let mut counts = vec![0; bins];
        let width = (upper - lower) / bins as f64;
        for &v in values {
            let b = ((v - lower) / width).floor();
            let b = if b.is_nan() { 0.0 } else { b.clamp(0.0, (bins - 1) as f64) };
            counts[b as usize] += 1;
        }
        Histogram {
            lower,
            upper,
            counts,
        }
    }

    pub fn mass(&self) -> usize {
        self.counts.iter().sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    /// Percent.
    pub accuracy: f64,
    /// Percent.
    pub ece: f64,
    /// Percent.
    pub mce: f64,
    /// Nats.
    pub nll: f64,
    pub bins: ReliabilityBins,
    pub entropy_histogram: Histogram,
    #[serde(skip)]
    pub entropies: Vec<f64>,
    #[serde(skip)]
    pub confidences: Vec<f64>,
}

impl EvalReport {
    pub fn from_probs(probs: &[Vec<f64>], labels: &[usize]) -> Result<Self> {
        let preds: Vec<Prediction> = probs
            .iter()
            .zip(labels)
            .map(|(p, &y)| Prediction::new(p.clone(), y))
            .collect();
        let (ece, mce, bins) = ece_mce(&preds)?;
        let k = probs[0].len();
        let entropies: Vec<f64> = probs.iter().map(|p| predictive_entropy(p)).collect();
        let correct = preds.iter().filter(|p| p.correct).count();
        Ok(EvalReport {
            n: preds.len(),
            accuracy: 100.0 * correct as f64 / preds.len() as f64,
            ece,
            mce,
            nll: nll(probs, labels)?,
            bins,
            entropy_histogram: Histogram::build(&entropies, 0.0, (k as f64).ln(), ENTROPY_BINS),
            entropies,
            confidences: preds.iter().map(|p| p.confidence).collect(),
        })
    }
}

/// Score used to separate in-distribution from OOD inputs; higher means
/// more in-distribution.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OodScore {
    #[default]
    MaxProb,
    NegEntropy,
}

impl OodScore {
    pub fn score(self, probs: &[f64]) -> f64 {
        match self {
            OodScore::MaxProb => probs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            OodScore::NegEntropy => -predictive_entropy(probs),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OodReport {
    pub auroc: f64,
    pub fpr95: f64,
    pub score: OodScore,
}

impl OodReport {
    pub fn from_probs(in_probs: &[Vec<f64>], out_probs: &[Vec<f64>], score: OodScore) -> Result<Self> {
        let ins: Vec<f64> = in_probs.iter().map(|p| score.score(p)).collect();
        let outs: Vec<f64> = out_probs.iter().map(|p| score.score(p)).collect();
        Ok(OodReport {
            auroc: auroc(&ins, &outs)?,
            fpr95: fpr_at_95_tpr(&ins, &outs)?,
            score,
        })
    }
}

fn check_scores(in_scores: &[f64], out_scores: &[f64]) -> Result<()> {
    if in_scores.is_empty() || out_scores.is_empty() {
        return Err(Error::Contract("OOD metrics need non-empty score lists".into()));
    }
    if in_scores.iter().chain(out_scores).any(|s| s.is_nan()) {
        return Err(Error::Contract("NaN OOD score".into()));
    }
    Ok(())
}

/// `P(in > out) + ½ P(in = out)`, counted exactly over all pairs by sorting.
pub fn auroc(in_scores: &[f64], out_scores: &[f64]) -> Result<f64> {
    check_scores(in_scores, out_scores)?;
    let mut outs = out_scores.to_vec();
    outs.sort_by(f64::total_cmp);
    // twice the Mann–Whitney U: 2·#greater + #equal
    let mut twice_u: u128 = 0;
    for &s in in_scores {
        let below = outs.partition_point(|&o| o < s);
        let not_above = outs.partition_point(|&o| o <= s);
        twice_u += 2 * below as u128 + (not_above - below) as u128;
    }
    let pairs = 2 * in_scores.len() as u128 * out_scores.len() as u128;
    Ok(twice_u as f64 / pairs as f64)
}

/// FPR at the largest threshold `τ` whose TPR (`score ≥ τ`) is at least 95%.
pub fn fpr_at_95_tpr(in_scores: &[f64], out_scores: &[f64]) -> Result<f64> {
    check_scores(in_scores, out_scores)?;
    let mut ins = in_scores.to_vec();
    ins.sort_by(|a, b| b.total_cmp(a));
    let n = ins.len();
    // smallest k with k/n ≥ 0.95, in integers
    let k = (95 * n).div_ceil(100);
    let tau = ins[k.max(1) - 1];
    let fp = out_scores.iter().filter(|&&s| s >= tau).count();
    Ok(fp as f64 / out_scores.len() as f64)
}

/// Class probabilities (as `f64` rows) for every example of `ds`, evaluated in chunks.
pub fn predict_dataset<S: Scalar>(
    model: &Model<S>,
    ds: &Dataset,
    cfg: &PredictConfig,
) -> Result<Vec<Vec<f64>>> {
    const CHUNK: usize = 512;
    let mut rows = Vec::with_capacity(ds.len());
    let idx: Vec<usize> = (0..ds.len()).collect();
    for (c, chunk) in idx.chunks(CHUNK).enumerate() {
        let features = model.features(&ds.batch::<S>(chunk))?;
        let probs = predict_probs_from_features(model, &features, cfg, c * CHUNK)?;
        let k = probs.shape()[1];
        rows.extend(probs.to_f64_vec().chunks(k).map(<[f64]>::to_vec));
    }
    Ok(rows)
}

pub fn evaluate<S: Scalar>(model: &Model<S>, ds: &Dataset, cfg: &PredictConfig) -> Result<EvalReport> {
    if ds.num_classes() != model.spec().num_classes {
        return Err(Error::dim(
            "evaluate",
            format!(
                "dataset has {} classes, model {}",
                ds.num_classes(),
                model.spec().num_classes
            ),
        ));
    }
    EvalReport::from_probs(&predict_dataset(model, ds, cfg)?, ds.labels())
}

#[cfg(test)]
mod tests;
