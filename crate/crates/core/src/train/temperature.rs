//! Post-hoc temperature scaling: `softmax(logits / T)` with `T` chosen to
//! minimize validation NLL over `[0.05, 20]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::NLL_CLAMP;

pub const T_MIN: f64 = 0.05;
pub const T_MAX: f64 = 20.0;
/// Bracket width on `ln T` at which the golden-section search stops.
pub const LOG_T_TOL: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemperatureScale {
    pub temperature: f64,
}

impl Default for TemperatureScale {
    fn default() -> Self {
        TemperatureScale { temperature: 1.0 }
    }
}

impl TemperatureScale {
    pub fn new(temperature: f64) -> Result<Self> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::Contract(format!("temperature {temperature} must be positive")));
        }
        Ok(TemperatureScale { temperature })
    }

    /// Row-wise `softmax(logits / T)`.
    pub fn probs(&self, logits: &[Vec<f64>]) -> Vec<Vec<f64>> {
        logits.iter().map(|row| scaled_softmax(row, self.temperature)).collect()
    }
}

fn scaled_softmax(row: &[f64], t: f64) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|&v| ((v - max) / t).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Mean NLL of `softmax(logits / t)`.
pub fn nll_at_temperature(logits: &[Vec<f64>], labels: &[usize], t: f64) -> f64 {
    let total: f64 = logits
        .iter()
        .zip(labels)
        .map(|(row, &y)| {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max / t + row.iter().map(|&v| ((v - max) / t).exp()).sum::<f64>().ln();
            let logp = row[y] / t - lse;
            -logp.max(NLL_CLAMP.ln())
        })
        .sum();
    total / logits.len() as f64
}

/// Golden-section search on `ln T`. NLL is convex in `1/T`, hence unimodal
/// in `ln T`. Falls back to `T = 1` unless the optimum is strictly better.
pub fn fit_temperature(logits: &[Vec<f64>], labels: &[usize]) -> Result<TemperatureScale> {
    if logits.is_empty() || logits.len() != labels.len() {
        return Err(Error::dim(
            "fit_temperature",
            format!("{} rows, {} labels", logits.len(), labels.len()),
        ));
    }
    let k = logits[0].len();
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::Contract(format!("label {bad} out of range for {k} classes")));
    }
    let f = |u: f64| nll_at_temperature(logits, labels, u.exp());
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (T_MIN.ln(), T_MAX.ln());
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > LOG_T_TOL {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    let (u, fu) = [(a, f(a)), (b, f(b)), (c, fc), (d, fd)]
        .into_iter()
        .fold((0.0, f64::INFINITY), |best, cand| if cand.1 < best.1 { cand } else { best });
    if fu < f(0.0) {
        TemperatureScale::new(u.exp())
    } else {
        Ok(TemperatureScale::default())
    }
}
