//! `eval`: metric rows per (checkpoint, m, eval set) plus JSON sidecars.
//!
//! Deterministic heads also get temperature-scaled rows, tagged `<tag>_ts`,
//! in a separate `<stem>_ts_eval.csv` so the per-checkpoint file keeps
//! exactly `|m| × |eval sets|` rows.

use std::path::PathBuf;

use calib2stage::data::rotate;
use calib2stage::metrics::{
    predict_dataset, predictive_entropy, Histogram, OodScore, ENTROPY_BINS,
};
use calib2stage::nn::{load_checkpoint, write_atomic};
use calib2stage::train::fit_temperature;
use calib2stage::{Dataset, EvalReport, HeadKind, Model, OodReport, PredictConfig, ReliabilityBins};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{ExperimentConfig, Run};
use crate::error::{at, CliError, CliResult};
use crate::format::{opt, sig6};

pub const COLUMNS: [&str; 15] = [
    "tag",
    "z",
    "seed",
    "m",
    "eval_set",
    "n",
    "accuracy",
    "ece",
    "mce",
    "nll",
    "mean_confidence",
    "mean_entropy",
    "auroc",
    "fpr95",
    "temperature",
];

/// One CSV row. Percent-valued metrics are stored in percent.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub tag: String,
    pub z: Option<usize>,
    pub seed: u64,
    pub m: usize,
    pub eval_set: String,
    pub n: usize,
    pub accuracy: Option<f64>,
    pub ece: Option<f64>,
    pub mce: Option<f64>,
    pub nll: Option<f64>,
    pub mean_confidence: f64,
    pub mean_entropy: f64,
    pub auroc: Option<f64>,
    pub fpr95: Option<f64>,
    pub temperature: Option<f64>,
}

impl EvalRow {
    pub fn fields(&self) -> Vec<String> {
        vec![
            self.tag.clone(),
            self.z.map(|z| z.to_string()).unwrap_or_default(),
            self.seed.to_string(),
            self.m.to_string(),
            self.eval_set.clone(),
            self.n.to_string(),
            opt(self.accuracy),
            opt(self.ece),
            opt(self.mce),
            opt(self.nll),
            sig6(self.mean_confidence),
            sig6(self.mean_entropy),
            opt(self.auroc),
            opt(self.fpr95),
            opt(self.temperature),
        ]
    }
}

#[derive(Serialize)]
struct Sidecar<'a> {
    tag: &'a str,
    seed: u64,
    z: Option<usize>,
    m: usize,
    eval_set: &'a str,
    reliability_bins: Option<ReliabilityBins>,
    entropy_histogram: Histogram,
}

/// Datasets a checkpoint is evaluated on, in output order.
struct EvalSets {
    labelled: Vec<(String, Dataset)>,
    ood: Vec<(String, Dataset)>,
    val: Dataset,
}

/// Files written for one checkpoint.
#[derive(Clone, Debug)]
pub struct EvalOutput {
    pub run: Run,
    pub csv: PathBuf,
    pub rows: Vec<EvalRow>,
    pub ts_rows: Vec<EvalRow>,
}

pub fn cmd_eval(cfg: &ExperimentConfig, m_override: Option<Vec<usize>>) -> CliResult<Vec<EvalOutput>> {
    let m_values = m_override.unwrap_or_else(|| cfg.m_values.clone());
    if m_values.is_empty() || m_values.contains(&0) {
        return Err(CliError::Config("--m: sample counts must be positive".into()));
    }
    let runs: Vec<(Run, PathBuf)> = cfg
        .expected_runs()
        .into_iter()
        .map(|r| (r, cfg.output_dir.join(format!("{}.json", r.stem()))))
        .filter(|(_, p)| p.is_file())
        .collect();
    if runs.is_empty() {
        return Err(CliError::Config(format!(
            "no checkpoints for this config under {}",
            cfg.output_dir.display()
        )));
    }
    let splits = cfg.splits()?;
    let mut labelled = vec![("test".to_string(), splits.test.clone()), ("train".to_string(), splits.train)];
    for &deg in &cfg.shift.degrees {
        labelled.push((format!("rot{}", sig6(deg)), rotate(&splits.test, deg)?));
    }
    let ood = cfg
        .ood_sets(&splits.test)?
        .into_iter()
        .enumerate()
        .map(|(i, d)| (format!("ood{i}"), d))
        .collect();
    let sets = EvalSets {
        labelled,
        ood,
        val: splits.val,
    };

    crate::pool()?.install(|| {
        runs.par_iter()
            .map(|(run, path)| eval_checkpoint(cfg, &sets, run, path, &m_values))
            .collect()
    })
}

fn eval_checkpoint(
    cfg: &ExperimentConfig,
    sets: &EvalSets,
    run: &Run,
    path: &PathBuf,
    m_values: &[usize],
) -> CliResult<EvalOutput> {
    let model: Model = load_checkpoint(path).map_err(at(path))?;
    check_matches(&model, run, &sets.val, path)?;
    let k = model.spec().num_classes;
    let base = |m: usize, eval_set: &str, n: usize| EvalRow {
        tag: run.tag.to_string(),
        z: run.z,
        seed: run.seed,
        m,
        eval_set: eval_set.to_string(),
        n,
        accuracy: None,
        ece: None,
        mce: None,
        nll: None,
        mean_confidence: 0.0,
        mean_entropy: 0.0,
        auroc: None,
        fpr95: None,
        temperature: None,
    };

    let mut rows = Vec::new();
    let mut sidecar = Vec::new();
    for &m in m_values {
        let pcfg = PredictConfig::with_m(m, cfg.eval_seed);
        let mut test_probs = None;
        for (name, ds) in &sets.labelled {
            let probs = predict_dataset(&model, ds, &pcfg)?;
            let rep = EvalReport::from_probs(&probs, ds.labels())?;
            rows.push(labelled_row(base(m, name, ds.len()), &rep));
            sidecar.push((rows.len() - 1, Some(rep.bins), rep.entropy_histogram));
            if name == "test" {
                test_probs = Some(probs);
            }
        }
        let test_probs = test_probs.expect("test set always evaluated");
        for (name, ds) in &sets.ood {
            let probs = predict_dataset(&model, ds, &pcfg)?;
            let (row, hist) = ood_row(base(m, name, ds.len()), &test_probs, &probs, k, cfg.ood_score)?;
            rows.push(row);
            sidecar.push((rows.len() - 1, None, hist));
        }
    }

    let ts_rows = if cfg.temperature_scaling && model.spec().head_kind != HeadKind::Gaussian {
        temperature_rows(&model, sets, m_values, cfg.ood_score, &base)?
    } else {
        Vec::new()
    };

    let stem = run.stem();
    let csv = cfg.output_dir.join(format!("{stem}_eval.csv"));
    write_rows(&csv, &rows)?;
    let entries: Vec<Sidecar> = sidecar
        .into_iter()
        .map(|(i, bins, hist)| Sidecar {
            tag: &rows[i].tag,
            seed: rows[i].seed,
            z: rows[i].z,
            m: rows[i].m,
            eval_set: &rows[i].eval_set,
            reliability_bins: bins,
            entropy_histogram: hist,
        })
        .collect();
    let json = serde_json::to_string_pretty(&entries).map_err(|e| CliError::Data(e.to_string()))?;
    write_atomic(&cfg.output_dir.join(format!("{stem}_eval.json")), json.as_bytes())?;
    if !ts_rows.is_empty() {
        write_rows(&cfg.output_dir.join(format!("{stem}_ts_eval.csv")), &ts_rows)?;
    }
    Ok(EvalOutput {
        run: *run,
        csv,
        rows,
        ts_rows,
    })
}

fn check_matches(model: &Model, run: &Run, val: &Dataset, path: &PathBuf) -> CliResult<()> {
    let spec = model.spec();
    let mismatch = |what: String| Err(CliError::Config(format!("{}: {what}", path.display())));
    if model.stage != run.tag {
        return mismatch(format!("holds a {} model", model.stage));
    }
    if run.z.is_some_and(|z| z != spec.z_dim) {
        return mismatch(format!("latent width {} differs from its name", spec.z_dim));
    }
    if spec.num_classes != val.num_classes() {
        return mismatch(format!("{} classes, data has {}", spec.num_classes, val.num_classes()));
    }
    if spec.extractor.input_shape() != val.sample_shape() {
        return mismatch(format!(
            "input shape {:?}, data has {:?}",
            spec.extractor.input_shape(),
            val.sample_shape()
        ));
    }
    Ok(())
}

fn labelled_row(mut row: EvalRow, rep: &EvalReport) -> EvalRow {
    row.accuracy = Some(rep.accuracy);
    row.ece = Some(rep.ece);
    row.mce = Some(rep.mce);
    row.nll = Some(rep.nll);
    row.mean_confidence = 100.0 * mean(&rep.confidences);
    row.mean_entropy = mean(&rep.entropies);
    row
}

fn ood_row(
    mut row: EvalRow,
    in_probs: &[Vec<f64>],
    out_probs: &[Vec<f64>],
    k: usize,
    score: OodScore,
) -> CliResult<(EvalRow, Histogram)> {
    let ood = OodReport::from_probs(in_probs, out_probs, score)?;
    let entropies: Vec<f64> = out_probs.iter().map(|p| predictive_entropy(p)).collect();
    let confidences: Vec<f64> = out_probs
        .iter()
        .map(|p| p.iter().copied().fold(0.0, f64::max))
        .collect();
    row.mean_confidence = 100.0 * mean(&confidences);
    row.mean_entropy = mean(&entropies);
    row.auroc = Some(ood.auroc);
    row.fpr95 = Some(ood.fpr95);
    Ok((row, Histogram::build(&entropies, 0.0, (k as f64).ln(), ENTROPY_BINS)))
}

/// Rows for `softmax(logits / T)` with `T` fit on validation logits.
fn temperature_rows(
    model: &Model,
    sets: &EvalSets,
    m_values: &[usize],
    score: OodScore,
    base: &dyn Fn(usize, &str, usize) -> EvalRow,
) -> CliResult<Vec<EvalRow>> {
    let k = model.spec().num_classes;
    let ts = fit_temperature(&logits(model, &sets.val)?, sets.val.labels())?;
    let scaled = |ds: &Dataset| -> CliResult<Vec<Vec<f64>>> { Ok(ts.probs(&logits(model, ds)?)) };
    let mut template = Vec::new();
    let test_probs = scaled(&sets.labelled[0].1)?;
    for (name, ds) in &sets.labelled {
        let probs = if name == "test" { test_probs.clone() } else { scaled(ds)? };
        let rep = EvalReport::from_probs(&probs, ds.labels())?;
        template.push(labelled_row(base(0, name, ds.len()), &rep));
    }
    for (name, ds) in &sets.ood {
        let (row, _) = ood_row(base(0, name, ds.len()), &test_probs, &scaled(ds)?, k, score)?;
        template.push(row);
    }
    Ok(m_values
        .iter()
        .flat_map(|&m| {
            template.iter().map(move |r| EvalRow {
                tag: format!("{}_ts", r.tag),
                m,
                temperature: Some(ts.temperature),
                ..r.clone()
            })
        })
        .collect())
}

fn logits(model: &Model, ds: &Dataset) -> CliResult<Vec<Vec<f64>>> {
    const CHUNK: usize = 512;
    let idx: Vec<usize> = (0..ds.len()).collect();
    let mut rows = Vec::with_capacity(ds.len());
    for chunk in idx.chunks(CHUNK) {
        let l = model.logits(&ds.batch::<f64>(chunk))?;
        let k = l.shape()[1];
        rows.extend(l.to_f64_vec().chunks(k).map(<[f64]>::to_vec));
    }
    Ok(rows)
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len().max(1) as f64
}

fn write_rows(path: &PathBuf, rows: &[EvalRow]) -> CliResult<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| CliError::Data(format!("{}: {e}", path.display()));
    w.write_record(COLUMNS).map_err(io)?;
    for r in rows {
        w.write_record(r.fields()).map_err(io)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Data(e.to_string()))?;
    write_atomic(path, &bytes)?;
    Ok(())
}
