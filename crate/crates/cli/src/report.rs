//! `report`: mean ± SEM over seeds for every metric column of eval CSVs.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use calib2stage::nn::write_atomic;

use crate::error::{CliError, CliResult};
use crate::format::{opt, sig6};

/// Columns identifying a row; every other column except `n` is a metric.
const KEY_COLUMNS: [&str; 4] = ["tag", "z", "m", "eval_set"];
const SEED_COLUMN: &str = "seed";
const SKIPPED: [&str; 1] = ["n"];
const LOWER_IS_BETTER: [&str; 4] = ["ece", "mce", "nll", "fpr95"];
const HIGHER_IS_BETTER: [&str; 2] = ["accuracy", "auroc"];

#[derive(Clone, Debug, PartialEq)]
pub struct Summary {
    pub mean: f64,
    /// `None` for a single seed.
    pub sem: Option<f64>,
}

/// Mean and standard error `sd / √n` with the `n − 1` sample deviation.
pub fn summarize(xs: &[f64]) -> Option<Summary> {
    if xs.is_empty() {
        return None;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let sem = (xs.len() > 1).then(|| {
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (var / n).sqrt()
    });
    Some(Summary { mean, sem })
}

#[derive(Clone, Debug)]
pub struct Group {
    /// Values of [`KEY_COLUMNS`].
    pub key: Vec<String>,
    pub seeds: usize,
    pub metrics: Vec<Option<Summary>>,
    /// Metric indices where this group is the best of its eval set.
    pub best: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct Report {
    pub metric_names: Vec<String>,
    pub groups: Vec<Group>,
}

pub fn cmd_report(pattern: &str, out_dir: Option<&Path>) -> CliResult<(Report, PathBuf, PathBuf)> {
    let mut paths: Vec<PathBuf> = glob::glob(pattern)
        .map_err(|e| CliError::Config(format!("--inputs: {e}")))?
        .collect::<Result<_, _>>()
        .map_err(|e| CliError::Data(e.to_string()))?;
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::Config(format!("--inputs: no files match {pattern:?}")));
    }
    let report = aggregate(&paths)?;
    let dir = match out_dir {
        Some(d) => d.to_path_buf(),
        None => paths[0].parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    let csv_path = dir.join("report.csv");
    let txt_path = dir.join("report.txt");
    write_atomic(&csv_path, &render_csv(&report)?)?;
    write_atomic(&txt_path, render_markdown(&report).as_bytes())?;
    Ok((report, csv_path, txt_path))
}

pub fn aggregate(paths: &[PathBuf]) -> CliResult<Report> {
    let mut header: Option<(PathBuf, Vec<String>)> = None;
    let mut order: Vec<Vec<String>> = Vec::new();
    let mut values: HashMap<Vec<String>, (Vec<String>, Vec<Vec<f64>>)> = HashMap::new();
    let mut metric_cols = Vec::new();
    let mut key_cols = Vec::new();
    let mut seed_col = 0;

    for path in paths {
        let data_err = |e: csv::Error| CliError::Data(format!("{}: {e}", path.display()));
        let mut r = csv::Reader::from_path(path).map_err(data_err)?;
        let cols: Vec<String> = r.headers().map_err(data_err)?.iter().map(str::to_string).collect();
        match &header {
            None => {
                let find = |name: &str| {
                    cols.iter().position(|c| c == name).ok_or_else(|| {
                        CliError::Data(format!("{}: missing column {name:?}", path.display()))
                    })
                };
                key_cols = KEY_COLUMNS.iter().map(|c| find(c)).collect::<CliResult<_>>()?;
                seed_col = find(SEED_COLUMN)?;
                metric_cols = (0..cols.len())
                    .filter(|&i| {
                        let c = cols[i].as_str();
                        !KEY_COLUMNS.contains(&c) && c != SEED_COLUMN && !SKIPPED.contains(&c)
                    })
                    .collect();
                header = Some((path.clone(), cols));
            }
            Some((first, h)) if *h != cols => {
                return Err(CliError::Data(format!(
                    "{} has columns {:?}, {} has {:?}",
                    path.display(),
                    cols,
                    first.display(),
                    h
                )));
            }
            Some(_) => {}
        }
        for (line, rec) in r.records().enumerate() {
            let rec = rec.map_err(data_err)?;
            let at = || format!("{} row {}", path.display(), line + 2);
            let key: Vec<String> = key_cols.iter().map(|&i| rec[i].to_string()).collect();
            let entry = values.entry(key.clone()).or_insert_with(|| {
                order.push(key.clone());
                (Vec::new(), vec![Vec::new(); metric_cols.len()])
            });
            let seed = rec[seed_col].to_string();
            if entry.0.contains(&seed) {
                return Err(CliError::Data(format!("{}: duplicate seed {seed} for {key:?}", at())));
            }
            entry.0.push(seed);
            for (j, &c) in metric_cols.iter().enumerate() {
                let cell = &rec[c];
                if cell.is_empty() {
                    continue;
                }
                let v: f64 = cell
                    .parse()
                    .map_err(|_| CliError::Data(format!("{}: {:?} is not a number", at(), cell)))?;
                entry.1[j].push(v);
            }
        }
    }

    let (_, cols) = header.expect("at least one file");
    let metric_names: Vec<String> = metric_cols.iter().map(|&i| cols[i].clone()).collect();
    let mut groups: Vec<Group> = order
        .into_iter()
        .map(|key| {
            let (seeds, vals) = &values[&key];
            Group {
                seeds: seeds.len(),
                metrics: vals.iter().map(|v| summarize(v)).collect(),
                best: Vec::new(),
                key,
            }
        })
        .collect();
    if groups.is_empty() {
        return Err(CliError::Data("inputs hold no rows".into()));
    }
    mark_best(&mut groups, &metric_names);
    Ok(Report { metric_names, groups })
}

/// Marks one best group per metric per eval set; ties go to the earliest group.
fn mark_best(groups: &mut [Group], names: &[String]) {
    let mut sets: Vec<String> = Vec::new();
    for g in groups.iter() {
        if !sets.contains(&g.key[3]) {
            sets.push(g.key[3].clone());
        }
    }
    for (j, name) in names.iter().enumerate() {
        let sign = if LOWER_IS_BETTER.contains(&name.as_str()) {
            1.0
        } else if HIGHER_IS_BETTER.contains(&name.as_str()) {
            -1.0
        } else {
            continue;
        };
        for set in &sets {
            let best = groups
                .iter()
                .enumerate()
                .filter(|(_, g)| &g.key[3] == set)
                .filter_map(|(i, g)| g.metrics[j].as_ref().map(|s| (i, sign * s.mean)))
                .fold(None, |acc: Option<(usize, f64)>, (i, v)| match acc {
                    Some((_, b)) if b <= v => acc,
                    _ => Some((i, v)),
                });
            if let Some((i, _)) = best {
                groups[i].best.push(j);
            }
        }
    }
}

fn render_csv(report: &Report) -> CliResult<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| CliError::Data(e.to_string());
    let mut head: Vec<String> = KEY_COLUMNS.iter().map(|c| c.to_string()).collect();
    head.push("n_seeds".into());
    for m in &report.metric_names {
        head.push(format!("{m}_mean"));
        head.push(format!("{m}_sem"));
    }
    head.push("best".into());
    w.write_record(&head).map_err(err)?;
    for g in &report.groups {
        let mut rec = g.key.clone();
        rec.push(g.seeds.to_string());
        for s in &g.metrics {
            rec.push(opt(s.as_ref().map(|s| s.mean)));
            rec.push(opt(s.as_ref().and_then(|s| s.sem)));
        }
        let best: Vec<&str> = g.best.iter().map(|&j| report.metric_names[j].as_str()).collect();
        rec.push(best.join(";"));
        w.write_record(&rec).map_err(err)?;
    }
    w.into_inner().map_err(|e| CliError::Data(e.to_string()))
}

/// One markdown table per eval set; best values in bold.
fn render_markdown(report: &Report) -> String {
    let mut out = String::from("# Aggregate report\n\nmean ± SEM over seeds; best per column in bold.\n");
    let mut sets: Vec<&str> = Vec::new();
    for g in &report.groups {
        if !sets.contains(&g.key[3].as_str()) {
            sets.push(&g.key[3]);
        }
    }
    for set in sets {
        let groups: Vec<&Group> = report.groups.iter().filter(|g| g.key[3] == set).collect();
        // drop metrics no group in this set reports
        let shown: Vec<usize> = (0..report.metric_names.len())
            .filter(|&j| groups.iter().any(|g| g.metrics[j].is_some()))
            .collect();
        let _ = write!(out, "\n## {set}\n\n| tag | z | m | seeds |");
        for &j in &shown {
            let _ = write!(out, " {} |", report.metric_names[j]);
        }
        out.push_str("\n|---|---|---|---|");
        for _ in &shown {
            out.push_str("---|");
        }
        out.push('\n');
        for g in groups {
            let _ = write!(out, "| {} | {} | {} | {} |", g.key[0], g.key[1], g.key[2], g.seeds);
            for &j in &shown {
                let cell = match &g.metrics[j] {
                    None => String::new(),
                    Some(s) => match s.sem {
                        Some(sem) => format!("{} ± {}", sig6(s.mean), sig6(sem)),
                        None => sig6(s.mean),
                    },
                };
                if g.best.contains(&j) {
                    let _ = write!(out, " **{cell}** |");
                } else {
                    let _ = write!(out, " {cell} |");
                }
            }
            out.push('\n');
        }
    }
    out
}
