//! `train`: one checkpoint per seed (and per Z outside Stage 1).

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use calib2stage::nn::{load_checkpoint, save_checkpoint, write_atomic};
use calib2stage::train::{run_end_to_end, run_stage1, run_stage2};
use calib2stage::{Model, StageTag, TrainOutcome};
use rayon::prelude::*;

use crate::config::{ExperimentConfig, Run, Splits};
use crate::error::{at, CliError, CliResult};
use crate::format::sig6;

/// Summary of one finished run.
#[derive(Clone, Debug)]
pub struct TrainedRun {
    pub run: Run,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

pub fn cmd_train(cfg: &ExperimentConfig, stage: StageTag) -> CliResult<Vec<TrainedRun>> {
    let splits = cfg.splits()?;
    let spec = cfg.model_spec(splits.train.num_classes(), &splits.train)?;
    std::fs::create_dir_all(&cfg.output_dir).map_err(|e| CliError::io(&cfg.output_dir, e))?;

    let base = match stage {
        StageTag::Tst | StageTag::Vtst => {
            let path = cfg.stage1_path();
            if !path.is_file() {
                return Err(CliError::Config(format!(
                    "stage1_checkpoint: {} does not exist; run `train --stage stage1` first",
                    path.display()
                )));
            }
            let model: Model = load_checkpoint(&path).map_err(at(&path))?;
            if model.stage != StageTag::Stage1 {
                return Err(CliError::Config(format!(
                    "stage1_checkpoint: {} holds a {} model",
                    path.display(),
                    model.stage
                )));
            }
            if model.spec().extractor != spec.extractor || model.spec().num_classes != spec.num_classes {
                return Err(CliError::Config(format!(
                    "stage1_checkpoint: {} does not match the configured model and data",
                    path.display()
                )));
            }
            Some(model)
        }
        StageTag::E2e | StageTag::VarE2e => {
            if cfg.stage1_checkpoint.is_some() {
                eprintln!("warning: stage1_checkpoint is ignored by the {stage} stage");
            }
            None
        }
        StageTag::Stage1 => None,
    };

    let runs = cfg.runs_for(stage);
    let stage_cfg = cfg.stage_config(stage);
    let one = |run: &Run| -> CliResult<TrainedRun> {
        let started = Instant::now();
        let tcfg = stage_cfg.train_config(stage, run.seed);
        let outcome: TrainOutcome = match (stage, run.z) {
            (StageTag::Stage1, _) => run_stage1(&spec, &splits.train, &splits.val, &tcfg)?,
            (StageTag::Tst | StageTag::Vtst, Some(z)) => run_stage2(
                base.as_ref().expect("stage-1 model loaded"),
                &splits.train,
                &splits.val,
                &tcfg,
                stage.head_kind(),
                z,
            )?,
            (_, Some(z)) => run_end_to_end(&spec, &splits.train, &splits.val, &tcfg, stage.head_kind(), z)?,
            (_, None) => unreachable!("only stage 1 runs without a latent width"),
        };
        let dir = &cfg.output_dir;
        save_checkpoint(&outcome.model, dir.join(format!("{}.json", run.stem())))?;
        write_log(&dir.join(format!("{}.log", run.stem())), run, &outcome, &splits, started)?;
        Ok(TrainedRun {
            run: *run,
            best_epoch: outcome.best_epoch,
            best_val_loss: outcome.best_val_loss,
        })
    };
    crate::pool()?.install(|| runs.par_iter().map(one).collect())
}

fn write_log(path: &Path, run: &Run, out: &TrainOutcome, splits: &Splits, started: Instant) -> CliResult<()> {
    let mut log = String::new();
    let z = run.z.map(|z| z.to_string()).unwrap_or_else(|| "-".into());
    let _ = writeln!(
        log,
        "run {} z {z} seed {} train {} val {}",
        run.tag,
        run.seed,
        splits.train.len(),
        splits.val.len()
    );
    for r in &out.history {
        let _ = writeln!(
            log,
            "epoch {} train_loss {} val_loss {}",
            r.epoch,
            sig6(r.train_loss),
            sig6(r.val_loss)
        );
    }
    let _ = writeln!(
        log,
        "best_epoch {} best_val_loss {} elapsed_s {:.2}",
        out.best_epoch,
        sig6(out.best_val_loss),
        started.elapsed().as_secs_f64()
    );
    write_atomic(path, log.as_bytes())?;
    Ok(())
}
