//! Experiment configuration: one JSON document, unknown keys rejected.
//!
//! Relative paths are resolved against the directory holding the config file.

use std::path::{Path, PathBuf};

use calib2stage::data::{
    default_centers, gen_bar_images, gen_blobs, load_idx, train_val_split, SplitSpec, ShiftSpec,
};
use calib2stage::metrics::OodScore;
use calib2stage::nn::ExtractorSpec;
use calib2stage::rng::derive_seed;
use calib2stage::train::{loss_mode_for, AdamConfig};
use calib2stage::{Dataset, DatasetKind, HeadKind, ModelSpec, StageTag, TrainConfig};
use serde::Deserialize;

use crate::error::{CliError, CliResult};

pub const DEFAULT_Z_DIMS: [usize; 6] = [2, 8, 32, 128, 256, 512];
const STAGE1_MAX_EPOCHS: usize = 200;
const TEST_STREAM: u64 = 0x7e57;

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    pub data: DataConfig,
    #[serde(default)]
    pub split: SplitSpec,
    #[serde(default)]
    pub shift: ShiftSpec,
    /// Out-of-distribution sets; only their test portion is used.
    #[serde(default)]
    pub ood: Vec<DataConfig>,
    #[serde(default)]
    pub ood_score: OodScore,
    pub model: ModelConfig,
    #[serde(default)]
    pub stage1: StageConfig,
    /// Shared by `tst` and `vtst`.
    #[serde(default)]
    pub stage2: StageConfig,
    /// Shared by `e2e` and `var_e2e`.
    #[serde(default)]
    pub e2e: StageConfig,
    #[serde(default = "default_z_dims")]
    pub z_dims: Vec<usize>,
    #[serde(default = "default_m_values")]
    pub m_values: Vec<usize>,
    /// Seeds for Stage-2 and end-to-end runs.
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_seeds")]
    pub stage1_seeds: Vec<u64>,
    /// Base model for Stage 2; defaults to the first Stage-1 seed's checkpoint.
    #[serde(default)]
    pub stage1_checkpoint: Option<PathBuf>,
    /// Seed of the prediction-time MC noise.
    #[serde(default)]
    pub eval_seed: u64,
    /// Fit a temperature on validation logits for deterministic heads.
    #[serde(default = "default_true")]
    pub temperature_scaling: bool,
}

fn default_z_dims() -> Vec<usize> {
    DEFAULT_Z_DIMS.to_vec()
}

fn default_m_values() -> Vec<usize> {
    vec![1, 10]
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    /// Gaussian blobs. Centers sit on a circle of `radius` in the first two
    /// coordinates; further coordinates are pure noise.
    Blobs {
        n_train: usize,
        n_test: usize,
        num_classes: usize,
        #[serde(default = "two")]
        dim: usize,
        radius: f64,
        noise_sd: f64,
        #[serde(default)]
        label_noise_frac: f64,
        #[serde(default)]
        seed: u64,
    },
    Bars {
        n_train: usize,
        n_test: usize,
        num_classes: usize,
        #[serde(default = "sixteen")]
        hw: usize,
        noise_sd: f64,
        #[serde(default)]
        seed: u64,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
}

fn two() -> usize {
    2
}

fn sixteen() -> usize {
    16
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub extractor: ExtractorSpec,
    #[serde(default)]
    pub stage1_hidden: Vec<usize>,
}

/// Optimizer and stopping settings of one stage. The run seed and the loss
/// mode come from the command line and the stage tag.
#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    #[serde(default = "StageConfig::learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "StageConfig::batch_size")]
    pub batch_size: usize,
    /// Defaults to 200 for Stage 1 and 40 otherwise.
    #[serde(default)]
    pub max_epochs: Option<usize>,
    #[serde(default = "StageConfig::patience")]
    pub patience: usize,
    #[serde(default)]
    pub kl_scale: Option<f64>,
    #[serde(default = "StageConfig::train_m")]
    pub train_m: usize,
    #[serde(default)]
    pub adam: AdamConfig,
}

impl StageConfig {
    fn learning_rate() -> f64 {
        TrainConfig::default().learning_rate
    }
    fn batch_size() -> usize {
        TrainConfig::default().batch_size
    }
    fn patience() -> usize {
        TrainConfig::default().patience
    }
    fn train_m() -> usize {
        TrainConfig::default().train_m
    }

    pub fn train_config(&self, stage: StageTag, seed: u64) -> TrainConfig {
        let default_epochs = match stage {
            StageTag::Stage1 => STAGE1_MAX_EPOCHS,
            _ => TrainConfig::default().max_epochs,
        };
        TrainConfig {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs.unwrap_or(default_epochs),
            loss_mode: loss_mode_for(stage.head_kind()),
            kl_scale: self.kl_scale,
            patience: self.patience,
            train_m: self.train_m,
            seed,
            adam: self.adam,
        }
    }
}

impl Default for StageConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields defaulted")
    }
}

/// Train/validation/test sets of an experiment.
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl ExperimentConfig {
    /// Parses and validates a config file.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let de = &mut serde_json::Deserializer::from_str(&text);
        let mut cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            CliError::Config(format!("{}: at `{}`: {}", path.display(), e.path(), e.inner()))
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        if let Some(p) = &mut self.stage1_checkpoint {
            fix(p);
        }
        for d in std::iter::once(&mut self.data).chain(&mut self.ood) {
            if let DataConfig::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } = d
            {
                for p in [train_images, train_labels, test_images, test_labels] {
                    fix(p);
                }
            }
        }
    }

    pub fn validate(&self) -> CliResult<()> {
        let bad = |key: &str, msg: &str| Err(CliError::Config(format!("{key}: {msg}")));
        if self.z_dims.is_empty() || self.z_dims.contains(&0) {
            return bad("z_dims", "must be a non-empty list of positive widths");
        }
        if self.m_values.is_empty() || self.m_values.contains(&0) {
            return bad("m_values", "must be a non-empty list of positive sample counts");
        }
        if self.seeds.is_empty() {
            return bad("seeds", "must not be empty");
        }
        if self.stage1_seeds.is_empty() {
            return bad("stage1_seeds", "must not be empty");
        }
        for (key, stage, tag) in [
            ("stage1", &self.stage1, StageTag::Stage1),
            ("stage2", &self.stage2, StageTag::Vtst),
            ("e2e", &self.e2e, StageTag::VarE2e),
        ] {
            stage
                .train_config(tag, 0)
                .validate()
                .map_err(|e| CliError::Config(format!("{key}: {e}")))?;
        }
        if self.data.is_vector() && !self.shift.degrees.is_empty() && self.data.dim() != Some(2) {
            return bad("shift.degrees", "rotation shifts of vector data need dim 2; set an empty list");
        }
        if self.shift.degrees.iter().any(|d| !d.is_finite()) {
            return bad("shift.degrees", "must be finite");
        }
        Ok(())
    }

    pub fn model_spec(&self, num_classes: usize, input_dim_check: &Dataset) -> CliResult<ModelSpec> {
        let spec = ModelSpec {
            extractor: self.model.extractor.clone(),
            z_dim: self.z_dims[0],
            num_classes,
            head_kind: HeadKind::Stage1,
            stage1_hidden: self.model.stage1_hidden.clone(),
        };
        spec.validate()
            .map_err(|e| CliError::Config(format!("model: {e}")))?;
        if spec.extractor.input_shape() != input_dim_check.sample_shape() {
            return Err(CliError::Config(format!(
                "model.extractor: expects inputs {:?}, data has {:?}",
                spec.extractor.input_shape(),
                input_dim_check.sample_shape()
            )));
        }
        Ok(spec)
    }

    pub fn splits(&self) -> CliResult<Splits> {
        let (pool, test) = self.data.load()?;
        let (train, val) = train_val_split(&pool, &self.split)?;
        Ok(Splits { train, val, test })
    }

    pub fn ood_sets(&self, like: &Dataset) -> CliResult<Vec<Dataset>> {
        self.ood
            .iter()
            .enumerate()
            .map(|(i, d)| {
                let (_, test) = d.load()?;
                if test.sample_shape() != like.sample_shape() {
                    return Err(CliError::Config(format!(
                        "ood[{i}]: sample shape {:?} differs from the data's {:?}",
                        test.sample_shape(),
                        like.sample_shape()
                    )));
                }
                Ok(test.with_name(format!("ood{i}")))
            })
            .collect()
    }

    pub fn stage_config(&self, stage: StageTag) -> &StageConfig {
        match stage {
            StageTag::Stage1 => &self.stage1,
            StageTag::Tst | StageTag::Vtst => &self.stage2,
            StageTag::E2e | StageTag::VarE2e => &self.e2e,
        }
    }

    pub fn stage1_path(&self) -> PathBuf {
        self.stage1_checkpoint
            .clone()
            .unwrap_or_else(|| self.output_dir.join(checkpoint_name(StageTag::Stage1, None, self.stage1_seeds[0])))
    }

    /// Every checkpoint the config describes, in a fixed order.
    pub fn expected_runs(&self) -> Vec<Run> {
        let mut runs: Vec<Run> = self
            .stage1_seeds
            .iter()
            .map(|&seed| Run { tag: StageTag::Stage1, z: None, seed })
            .collect();
        for tag in [StageTag::Tst, StageTag::Vtst, StageTag::E2e, StageTag::VarE2e] {
            runs.extend(self.runs_for(tag));
        }
        runs
    }

    pub fn runs_for(&self, tag: StageTag) -> Vec<Run> {
        if tag == StageTag::Stage1 {
            return self
                .stage1_seeds
                .iter()
                .map(|&seed| Run { tag, z: None, seed })
                .collect();
        }
        self.z_dims
            .iter()
            .flat_map(|&z| self.seeds.iter().map(move |&seed| Run { tag, z: Some(z), seed }))
            .collect()
    }
}

/// One training run: a stage, a latent width (none for Stage 1) and a seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Run {
    pub tag: StageTag,
    pub z: Option<usize>,
    pub seed: u64,
}

impl Run {
    pub fn stem(&self) -> String {
        checkpoint_name(self.tag, self.z, self.seed)
            .trim_end_matches(".json")
            .to_string()
    }
}

pub fn checkpoint_name(tag: StageTag, z: Option<usize>, seed: u64) -> String {
    match z {
        Some(z) => format!("{tag}_z{z}_seed{seed}.json"),
        None => format!("{tag}_seed{seed}.json"),
    }
}

impl DataConfig {
    fn is_vector(&self) -> bool {
        matches!(self, DataConfig::Blobs { .. })
    }

    fn dim(&self) -> Option<usize> {
        match self {
            DataConfig::Blobs { dim, .. } => Some(*dim),
            _ => None,
        }
    }

    /// `(train pool, test set)`; the test set uses a seed derived from the data seed.
    pub fn load(&self) -> CliResult<(Dataset, Dataset)> {
        match self {
            DataConfig::Blobs {
                n_train,
                n_test,
                num_classes,
                dim,
                radius,
                noise_sd,
                label_noise_frac,
                seed,
            } => {
                if *dim < 2 {
                    return Err(CliError::Config("data.dim: must be at least 2".into()));
                }
                let centers: Vec<Vec<f64>> = default_centers(*num_classes, *radius)
                    .into_iter()
                    .map(|mut c| {
                        c.resize(*dim, 0.0);
                        c
                    })
                    .collect();
                let gen = |n, s| gen_blobs(n, &centers, *noise_sd, *label_noise_frac, s);
                Ok((gen(*n_train, *seed)?, gen(*n_test, derive_seed(*seed, &[TEST_STREAM]))?.with_name("blobs/test")))
            }
            DataConfig::Bars {
                n_train,
                n_test,
                num_classes,
                hw,
                noise_sd,
                seed,
            } => {
                let gen = |n, s| gen_bar_images(n, *num_classes, *hw, *noise_sd, s);
                Ok((gen(*n_train, *seed)?, gen(*n_test, derive_seed(*seed, &[TEST_STREAM]))?.with_name("bars/test")))
            }
            DataConfig::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => {
                let train = load_idx(train_images, train_labels)?;
                let test = load_idx(test_images, test_labels)?;
                if test.kind() != DatasetKind::Image || test.sample_shape() != train.sample_shape() {
                    return Err(CliError::Data("IDX train and test images differ in shape".into()));
                }
                // label sets may differ in their largest label; align class counts
                let k = train.num_classes().max(test.num_classes());
                Ok((with_classes(train, k)?, with_classes(test, k)?))
            }
        }
    }
}

fn with_classes(ds: Dataset, k: usize) -> CliResult<Dataset> {
    if ds.num_classes() == k {
        return Ok(ds);
    }
    Ok(Dataset::new(
        ds.name(),
        ds.kind(),
        ds.sample_shape().to_vec(),
        ds.features().to_vec(),
        ds.labels().to_vec(),
        k,
    )?)
}
