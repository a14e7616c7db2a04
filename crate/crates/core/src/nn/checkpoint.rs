//! JSON checkpoints: `{"spec", "stage_tag", "seed", "params": {key: {shape, data}}}`.
//!
//! Values are written as `f64` in shortest round-trip form, so save→load is
//! bit-exact for both `f32` and `f64` models.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use super::{Model, ModelSpec, StageTag};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<S: Scalar = f64> {
    pub spec: ModelSpec,
    pub stage_tag: StageTag,
    pub seed: u64,
    pub params: BTreeMap<String, Tensor<S>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamJson {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointJson {
    spec: ModelSpec,
    stage_tag: StageTag,
    seed: u64,
    params: BTreeMap<String, ParamJson>,
}

impl<S: Scalar> Checkpoint<S> {
    pub fn from_model(model: &Model<S>) -> Self {
        Checkpoint {
            spec: model.spec().clone(),
            stage_tag: model.stage,
            seed: model.seed,
            params: model
                .named_params()
                .map(|(k, v)| (k, v.clone()))
                .collect(),
        }
    }

    /// Rebuilds the model; every key of the spec's layout must be present
    /// with the right shape, and no other keys may appear.
    pub fn to_model(&self) -> Result<Model<S>> {
        let layout = self.spec.layout()?;
        if let Some(extra) = self
            .params
            .keys()
            .find(|k| !layout.iter().any(|s| &s.key() == *k))
        {
            return Err(Error::Parse {
                location: extra.clone(),
                detail: "parameter not defined by the model spec".into(),
            });
        }
        Model::from_params(
            self.spec.clone(),
            |slot| {
                let key = slot.key();
                self.params.get(&key).cloned().ok_or(Error::Parse {
                    location: key,
                    detail: "missing parameter".into(),
                })
            },
            self.stage_tag,
            self.seed,
        )
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = CheckpointJson {
            spec: self.spec.clone(),
            stage_tag: self.stage_tag,
            seed: self.seed,
            params: self
                .params
                .iter()
                .map(|(k, t)| {
                    (
                        k.clone(),
                        ParamJson {
                            shape: t.shape().to_vec(),
                            data: t.to_f64_vec(),
                        },
                    )
                })
                .collect(),
        };
        Ok(serde_json::to_string(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: CheckpointJson = serde_json::from_str(text).map_err(|e| Error::Parse {
            location: format!("line {} column {}", e.line(), e.column()),
            detail: e.to_string(),
        })?;
        let params = doc
            .params
            .into_iter()
            .map(|(k, p)| {
                let t = Tensor::from_f64(p.shape, &p.data).map_err(|e| Error::Parse {
                    location: k.clone(),
                    detail: e.to_string(),
                })?;
                Ok((k, t))
            })
            .collect::<Result<_>>()?;
        Ok(Checkpoint {
            spec: doc.spec,
            stage_tag: doc.stage_tag,
            seed: doc.seed,
            params,
        })
    }
}

static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

/// Writes `contents` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(dir) = dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("{} has no file name", path.display())))?;
    let tmp = path.with_file_name(format!(
        ".{}.{}-{}.tmp",
        file_name.to_string_lossy(),
        std::process::id(),
        TMP_COUNTER.fetch_add(1, Ordering::Relaxed)
    ));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(contents).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn save_checkpoint<S: Scalar>(model: &Model<S>, path: impl AsRef<Path>) -> Result<()> {
    let json = Checkpoint::from_model(model).to_json()?;
    write_atomic(path.as_ref(), json.as_bytes())
}

pub fn load_checkpoint<S: Scalar>(path: impl AsRef<Path>) -> Result<Model<S>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_json(&text)?.to_model()
}
