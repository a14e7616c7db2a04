//! Datasets: synthetic generators, splits, minibatching, rotation shifts and
//! IDX ingestion. Datasets are immutable `f64` tables; models convert batches
//! to their own scalar type.

mod idx;
mod synth;

pub use idx::{load_idx, parse_idx};
pub use synth::{default_centers, gen_bar_images, gen_blobs};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, stream};
use crate::tensor::Tensor;
use crate::Scalar;

pub const DEFAULT_ROTATIONS: [f64; 5] = [10.0, 45.0, 90.0, 135.0, 180.0];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    /// Flat feature vectors.
    Vector,
    /// `c × h × w` images.
    Image,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    name: String,
    kind: DatasetKind,
    sample_shape: Vec<usize>,
    features: Vec<f64>,
    labels: Vec<usize>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        kind: DatasetKind,
        sample_shape: Vec<usize>,
        features: Vec<f64>,
        labels: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self> {
        let stride: usize = sample_shape.iter().product();
        if labels.is_empty() {
            return Err(Error::Data("dataset is empty".into()));
        }
        if num_classes < 2 {
            return Err(Error::Data("need at least 2 classes".into()));
        }
        if stride == 0 || features.len() != stride * labels.len() {
            return Err(Error::Data(format!(
                "{} labels but {} feature values for sample shape {sample_shape:?}",
                labels.len(),
                features.len()
            )));
        }
        if kind == DatasetKind::Image && sample_shape.len() != 3 {
            return Err(Error::Data(format!("image sample shape {sample_shape:?} is not c×h×w")));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::Data(format!("label {bad} outside [0, {num_classes})")));
        }
        Ok(Dataset {
            name: name.into(),
            kind,
            sample_shape,
            features,
            labels,
            num_classes,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn kind(&self) -> DatasetKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.sample_shape
    }

    pub fn sample_len(&self) -> usize {
        self.sample_shape.iter().product()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let s = self.sample_len();
        &self.features[i * s..(i + 1) * s]
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    /// Examples `indices` in the given order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let features = indices.iter().flat_map(|&i| self.sample(i)).copied().collect();
        Dataset {
            name: self.name.clone(),
            kind: self.kind,
            sample_shape: self.sample_shape.clone(),
            features,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    /// Inputs `indices` as a `[batch, ..sample_shape]` tensor.
    pub fn batch<S: Scalar>(&self, indices: &[usize]) -> Tensor<S> {
        let data = indices
            .iter()
            .flat_map(|&i| self.sample(i))
            .map(|&x| S::of(x))
            .collect();
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(&self.sample_shape);
        Tensor::new(shape, data).expect("batch shape matches sample length")
    }

    pub fn inputs<S: Scalar>(&self) -> Tensor<S> {
        self.batch(&(0..self.len()).collect::<Vec<_>>())
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    #[serde(default = "SplitSpec::default_fraction")]
    pub val_fraction: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "SplitSpec::default_stratified")]
    pub stratified: bool,
}

impl SplitSpec {
    fn default_fraction() -> f64 {
        0.15
    }

    fn default_stratified() -> bool {
        true
    }
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            val_fraction: Self::default_fraction(),
            seed: 0,
            stratified: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftSpec {
    #[serde(default = "ShiftSpec::default_degrees")]
    pub degrees: Vec<f64>,
}

impl ShiftSpec {
    fn default_degrees() -> Vec<f64> {
        DEFAULT_ROTATIONS.to_vec()
    }
}

impl Default for ShiftSpec {
    fn default() -> Self {
        ShiftSpec {
            degrees: Self::default_degrees(),
        }
    }
}

/// Disjoint, exhaustive train/validation split.
///
/// The validation size is `round(val_fraction · n)`. When stratified, per-class
/// quotas are allotted by largest remainder so each class is within one example
/// of its proportional share.
pub fn train_val_split(ds: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset)> {
    if !(spec.val_fraction > 0.0 && spec.val_fraction < 1.0) {
        return Err(Error::Config(format!(
            "val_fraction {} outside (0, 1)",
            spec.val_fraction
        )));
    }
    let n = ds.len();
    let n_val = (spec.val_fraction * n as f64).round() as usize;
    if n_val == 0 || n_val == n {
        return Err(Error::Data(format!(
            "val_fraction {} leaves an empty part of a {n}-example set",
            spec.val_fraction
        )));
    }
    let mut rng = rng::rng_from(spec.seed, &[stream::SPLIT]);
    let mut val = Vec::with_capacity(n_val);
    if spec.stratified {
        let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.num_classes];
        for (i, &y) in ds.labels.iter().enumerate() {
            by_class[y].push(i);
        }
        if let Some((c, members)) = by_class
            .iter()
            .enumerate()
            .find(|(_, m)| m.len() == 1)
        {
            return Err(Error::Data(format!(
                "class {c} has {} example; stratified splitting needs at least 2",
                members.len()
            )));
        }
        let exact: Vec<f64> = by_class
            .iter()
            .map(|m| spec.val_fraction * m.len() as f64)
            .collect();
        let mut quota: Vec<usize> = exact.iter().map(|q| q.floor() as usize).collect();
        let mut order: Vec<usize> = (0..quota.len()).collect();
        order.sort_by(|&a, &b| {
            let (fa, fb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
            fb.total_cmp(&fa).then(a.cmp(&b))
        });
        let mut assigned: usize = quota.iter().sum();
        for &c in order.iter().cycle().take(2 * order.len()) {
            if assigned >= n_val {
                break;
            }
            if quota[c] < by_class[c].len() {
                quota[c] += 1;
                assigned += 1;
            }
        }
        for (members, q) in by_class.iter_mut().zip(&quota) {
            members.shuffle(&mut rng);
            val.extend_from_slice(&members[..*q]);
        }
    } else {
        let mut all: Vec<usize> = (0..n).collect();
        all.shuffle(&mut rng);
        val.extend_from_slice(&all[..n_val]);
    }
    val.sort_unstable();
    let mut is_val = vec![false; n];
    for &i in &val {
        is_val[i] = true;
    }
    let train: Vec<usize> = (0..n).filter(|&i| !is_val[i]).collect();
    Ok((
        ds.subset(&train).with_name(format!("{}/train", ds.name)),
        ds.subset(&val).with_name(format!("{}/val", ds.name)),
    ))
}

/// Index batches of a seeded permutation of `0..n`; the last batch may be short.
pub fn minibatches(n: usize, batch_size: usize, epoch_seed: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng::rng_from(epoch_seed, &[stream::SHUFFLE]));
    Ok(perm.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Rotates every image about its center by `degrees` (counter-clockwise),
/// bilinear interpolation, zero outside the source image.
pub fn rotate_images(ds: &Dataset, degrees: f64) -> Result<Dataset> {
    if ds.kind != DatasetKind::Image {
        return Err(Error::Contract(format!(
            "rotate_images needs an image dataset, {} holds vectors",
            ds.name
        )));
    }
    let name = format!("{}@rot{degrees}", ds.name);
    if degrees == 0.0 {
        return Ok(ds.clone().with_name(name));
    }
    let [c, h, w] = [ds.sample_shape[0], ds.sample_shape[1], ds.sample_shape[2]];
    let (sin, cos) = degrees.to_radians().sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let mut features = Vec::with_capacity(ds.features.len());
    for img in ds.features.chunks(c * h * w) {
        for plane in img.chunks(h * w) {
            let at = |i: isize, j: isize| -> f64 {
                if i < 0 || j < 0 || i >= h as isize || j >= w as isize {
                    0.0
                } else {
                    plane[i as usize * w + j as usize]
                }
            };
            for i in 0..h {
                for j in 0..w {
                    // inverse map: output pixel back into the source frame
                    let (x, y) = (j as f64 - cx, cy - i as f64);
                    let xs = cos * x + sin * y;
                    let ys = -sin * x + cos * y;
                    let (si, sj) = (cy - ys, xs + cx);
                    let (i0, j0) = (si.floor(), sj.floor());
                    let (fi, fj) = (si - i0, sj - j0);
                    let (i0, j0) = (i0 as isize, j0 as isize);
                    let v = (1.0 - fi) * ((1.0 - fj) * at(i0, j0) + fj * at(i0, j0 + 1))
                        + fi * ((1.0 - fj) * at(i0 + 1, j0) + fj * at(i0 + 1, j0 + 1));
                    features.push(v);
                }
            }
        }
    }
    Ok(Dataset {
        name,
        features,
        ..ds.clone()
    })
}

/// Rotates two-dimensional feature vectors about the origin.
pub fn rotate_vectors(ds: &Dataset, degrees: f64) -> Result<Dataset> {
    if ds.kind != DatasetKind::Vector || ds.sample_shape != [2] {
        return Err(Error::Contract(format!(
            "rotate_vectors needs 2-d vectors, {} has sample shape {:?}",
            ds.name, ds.sample_shape
        )));
    }
    let (sin, cos) = degrees.to_radians().sin_cos();
    let features = ds
        .features
        .chunks(2)
        .flat_map(|p| [cos * p[0] - sin * p[1], sin * p[0] + cos * p[1]])
        .collect();
    Ok(Dataset {
        name: format!("{}@rot{degrees}", ds.name),
        features,
        ..ds.clone()
    })
}

/// Rotation shift for either kind of dataset.
pub fn rotate(ds: &Dataset, degrees: f64) -> Result<Dataset> {
    match ds.kind {
        DatasetKind::Image => rotate_images(ds, degrees),
        DatasetKind::Vector => rotate_vectors(ds, degrees),
    }
}

#[cfg(test)]
mod tests;
