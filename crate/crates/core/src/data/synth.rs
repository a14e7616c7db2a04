use rand::seq::{index, SliceRandom};
use rand::Rng as _;

use super::{Dataset, DatasetKind};
use crate::error::{Error, Result};
use crate::rng::{self, stream};

/// `k` centers evenly spaced on a circle of `radius` in the plane.
pub fn default_centers(k: usize, radius: f64) -> Vec<Vec<f64>> {
    (0..k)
        .map(|c| {
            let a = std::f64::consts::TAU * c as f64 / k as f64;
            vec![radius * a.cos(), radius * a.sin()]
        })
        .collect()
}

/// `n` points from isotropic Gaussians around `centers` (one per class,
/// classes balanced), presented in a seeded random order. Then
/// `floor(label_noise_frac · n)` randomly chosen labels are redrawn uniformly
/// over all classes, which may leave some unchanged.
pub fn gen_blobs(
    n: usize,
    centers: &[Vec<f64>],
    noise_sd: f64,
    label_noise_frac: f64,
    seed: u64,
) -> Result<Dataset> {
    let k = centers.len();
    if k < 2 {
        return Err(Error::Config("blobs need at least 2 centers".into()));
    }
    let dim = centers[0].len();
    if dim == 0 || centers.iter().any(|c| c.len() != dim) {
        return Err(Error::Config("blob centers must share a positive dimension".into()));
    }
    if !(noise_sd > 0.0) {
        return Err(Error::Config(format!("noise_sd {noise_sd} must be positive")));
    }
    if !(0.0..0.5).contains(&label_noise_frac) {
        return Err(Error::Config(format!(
            "label_noise_frac {label_noise_frac} outside [0, 0.5)"
        )));
    }
    if n < k {
        return Err(Error::Config(format!("{n} points cannot cover {k} classes")));
    }
    let mut r = rng::rng_from(seed, &[stream::DATA]);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut r);
    let mut labels = Vec::with_capacity(n);
    let mut features = Vec::with_capacity(n * dim);
    for &slot in &order {
        let class = slot % k;
        let noise = rng::standard_normals(&mut r, dim);
        features.extend(centers[class].iter().zip(noise).map(|(c, e)| c + noise_sd * e));
        labels.push(class);
    }
    let flips = (label_noise_frac * n as f64).floor() as usize;
    for i in index::sample(&mut r, n, flips) {
        labels[i] = r.random_range(0..k);
    }
    Dataset::new("blobs", DatasetKind::Vector, vec![dim], features, labels, k)
}

/// `3 × hw × hw` images of a centered bright bar at one of `k` orientations
/// (`π·class/k`), plus Gaussian pixel noise, clamped to `[0, 1]`.
pub fn gen_bar_images(n: usize, k: usize, hw: usize, noise_sd: f64, seed: u64) -> Result<Dataset> {
    if k < 2 {
        return Err(Error::Config("bar images need at least 2 classes".into()));
    }
    if hw < 12 {
        return Err(Error::Config(format!("image side {hw} below 12")));
    }
    if !(noise_sd >= 0.0) {
        return Err(Error::Config(format!("noise_sd {noise_sd} must be non-negative")));
    }
    if n < k {
        return Err(Error::Config(format!("{n} images cannot cover {k} classes")));
    }
    const CHANNEL_GAIN: [f64; 3] = [1.0, 0.8, 0.6];
    let templates: Vec<Vec<f64>> = (0..k).map(|c| bar_template(c, k, hw)).collect();
    let mut r = rng::rng_from(seed, &[stream::DATA]);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut r);
    let plane = hw * hw;
    let mut features = Vec::with_capacity(n * 3 * plane);
    let mut labels = Vec::with_capacity(n);
    for &slot in &order {
        let class = slot % k;
        for gain in CHANNEL_GAIN {
            let noise = if noise_sd > 0.0 {
                rng::standard_normals(&mut r, plane)
            } else {
                vec![0.0; plane]
            };
            features.extend(
                templates[class]
                    .iter()
                    .zip(noise)
                    .map(|(&t, e)| (gain * t + noise_sd * e).clamp(0.0, 1.0)),
            );
        }
        labels.push(class);
    }
    Dataset::new("bars", DatasetKind::Image, vec![3, hw, hw], features, labels, k)
}

fn bar_template(class: usize, k: usize, hw: usize) -> Vec<f64> {
    let angle = std::f64::consts::PI * class as f64 / k as f64;
    let (sin, cos) = angle.sin_cos();
    let c = (hw as f64 - 1.0) / 2.0;
    let half_len = 0.4 * hw as f64;
    let mut img = Vec::with_capacity(hw * hw);
    for i in 0..hw {
        for j in 0..hw {
            let (x, y) = (j as f64 - c, c - i as f64);
            let across = (-x * sin + y * cos).abs();
            let along = (x * cos + y * sin).abs();
            let v = if along <= half_len {
                (1.5 - across).clamp(0.0, 1.0)
            } else {
                0.0
            };
            img.push(v);
        }
    }
    img
}
