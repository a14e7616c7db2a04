use super::synth::{default_centers, gen_bar_images, gen_blobs};
use super::*;
use proptest::prelude::*;

fn blobs(n: usize, noise: f64, seed: u64) -> Dataset {
    gen_blobs(n, &default_centers(4, 5.0), 0.5, noise, seed).unwrap()
}

#[test]
fn blobs_are_seed_deterministic() {
    assert_eq!(blobs(300, 0.15, 1), blobs(300, 0.15, 1));
    assert_ne!(blobs(300, 0.15, 1), blobs(300, 0.15, 2));
}

#[test]
fn blobs_are_class_balanced_without_noise() {
    let ds = blobs(400, 0.0, 3);
    assert_eq!(ds.class_counts(), vec![100; 4]);
    assert_eq!(ds.sample_shape(), &[2]);
}

#[test]
fn blob_parameters_are_validated() {
    let c = default_centers(3, 1.0);
    assert!(gen_blobs(10, &c[..1], 0.5, 0.0, 0).is_err());
    assert!(gen_blobs(10, &c, 0.0, 0.0, 0).is_err());
    assert!(gen_blobs(10, &c, 0.5, 0.5, 0).is_err());
    assert!(gen_blobs(10, &c, 0.5, -0.1, 0).is_err());
    assert!(gen_blobs(2, &c, 0.5, 0.0, 0).is_err());
}

#[test]
fn label_noise_matches_bayes_rate() {
    // separated centers: the nearest center is the clean label, so agreement
    // with it estimates the Bayes accuracy 1 − f·(K−1)/K
    let (n, k, f) = (20_000, 4, 0.2);
    let centers = default_centers(k, 10.0);
    let ds = gen_blobs(n, &centers, 0.5, f, 9).unwrap();
    let agree = (0..n)
        .filter(|&i| {
            let x = ds.sample(i);
            let nearest = (0..k)
                .min_by(|&a, &b| {
                    let d = |c: &Vec<f64>| (x[0] - c[0]).powi(2) + (x[1] - c[1]).powi(2);
                    d(&centers[a]).total_cmp(&d(&centers[b]))
                })
                .unwrap();
            nearest == ds.labels()[i]
        })
        .count() as f64
        / n as f64;
    let bayes = 1.0 - f * (k - 1) as f64 / k as f64;
    assert!((agree - bayes).abs() < 0.01, "{agree} vs {bayes}");
}

#[test]
fn bar_images_are_clamped_and_noise_free_per_class() {
    let ds = gen_bar_images(16, 4, 16, 0.3, 1).unwrap();
    assert!(ds.features().iter().all(|&v| (0.0..=1.0).contains(&v)));
    assert_eq!(ds.sample_shape(), &[3, 16, 16]);

    let clean = gen_bar_images(16, 4, 16, 0.0, 2).unwrap();
    for c in 0..4 {
        let members: Vec<usize> = (0..16).filter(|&i| clean.labels()[i] == c).collect();
        for &i in &members[1..] {
            assert_eq!(clean.sample(i), clean.sample(members[0]));
        }
    }
    assert_ne!(clean.sample(0), clean.sample((0..16).find(|&i| clean.labels()[i] != clean.labels()[0]).unwrap()));
    assert!(gen_bar_images(8, 4, 11, 0.1, 0).is_err());
}

#[test]
fn split_sizes_and_partition() {
    let ds = blobs(1000, 0.15, 4);
    let (train, val) = train_val_split(&ds, &SplitSpec::default()).unwrap();
    assert_eq!((train.len(), val.len()), (850, 150));

    // union is the original multiset
    let key = |d: &Dataset, i: usize| (d.sample(i)[0].to_bits(), d.sample(i)[1].to_bits(), d.labels()[i]);
    let mut all: Vec<_> = (0..ds.len()).map(|i| key(&ds, i)).collect();
    let mut parts: Vec<_> = (0..train.len())
        .map(|i| key(&train, i))
        .chain((0..val.len()).map(|i| key(&val, i)))
        .collect();
    all.sort();
    parts.sort();
    assert_eq!(all, parts);

    let again = train_val_split(&ds, &SplitSpec::default()).unwrap();
    assert_eq!(again, (train, val));
}

#[test]
fn stratified_split_is_proportional() {
    let ds = blobs(997, 0.15, 5);
    let (_, val) = train_val_split(&ds, &SplitSpec::default()).unwrap();
    for (all, v) in ds.class_counts().iter().zip(val.class_counts()) {
        assert!((v as f64 - 0.15 * *all as f64).abs() <= 1.0);
    }
}

#[test]
fn split_rejects_singleton_class_and_bad_fraction() {
    let ds = Dataset::new("tiny", DatasetKind::Vector, vec![1], vec![0.0; 5], vec![0, 0, 0, 0, 1], 2).unwrap();
    assert!(matches!(train_val_split(&ds, &SplitSpec::default()), Err(Error::Data(_))));
    let spec = SplitSpec {
        val_fraction: 1.0,
        ..Default::default()
    };
    assert!(train_val_split(&blobs(100, 0.0, 1), &spec).is_err());
}

#[test]
fn minibatches_cover_a_permutation() {
    let batches = minibatches(103, 10, 7).unwrap();
    assert_eq!(batches.len(), 11);
    assert_eq!(batches[10].len(), 3);
    let mut seen: Vec<usize> = batches.concat();
    seen.sort_unstable();
    assert_eq!(seen, (0..103).collect::<Vec<_>>());
    assert_eq!(batches, minibatches(103, 10, 7).unwrap());
    assert_ne!(batches.concat(), minibatches(103, 10, 8).unwrap().concat());
    assert!(minibatches(5, 0, 1).is_err());
}

proptest! {
    #[test]
    fn minibatches_partition_any_size(n in 1usize..300, bs in 1usize..64, seed in any::<u64>()) {
        let batches = minibatches(n, bs, seed).unwrap();
        prop_assert!(batches.iter().all(|b| !b.is_empty() && b.len() <= bs));
        let mut seen: Vec<usize> = batches.concat();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
    }
}

#[test]
fn zero_rotation_is_identity() {
    let imgs = gen_bar_images(4, 4, 16, 0.1, 3).unwrap();
    assert_eq!(rotate_images(&imgs, 0.0).unwrap().features(), imgs.features());
    let vecs = blobs(20, 0.0, 1);
    let r = rotate(&vecs, 0.0).unwrap();
    assert_eq!(r.features(), vecs.features());
}

#[test]
fn four_quarter_turns_restore_images() {
    let imgs = gen_bar_images(4, 4, 16, 0.2, 8).unwrap();
    let mut r = imgs.clone();
    for _ in 0..4 {
        r = rotate_images(&r, 90.0).unwrap();
    }
    for (i, (a, b)) in r.features().iter().zip(imgs.features()).enumerate() {
        assert!((a - b).abs() < 1e-10, "{i}: {a} {b}");
    }
    assert_eq!(r.labels(), imgs.labels());
}

#[test]
fn quarter_turn_moves_pixels_counter_clockwise() {
    let mut px = vec![0.0; 3 * 16 * 16];
    px[16] = 1.0; // channel 0, row 1, column 0 (left edge)
    let ds = Dataset::new("pt", DatasetKind::Image, vec![3, 16, 16], px, vec![0], 2).unwrap();
    let r = rotate_images(&ds, 90.0).unwrap();
    // left edge rotates to the bottom edge
    assert!((r.sample(0)[15 * 16 + 1] - 1.0).abs() < 1e-10);
}

#[test]
fn rotation_kind_contracts() {
    assert!(matches!(rotate_images(&blobs(8, 0.0, 1), 10.0), Err(Error::Contract(_))));
    let v3 = Dataset::new("v3", DatasetKind::Vector, vec![3], vec![0.0; 6], vec![0, 1], 2).unwrap();
    assert!(rotate_vectors(&v3, 10.0).is_err());
    let p = Dataset::new("p", DatasetKind::Vector, vec![2], vec![1.0, 0.0], vec![0], 2).unwrap();
    let r = rotate_vectors(&p, 90.0).unwrap();
    assert!(r.sample(0)[0].abs() < 1e-15 && (r.sample(0)[1] - 1.0).abs() < 1e-15);
}

#[test]
fn default_shift_degrees() {
    assert_eq!(ShiftSpec::default().degrees, vec![10.0, 45.0, 90.0, 135.0, 180.0]);
}

#[test]
fn dataset_new_validates() {
    assert!(Dataset::new("e", DatasetKind::Vector, vec![2], vec![], vec![], 2).is_err());
    assert!(Dataset::new("l", DatasetKind::Vector, vec![1], vec![0.0], vec![3], 2).is_err());
    assert!(Dataset::new("s", DatasetKind::Vector, vec![2], vec![0.0; 3], vec![0], 2).is_err());
    assert!(Dataset::new("i", DatasetKind::Image, vec![4], vec![0.0; 4], vec![0], 2).is_err());
}
