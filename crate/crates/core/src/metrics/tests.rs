use super::*;
use crate::data::DatasetKind;
use crate::nn::{ExtractorSpec, HeadKind, ModelSpec};
use crate::rng;
use proptest::prelude::*;
use rand::Rng as _;

fn preds(conf: &[f64], correct: &[bool]) -> Vec<Prediction> {
    conf.iter()
        .zip(correct)
        .map(|(&c, &ok)| Prediction::from_confidence(c, ok))
        .collect()
}

/// Bins by explicit edge membership, then recomputes both statistics.
fn brute_ece_mce(conf: &[f64], correct: &[bool]) -> (f64, f64) {
    let n = conf.len() as f64;
    let (mut ece, mut mce) = (0.0f64, 0.0f64);
    for k in 1..=10 {
        let (lo, hi) = ((k - 1) as f64 / 10.0, k as f64 / 10.0);
        let members: Vec<usize> = (0..conf.len())
            .filter(|&i| (conf[i] > lo && conf[i] <= hi) || (k == 1 && conf[i] == 0.0))
            .collect();
        if members.is_empty() {
            continue;
        }
        let m = members.len() as f64;
        let acc = members.iter().filter(|&&i| correct[i]).count() as f64 / m;
        let c = members.iter().map(|&i| conf[i]).sum::<f64>() / m;
        ece += m / n * (acc - c).abs();
        mce = mce.max((acc - c).abs());
    }
    (100.0 * ece.min(mce), 100.0 * mce)
}

fn brute_auroc(ins: &[f64], outs: &[f64]) -> f64 {
    let mut s = 0.0;
    for &a in ins {
        for &b in outs {
            s += if a > b {
                1.0
            } else if a == b {
                0.5
            } else {
                0.0
            };
        }
    }
    s / (ins.len() * outs.len()) as f64
}

#[test]
fn ece_hand_fixture() {
    let (ece, mce, bins) = ece_mce(&preds(&[0.6, 0.6, 0.9, 0.9], &[true, false, true, true])).unwrap();
    assert!((ece - 10.0).abs() < 1e-12);
    assert!((mce - 10.0).abs() < 1e-12);
    assert_eq!(bins.total(), 4);
    assert_eq!(bins.bins[5].count, 2);
    assert_eq!(bins.bins[8].count, 2);
    assert!(bins.bins[0].accuracy.is_none());
}

#[test]
fn ece_extremes() {
    let (ece, mce, _) = ece_mce(&preds(&[1.0; 5], &[true; 5])).unwrap();
    assert_eq!((ece, mce), (0.0, 0.0));
    let (ece, mce, _) = ece_mce(&preds(&[1.0; 5], &[false; 5])).unwrap();
    assert_eq!((ece, mce), (100.0, 100.0));
    assert!(ece_mce(&[]).is_err());
}

#[test]
fn bin_edges_are_right_closed() {
    assert_eq!(bin_index(0.0), 0);
    assert_eq!(bin_index(0.1), 0);
    assert_eq!(bin_index(0.1 + 1e-12), 1);
    assert_eq!(bin_index(0.3), 2);
    assert_eq!(bin_index(0.7), 6);
    assert_eq!(bin_index(1.0), 9);
    for k in 1..=10 {
        assert_eq!(bin_index(k as f64 / 10.0), k - 1);
    }
}

#[test]
fn ece_matches_brute_force_on_random_fixtures() {
    let mut r = rng::rng_from(31, &[]);
    for _ in 0..1000 {
        let n = r.random_range(1..60);
        let conf: Vec<f64> = (0..n)
            .map(|_| {
                if r.random_bool(0.2) {
                    r.random_range(0..=10) as f64 / 10.0
                } else {
                    r.random_range(0.0..=1.0)
                }
            })
            .collect();
        let correct: Vec<bool> = (0..n).map(|_| r.random_bool(0.7)).collect();
        let (ece, mce, bins) = ece_mce(&preds(&conf, &correct)).unwrap();
        let (be, bm) = brute_ece_mce(&conf, &correct);
        assert!((ece - be).abs() < 1e-12 && (mce - bm).abs() < 1e-12);
        assert_eq!(bins.total(), n);
    }
}

proptest! {
    #[test]
    fn ece_bounded_by_mce(conf in prop::collection::vec(0.0f64..=1.0, 1..40), seed in any::<u64>()) {
        let mut r = rng::rng_from(seed, &[]);
        let correct: Vec<bool> = conf.iter().map(|_| r.random_bool(0.5)).collect();
        let (ece, mce, _) = ece_mce(&preds(&conf, &correct)).unwrap();
        prop_assert!(0.0 <= ece && ece <= mce && mce <= 100.0);
    }

    #[test]
    fn auroc_in_unit_interval(ins in prop::collection::vec(0.0f64..1.0, 1..20), outs in prop::collection::vec(0.0f64..1.0, 1..20)) {
        let a = auroc(&ins, &outs).unwrap();
        prop_assert!((0.0..=1.0).contains(&a));
        let f = fpr_at_95_tpr(&ins, &outs).unwrap();
        prop_assert!((0.0..=1.0).contains(&f));
    }
}

#[test]
fn nll_cases() {
    assert_eq!(nll(&[vec![1.0, 0.0], vec![0.0, 1.0]], &[0, 1]).unwrap(), 0.0);
    let u = vec![0.25; 4];
    assert!((nll(&[u.clone(), u], &[0, 3]).unwrap() - 4f64.ln()).abs() < 1e-15);
    let v = nll(&[vec![0.7, 0.3], vec![0.2, 0.8]], &[0, 0]).unwrap();
    assert!((v - (-(0.7f64.ln()) - 0.2f64.ln()) / 2.0).abs() < 1e-15);
    // clamped rather than infinite
    let v = nll(&[vec![1.0, 0.0]], &[1]).unwrap();
    assert!((v + 1e-12f64.ln()).abs() < 1e-12);
}

#[test]
fn entropy_cases() {
    assert!((predictive_entropy(&[0.1; 10]) - 10f64.ln()).abs() < 1e-14);
    assert_eq!(predictive_entropy(&[0.0, 1.0, 0.0]), 0.0);
    let h = predictive_entropy(&[0.5, 0.25, 0.25]);
    assert!((h - 1.5 * 2f64.ln()).abs() < 1e-15);
    assert!((h - 1.0397).abs() < 1e-4);
}

#[test]
fn auroc_cases() {
    assert_eq!(auroc(&[0.9, 0.8], &[0.2, 0.1]).unwrap(), 1.0);
    assert_eq!(auroc(&[0.5; 3], &[0.5; 4]).unwrap(), 0.5);
    assert_eq!(auroc(&[0.9, 0.4], &[0.6, 0.3]).unwrap(), 0.75);
    assert!(auroc(&[], &[0.1]).is_err());
}

#[test]
fn auroc_matches_all_pairs() {
    let mut r = rng::rng_from(41, &[]);
    for _ in 0..200 {
        let (n, m) = (r.random_range(1..=200), r.random_range(1..=200));
        // coarse grid so ties are frequent
        let mut draw = |n| (0..n).map(|_| r.random_range(0..20) as f64 / 20.0).collect::<Vec<_>>();
        let (ins, outs) = (draw(n), draw(m));
        assert!((auroc(&ins, &outs).unwrap() - brute_auroc(&ins, &outs)).abs() < 1e-12);
    }
}

#[test]
fn fpr95_cases() {
    assert_eq!(fpr_at_95_tpr(&[0.9, 0.8], &[0.2, 0.1]).unwrap(), 0.0);
    let mut ins = vec![0.9; 19];
    ins.push(0.1);
    let mut outs = vec![0.95; 2];
    outs.extend([0.5; 8]);
    assert!((fpr_at_95_tpr(&ins, &outs).unwrap() - 0.2).abs() < 1e-15);
    assert_eq!(fpr_at_95_tpr(&[0.3; 5], &[0.3; 5]).unwrap(), 1.0);
    assert!(fpr_at_95_tpr(&[0.3], &[]).is_err());
}

#[test]
fn argmax_ties_go_low() {
    assert_eq!(argmax(&[0.4, 0.4, 0.2]), 0);
    let p = Prediction::new(vec![0.3, 0.35, 0.35], 2);
    assert_eq!(p.predicted, 1);
    assert!(!p.correct);
}

#[test]
fn report_matches_composed_oracles() {
    let probs: Vec<Vec<f64>> = [0.95, 0.85, 0.75, 0.65, 0.55, 0.45, 0.35, 0.25, 0.15, 0.05]
        .iter()
        .map(|&p| vec![p, 1.0 - p])
        .collect();
    let labels = [0, 0, 1, 0, 1, 1, 1, 0, 1, 1];
    let report = EvalReport::from_probs(&probs, &labels).unwrap();

    let pred: Vec<usize> = probs.iter().map(|p| if p[1] > p[0] { 1 } else { 0 }).collect();
    let correct: Vec<bool> = pred.iter().zip(&labels).map(|(a, b)| a == b).collect();
    let conf: Vec<f64> = probs.iter().map(|p| p[0].max(p[1])).collect();
    let acc = 100.0 * correct.iter().filter(|&&c| c).count() as f64 / 10.0;
    let nll: f64 = probs.iter().zip(&labels).map(|(p, &y)| -p[y].ln()).sum::<f64>() / 10.0;
    let (ece, mce) = brute_ece_mce(&conf, &correct);

    assert_eq!(report.n, 10);
    assert!((report.accuracy - acc).abs() < 1e-12);
    assert!((report.nll - nll).abs() < 1e-12);
    assert!((report.ece - ece).abs() < 1e-12 && (report.mce - mce).abs() < 1e-12);
    assert_eq!(report.entropy_histogram.mass(), 10);
    assert_eq!(report.entropy_histogram.counts.len(), ENTROPY_BINS);
}

#[test]
fn deterministic_head_ignores_sample_count() {
    let spec = ModelSpec {
        extractor: ExtractorSpec::Dense {
            input_dim: 2,
            hidden: vec![5],
        },
        z_dim: 3,
        num_classes: 3,
        head_kind: HeadKind::Deterministic,
        stage1_hidden: vec![],
    };
    let model = Model::<f64>::build(spec, 2).unwrap();
    let mut r = rng::rng_from(5, &[]);
    let ds = Dataset::new(
        "fixture",
        DatasetKind::Vector,
        vec![2],
        rng::standard_normals(&mut r, 40),
        (0..20).map(|i| i % 3).collect(),
        3,
    )
    .unwrap();
    let a = evaluate(&model, &ds, &PredictConfig::with_m(1, 0)).unwrap();
    let b = evaluate(&model, &ds, &PredictConfig::with_m(9, 4)).unwrap();
    assert_eq!(a, b);
    assert!(a.ece <= a.mce);

    let other = Dataset::new("k4", DatasetKind::Vector, vec![2], vec![0.0; 8], vec![0, 1, 2, 3], 4).unwrap();
    assert!(evaluate(&model, &other, &PredictConfig::default()).is_err());
}
