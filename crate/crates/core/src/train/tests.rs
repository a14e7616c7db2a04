use super::*;
use crate::nn::ExtractorSpec;
use crate::tensor::softmax_rows;
use proptest::prelude::*;
use rand::Rng as _;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

#[test]
fn cross_entropy_cases() {
    let strong = t(&[2, 3], &[50.0, 0.0, 0.0, 0.0, 0.0, 50.0]);
    assert!(cross_entropy_loss(&strong, &[0, 2]).unwrap() < 1e-20);
    let uniform = t(&[3, 5], &[0.7; 15]);
    assert!((cross_entropy_loss(&uniform, &[0, 3, 4]).unwrap() - 5f64.ln()).abs() < 1e-14);

    let rows: [[f64; 2]; 2] = [[1.0, 2.0], [0.5, -0.5]];
    let labels = [0, 0];
    let expect: f64 = rows
        .iter()
        .zip(labels)
        .map(|(r, y)| -(r[y] - (r[0].exp() + r[1].exp()).ln()))
        .sum::<f64>()
        / 2.0;
    let got = cross_entropy_loss(&t(&[2, 2], &[1.0, 2.0, 0.5, -0.5]), &labels).unwrap();
    assert!((got - expect).abs() < 1e-15);

    assert!(matches!(cross_entropy_loss(&uniform, &[0, 5, 1]), Err(Error::Contract(_))));
}

/// Gaussian head with Z=2, K=2 over 2-d features.
fn tiny_gaussian(seed: u64) -> Model {
    let spec = ModelSpec {
        extractor: ExtractorSpec::Dense {
            input_dim: 2,
            hidden: vec![2],
        },
        z_dim: 2,
        num_classes: 2,
        head_kind: HeadKind::Gaussian,
        stage1_hidden: vec![],
    };
    let mut model = Model::build(spec, seed).unwrap();
    let mut r = rng::rng_from(seed, &[77]);
    for g in Group::ALL {
        for p in &mut model.group_mut(g).params {
            let data = (0..p.value.numel()).map(|_| r.random_range(-1.0..1.0)).collect();
            p.value = Tensor::new(p.value.shape().to_vec(), data).unwrap();
        }
    }
    model
}

fn param<'a>(model: &'a Model, g: Group, name: &str) -> &'a [f64] {
    model.group(g).params.iter().find(|p| p.name == name).unwrap().value.data()
}

/// Row-vector times `[n_in × n_out]` matrix plus bias.
fn affine(x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let n_out = b.len();
    (0..n_out)
        .map(|j| b[j] + x.iter().enumerate().map(|(i, xi)| xi * w[i * n_out + j]).sum::<f64>())
        .collect()
}

fn hand_elbo(model: &Model, feats: &[[f64; 2]], labels: &[usize], eps: &[Vec<[f64; 2]>], kl_scale: f64) -> f64 {
    let mlp = |f: &[f64], branch: &str| {
        let th = Group::Theta;
        let h: Vec<f64> = affine(f, param(model, th, &format!("{branch}0.weight")), param(model, th, &format!("{branch}0.bias")))
            .into_iter()
            .map(|v| v.max(0.0))
            .collect();
        affine(&h, param(model, th, &format!("{branch}1.weight")), param(model, th, &format!("{branch}1.bias")))
    };
    let n = feats.len() as f64;
    let mut ce = 0.0;
    let mut kl = 0.0;
    for (i, f) in feats.iter().enumerate() {
        let mu = mlp(f, "mu");
        let var: Vec<f64> = mlp(f, "sigma").iter().map(|r| 1.0 / (1.0 + (-r).exp())).collect();
        for d in 0..2 {
            kl += 0.5 * (mu[d] * mu[d] + var[d] - 1.0 - var[d].ln());
        }
        for e in eps {
            let z: Vec<f64> = (0..2).map(|d| mu[d] + var[d].sqrt() * e[i][d]).collect();
            let l = affine(&z, param(model, Group::Nu, "0.weight"), param(model, Group::Nu, "0.bias"));
            let lse = (l[0].exp() + l[1].exp()).ln();
            ce -= (l[labels[i]] - lse) / eps.len() as f64;
        }
    }
    ce / n + kl_scale * kl / n
}

fn head_elbo(model: &Model, feats: &[[f64; 2]], labels: &[usize], eps: &[Vec<[f64; 2]>], kl_scale: f64) -> ElboTerms2 {
    let tape = Tape::new();
    let bound = model.bind(&tape);
    let f = tape.leaf(t(&[feats.len(), 2], &feats.concat()));
    let eps: Vec<Tensor> = eps.iter().map(|e| t(&[e.len(), 2], &e.concat())).collect();
    let terms = elbo_loss_var(&tape, model, &bound, f, labels, kl_scale, &eps).unwrap();
    let value = |v: Var| tape.value(v).item().unwrap();
    ElboTerms2 {
        loss: value(terms.loss),
        ce: value(terms.ce),
        kl: value(terms.kl),
    }
}

struct ElboTerms2 {
    loss: f64,
    ce: f64,
    kl: f64,
}

#[test]
fn elbo_hand_value_z2_k2() {
    let model = tiny_gaussian(3);
    let feats = [[0.4, 1.1], [0.9, 0.2], [1.5, 0.7]];
    let labels = [1, 0, 1];
    let eps = vec![
        vec![[0.3, -1.2], [1.0, 0.5], [-0.7, 0.1]],
        vec![[-0.4, 0.8], [0.2, -1.5], [0.6, 0.9]],
    ];
    let got = head_elbo(&model, &feats, &labels, &eps, 0.5);
    let expect = hand_elbo(&model, &feats, &labels, &eps, 0.5);
    assert!((got.loss - expect).abs() < 1e-10, "{} vs {expect}", got.loss);
    assert!((got.loss - (got.ce + 0.5 * got.kl)).abs() < 1e-14);
}

#[test]
fn elbo_without_kl_is_mc_cross_entropy() {
    let model = tiny_gaussian(4);
    let feats = [[0.1, 0.2], [1.3, -0.4]];
    let labels = [0, 1];
    let eps = vec![vec![[0.5, 0.5], [-1.0, 0.3]]];
    let terms = head_elbo(&model, &feats, &labels, &eps, 0.25);

    // the same logits fed straight into cross_entropy_loss
    let q = crate::variational::posterior_params(&model, &t(&[2, 2], &feats.concat())).unwrap();
    let z = crate::variational::reparam_with_eps(&q, t(&[2, 2], &eps[0].concat())).unwrap().z;
    let nu = &model.group(Group::Nu).params;
    let mut logits = crate::tensor::matmul(&z, &nu[0].value).unwrap();
    for row in logits.data_mut().chunks_mut(2) {
        row[0] += nu[1].value.data()[0];
        row[1] += nu[1].value.data()[1];
    }
    let ce = cross_entropy_loss(&logits, &labels).unwrap();
    assert!((terms.ce - ce).abs() < 1e-12);
    assert!((terms.loss - 0.25 * terms.kl - ce).abs() < 1e-12);
}

#[test]
fn elbo_with_prior_posterior_has_no_kl() {
    // mu weights zero and a huge raw variance give mu = 0 and sigma ≈ 1
    let mut model = tiny_gaussian(5);
    for p in &mut model.group_mut(Group::Theta).params {
        let val = if p.name == "sigma1.bias" { 40.0 } else { 0.0 };
        if p.name.starts_with("mu") || p.name.starts_with("sigma1") {
            p.value = p.value.map(|_| val);
        }
    }
    let terms = head_elbo(&model, &[[0.3, 0.6]], &[1], &[vec![[0.2, -0.9]]], 0.5);
    assert!(terms.kl.abs() < 1e-15);
    assert!((terms.loss - terms.ce).abs() < 1e-15);
}

#[test]
fn elbo_requires_samples_and_gaussian_head() {
    let model = tiny_gaussian(1);
    let x = t(&[1, 2], &[0.0, 1.0]);
    assert!(elbo_loss(&model, &x, &[0], 0.5, &[]).is_err());
    let det = Model::<f64>::build(model.spec().with_head(HeadKind::Deterministic, 2), 1).unwrap();
    assert!(elbo_loss(&det, &x, &[0], 0.5, &[Tensor::zeros(vec![1, 2])]).is_err());
}

#[test]
fn adam_zero_gradient_is_a_no_op() {
    let mut w = t(&[3], &[0.5, -1.0, 2.0]);
    let before = w.clone();
    let mut state = AdamState::new([vec![3]]);
    for _ in 0..3 {
        adam_step(&mut [&mut w], &[Tensor::zeros(vec![3])], &mut state, 1e-3, &AdamConfig::default()).unwrap();
    }
    assert_eq!(w, before);
    assert_eq!(state.t, 3);
}

#[test]
fn adam_first_step_is_lr_in_gradient_sign() {
    let lr = 1e-3;
    let mut w = t(&[3], &[0.0; 3]);
    let mut state = AdamState::new([vec![3]]);
    adam_step(&mut [&mut w], &[t(&[3], &[0.7, -3.0, 1e3])], &mut state, lr, &AdamConfig::default()).unwrap();
    for (&wi, sign) in w.data().iter().zip([-1.0, 1.0, -1.0]) {
        assert!((wi - sign * lr).abs() < 1e-6 * lr);
    }
}

#[test]
fn adam_three_steps_on_square() {
    let (lr, b1, b2, eps) = (0.1, 0.9, 0.999, 1e-8);
    let mut w = t(&[1], &[1.0]);
    let mut state = AdamState::new([vec![1]]);
    let (mut rw, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
    for step in 1..=3 {
        let g = 2.0 * w.data()[0];
        adam_step(&mut [&mut w], &[t(&[1], &[g])], &mut state, lr, &AdamConfig::default()).unwrap();
        let rg = 2.0 * rw;
        m = b1 * m + (1.0 - b1) * rg;
        v = b2 * v + (1.0 - b2) * rg * rg;
        let mh = m / (1.0 - b1.powi(step));
        let vh = v / (1.0 - b2.powi(step));
        rw -= lr * mh / (vh.sqrt() + eps);
        assert!((w.data()[0] - rw).abs() < 1e-12);
    }
}

#[test]
fn adam_skips_frozen_groups() {
    let spec = ModelSpec {
        extractor: ExtractorSpec::Dense {
            input_dim: 2,
            hidden: vec![3],
        },
        z_dim: 2,
        num_classes: 2,
        head_kind: HeadKind::Deterministic,
        stage1_hidden: vec![],
    };
    let mut model = Model::<f64>::build(spec, 1).unwrap();
    model.set_trainable(Group::Beta, false);
    let beta = model.group(Group::Beta).digest();
    let theta = model.group(Group::Theta).digest();
    let grads = Group::ALL.map(|g| {
        model.group(g).params.iter().map(|p| Tensor::ones(p.value.shape().to_vec())).collect()
    });
    let mut opt = Adam::new(&model, 1e-2, AdamConfig::default());
    opt.step(&mut model, &grads).unwrap();
    assert_eq!(model.group(Group::Beta).digest(), beta);
    assert_ne!(model.group(Group::Theta).digest(), theta);
}

#[test]
fn early_stop_tracks_best_and_patience() {
    let model = tiny_gaussian(1);
    let mut s = EarlyStopState::<f64>::default();
    let losses = [1.0, 0.8, 0.9, 0.7, 0.75, 0.76, 0.5];
    let mut best = Vec::new();
    let mut stopped_at = None;
    for (i, &l) in losses.iter().enumerate() {
        if s.update(i + 1, l, &model, 2) {
            stopped_at = Some(i + 1);
            break;
        }
        best.push(s.best_val_loss);
    }
    assert!(best.windows(2).all(|w| w[1] <= w[0]));
    assert_eq!(stopped_at, Some(6));
    assert_eq!((s.best_epoch, s.best_val_loss), (4, 0.7));
}

#[test]
fn config_validation() {
    let ok = TrainConfig::default();
    assert!(ok.validate().is_ok());
    assert_eq!(ok.kl_scale_for(32), 1.0 / 32.0);
    let bad = [
        TrainConfig { learning_rate: 0.0, ..ok.clone() },
        TrainConfig { patience: 0, ..ok.clone() },
        TrainConfig { kl_scale: Some(0.0), ..ok.clone() },
        TrainConfig { batch_size: 0, ..ok.clone() },
    ];
    for cfg in bad {
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
    let parsed: TrainConfig = serde_json::from_str(r#"{"learning_rate": 0.01}"#).unwrap();
    assert_eq!(parsed.max_epochs, 40);
    assert!(serde_json::from_str::<TrainConfig>(r#"{"lr": 0.01}"#).is_err());
}

#[test]
fn temperature_uniform_logits_keep_unit_t() {
    let logits = vec![vec![0.3; 4]; 6];
    let ts = fit_temperature(&logits, &[0, 1, 2, 3, 0, 1]).unwrap();
    assert_eq!(ts.temperature, 1.0);
}

fn random_logits(seed: u64, n: usize, k: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut r = rng::rng_from(seed, &[]);
    let logits: Vec<Vec<f64>> = (0..n).map(|_| (0..k).map(|_| r.random_range(-3.0..3.0)).collect()).collect();
    // labels drawn from a softer version of the logits so T* is interior
    let labels = logits
        .iter()
        .map(|row| {
            let p = softmax_rows(&t(&[1, k], &row.iter().map(|v| v / 2.5).collect::<Vec<_>>())).unwrap();
            let u: f64 = r.random_range(0.0..1.0);
            let mut acc = 0.0;
            p.data().iter().position(|&pi| {
                acc += pi;
                u < acc
            })
            .unwrap_or(k - 1)
        })
        .collect();
    (logits, labels)
}

#[test]
fn temperature_scales_with_logits() {
    let (logits, labels) = random_logits(8, 400, 4);
    let t1 = fit_temperature(&logits, &labels).unwrap().temperature;
    assert!(t1 > 1.0, "{t1}");
    let c = 1.7;
    let scaled: Vec<Vec<f64>> = logits.iter().map(|r| r.iter().map(|v| v * c).collect()).collect();
    let tc = fit_temperature(&scaled, &labels).unwrap().temperature;
    assert!((tc.ln() - (c * t1).ln()).abs() < 1e-3, "{tc} vs {}", c * t1);
    // independent oracle: fine grid over ln T
    let grid_best = (0..=20_000)
        .map(|i| (T_MIN.ln() + (T_MAX / T_MIN).ln() * i as f64 / 20_000.0).exp())
        .min_by(|a, b| nll_at_temperature(&logits, &labels, *a).total_cmp(&nll_at_temperature(&logits, &labels, *b)))
        .unwrap();
    assert!((t1.ln() - grid_best.ln()).abs() < 1e-3);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn temperature_never_hurts_and_keeps_argmax(seed in any::<u64>(), n in 1usize..60) {
        let (logits, labels) = random_logits(seed, n, 3);
        let ts = fit_temperature(&logits, &labels).unwrap();
        prop_assert!(nll_at_temperature(&logits, &labels, ts.temperature) <= nll_at_temperature(&logits, &labels, 1.0));
        let scaled = ts.probs(&logits);
        for (row, p) in logits.iter().zip(&scaled) {
            prop_assert_eq!(crate::metrics::argmax(row), crate::metrics::argmax(p));
        }
    }
}

#[test]
fn temperature_input_errors() {
    assert!(fit_temperature(&[], &[]).is_err());
    assert!(fit_temperature(&[vec![0.0, 1.0]], &[2]).is_err());
    assert!(TemperatureScale::new(0.0).is_err());
}
