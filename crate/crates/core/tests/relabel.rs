use std::collections::BTreeMap;

use ndarray::{Array1, Array2};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use tasgen_core::data::{MinMaxNormalizer, TimeSeriesSample};
use tasgen_core::embedding::ModelConfig;
use tasgen_core::nn::ParamTensor;
use tasgen_core::relabel::{
    argmax, fuse_features, relabel, significance_filter, train_classifier, ClassifierHyper,
    FeatureMode, LightweightClassifier, Provenance, SignificanceConfig,
};
use tasgen_core::vae::HtsVaeModel;

fn classes(k: usize) -> Vec<String> {
    (0..k).map(|i| format!("class{i}")).collect()
}

fn clusters(n: usize, seed: u64) -> (Array2<f64>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.5).unwrap();
    let mut x = Array2::zeros((2 * n, 4));
    let mut y = Vec::with_capacity(2 * n);
    for i in 0..2 * n {
        let label = i % 2;
        let centre = if label == 0 { -2.0 } else { 2.0 };
        for d in 0..4 {
            x[[i, d]] = centre + noise.sample(&mut rng);
        }
        y.push(label);
    }
    (x, y)
}

fn quick() -> ClassifierHyper {
    ClassifierHyper {
        epochs: 20,
        lr: 0.05,
        ..ClassifierHyper::default()
    }
}

fn sample(len: usize, bands: usize, anchor: &str) -> TimeSeriesSample {
    TimeSeriesSample::new(
        "s",
        (0..bands).map(|b| format!("b{b}")).collect(),
        (0..len as i64).collect(),
        Array2::from_shape_fn((bands, len), |(c, t)| {
            0.5 + 0.3 * ((t as f64) * 0.2 + c as f64).sin()
        }),
        0,
        anchor,
    )
    .unwrap()
}

/// Output layer with zero weights and the given bias, so every input gets
/// the same logits.
fn constant_classifier(bias: &[f64]) -> LightweightClassifier {
    let k = bias.len();
    let mut params = BTreeMap::new();
    params.insert(
        "cls.hidden.w".into(),
        ParamTensor {
            shape: vec![2, 3],
            data: vec![0.1; 6],
        },
    );
    params.insert(
        "cls.hidden.b".into(),
        ParamTensor {
            shape: vec![3],
            data: vec![0.0; 3],
        },
    );
    params.insert(
        "cls.out.w".into(),
        ParamTensor {
            shape: vec![3, k],
            data: vec![0.0; 3 * k],
        },
    );
    params.insert(
        "cls.out.b".into(),
        ParamTensor {
            shape: vec![k],
            data: bias.to_vec(),
        },
    );
    LightweightClassifier {
        classes: classes(k),
        feature_mean: vec![0.0; 2],
        feature_scale: vec![1.0; 2],
        params,
    }
}

#[test]
fn separable_clusters_classified_on_held_out_points() {
    let (x, y) = clusters(100, 1);
    let clf = train_classifier(&x, &y, &classes(2), &quick()).unwrap();
    let train_acc = clf
        .predict(&x)
        .unwrap()
        .iter()
        .zip(&y)
        .filter(|(p, t)| p == t)
        .count() as f64
        / y.len() as f64;
    assert!(train_acc >= 0.95, "training accuracy {train_acc}");
    let (xt, yt) = clusters(200, 2);
    let pred = clf.predict(&xt).unwrap();
    let acc = pred.iter().zip(&yt).filter(|(p, t)| p == t).count() as f64 / yt.len() as f64;
    assert!(acc >= 0.98, "held-out accuracy {acc}");
}

#[test]
fn duplicated_training_set_gives_identical_classifier() {
    let (x, y) = clusters(40, 3);
    let a = train_classifier(&x, &y, &classes(2), &quick()).unwrap();
    let x2 = ndarray::concatenate![ndarray::Axis(0), x, x];
    let y2: Vec<usize> = y.iter().chain(&y).copied().collect();
    let b = train_classifier(&x2, &y2, &classes(2), &quick()).unwrap();
    let (probe, _) = clusters(30, 4);
    assert_eq!(a.logits(&probe).unwrap(), b.logits(&probe).unwrap());
}

#[test]
fn classifier_input_errors() {
    let empty = Array2::<f64>::zeros((0, 3));
    assert!(train_classifier(&empty, &[], &classes(2), &quick())
        .unwrap_err()
        .to_string()
        .contains("empty feature list"));
    let x = Array2::from_elem((5, 2), 1.0);
    let err = train_classifier(&x, &[1; 5], &classes(3), &quick()).unwrap_err();
    assert!(
        err.to_string()
            .contains("cannot train classifier on one class"),
        "{err}"
    );
}

#[test]
fn tied_probabilities_pick_lowest_class() {
    let clf = constant_classifier(&[1.0, 0.0, 1.0]);
    let x = Array2::from_elem((4, 2), 0.3);
    let p = clf.probabilities(&x).unwrap();
    assert_eq!(p[[0, 0]], p[[0, 2]]);
    assert_eq!(clf.predict(&x).unwrap(), vec![0; 4]);
    assert_eq!(argmax(Array1::from(vec![0.2, 0.7, 0.7])), 1);
}

#[test]
fn no_significant_steps_inherit_everything() {
    let s = sample(20, 2, "class1");
    let clf = constant_classifier(&[5.0, 0.0]);
    let features = Array2::zeros((20, 2));
    let seq = relabel(&s, &[true; 20], &[false; 20], &clf, &features).unwrap();
    assert!(seq.labels.iter().all(|l| l == "class1"));
    assert!(seq.provenance.iter().all(|p| *p == Provenance::Inherited));
    assert!(seq.significant_steps.is_empty());
    assert!(relabel(&s, &[true; 19], &[false; 20], &clf, &features).is_err());
}

fn small_model(bands: usize, window: usize) -> HtsVaeModel {
    let cfg = ModelConfig {
        temporal_dim: 8,
        spectral_dim: 3,
        conv_hidden: 8,
        gru_hidden: 8,
        posterior_hidden: 8,
        prior_hidden: 8,
        head_hidden: 8,
        flow_layers: 2,
        flow_hidden: 8,
        ..ModelConfig::new(bands, window)
    };
    HtsVaeModel::new(cfg, MinMaxNormalizer::identity(bands), 5).unwrap()
}

#[test]
fn feature_dimensions_follow_mode() {
    let model = small_model(6, 8);
    let s = sample(30, 6, "class0");
    assert_eq!(
        fuse_features(&model, &s, FeatureMode::Full, 2)
            .unwrap()
            .dim(),
        (30, 11)
    );
    assert_eq!(
        fuse_features(&model, &s, FeatureMode::OnlyEt, 2)
            .unwrap()
            .dim(),
        (30, 8)
    );
    assert_eq!(
        fuse_features(&model, &s, FeatureMode::OnlyEs, 2)
            .unwrap()
            .dim(),
        (30, 3)
    );
    let raw = fuse_features(&model, &s, FeatureMode::Raw, 2).unwrap();
    assert_eq!(raw, s.values.t().to_owned());
    let full = fuse_features(&model, &s, FeatureMode::Full, 2).unwrap();
    let es = fuse_features(&model, &s, FeatureMode::OnlyEs, 2).unwrap();
    assert_eq!(full.slice(ndarray::s![.., ..3]), es);
}

#[test]
fn temporal_features_ignore_band_order_with_symmetric_encoder() {
    let bands = 4;
    let model = small_model(bands, 8);
    // first conv: identical weights for every band within each tap
    let var = model.params.get("tenc.conv1.w").unwrap();
    let w = var.as_tensor().to_vec2::<f64>().unwrap();
    let sym: Vec<f64> = (0..3 * bands)
        .flat_map(|row| {
            let tap = row / bands;
            w[tap * bands].clone()
        })
        .collect();
    let shape = var.as_tensor().shape().clone();
    var.set(&candle_core::Tensor::from_vec(sym, shape, &tasgen_core::nn::DEVICE).unwrap())
        .unwrap();
    let s = sample(16, bands, "class0");
    let mut permuted = s.clone();
    let t = 5;
    for c in 0..bands {
        permuted.values[[c, t]] = s.values[[(c + 1) % bands, t]];
    }
    let a = fuse_features(&model, &s, FeatureMode::OnlyEt, 2).unwrap();
    let b = fuse_features(&model, &permuted, FeatureMode::OnlyEt, 2).unwrap();
    let diff = (&a - &b).mapv(f64::abs).fold(0.0_f64, |m, &v| m.max(v));
    assert!(diff < 1e-12, "max difference {diff}");
}

proptest! {
    #[test]
    fn inherited_steps_carry_anchor(
        flags in proptest::collection::vec(any::<bool>(), 12),
        sig_bits in proptest::collection::vec(any::<bool>(), 12),
        bias in proptest::collection::vec(-2.0f64..2.0, 3),
    ) {
        let s = sample(12, 2, "class2");
        let sig: Vec<bool> = flags.iter().zip(&sig_bits).map(|(f, s)| *f && *s).collect();
        let seq = relabel(&s, &flags, &sig, &constant_classifier(&bias), &Array2::zeros((12, 2))).unwrap();
        for t in 0..12 {
            prop_assert_eq!(seq.provenance[t] == Provenance::Inherited, !sig[t]);
            if seq.provenance[t] == Provenance::Inherited {
                prop_assert_eq!(&seq.labels[t], "class2");
            }
        }
    }

    #[test]
    fn shrinking_significance_keeps_other_labels(
        sig in proptest::collection::vec(any::<bool>(), 10),
        drop in proptest::collection::vec(any::<bool>(), 10),
        seed in 0u64..1000,
    ) {
        let s = sample(10, 2, "class0");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 1.0).unwrap();
        let feats = Array2::from_shape_fn((10, 2), |_| noise.sample(&mut rng));
        let (x, y) = clusters(10, seed);
        let clf = train_classifier(&x.slice(ndarray::s![.., ..2]).to_owned(), &y, &classes(2), &ClassifierHyper { epochs: 2, ..quick() }).unwrap();
        let smaller: Vec<bool> = sig.iter().zip(&drop).map(|(a, d)| *a && !*d).collect();
        let a = relabel(&s, &[true; 10], &sig, &clf, &feats).unwrap();
        let b = relabel(&s, &[true; 10], &smaller, &clf, &feats).unwrap();
        for t in 0..10 {
            let removed = sig[t] && !smaller[t];
            if !removed {
                prop_assert_eq!(&a.labels[t], &b.labels[t]);
            }
        }
    }

    #[test]
    fn significance_is_subset_of_flags(
        vals in proptest::collection::vec(-1.0f64..3.0, 24),
        flags in proptest::collection::vec(any::<bool>(), 8),
        frac in 0.01f64..1.0,
    ) {
        let a = Array2::from_shape_vec((3, 8), vals).unwrap();
        let cfg = SignificanceConfig { top_fraction: frac, fixed_threshold: None };
        let m = significance_filter(&a, &flags, &cfg).unwrap();
        for t in 0..8 {
            prop_assert!(!m[t] || flags[t]);
        }
    }

    #[test]
    fn argmax_survives_increasing_transforms(
        logits in proptest::collection::vec(-5.0f64..5.0, 2..6),
        shift in -3.0f64..3.0,
        scale in 0.1f64..4.0,
    ) {
        let l = Array1::from(logits);
        let k = argmax(l.clone());
        prop_assert_eq!(k, argmax(l.mapv(|v| scale * v + shift)));
        prop_assert_eq!(k, argmax(l.mapv(|v| v.powi(3) + v.exp())));
    }

    #[test]
    fn probabilities_sum_to_one(bias in proptest::collection::vec(-30.0f64..30.0, 2..5), x in -5.0f64..5.0) {
        let clf = constant_classifier(&bias);
        let p = clf.probabilities(&Array2::from_elem((3, 2), x)).unwrap();
        for row in p.rows() {
            prop_assert!((row.sum() - 1.0).abs() < 1e-6);
        }
    }
}
