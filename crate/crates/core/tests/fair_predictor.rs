use std::path::Path;

use fairproxy_core::datasets::{make_synthetic, SyntheticSpec, TabularDataset};
use fairproxy_core::diffcore::Tensor;
use fairproxy_core::fair_predictor::{
    evaluate, train_dp, train_eo, train_plain, train_predictor, write_predictions_csv, FairPredictor, Objective,
    PredictorConfig, ProxyBank, BANK_MAGIC,
};
use fairproxy_core::hgr::{FitProtocol, HgrConfig};
use fairproxy_core::metrics::MetricsReport;
use fairproxy_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn quick_cfg(epochs: usize) -> PredictorConfig {
    PredictorConfig {
        hidden: vec![16, 16],
        epochs,
        batch_size: 128,
        adversary: HgrConfig {
            hidden: vec![16, 16],
            ..HgrConfig::default()
        },
        ..PredictorConfig::default()
    }
}

/// A bank whose draws are the true sensitive attribute plus small noise.
fn oracle_bank(ds: &TabularDataset, k: usize, seed: u64) -> ProxyBank {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = ds
        .sensitive()
        .iter()
        .flat_map(|&s| (0..k).map(|_| s as f64 + 0.1 * rng.random::<f64>()).collect::<Vec<_>>())
        .collect();
    ProxyBank::new(ds.len(), k, 1, data).unwrap()
}

fn random_bank(n: usize, k: usize, d: usize, seed: u64) -> ProxyBank {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ProxyBank::new(n, k, d, (0..n * k * d).map(|_| rng.random::<f64>()).collect()).unwrap()
}

#[test]
fn zero_weights_reduce_to_plain_training() {
    let ds = make_synthetic(600, 1, &SyntheticSpec::default()).unwrap();
    let bank = random_bank(ds.len(), 5, 2, 2);
    let cfg = quick_cfg(3);
    let plain = train_plain(&ds, &cfg, None).unwrap().model.predict(ds.features()).unwrap();
    let dp = train_dp(&ds, &bank, 0.0, &cfg, None).unwrap().model.predict(ds.features()).unwrap();
    let eo = train_eo(&ds, &bank, 0.0, 0.0, &cfg, None).unwrap().model.predict(ds.features()).unwrap();
    assert_eq!(plain, dp);
    assert_eq!(plain, eo);
    let penalized = train_dp(&ds, &bank, 0.5, &cfg, None).unwrap().model.predict(ds.features()).unwrap();
    assert_ne!(plain, penalized);
}

#[test]
fn zero_logit_predicts_one_half() {
    let ds = make_synthetic(100, 1, &SyntheticSpec::default()).unwrap();
    let out = train_plain(&ds, &quick_cfg(1), None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("h.fprx");
    out.model.save(&path).unwrap();
    // Zero the output layer in the saved weights, then reload.
    let mut records = fairproxy_core::diffcore::checkpoint::load_tensors(&path).unwrap();
    for (name, t) in records.iter_mut() {
        if name.starts_with("h.2.") {
            *t = Tensor::zeros(t.shape());
        }
    }
    let refs: Vec<(&str, &Tensor)> = records.iter().map(|(n, t)| (n.as_str(), t)).collect();
    fairproxy_core::diffcore::checkpoint::save_tensors(refs, &path).unwrap();
    let model = FairPredictor::load(&path).unwrap();
    assert!(model.predict(ds.features()).unwrap().iter().all(|&p| p == 0.5));
}

#[test]
fn batch_and_row_predictions_agree() {
    let ds = make_synthetic(300, 2, &SyntheticSpec::default()).unwrap();
    let model = train_plain(&ds, &quick_cfg(2), None).unwrap().model;
    let batch = model.predict(ds.features()).unwrap();
    assert_eq!(batch, model.predict(ds.features()).unwrap());
    for i in 0..ds.len() {
        let one = ds.select(&[i]);
        let p = model.predict(one.features()).unwrap()[0];
        assert!((p - batch[i]).abs() <= 1e-12);
        assert!(p > 0.0 && p < 1.0);
    }
}

#[test]
fn predictions_ignore_the_bank_after_training() {
    let ds = make_synthetic(400, 3, &SyntheticSpec::default()).unwrap();
    let mut bank = random_bank(ds.len(), 3, 2, 4);
    let model = train_dp(&ds, &bank, 0.3, &quick_cfg(2), None).unwrap().model;
    let before = model.predict(ds.features()).unwrap();
    bank.data_mut().fill(f64::NAN);
    assert_eq!(before, model.predict(ds.features()).unwrap());
}

#[test]
fn bank_must_match_training_rows() {
    let ds = make_synthetic(200, 3, &SyntheticSpec::default()).unwrap();
    let bank = random_bank(199, 2, 1, 1);
    assert!(matches!(train_dp(&ds, &bank, 0.1, &quick_cfg(1), None), Err(Error::Data(_))));
    let dp = Objective::Dp { lambda: 0.1 };
    assert!(train_predictor(&ds, None, dp, &quick_cfg(1), None).is_err());
    let neg = Objective::Dp { lambda: -1.0 };
    assert!(matches!(
        train_predictor(&ds, Some(&random_bank(200, 2, 1, 1)), neg, &quick_cfg(1), None),
        Err(Error::Config(_))
    ));
}

#[test]
fn sparse_label_class_skips_its_adversary() {
    let spec = SyntheticSpec {
        y_bias: -5.0,
        ..SyntheticSpec::default()
    };
    let ds = make_synthetic(500, 4, &spec).unwrap();
    assert!(ds.y().iter().filter(|&&v| v == 1).count() < 60);
    let bank = oracle_bank(&ds, 2, 1);
    let cfg = PredictorConfig {
        batch_size: 32,
        ..quick_cfg(2)
    };
    let out = train_eo(&ds, &bank, 0.5, 0.5, &cfg, None).unwrap();
    assert!(out.diverged.is_none());
    assert_eq!(out.history.epochs.len(), 2);
}

#[test]
fn predictor_checkpoint_roundtrip() {
    let ds = make_synthetic(300, 5, &SyntheticSpec::default()).unwrap();
    let bank = oracle_bank(&ds, 2, 2);
    let model = train_eo(&ds, &bank, 0.2, 0.2, &quick_cfg(2), None).unwrap().model;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("h.fprx");
    model.save(&path).unwrap();
    let back = FairPredictor::load(&path).unwrap();
    assert_eq!(back.arch(), model.arch());
    assert_eq!(back.predict(ds.features()).unwrap(), model.predict(ds.features()).unwrap());
}

#[test]
fn bank_file_roundtrip_and_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let bank = random_bank(7, 3, 2, 9);
    let path = dir.path().join("z.bank");
    bank.save(&path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..5], BANK_MAGIC);
    assert_eq!(bytes.len(), 5 + 24 + 7 * 3 * 2 * 8);
    assert_eq!(ProxyBank::load(&path).unwrap(), bank);
    assert_eq!(bank.sample(2, 1), &bank.data()[(2 * 3 + 1) * 2..(2 * 3 + 2) * 2]);

    std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    assert!(matches!(ProxyBank::load(&path), Err(Error::Format { .. })));
    let mut bad = bytes.clone();
    bad[0] = b'X';
    std::fs::write(&path, &bad).unwrap();
    assert!(matches!(ProxyBank::load(&path), Err(Error::Format { .. })));
    assert!(ProxyBank::load(Path::new("/nonexistent/z.bank")).is_err());
    assert!(ProxyBank::new(2, 0, 1, vec![]).is_err());
}

#[test]
fn evaluation_reports_and_exports() {
    let ds = make_synthetic(400, 6, &SyntheticSpec::default()).unwrap();
    let bank = oracle_bank(&ds, 4, 3);
    let model = train_plain(&ds, &quick_cfg(3), None).unwrap().model;
    let a = evaluate(&model, &ds, None, &FitProtocol::default(), 1).unwrap();
    assert_eq!(a, evaluate(&model, &ds, None, &FitProtocol::default(), 1).unwrap());
    assert_eq!(a.hgr_pred_z, None);

    // Row order does not change any metric.
    let mut idx: Vec<usize> = (0..ds.len()).collect();
    idx.reverse();
    assert_eq!(a, evaluate(&model, &ds.select(&idx), None, &FitProtocol::default(), 1).unwrap());

    let protocol = FitProtocol {
        outer_steps: 5,
        batch: 64,
        ..FitProtocol::default()
    };
    let b = evaluate(&model, &ds, Some(&bank), &protocol, 1).unwrap();
    let h = b.hgr_pred_z.unwrap();
    assert!((0.0..=1.0).contains(&h));

    let probs = model.predict(ds.features()).unwrap();
    let mut out = Vec::new();
    write_predictions_csv(ds.row_ids(), &probs, &mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    assert!(text.starts_with("row_id,probability,predicted_label\n"));
    assert_eq!(text.lines().count(), ds.len() + 1);
}

fn plain_p_rule(spec: &SyntheticSpec, seed: u64) -> f64 {
    let ds = make_synthetic(6000, seed, spec).unwrap();
    let (train, test) = ds.split(0.8, seed).unwrap();
    let model = train_plain(&train, &quick_cfg(10), None).unwrap().model;
    let probs = model.predict(test.features()).unwrap();
    MetricsReport::from_predictions(&probs, test.y(), test.sensitive()).unwrap().p_rule
}

#[test]
fn generator_without_group_effect_gives_fair_plain_model() {
    let spec = SyntheticSpec {
        s_to_xd: 0.0,
        s_to_y: 0.0,
        ..SyntheticSpec::default()
    };
    let p = plain_p_rule(&spec, 31);
    assert!(p >= 0.9, "p-rule {p}");
}

#[test]
fn generator_with_strong_group_effect_gives_unfair_plain_model() {
    let spec = SyntheticSpec {
        s_to_xd: 2.0,
        s_to_y: 2.0,
        y_bias: -2.0,
        ..SyntheticSpec::default()
    };
    let p = plain_p_rule(&spec, 32);
    assert!(p <= 0.5, "p-rule {p}");
}

#[test]
fn negative_class_adversary_closes_false_positive_gap() {
    // Only negatives of group 1 are shifted, so the plain model's group gap
    // is in false positives.
    let spec = SyntheticSpec {
        s_to_xd: 0.0,
        xd_shift_neg_s1: 1.5,
        ..SyntheticSpec::default()
    };
    let ds = make_synthetic(8000, 41, &spec).unwrap();
    let (train, test) = ds.split(0.8, 41).unwrap();
    let bank = oracle_bank(&train, 4, 5);
    let cfg = quick_cfg(15);
    let report = |model: &FairPredictor| {
        let probs = model.predict(test.features()).unwrap();
        MetricsReport::from_predictions(&probs, test.y(), test.sensitive()).unwrap()
    };
    let base = report(&train_plain(&train, &cfg, None).unwrap().model);
    let fair = report(&train_eo(&train, &bank, 2.0, 0.0, &cfg, None).unwrap().model);
    let (b_fpr, f_fpr) = (base.delta_fpr.unwrap(), fair.delta_fpr.unwrap());
    assert!(b_fpr >= 0.1, "baseline gap {b_fpr}");
    assert!(f_fpr <= 0.5 * b_fpr, "dFPR {b_fpr} -> {f_fpr}");
    let fnr_change = (fair.delta_fnr.unwrap() - base.delta_fnr.unwrap()).abs();
    assert!(fnr_change <= 0.05, "dFNR moved by {fnr_change}");
}
