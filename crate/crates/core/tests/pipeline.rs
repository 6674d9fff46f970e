use std::fs;

use csalnet_core::data::{generate_synthetic, load_dataset, SynthConfig};
use csalnet_core::gt::{fixations_to_map, GtConfig, GtMeta};
use csalnet_core::imageio::load_map16;
use csalnet_core::metrics::Metric;
use csalnet_core::pipeline::{
    dataset_gt_config, evaluate_holdout, gt_path, holdout_set, preprocess, EvalConfig, Negatives, PreprocessConfig,
    Predictor, META,
};
use csalnet_core::{build_model, ModelConfig};

fn small() -> SynthConfig {
    SynthConfig { n_subjects: 3, n_scenarios: 2, frames_per_trial: 4, image_size: 32, seed: 1, ..Default::default() }
}

#[test]
fn preprocessed_set_is_loadable_and_reproducible() {
    let root = tempfile::tempdir().unwrap();
    let m = generate_synthetic(&small(), &root.path().join("raw")).unwrap();
    let cfg = PreprocessConfig::default();
    let (a, b) = (root.path().join("a"), root.path().join("b"));
    let s = preprocess(&m, &a, &cfg).unwrap();
    preprocess(&m, &b, &cfg).unwrap();
    assert_eq!(s.frames, m.num_frames());
    assert!((s.sigma_pixels - 9.3 * 32.0 / 110.0).abs() < 1e-12);

    let pm = load_dataset(&a).unwrap();
    assert_eq!(pm.records.len(), m.records.len());
    let (gt, pre) = dataset_gt_config(&pm).unwrap();
    assert!(pre);
    assert!((csalnet_core::gt::sigma_pixels(&gt, 32) - s.sigma_pixels).abs() < 1e-12);
    for r in &pm.records {
        let rel = r.rel_dir();
        for name in [META.to_string(), "frame_00002.png".into(), "gt_00001.png".into()] {
            assert_eq!(fs::read(a.join(&rel).join(&name)).unwrap(), fs::read(b.join(&rel).join(&name)).unwrap());
        }
        let meta = GtMeta::load(&r.dir.join(META)).unwrap();
        assert_eq!(meta.frames_back, 3);
    }
}

#[test]
fn single_frame_window_ignores_earlier_fixations() {
    let root = tempfile::tempdir().unwrap();
    let m = generate_synthetic(&small(), &root.path().join("raw")).unwrap();
    let gt = GtConfig { frames_back: 1, ..GtConfig::default() };
    let out = root.path().join("p");
    preprocess(&m, &out, &PreprocessConfig { gt, ..Default::default() }).unwrap();
    let r = &m.records[0];
    let only_now: Vec<_> = r.fixations.iter().filter(|f| f.frame_index == 2).copied().collect();
    let want = fixations_to_map(&only_now, 2, 32, 32, &gt).unwrap().map;
    let got = load_map16(&gt_path(&out.join(r.rel_dir()), 2), 1.0).unwrap();
    assert!(want.data().iter().zip(got.data()).all(|(a, b)| (a - b).abs() <= 1.0 / 65535.0));
}

#[test]
fn holdout_evaluation_fills_every_metric() {
    let root = tempfile::tempdir().unwrap();
    let m = generate_synthetic(&small(), root.path()).unwrap();
    let cfg = EvalConfig { n_splits: 10, ..Default::default() };
    let r = evaluate_holdout("cb", &m, 2, Predictor::CenterBias { sigma_frac: 0.25 }, &cfg).unwrap();
    assert_eq!(r.frames, 8 * 4);
    for metric in Metric::ALL {
        assert!(r.get(metric).is_some(), "{metric:?}");
    }
    let again = evaluate_holdout("cb", &m, 2, Predictor::CenterBias { sigma_frac: 0.25 }, &cfg).unwrap();
    assert_eq!(r.to_csv(), again.to_csv());

    let net = build_model(&ModelConfig { channel_widths: vec![4, 4, 8, 8, 8, 8], ..ModelConfig::desk(32) }).unwrap();
    let one = evaluate_holdout("m", &m, 2, Predictor::Model { net: &net, mc_samples: 1 }, &cfg).unwrap();
    let many = evaluate_holdout("m", &m, 2, Predictor::Model { net: &net, mc_samples: 4 }, &cfg).unwrap();
    assert_ne!(one.to_csv(), many.to_csv());
    assert!(evaluate_holdout("m", &m, 9, Predictor::Model { net: &net, mc_samples: 0 }, &cfg).is_err());
}

#[test]
fn negatives_come_from_the_requested_pool() {
    let root = tempfile::tempdir().unwrap();
    let m = generate_synthetic(&small(), root.path()).unwrap();
    let same = holdout_set(&m, 1, Negatives::SameSubject).unwrap();
    let other = holdout_set(&m, 1, Negatives::OtherSubjects).unwrap();
    let held: usize = m.records.iter().filter(|r| r.subject_id == 1).map(|r| r.fixations.len()).sum();
    let rest: usize = m.records.iter().filter(|r| r.subject_id != 1).map(|r| r.fixations.len()).sum();
    let first = &m.records.iter().find(|r| r.subject_id == 1).unwrap().fixations;
    assert_eq!(same.others[0].len(), held - first.len());
    assert_eq!(other.others[0].len(), rest);
    assert!((same.baseline.sum() - 1.0).abs() < 1e-9);
}
