use std::sync::Arc;

use csalnet_core::metrics::{
    auc_borji, auc_judd, cc, evaluate_all, info_gain, kldiv, nss, s_auc, score_frame, sim, EvalOptions, FixationSet,
    FrameEval, Metric, EPS,
};
use csalnet_core::SaliencyMap;
use proptest::prelude::*;

const S: usize = 12;

fn map_strategy() -> impl Strategy<Value = SaliencyMap> {
    prop::collection::vec(0.0..1.0f64, S * S).prop_map(|v| SaliencyMap::new(S, S, v).unwrap())
}

fn fix_strategy(max: usize) -> impl Strategy<Value = FixationSet> {
    prop::collection::vec((0..S, 0..S), 1..max).prop_map(|p| FixationSet::new(S, S, p).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn auc_judd_ignores_increasing_transforms(m in map_strategy(), f in fix_strategy(8)) {
        let base = auc_judd(&m, &f).unwrap();
        for t in [m.map(|v| v.powi(3)), m.map(|v| (4.0 * v).exp()), m.map(|v| 3.0 * v - 7.0)] {
            prop_assert!((auc_judd(&t, &f).unwrap() - base).abs() < 1e-9);
        }
    }

    #[test]
    fn grid_aucs_ignore_affine_transforms(
        m in map_strategy(), f in fix_strategy(8), o in fix_strategy(30),
        a in 0.1..10.0f64, b in -5.0..5.0f64, seed in any::<u64>()
    ) {
        let t = m.map(|v| a * v + b);
        prop_assert!((auc_borji(&t, &f, 20, seed).unwrap() - auc_borji(&m, &f, 20, seed).unwrap()).abs() < 1e-9);
        prop_assert!((s_auc(&t, &f, &o, 20, seed).unwrap() - s_auc(&m, &f, &o, 20, seed).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn nss_and_cc_ignore_affine_transforms(
        m in map_strategy(), g in map_strategy(), f in fix_strategy(8), a in 0.1..10.0f64, b in -5.0..5.0f64
    ) {
        let t = m.map(|v| a * v + b);
        prop_assert!((nss(&t, &f).unwrap() - nss(&m, &f).unwrap()).abs() < 1e-9);
        prop_assert!((cc(&t, &g).unwrap() - cc(&m, &g).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn sim_is_symmetric(p in map_strategy(), q in map_strategy()) {
        let (p, q) = (p.to_distribution().unwrap(), q.to_distribution().unwrap());
        prop_assert_eq!(sim(&p, &q).unwrap(), sim(&q, &p).unwrap());
    }

    #[test]
    fn randomized_metrics_are_functions_of_the_seed(
        m in map_strategy(), f in fix_strategy(8), o in fix_strategy(30), seed in any::<u64>()
    ) {
        prop_assert_eq!(auc_borji(&m, &f, 10, seed).unwrap(), auc_borji(&m, &f, 10, seed).unwrap());
        prop_assert_eq!(s_auc(&m, &f, &o, 10, seed).unwrap(), s_auc(&m, &f, &o, 10, seed).unwrap());
    }
}

#[test]
fn kldiv_is_asymmetric() {
    let mut point = vec![0.0; S * S];
    point[0] = 1.0;
    let p = SaliencyMap::new(S, S, point).unwrap();
    let u = SaliencyMap::new(S, S, vec![1.0 / (S * S) as f64; S * S]).unwrap();
    assert!((kldiv(&p, &u, EPS).unwrap() - kldiv(&u, &p, EPS).unwrap()).abs() > 1.0);
}

#[test]
fn doubling_the_baseline_gains_one_bit() {
    let base = SaliencyMap::new(2, 2, vec![0.25; 4]).unwrap();
    let pred = SaliencyMap::new(2, 2, vec![0.5, 0.5, 0.0, 0.0]).unwrap();
    let f = FixationSet::new(2, 2, vec![(0, 0), (0, 1)]).unwrap();
    assert!((info_gain(&pred, &f, &base, 0.0).unwrap() - 1.0).abs() < 1e-12);
    assert!((info_gain(&base, &f, &base, EPS).unwrap()).abs() < 1e-12);
}

fn gaussian(cy: f64, cx: f64) -> SaliencyMap {
    SaliencyMap::from_fn(S, S, |r, c| (-((r as f64 - cy).powi(2) + (c as f64 - cx).powi(2)) / 8.0).exp())
}

fn frame(pred: SaliencyMap, gt: SaliencyMap) -> FrameEval {
    let other = Arc::new(FixationSet::new(S, S, vec![(1, 1), (10, 2), (6, 6), (3, 9)]).unwrap());
    FrameEval {
        id: "f".into(),
        pred,
        gt,
        fixations: FixationSet::new(S, S, vec![(4, 5), (5, 5)]).unwrap(),
        other,
    }
}

#[test]
fn single_frame_report_equals_individual_calls() {
    let base = SaliencyMap::new(S, S, vec![1.0 / (S * S) as f64; S * S]).unwrap();
    let f = frame(gaussian(4.0, 6.0), gaussian(5.0, 5.0));
    let opts = EvalOptions::default();
    let r = evaluate_all("x", std::slice::from_ref(&f), &base, &opts).unwrap();
    let direct = score_frame(&f, &base, &opts, opts.seed);
    for (k, m) in Metric::ALL.iter().enumerate() {
        assert_eq!(r.get(*m), direct[k]);
        assert_eq!(r.valid[k], 1);
    }
    assert_eq!(r.get(Metric::AucJ), Some(auc_judd(&f.pred, &f.fixations).unwrap()));
}

#[test]
fn self_evaluation_bounds() {
    let base = SaliencyMap::new(S, S, vec![1.0 / (S * S) as f64; S * S]).unwrap();
    let frames: Vec<FrameEval> = (0..4).map(|i| frame(gaussian(5.0, 4.0 + i as f64), gaussian(5.0, 4.0 + i as f64))).collect();
    let r = evaluate_all("self", &frames, &base, &EvalOptions::default()).unwrap();
    assert!(r.get(Metric::AucJ).unwrap() > 0.9);
    assert!((r.get(Metric::Sim).unwrap() - 1.0).abs() < 1e-9);
    assert!((r.get(Metric::Cc).unwrap() - 1.0).abs() < 1e-9);
    assert!(r.get(Metric::KlDiv).unwrap().abs() < 1e-5);
    assert!(r.get(Metric::Ig).unwrap() >= 0.0);
}

#[test]
fn invalid_frames_are_excluded_and_counted() {
    let base = SaliencyMap::new(S, S, vec![1.0 / (S * S) as f64; S * S]).unwrap();
    let flat = SaliencyMap::new(S, S, vec![0.3; S * S]).unwrap();
    let frames = vec![frame(gaussian(5.0, 5.0), gaussian(5.0, 5.0)), frame(flat, gaussian(5.0, 5.0))];
    let r = evaluate_all("mixed", &frames, &base, &EvalOptions::default()).unwrap();
    let k = Metric::ALL.iter().position(|&m| m == Metric::Nss).unwrap();
    assert_eq!(r.valid[k], 1);
    assert_eq!(r.frames, 2);
    assert!(evaluate_all("none", &[], &base, &EvalOptions::default()).is_err());
}
