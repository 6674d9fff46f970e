use csalnet_core::gt::{
    center_bias_map, clahe, cross_subject_prior, fixations_to_map, sigma_pixels, FixationRecord, GtConfig, NormalizeMode,
};
use csalnet_core::rng::seeded;
use csalnet_core::Tensor;
use proptest::prelude::*;
use rand::seq::SliceRandom;

fn fix(frame_index: usize, x: f64, y: f64) -> FixationRecord {
    FixationRecord { subject_id: 1, frame_index, x, y }
}

/// One pixel per degree, so `dva` is the width in pixels.
fn unit_fov(width: usize, dva: f64) -> GtConfig {
    GtConfig { dva, horizontal_fov_degrees: width as f64, ..GtConfig::default() }
}

#[test]
fn paper_geometry_sigma() {
    assert!((sigma_pixels(&GtConfig::default(), 224) - 18.938).abs() < 1e-3);
    assert!((sigma_pixels(&GtConfig::default(), 64) - 5.411).abs() < 1e-3);
    assert_eq!(sigma_pixels(&unit_fov(64, 9.3), 64), 9.3);
}

#[test]
fn distant_fixations_give_two_unit_peaks() {
    let cfg = unit_fov(64, 3.0);
    let m = fixations_to_map(&[fix(0, 10.2, 12.7), fix(0, 50.9, 47.1)], 0, 64, 64, &cfg).unwrap();
    assert!((m.map.get(12, 10) - 1.0).abs() < 1e-6);
    assert!((m.map.get(47, 50) - 1.0).abs() < 1e-6);
    for (r, c) in [(12, 10), (47, 50)] {
        for (dr, dc) in [(-1i32, 0i32), (1, 0), (0, -1), (0, 1)] {
            let n = m.map.get((r as i32 + dr) as usize, (c as i32 + dc) as usize);
            assert!(n < m.map.get(r, c));
        }
    }
}

#[test]
fn discount_ratio_is_gamma_to_the_age() {
    let gamma = 0.6;
    let cfg = GtConfig { gamma, frames_back: 4, ..unit_fov(64, 2.0) };
    let m = fixations_to_map(&[fix(5, 10.0, 10.0), fix(2, 50.0, 50.0)], 5, 64, 64, &cfg).unwrap();
    assert!((m.map.get(50, 50) / m.map.get(10, 10) - gamma.powi(3)).abs() < 1e-12);
}

#[test]
fn uniform_grid_prior_is_flat_inside() {
    let mut f = Vec::new();
    for y in (0..64).step_by(4) {
        for x in (0..64).step_by(4) {
            f.push(fix(0, x as f64, y as f64));
        }
    }
    let p = cross_subject_prior(&f, 64, 64, 4.0).unwrap();
    assert!((p.sum() - 1.0).abs() < 1e-9);
    let inner: Vec<f64> = (16..48).flat_map(|r| (16..48).map(move |c| (r, c))).map(|(r, c)| p.get(r, c)).collect();
    let (lo, hi) = inner.iter().fold((f64::INFINITY, 0.0f64), |(l, h), v| (l.min(*v), h.max(*v)));
    assert!(hi / lo < 1.5, "{}", hi / lo);
}

#[test]
fn center_bias_corner_ratio() {
    let m = center_bias_map(65, 65, 0.25).unwrap();
    let sigma: f64 = 0.25 * 65.0;
    let want = (-(32.0f64.powi(2) + 32.0f64.powi(2)) / (2.0 * sigma * sigma)).exp();
    assert!((m.get(0, 0) / m.get(32, 32) - want).abs() < 1e-12);
    assert_eq!(m.argmax(), (32, 32));
}

/// Every channel of every tile holds each 8-bit level equally often.
fn uniform_histogram_image(side: usize, tiles: usize, seed: u64) -> Tensor {
    let t = side / tiles;
    let mut rng = seeded(seed);
    let mut data = vec![0.0; 3 * side * side];
    for c in 0..3 {
        for ty in 0..tiles {
            for tx in 0..tiles {
                let mut levels: Vec<usize> = (0..t * t).map(|i| i % 256).collect();
                levels.shuffle(&mut rng);
                for (k, l) in levels.into_iter().enumerate() {
                    let (y, x) = (ty * t + k / t, tx * t + k % t);
                    data[c * side * side + y * side + x] = l as f64 / 255.0;
                }
            }
        }
    }
    Tensor::new(vec![3, side, side], data).unwrap()
}

#[test]
fn clahe_is_idempotent_on_uniform_histograms() {
    for (side, tiles) in [(32, 1), (64, 2)] {
        let img = uniform_histogram_image(side, tiles, 5);
        let once = clahe(&img, 2.0, tiles).unwrap();
        let twice = clahe(&once, 2.0, tiles).unwrap();
        let gap = once.data().iter().zip(twice.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(gap <= 2.0 / 256.0, "{side}/{tiles}: {gap}");
    }
}

#[test]
fn clahe_stretches_a_low_contrast_ramp() {
    let data: Vec<f64> = (0..3 * 64).map(|i| (100.0 + 40.0 * (i % 64) as f64 / 63.0).round() / 255.0).collect();
    let img = Tensor::new(vec![3, 8, 8], data).unwrap();
    let out = clahe(&img, 40.0, 1).unwrap();
    let (lo, hi) = out.data().iter().fold((1.0f64, 0.0f64), |(l, h), v| (l.min(*v), h.max(*v)));
    assert!(hi - lo >= 0.8, "range {}", hi - lo);
    assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
}

fn points() -> impl Strategy<Value = Vec<(f64, f64, usize)>> {
    prop::collection::vec((20.0..44.0f64, 20.0..44.0f64, 0usize..3), 1..4)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn argmax_follows_translation(pts in points(), dx in -8i32..8, dy in -8i32..8) {
        let cfg = unit_fov(64, 2.5);
        let a: Vec<_> = pts.iter().map(|&(x, y, age)| fix(4 - age, x, y)).collect();
        let b: Vec<_> = pts.iter().map(|&(x, y, age)| fix(4 - age, x + dx as f64, y + dy as f64)).collect();
        let ma = fixations_to_map(&a, 4, 64, 64, &cfg).unwrap().map.argmax();
        let mb = fixations_to_map(&b, 4, 64, 64, &cfg).unwrap().map.argmax();
        prop_assert_eq!((ma.0 as i32 + dy, ma.1 as i32 + dx), (mb.0 as i32, mb.1 as i32));
    }

    #[test]
    fn larger_gamma_never_lowers_older_weight(g1 in 0.05..1.0f64, g2 in 0.05..1.0f64, age in 1usize..3) {
        let (lo, hi) = if g1 <= g2 { (g1, g2) } else { (g2, g1) };
        let rel = |gamma: f64| {
            let cfg = GtConfig { gamma, ..unit_fov(64, 2.0) };
            let m = fixations_to_map(&[fix(4, 12.0, 12.0), fix(4 - age, 50.0, 50.0)], 4, 64, 64, &cfg).unwrap().map;
            m.get(50, 50) / m.get(12, 12)
        };
        prop_assert!(rel(hi) >= rel(lo));
    }

    #[test]
    fn prob_maps_sum_to_one(pts in points(), dva in 1.0..12.0f64) {
        let cfg = GtConfig { normalize_mode: NormalizeMode::Prob, ..unit_fov(64, dva) };
        let f: Vec<_> = pts.iter().map(|&(x, y, age)| fix(4 - age, x, y)).collect();
        let m = fixations_to_map(&f, 4, 64, 64, &cfg).unwrap();
        prop_assert!(!m.empty);
        prop_assert!((m.map.sum() - 1.0).abs() < 1e-9);
    }
}
