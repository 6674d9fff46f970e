//! Brute-force reference implementations of the saliency metrics, written
//! from the definitions without sharing code with the library.

#![allow(dead_code)]

use csalnet_core::rng::seeded;
use rand::Rng as _;

/// Row-major `h x w` grid.
pub struct Grid<'a> {
    pub w: usize,
    pub v: &'a [f64],
}

impl Grid<'_> {
    pub fn at(&self, (r, c): (usize, usize)) -> f64 {
        self.v[r * self.w + c]
    }
}

fn area(mut pts: Vec<(f64, f64)>) -> f64 {
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let mut s = 0.0;
    for i in 1..pts.len() {
        s += (pts[i].0 - pts[i - 1].0) * (pts[i].1 + pts[i - 1].1) * 0.5;
    }
    s
}

fn frac_at_least(vals: &[f64], t: f64) -> f64 {
    vals.iter().filter(|&&v| v >= t).count() as f64 / vals.len() as f64
}

pub fn auc_judd(g: &Grid, fix: &[(usize, usize)]) -> f64 {
    let pos: Vec<f64> = fix.iter().map(|&p| g.at(p)).collect();
    let mut pts = vec![(0.0, 0.0), (1.0, 1.0)];
    for (i, &t) in pos.iter().enumerate() {
        if pos[..i].contains(&t) {
            continue;
        }
        pts.push((frac_at_least(g.v, t), frac_at_least(&pos, t)));
    }
    area(pts)
}

pub fn normalize(v: &[f64]) -> Vec<f64> {
    let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    v.iter().map(|x| if hi > lo { (x - lo) / (hi - lo) } else { 0.0 }).collect()
}

fn grid_auc(pos: &[f64], neg: &[f64]) -> f64 {
    let mut pts = vec![(0.0, 0.0), (1.0, 1.0)];
    for k in 0..=100 {
        let t = k as f64 / 100.0;
        pts.push((frac_at_least(neg, t), frac_at_least(pos, t)));
    }
    area(pts)
}

pub fn auc_borji(v: &[f64], w: usize, fix: &[(usize, usize)], splits: usize, seed: u64) -> f64 {
    let n = normalize(v);
    let g = Grid { w, v: &n };
    let pos: Vec<f64> = fix.iter().map(|&p| g.at(p)).collect();
    let mut rng = seeded(seed);
    let mut total = 0.0;
    for _ in 0..splits {
        let neg: Vec<f64> = (0..fix.len()).map(|_| n[rng.gen_range(0..n.len())]).collect();
        total += grid_auc(&pos, &neg);
    }
    total / splits as f64
}

pub fn s_auc(v: &[f64], w: usize, fix: &[(usize, usize)], other: &[(usize, usize)], splits: usize, seed: u64) -> f64 {
    let n = normalize(v);
    let g = Grid { w, v: &n };
    let pos: Vec<f64> = fix.iter().map(|&p| g.at(p)).collect();
    let pool: Vec<f64> = other.iter().map(|&p| g.at(p)).collect();
    let mut rng = seeded(seed);
    let mut total = 0.0;
    for _ in 0..splits {
        let neg: Vec<f64> = if fix.len() <= pool.len() {
            let mut idx: Vec<usize> = (0..pool.len()).collect();
            for i in 0..fix.len() {
                let j = rng.gen_range(i..pool.len());
                idx.swap(i, j);
            }
            idx[..fix.len()].iter().map(|&i| pool[i]).collect()
        } else {
            (0..fix.len()).map(|_| pool[rng.gen_range(0..pool.len())]).collect()
        };
        total += grid_auc(&pos, &neg);
    }
    total / splits as f64
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn nss(v: &[f64], w: usize, fix: &[(usize, usize)]) -> f64 {
    let m = mean(v);
    let sd = (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64).sqrt();
    let g = Grid { w, v };
    fix.iter().map(|&p| (g.at(p) - m) / sd).sum::<f64>() / fix.len() as f64
}

pub fn to_dist(v: &[f64]) -> Vec<f64> {
    let s: f64 = v.iter().sum();
    v.iter().map(|x| x / s).collect()
}

pub fn sim(p: &[f64], g: &[f64]) -> f64 {
    p.iter().zip(g).map(|(a, b)| if a < b { *a } else { *b }).sum()
}

pub fn cc(p: &[f64], g: &[f64]) -> f64 {
    let (mp, mg) = (mean(p), mean(g));
    let cov: f64 = p.iter().zip(g).map(|(a, b)| (a - mp) * (b - mg)).sum();
    let vp: f64 = p.iter().map(|a| (a - mp).powi(2)).sum();
    let vg: f64 = g.iter().map(|b| (b - mg).powi(2)).sum();
    cov / (vp * vg).sqrt()
}

pub fn kldiv(g: &[f64], p: &[f64], eps: f64) -> f64 {
    let mut s = 0.0;
    for i in 0..g.len() {
        if g[i] > 0.0 {
            s += g[i] * (g[i] / (p[i] + eps) + eps).ln();
        }
    }
    s
}

pub fn info_gain(p: &[f64], w: usize, fix: &[(usize, usize)], base: &[f64], eps: f64) -> f64 {
    let (gp, gb) = (Grid { w, v: p }, Grid { w, v: base });
    let mut s = 0.0;
    for &f in fix {
        s += ((gp.at(f) + eps) / (gb.at(f) + eps)).ln() / std::f64::consts::LN_2;
    }
    s / fix.len() as f64
}

/// One random 8x8 problem: a map (half of them with heavy ties), fixations,
/// an s-AUC pool, a ground-truth density and a baseline density.
pub struct Instance {
    pub map: Vec<f64>,
    pub fix: Vec<(usize, usize)>,
    pub other: Vec<(usize, usize)>,
    pub gt: Vec<f64>,
    pub base: Vec<f64>,
}

pub const SIDE: usize = 8;

pub fn instance(seed: u64) -> Instance {
    let mut rng = seeded(seed ^ 0x5eed);
    let n = SIDE * SIDE;
    let levels = if seed % 2 == 0 { 0 } else { rng.gen_range(2..6) };
    let map = (0..n)
        .map(|_| {
            let x: f64 = rng.gen();
            if levels == 0 { x } else { (x * levels as f64).floor() / levels as f64 }
        })
        .collect();
    let mut pts = |k: usize| -> Vec<(usize, usize)> {
        (0..k).map(|_| (rng.gen_range(0..SIDE), rng.gen_range(0..SIDE))).collect()
    };
    let fix = pts(1 + (seed as usize % 6));
    let other = pts(3 + (seed as usize % 17));
    let gt = to_dist(&(0..n).map(|_| rng.gen::<f64>().powi(3)).collect::<Vec<_>>());
    let base = to_dist(&(0..n).map(|_| 0.05 + rng.gen::<f64>()).collect::<Vec<_>>());
    Instance { map, fix, other, gt, base }
}

/// Largest library-vs-oracle gap for each metric over `count` instances,
/// with the tolerance it must meet.
pub fn compare_all(count: u64) -> Vec<(&'static str, f64, f64)> {
    use csalnet_core::metrics as m;
    use csalnet_core::SaliencyMap;
    const DET: f64 = 1e-9;
    const RND: f64 = 1e-6;
    let splits = 100;
    let mut worst = [0.0f64; 8];
    for s in 0..count {
        let inst = instance(s);
        let map = SaliencyMap::new(SIDE, SIDE, inst.map.clone()).unwrap();
        let fix = m::FixationSet::new(SIDE, SIDE, inst.fix.clone()).unwrap();
        let other = m::FixationSet::new(SIDE, SIDE, inst.other.clone()).unwrap();
        let gt = SaliencyMap::new(SIDE, SIDE, inst.gt.clone()).unwrap();
        let base = SaliencyMap::new(SIDE, SIDE, inst.base.clone()).unwrap();
        let pd = map.to_distribution().unwrap();
        let pdv = to_dist(&inst.map);
        let g = Grid { w: SIDE, v: &inst.map };
        let pairs = [
            (m::auc_judd(&map, &fix).unwrap(), auc_judd(&g, &inst.fix)),
            (m::s_auc(&map, &fix, &other, splits, s).unwrap(), s_auc(&inst.map, SIDE, &inst.fix, &inst.other, splits, s)),
            (m::auc_borji(&map, &fix, splits, s).unwrap(), auc_borji(&inst.map, SIDE, &inst.fix, splits, s)),
            (m::nss(&map, &fix).unwrap(), nss(&inst.map, SIDE, &inst.fix)),
            (m::sim(&pd, &gt).unwrap(), sim(&pdv, &inst.gt)),
            (m::cc(&map, &gt).unwrap(), cc(&inst.map, &inst.gt)),
            (m::kldiv(&gt, &pd, m::EPS).unwrap(), kldiv(&inst.gt, &pdv, m::EPS)),
            (m::info_gain(&pd, &fix, &base, m::EPS).unwrap(), info_gain(&pdv, SIDE, &inst.fix, &inst.base, m::EPS)),
        ];
        for (k, (a, b)) in pairs.iter().enumerate() {
            worst[k] = worst[k].max((a - b).abs());
        }
    }
    let names = ["auc_j", "s_auc", "auc_b", "nss", "sim", "cc", "kldiv", "ig"];
    let tols = [DET, RND, RND, DET, DET, DET, DET, DET];
    (0..8).map(|k| (names[k], worst[k], tols[k])).collect()
}
