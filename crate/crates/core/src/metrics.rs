//! Saliency evaluation metrics.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::sync::Arc;

use rand::Rng as _;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::map::SaliencyMap;
use crate::rng::seeded;

/// Regularizer for KLDiv and IG.
pub const EPS: f64 = 1e-8;
/// Splits for AUC-B and s-AUC.
pub const DEFAULT_SPLITS: usize = 100;
/// Threshold steps of the AUC-B / s-AUC grid.
pub const GRID_STEPS: usize = 100;

/// Fixated pixels of one frame, as `(row, col)`; duplicates allowed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FixationSet {
    pub height: usize,
    pub width: usize,
    pub points: Vec<(usize, usize)>,
}

impl FixationSet {
    pub fn new(height: usize, width: usize, points: Vec<(usize, usize)>) -> Result<Self> {
        if let Some(&(r, c)) = points.iter().find(|&&(r, c)| r >= height || c >= width) {
            return Err(Error::Shape(format!("fixation ({r}, {c}) outside {height}x{width}")));
        }
        Ok(Self { height, width, points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn values(&self, map: &SaliencyMap) -> Vec<f64> {
        self.points.iter().map(|&(r, c)| map.get(r, c)).collect()
    }
}

fn check(pred: &SaliencyMap, fix: &FixationSet) -> Result<()> {
    if fix.is_empty() {
        return Err(Error::EmptyFixations);
    }
    if pred.dims() != (fix.height, fix.width) {
        return Err(Error::Shape(format!(
            "map {:?} vs fixations {:?}",
            pred.dims(),
            (fix.height, fix.width)
        )));
    }
    if pred.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("saliency map".into()));
    }
    Ok(())
}

fn check_distribution(m: &SaliencyMap) -> Result<()> {
    let s = m.sum();
    if (s - 1.0).abs() > 1e-6 || m.data().iter().any(|v| *v < 0.0 || !v.is_finite()) {
        return Err(Error::NotNormalized(s));
    }
    Ok(())
}

fn trapezoid(points: &[(f64, f64)]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
        .sum()
}

/// Number of entries of a descending-sorted slice that are `>= t`.
fn count_at_least(desc: &[f64], t: f64) -> usize {
    desc.partition_point(|&v| v >= t)
}

fn sorted_desc(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(|a, b| b.total_cmp(a));
    v
}

/// AUC-Judd: thresholds at every distinct fixated value; false positives
/// counted over all pixels.
pub fn auc_judd(pred: &SaliencyMap, fix: &FixationSet) -> Result<f64> {
    check(pred, fix)?;
    let pos = sorted_desc(fix.values(pred));
    let all = sorted_desc(pred.data().to_vec());
    let mut thresholds = pos.clone();
    thresholds.dedup();
    let mut curve = vec![(0.0, 0.0)];
    for &t in &thresholds {
        let tpr = count_at_least(&pos, t) as f64 / pos.len() as f64;
        let fpr = count_at_least(&all, t) as f64 / all.len() as f64;
        curve.push((fpr, tpr));
    }
    curve.push((1.0, 1.0));
    Ok(trapezoid(&curve))
}

/// Min-max rescaling to `[0, 1]`; a constant map becomes all zero.
pub fn min_max(pred: &SaliencyMap) -> SaliencyMap {
    let (lo, hi) = (pred.min(), pred.max());
    if hi > lo {
        pred.map(|v| (v - lo) / (hi - lo))
    } else {
        pred.map(|_| 0.0)
    }
}

/// ROC area of positives vs negatives on the fixed grid `k / GRID_STEPS`,
/// counting values equal to a threshold as detected.
pub fn grid_auc(positives: &[f64], negatives: &[f64]) -> f64 {
    let pos = sorted_desc(positives.to_vec());
    let neg = sorted_desc(negatives.to_vec());
    let mut curve = vec![(0.0, 0.0)];
    for k in (0..=GRID_STEPS).rev() {
        let t = k as f64 / GRID_STEPS as f64;
        let tpr = count_at_least(&pos, t) as f64 / pos.len() as f64;
        let fpr = count_at_least(&neg, t) as f64 / neg.len() as f64;
        curve.push((fpr, tpr));
    }
    curve.push((1.0, 1.0));
    trapezoid(&curve)
}

/// AUC-Borji: per split, `|fix|` negatives drawn uniformly (with
/// replacement) from all pixels via `gen_range(0..H*W)` on one stream
/// seeded by `seed`.
pub fn auc_borji(pred: &SaliencyMap, fix: &FixationSet, n_splits: usize, seed: u64) -> Result<f64> {
    check(pred, fix)?;
    if n_splits == 0 {
        return Err(Error::Config("n_splits must be at least 1".into()));
    }
    let norm = min_max(pred);
    let pos = fix.values(&norm);
    let mut rng = seeded(seed);
    let mut total = 0.0;
    for _ in 0..n_splits {
        let neg: Vec<f64> = (0..fix.len()).map(|_| norm.data()[rng.gen_range(0..norm.len())]).collect();
        total += grid_auc(&pos, &neg);
    }
    Ok(total / n_splits as f64)
}

/// Draws `k` indices from `0..n`: without replacement (partial
/// Fisher-Yates with `gen_range(i..n)`) when `k <= n`, otherwise `k`
/// independent `gen_range(0..n)` draws.
pub fn sample_indices(rng: &mut crate::rng::Rng, n: usize, k: usize) -> Vec<usize> {
    if k <= n {
        // sparse swap record of the partial shuffle of 0..n
        let mut moved: HashMap<usize, usize> = HashMap::with_capacity(2 * k);
        let mut out = Vec::with_capacity(k);
        for i in 0..k {
            let j = rng.gen_range(i..n);
            let vi = moved.get(&i).copied().unwrap_or(i);
            let vj = moved.get(&j).copied().unwrap_or(j);
            moved.insert(j, vi);
            out.push(vj);
        }
        out
    } else {
        (0..k).map(|_| rng.gen_range(0..n)).collect()
    }
}

/// Shuffled AUC: negatives are drawn from `other`, the fixations of other
/// frames, so a map that only reproduces the dataset-wide bias scores 0.5.
pub fn s_auc(pred: &SaliencyMap, fix: &FixationSet, other: &FixationSet, n_splits: usize, seed: u64) -> Result<f64> {
    check(pred, fix)?;
    check(pred, other)?;
    if n_splits == 0 {
        return Err(Error::Config("n_splits must be at least 1".into()));
    }
    let norm = min_max(pred);
    let pos = fix.values(&norm);
    let pool = other.values(&norm);
    let mut rng = seeded(seed);
    let mut total = 0.0;
    for _ in 0..n_splits {
        let neg: Vec<f64> = sample_indices(&mut rng, pool.len(), fix.len())
            .into_iter()
            .map(|i| pool[i])
            .collect();
        total += grid_auc(&pos, &neg);
    }
    Ok(total / n_splits as f64)
}

/// Normalized scanpath saliency (population standard deviation).
pub fn nss(pred: &SaliencyMap, fix: &FixationSet) -> Result<f64> {
    check(pred, fix)?;
    let (mean, std) = (pred.mean(), pred.std());
    if !(std > 1e-12 * (1.0 + mean.abs())) {
        return Err(Error::ZeroStd("NSS"));
    }
    Ok(fix.values(pred).iter().map(|v| (v - mean) / std).sum::<f64>() / fix.len() as f64)
}

fn same_dims(a: &SaliencyMap, b: &SaliencyMap) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("maps {:?} and {:?} differ", a.dims(), b.dims())));
    }
    Ok(())
}

/// Histogram intersection of two distributions.
pub fn sim(pred_dist: &SaliencyMap, gt_dist: &SaliencyMap) -> Result<f64> {
    same_dims(pred_dist, gt_dist)?;
    check_distribution(pred_dist)?;
    check_distribution(gt_dist)?;
    Ok(pred_dist.data().iter().zip(gt_dist.data()).map(|(a, b)| a.min(*b)).sum())
}

/// Pearson correlation over pixels.
pub fn cc(pred: &SaliencyMap, gt: &SaliencyMap) -> Result<f64> {
    same_dims(pred, gt)?;
    let (mp, mg) = (pred.mean(), gt.mean());
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (p, g) in pred.data().iter().zip(gt.data()) {
        let (dp, dg) = (p - mp, g - mg);
        sxy += dp * dg;
        sxx += dp * dp;
        syy += dg * dg;
    }
    let n = pred.len() as f64;
    let flat = |ss: f64, m: f64| !(ss / n > (1e-12 * (1.0 + m.abs())).powi(2));
    if flat(sxx, mp) || flat(syy, mg) {
        return Err(Error::ZeroStd("CC"));
    }
    Ok(sxy / (sxx.sqrt() * syy.sqrt()))
}

/// `Σ gt · ln(gt / (pred + eps) + eps)`, skipping `gt = 0` terms.
pub fn kldiv(gt_dist: &SaliencyMap, pred_dist: &SaliencyMap, eps: f64) -> Result<f64> {
    same_dims(gt_dist, pred_dist)?;
    check_distribution(gt_dist)?;
    check_distribution(pred_dist)?;
    if !(eps > 0.0) {
        return Err(Error::Config(format!("eps {eps} must be positive")));
    }
    Ok(gt_dist
        .data()
        .iter()
        .zip(pred_dist.data())
        .filter(|(g, _)| **g > 0.0)
        .map(|(g, p)| g * (g / (p + eps) + eps).ln())
        .sum())
}

/// Information gain over a baseline, in bits per fixation.
pub fn info_gain(pred_dist: &SaliencyMap, fix: &FixationSet, baseline_dist: &SaliencyMap, eps: f64) -> Result<f64> {
    check(pred_dist, fix)?;
    same_dims(pred_dist, baseline_dist)?;
    check_distribution(pred_dist)?;
    check_distribution(baseline_dist)?;
    let total: f64 = fix
        .points
        .iter()
        .map(|&(r, c)| (pred_dist.get(r, c) + eps).log2() - (baseline_dist.get(r, c) + eps).log2())
        .sum();
    Ok(total / fix.len() as f64)
}

/// Reported metrics, in column order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Metric {
    AucJ,
    SAuc,
    AucB,
    Nss,
    Sim,
    Cc,
    KlDiv,
    Ig,
}

impl Metric {
    pub const ALL: [Metric; 8] = [
        Metric::AucJ,
        Metric::SAuc,
        Metric::AucB,
        Metric::Nss,
        Metric::Sim,
        Metric::Cc,
        Metric::KlDiv,
        Metric::Ig,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::AucJ => "auc_j",
            Metric::SAuc => "s_auc",
            Metric::AucB => "auc_b",
            Metric::Nss => "nss",
            Metric::Sim => "sim",
            Metric::Cc => "cc",
            Metric::KlDiv => "kldiv",
            Metric::Ig => "ig",
        }
    }
}

/// Everything needed to score one frame.
#[derive(Debug, Clone)]
pub struct FrameEval {
    pub id: String,
    /// Model output (any non-negative scale).
    pub pred: SaliencyMap,
    /// Ground-truth density (any non-negative scale).
    pub gt: SaliencyMap,
    pub fixations: FixationSet,
    /// Negatives for s-AUC, typically shared between frames.
    pub other: Arc<FixationSet>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub n_splits: usize,
    pub seed: u64,
    pub eps: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { n_splits: DEFAULT_SPLITS, seed: 0, eps: EPS }
    }
}

/// Per-frame values; `None` where a metric is undefined for the frame.
pub type FrameScores = [Option<f64>; 8];

pub fn score_frame(frame: &FrameEval, baseline_dist: &SaliencyMap, opts: &EvalOptions, seed: u64) -> FrameScores {
    let pred_dist = frame.pred.to_distribution();
    let gt_dist = frame.gt.to_distribution();
    Metric::ALL.map(|m| {
        let r = match m {
            Metric::AucJ => auc_judd(&frame.pred, &frame.fixations),
            Metric::SAuc => s_auc(&frame.pred, &frame.fixations, &frame.other, opts.n_splits, seed),
            Metric::AucB => auc_borji(&frame.pred, &frame.fixations, opts.n_splits, seed),
            Metric::Nss => nss(&frame.pred, &frame.fixations),
            Metric::Sim => match (&pred_dist, &gt_dist) {
                (Ok(p), Ok(g)) => sim(p, g),
                (Err(e), _) | (_, Err(e)) => Err(Error::NotNormalized(match e {
                    Error::NotNormalized(s) => *s,
                    _ => f64::NAN,
                })),
            },
            Metric::Cc => cc(&frame.pred, &frame.gt),
            Metric::KlDiv => match (&pred_dist, &gt_dist) {
                (Ok(p), Ok(g)) => kldiv(g, p, opts.eps),
                _ => Err(Error::NotNormalized(f64::NAN)),
            },
            Metric::Ig => match &pred_dist {
                Ok(p) => info_gain(p, &frame.fixations, baseline_dist, opts.eps),
                Err(_) => Err(Error::NotNormalized(f64::NAN)),
            },
        };
        r.ok().filter(|v| v.is_finite())
    })
}

/// Frame-averaged metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub label: String,
    /// Mean over frames where the metric is defined (`None` if none are).
    pub values: [Option<f64>; 8],
    /// Number of frames contributing to each metric.
    pub valid: [usize; 8],
    pub frames: usize,
    pub per_frame: Vec<(String, FrameScores)>,
}

impl MetricReport {
    pub fn get(&self, m: Metric) -> Option<f64> {
        self.values[Metric::ALL.iter().position(|&x| x == m).expect("listed")]
    }

    pub fn csv_header() -> String {
        let names: Vec<&str> = Metric::ALL.iter().map(|m| m.name()).collect();
        let valid: Vec<String> = Metric::ALL.iter().map(|m| format!("valid_{}", m.name())).collect();
        format!("model,{},frames,{}", names.join(","), valid.join(","))
    }

    pub fn csv_row(&self) -> String {
        let mut row = self.label.clone();
        for v in &self.values {
            row.push(',');
            if let Some(v) = v {
                let _ = write!(row, "{v:.6}");
            }
        }
        let _ = write!(row, ",{}", self.frames);
        for n in &self.valid {
            let _ = write!(row, ",{n}");
        }
        row
    }

    pub fn to_csv(&self) -> String {
        format!("{}\n{}\n", Self::csv_header(), self.csv_row())
    }

    pub fn per_frame_csv(&self) -> String {
        let names: Vec<&str> = Metric::ALL.iter().map(|m| m.name()).collect();
        let mut out = format!("frame,{}\n", names.join(","));
        for (id, scores) in &self.per_frame {
            out.push_str(id);
            for v in scores {
                out.push(',');
                if let Some(v) = v {
                    let _ = write!(out, "{v:.6}");
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Scores every frame (in parallel; frame `i` uses seed `opts.seed + i`)
/// and averages each metric over the frames where it is defined.
pub fn evaluate_all(
    label: &str,
    frames: &[FrameEval],
    baseline_dist: &SaliencyMap,
    opts: &EvalOptions,
) -> Result<MetricReport> {
    if frames.is_empty() {
        return Err(Error::Dataset("no frames to evaluate".into()));
    }
    check_distribution(baseline_dist)?;
    let scores: Vec<FrameScores> = frames
        .par_iter()
        .enumerate()
        .map(|(i, f)| score_frame(f, baseline_dist, opts, opts.seed.wrapping_add(i as u64)))
        .collect();
    let mut values = [None; 8];
    let mut valid = [0; 8];
    for k in 0..8 {
        let col: Vec<f64> = scores.iter().filter_map(|s| s[k]).collect();
        valid[k] = col.len();
        if !col.is_empty() {
            values[k] = Some(col.iter().sum::<f64>() / col.len() as f64);
        }
    }
    Ok(MetricReport {
        label: label.to_string(),
        values,
        valid,
        frames: frames.len(),
        per_frame: frames.iter().map(|f| f.id.clone()).zip(scores).collect(),
    })
}
