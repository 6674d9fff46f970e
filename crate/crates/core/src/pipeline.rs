//! Frame loading, preprocessing and leave-one-subject-out evaluation.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;

use crate::data::{frame_path, loso_split, DatasetManifest, ScenarioRecord, MANIFEST};
use crate::error::{Error, Result};
use crate::gt::{
    accumulate, center_bias_map, clahe, cross_subject_prior, fixations_to_map, sigma_pixels, window, FixationRecord,
    GtConfig, GtMeta, NormalizeMode,
};
use crate::imageio;
use crate::map::SaliencyMap;
use crate::metrics::{evaluate_all, EvalOptions, FixationSet, FrameEval, MetricReport};
use crate::model::{forward_batch, ContextAttributes, NetworkParams};
use crate::nn::Mode;
use crate::tensor::Tensor;
use crate::uncertainty::{mc_predict, point_estimate};

pub const META: &str = "meta.txt";

pub fn gt_path(dir: &Path, frame_index: usize) -> PathBuf {
    dir.join(format!("gt_{frame_index:05}.png"))
}

/// One frame ready for training or evaluation.
#[derive(Debug, Clone)]
pub struct FrameSample {
    pub id: String,
    pub subject_id: u32,
    pub context: ContextAttributes,
    /// `[3, H, W]` 8-bit pixels.
    pub image: Vec<u8>,
    /// Peak-normalized ground truth, `H x W`.
    pub target: Vec<f32>,
    pub fixations: FixationSet,
}

impl FrameSample {
    pub fn image_tensor(&self, size: usize) -> Tensor {
        let data = self.image.iter().map(|&v| v as f64 / 255.0).collect();
        Tensor::new(vec![3, size, size], data).expect("dims match")
    }
}

pub fn frame_id(r: &ScenarioRecord, frame: usize) -> String {
    format!("subject_{}/block_{}/scenario_{}/frame_{frame:05}", r.subject_id, r.block, r.scenario_id)
}

/// Pixels fixated within the ground-truth window of `frame`.
pub fn window_fixations(r: &ScenarioRecord, frame: usize, gt: &GtConfig, h: usize, w: usize) -> Result<FixationSet> {
    let points = window(&r.fixations, frame, gt.frames_back).map(|(_, f)| f.pixel()).collect();
    FixationSet::new(h, w, points)
}

/// Ground-truth settings of a dataset: those recorded by preprocessing, or
/// the defaults for raw data.
pub fn dataset_gt_config(manifest: &DatasetManifest) -> Result<(GtConfig, bool)> {
    let Some(first) = manifest.records.first() else {
        return Err(Error::Dataset("empty dataset".into()));
    };
    let meta_path = first.dir.join(META);
    if !meta_path.is_file() {
        return Ok((GtConfig::default(), false));
    }
    let meta = GtMeta::load(&meta_path)?;
    let cfg = GtConfig {
        frames_back: meta.frames_back,
        gamma: meta.gamma,
        normalize_mode: meta.normalize_mode,
        // the recorded width in pixels reproduces sigma under a unit field of view
        dva: meta.sigma_pixels,
        horizontal_fov_degrees: manifest.width as f64,
    };
    Ok((cfg, true))
}

/// Loads every frame with a non-empty fixation window. Targets come from
/// preprocessed `gt_*.png` maps when present, otherwise they are computed.
pub fn load_frames(records: &[ScenarioRecord], size: usize, gt: &GtConfig, preprocessed: bool) -> Result<Vec<FrameSample>> {
    let per_record: Vec<Vec<FrameSample>> = records
        .par_iter()
        .map(|r| {
            let mut out = Vec::new();
            let peak = GtConfig { normalize_mode: NormalizeMode::PeakOne, ..*gt };
            for f in 0..r.num_frames {
                let computed = fixations_to_map(&r.fixations, f, size, size, &peak)?;
                if computed.empty {
                    continue;
                }
                let target = if preprocessed {
                    imageio::load_map16(&gt_path(&r.dir, f), 1.0)?
                } else {
                    computed.map
                };
                if target.dims() != (size, size) {
                    return Err(Error::Dataset(format!("{}: ground truth is not {size}x{size}", r.dir.display())));
                }
                let img = image::open(frame_path(&r.dir, f))?.to_rgb8();
                if (img.width() as usize, img.height() as usize) != (size, size) {
                    return Err(Error::Dataset(format!(
                        "{}: frames are {}x{}, the model expects {size}x{size}",
                        r.dir.display(),
                        img.width(),
                        img.height()
                    )));
                }
                let mut chw = vec![0u8; 3 * size * size];
                for (x, y, px) in img.enumerate_pixels() {
                    for c in 0..3 {
                        chw[c * size * size + y as usize * size + x as usize] = px.0[c];
                    }
                }
                out.push(FrameSample {
                    id: frame_id(r, f),
                    subject_id: r.subject_id,
                    context: r.context,
                    image: chw,
                    target: target.data().iter().map(|&v| v as f32).collect(),
                    fixations: window_fixations(r, f, gt, size, size)?,
                });
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    Ok(per_record.into_iter().flatten().collect())
}

/// Stacks frame images into `[N, 3, H, W]`.
pub fn image_batch(frames: &[&FrameSample], size: usize) -> Tensor {
    let mut data = Vec::with_capacity(frames.len() * 3 * size * size);
    for f in frames {
        data.extend(f.image.iter().map(|&v| v as f64 / 255.0));
    }
    Tensor::new(vec![frames.len(), 3, size, size], data).expect("dims match")
}

/// Stacks targets into `[N, 1, H, W]`.
pub fn target_batch(frames: &[&FrameSample], size: usize) -> Tensor {
    let mut data = Vec::with_capacity(frames.len() * size * size);
    for f in frames {
        data.extend(f.target.iter().map(|&v| v as f64));
    }
    Tensor::new(vec![frames.len(), 1, size, size], data).expect("dims match")
}

/// Deterministic eval-mode predictions, batched.
pub fn predict_eval(net: &NetworkParams, frames: &[&FrameSample], contexts: Option<&[usize]>) -> Result<Vec<SaliencyMap>> {
    const BATCH: usize = 32;
    let size = net.config.input_size;
    let mut out = Vec::with_capacity(frames.len());
    for (b, chunk) in frames.chunks(BATCH).enumerate() {
        let ctx = contexts.map(|c| &c[b * BATCH..b * BATCH + chunk.len()]);
        out.extend(forward_batch(net, image_batch(chunk, size), ctx, Mode::Eval, &vec![0; chunk.len()])?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PreprocessConfig {
    pub clahe_clip: f64,
    pub clahe_tiles: usize,
    pub gt: GtConfig,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self { clahe_clip: 2.0, clahe_tiles: 8, gt: GtConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreprocessSummary {
    pub sigma_pixels: f64,
    pub frames: usize,
    pub empty_frames: usize,
}

/// Writes CLAHE-equalized frames, peak-normalized 16-bit ground-truth maps
/// and `meta.txt` sidecars under `out`, mirroring the input layout. The
/// output is itself a loadable dataset.
pub fn preprocess(manifest: &DatasetManifest, out: &Path, cfg: &PreprocessConfig) -> Result<PreprocessSummary> {
    cfg.gt.validate()?;
    let gt = GtConfig { normalize_mode: NormalizeMode::PeakOne, ..cfg.gt };
    let (h, w) = (manifest.height, manifest.width);
    let sigma = sigma_pixels(&gt, w);
    let empties = manifest
        .records
        .par_iter()
        .map(|r| {
            let dir = out.join(r.rel_dir());
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let mut empty_frames = Vec::new();
            for f in 0..r.num_frames {
                let img = imageio::load_rgb(&r.frame_path(f))?;
                imageio::save_rgb(&frame_path(&dir, f), &clahe(&img, cfg.clahe_clip, cfg.clahe_tiles)?)?;
                let map = fixations_to_map(&r.fixations, f, h, w, &gt)?;
                if map.empty {
                    empty_frames.push(f);
                }
                imageio::save_map16(&gt_path(&dir, f), &map.map, 1.0)?;
            }
            for name in ["fixations.csv", "context.txt"] {
                let (src, dst) = (r.dir.join(name), dir.join(name));
                fs::copy(&src, &dst).map_err(|e| Error::io(&src, e))?;
            }
            let meta = GtMeta {
                normalize_mode: NormalizeMode::PeakOne,
                sigma_pixels: sigma,
                gamma: gt.gamma,
                frames_back: gt.frames_back,
                empty_frames: empty_frames.clone(),
            };
            meta.save(&dir.join(META))?;
            Ok(empty_frames.len())
        })
        .collect::<Result<Vec<_>>>()?;
    let src = manifest.root.join(MANIFEST);
    if src.is_file() {
        fs::copy(&src, out.join(MANIFEST)).map_err(|e| Error::io(&src, e))?;
    }
    Ok(PreprocessSummary {
        sigma_pixels: sigma,
        frames: manifest.num_frames(),
        empty_frames: empties.iter().sum(),
    })
}

/// Source of s-AUC negatives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Negatives {
    /// The held-out subject's fixations in other trials.
    SameSubject,
    /// Every fixation of the training subjects.
    OtherSubjects,
}

#[derive(Debug, Clone, Copy)]
pub enum Predictor<'a> {
    /// `mc_samples == 0` runs the deterministic eval-mode forward.
    Model { net: &'a NetworkParams, mc_samples: usize },
    CenterBias { sigma_frac: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalConfig {
    pub seed: u64,
    pub n_splits: usize,
    pub negatives: Negatives,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { seed: 0, n_splits: crate::metrics::DEFAULT_SPLITS, negatives: Negatives::SameSubject }
    }
}

fn pixels(fixations: &[FixationRecord], h: usize, w: usize) -> Result<FixationSet> {
    FixationSet::new(h, w, fixations.iter().map(|f| f.pixel()).collect())
}

/// Held-out frames paired with their ground truth, positives and s-AUC
/// negatives, plus the training-subject prior used as IG baseline.
pub struct HoldoutSet {
    pub frames: Vec<FrameSample>,
    pub gt: Vec<SaliencyMap>,
    pub others: Vec<Arc<FixationSet>>,
    pub baseline: SaliencyMap,
}

pub fn holdout_set(manifest: &DatasetManifest, holdout: u32, negatives: Negatives) -> Result<HoldoutSet> {
    let (train, test) = loso_split(manifest, holdout)?;
    let (gt_cfg, preprocessed) = dataset_gt_config(manifest)?;
    let (h, w) = (manifest.height, manifest.width);
    if h != w {
        return Err(Error::Dataset(format!("frames must be square, got {w}x{h}")));
    }
    let train_fix: Vec<FixationRecord> = train.iter().flat_map(|r| r.fixations.iter().copied()).collect();
    let baseline = cross_subject_prior(&train_fix, h, w, sigma_pixels(&gt_cfg, w))?;
    let shared = match negatives {
        Negatives::OtherSubjects => Some(Arc::new(pixels(&train_fix, h, w)?)),
        Negatives::SameSubject => None,
    };
    let mut frames = Vec::new();
    let mut gt = Vec::new();
    let mut others = Vec::new();
    for (i, r) in test.iter().enumerate() {
        let other = match &shared {
            Some(s) => s.clone(),
            None => {
                let rest: Vec<FixationRecord> = test
                    .iter()
                    .enumerate()
                    .filter(|&(j, _)| j != i)
                    .flat_map(|(_, o)| o.fixations.iter().copied())
                    .collect();
                Arc::new(pixels(&rest, h, w)?)
            }
        };
        for f in load_frames(std::slice::from_ref(r), w, &gt_cfg, preprocessed)? {
            let idx: usize = f.id.rsplit('_').next().and_then(|s| s.parse().ok()).expect("frame id ends in index");
            gt.push(accumulate(&r.fixations, idx, h, w, &gt_cfg)?);
            others.push(other.clone());
            frames.push(f);
        }
    }
    if frames.is_empty() {
        return Err(Error::Dataset(format!("subject {holdout} has no frames with fixations")));
    }
    Ok(HoldoutSet { frames, gt, others, baseline })
}

/// Predictions for every held-out frame. MC sampling of frame `i` uses
/// seeds `seed + i * samples ..`.
pub fn predict_holdout(set: &HoldoutSet, predictor: Predictor<'_>, seed: u64) -> Result<Vec<SaliencyMap>> {
    let size = set.baseline.height();
    match predictor {
        Predictor::CenterBias { sigma_frac } => {
            let cb = center_bias_map(size, size, sigma_frac)?;
            Ok(vec![cb; set.frames.len()])
        }
        Predictor::Model { net, mc_samples } => {
            let ctx: Option<Vec<usize>> = net
                .config
                .context_enabled
                .then(|| set.frames.iter().map(|f| f.context.category_index()).collect());
            if mc_samples == 0 {
                let refs: Vec<&FrameSample> = set.frames.iter().collect();
                return predict_eval(net, &refs, ctx.as_deref());
            }
            set.frames
                .iter()
                .enumerate()
                .map(|(i, f)| {
                    let context = net.config.context_enabled.then_some(f.context);
                    let s = seed.wrapping_add((i * mc_samples) as u64);
                    Ok(point_estimate(&mc_predict(net, &f.image_tensor(size), context, mc_samples, s)?))
                })
                .collect()
        }
    }
}

/// Scores `preds` against the held-out set.
pub fn score_holdout(label: &str, set: &HoldoutSet, preds: Vec<SaliencyMap>, cfg: &EvalConfig) -> Result<MetricReport> {
    let frames: Vec<FrameEval> = set
        .frames
        .iter()
        .zip(preds)
        .zip(&set.gt)
        .zip(&set.others)
        .map(|(((f, pred), gt), other)| FrameEval {
            id: f.id.clone(),
            pred,
            gt: gt.clone(),
            fixations: f.fixations.clone(),
            other: other.clone(),
        })
        .collect();
    let opts = EvalOptions { n_splits: cfg.n_splits, seed: cfg.seed, ..Default::default() };
    evaluate_all(label, &frames, &set.baseline, &opts)
}

/// Leave-one-subject-out evaluation of one predictor.
pub fn evaluate_holdout(
    label: &str,
    manifest: &DatasetManifest,
    holdout: u32,
    predictor: Predictor<'_>,
    cfg: &EvalConfig,
) -> Result<MetricReport> {
    let set = holdout_set(manifest, holdout, cfg.negatives)?;
    let preds = predict_holdout(&set, predictor, cfg.seed)?;
    score_holdout(label, &set, preds, cfg)
}
