//! Ground truth from fixation logs, input contrast equalization and
//! fixation priors.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::map::SaliencyMap;
use crate::tensor::Tensor;

/// One gaze sample projected to the image plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FixationRecord {
    pub subject_id: u32,
    pub frame_index: usize,
    pub x: f64,
    pub y: f64,
}

impl FixationRecord {
    /// `(row, col)` of the pixel containing the fixation.
    pub fn pixel(&self) -> (usize, usize) {
        (self.y.floor().max(0.0) as usize, self.x.floor().max(0.0) as usize)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizeMode {
    /// Divide by the maximum.
    PeakOne,
    /// Divide by the sum.
    Prob,
}

impl fmt::Display for NormalizeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NormalizeMode::PeakOne => "peak_one",
            NormalizeMode::Prob => "prob",
        })
    }
}

impl FromStr for NormalizeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "peak_one" => Ok(NormalizeMode::PeakOne),
            "prob" => Ok(NormalizeMode::Prob),
            other => Err(Error::Config(format!("unknown normalize mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GtConfig {
    /// Gaussian standard deviation in degrees of visual angle.
    pub dva: f64,
    pub horizontal_fov_degrees: f64,
    /// Number of frames (current included) aggregated into one map.
    pub frames_back: usize,
    /// Amplitude discount per frame of age.
    pub gamma: f64,
    pub normalize_mode: NormalizeMode,
}

impl Default for GtConfig {
    fn default() -> Self {
        Self {
            dva: 9.3,
            horizontal_fov_degrees: 110.0,
            frames_back: 3,
            gamma: 0.5,
            normalize_mode: NormalizeMode::PeakOne,
        }
    }
}

impl GtConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dva > 0.0) || !(self.horizontal_fov_degrees > 0.0) {
            return Err(Error::Config("dva and field of view must be positive".into()));
        }
        if self.frames_back == 0 {
            return Err(Error::Config("frames_back must be at least 1".into()));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config(format!("discount {} outside (0, 1]", self.gamma)));
        }
        Ok(())
    }
}

/// Gaussian width in pixels under a linear degrees-to-pixels mapping.
pub fn sigma_pixels(cfg: &GtConfig, image_width: usize) -> f64 {
    cfg.dva * image_width as f64 / cfg.horizontal_fov_degrees
}

/// Fixations contributing to `frame_index`, paired with their age in frames.
pub fn window<'a>(
    fixations: &'a [FixationRecord],
    frame_index: usize,
    frames_back: usize,
) -> impl Iterator<Item = (usize, &'a FixationRecord)> + 'a {
    fixations.iter().filter_map(move |f| {
        let age = frame_index.checked_sub(f.frame_index)?;
        (age < frames_back).then_some((age, f))
    })
}

/// Adds `amplitude * exp(-d² / 2σ²)` around `(row, col)`, truncated at 4σ.
pub fn splat_gaussian(map: &mut SaliencyMap, row: usize, col: usize, sigma: f64, amplitude: f64) {
    let (h, w) = map.dims();
    let reach = 4.0 * sigma;
    let r = reach.ceil() as isize;
    let inv = 1.0 / (2.0 * sigma * sigma);
    let (row, col) = (row as isize, col as isize);
    for y in (row - r).max(0)..=(row + r).min(h as isize - 1) {
        for x in (col - r).max(0)..=(col + r).min(w as isize - 1) {
            let d2 = ((y - row).pow(2) + (x - col).pow(2)) as f64;
            if d2 <= reach * reach {
                let v = map.get(y as usize, x as usize) + amplitude * (-d2 * inv).exp();
                map.set(y as usize, x as usize, v);
            }
        }
    }
}

/// Ground-truth map for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct GtMap {
    pub map: SaliencyMap,
    /// True when no fixation fell in the window; `map` is then all zero.
    pub empty: bool,
}

/// Unnormalized sum of discounted Gaussians over the frame window.
pub fn accumulate(
    fixations: &[FixationRecord],
    frame_index: usize,
    height: usize,
    width: usize,
    cfg: &GtConfig,
) -> Result<SaliencyMap> {
    cfg.validate()?;
    let sigma = sigma_pixels(cfg, width);
    let mut map = SaliencyMap::zeros(height, width);
    for (age, f) in window(fixations, frame_index, cfg.frames_back) {
        let (row, col) = f.pixel();
        if row >= height || col >= width {
            return Err(Error::Dataset(format!(
                "fixation ({}, {}) outside {width}x{height} frame",
                f.x, f.y
            )));
        }
        splat_gaussian(&mut map, row, col, sigma, cfg.gamma.powi(age as i32));
    }
    Ok(map)
}

pub fn fixations_to_map(
    fixations: &[FixationRecord],
    frame_index: usize,
    height: usize,
    width: usize,
    cfg: &GtConfig,
) -> Result<GtMap> {
    let raw = accumulate(fixations, frame_index, height, width, cfg)?;
    if raw.max() <= 0.0 {
        return Ok(GtMap { map: raw, empty: true });
    }
    let map = match cfg.normalize_mode {
        NormalizeMode::PeakOne => raw.to_peak_one()?,
        NormalizeMode::Prob => raw.to_distribution()?,
    };
    Ok(GtMap { map, empty: false })
}

/// Peak-normalized isotropic Gaussian centred on the frame.
pub fn center_bias_map(height: usize, width: usize, sigma_frac: f64) -> Result<SaliencyMap> {
    if !(sigma_frac > 0.0) || height == 0 || width == 0 {
        return Err(Error::Config(format!("center-bias width {sigma_frac} must be positive")));
    }
    let sigma = sigma_frac * height.min(width) as f64;
    let (cy, cx) = ((height as f64 - 1.0) / 2.0, (width as f64 - 1.0) / 2.0);
    let map = SaliencyMap::from_fn(height, width, |r, c| {
        let d2 = (r as f64 - cy).powi(2) + (c as f64 - cx).powi(2);
        (-d2 / (2.0 * sigma * sigma)).exp()
    });
    map.to_peak_one()
}

/// Probability map from pooled fixations of other subjects or frames.
pub fn cross_subject_prior(
    fixations: &[FixationRecord],
    height: usize,
    width: usize,
    sigma: f64,
) -> Result<SaliencyMap> {
    if fixations.is_empty() {
        return Err(Error::EmptyFixations);
    }
    if !(sigma > 0.0) {
        return Err(Error::Config(format!("prior width {sigma} must be positive")));
    }
    let mut map = SaliencyMap::zeros(height, width);
    for f in fixations {
        let (row, col) = f.pixel();
        if row >= height || col >= width {
            return Err(Error::Dataset(format!("fixation ({}, {}) outside the frame", f.x, f.y)));
        }
        splat_gaussian(&mut map, row, col, sigma, 1.0);
    }
    map.to_distribution()
}

const BINS: usize = 256;

fn tile_bounds(len: usize, tiles: usize) -> Vec<(usize, usize)> {
    (0..tiles).map(|i| (i * len / tiles, (i + 1) * len / tiles)).collect()
}

/// Interpolation anchors for `pos`: lower tile, upper tile, upper weight.
fn anchors(pos: usize, centers: &[f64]) -> (usize, usize, f64) {
    let p = pos as f64;
    let last = centers.len() - 1;
    if p <= centers[0] {
        return (0, 0, 0.0);
    }
    if p >= centers[last] {
        return (last, last, 0.0);
    }
    let i = centers.iter().rposition(|&c| c <= p).expect("p above first center");
    (i, i + 1, (p - centers[i]) / (centers[i + 1] - centers[i]))
}

/// Contrast-limited adaptive histogram equalization, per channel, on a
/// `tiles x tiles` grid.
pub fn clahe(image: &Tensor, clip_limit: f64, tiles: usize) -> Result<Tensor> {
    let s = image.shape();
    if s.len() != 3 {
        return Err(Error::Shape(format!("expected [C, H, W], got {s:?}")));
    }
    let (channels, h, w) = (s[0], s[1], s[2]);
    if tiles == 0 || tiles > h || tiles > w {
        return Err(Error::Config(format!("{tiles} tiles do not fit a {h}x{w} image")));
    }
    if !(clip_limit > 0.0) {
        return Err(Error::Config(format!("clip limit {clip_limit} must be positive")));
    }
    if image.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Shape("image values must lie in [0, 1]".into()));
    }
    let rows = tile_bounds(h, tiles);
    let cols = tile_bounds(w, tiles);
    let center = |&(a, b): &(usize, usize)| (a + b - 1) as f64 / 2.0;
    let row_centers: Vec<f64> = rows.iter().map(center).collect();
    let col_centers: Vec<f64> = cols.iter().map(center).collect();
    let bin = |v: f64| (v * 255.0).round() as usize;

    let mut out = vec![0.0; image.len()];
    for ch in 0..channels {
        let plane = &image.data()[ch * h * w..(ch + 1) * h * w];
        let mut luts = vec![[0.0f64; BINS]; tiles * tiles];
        for (ti, &(r0, r1)) in rows.iter().enumerate() {
            for (tj, &(c0, c1)) in cols.iter().enumerate() {
                let mut hist = [0.0f64; BINS];
                for r in r0..r1 {
                    for c in c0..c1 {
                        hist[bin(plane[r * w + c])] += 1.0;
                    }
                }
                let n = ((r1 - r0) * (c1 - c0)) as f64;
                let limit = clip_limit * n / BINS as f64;
                let mut excess = 0.0;
                for v in &mut hist {
                    if *v > limit {
                        excess += *v - limit;
                        *v = limit;
                    }
                }
                let lut = &mut luts[ti * tiles + tj];
                let mut cdf = 0.0;
                for (b, v) in hist.iter().enumerate() {
                    cdf += v + excess / BINS as f64;
                    lut[b] = (cdf / n).min(1.0);
                }
            }
        }
        for r in 0..h {
            let (i0, i1, wy) = anchors(r, &row_centers);
            for c in 0..w {
                let (j0, j1, wx) = anchors(c, &col_centers);
                let b = bin(plane[r * w + c]);
                let at = |i: usize, j: usize| luts[i * tiles + j][b];
                let top = (1.0 - wx) * at(i0, j0) + wx * at(i0, j1);
                let bottom = (1.0 - wx) * at(i1, j0) + wx * at(i1, j1);
                out[ch * h * w + r * w + c] = ((1.0 - wy) * top + wy * bottom).clamp(0.0, 1.0);
            }
        }
    }
    Tensor::new(s.to_vec(), out)
}

/// Sidecar written next to ground-truth maps.
#[derive(Debug, Clone, PartialEq)]
pub struct GtMeta {
    pub normalize_mode: NormalizeMode,
    pub sigma_pixels: f64,
    pub gamma: f64,
    pub frames_back: usize,
    /// Frames whose window held no fixation.
    pub empty_frames: Vec<usize>,
}

impl GtMeta {
    pub fn render(&self) -> String {
        let empty: Vec<String> = self.empty_frames.iter().map(|f| f.to_string()).collect();
        format!(
            "normalize_mode={}\nsigma_pixels={}\ngamma={}\nframes_back={}\nempty_frames={}\n",
            self.normalize_mode,
            self.sigma_pixels,
            self.gamma,
            self.frames_back,
            empty.join(",")
        )
    }

    pub fn parse(text: &str, file: &Path) -> Result<Self> {
        let err = |line: usize, msg: String| Error::Parse { file: file.to_path_buf(), line, msg };
        let mut meta = GtMeta {
            normalize_mode: NormalizeMode::PeakOne,
            sigma_pixels: f64::NAN,
            gamma: f64::NAN,
            frames_back: 0,
            empty_frames: Vec::new(),
        };
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let (key, value) = line.split_once('=').ok_or_else(|| err(i + 1, "expected key=value".into()))?;
            let bad = |e: &dyn fmt::Display| err(i + 1, format!("{key}: {e}"));
            match key.trim() {
                "normalize_mode" => meta.normalize_mode = value.trim().parse().map_err(|e| bad(&e))?,
                "sigma_pixels" => meta.sigma_pixels = value.trim().parse().map_err(|e| bad(&e))?,
                "gamma" => meta.gamma = value.trim().parse().map_err(|e| bad(&e))?,
                "frames_back" => meta.frames_back = value.trim().parse().map_err(|e| bad(&e))?,
                "empty_frames" => {
                    meta.empty_frames = value
                        .split(',')
                        .filter(|s| !s.trim().is_empty())
                        .map(|s| s.trim().parse().map_err(|e| bad(&e)))
                        .collect::<Result<_>>()?
                }
                other => return Err(err(i + 1, format!("unknown key `{other}`"))),
            }
        }
        if meta.sigma_pixels.is_nan() || meta.gamma.is_nan() || meta.frames_back == 0 {
            return Err(err(0, "missing sigma_pixels, gamma or frames_back".into()));
        }
        Ok(meta)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.render()).map_err(|e| Error::io(path, e))
    }
}
