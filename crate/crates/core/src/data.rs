//! On-disk dataset layout, leave-one-subject-out splits and the synthetic
//! scenario generator.
//!
//! ```text
//! root/manifest.csv
//! root/subject_<S>/block_<B>/scenario_<C>/frame_00000.png ...
//!                                        /fixations.csv   frame_index,x,y
//!                                        /context.txt     time_pressure=yes|no
//!                                                         riskiness=high|low
//! ```

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gt::FixationRecord;
use crate::imageio;
use crate::model::ContextAttributes;
use crate::rng::{substream, Rng};
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.csv";
const MANIFEST_HEADER: &str = "subject,block,scenario,time_pressure,riskiness,frames";
/// Frames per second of the recorded stream.
pub const DEFAULT_FPS: f64 = 3.0;
/// Reference width (pixels) of the published fixation statistics.
pub const REFERENCE_SIZE: f64 = 224.0;

/// One trial: a subject driving through one scenario within one block.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioRecord {
    pub subject_id: u32,
    pub block: u32,
    pub scenario_id: u32,
    pub context: ContextAttributes,
    pub dir: PathBuf,
    pub num_frames: usize,
    pub fixations: Vec<FixationRecord>,
}

impl ScenarioRecord {
    pub fn frame_path(&self, frame_index: usize) -> PathBuf {
        frame_path(&self.dir, frame_index)
    }

    /// Path relative to the dataset root.
    pub fn rel_dir(&self) -> PathBuf {
        trial_rel_dir(self.subject_id, self.block, self.scenario_id)
    }

    pub fn fixations_at(&self, frame_index: usize) -> impl Iterator<Item = &FixationRecord> {
        self.fixations.iter().filter(move |f| f.frame_index == frame_index)
    }
}

pub fn frame_path(dir: &Path, frame_index: usize) -> PathBuf {
    dir.join(format!("frame_{frame_index:05}.png"))
}

pub fn trial_rel_dir(subject: u32, block: u32, scenario: u32) -> PathBuf {
    PathBuf::from(format!("subject_{subject}"))
        .join(format!("block_{block}"))
        .join(format!("scenario_{scenario}"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    /// Sorted by subject, block, scenario.
    pub records: Vec<ScenarioRecord>,
    pub height: usize,
    pub width: usize,
    pub fps: f64,
}

impl DatasetManifest {
    pub fn subjects(&self) -> Vec<u32> {
        let set: BTreeSet<u32> = self.records.iter().map(|r| r.subject_id).collect();
        set.into_iter().collect()
    }

    pub fn num_frames(&self) -> usize {
        self.records.iter().map(|r| r.num_frames).sum()
    }

    fn manifest_csv(&self) -> String {
        let mut out = format!("{MANIFEST_HEADER}\n");
        for r in &self.records {
            let tp = if r.context.time_pressure { "yes" } else { "no" };
            let risk = if r.context.high_risk { "high" } else { "low" };
            out.push_str(&format!(
                "{},{},{},{tp},{risk},{}\n",
                r.subject_id, r.block, r.scenario_id, r.num_frames
            ));
        }
        out
    }
}

fn parse_err(file: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse { file: file.to_path_buf(), line, msg: msg.into() }
}

fn numbered_dirs(dir: &Path, prefix: &str) -> Result<Vec<(u32, PathBuf)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        let Some(num) = name.strip_prefix(prefix) else { continue };
        if !entry.path().is_dir() {
            continue;
        }
        let id = num
            .parse()
            .map_err(|_| Error::Dataset(format!("{}: `{num}` is not a number", entry.path().display())))?;
        out.push((id, entry.path()));
    }
    out.sort();
    Ok(out)
}

pub fn parse_context(text: &str, file: &Path) -> Result<ContextAttributes> {
    let (mut tp, mut risk) = (None, None);
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| parse_err(file, i + 1, "expected key=value"))?;
        match (k.trim(), v.trim()) {
            ("time_pressure", "yes") => tp = Some(true),
            ("time_pressure", "no") => tp = Some(false),
            ("riskiness", "high") => risk = Some(true),
            ("riskiness", "low") => risk = Some(false),
            (k, v) => return Err(parse_err(file, i + 1, format!("unexpected `{k}={v}`"))),
        }
    }
    match (tp, risk) {
        (Some(tp), Some(risk)) => Ok(ContextAttributes::new(tp, risk)),
        _ => Err(parse_err(file, 0, "context needs time_pressure and riskiness")),
    }
}

pub fn render_context(c: ContextAttributes) -> String {
    format!(
        "time_pressure={}\nriskiness={}\n",
        if c.time_pressure { "yes" } else { "no" },
        if c.high_risk { "high" } else { "low" }
    )
}

/// Parses `frame_index,x,y` rows, rejecting coordinates outside the frame
/// or frame indices beyond `num_frames`.
pub fn parse_fixations(
    text: &str,
    file: &Path,
    subject_id: u32,
    width: usize,
    height: usize,
    num_frames: usize,
) -> Result<Vec<FixationRecord>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == "frame_index,x,y" => {}
        _ => return Err(parse_err(file, 1, "expected header `frame_index,x,y`")),
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        let n = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').map(str::trim).collect();
        if cols.len() != 3 {
            return Err(parse_err(file, n, format!("expected 3 columns, got {}", cols.len())));
        }
        let frame_index: usize = cols[0]
            .parse()
            .map_err(|_| parse_err(file, n, format!("bad frame index `{}`", cols[0])))?;
        let x: f64 = cols[1].parse().map_err(|_| parse_err(file, n, format!("bad x `{}`", cols[1])))?;
        let y: f64 = cols[2].parse().map_err(|_| parse_err(file, n, format!("bad y `{}`", cols[2])))?;
        if !(x >= 0.0 && x < width as f64 && y >= 0.0 && y < height as f64) {
            return Err(parse_err(file, n, format!("fixation ({x}, {y}) outside the {width}x{height} frame")));
        }
        if frame_index >= num_frames {
            return Err(parse_err(file, n, format!("frame {frame_index} but only {num_frames} frames exist")));
        }
        out.push(FixationRecord { subject_id, frame_index, x, y });
    }
    Ok(out)
}

fn count_frames(dir: &Path) -> Result<usize> {
    let mut n = 0;
    while frame_path(dir, n).is_file() {
        n += 1;
    }
    Ok(n)
}

/// Scans `root` and validates every trial directory.
pub fn load_dataset(root: &Path) -> Result<DatasetManifest> {
    if !root.is_dir() {
        return Err(Error::Dataset(format!("{} is not a directory", root.display())));
    }
    let mut trials = Vec::new();
    for (subject, sdir) in numbered_dirs(root, "subject_")? {
        for (block, bdir) in numbered_dirs(&sdir, "block_")? {
            for (scenario, dir) in numbered_dirs(&bdir, "scenario_")? {
                trials.push((subject, block, scenario, dir));
            }
        }
    }
    if trials.is_empty() {
        return Err(Error::Dataset(format!("no scenarios found under {}", root.display())));
    }
    let first = frame_path(&trials[0].3, 0);
    let (w, h) = image::image_dimensions(&first)?;
    let (width, height) = (w as usize, h as usize);

    let records = trials
        .into_par_iter()
        .map(|(subject_id, block, scenario_id, dir)| {
            let ctx_path = dir.join("context.txt");
            let ctx_text = fs::read_to_string(&ctx_path).map_err(|e| Error::io(&ctx_path, e))?;
            let context = parse_context(&ctx_text, &ctx_path)?;
            let num_frames = count_frames(&dir)?;
            if num_frames == 0 {
                return Err(Error::Dataset(format!("{}: no frames", dir.display())));
            }
            for f in 0..num_frames {
                let (fw, fh) = image::image_dimensions(frame_path(&dir, f))?;
                if (fw as usize, fh as usize) != (width, height) {
                    return Err(Error::Dataset(format!(
                        "{}: {fw}x{fh} frame in a {width}x{height} dataset",
                        frame_path(&dir, f).display()
                    )));
                }
            }
            let fix_path = dir.join("fixations.csv");
            let fix_text = fs::read_to_string(&fix_path).map_err(|e| Error::io(&fix_path, e))?;
            let fixations = parse_fixations(&fix_text, &fix_path, subject_id, width, height, num_frames)?;
            Ok(ScenarioRecord { subject_id, block, scenario_id, context, dir, num_frames, fixations })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut seen = BTreeSet::new();
    for r in &records {
        if !seen.insert((r.subject_id, r.scenario_id, r.context)) {
            return Err(Error::Dataset(format!(
                "duplicate trial: subject {} scenario {} context {}",
                r.subject_id, r.scenario_id, r.context
            )));
        }
    }
    let manifest = DatasetManifest {
        root: root.to_path_buf(),
        records,
        height,
        width,
        fps: DEFAULT_FPS,
    };
    let cache = root.join(MANIFEST);
    if cache.is_file() {
        let text = fs::read_to_string(&cache).map_err(|e| Error::io(&cache, e))?;
        if text != manifest.manifest_csv() {
            return Err(Error::Dataset(format!("{} does not match the directory contents", cache.display())));
        }
    }
    Ok(manifest)
}

/// Test records are every trial of `held_out`; training records the rest.
pub fn loso_split(manifest: &DatasetManifest, held_out: u32) -> Result<(Vec<ScenarioRecord>, Vec<ScenarioRecord>)> {
    if !manifest.records.iter().any(|r| r.subject_id == held_out) {
        return Err(Error::Dataset(format!("unknown subject {held_out}")));
    }
    let (test, train) = manifest.records.iter().cloned().partition(|r| r.subject_id == held_out);
    Ok((train, test))
}

/// Fixation distribution for one context, as fractions of the frame size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GazeParams {
    pub v_mean: f64,
    pub v_std: f64,
    pub h_mean: f64,
    pub h_std: f64,
}

impl GazeParams {
    /// From pixel statistics at the 224-pixel reference size.
    pub const fn reference(v_mean: f64, v_std: f64, h_mean: f64, h_std: f64) -> Self {
        Self {
            v_mean: v_mean / REFERENCE_SIZE,
            v_std: v_std / REFERENCE_SIZE,
            h_mean: h_mean / REFERENCE_SIZE,
            h_std: h_std / REFERENCE_SIZE,
        }
    }
}

/// Per-context defaults, indexed by [`ContextAttributes::category_index`].
/// The (no, low) and (yes, high) vertical statistics and the (no, low)
/// horizontal spread are the published pixel values; the rest interpolate
/// between them. Horizontal means are separated per context so that the
/// context carries a learnable spatial signal.
pub const DEFAULT_GAZE: [GazeParams; 4] = [
    GazeParams::reference(117.21, 17.51, 0.50 * REFERENCE_SIZE, 26.76),
    GazeParams::reference(118.0, 18.5, 0.40 * REFERENCE_SIZE, 23.0),
    GazeParams::reference(119.5, 19.8, 0.60 * REFERENCE_SIZE, 23.0),
    GazeParams::reference(120.28, 20.79, 0.30 * REFERENCE_SIZE, 20.0),
];

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_subjects: u32,
    pub n_scenarios: u32,
    pub frames_per_trial: usize,
    pub image_size: usize,
    pub gaze: [GazeParams; 4],
    /// Standard deviation of the per-subject gaze offset, as a fraction of
    /// the width.
    pub subject_offset_std: f64,
    pub min_fixations: usize,
    pub max_fixations: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_subjects: 11,
            n_scenarios: 12,
            frames_per_trial: 14,
            image_size: 64,
            gaze: DEFAULT_GAZE,
            subject_offset_std: 0.05,
            min_fixations: 1,
            max_fixations: 3,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_subjects < 2 {
            return bad("at least 2 subjects are needed for leave-one-subject-out evaluation".into());
        }
        if !(1..=12).contains(&self.n_scenarios) {
            return bad(format!("scenario count {} outside 1..=12", self.n_scenarios));
        }
        if self.frames_per_trial == 0 || self.image_size < 8 {
            return bad("need at least one frame per trial and an image size of at least 8".into());
        }
        if self.min_fixations == 0 || self.min_fixations > self.max_fixations {
            return bad("fixations per frame must satisfy 1 <= min <= max".into());
        }
        for (i, g) in self.gaze.iter().enumerate() {
            let inside = |m: f64, s: f64| s > 0.0 && m - 3.0 * s >= 0.0 && m + 3.0 * s <= 1.0;
            if !inside(g.v_mean, g.v_std) || !inside(g.h_mean, g.h_std) {
                return bad(format!("gaze distribution {i} leaves the frame within 3 standard deviations"));
            }
        }
        Ok(())
    }
}

/// Draws one in-frame fixation `(x, y)` in pixels, resampling draws that
/// fall outside. Coordinates are truncated to three decimals.
pub fn sample_fixation(g: &GazeParams, offset: (f64, f64), size: usize, rng: &mut Rng) -> (f64, f64) {
    let s = size as f64;
    let hx = Normal::new((g.h_mean + offset.0) * s, g.h_std * s).expect("positive std");
    let vy = Normal::new((g.v_mean + offset.1) * s, g.v_std * s).expect("positive std");
    let q = |v: f64| (v * 1000.0).floor() / 1000.0;
    loop {
        let (x, y) = (q(hx.sample(rng)), q(vy.sample(rng)));
        if x >= 0.0 && x < s && y >= 0.0 && y < s {
            return (x, y);
        }
    }
}

/// Street-like frame for `(scenario, frame)`: sky and road gradients,
/// buildings along the horizon and vehicles drifting across the road.
pub fn render_scene(size: usize, scenario: u32, frame: usize, seed: u64) -> Tensor {
    let mut rng = substream(seed, &format!("scene-{scenario}"));
    let s = size as f64;
    let horizon = rng.gen_range(0.38..0.5) * s;
    let sky = [rng.gen_range(0.5..0.7), rng.gen_range(0.6..0.8), rng.gen_range(0.8..0.95)];
    let road = [rng.gen_range(0.25..0.4); 3];
    let mut rects: Vec<([f64; 4], [f64; 3])> = Vec::new();
    for _ in 0..rng.gen_range(3..7) {
        let w = rng.gen_range(0.08..0.2) * s;
        let h = rng.gen_range(0.15..0.35) * s;
        let x0 = rng.gen_range(0.0..s - w);
        let shade = rng.gen_range(0.3..0.8);
        rects.push(([x0, horizon - h, x0 + w, horizon], [shade, shade * 0.9, shade * 0.85]));
    }
    let t = frame as f64;
    for _ in 0..rng.gen_range(1..4) {
        let w = rng.gen_range(0.1..0.2) * s;
        let h = w * 0.5;
        let y1 = rng.gen_range(horizon + h..s);
        let speed = rng.gen_range(-0.03..0.03) * s;
        let x0 = (rng.gen_range(0.0..s) + speed * t).rem_euclid(s + w) - w;
        let color = [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)];
        rects.push(([x0, y1 - h, x0 + w, y1], color));
    }
    let mut data = vec![0.0; 3 * size * size];
    for r in 0..size {
        let y = r as f64 + 0.5;
        for c in 0..size {
            let x = c as f64 + 0.5;
            let mut px = if y < horizon {
                let k = y / horizon;
                [sky[0] * (1.0 - 0.3 * k), sky[1] * (1.0 - 0.2 * k), sky[2]]
            } else {
                let k = (y - horizon) / (s - horizon);
                [road[0] + 0.2 * k, road[1] + 0.2 * k, road[2] + 0.2 * k]
            };
            for (b, color) in &rects {
                if x >= b[0] && x < b[2] && y >= b[1] && y < b[3] {
                    px = *color;
                }
            }
            for ch in 0..3 {
                data[ch * size * size + r * size + c] = px[ch].clamp(0.0, 1.0);
            }
        }
    }
    Tensor::new(vec![3, size, size], data).expect("dims match")
}

fn encode_png(t: &Tensor) -> Result<Vec<u8>> {
    let img = imageio::tensor_to_rgb(t)?;
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png)?;
    Ok(out.into_inner())
}

/// Writes a synthetic dataset and returns its manifest (equal to what
/// [`load_dataset`] reads back).
pub fn generate_synthetic(cfg: &SynthConfig, root: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let size = cfg.image_size;

    let frames: Vec<Vec<Vec<u8>>> = (1..=cfg.n_scenarios)
        .into_par_iter()
        .map(|sc| {
            (0..cfg.frames_per_trial)
                .map(|f| encode_png(&render_scene(size, sc, f, cfg.seed)))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;

    let jobs: Vec<(u32, u32, ContextAttributes, (f64, f64))> = (1..=cfg.n_subjects)
        .flat_map(|s| {
            let mut orng = substream(cfg.seed, &format!("subject-offset-{s}"));
            let off = Normal::new(0.0, cfg.subject_offset_std).expect("valid std");
            let offset = (off.sample(&mut orng), off.sample(&mut orng));
            let mut order = ContextAttributes::all();
            order.shuffle(&mut substream(cfg.seed, &format!("blocks-{s}")));
            order.into_iter().enumerate().map(move |(b, ctx)| (s, b as u32 + 1, ctx, offset))
        })
        .collect();

    let records = jobs
        .into_par_iter()
        .map(|(subject, block, context, offset)| {
            let mut rng = substream(cfg.seed, &format!("fixations-{subject}-{block}"));
            let gaze = cfg.gaze[context.category_index()];
            let mut trials = Vec::new();
            for scenario in 1..=cfg.n_scenarios {
                let rel = trial_rel_dir(subject, block, scenario);
                let dir = root.join(&rel);
                fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                for (f, bytes) in frames[scenario as usize - 1].iter().enumerate() {
                    let p = frame_path(&dir, f);
                    fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
                }
                let mut csv = String::from("frame_index,x,y\n");
                let mut fixations = Vec::new();
                for f in 0..cfg.frames_per_trial {
                    for _ in 0..rng.gen_range(cfg.min_fixations..=cfg.max_fixations) {
                        let (x, y) = sample_fixation(&gaze, offset, size, &mut rng);
                        let row = format!("{f},{x:.3},{y:.3}");
                        let mut cols = row.split(',').skip(1).map(|v| v.parse::<f64>().expect("formatted float"));
                        let (x, y) = (cols.next().expect("x"), cols.next().expect("y"));
                        fixations.push(FixationRecord { subject_id: subject, frame_index: f, x, y });
                        csv.push_str(&row);
                        csv.push('\n');
                    }
                }
                let p = dir.join("fixations.csv");
                fs::write(&p, csv).map_err(|e| Error::io(&p, e))?;
                let p = dir.join("context.txt");
                fs::write(&p, render_context(context)).map_err(|e| Error::io(&p, e))?;
                trials.push(ScenarioRecord {
                    subject_id: subject,
                    block,
                    scenario_id: scenario,
                    context,
                    dir,
                    num_frames: cfg.frames_per_trial,
                    fixations,
                });
            }
            Ok(trials)
        })
        .collect::<Result<Vec<_>>>()?;

    let manifest = DatasetManifest {
        root: root.to_path_buf(),
        records: records.into_iter().flatten().collect(),
        height: size,
        width: size,
        fps: DEFAULT_FPS,
    };
    let p = root.join(MANIFEST);
    fs::write(&p, manifest.manifest_csv()).map_err(|e| Error::io(&p, e))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig { n_subjects: 3, n_scenarios: 2, frames_per_trial: 3, image_size: 16, ..Default::default() }
    }

    #[test]
    fn default_gaze_stays_inside_the_frame() {
        SynthConfig::default().validate().unwrap();
        assert!(SynthConfig { n_subjects: 1, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn generated_set_loads_back_identically() {
        let dir = tempfile::tempdir().unwrap();
        let made = generate_synthetic(&small(), dir.path()).unwrap();
        assert_eq!(made.records.len(), 3 * 4 * 2);
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded, made);
        for s in loaded.subjects() {
            let contexts: BTreeSet<_> = loaded.records.iter().filter(|r| r.subject_id == s).map(|r| r.context).collect();
            assert_eq!(contexts.len(), 4);
        }
    }

    #[test]
    fn empty_directory_has_no_scenarios() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("no scenarios found"), "{err}");
    }

    #[test]
    fn fixation_on_the_right_edge_is_rejected() {
        let err = parse_fixations("frame_index,x,y\n0,16,3\n", Path::new("f.csv"), 1, 16, 16, 1)
            .unwrap_err()
            .to_string();
        assert!(err.contains("(16, 3)") && err.contains("f.csv:2"), "{err}");
        assert!(parse_fixations("frame_index,x,y\n0,15.999,3\n", Path::new("f.csv"), 1, 16, 16, 1).is_ok());
        assert!(parse_fixations("x,y\n", Path::new("f.csv"), 1, 16, 16, 1).is_err());
    }

    #[test]
    fn context_file_round_trip() {
        for c in ContextAttributes::all() {
            assert_eq!(parse_context(&render_context(c), Path::new("c")).unwrap(), c);
        }
        assert!(parse_context("time_pressure=yes\n", Path::new("c")).is_err());
    }

    #[test]
    fn scenes_are_deterministic_and_animated() {
        assert_eq!(render_scene(32, 3, 5, 1), render_scene(32, 3, 5, 1));
        assert_ne!(render_scene(32, 3, 0, 1), render_scene(32, 4, 0, 1));
        assert!(render_scene(32, 3, 5, 1).data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
