//! Monte-Carlo dropout prediction.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::imageio;
use crate::map::SaliencyMap;
use crate::model::{forward_batch, ContextAttributes, NetworkParams};
use crate::nn::Mode;
use crate::tensor::Tensor;

/// Samples per forward batch.
const CHUNK: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct UncertainPrediction {
    pub mean_map: SaliencyMap,
    /// Population variance across samples.
    pub variance_map: SaliencyMap,
    pub num_samples: usize,
}

/// `samples` forward passes with dropout active; sample `i` draws its masks
/// from seed `seed + i`, so the result does not depend on how samples are
/// batched or scheduled.
pub fn mc_predict(
    net: &NetworkParams,
    image: &Tensor,
    context: Option<ContextAttributes>,
    samples: usize,
    seed: u64,
) -> Result<UncertainPrediction> {
    if samples == 0 {
        return Err(Error::Config("at least one MC sample is required".into()));
    }
    let size = net.config.input_size;
    image.expect_shape(&[3, size, size])?;
    let ctx = context.map(|c| c.category_index());
    let starts: Vec<usize> = (0..samples).step_by(CHUNK).collect();
    let maps: Vec<Vec<SaliencyMap>> = starts
        .par_iter()
        .map(|&start| {
            let n = CHUNK.min(samples - start);
            let mut data = Vec::with_capacity(n * image.len());
            for _ in 0..n {
                data.extend_from_slice(image.data());
            }
            let batch = Tensor::new(vec![n, 3, size, size], data)?;
            let seeds: Vec<u64> = (start..start + n).map(|i| seed.wrapping_add(i as u64)).collect();
            let contexts = ctx.map(|c| vec![c; n]);
            forward_batch(net, batch, contexts.as_deref(), Mode::Mc, &seeds)
        })
        .collect::<Result<_>>()?;
    let maps: Vec<SaliencyMap> = maps.into_iter().flatten().collect();
    Ok(summarize(&maps))
}

/// Per-pixel sample mean and population variance, reduced in sample order.
/// Deviations are taken from the first sample so that identical samples
/// give exactly that sample and zero variance.
pub fn summarize(maps: &[SaliencyMap]) -> UncertainPrediction {
    let (h, w) = maps[0].dims();
    let t = maps.len() as f64;
    let first = maps[0].data();
    let mut shift = vec![0.0; h * w];
    for m in &maps[1..] {
        for ((a, v), x0) in shift.iter_mut().zip(m.data()).zip(first) {
            *a += v - x0;
        }
    }
    shift.iter_mut().for_each(|a| *a /= t);
    let mut var = vec![0.0; h * w];
    for m in maps {
        for (((a, v), x0), d) in var.iter_mut().zip(m.data()).zip(first).zip(&shift) {
            let e = (v - x0) - d;
            *a += e * e;
        }
    }
    var.iter_mut().for_each(|a| *a /= t);
    let mean = first.iter().zip(&shift).map(|(x0, d)| x0 + d).collect();
    UncertainPrediction {
        mean_map: SaliencyMap::new(h, w, mean).expect("dims match"),
        variance_map: SaliencyMap::new(h, w, var).expect("dims match"),
        num_samples: maps.len(),
    }
}

/// The map fed into metrics.
pub fn point_estimate(u: &UncertainPrediction) -> SaliencyMap {
    u.mean_map.clone()
}

/// Sidecar path recording the scale of a 16-bit map.
pub fn scale_sidecar(png: &Path) -> PathBuf {
    let mut s = png.as_os_str().to_owned();
    s.push(".scale.txt");
    PathBuf::from(s)
}

/// Writes `map` as 16-bit grayscale scaled by its maximum (or 1 for an
/// all-zero map), and the scale to a `.scale.txt` sidecar.
pub fn export_map(path: &Path, map: &SaliencyMap) -> Result<f64> {
    let max = map.max();
    let scale = if max > 0.0 { max } else { 1.0 };
    imageio::save_map16(path, map, scale)?;
    let side = scale_sidecar(path);
    fs::write(&side, format!("scale={scale:e}\n")).map_err(|e| Error::io(&side, e))?;
    Ok(scale)
}

/// Reads a map written by [`export_map`].
pub fn import_map(path: &Path) -> Result<SaliencyMap> {
    let side = scale_sidecar(path);
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let scale = text
        .trim()
        .strip_prefix("scale=")
        .and_then(|v| v.parse::<f64>().ok())
        .ok_or_else(|| Error::Parse { file: side.clone(), line: 1, msg: "expected scale=<value>".into() })?;
    imageio::load_map16(path, scale)
}
