//! PNG reading and writing for RGB frames and 16-bit maps.

use std::path::Path;

use image::{ImageBuffer, Luma, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::map::SaliencyMap;
use crate::tensor::Tensor;

/// Loads an 8-bit PNG as a `[3, H, W]` tensor in `[0, 1]`.
pub fn load_rgb(path: &Path) -> Result<Tensor> {
    let img = image::open(path)?.to_rgb8();
    Ok(rgb_to_tensor(&img))
}

pub fn rgb_to_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        let (x, y) = (x as usize, y as usize);
        for c in 0..3 {
            data[c * h * w + y * w + x] = px.0[c] as f64 / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], data).expect("dims match")
}

pub fn tensor_to_rgb(t: &Tensor) -> Result<RgbImage> {
    let s = t.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::Shape(format!("expected [3, H, W], got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let d = t.data();
    Ok(ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        let q = |c: usize| (d[c * h * w + i].clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([q(0), q(1), q(2)])
    }))
}

pub fn save_rgb(path: &Path, t: &Tensor) -> Result<()> {
    tensor_to_rgb(t)?.save(path)?;
    Ok(())
}

/// Writes `map / scale` as 16-bit grayscale; values are clamped to `[0, 1]`
/// after scaling.
pub fn save_map16(path: &Path, map: &SaliencyMap, scale: f64) -> Result<()> {
    if !(scale > 0.0) {
        return Err(Error::Config(format!("map scale {scale} must be positive")));
    }
    let (h, w) = map.dims();
    let img: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let v = map.get(y as usize, x as usize) / scale;
        Luma([(v.clamp(0.0, 1.0) * 65535.0).round() as u16])
    });
    img.save(path)?;
    Ok(())
}

/// Reads a 16-bit grayscale map, multiplying by `scale`.
pub fn load_map16(path: &Path, scale: f64) -> Result<SaliencyMap> {
    let img = image::open(path)?.to_luma16();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.pixels().map(|p| p.0[0] as f64 / 65535.0 * scale).collect();
    SaliencyMap::new(h, w, data)
}
