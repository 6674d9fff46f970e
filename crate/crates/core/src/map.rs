//! Two-dimensional saliency grids.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Row-major `height x width` grid of saliency values.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl SaliencyMap {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height * width != data.len() || data.is_empty() {
            return Err(Error::Shape(format!(
                "{}x{} map cannot hold {} values",
                height,
                width,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Self { height, width, data }
    }

    /// Accepts `[H, W]`, `[1, H, W]` or `[1, 1, H, W]`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let s = t.shape();
        let (h, w) = match s[..] {
            [h, w] | [1, h, w] | [1, 1, h, w] => (h, w),
            _ => return Err(Error::Shape(format!("tensor {s:?} is not a single map"))),
        };
        Self::new(h, w, t.data().to_vec())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: f64) {
        self.data[row * self.width + col] = v;
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    /// Population standard deviation.
    pub fn std(&self) -> f64 {
        let m = self.mean();
        (self.data.iter().map(|v| (v - m).powi(2)).sum::<f64>() / self.data.len() as f64).sqrt()
    }

    /// `(row, col)` of the first maximum.
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, v) in self.data.iter().enumerate() {
            if *v > self.data[best] {
                best = i;
            }
        }
        (best / self.width, best % self.width)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Divides by the sum; fails on an all-zero or negative-mass map.
    pub fn to_distribution(&self) -> Result<Self> {
        let s = self.sum();
        if !(s > 0.0) || self.data.iter().any(|v| *v < 0.0) {
            return Err(Error::NotNormalized(s));
        }
        Ok(self.map(|v| v / s))
    }

    /// Divides by the maximum; fails when the maximum is not positive.
    pub fn to_peak_one(&self) -> Result<Self> {
        let m = self.max();
        if !(m > 0.0) {
            return Err(Error::NotNormalized(m));
        }
        Ok(self.map(|v| v / m))
    }

    /// Mean row index weighted by map mass.
    pub fn vertical_center_of_mass(&self) -> f64 {
        let s = self.sum();
        let mut acc = 0.0;
        for r in 0..self.height {
            let row: f64 = self.data[r * self.width..(r + 1) * self.width].iter().sum();
            acc += r as f64 * row;
        }
        acc / s
    }

    pub fn l1_distance(&self, other: &SaliencyMap) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).sum()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.height, self.width], self.data.clone()).expect("dims match")
    }
}
