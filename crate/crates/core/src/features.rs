//! Fixed multi-scale per-pixel feature extractor.
//!
//! For every pixel and channel the extractor emits the raw intensity and the
//! mean and standard deviation over square windows of side 3, 7 and 15. Two
//! channel-averaged gradient magnitudes (central differences at offsets 1 and
//! 3, scaled by `1/sqrt(8)`) close the vector, giving `7 * channels + 2`
//! features. Borders use mirror (reflect) padding.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::{BinaryMask, ImageRaster};

#[derive(Debug, Error, PartialEq)]
pub enum FeatureError {
    #[error("mask dimensions {found:?} do not match volume {expected:?}")]
    DimensionMismatch {
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("mask has no foreground pixels")]
    EmptyMask,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtractorConfig {
    pub window_sides: Vec<usize>,
    pub gradient_offsets: Vec<usize>,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self {
            window_sides: vec![3, 7, 15],
            gradient_offsets: vec![1, 3],
        }
    }
}

impl ExtractorConfig {
    pub fn dim(&self, channels: usize) -> usize {
        channels * (1 + 2 * self.window_sides.len()) + self.gradient_offsets.len()
    }
}

/// Row-major per-pixel feature vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVolume {
    width: usize,
    height: usize,
    dim: usize,
    data: Vec<f64>,
}

impl FeatureVolume {
    pub fn new(width: usize, height: usize, dim: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), width * height * dim, "feature volume layout");
        Self {
            width,
            height,
            dim,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }
    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn len(&self) -> usize {
        self.width * self.height
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Features of the pixel with row-major index `i`.
    pub fn pixel(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn at(&self, x: usize, y: usize) -> &[f64] {
        self.pixel(y * self.width + x)
    }
}

/// Reflect padding: `... c b | a b c d | c b ...`.
pub(crate) fn mirror(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m >= n as isize {
        (period - m) as usize
    } else {
        m as usize
    }
}

/// Separable box sum with mirror padding; summation order is relative to the
/// centre pixel, so interior results are translation-consistent bit-for-bit.
fn box_sum(plane: &[f64], width: usize, height: usize, side: usize) -> Vec<f64> {
    let r = (side / 2) as isize;
    let mut horizontal = vec![0.0; plane.len()];
    for y in 0..height {
        let row = &plane[y * width..(y + 1) * width];
        for x in 0..width {
            let mut s = 0.0;
            for k in -r..=r {
                s += row[mirror(x as isize + k, width)];
            }
            horizontal[y * width + x] = s;
        }
    }
    let mut out = vec![0.0; plane.len()];
    for y in 0..height {
        for x in 0..width {
            let mut s = 0.0;
            for k in -r..=r {
                s += horizontal[mirror(y as isize + k, height) * width + x];
            }
            out[y * width + x] = s;
        }
    }
    out
}

pub fn extract_volume(image: &ImageRaster) -> FeatureVolume {
    extract_volume_with(image, &ExtractorConfig::default())
}

pub fn extract_volume_with(image: &ImageRaster, config: &ExtractorConfig) -> FeatureVolume {
    let (width, height, channels) = (image.width(), image.height(), image.channels());
    let n = width * height;
    let dim = config.dim(channels);
    let per_channel = 1 + 2 * config.window_sides.len();
    let mut data = vec![0.0; n * dim];

    let mut planes = Vec::with_capacity(channels);
    for c in 0..channels {
        let plane: Vec<f64> = (0..n).map(|i| image.data()[i * channels + c]).collect();
        let squares: Vec<f64> = plane.iter().map(|v| v * v).collect();
        for i in 0..n {
            data[i * dim + c * per_channel] = plane[i];
        }
        for (w, &side) in config.window_sides.iter().enumerate() {
            let area = (side * side) as f64;
            let sums = box_sum(&plane, width, height, side);
            let sq_sums = box_sum(&squares, width, height, side);
            for i in 0..n {
                let mean = sums[i] / area;
                let var = (sq_sums[i] / area - mean * mean).max(0.0);
                let base = i * dim + c * per_channel + 1 + 2 * w;
                data[base] = mean.clamp(0.0, 1.0);
                data[base + 1] = var.sqrt().min(0.5);
            }
        }
        planes.push(plane);
    }

    let norm = 8f64.sqrt();
    let grad_base = channels * per_channel;
    for (g, &offset) in config.gradient_offsets.iter().enumerate() {
        let d = offset as isize;
        for y in 0..height {
            for x in 0..width {
                let (xi, yi) = (x as isize, y as isize);
                let xp = mirror(xi + d, width);
                let xm = mirror(xi - d, width);
                let yp = mirror(yi + d, height);
                let ym = mirror(yi - d, height);
                let mut total = 0.0;
                for plane in &planes {
                    let gx = plane[y * width + xp] - plane[y * width + xm];
                    let gy = plane[yp * width + x] - plane[ym * width + x];
                    total += (gx * gx + gy * gy).sqrt() / norm;
                }
                data[(y * width + x) * dim + grad_base + g] = total / channels as f64;
            }
        }
    }

    FeatureVolume::new(width, height, dim, data)
}

/// Mean feature vector over the mask's foreground (or every pixel).
pub fn global_pool(volume: &FeatureVolume, mask: Option<&BinaryMask>) -> Result<Vec<f64>, FeatureError> {
    let mut acc = vec![0.0; volume.dim()];
    let mut count = 0usize;
    match mask {
        Some(mask) => {
            if mask.dims() != volume.dims() {
                return Err(FeatureError::DimensionMismatch {
                    expected: volume.dims(),
                    found: mask.dims(),
                });
            }
            for (i, _) in mask.data().iter().enumerate().filter(|(_, &b)| b) {
                for (a, v) in acc.iter_mut().zip(volume.pixel(i)) {
                    *a += v;
                }
                count += 1;
            }
        }
        None => {
            for i in 0..volume.len() {
                for (a, v) in acc.iter_mut().zip(volume.pixel(i)) {
                    *a += v;
                }
            }
            count = volume.len();
        }
    }
    if count == 0 {
        return Err(FeatureError::EmptyMask);
    }
    acc.iter_mut().for_each(|a| *a /= count as f64);
    Ok(acc)
}
