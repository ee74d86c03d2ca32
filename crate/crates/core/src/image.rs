//! Minimal planar RGB image with the operations the pipeline needs.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Planar (CHW) RGB image with intensities in `[0, 1]`. Pixel `(x, y)`
/// covers the continuous square `[x, x + 1) x [y, y + 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self::filled(width, height, [0.0; 3])
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let plane = width * height;
        let mut data = vec![0.0; 3 * plane];
        for c in 0..3 {
            data[c * plane..(c + 1) * plane].fill(rgb[c]);
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn from_planar(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != 3 * width * height {
            return Err(Error::Shape(alloc::format!(
                "{} values for a {width}x{height} RGB image",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    /// From interleaved 8-bit RGB.
    pub fn from_rgb8(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != 3 * width * height {
            return Err(Error::Shape(alloc::format!(
                "{} bytes for a {width}x{height} RGB image",
                bytes.len()
            )));
        }
        let mut img = Self::new(width, height);
        for (i, px) in bytes.chunks_exact(3).enumerate() {
            for c in 0..3 {
                img.data[c * width * height + i] = px[c] as f64 / 255.0;
            }
        }
        Ok(img)
    }

    /// Interleaved 8-bit RGB.
    pub fn to_rgb8(&self) -> Vec<u8> {
        let plane = self.width * self.height;
        let mut out = Vec::with_capacity(3 * plane);
        for i in 0..plane {
            for c in 0..3 {
                out.push(libm::round(self.data[c * plane + i].clamp(0.0, 1.0) * 255.0) as u8);
            }
        }
        out
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, c: usize, x: usize, y: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, x: usize, y: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        [self.get(0, x, y), self.get(1, x, y), self.get(2, x, y)]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        for (c, v) in rgb.into_iter().enumerate() {
            self.set(c, x, y, v);
        }
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut out = self.clone();
        for c in 0..3 {
            for y in 0..self.height {
                for x in 0..self.width {
                    out.set(c, self.width - 1 - x, y, self.get(c, x, y));
                }
            }
        }
        out
    }

    /// Bilinear resampling with pixel-center alignment.
    pub fn resize(&self, width: usize, height: usize) -> Self {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let mut out = Self::new(width, height);
        if self.width == 0 || self.height == 0 {
            return out;
        }
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        let taps = |o: usize, s: f64, n: usize| {
            let p = ((o as f64 + 0.5) * s - 0.5).max(0.0);
            let i0 = (p as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, p - i0 as f64)
        };
        let cols: Vec<_> = (0..width).map(|x| taps(x, sx, self.width)).collect();
        for y in 0..height {
            let (y0, y1, fy) = taps(y, sy, self.height);
            for (x, &(x0, x1, fx)) in cols.iter().enumerate() {
                for c in 0..3 {
                    let top = self.get(c, x0, y0) * (1.0 - fx) + self.get(c, x1, y0) * fx;
                    let bot = self.get(c, x0, y1) * (1.0 - fx) + self.get(c, x1, y1) * fx;
                    out.set(c, x, y, top * (1.0 - fy) + bot * fy);
                }
            }
        }
        out
    }

    /// Window `[x0, x0 + width) x [y0, y0 + height)`; pixels outside the
    /// source take `fill`.
    pub fn crop(&self, x0: isize, y0: isize, width: usize, height: usize, fill: [f64; 3]) -> Self {
        let mut out = Self::filled(width, height, fill);
        for y in 0..height {
            let sy = y0 + y as isize;
            if sy < 0 || sy as usize >= self.height {
                continue;
            }
            for x in 0..width {
                let sx = x0 + x as isize;
                if sx < 0 || sx as usize >= self.width {
                    continue;
                }
                for c in 0..3 {
                    out.set(c, x, y, self.get(c, sx as usize, sy as usize));
                }
            }
        }
        out
    }

    /// Mean colour, used as crop padding.
    pub fn mean_rgb(&self) -> [f64; 3] {
        let plane = (self.width * self.height).max(1) as f64;
        let n = self.width * self.height;
        core::array::from_fn(|c| self.data[c * n..(c + 1) * n].iter().sum::<f64>() / plane)
    }
}

/// Per-channel input normalization `(v - mean) / std`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for Normalization {
    /// ImageNet statistics, the convention of pretrained backbones.
    fn default() -> Self {
        Self {
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
        }
    }
}

/// Stacks equally sized images into a normalized NCHW batch.
pub fn to_batch(images: &[&Image], norm: &Normalization) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::Shape("empty image batch".into()))?;
    let (w, h) = (first.width, first.height);
    if images.iter().any(|i| i.width != w || i.height != h) {
        return Err(Error::Shape("images in a batch must share one size".into()));
    }
    let plane = w * h;
    let mut t = Tensor::zeros([images.len(), 3, h, w]);
    for (n, img) in images.iter().enumerate() {
        let dst = t.sample_mut(n);
        for c in 0..3 {
            let (m, s) = (norm.mean[c], norm.std[c]);
            for (d, v) in dst[c * plane..(c + 1) * plane]
                .iter_mut()
                .zip(&img.data[c * plane..(c + 1) * plane])
            {
                *d = (v - m) / s;
            }
        }
    }
    Ok(t)
}
