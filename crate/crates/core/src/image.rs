//! Planar `C×H×W` float images with values in `[0, 1]`.

use alloc::vec;
use alloc::vec::Vec;

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Self { channels, height, width, data: vec![value; channels * height * width] }
    }

    pub fn from_data(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Option<Self> {
        (data.len() == channels * height * width).then_some(Self { channels, height, width, data })
    }

    pub fn same_dims(&self, other: &Image) -> bool {
        self.channels == other.channels && self.height == other.height && self.width == other.width
    }

    #[inline]
    pub fn idx(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.idx(c, y, x)]
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        &self.data[c * self.height * self.width..(c + 1) * self.height * self.width]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn clamp01(&mut self) {
        self.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }

    pub fn in_unit_range(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }

    /// Snaps every value to the nearest multiple of 1/255, the precision of
    /// 8-bit storage.
    pub fn quantize(&mut self) {
        self.data.iter_mut().for_each(|v| *v = f32::from(to_u8(*v)) / 255.0);
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| to_u8(v)).collect()
    }

    pub fn from_u8(channels: usize, height: usize, width: usize, bytes: &[u8]) -> Option<Self> {
        let data = bytes.iter().map(|&b| f32::from(b) / 255.0).collect();
        Self::from_data(channels, height, width, data)
    }

    /// Sum of absolute differences between horizontal and vertical neighbours.
    pub fn total_variation(&self) -> f64 {
        let mut tv = 0.0f64;
        for c in 0..self.channels {
            for y in 0..self.height {
                for x in 0..self.width {
                    let v = self.get(c, y, x) as f64;
                    if x + 1 < self.width {
                        tv += (self.get(c, y, x + 1) as f64 - v).abs();
                    }
                    if y + 1 < self.height {
                        tv += (self.get(c, y + 1, x) as f64 - v).abs();
                    }
                }
            }
        }
        tv
    }

    /// Bilinear resampling of the source window `[x0, x0+w) × [y0, y0+h)` (in
    /// source pixels) onto an `out_h × out_w` grid, pixel-center aligned.
    /// Sampling the full image at its own size reproduces it exactly.
    pub fn resample(&self, x0: f64, y0: f64, w: f64, h: f64, out_h: usize, out_w: usize) -> Image {
        let mut out = Image::filled(self.channels, out_h, out_w, 0.0);
        let sx = w / out_w as f64;
        let sy = h / out_h as f64;
        for oy in 0..out_h {
            let fy = y0 + (oy as f64 + 0.5) * sy - 0.5;
            let (y_lo, y_hi, ty) = lerp_taps(fy, self.height);
            for ox in 0..out_w {
                let fx = x0 + (ox as f64 + 0.5) * sx - 0.5;
                let (x_lo, x_hi, tx) = lerp_taps(fx, self.width);
                for c in 0..self.channels {
                    let a = self.get(c, y_lo, x_lo) as f64;
                    let b = self.get(c, y_lo, x_hi) as f64;
                    let d = self.get(c, y_hi, x_lo) as f64;
                    let e = self.get(c, y_hi, x_hi) as f64;
                    let top = a + (b - a) * tx;
                    let bot = d + (e - d) * tx;
                    let i = out.idx(c, oy, ox);
                    out.data[i] = (top + (bot - top) * ty) as f32;
                }
            }
        }
        out
    }
}

fn lerp_taps(f: f64, n: usize) -> (usize, usize, f64) {
    let f = f.clamp(0.0, (n - 1) as f64);
    let lo = libm::floor(f) as usize;
    let hi = (lo + 1).min(n - 1);
    (lo, hi, f - lo as f64)
}

#[inline]
fn to_u8(v: f32) -> u8 {
    libm::roundf(v.clamp(0.0, 1.0) * 255.0) as u8
}
