//! Procedural paired-domain scenes.
//!
//! A scene is rendered once in the clean domain (sharp glyphs on a smooth
//! background, one tight box per parasite) and then passed through a
//! degradation pipeline that stands in for a cheaper optical path: integer
//! misalignment, Gaussian blur, contrast loss, brightness offset, sensor
//! noise and vignetting.
//!
//! Everything is a pure function of `(config, split, index)`; each sample owns
//! an RNG stream derived from the config seed, so generation order does not
//! matter.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::boxes::{BBox, ParasiteClass, NUM_CLASSES};
use crate::image::Image;
use crate::rng::{self, StreamRng};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SynthError {
    #[error("parasite {index} at ({cx:.2}, {cy:.2}) with radius {radius:.2} leaves the {size}px canvas")]
    ParasiteOutsideCanvas { index: usize, cx: f64, cy: f64, radius: f64, size: usize },
    #[error("parasite {index} radius {radius:.2} outside configured range [{min:.2}, {max:.2}]")]
    RadiusOutOfRange { index: usize, radius: f64, min: f64, max: f64 },
    #[error("shift ({dx}, {dy}) px exceeds 3% of the {size}px image width")]
    ShiftTooLarge { dx: i32, dy: i32, size: usize },
    #[error("invalid degradation parameter: {0}")]
    InvalidDegradation(String),
    #[error("invalid generator config: {0}")]
    InvalidConfig(String),
}

/// Largest misalignment allowed between the two renders, as a fraction of width.
pub const MAX_SHIFT_FRACTION: f64 = 0.03;

pub const CHANNELS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParasiteSpec {
    pub class: ParasiteClass,
    /// Center in pixels.
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
    /// Glyph rotation in radians.
    pub orientation: f64,
}

/// A validated scene description. Construct with [`SceneSpec::new`].
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    seed: u64,
    image_size: usize,
    n_cells: usize,
    parasites: Vec<ParasiteSpec>,
}

impl SceneSpec {
    pub fn new(
        seed: u64,
        image_size: usize,
        n_cells: usize,
        parasites: Vec<ParasiteSpec>,
        radius_range: [f64; 2],
    ) -> Result<Self, SynthError> {
        let size = image_size as f64;
        for (index, p) in parasites.iter().enumerate() {
            if !(p.radius >= radius_range[0] && p.radius <= radius_range[1]) {
                return Err(SynthError::RadiusOutOfRange {
                    index,
                    radius: p.radius,
                    min: radius_range[0],
                    max: radius_range[1],
                });
            }
            let inside = p.cx - p.radius >= 0.0
                && p.cy - p.radius >= 0.0
                && p.cx + p.radius <= size
                && p.cy + p.radius <= size;
            if !inside {
                return Err(SynthError::ParasiteOutsideCanvas {
                    index,
                    cx: p.cx,
                    cy: p.cy,
                    radius: p.radius,
                    size: image_size,
                });
            }
        }
        Ok(Self { seed, image_size, n_cells, parasites })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn image_size(&self) -> usize {
        self.image_size
    }

    pub fn parasites(&self) -> &[ParasiteSpec] {
        &self.parasites
    }
}

// ---- rendering ---------------------------------------------------------

const BACKGROUND: [f32; 3] = [0.93, 0.86, 0.87];
const CELL: [f32; 3] = [0.86, 0.58, 0.63];
const STAIN: [f32; 3] = [0.34, 0.12, 0.46];

fn blend(img: &mut Image, y: usize, x: usize, color: [f32; 3], alpha: f32) {
    for (c, &col) in color.iter().enumerate() {
        let i = img.idx(c, y, x);
        img.data[i] = img.data[i] * (1.0 - alpha) + col * alpha;
    }
}

/// Pixels whose centers fall inside the glyph of `p`.
pub fn glyph_mask(p: &ParasiteSpec, size: usize, dots: usize) -> Vec<(usize, usize)> {
    let r = p.radius;
    let (s, c) = (libm::sin(p.orientation), libm::cos(p.orientation));
    let inside = |dx: f64, dy: f64| -> bool {
        // rotate into the glyph frame
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        let d = libm::sqrt(u * u + v * v);
        match p.class {
            ParasiteClass::Ring => {
                let band = (r - 1.6).max(0.8);
                let chromatin = {
                    let (du, dv) = (u - (r - 0.8), v);
                    du * du + dv * dv <= 1.2 * 1.2
                };
                (d <= r && d >= band) || (chromatin && d <= r)
            }
            ParasiteClass::Trophozoite => {
                let phi = libm::atan2(v, u);
                d <= r * (0.72 + 0.28 * libm::sin(3.0 * phi))
            }
            ParasiteClass::Schizont => {
                let dot_r = (0.3 * r).max(1.0);
                let ring = r - dot_r;
                (0..dots).any(|k| {
                    let a = 2.0 * PI * k as f64 / dots as f64;
                    let (du, dv) = (u - ring * libm::cos(a), v - ring * libm::sin(a));
                    du * du + dv * dv <= dot_r * dot_r
                })
            }
            ParasiteClass::Gametocyte => {
                let (a, b) = (r, 0.55 * r);
                let outer = (u * u) / (a * a) + (v * v) / (b * b) <= 1.0;
                let (a2, b2) = (0.9 * r, 0.45 * r);
                let vv = v - 0.4 * r;
                let bite = (u * u) / (a2 * a2) + (vv * vv) / (b2 * b2) <= 1.0;
                outer && !bite
            }
        }
    };
    let x_lo = libm::floor(p.cx - r - 1.0).max(0.0) as usize;
    let x_hi = (libm::ceil(p.cx + r + 1.0) as usize).min(size);
    let y_lo = libm::floor(p.cy - r - 1.0).max(0.0) as usize;
    let y_hi = (libm::ceil(p.cy + r + 1.0) as usize).min(size);
    let mut px = Vec::new();
    for y in y_lo..y_hi {
        for x in x_lo..x_hi {
            if inside(x as f64 + 0.5 - p.cx, y as f64 + 0.5 - p.cy) {
                px.push((y, x));
            }
        }
    }
    if px.is_empty() {
        let (y, x) = ((p.cy as usize).min(size - 1), (p.cx as usize).min(size - 1));
        px.push((y, x));
    }
    px
}

fn mask_box(class: ParasiteClass, mask: &[(usize, usize)], size: usize) -> BBox {
    let (mut x1, mut y1, mut x2, mut y2) = (usize::MAX, usize::MAX, 0, 0);
    for &(y, x) in mask {
        x1 = x1.min(x);
        y1 = y1.min(y);
        x2 = x2.max(x + 1);
        y2 = y2.max(y + 1);
    }
    let s = size as f64;
    BBox::from_corners(class, x1 as f64 / s, y1 as f64 / s, x2 as f64 / s, y2 as f64 / s).canonical()
}

/// Renders the clean-domain image and one tight box per parasite.
/// Output values are quantized to 8-bit levels so that storage is lossless.
pub fn render_scene(spec: &SceneSpec) -> (Image, Vec<BBox>) {
    let size = spec.image_size;
    let mut rng = rng::stream(spec.seed, &[0x5CE7E]);
    let mut img = Image::filled(CHANNELS, size, size, 0.0);

    // smooth low-frequency background texture
    let waves: Vec<[f64; 4]> = (0..3)
        .map(|_| {
            [
                rng.random_range(0.5..2.5),
                rng.random_range(0.5..2.5),
                rng.random_range(0.0..2.0 * PI),
                rng.random_range(0.01..0.025),
            ]
        })
        .collect();
    for y in 0..size {
        for x in 0..size {
            let (u, v) = (x as f64 / size as f64, y as f64 / size as f64);
            let t: f64 = waves.iter().map(|w| w[3] * libm::sin(2.0 * PI * (w[0] * u + w[1] * v) + w[2])).sum();
            for c in 0..CHANNELS {
                let i = img.idx(c, y, x);
                img.data[i] = BACKGROUND[c] + t as f32;
            }
        }
    }

    // translucent red cells with a paler center
    for _ in 0..spec.n_cells {
        let cr = rng.random_range(0.09..0.14) * size as f64;
        let ccx = rng.random_range(0.0..size as f64);
        let ccy = rng.random_range(0.0..size as f64);
        let shade: f32 = rng.random_range(-0.04..0.04);
        let color = [CELL[0] + shade, CELL[1] + shade, CELL[2] + shade];
        for y in 0..size {
            for x in 0..size {
                let (dx, dy) = (x as f64 + 0.5 - ccx, y as f64 + 0.5 - ccy);
                let d = libm::sqrt(dx * dx + dy * dy) / cr;
                if d <= 1.0 {
                    let alpha = if d < 0.45 { 0.28 } else { 0.5 };
                    blend(&mut img, y, x, color, alpha);
                }
            }
        }
    }

    let mut boxes = Vec::with_capacity(spec.parasites.len());
    for p in &spec.parasites {
        let dots = rng.random_range(4..=8usize);
        let shade: f32 = rng.random_range(-0.05..0.05);
        let color = [STAIN[0] + shade, STAIN[1] + shade, STAIN[2] + shade];
        let mask = glyph_mask(p, size, dots);
        for &(y, x) in &mask {
            blend(&mut img, y, x, color, 0.9);
        }
        boxes.push(mask_box(p.class, &mask, size));
    }
    img.clamp01();
    img.quantize();
    (img, boxes)
}

// ---- degradation -------------------------------------------------------

/// Parameters of the clean-to-degraded mapping for one image.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradationParams {
    pub blur_sigma: f64,
    pub contrast_scale: f64,
    pub brightness_offset: f64,
    pub noise_std: f64,
    pub shift_dx: i32,
    pub shift_dy: i32,
    pub vignette_strength: f64,
}

impl DegradationParams {
    pub fn identity() -> Self {
        Self {
            blur_sigma: 0.0,
            contrast_scale: 1.0,
            brightness_offset: 0.0,
            noise_std: 0.0,
            shift_dx: 0,
            shift_dy: 0,
            vignette_strength: 0.0,
        }
    }

    pub fn validate(&self, image_size: usize) -> Result<(), SynthError> {
        let bad = |what: &str| Err(SynthError::InvalidDegradation(what.to_string()));
        if !(self.blur_sigma >= 0.0 && self.blur_sigma.is_finite()) {
            return bad("blur_sigma must be finite and >= 0");
        }
        if !(self.contrast_scale > 0.0 && self.contrast_scale <= 1.0) {
            return bad("contrast_scale must lie in (0, 1]");
        }
        if !self.brightness_offset.is_finite() {
            return bad("brightness_offset must be finite");
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad("noise_std must be finite and >= 0");
        }
        if !(self.vignette_strength >= 0.0 && self.vignette_strength < 1.0) {
            return bad("vignette_strength must lie in [0, 1)");
        }
        let limit = MAX_SHIFT_FRACTION * image_size as f64;
        let mag = libm::hypot(f64::from(self.shift_dx), f64::from(self.shift_dy));
        if mag > limit {
            return Err(SynthError::ShiftTooLarge { dx: self.shift_dx, dy: self.shift_dy, size: image_size });
        }
        Ok(())
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = libm::ceil(3.0 * sigma) as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| libm::exp(-((i * i) as f64) / (2.0 * sigma * sigma)))
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

fn blur_plane(plane: &mut [f32], h: usize, w: usize, kernel: &[f64]) {
    let r = (kernel.len() / 2) as i64;
    let mut tmp = vec![0f32; plane.len()];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (t, &kv) in kernel.iter().enumerate() {
                let xx = (x as i64 + t as i64 - r).clamp(0, w as i64 - 1) as usize;
                acc += kv * plane[y * w + xx] as f64;
            }
            tmp[y * w + x] = acc as f32;
        }
    }
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (t, &kv) in kernel.iter().enumerate() {
                let yy = (y as i64 + t as i64 - r).clamp(0, h as i64 - 1) as usize;
                acc += kv * tmp[yy * w + x] as f64;
            }
            plane[y * w + x] = acc as f32;
        }
    }
}

/// Applies, in order: integer translation (content moves by `+shift`,
/// borders replicated), Gaussian blur, contrast scaling about 0.5, brightness
/// offset, additive Gaussian noise and a radial vignette, then clamps to
/// `[0, 1]`. Shape is preserved. `params` must already be validated.
pub fn degrade(image: &Image, params: &DegradationParams, rng: &mut StreamRng) -> Image {
    let (h, w) = (image.height, image.width);
    let mut out = image.clone();
    if params.shift_dx != 0 || params.shift_dy != 0 {
        for c in 0..image.channels {
            let src = image.plane(c);
            let dst = out.plane_mut(c);
            for y in 0..h {
                let sy = (y as i64 - params.shift_dy as i64).clamp(0, h as i64 - 1) as usize;
                for x in 0..w {
                    let sx = (x as i64 - params.shift_dx as i64).clamp(0, w as i64 - 1) as usize;
                    dst[y * w + x] = src[sy * w + sx];
                }
            }
        }
    }
    if params.blur_sigma > 0.0 {
        let k = gaussian_kernel(params.blur_sigma);
        for c in 0..out.channels {
            blur_plane(out.plane_mut(c), h, w, &k);
        }
    }
    if params.contrast_scale != 1.0 || params.brightness_offset != 0.0 {
        let (cs, off) = (params.contrast_scale as f32, params.brightness_offset as f32);
        out.data.iter_mut().for_each(|v| *v = 0.5 + cs * (*v - 0.5) + off);
    }
    if params.noise_std > 0.0 {
        let normal = Normal::new(0.0, params.noise_std).expect("validated noise_std");
        out.data.iter_mut().for_each(|v| *v += normal.sample(rng) as f32);
    }
    if params.vignette_strength > 0.0 {
        let (cy, cx) = (h as f64 / 2.0, w as f64 / 2.0);
        let rmax2 = cx * cx + cy * cy;
        for c in 0..out.channels {
            let plane = out.plane_mut(c);
            for y in 0..h {
                for x in 0..w {
                    let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                    let f = 1.0 - params.vignette_strength * (dx * dx + dy * dy) / rmax2;
                    plane[y * w + x] *= f as f32;
                }
            }
        }
    }
    out.clamp01();
    out
}

/// Boxes moved by a pixel shift, clipped and re-rounded; zero shift is exact.
pub fn shift_boxes(boxes: &[BBox], dx: i32, dy: i32, image_size: usize) -> Vec<BBox> {
    if dx == 0 && dy == 0 {
        return boxes.to_vec();
    }
    let s = image_size as f64;
    boxes
        .iter()
        .filter_map(|b| {
            let moved = BBox { cx: b.cx + f64::from(dx) / s, cy: b.cy + f64::from(dy) / s, ..*b };
            moved.clipped().map(|c| c.canonical())
        })
        .collect()
}

// ---- dataset-level configuration ----------------------------------------

/// Per-sample degradation parameters are drawn uniformly from these ranges.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DegradationRanges {
    pub blur_sigma: [f64; 2],
    pub contrast_scale: [f64; 2],
    pub brightness_offset: [f64; 2],
    pub noise_std: [f64; 2],
    /// Largest per-axis integer shift in pixels.
    pub max_shift_px: i32,
    pub vignette_strength: [f64; 2],
}

impl Default for DegradationRanges {
    fn default() -> Self {
        Self {
            blur_sigma: [0.8, 1.3],
            contrast_scale: [0.6, 0.8],
            brightness_offset: [-0.08, 0.0],
            noise_std: [0.02, 0.05],
            max_shift_px: 1,
            vignette_strength: [0.15, 0.35],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub seed: u64,
    pub image_size: usize,
    pub n_train: usize,
    pub n_test: usize,
    /// Inclusive range of parasites per scene.
    pub parasites_per_image: [usize; 2],
    pub radius_range: [f64; 2],
    /// Inclusive range of background cells per scene.
    pub cells_per_image: [usize; 2],
    /// Relative class frequencies in id order.
    pub class_weights: [f64; NUM_CLASSES],
    pub degradation: DegradationRanges,
    /// Free-form label only, e.g. "1000x".
    pub magnification: String,
    /// Also store the clean renders of test scenes (debug split).
    pub write_test_hcm: bool,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            image_size: 64,
            n_train: 200,
            n_test: 50,
            parasites_per_image: [1, 3],
            radius_range: [3.0, 5.5],
            cells_per_image: [4, 9],
            class_weights: [1.0; NUM_CLASSES],
            degradation: DegradationRanges::default(),
            magnification: String::from("1000x"),
            write_test_hcm: true,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidConfig(m.to_string()));
        if self.image_size < 16 || self.image_size % 8 != 0 {
            return bad("image_size must be a multiple of 8 and at least 16");
        }
        let [pmin, pmax] = self.parasites_per_image;
        if pmin > pmax {
            return bad("parasites_per_image range is not ordered");
        }
        let [rmin, rmax] = self.radius_range;
        if !(rmin >= 1.5 && rmin <= rmax && 2.0 * rmax + 2.0 < self.image_size as f64) {
            return bad("radius_range must be ordered, >= 1.5 and fit the canvas");
        }
        if self.cells_per_image[0] > self.cells_per_image[1] {
            return bad("cells_per_image range is not ordered");
        }
        if self.class_weights.iter().any(|w| !(*w >= 0.0)) || self.class_weights.iter().sum::<f64>() <= 0.0 {
            return bad("class_weights must be non-negative with a positive sum");
        }
        let d = &self.degradation;
        for (name, r) in [
            ("blur_sigma", d.blur_sigma),
            ("contrast_scale", d.contrast_scale),
            ("brightness_offset", d.brightness_offset),
            ("noise_std", d.noise_std),
            ("vignette_strength", d.vignette_strength),
        ] {
            if !(r[0] <= r[1]) {
                return Err(SynthError::InvalidConfig(alloc::format!("degradation.{name} range is not ordered")));
            }
        }
        if d.max_shift_px < 0 {
            return bad("degradation.max_shift_px must be >= 0");
        }
        // worst-case draws must be valid parameters
        let extreme = DegradationParams {
            blur_sigma: d.blur_sigma[0],
            contrast_scale: d.contrast_scale[0],
            brightness_offset: d.brightness_offset[0],
            noise_std: d.noise_std[0],
            shift_dx: d.max_shift_px,
            shift_dy: d.max_shift_px,
            vignette_strength: d.vignette_strength[1],
        };
        extreme.validate(self.image_size)?;
        DegradationParams {
            blur_sigma: d.blur_sigma[1],
            contrast_scale: d.contrast_scale[1],
            noise_std: d.noise_std[1],
            vignette_strength: d.vignette_strength[0],
            ..extreme
        }
        .validate(self.image_size)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn tag(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Test => 2,
        }
    }
}

/// A clean/degraded pair of the same field of view.
///
/// `y_l` is the clean annotation moved by the known misalignment. It is only
/// persisted for the test split; training code never reads it.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedSample {
    pub x_h: Image,
    pub y_h: Vec<BBox>,
    pub x_l: Image,
    pub y_l: Vec<BBox>,
    pub degradation: DegradationParams,
}

fn uniform(rng: &mut StreamRng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..r[1])
    }
}

fn pick_class(rng: &mut StreamRng, weights: &[f64; NUM_CLASSES]) -> ParasiteClass {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random_range(0.0..total);
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return ParasiteClass::ALL[i];
        }
        u -= w;
    }
    let last = weights.iter().rposition(|&w| w > 0.0).unwrap_or(0);
    ParasiteClass::ALL[last]
}

/// Draws a random non-overlapping scene.
pub fn sample_scene(cfg: &GenConfig, rng: &mut StreamRng) -> Result<SceneSpec, SynthError> {
    let size = cfg.image_size as f64;
    let n = rng.random_range(cfg.parasites_per_image[0]..=cfg.parasites_per_image[1]);
    let n_cells = rng.random_range(cfg.cells_per_image[0]..=cfg.cells_per_image[1]);
    let mut parasites: Vec<ParasiteSpec> = Vec::with_capacity(n);
    for _ in 0..n {
        let class = pick_class(rng, &cfg.class_weights);
        let radius = uniform(rng, cfg.radius_range);
        let orientation = rng.random_range(0.0..2.0 * PI);
        for _attempt in 0..64 {
            let cx = rng.random_range(radius + 1.0..size - radius - 1.0);
            let cy = rng.random_range(radius + 1.0..size - radius - 1.0);
            let clear = parasites.iter().all(|q| {
                let (dx, dy) = (q.cx - cx, q.cy - cy);
                libm::sqrt(dx * dx + dy * dy) > q.radius + radius + 2.0
            });
            if clear {
                parasites.push(ParasiteSpec { class, cx, cy, radius, orientation });
                break;
            }
        }
    }
    SceneSpec::new(rng.random(), cfg.image_size, n_cells, parasites, cfg.radius_range)
}

pub fn sample_degradation(cfg: &GenConfig, rng: &mut StreamRng) -> DegradationParams {
    let d = &cfg.degradation;
    let mut shift = || {
        if d.max_shift_px == 0 {
            0
        } else {
            rng.random_range(-d.max_shift_px..=d.max_shift_px)
        }
    };
    let (shift_dx, shift_dy) = (shift(), shift());
    DegradationParams {
        blur_sigma: uniform(rng, d.blur_sigma),
        contrast_scale: uniform(rng, d.contrast_scale),
        brightness_offset: uniform(rng, d.brightness_offset),
        noise_std: uniform(rng, d.noise_std),
        shift_dx,
        shift_dy,
        vignette_strength: uniform(rng, d.vignette_strength),
    }
}

/// Sample `index` of `split`; a pure function of its arguments.
pub fn synthesize_pair(cfg: &GenConfig, split: Split, index: usize) -> Result<PairedSample, SynthError> {
    let mut rng = rng::stream(cfg.seed, &[split.tag(), index as u64]);
    let scene = sample_scene(cfg, &mut rng)?;
    let (x_h, y_h) = render_scene(&scene);
    let params = sample_degradation(cfg, &mut rng);
    params.validate(cfg.image_size)?;
    let mut x_l = degrade(&x_h, &params, &mut rng);
    x_l.quantize();
    let y_l = shift_boxes(&y_h, params.shift_dx, params.shift_dy, cfg.image_size);
    Ok(PairedSample { x_h, y_h, x_l, y_l, degradation: params })
}
