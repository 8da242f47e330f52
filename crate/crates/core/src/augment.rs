//! Detection-branch augmentations with box-consistent label transforms:
//! random crop/scale, mix-up and mosaic.
//!
//! Only the detection input is augmented. The contrastive branch always sees
//! the untouched clean/degraded pair, see [`prepare_pair`].

use alloc::string::ToString;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::boxes::BBox;
use crate::image::Image;
use crate::rng::StreamRng;
use crate::synth::PairedSample;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AugmentError {
    #[error("image shapes differ: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize, usize), (usize, usize, usize)),
    #[error("mosaic needs 4 inputs, got {0}")]
    MosaicInputs(usize),
    #[error("sample pool is empty")]
    EmptyPool,
    #[error("invalid augmentation config: {0}")]
    InvalidConfig(alloc::string::String),
}

/// An image with its boxes.
#[derive(Clone, Debug, PartialEq)]
pub struct DetSample {
    pub image: Image,
    pub boxes: Vec<BBox>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugConfig {
    /// Crop side as a fraction of the image side.
    pub crop_scale_range: [f64; 2],
    pub mixup_prob: f64,
    /// Shape of the symmetric Beta distribution for the mixing weight.
    pub mixup_beta: f64,
    pub mosaic_prob: f64,
    /// Boxes keeping less than this fraction of their area are dropped.
    pub min_box_visibility: f64,
    pub seed: u64,
}

impl Default for AugConfig {
    fn default() -> Self {
        Self {
            crop_scale_range: [0.6, 1.0],
            mixup_prob: 0.1,
            mixup_beta: 8.0,
            mosaic_prob: 0.3,
            min_box_visibility: 0.25,
            seed: 0,
        }
    }
}

impl AugConfig {
    /// Every stage switched off.
    pub fn disabled() -> Self {
        Self { crop_scale_range: [1.0, 1.0], mixup_prob: 0.0, mosaic_prob: 0.0, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), AugmentError> {
        let bad = |m: &str| Err(AugmentError::InvalidConfig(m.to_string()));
        let [lo, hi] = self.crop_scale_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return bad("crop_scale_range must satisfy 0 < lo <= hi <= 1");
        }
        if !(0.0..=1.0).contains(&self.mixup_prob) || !(0.0..=1.0).contains(&self.mosaic_prob) {
            return bad("probabilities must lie in [0, 1]");
        }
        if !(self.mixup_beta > 0.0) {
            return bad("mixup_beta must be positive");
        }
        if !(0.0..=1.0).contains(&self.min_box_visibility) {
            return bad("min_box_visibility must lie in [0, 1]");
        }
        Ok(())
    }
}

/// Source of partner samples for mix-up and mosaic.
pub trait SamplePool {
    fn len(&self) -> usize;
    fn get(&self, index: usize) -> &DetSample;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl SamplePool for [DetSample] {
    fn len(&self) -> usize {
        <[DetSample]>::len(self)
    }

    fn get(&self, index: usize) -> &DetSample {
        &self[index]
    }
}

impl SamplePool for Vec<DetSample> {
    fn len(&self) -> usize {
        Vec::len(self)
    }

    fn get(&self, index: usize) -> &DetSample {
        &self[index]
    }
}

fn dims(img: &Image) -> (usize, usize, usize) {
    (img.channels, img.height, img.width)
}

/// Maps a box through `p ↦ offset + scale·p` (per axis). Boxes that end up
/// partly outside the unit square are clipped; those keeping less than
/// `min_visibility` of their (mapped) area are dropped.
fn map_box(b: &BBox, offset: [f64; 2], scale: [f64; 2], min_visibility: f64) -> Option<BBox> {
    let mapped = BBox {
        class: b.class,
        cx: offset[0] + scale[0] * b.cx,
        cy: offset[1] + scale[1] * b.cy,
        w: scale[0] * b.w,
        h: scale[1] * b.h,
    };
    if mapped.is_valid() {
        return Some(mapped);
    }
    let clipped = mapped.clipped()?;
    (clipped.area() >= min_visibility * mapped.area()).then_some(clipped)
}

/// Crops the square window of side `frac·W` at pixel origin `(x0, y0)` and
/// rescales it to the original resolution.
pub fn crop_scale_window(sample: &DetSample, x0: f64, y0: f64, frac: f64, min_visibility: f64) -> DetSample {
    let img = &sample.image;
    let (w, h) = (img.width as f64, img.height as f64);
    let (side_x, side_y) = (frac * w, frac * h);
    let image = if frac == 1.0 && x0 == 0.0 && y0 == 0.0 {
        img.clone()
    } else {
        img.resample(x0, y0, side_x, side_y, img.height, img.width)
    };
    let offset = [-x0 / side_x, -y0 / side_y];
    let scale = [1.0 / frac, 1.0 / frac];
    let boxes = sample.boxes.iter().filter_map(|b| map_box(b, offset, scale, min_visibility)).collect();
    DetSample { image, boxes }
}

fn uniform(rng: &mut StreamRng, lo: f64, hi: f64) -> f64 {
    if lo >= hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

pub fn random_crop_scale(sample: &DetSample, cfg: &AugConfig, rng: &mut StreamRng) -> DetSample {
    let frac = uniform(rng, cfg.crop_scale_range[0], cfg.crop_scale_range[1]);
    let (w, h) = (sample.image.width as f64, sample.image.height as f64);
    let x0 = uniform(rng, 0.0, w - frac * w);
    let y0 = uniform(rng, 0.0, h - frac * h);
    crop_scale_window(sample, x0, y0, frac, cfg.min_box_visibility)
}

/// `m·a + (1−m)·b` with the union of both label sets at full weight.
pub fn mixup_with(a: &DetSample, b: &DetSample, m: f64) -> Result<DetSample, AugmentError> {
    if !a.image.same_dims(&b.image) {
        return Err(AugmentError::ShapeMismatch(dims(&a.image), dims(&b.image)));
    }
    let (ma, mb) = (m as f32, (1.0 - m) as f32);
    let mut image = a.image.clone();
    for (v, &u) in image.data.iter_mut().zip(&b.image.data) {
        *v = (ma * *v + mb * u).clamp(0.0, 1.0);
    }
    let mut boxes = a.boxes.clone();
    boxes.extend_from_slice(&b.boxes);
    Ok(DetSample { image, boxes })
}

pub fn mixup(a: &DetSample, b: &DetSample, cfg: &AugConfig, rng: &mut StreamRng) -> Result<DetSample, AugmentError> {
    let beta = Beta::new(cfg.mixup_beta, cfg.mixup_beta)
        .map_err(|_| AugmentError::InvalidConfig("mixup_beta".to_string()))?;
    mixup_with(a, b, beta.sample(rng))
}

/// Four-quadrant mosaic split at integer pixel `(cx, cy)`: input 0 top-left,
/// 1 top-right, 2 bottom-left, 3 bottom-right, each rescaled into its quadrant.
pub fn mosaic_at(samples: &[&DetSample], cx: usize, cy: usize, min_visibility: f64) -> Result<DetSample, AugmentError> {
    if samples.len() < 4 {
        return Err(AugmentError::MosaicInputs(samples.len()));
    }
    let first = &samples[0].image;
    for s in &samples[1..4] {
        if !s.image.same_dims(first) {
            return Err(AugmentError::ShapeMismatch(dims(first), dims(&s.image)));
        }
    }
    let (h, w, ch) = (first.height, first.width, first.channels);
    let cx = cx.clamp(1, w - 1);
    let cy = cy.clamp(1, h - 1);
    let quads = [(0, 0, cx, cy), (cx, 0, w - cx, cy), (0, cy, cx, h - cy), (cx, cy, w - cx, h - cy)];
    let mut canvas = Image::filled(ch, h, w, 0.0);
    let mut boxes = Vec::new();
    for (s, &(qx, qy, qw, qh)) in samples.iter().zip(&quads) {
        let src = &s.image;
        let tile = src.resample(0.0, 0.0, src.width as f64, src.height as f64, qh, qw);
        for c in 0..ch {
            for y in 0..qh {
                for x in 0..qw {
                    let i = canvas.idx(c, qy + y, qx + x);
                    canvas.data[i] = tile.get(c, y, x);
                }
            }
        }
        let offset = [qx as f64 / w as f64, qy as f64 / h as f64];
        let scale = [qw as f64 / w as f64, qh as f64 / h as f64];
        boxes.extend(s.boxes.iter().filter_map(|b| map_box(b, offset, scale, min_visibility)));
    }
    Ok(DetSample { image: canvas, boxes })
}

pub fn mosaic(samples: &[&DetSample], cfg: &AugConfig, rng: &mut StreamRng) -> Result<DetSample, AugmentError> {
    let first = samples.first().ok_or(AugmentError::MosaicInputs(0))?;
    let (h, w) = (first.image.height, first.image.width);
    let cx = rng.random_range(w / 4..=3 * w / 4);
    let cy = rng.random_range(h / 4..=3 * h / 4);
    mosaic_at(samples, cx, cy, cfg.min_box_visibility)
}

/// Mosaic (with probability `mosaic_prob`), then mix-up (`mixup_prob`), then
/// random crop/scale. Partners are drawn uniformly from `pool`.
pub fn augment_pipeline<P: SamplePool + ?Sized>(
    sample: &DetSample,
    pool: &P,
    cfg: &AugConfig,
    rng: &mut StreamRng,
) -> Result<DetSample, AugmentError> {
    let mut cur = if rng.random::<f64>() < cfg.mosaic_prob {
        if pool.is_empty() {
            return Err(AugmentError::EmptyPool);
        }
        let partners: Vec<&DetSample> = (0..3).map(|_| pool.get(rng.random_range(0..pool.len()))).collect();
        mosaic(&[sample, partners[0], partners[1], partners[2]], cfg, rng)?
    } else {
        sample.clone()
    };
    if rng.random::<f64>() < cfg.mixup_prob {
        if pool.is_empty() {
            return Err(AugmentError::EmptyPool);
        }
        let partner = pool.get(rng.random_range(0..pool.len()));
        cur = mixup(&cur, partner, cfg, rng)?;
    }
    Ok(random_crop_scale(&cur, cfg, rng))
}

/// Inputs for one training pair: the augmented detection sample plus the
/// untouched clean and degraded images for the contrastive branch.
#[derive(Clone, Debug)]
pub struct TrainInput<'a> {
    pub detection: DetSample,
    pub dac_hcm: &'a Image,
    pub dac_lcm: &'a Image,
}

pub fn prepare_pair<'a, P: SamplePool + ?Sized>(
    sample: &'a PairedSample,
    pool: &P,
    cfg: &AugConfig,
    rng: &mut StreamRng,
) -> Result<TrainInput<'a>, AugmentError> {
    let det = DetSample { image: sample.x_h.clone(), boxes: sample.y_h.clone() };
    let detection = augment_pipeline(&det, pool, cfg, rng)?;
    Ok(TrainInput { detection, dac_hcm: &sample.x_h, dac_lcm: &sample.x_l })
}
