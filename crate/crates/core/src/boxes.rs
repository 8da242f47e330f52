//! Parasite classes and normalized bounding boxes.

use core::fmt;

use serde::{Deserialize, Serialize};

pub const NUM_CLASSES: usize = 4;

/// Life stage label. The integer ids are part of every on-disk format.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(u8)]
pub enum ParasiteClass {
    Ring = 0,
    Trophozoite = 1,
    Schizont = 2,
    Gametocyte = 3,
}

impl ParasiteClass {
    pub const ALL: [ParasiteClass; NUM_CLASSES] =
        [Self::Ring, Self::Trophozoite, Self::Schizont, Self::Gametocyte];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Option<Self> {
        Self::ALL.get(id).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Ring => "ring",
            Self::Trophozoite => "trophozoite",
            Self::Schizont => "schizont",
            Self::Gametocyte => "gametocyte",
        }
    }
}

impl fmt::Display for ParasiteClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Rounds to six decimals, the precision of the annotation text format.
pub fn round6(v: f64) -> f64 {
    libm::round(v * 1e6) / 1e6
}

/// Axis-aligned box in normalized image coordinates (center and size).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub class: ParasiteClass,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(class: ParasiteClass, cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { class, cx, cy, w, h }
    }

    pub fn from_corners(class: ParasiteClass, x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { class, cx: 0.5 * (x1 + x2), cy: 0.5 * (y1 + y2), w: x2 - x1, h: y2 - y1 }
    }

    /// `[x1, y1, x2, y2]`
    pub fn corners(&self) -> [f64; 4] {
        [self.cx - 0.5 * self.w, self.cy - 0.5 * self.h, self.cx + 0.5 * self.w, self.cy + 0.5 * self.h]
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Clipped to the unit square; `None` when nothing with positive area remains.
    pub fn clipped(&self) -> Option<Self> {
        let [x1, y1, x2, y2] = self.corners();
        let (x1, y1) = (x1.clamp(0.0, 1.0), y1.clamp(0.0, 1.0));
        let (x2, y2) = (x2.clamp(0.0, 1.0), y2.clamp(0.0, 1.0));
        (x2 > x1 && y2 > y1).then(|| Self::from_corners(self.class, x1, y1, x2, y2))
    }

    /// Positive size and fully inside the unit square.
    pub fn is_valid(&self) -> bool {
        let [x1, y1, x2, y2] = self.corners();
        let eps = 1e-9;
        self.w > 0.0
            && self.h > 0.0
            && x1 >= -eps
            && y1 >= -eps
            && x2 <= 1.0 + eps
            && y2 <= 1.0 + eps
            && self.cx.is_finite()
            && self.cy.is_finite()
    }

    /// Coordinates rounded to the six-decimal text precision.
    pub fn canonical(&self) -> Self {
        Self { class: self.class, cx: round6(self.cx), cy: round6(self.cy), w: round6(self.w), h: round6(self.h) }
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        iou_corners(self.corners(), other.corners())
    }
}

/// Intersection over union of two `[x1, y1, x2, y2]` boxes; 0 when disjoint.
pub fn iou_corners(a: [f64; 4], b: [f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    let area_a = (a[2] - a[0]) * (a[3] - a[1]);
    let area_b = (b[2] - b[0]) * (b[3] - b[1]);
    inter / (area_a + area_b - inter)
}

/// One decoded prediction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    /// Objectness probability times the best class probability, in `[0, 1]`.
    pub confidence: f64,
}

impl Detection {
    pub fn class(&self) -> ParasiteClass {
        self.bbox.class
    }
}
