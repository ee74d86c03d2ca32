//! Box and landmark arithmetic.
//!
//! Coordinates are continuous pixel corners: a box `(x1, y1, x2, y2)` covers
//! `[x1, x2) x [y1, y2)` and has width `x2 - x1`, with no `+1` adjustments.

use crate::error::{Error, Result};

/// Number of facial landmarks regressed per face.
pub const NUM_LANDMARKS: usize = 5;

/// Coordinate value stored for a missing landmark point.
pub const LANDMARK_SENTINEL: f64 = -1.0;

/// Index permutation applied to landmark identities under a horizontal flip:
/// the eyes swap, the nose stays, the mouth corners swap.
pub const FLIP_PERMUTATION: [usize; NUM_LANDMARKS] = [1, 0, 2, 4, 3];

/// Axis-aligned rectangle in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub const fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    /// Builds a box from its top-left corner and size.
    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self::new(x, y, x + w, y + h)
    }

    /// Builds a box from its center and size.
    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
    }

    #[inline]
    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    #[inline]
    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    #[inline]
    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    #[inline]
    pub fn center(&self) -> Point {
        Point::new(0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    /// True when all coordinates are finite and the box has non-negative size.
    pub fn is_valid(&self) -> bool {
        self.x1.is_finite()
            && self.y1.is_finite()
            && self.x2.is_finite()
            && self.y2.is_finite()
            && self.x2 >= self.x1
            && self.y2 >= self.y1
    }

    /// True when the box has strictly positive width and height.
    pub fn has_positive_area(&self) -> bool {
        self.is_valid() && self.width() > 0.0 && self.height() > 0.0
    }

    /// Clamps the box to `[0, width] x [0, height]`.
    pub fn clip(&self, width: f64, height: f64) -> Self {
        Self::new(
            self.x1.clamp(0.0, width),
            self.y1.clamp(0.0, height),
            self.x2.clamp(0.0, width),
            self.y2.clamp(0.0, height),
        )
    }

    /// Intersection rectangle; `None` when the boxes do not overlap.
    pub fn intersection(&self, other: &BBox) -> Option<BBox> {
        let x1 = self.x1.max(other.x1);
        let y1 = self.y1.max(other.y1);
        let x2 = self.x2.min(other.x2);
        let y2 = self.y2.min(other.y2);
        (x2 > x1 && y2 > y1).then(|| BBox::new(x1, y1, x2, y2))
    }

    /// Mirror about the vertical axis of an image of the given width.
    pub fn flip_horizontal(&self, image_width: f64) -> Self {
        Self::new(image_width - self.x2, self.y1, image_width - self.x1, self.y2)
    }

    /// Affine map `p -> p * scale + offset` applied to both corners.
    pub fn transform(&self, scale: f64, dx: f64, dy: f64) -> Self {
        Self::new(
            self.x1 * scale + dx,
            self.y1 * scale + dy,
            self.x2 * scale + dx,
            self.y2 * scale + dy,
        )
    }

    /// `[x1, y1, x2, y2]`.
    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

/// Intersection-over-union of two boxes.
///
/// Returns 0 when the union is empty, so degenerate inputs never divide by
/// zero.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = match a.intersection(b) {
        Some(r) => r.area(),
        None => return 0.0,
    };
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub const fn sentinel() -> Self {
        Self::new(LANDMARK_SENTINEL, LANDMARK_SENTINEL)
    }
}

/// Five facial keypoints in fixed order: left eye center, right eye center,
/// nose tip, left mouth corner, right mouth corner.
///
/// "Left" and "right" refer to image-left and image-right. A point with
/// `valid[i] == false` holds [`LANDMARK_SENTINEL`] in both coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Landmarks {
    pub points: [Point; NUM_LANDMARKS],
    pub valid: [bool; NUM_LANDMARKS],
}

impl Landmarks {
    pub fn new(points: [Point; NUM_LANDMARKS]) -> Self {
        Self {
            points,
            valid: [true; NUM_LANDMARKS],
        }
    }

    /// A landmark set with every point missing.
    pub fn missing() -> Self {
        Self {
            points: [Point::sentinel(); NUM_LANDMARKS],
            valid: [false; NUM_LANDMARKS],
        }
    }

    /// Builds a landmark set, treating points equal to the sentinel as missing.
    pub fn from_coords(coords: [(f64, f64); NUM_LANDMARKS]) -> Self {
        let mut out = Self::missing();
        for (i, &(x, y)) in coords.iter().enumerate() {
            out.set(i, (x != LANDMARK_SENTINEL).then_some(Point::new(x, y)));
        }
        out
    }

    /// Sets point `i`, or marks it missing when `p` is `None`.
    pub fn set(&mut self, i: usize, p: Option<Point>) {
        match p {
            Some(p) => {
                self.points[i] = p;
                self.valid[i] = true;
            }
            None => {
                self.points[i] = Point::sentinel();
                self.valid[i] = false;
            }
        }
    }

    pub fn get(&self, i: usize) -> Option<Point> {
        self.valid[i].then_some(self.points[i])
    }

    pub fn all_valid(&self) -> bool {
        self.valid.iter().all(|&v| v)
    }

    pub fn any_valid(&self) -> bool {
        self.valid.iter().any(|&v| v)
    }

    /// Applies `p -> p * scale + offset` to valid points.
    pub fn transform(&self, scale: f64, dx: f64, dy: f64) -> Self {
        let mut out = *self;
        for i in 0..NUM_LANDMARKS {
            if self.valid[i] {
                let p = self.points[i];
                out.points[i] = Point::new(p.x * scale + dx, p.y * scale + dy);
            }
        }
        out
    }

    /// Mirrors the points and swaps left/right identities.
    pub fn flip_horizontal(&self, image_width: f64) -> Self {
        let mut out = Self::missing();
        for (dst, &src) in FLIP_PERMUTATION.iter().enumerate() {
            out.set(
                dst,
                self.get(src).map(|p| Point::new(image_width - p.x, p.y)),
            );
        }
        out
    }
}

/// Anchor-relative box regression target:
/// `((gx - ax) / aw, (gy - ay) / ah, ln(gw / aw), ln(gh / ah))` over centers
/// and sizes.
pub type BoxDeltas = [f64; 4];

/// Anchor-relative landmark target: per point `((px - ax) / aw, (py - ay) / ah)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LandmarkDeltas {
    pub deltas: [f64; 2 * NUM_LANDMARKS],
    pub valid: [bool; NUM_LANDMARKS],
}

fn check_anchor(anchor: &BBox) -> Result<()> {
    if anchor.has_positive_area() {
        Ok(())
    } else {
        Err(Error::InvalidAnchor)
    }
}

pub fn encode_box(gt: &BBox, anchor: &BBox) -> Result<BoxDeltas> {
    check_anchor(anchor)?;
    if !gt.has_positive_area() {
        return Err(Error::DegenerateBox);
    }
    let (aw, ah) = (anchor.width(), anchor.height());
    let (ac, gc) = (anchor.center(), gt.center());
    Ok([
        (gc.x - ac.x) / aw,
        (gc.y - ac.y) / ah,
        libm::log(gt.width() / aw),
        libm::log(gt.height() / ah),
    ])
}

pub fn decode_box(deltas: &BoxDeltas, anchor: &BBox) -> Result<BBox> {
    check_anchor(anchor)?;
    Ok(decode_box_unchecked(deltas, anchor))
}

/// Decode without the anchor check, for hot loops over pre-validated anchors.
#[inline]
pub(crate) fn decode_box_unchecked(deltas: &BoxDeltas, anchor: &BBox) -> BBox {
    let (aw, ah) = (anchor.width(), anchor.height());
    let ac = anchor.center();
    let cx = ac.x + deltas[0] * aw;
    let cy = ac.y + deltas[1] * ah;
    let w = aw * libm::exp(deltas[2]);
    let h = ah * libm::exp(deltas[3]);
    BBox::from_center(cx, cy, w, h)
}

pub fn encode_landmarks(gt: &Landmarks, anchor: &BBox) -> Result<LandmarkDeltas> {
    check_anchor(anchor)?;
    let (aw, ah) = (anchor.width(), anchor.height());
    let ac = anchor.center();
    let mut out = LandmarkDeltas {
        deltas: [LANDMARK_SENTINEL; 2 * NUM_LANDMARKS],
        valid: gt.valid,
    };
    for i in 0..NUM_LANDMARKS {
        if let Some(p) = gt.get(i) {
            out.deltas[2 * i] = (p.x - ac.x) / aw;
            out.deltas[2 * i + 1] = (p.y - ac.y) / ah;
        }
    }
    Ok(out)
}

pub fn decode_landmarks(deltas: &LandmarkDeltas, anchor: &BBox) -> Result<Landmarks> {
    check_anchor(anchor)?;
    Ok(decode_landmarks_unchecked(deltas, anchor))
}

#[inline]
pub(crate) fn decode_landmarks_unchecked(deltas: &LandmarkDeltas, anchor: &BBox) -> Landmarks {
    let (aw, ah) = (anchor.width(), anchor.height());
    let ac = anchor.center();
    let mut out = Landmarks::missing();
    for i in 0..NUM_LANDMARKS {
        if deltas.valid[i] {
            out.set(
                i,
                Some(Point::new(
                    ac.x + deltas.deltas[2 * i] * aw,
                    ac.y + deltas.deltas[2 * i + 1] * ah,
                )),
            );
        }
    }
    out
}
