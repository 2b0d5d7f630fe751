//! Axis-aligned box arithmetic and mask rasterization.
//!
//! Boxes use a half-open pixel convention: pixel `(i, j)` (row `i`, column `j`)
//! lies inside a box iff `x1 <= j < x2` and `y1 <= i < y2`. For integer boxes
//! this makes `area == (x2 - x1) * (y2 - y1)` equal the rasterized pixel count.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("degenerate box {0:?}: zero area")]
    ZeroArea(BBox),
}

/// Axis-aligned rectangle in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub const fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BBox { x1, y1, x2, y2 }
    }

    /// The box covering a whole `width x height` frame.
    pub fn full_frame(width: usize, height: usize) -> Self {
        BBox::new(0.0, 0.0, width as f64, height as f64)
    }

    pub fn width(&self) -> f64 {
        (self.x2 - self.x1).max(0.0)
    }

    pub fn height(&self) -> f64 {
        (self.y2 - self.y1).max(0.0)
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn is_valid(&self) -> bool {
        self.x1.is_finite()
            && self.y1.is_finite()
            && self.x2.is_finite()
            && self.y2.is_finite()
            && self.x1 <= self.x2
            && self.y1 <= self.y2
    }

    pub fn intersection(&self, other: &BBox) -> Option<BBox> {
        let x1 = self.x1.max(other.x1);
        let y1 = self.y1.max(other.y1);
        let x2 = self.x2.min(other.x2);
        let y2 = self.y2.min(other.y2);
        (x1 < x2 && y1 < y2).then_some(BBox::new(x1, y1, x2, y2))
    }

    pub fn clamp(&self, width: usize, height: usize) -> BBox {
        let (w, h) = (width as f64, height as f64);
        let x1 = self.x1.clamp(0.0, w);
        let y1 = self.y1.clamp(0.0, h);
        BBox::new(x1, y1, self.x2.clamp(x1, w), self.y2.clamp(y1, h))
    }

    pub fn within(&self, width: usize, height: usize) -> bool {
        self.is_valid()
            && self.x1 >= 0.0
            && self.y1 >= 0.0
            && self.x2 <= width as f64
            && self.y2 <= height as f64
    }

    pub fn translate(&self, dx: f64, dy: f64) -> BBox {
        BBox::new(self.x1 + dx, self.y1 + dy, self.x2 + dx, self.y2 + dy)
    }

    /// Integer pixel span `[start, end)` of columns covered under the half-open rule.
    fn col_span(&self, width: usize) -> (usize, usize) {
        pixel_span(self.x1, self.x2, width)
    }

    fn row_span(&self, height: usize) -> (usize, usize) {
        pixel_span(self.y1, self.y2, height)
    }
}

fn pixel_span(lo: f64, hi: f64, limit: usize) -> (usize, usize) {
    let start = lo.ceil().max(0.0) as usize;
    let end = (hi.ceil().max(0.0) as usize).min(limit);
    (start.min(end), end)
}

/// Intersection over union; zero when the union is empty.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection(b).map_or(0.0, |r| r.area());
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Fraction of `target` covered by the union of `sources`.
///
/// Computed exactly with a sweep over the distinct x-edges of the clipped
/// sources: within each elementary column strip the covered height is the
/// length of a union of intervals.
pub fn coverage(target: &BBox, sources: &[BBox]) -> Result<f64, GeometryError> {
    let area = target.area();
    if area <= 0.0 {
        return Err(GeometryError::ZeroArea(*target));
    }
    let clipped: Vec<BBox> = sources
        .iter()
        .filter_map(|s| s.intersection(target))
        .collect();
    if clipped.is_empty() {
        return Ok(0.0);
    }

    let mut xs: Vec<f64> = clipped.iter().flat_map(|b| [b.x1, b.x2]).collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup();

    let mut covered = 0.0;
    let mut spans: Vec<(f64, f64)> = Vec::with_capacity(clipped.len());
    for strip in xs.windows(2) {
        let (lo, hi) = (strip[0], strip[1]);
        spans.clear();
        spans.extend(
            clipped
                .iter()
                .filter(|b| b.x1 <= lo && b.x2 >= hi)
                .map(|b| (b.y1, b.y2)),
        );
        covered += (hi - lo) * union_length(&mut spans);
    }
    Ok((covered / area).clamp(0.0, 1.0))
}

fn union_length(spans: &mut [(f64, f64)]) -> f64 {
    spans.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut total = 0.0;
    let mut current: Option<(f64, f64)> = None;
    for &(lo, hi) in spans.iter() {
        current = match current {
            Some((clo, chi)) if lo <= chi => Some((clo, chi.max(hi))),
            Some((clo, chi)) => {
                total += chi - clo;
                Some((lo, hi))
            }
            None => Some((lo, hi)),
        };
    }
    if let Some((lo, hi)) = current {
        total += hi - lo;
    }
    total
}

/// Grow width and height by `factor` in total (half on each side), then clamp to the frame.
pub fn expand_box(b: &BBox, factor: f64, width: usize, height: usize) -> BBox {
    let dx = b.width() * factor / 2.0;
    let dy = b.height() * factor / 2.0;
    BBox::new(b.x1 - dx, b.y1 - dy, b.x2 + dx, b.y2 + dy).clamp(width, height)
}

/// Box coordinates after the frame is downscaled by 0.5 and pasted centered.
///
/// `x' = [W/4] + [x/2]`, `y' = [H/4] + [y/2]`, with `[.]` rounding half away from zero.
pub fn resize_box_half(b: &BBox, width: usize, height: usize) -> BBox {
    let ox = (width as f64 / 4.0).round();
    let oy = (height as f64 / 4.0).round();
    BBox::new(
        ox + (b.x1 / 2.0).round(),
        oy + (b.y1 / 2.0).round(),
        ox + (b.x2 / 2.0).round(),
        oy + (b.y2 / 2.0).round(),
    )
}

/// Binary `H x W` occupancy grid, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask2D {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Mask2D {
    pub fn zeros(height: usize, width: usize) -> Self {
        Mask2D { height, width, data: vec![0; height * width] }
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.data[row * self.width + col]
    }

    pub fn popcount(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn fill_box(&mut self, b: &BBox) {
        let (c0, c1) = b.col_span(self.width);
        let (r0, r1) = b.row_span(self.height);
        for r in r0..r1 {
            self.data[r * self.width + c0..r * self.width + c1].fill(1);
        }
    }
}

/// Binary `T x H x W` mask; row-major frames stacked along time.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask3D {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Mask3D {
    /// Replicate a key-frame mask across `frames` time steps.
    pub fn replicate(key: &Mask2D, frames: usize) -> Self {
        let mut data = Vec::with_capacity(frames * key.data.len());
        for _ in 0..frames {
            data.extend_from_slice(&key.data);
        }
        Mask3D { frames, height: key.height, width: key.width, data }
    }

    pub fn zeros(frames: usize, height: usize, width: usize) -> Self {
        Mask3D { frames, height, width, data: vec![0; frames * height * width] }
    }

    pub fn slice(&self, t: usize) -> &[u8] {
        let n = self.height * self.width;
        &self.data[t * n..(t + 1) * n]
    }

    pub fn get(&self, t: usize, row: usize, col: usize) -> u8 {
        self.data[(t * self.height + row) * self.width + col]
    }

    /// Occupancy of a single time slice.
    pub fn slice_popcount(&self, t: usize) -> usize {
        self.slice(t).iter().filter(|&&v| v != 0).count()
    }
}

/// Union occupancy of `boxes` on a `width x height` grid.
pub fn rasterize(boxes: &[BBox], width: usize, height: usize) -> Mask2D {
    let mut mask = Mask2D::zeros(height, width);
    for b in boxes {
        mask.fill_box(b);
    }
    mask
}
