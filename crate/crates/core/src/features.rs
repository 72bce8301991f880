//! Patch extraction and appearance descriptors.
//!
//! Every region is resampled to a fixed 32×32 [`Patch`] before it is
//! described. The main descriptor is a 405-dimensional HOG built from five
//! overlapping spatial layouts of the patch (whole patch, top/bottom/left/
//! right two-thirds), each split into 3×3 cells of 9 unsigned orientation
//! bins. A mean-centred raw-pixel vector is available as a baseline.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::frame::GrayFrame;
use crate::linalg::Vector;

/// Side length of a resampled patch.
pub const PATCH_SIZE: usize = 32;
pub const ORIENTATION_BINS: usize = 9;
pub const CELLS_PER_SIDE: usize = 3;
pub const HOG_MODES: usize = 5;
pub const HOG_DIM: usize = HOG_MODES * CELLS_PER_SIDE * CELLS_PER_SIDE * ORIENTATION_BINS;
pub const RAW_DIM: usize = PATCH_SIZE * PATCH_SIZE;

/// Axis-aligned region in pixel coordinates, top-left anchored.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self {
            x: cx - w / 2.0,
            y: cy - h / 2.0,
            w,
            h,
        }
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn area(&self) -> f64 {
        if self.w > 0.0 && self.h > 0.0 {
            self.w * self.h
        } else {
            0.0
        }
    }

    pub fn is_valid(&self) -> bool {
        [self.x, self.y, self.w, self.h].iter().all(|v| v.is_finite()) && self.w > 0.0 && self.h > 0.0
    }

    /// True when the box lies entirely inside a `width × height` frame.
    pub fn is_inside(&self, width: usize, height: usize) -> bool {
        self.is_valid()
            && self.x >= 0.0
            && self.y >= 0.0
            && self.x + self.w <= width as f64
            && self.y + self.h <= height as f64
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        Self {
            x: self.x + dx,
            y: self.y + dy,
            ..*self
        }
    }
}

/// A region resampled to `PATCH_SIZE × PATCH_SIZE`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pixels: Vec<f64>,
}

impl Patch {
    pub fn from_pixels(pixels: Vec<f64>) -> Option<Self> {
        (pixels.len() == RAW_DIM).then_some(Self { pixels })
    }

    pub fn from_fn(mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut pixels = Vec::with_capacity(RAW_DIM);
        for r in 0..PATCH_SIZE {
            for c in 0..PATCH_SIZE {
                pixels.push(f(r, c));
            }
        }
        Self { pixels }
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * PATCH_SIZE + col]
    }

    fn get_clamped(&self, row: isize, col: isize) -> f64 {
        let last = PATCH_SIZE as isize - 1;
        self.get(row.clamp(0, last) as usize, col.clamp(0, last) as usize)
    }
}

/// Which descriptor the tracker uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMode {
    #[default]
    Hog405,
    RawPixels,
}

impl FeatureMode {
    pub fn dim(self) -> usize {
        match self {
            FeatureMode::Hog405 => HOG_DIM,
            FeatureMode::RawPixels => RAW_DIM,
        }
    }

    pub fn describe(self, patch: &Patch) -> Vector {
        match self {
            FeatureMode::Hog405 => hog405(patch),
            FeatureMode::RawPixels => raw_pixels(patch),
        }
    }
}

/// Extracts and describes the region `bbox` of `frame`.
pub fn featurize(frame: &GrayFrame, bbox: &BoundingBox, mode: FeatureMode) -> Vector {
    mode.describe(&extract_patch(frame, bbox))
}

/// Bilinear resampling of `bbox` to a 32×32 patch. Samples falling outside
/// the frame replicate the border.
///
/// Output pixel `(r, c)` samples the frame at
/// `(y + (r + ½)·h/32 − ½, x + (c + ½)·w/32 − ½)`, so a 32×32 box on
/// integer coordinates is copied verbatim.
pub fn extract_patch(frame: &GrayFrame, bbox: &BoundingBox) -> Patch {
    let sx = bbox.w / PATCH_SIZE as f64;
    let sy = bbox.h / PATCH_SIZE as f64;
    Patch::from_fn(|r, c| {
        let fy = bbox.y + (r as f64 + 0.5) * sy - 0.5;
        let fx = bbox.x + (c as f64 + 0.5) * sx - 0.5;
        bilinear(frame, fy, fx)
    })
}

fn bilinear(frame: &GrayFrame, y: f64, x: f64) -> f64 {
    let y0 = y.floor();
    let x0 = x.floor();
    let ty = y - y0;
    let tx = x - x0;
    let (r, c) = (y0 as isize, x0 as isize);
    let top = (1.0 - tx) * frame.get_clamped(r, c) + tx * frame.get_clamped(r, c + 1);
    let bottom = (1.0 - tx) * frame.get_clamped(r + 1, c) + tx * frame.get_clamped(r + 1, c + 1);
    (1.0 - ty) * top + ty * bottom
}

/// Region of the patch covered by one block-division mode, as half-open
/// `(row_start, row_end, col_start, col_end)`.
pub fn mode_region(mode: usize) -> (usize, usize, usize, usize) {
    const N: usize = PATCH_SIZE;
    const TWO_THIRDS: usize = 2 * N / 3;
    match mode {
        0 => (0, N, 0, N),
        1 => (0, TWO_THIRDS, 0, N),
        2 => (N - TWO_THIRDS, N, 0, N),
        3 => (0, N, 0, TWO_THIRDS),
        4 => (0, N, N - TWO_THIRDS, N),
        _ => panic!("block-division mode {mode} out of range"),
    }
}

/// Cell boundaries `start + ⌊k·len/3⌋`, `k = 0..=3`.
pub fn cell_bounds(start: usize, end: usize) -> [usize; CELLS_PER_SIDE + 1] {
    let len = end - start;
    let mut b = [0; CELLS_PER_SIDE + 1];
    for (k, slot) in b.iter_mut().enumerate() {
        *slot = start + k * len / CELLS_PER_SIDE;
    }
    b
}

/// Per-pixel orientation vote: two neighbouring bins and their weights.
#[derive(Clone, Copy, Default)]
struct Vote {
    lo: usize,
    hi: usize,
    w_lo: f64,
    w_hi: f64,
}

fn pixel_votes(patch: &Patch) -> Vec<Vote> {
    let mut votes = vec![Vote::default(); RAW_DIM];
    for r in 0..PATCH_SIZE {
        for c in 0..PATCH_SIZE {
            let (ri, ci) = (r as isize, c as isize);
            let gx = patch.get_clamped(ri, ci + 1) - patch.get_clamped(ri, ci - 1);
            let gy = patch.get_clamped(ri + 1, ci) - patch.get_clamped(ri - 1, ci);
            let mag = (gx * gx + gy * gy).sqrt();
            if mag == 0.0 {
                continue;
            }
            let pos = unsigned_orientation(gx, gy) * ORIENTATION_BINS as f64 / PI - 0.5;
            let base = pos.floor();
            let frac = pos - base;
            let lo = (base as isize).rem_euclid(ORIENTATION_BINS as isize) as usize;
            votes[r * PATCH_SIZE + c] = Vote {
                lo,
                hi: (lo + 1) % ORIENTATION_BINS,
                w_lo: mag * (1.0 - frac),
                w_hi: mag * frac,
            };
        }
    }
    votes
}

/// Gradient angle folded into `[0, π)`.
pub fn unsigned_orientation(gx: f64, gy: f64) -> f64 {
    let mut angle = gy.atan2(gx);
    if angle < 0.0 {
        angle += PI;
    }
    if angle >= PI {
        angle -= PI;
    }
    angle
}

/// 405-dimensional block-division HOG descriptor.
///
/// Gradients use central differences with border replication; each pixel
/// votes its magnitude into the two nearest of 9 orientation bins (bin
/// centres at 10°, 30°, …, 170°). Each cell histogram is ℓ2-normalised on
/// its own, and an all-zero cell stays zero. Layout is mode-major, then
/// cells row-major, then bins.
pub fn hog405(patch: &Patch) -> Vector {
    let votes = pixel_votes(patch);
    let mut out = Vec::with_capacity(HOG_DIM);
    for mode in 0..HOG_MODES {
        let (r0, r1, c0, c1) = mode_region(mode);
        let rows = cell_bounds(r0, r1);
        let cols = cell_bounds(c0, c1);
        for cr in 0..CELLS_PER_SIDE {
            for cc in 0..CELLS_PER_SIDE {
                let mut hist = [0.0f64; ORIENTATION_BINS];
                for r in rows[cr]..rows[cr + 1] {
                    for c in cols[cc]..cols[cc + 1] {
                        let v = votes[r * PATCH_SIZE + c];
                        hist[v.lo] += v.w_lo;
                        hist[v.hi] += v.w_hi;
                    }
                }
                let norm = hist.iter().map(|h| h * h).sum::<f64>().sqrt();
                if norm > 0.0 {
                    out.extend(hist.iter().map(|h| h / norm));
                } else {
                    out.extend_from_slice(&hist);
                }
            }
        }
    }
    Vector::from_vec(out)
}

/// Row-major pixels, mean-subtracted and scaled to unit ℓ2 norm (the zero
/// vector for a constant patch).
pub fn raw_pixels(patch: &Patch) -> Vector {
    let mean = patch.pixels.iter().sum::<f64>() / RAW_DIM as f64;
    let mut v = Vector::from_iterator(RAW_DIM, patch.pixels.iter().map(|p| p - mean));
    let norm = v.norm();
    if norm > 1e-12 {
        v /= norm;
    } else {
        v.fill(0.0);
    }
    v
}
