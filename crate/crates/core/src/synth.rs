//! Synthetic sequences with known ground truth.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::BoundingBox;
use crate::frame::GrayFrame;

/// A frame sequence and the true box in every frame.
#[derive(Debug, Clone)]
pub struct Sequence {
    pub frames: Vec<GrayFrame>,
    pub truth: Vec<BoundingBox>,
}

/// Stripe patterns with disjoint gradient orientations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pattern {
    /// Random 4×4 blocks.
    Blocks,
    HorizontalBars,
    VerticalBars,
    DiagonalBars,
}

impl Pattern {
    pub const CLASSES: [Pattern; 3] = [Pattern::HorizontalBars, Pattern::VerticalBars, Pattern::DiagonalBars];

    pub fn name(self) -> &'static str {
        match self {
            Pattern::Blocks => "blocks",
            Pattern::HorizontalBars => "horizontal",
            Pattern::VerticalBars => "vertical",
            Pattern::DiagonalBars => "diagonal",
        }
    }
}

/// Renders a `side × side` texture. `phase` shifts the stripes; for
/// [`Pattern::Blocks`] it seeds the block intensities.
pub fn texture(pattern: Pattern, side: usize, phase: u64) -> Vec<f64> {
    let stripe = |t: usize| if (t + phase as usize) / 3 % 2 == 0 { 0.95 } else { 0.15 };
    let blocks: Vec<f64> = {
        let mut rng = ChaCha8Rng::seed_from_u64(phase);
        let per_side = side.div_ceil(4);
        (0..per_side * per_side).map(|_| rng.random_range(0.2..1.0)).collect()
    };
    let mut out = Vec::with_capacity(side * side);
    for r in 0..side {
        for c in 0..side {
            out.push(match pattern {
                Pattern::Blocks => blocks[(r / 4) * side.div_ceil(4) + c / 4],
                Pattern::HorizontalBars => stripe(r),
                Pattern::VerticalBars => stripe(c),
                Pattern::DiagonalBars => stripe(r + c),
            });
        }
    }
    out
}

/// A textured square translating at constant velocity over a flat
/// background, with additive Gaussian pixel noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SquareSequence {
    pub width: usize,
    pub height: usize,
    pub n_frames: usize,
    pub side: usize,
    /// Top-left corner in the first frame.
    pub start: (f64, f64),
    /// Pixels per frame.
    pub velocity: (f64, f64),
    pub noise_sigma: f64,
    pub background: f64,
    pub pattern: Pattern,
    /// Frames (0-based) replaced by plain background plus noise.
    pub blank_frames: Vec<usize>,
}

impl Default for SquareSequence {
    fn default() -> Self {
        Self {
            width: 260,
            height: 100,
            n_frames: 100,
            side: 24,
            start: (12.0, 38.0),
            velocity: (2.0, 0.0),
            noise_sigma: 0.05,
            background: 0.5,
            pattern: Pattern::Blocks,
            blank_frames: Vec::new(),
        }
    }
}

impl SquareSequence {
    pub fn render(&self, seed: u64) -> Result<Sequence> {
        if self.side == 0 || self.n_frames == 0 {
            return Err(Error::Config("synthetic sequence needs side >= 1 and n_frames >= 1".into()));
        }
        let noise = Normal::new(0.0, self.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tex = texture(self.pattern, self.side, seed);
        let side = self.side as f64;
        let mut frames = Vec::with_capacity(self.n_frames);
        let mut truth = Vec::with_capacity(self.n_frames);
        for t in 0..self.n_frames {
            let x0 = self.start.0 + self.velocity.0 * t as f64;
            let y0 = self.start.1 + self.velocity.1 * t as f64;
            let bbox = BoundingBox::new(x0, y0, side, side);
            if !bbox.is_inside(self.width, self.height) {
                return Err(Error::Config(format!("square leaves the frame at frame {t}")));
            }
            let blank = self.blank_frames.contains(&t);
            let frame = GrayFrame::from_fn(self.width, self.height, |r, c| {
                let (u, v) = (c as f64 - x0, r as f64 - y0);
                let base = if !blank && (0.0..side).contains(&u) && (0.0..side).contains(&v) {
                    tex[v as usize * self.side + u as usize]
                } else {
                    self.background
                };
                base + noise.sample(&mut rng)
            })?;
            frames.push(frame);
            truth.push(bbox);
        }
        Ok(Sequence { frames, truth })
    }
}

/// Template images for one class: the pattern at several phases with
/// light noise, each `side × side`.
pub fn class_templates(pattern: Pattern, side: usize, count: usize, seed: u64) -> Result<Vec<GrayFrame>> {
    let noise = Normal::new(0.0, 0.02).map_err(|e| Error::Config(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count as u64)
        .map(|k| {
            let tex = texture(pattern, side, k);
            GrayFrame::from_fn(side, side, |r, c| tex[r * side + c] + noise.sample(&mut rng))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_moves_at_the_set_velocity() {
        let cfg = SquareSequence {
            n_frames: 5,
            noise_sigma: 0.0,
            ..SquareSequence::default()
        };
        let seq = cfg.render(1).unwrap();
        assert_eq!(seq.frames.len(), 5);
        for (t, b) in seq.truth.iter().enumerate() {
            assert_eq!(b.x, 12.0 + 2.0 * t as f64);
        }
        let f = &seq.frames[3];
        assert_eq!(f.get(0, 0), 0.5);
        assert_ne!(f.get(40, 20), 0.5);
    }

    #[test]
    fn rendering_is_seeded() {
        let cfg = SquareSequence {
            n_frames: 3,
            ..SquareSequence::default()
        };
        assert_eq!(cfg.render(9).unwrap().frames, cfg.render(9).unwrap().frames);
        assert_ne!(cfg.render(9).unwrap().frames, cfg.render(10).unwrap().frames);
    }

    #[test]
    fn blank_frames_hide_the_square() {
        let cfg = SquareSequence {
            n_frames: 3,
            noise_sigma: 0.0,
            blank_frames: vec![1],
            ..SquareSequence::default()
        };
        let seq = cfg.render(2).unwrap();
        assert!(seq.frames[1].data().iter().all(|&v| v == 0.5));
        assert!(seq.frames[2].data().iter().any(|&v| v != 0.5));
    }

    #[test]
    fn leaving_the_frame_is_an_error() {
        let cfg = SquareSequence {
            velocity: (10.0, 0.0),
            ..SquareSequence::default()
        };
        assert!(cfg.render(0).is_err());
    }

    #[test]
    fn stripe_textures_differ_by_class() {
        let h = texture(Pattern::HorizontalBars, 24, 0);
        let v = texture(Pattern::VerticalBars, 24, 0);
        assert_eq!(h[0], h[1]);
        assert_ne!(h[0], h[3 * 24]);
        assert_eq!(v[0], v[24]);
        assert_ne!(v[0], v[3]);
        let t = class_templates(Pattern::DiagonalBars, 24, 3, 0).unwrap();
        assert_eq!(t.len(), 3);
        assert_eq!(t[0].width(), 24);
    }
}
