//! Online Mahalanobis metric learning.
//!
//! Two learners update the shared [`MetricMatrix`]:
//!
//! * [`pa_update`] takes one proximity triplet `(p, p⁺, p⁻)` and applies the
//!   closed-form passive-aggressive step `M ← M + η(a₋a₋ᵀ − a₊a₊ᵀ)`.
//! * [`structured_update`] learns from box overlap instead of labels, adding
//!   the most violated ranking constraint per iteration and re-solving a
//!   small ℓ1 problem for the step-length vector.
//!
//! Both learners report each rank-two change so that regression caches
//! built on the old metric can be patched online.

mod structured;

pub use structured::{
    most_violated, sample_candidate_boxes, solve_eta_vector, structured_update, ConstraintSet, ScoredBox, StructuredConfig,
    StructuredOutcome, ViolatedPair,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::BoundingBox;
use crate::linalg::{MetricMatrix, Vector};

/// `(p − q)ᵀ M (p − q)`
pub fn mahalanobis(metric: &MetricMatrix, p: &Vector, q: &Vector) -> f64 {
    metric.quad_form(&(p - q))
}

/// Anchor, same-class and other-class sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Triplet {
    pub anchor: Vector,
    pub positive: Vector,
    pub negative: Vector,
}

impl Triplet {
    pub fn new(anchor: Vector, positive: Vector, negative: Vector) -> Result<Self> {
        let d = anchor.len();
        for v in [&positive, &negative] {
            if v.len() != d {
                return Err(Error::dim(d, v.len()));
            }
        }
        Ok(Self {
            anchor,
            positive,
            negative,
        })
    }

    /// `(a₊, a₋) = (p − p⁺, p − p⁻)`
    pub fn differences(&self) -> (Vector, Vector) {
        (&self.anchor - &self.positive, &self.anchor - &self.negative)
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            anchor: &self.anchor * s,
            positive: &self.positive * s,
            negative: &self.negative * s,
        }
    }
}

/// Hinge loss `max{0, 1 + D(p, p⁺) − D(p, p⁻)}`.
pub fn triplet_loss(metric: &MetricMatrix, t: &Triplet) -> f64 {
    let (a_plus, a_minus) = t.differences();
    (1.0 + metric.quad_form(&a_plus) - metric.quad_form(&a_minus)).max(0.0)
}

/// Sum of hinge losses over a triplet set.
pub fn global_loss(metric: &MetricMatrix, triplets: &[Triplet]) -> f64 {
    triplets.iter().map(|t| triplet_loss(metric, t)).sum()
}

/// Aggressiveness cap for the passive-aggressive step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PaConfig {
    pub c_bound: f64,
}

impl Default for PaConfig {
    fn default() -> Self {
        Self { c_bound: 1.0 }
    }
}

impl PaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.c_bound > 0.0 && self.c_bound.is_finite()) {
            return Err(Error::Config(format!(
                "PA bound C must be positive and finite, got {}",
                self.c_bound
            )));
        }
        Ok(())
    }
}

/// Result of one passive-aggressive step. `eta == 0` means the metric was
/// left untouched.
#[derive(Debug, Clone, PartialEq)]
pub struct PaStep {
    pub eta: f64,
    /// Hinge loss before the step.
    pub loss: f64,
    pub a_plus: Vector,
    pub a_minus: Vector,
}

impl PaStep {
    pub fn is_active(&self) -> bool {
        self.eta > 0.0
    }
}

/// Coefficients of the step-length objective `L(η) = λ₂η² + λ₁η` obtained
/// by substituting `M + ηU` back into the Lagrangian of the triplet problem.
///
/// With `U = a₋a₋ᵀ − a₊a₊ᵀ` one has `λ₂ = ½‖U‖²_F + a₊ᵀUa₊ − a₋ᵀUa₋`
/// and `λ₁ = 1 + a₊ᵀMa₊ − a₋ᵀMa₋`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepObjective {
    pub lambda2: f64,
    pub lambda1: f64,
}

impl StepObjective {
    pub fn value(&self, eta: f64) -> f64 {
        self.lambda2 * eta * eta + self.lambda1 * eta
    }
}

/// Dot-product form of the quantities entering the PA step. `U` is never
/// materialised: `‖U‖² = |a₋|⁴ + |a₊|⁴ − 2(a₊·a₋)²`,
/// `a₋ᵀUa₋ = |a₋|⁴ − (a₊·a₋)²`, `a₊ᵀUa₊ = (a₊·a₋)² − |a₊|⁴`.
struct StepTerms {
    u_frob_sq: f64,
    a_minus_u: f64,
    a_plus_u: f64,
    lambda1: f64,
}

fn step_terms(metric: &MetricMatrix, a_plus: &Vector, a_minus: &Vector) -> StepTerms {
    let pp = a_plus.norm_squared();
    let mm = a_minus.norm_squared();
    let pm = a_plus.dot(a_minus);
    let cross = pm * pm;
    StepTerms {
        u_frob_sq: (mm * mm + pp * pp - 2.0 * cross).max(0.0),
        a_minus_u: mm * mm - cross,
        a_plus_u: cross - pp * pp,
        lambda1: 1.0 + metric.quad_form(a_plus) - metric.quad_form(a_minus),
    }
}

/// The step-length objective for triplet `t` under `metric`.
pub fn step_objective(metric: &MetricMatrix, t: &Triplet) -> StepObjective {
    let (a_plus, a_minus) = t.differences();
    let terms = step_terms(metric, &a_plus, &a_minus);
    StepObjective {
        lambda2: 0.5 * terms.u_frob_sq + terms.a_plus_u - terms.a_minus_u,
        lambda1: terms.lambda1,
    }
}

/// One passive-aggressive metric update.
///
/// Satisfied triplets (zero hinge loss) leave `metric` unchanged. Otherwise
/// `η = min{C, max{0, λ₁ / (2a₋ᵀUa₋ − 2a₊ᵀUa₊ − ‖U‖²)}}` and
/// `M ← M + η(a₋a₋ᵀ − a₊a₊ᵀ)`. A zero denominator takes `η = C`.
pub fn pa_update(metric: &mut MetricMatrix, t: &Triplet, cfg: &PaConfig) -> PaStep {
    let (a_plus, a_minus) = t.differences();
    let terms = step_terms(metric, &a_plus, &a_minus);
    let loss = terms.lambda1.max(0.0);
    if terms.lambda1 <= 0.0 {
        return PaStep {
            eta: 0.0,
            loss,
            a_plus,
            a_minus,
        };
    }
    let denom = 2.0 * terms.a_minus_u - 2.0 * terms.a_plus_u - terms.u_frob_sq;
    let eta = if denom == 0.0 {
        cfg.c_bound
    } else {
        (terms.lambda1 / denom).max(0.0).min(cfg.c_bound)
    };
    if eta > 0.0 {
        metric.add_scaled_difference(eta, &a_minus, &a_plus);
    }
    PaStep {
        eta,
        loss,
        a_plus,
        a_minus,
    }
}

/// Intersection over union; zero when either box has no area.
pub fn vor_overlap(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let (area_a, area_b) = (a.area(), b.area());
    if area_a == 0.0 || area_b == 0.0 {
        return 0.0;
    }
    let iw = (a.x + a.w).min(b.x + b.w) - a.x.max(b.x);
    let ih = (a.y + a.h).min(b.y + b.h) - a.y.max(b.y);
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    (inter / (area_a + area_b - inter)).clamp(0.0, 1.0)
}
