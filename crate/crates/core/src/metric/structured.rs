//! Structured metric learning driven by bounding-box overlap.
//!
//! Candidate boxes around the tracked box are ranked by their overlap with
//! it; the metric should order their feature distances the same way. Each
//! iteration adds the most violated ordered pair `(μ, ν)` to a working set,
//! then re-solves the step-length vector
//! `η* = argmin ‖Bη − f‖₁  s.t.  η ⪰ 0, 𝟙ᵀη ≤ C` and resets
//! `M = Mᵏ + Σ η_ℓ U_ℓ` with `U_ℓ = a^ν(a^ν)ᵀ − a^μ(a^μ)ᵀ`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{mahalanobis, vor_overlap};
use crate::error::{Error, Result};
use crate::features::BoundingBox;
use crate::linalg::{Matrix, MetricMatrix, RegressionCache, Vector};

/// A candidate region and its descriptor.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredBox {
    pub bbox: BoundingBox,
    pub feature: Vector,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StructuredConfig {
    pub c_bound: f64,
    pub max_iterations: usize,
    pub n_candidate_boxes: usize,
}

impl Default for StructuredConfig {
    fn default() -> Self {
        Self {
            c_bound: 1.0,
            max_iterations: 5,
            n_candidate_boxes: 16,
        }
    }
}

impl StructuredConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.c_bound > 0.0 && self.c_bound.is_finite()) {
            return Err(Error::Config("structured bound C must be positive".into()));
        }
        if self.max_iterations == 0 {
            return Err(Error::Config("structured max_iterations must be >= 1".into()));
        }
        if self.n_candidate_boxes < 2 {
            return Err(Error::Config("structured learning needs >= 2 candidate boxes".into()));
        }
        Ok(())
    }
}

/// Ordered candidate pair `(μ, ν)` and its violation
/// `Δ_μν + D(p, p^μ) − D(p, p^ν)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViolatedPair {
    pub mu: usize,
    pub nu: usize,
    pub violation: f64,
}

/// Working set of violated pairs, as indices into the candidate list.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConstraintSet {
    entries: Vec<(usize, usize)>,
}

impl ConstraintSet {
    pub fn entries(&self) -> &[(usize, usize)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, mu: usize, nu: usize) -> bool {
        self.entries.contains(&(mu, nu))
    }

    /// Adds the pair; returns false if it was already present.
    pub fn insert(&mut self, mu: usize, nu: usize) -> bool {
        if self.contains(mu, nu) {
            return false;
        }
        self.entries.push((mu, nu));
        true
    }
}

/// Exhaustive search over ordered pairs `i ≠ j`; the lexicographically
/// smallest pair wins ties.
pub fn most_violated(
    metric: &MetricMatrix,
    anchor: &ScoredBox,
    candidates: &[ScoredBox],
) -> Result<ViolatedPair> {
    if candidates.len() < 2 {
        return Err(Error::Input("most_violated needs at least two candidates".into()));
    }
    let overlap: Vec<f64> = candidates.iter().map(|c| vor_overlap(&anchor.bbox, &c.bbox)).collect();
    let dist: Vec<f64> = candidates
        .iter()
        .map(|c| mahalanobis(metric, &anchor.feature, &c.feature))
        .collect();
    let mut best: Option<ViolatedPair> = None;
    for i in 0..candidates.len() {
        for j in 0..candidates.len() {
            if i == j {
                continue;
            }
            let violation = (overlap[i] - overlap[j]) + dist[i] - dist[j];
            if best.is_none_or(|b| violation > b.violation) {
                best = Some(ViolatedPair { mu: i, nu: j, violation });
            }
        }
    }
    Ok(best.expect("at least one ordered pair"))
}

const SUBGRADIENT_ITERATIONS: usize = 500;
const POLISH_PASSES: usize = 100;
/// Largest working set solved by vertex enumeration; `C(2m+1, m)` systems.
const EXACT_MAX_CONSTRAINTS: usize = 10;

/// Minimises `‖Bη − f‖₁` over `{η ⪰ 0, 𝟙ᵀη ≤ C}`.
///
/// The objective is convex and piecewise linear, so a minimiser sits where
/// `m` independent hyperplanes among `η_j = 0`, `𝟙ᵀη = C` and
/// `(Bη − f)_i = 0` meet. Up to [`EXACT_MAX_CONSTRAINTS`] constraints every
/// such intersection is tried. Larger systems use projected subgradient
/// descent (step `1/(k‖B‖_F)`, best iterate kept), seeded also from the
/// projected least-squares solution, then polished by exact line searches
/// along coordinate and pairwise-transfer directions.
pub fn solve_eta_vector(b: &Matrix, f: &Vector, c_bound: f64) -> Result<Vector> {
    let m = f.len();
    if m == 0 || b.shape() != (m, m) {
        return Err(Error::Input(format!(
            "step-length system must be square and non-empty (B {:?}, f {m})",
            b.shape()
        )));
    }
    if b.iter().chain(f.iter()).any(|x| !x.is_finite()) || !c_bound.is_finite() || c_bound <= 0.0 {
        return Err(Error::Input("step-length system has non-finite entries".into()));
    }
    let objective = |eta: &Vector| (b * eta - f).lp_norm(1);
    if m <= EXACT_MAX_CONSTRAINTS {
        return Ok(vertex_minimum(b, f, c_bound));
    }

    let mut best = Vector::zeros(m);
    let mut best_obj = objective(&best);
    let b_frob = b.norm();
    if b_frob == 0.0 {
        return Ok(best);
    }

    if let Ok(ls) = b.clone().svd(true, true).solve(f, 1e-12) {
        let start = project_capped_simplex(&ls, c_bound);
        let obj = objective(&start);
        if obj < best_obj {
            best = start;
            best_obj = obj;
        }
    }

    let mut eta = Vector::zeros(m);
    for k in 1..=SUBGRADIENT_ITERATIONS {
        let residual = b * &eta - f;
        let signs = residual.map(|r| if r > 0.0 { 1.0 } else if r < 0.0 { -1.0 } else { 0.0 });
        let g = b.tr_mul(&signs);
        if g.iter().all(|&x| x == 0.0) {
            break;
        }
        eta = project_capped_simplex(&(&eta - g / (k as f64 * b_frob)), c_bound);
        let obj = objective(&eta);
        if obj < best_obj {
            best_obj = obj;
            best.copy_from(&eta);
        }
    }

    polish(b, f, c_bound, &mut best, &mut best_obj);
    Ok(best)
}

/// Best feasible point among all intersections of `m` hyperplanes drawn
/// from the bound, budget and zero-residual planes.
fn vertex_minimum(b: &Matrix, f: &Vector, c_bound: f64) -> Vector {
    let m = f.len();
    let mut planes: Vec<(Vector, f64)> = Vec::with_capacity(2 * m + 1);
    for j in 0..m {
        let mut e = Vector::zeros(m);
        e[j] = 1.0;
        planes.push((e, 0.0));
    }
    planes.push((Vector::from_element(m, 1.0), c_bound));
    for i in 0..m {
        planes.push((b.row(i).transpose(), f[i]));
    }
    let tol = 1e-12 * c_bound.max(1.0);

    let mut best = Vector::zeros(m);
    let mut best_obj = (b * &best - f).lp_norm(1);
    let mut pick: Vec<usize> = (0..m).collect();
    loop {
        let a = Matrix::from_fn(m, m, |r, c| planes[pick[r]].0[c]);
        let rhs = Vector::from_iterator(m, pick.iter().map(|&k| planes[k].1));
        if let Some(eta) = a.lu().solve(&rhs) {
            if eta.iter().all(|x| x.is_finite() && *x >= -tol) && eta.sum() <= c_bound + tol {
                let mut eta = eta.map(|x| x.max(0.0));
                let total = eta.sum();
                if total > c_bound {
                    eta *= c_bound / total;
                }
                let obj = (b * &eta - f).lp_norm(1);
                if obj < best_obj {
                    best_obj = obj;
                    best = eta;
                }
            }
        }
        // next m-subset of the 2m+1 planes in lexicographic order
        let n = planes.len();
        let Some(k) = (0..m).rev().find(|&k| pick[k] < n - m + k) else {
            break;
        };
        pick[k] += 1;
        for t in k + 1..m {
            pick[t] = pick[t - 1] + 1;
        }
    }
    best
}

fn polish(b: &Matrix, f: &Vector, c_bound: f64, eta: &mut Vector, obj: &mut f64) {
    let m = eta.len();
    let mut directions: Vec<Vector> = Vec::new();
    for j in 0..m {
        let mut d = Vector::zeros(m);
        d[j] = 1.0;
        directions.push(d);
    }
    for j in 0..m {
        for k in 0..m {
            if j != k {
                let mut d = Vector::zeros(m);
                d[j] = 1.0;
                d[k] = -1.0;
                directions.push(d);
            }
        }
    }
    for _ in 0..POLISH_PASSES {
        let before = *obj;
        for d in &directions {
            let (lo, hi) = feasible_interval(eta, d, c_bound);
            if hi <= lo {
                continue;
            }
            let r = b * &*eta - f;
            let bd = b * d;
            // φ(t) = Σ |r_i + t·bd_i|, convex and piecewise linear
            let phi = |t: f64| r.iter().zip(bd.iter()).map(|(ri, di)| (ri + t * di).abs()).sum::<f64>();
            let mut best_t = 0.0;
            let mut best_phi = phi(0.0);
            let breakpoints = r
                .iter()
                .zip(bd.iter())
                .filter(|(_, &di)| di != 0.0)
                .map(|(ri, di)| -ri / di);
            for t in breakpoints.chain([lo, hi]) {
                let t = t.clamp(lo, hi);
                let p = phi(t);
                if p < best_phi {
                    best_phi = p;
                    best_t = t;
                }
            }
            if best_t != 0.0 && best_phi < *obj {
                eta.axpy(best_t, d, 1.0);
                for x in eta.iter_mut() {
                    if *x < 0.0 {
                        *x = 0.0;
                    }
                }
                *obj = (b * &*eta - f).lp_norm(1);
            }
        }
        if *obj >= before - 1e-15 {
            break;
        }
    }
}

/// Range of `t` keeping `η + t·d` inside `{η ⪰ 0, 𝟙ᵀη ≤ C}`.
fn feasible_interval(eta: &Vector, d: &Vector, c_bound: f64) -> (f64, f64) {
    let mut lo = f64::NEG_INFINITY;
    let mut hi = f64::INFINITY;
    for (&e, &di) in eta.iter().zip(d.iter()) {
        if di > 0.0 {
            lo = lo.max(-e / di);
        } else if di < 0.0 {
            hi = hi.min(-e / di);
        }
    }
    let slack = c_bound - eta.sum();
    let dsum = d.sum();
    if dsum > 0.0 {
        hi = hi.min(slack / dsum);
    } else if dsum < 0.0 {
        lo = lo.max(slack / dsum);
    }
    (lo, hi)
}

/// Euclidean projection onto `{x ⪰ 0, 𝟙ᵀx ≤ C}`.
fn project_capped_simplex(x: &Vector, c_bound: f64) -> Vector {
    let clipped = x.map(|v| v.max(0.0));
    if clipped.sum() <= c_bound {
        return clipped;
    }
    // project onto {x ⪰ 0, 𝟙ᵀx = C}
    let mut sorted: Vec<f64> = x.iter().copied().collect();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumulative = 0.0;
    let mut theta = 0.0;
    for (k, &v) in sorted.iter().enumerate() {
        cumulative += v;
        let t = (cumulative - c_bound) / (k + 1) as f64;
        if v - t > 0.0 {
            theta = t;
        }
    }
    x.map(|v| (v - theta).max(0.0))
}

/// Per-constraint quantities: `a^μ`, `a^ν` and `Δ_μν`.
struct Constraint {
    a_mu: Vector,
    a_nu: Vector,
    delta: f64,
}

impl Constraint {
    /// `(a^μ)ᵀ X a^μ − (a^ν)ᵀ X a^ν` for `X = U_other`, by dot products.
    fn quad_difference(&self, other: &Constraint) -> f64 {
        let q = |x: &Vector| x.dot(&other.a_nu).powi(2) - x.dot(&other.a_mu).powi(2);
        q(&self.a_mu) - q(&self.a_nu)
    }

    /// `𝟙ᵀ(U_self ∘ U_other)𝟙 = ⟨U_self, U_other⟩_F`.
    fn frobenius(&self, other: &Constraint) -> f64 {
        self.a_nu.dot(&other.a_nu).powi(2) - self.a_nu.dot(&other.a_mu).powi(2)
            - self.a_mu.dot(&other.a_nu).powi(2)
            + self.a_mu.dot(&other.a_mu).powi(2)
    }
}

/// Builds `B` and `f` for the step-length system. Row `ℓ` is the gradient
/// of the Lagrangian with respect to `η_ℓ` after substituting
/// `M = Mᵏ + Σ η_m U_m`:
/// `b_ℓm = 𝟙ᵀ(U_ℓ∘U_m)𝟙 + q_ℓ(U_m) + q_m(U_ℓ)` with
/// `q_k(X) = (a^{μ_k})ᵀXa^{μ_k} − (a^{ν_k})ᵀXa^{ν_k}`, and
/// `f_ℓ = −[Δ_ℓ + (a^{μ_ℓ})ᵀMᵏa^{μ_ℓ} − (a^{ν_ℓ})ᵀMᵏa^{ν_ℓ}]`.
fn step_system(base: &MetricMatrix, constraints: &[Constraint]) -> (Matrix, Vector) {
    let m = constraints.len();
    let b = Matrix::from_fn(m, m, |l, k| {
        let (cl, ck) = (&constraints[l], &constraints[k]);
        cl.frobenius(ck) + cl.quad_difference(ck) + ck.quad_difference(cl)
    });
    let f = Vector::from_iterator(
        m,
        constraints
            .iter()
            .map(|c| -(c.delta + base.quad_form(&c.a_mu) - base.quad_form(&c.a_nu))),
    );
    (b, f)
}

/// Outcome of one structured learning round.
#[derive(Debug, Clone, Default)]
pub struct StructuredOutcome {
    pub constraints: ConstraintSet,
    pub etas: Vec<f64>,
    pub iterations: usize,
    /// Set when the step-length solver failed and the round stopped early.
    pub aborted: Option<String>,
}

/// Runs one round of structured metric learning and patches every cache
/// in `caches` for each accepted rank-two term.
pub fn structured_update(
    metric: &mut MetricMatrix,
    anchor: &ScoredBox,
    candidates: &[ScoredBox],
    caches: &mut [&mut RegressionCache],
    cfg: &StructuredConfig,
) -> Result<StructuredOutcome> {
    cfg.validate()?;
    let base = metric.clone();
    let mut outcome = StructuredOutcome::default();
    let mut constraints: Vec<Constraint> = Vec::new();
    let mut current = base.clone();

    for _ in 0..cfg.max_iterations {
        let pair = most_violated(&current, anchor, candidates)?;
        if pair.violation <= 0.0 || !outcome.constraints.insert(pair.mu, pair.nu) {
            break;
        }
        outcome.iterations += 1;
        let (mu, nu) = (&candidates[pair.mu], &candidates[pair.nu]);
        constraints.push(Constraint {
            a_mu: &anchor.feature - &mu.feature,
            a_nu: &anchor.feature - &nu.feature,
            delta: vor_overlap(&anchor.bbox, &mu.bbox) - vor_overlap(&anchor.bbox, &nu.bbox),
        });
        let (b, f) = step_system(&base, &constraints);
        let etas = match solve_eta_vector(&b, &f, cfg.c_bound) {
            Ok(e) => e,
            Err(e) => {
                outcome.aborted = Some(e.to_string());
                constraints.pop();
                break;
            }
        };
        let mut next = base.clone();
        for (c, &eta) in constraints.iter().zip(etas.iter()) {
            if eta > 0.0 {
                next.add_scaled_difference(eta, &c.a_nu, &c.a_mu);
            }
        }
        current = next;
        outcome.etas = etas.iter().copied().collect();
    }

    // Replay the accepted terms one by one so each cache sees the metric
    // that matches its state after every rank-two step.
    let mut replay = base;
    for (c, &eta) in constraints.iter().zip(outcome.etas.iter()) {
        if eta > 0.0 {
            replay.add_scaled_difference(eta, &c.a_nu, &c.a_mu);
            for cache in caches.iter_mut() {
                cache.apply_metric_perturbation(&replay, &c.a_nu, &c.a_mu, eta)?;
            }
        }
    }
    debug_assert_eq!(replay, current);
    *metric = current;
    Ok(outcome)
}

/// Uniformly samples candidate boxes around `center_box`: centre offsets in
/// `±1.5×` the box size and scale in `[0.8, 1.2]`.
pub fn sample_candidate_boxes(center_box: &BoundingBox, n: usize, rng: &mut impl Rng) -> Vec<BoundingBox> {
    let (cx, cy) = center_box.center();
    (0..n)
        .map(|_| {
            let dx = rng.random_range(-1.5..=1.5) * center_box.w;
            let dy = rng.random_range(-1.5..=1.5) * center_box.h;
            let s = rng.random_range(0.8..=1.2);
            BoundingBox::from_center(cx + dx, cy + dy, center_box.w * s, center_box.h * s)
        })
        .collect()
}
