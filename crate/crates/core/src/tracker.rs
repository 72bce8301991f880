//! Particle-filter tracker with metric-weighted discriminative scoring.
//!
//! A particle's patch `y` is regressed on the foreground and background
//! buffers under the shared metric `M`; with residuals `θ_f`, `θ_b` the
//! observation likelihood is
//! `S(y) = σ(exp(−θ_f/γ_f) − ρ·exp(−θ_b/γ_b))`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{featurize, BoundingBox, FeatureMode};
use crate::frame::GrayFrame;
use crate::linalg::{EditPath, MetricMatrix, RegressionCache, Vector};
use crate::metric::{
    pa_update, sample_candidate_boxes, structured_update, PaConfig, ScoredBox, StructuredConfig,
    StructuredOutcome,
};
use crate::reservoir::{generate_triplets, InsertOutcome, Label, SampleBuffer, SamplerConfig};

pub const MIN_SCALE: f64 = 0.2;
pub const MAX_SCALE: f64 = 5.0;

/// Features below this norm carry no appearance information (flat
/// patches) and are never added to the buffers.
pub const MIN_FEATURE_NORM: f64 = 1e-12;

/// Number of positives and negatives harvested per frame.
pub const N_POSITIVES: usize = 5;
pub const N_NEGATIVES: usize = 8;

/// Centre and scale relative to the initial box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectState {
    pub cx: f64,
    pub cy: f64,
    pub scale: f64,
}

impl ObjectState {
    pub fn from_box(b: &BoundingBox) -> Self {
        let (cx, cy) = b.center();
        Self { cx, cy, scale: 1.0 }
    }

    pub fn bbox(&self, init: &BoundingBox) -> BoundingBox {
        BoundingBox::from_center(self.cx, self.cy, init.w * self.scale, init.h * self.scale)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Particle {
    pub state: ObjectState,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackerConfig {
    pub n_particles: usize,
    /// Transition standard deviations `(σ_X, σ_Y, σ_S)`.
    pub sigma: [f64; 3],
    pub gamma_f: f64,
    pub gamma_b: f64,
    pub rho: f64,
    pub sampler: SamplerConfig,
    pub pa: PaConfig,
    pub structured: Option<StructuredConfig>,
    pub triplets_per_frame: usize,
    pub feature_mode: FeatureMode,
    pub rng_seed: u64,
    /// Turns metric learning off, keeping `M` at its initial value.
    pub learn_metric: bool,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            n_particles: 200,
            sigma: [10.0, 10.0, 0.1],
            gamma_f: 1.0,
            gamma_b: 1.0,
            rho: 0.1,
            sampler: SamplerConfig::default(),
            pa: PaConfig::default(),
            structured: None,
            triplets_per_frame: 500,
            feature_mode: FeatureMode::default(),
            rng_seed: 0,
            learn_metric: true,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_particles == 0 {
            return Err(Error::Config("n_particles must be >= 1".into()));
        }
        if self.sigma.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return Err(Error::Config("transition sigmas must be finite and >= 0".into()));
        }
        if !(self.gamma_f > 0.0 && self.gamma_b > 0.0) {
            return Err(Error::Config("gamma_f and gamma_b must be positive".into()));
        }
        if !(self.rho >= 0.0 && self.rho.is_finite()) {
            return Err(Error::Config("rho must be finite and >= 0".into()));
        }
        if self.sampler.capacity < N_POSITIVES.max(N_NEGATIVES) {
            return Err(Error::Config(format!(
                "buffer capacity must hold at least {} samples",
                N_POSITIVES.max(N_NEGATIVES)
            )));
        }
        self.sampler.validate()?;
        self.pa.validate()?;
        if let Some(s) = &self.structured {
            s.validate()?;
        }
        Ok(())
    }
}

/// Logistic function.
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `σ(exp(−θ_f/γ_f) − ρ·exp(−θ_b/γ_b))`.
pub fn similarity(theta_f: f64, theta_b: f64, cfg: &TrackerConfig) -> f64 {
    sigmoid((-theta_f / cfg.gamma_f).exp() - cfg.rho * (-theta_b / cfg.gamma_b).exp())
}

/// Scores `feature` against the two caches; 0.5 if either is empty.
pub fn score(
    metric: &MetricMatrix,
    fg: &RegressionCache,
    bg: &RegressionCache,
    feature: &Vector,
    cfg: &TrackerConfig,
) -> Result<f64> {
    if fg.is_empty() || bg.is_empty() {
        return Ok(0.5);
    }
    if feature.len() != metric.dim() {
        return Err(Error::dim(metric.dim(), feature.len()));
    }
    let my = metric.apply(feature);
    let theta_f = fg.solve_with_weighted(metric, feature, &my).residual;
    let theta_b = bg.solve_with_weighted(metric, feature, &my).residual;
    Ok(similarity(theta_f, theta_b, cfg))
}

/// Adds independent Gaussian noise to every state and clamps the scale.
pub fn propagate(particles: &mut [Particle], sigma: [f64; 3], rng: &mut impl Rng) -> Result<()> {
    let normal = |s: f64| Normal::new(0.0, s).map_err(|e| Error::Config(e.to_string()));
    let (nx, ny, ns) = (normal(sigma[0])?, normal(sigma[1])?, normal(sigma[2])?);
    for p in particles.iter_mut() {
        p.state.cx += nx.sample(rng);
        p.state.cy += ny.sample(rng);
        p.state.scale = (p.state.scale + ns.sample(rng)).clamp(MIN_SCALE, MAX_SCALE);
    }
    Ok(())
}

/// State of the heaviest particle; the first one wins ties.
pub fn estimate_map(particles: &[Particle]) -> Option<ObjectState> {
    let mut best: Option<&Particle> = None;
    for p in particles {
        if best.is_none_or(|b| p.weight > b.weight) {
            best = Some(p);
        }
    }
    best.map(|p| p.state)
}

/// A harvested training patch.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub feature: Vector,
    pub label: Label,
    pub bbox: BoundingBox,
}

/// Attempts per negative slot before giving up on a frame-filling box.
const NEGATIVE_DRAWS: usize = 16;

/// Boxes for the positives (the box itself first, then `N_POSITIVES − 1`
/// within `pos_radius`) and up to `N_NEGATIVES` on the annulus
/// `[1, 2]·max(w, h)` at evenly spaced angles with a random phase.
///
/// Negatives must lie inside the `frame_size` frame: patches beyond the
/// border are replicated edge pixels, often identical to each other. A slot
/// whose box falls outside is redrawn at a uniform angle, and dropped after
/// `NEGATIVE_DRAWS` misses.
pub fn training_boxes(
    center_box: &BoundingBox,
    pos_radius: f64,
    frame_size: (usize, usize),
    rng: &mut impl Rng,
) -> (Vec<BoundingBox>, Vec<BoundingBox>) {
    use std::f64::consts::TAU;
    let side = center_box.w.max(center_box.h);
    let mut positives = vec![*center_box];
    for _ in 1..N_POSITIVES {
        let angle = rng.random_range(0.0..TAU);
        let r = pos_radius * rng.random::<f64>().sqrt();
        positives.push(center_box.translated(r * angle.cos(), r * angle.sin()));
    }
    let phase = rng.random_range(0.0..TAU);
    let mut negatives = Vec::with_capacity(N_NEGATIVES);
    for k in 0..N_NEGATIVES {
        let mut angle = phase + TAU * k as f64 / N_NEGATIVES as f64;
        for _ in 0..NEGATIVE_DRAWS {
            let r = side * rng.random_range(1.0..=2.0);
            let b = center_box.translated(r * angle.cos(), r * angle.sin());
            if b.is_inside(frame_size.0, frame_size.1) {
                negatives.push(b);
                break;
            }
            angle = rng.random_range(0.0..TAU);
        }
    }
    (positives, negatives)
}

/// Harvests and featurizes the per-frame training patches around `bbox`.
/// The first positive is always the patch at `bbox`.
pub fn select_training_samples(
    frame: &GrayFrame,
    bbox: &BoundingBox,
    mode: FeatureMode,
    rng: &mut impl Rng,
) -> Vec<TrainingSample> {
    let (pos, neg) = training_boxes(bbox, 0.1 * bbox.w.max(bbox.h), (frame.width(), frame.height()), rng);
    let labelled = pos
        .into_iter()
        .map(|b| (b, Label::Foreground))
        .chain(neg.into_iter().map(|b| (b, Label::Background)));
    labelled
        .map(|(b, label)| TrainingSample {
            feature: featurize(frame, &b, mode),
            label,
            bbox: b,
        })
        .collect()
}

/// MAP estimate for one frame, not yet committed to the model.
#[derive(Debug, Clone, PartialEq)]
pub struct Estimate {
    pub frame_index: u64,
    pub state: ObjectState,
    pub bbox: BoundingBox,
    pub map_score: f64,
    /// All particle scores were zero and weights fell back to uniform.
    pub uniform_reweight: bool,
    /// Feature of the MAP patch.
    pub feature: Vector,
}

/// Per-frame bookkeeping.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepReport {
    pub frame_index: u64,
    pub state: ObjectState,
    pub bbox: BoundingBox,
    pub map_score: f64,
    /// All particle scores were zero and weights fell back to uniform.
    pub uniform_reweight: bool,
    pub active_pa_steps: usize,
    pub structured_iterations: usize,
    pub dense_rebuilds: usize,
    /// The estimate was rejected and the previous state kept.
    pub held: bool,
}

/// Counters from one [`OnlineLearner::learn`] call.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LearnReport {
    pub active_pa_steps: usize,
    pub dense_rebuilds: usize,
}

/// The learning half of the tracker: both sample buffers, their
/// regression caches and the shared metric. Works on any feature vectors.
#[derive(Debug, Clone)]
pub struct OnlineLearner {
    metric: MetricMatrix,
    fg_buffer: SampleBuffer,
    bg_buffer: SampleBuffer,
    fg_cache: RegressionCache,
    bg_cache: RegressionCache,
    sampler: SamplerConfig,
    pa: PaConfig,
    triplets_per_frame: usize,
    learn_metric: bool,
}

impl OnlineLearner {
    /// Empty buffers and the identity metric over `dim`-dimensional
    /// features; buffer sizes and learning settings come from `cfg`.
    pub fn new(dim: usize, cfg: &TrackerConfig) -> Result<Self> {
        cfg.validate()?;
        let capacity = cfg.sampler.capacity;
        Ok(Self {
            metric: MetricMatrix::identity(dim),
            fg_buffer: SampleBuffer::new(Label::Foreground, capacity)?,
            bg_buffer: SampleBuffer::new(Label::Background, capacity)?,
            fg_cache: RegressionCache::new(dim, capacity),
            bg_cache: RegressionCache::new(dim, capacity),
            sampler: cfg.sampler,
            pa: cfg.pa,
            triplets_per_frame: cfg.triplets_per_frame,
            learn_metric: cfg.learn_metric,
        })
    }

    pub fn metric(&self) -> &MetricMatrix {
        &self.metric
    }

    pub fn buffers(&self) -> (&SampleBuffer, &SampleBuffer) {
        (&self.fg_buffer, &self.bg_buffer)
    }

    pub fn caches(&self) -> (&RegressionCache, &RegressionCache) {
        (&self.fg_cache, &self.bg_cache)
    }

    /// Offers a sample to its buffer and mirrors the outcome in the cache.
    /// Returns 1 if the cache edit needed a dense rebuild.
    pub fn insert(&mut self, feature: Vector, label: Label, t: u64, rng: &mut impl Rng) -> Result<usize> {
        if feature.norm() < MIN_FEATURE_NORM {
            return Ok(0);
        }
        let (buffer, cache) = match label {
            Label::Foreground => (&mut self.fg_buffer, &mut self.fg_cache),
            Label::Background => (&mut self.bg_buffer, &mut self.bg_cache),
        };
        let path = match buffer.insert(feature.clone(), t, &self.sampler, rng)? {
            InsertOutcome::Appended => cache.push_column(&self.metric, feature)?,
            InsertOutcome::Replaced { index, .. } => cache.replace_column(&self.metric, index, feature)?,
            InsertOutcome::Rejected(_) => EditPath::Online,
        };
        Ok(usize::from(path != EditPath::Online))
    }

    /// One frame of learning. `others` go into the buffers first; triplets
    /// are then drawn around the foreground `anchor`, the anchor itself is
    /// inserted, and every triplet gets a PA step whose metric change is
    /// propagated into both caches.
    pub fn learn(
        &mut self,
        anchor: Vector,
        others: Vec<(Vector, Label)>,
        t: u64,
        rng: &mut impl Rng,
    ) -> Result<LearnReport> {
        let mut report = LearnReport::default();
        for (f, label) in others {
            report.dense_rebuilds += self.insert(f, label, t, rng)?;
        }
        let triplets = if self.learn_metric && anchor.norm() >= MIN_FEATURE_NORM {
            generate_triplets(
                &self.fg_buffer,
                &self.bg_buffer,
                &anchor,
                Label::Foreground,
                self.triplets_per_frame,
                rng,
            )?
        } else {
            Vec::new()
        };
        report.dense_rebuilds += self.insert(anchor, Label::Foreground, t, rng)?;

        for triplet in &triplets {
            let step = pa_update(&mut self.metric, triplet, &self.pa);
            if step.is_active() {
                report.active_pa_steps += 1;
                for cache in [&mut self.fg_cache, &mut self.bg_cache] {
                    let path = cache.apply_metric_perturbation(&self.metric, &step.a_minus, &step.a_plus, step.eta)?;
                    report.dense_rebuilds += usize::from(path != EditPath::Online);
                }
            }
        }
        Ok(report)
    }

    /// Recomputes both inverses densely from the buffer contents.
    pub fn rebuild_caches(&mut self) {
        self.fg_cache.rebuild(&self.metric);
        self.bg_cache.rebuild(&self.metric);
    }

    /// A structured round around `centre`; the caches follow the metric.
    pub fn structured_round(
        &mut self,
        centre: &ScoredBox,
        candidates: &[ScoredBox],
        cfg: &StructuredConfig,
    ) -> Result<StructuredOutcome> {
        structured_update(
            &mut self.metric,
            centre,
            candidates,
            &mut [&mut self.fg_cache, &mut self.bg_cache],
            cfg,
        )
    }

    /// Largest relative deviation of a maintained inverse from a dense
    /// recompute, `‖H − H_dense‖_F / ‖H_dense‖_F`; an error if the cache
    /// columns differ from the buffer contents.
    pub fn consistency_error(&self) -> Result<f64> {
        let mut worst: f64 = 0.0;
        for (buffer, cache) in [(&self.fg_buffer, &self.fg_cache), (&self.bg_buffer, &self.bg_cache)] {
            if !buffer.samples().eq(cache.columns().iter()) {
                return Err(Error::Numerical(format!(
                    "{:?} cache columns no longer match the buffer",
                    buffer.label()
                )));
            }
            let fresh = RegressionCache::build(&self.metric, cache.columns().to_vec(), cache.capacity())?;
            let scale = fresh.inverse().norm();
            if scale > 0.0 {
                worst = worst.max((cache.inverse() - fresh.inverse()).norm() / scale);
            }
        }
        Ok(worst)
    }
}

/// Full tracker state between frames.
#[derive(Debug, Clone)]
pub struct TrackerModel {
    cfg: TrackerConfig,
    learner: OnlineLearner,
    particles: Vec<Particle>,
    init_box: BoundingBox,
    state: ObjectState,
    frame_index: u64,
    rng: ChaCha8Rng,
}

impl TrackerModel {
    /// Seeds the buffers from `bbox` in the first frame: the box patch plus
    /// four positives within 2 px, and eight annulus negatives.
    pub fn init(frame: &GrayFrame, bbox: BoundingBox, cfg: TrackerConfig) -> Result<Self> {
        cfg.validate()?;
        if !bbox.is_valid() || bbox.w < 1.0 || bbox.h < 1.0 {
            return Err(Error::Input(format!("degenerate initial box {bbox:?}")));
        }
        if !bbox.is_inside(frame.width(), frame.height()) {
            return Err(Error::Input(format!(
                "initial box {bbox:?} is not inside the {}x{} frame",
                frame.width(),
                frame.height()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
        let mut learner = OnlineLearner::new(cfg.feature_mode.dim(), &cfg)?;
        let (pos, neg) = training_boxes(&bbox, 2.0, (frame.width(), frame.height()), &mut rng);
        for (boxes, label) in [(&pos, Label::Foreground), (&neg, Label::Background)] {
            for b in boxes {
                learner.insert(featurize(frame, b, cfg.feature_mode), label, 0, &mut rng)?;
            }
        }
        if learner.fg_buffer.is_empty() {
            return Err(Error::Input(format!("initial box {bbox:?} covers a flat region")));
        }
        learner.rebuild_caches();
        let state = ObjectState::from_box(&bbox);
        let particles = vec![
            Particle {
                state,
                weight: 1.0 / cfg.n_particles as f64,
            };
            cfg.n_particles
        ];
        Ok(Self {
            cfg,
            learner,
            particles,
            init_box: bbox,
            state,
            frame_index: 0,
            rng,
        })
    }

    pub fn config(&self) -> &TrackerConfig {
        &self.cfg
    }

    pub fn metric(&self) -> &MetricMatrix {
        self.learner.metric()
    }

    pub fn learner(&self) -> &OnlineLearner {
        &self.learner
    }

    pub fn particles(&self) -> &[Particle] {
        &self.particles
    }

    pub fn buffers(&self) -> (&SampleBuffer, &SampleBuffer) {
        self.learner.buffers()
    }

    pub fn caches(&self) -> (&RegressionCache, &RegressionCache) {
        self.learner.caches()
    }

    pub fn state(&self) -> ObjectState {
        self.state
    }

    pub fn init_box(&self) -> BoundingBox {
        self.init_box
    }

    pub fn bbox(&self) -> BoundingBox {
        self.state.bbox(&self.init_box)
    }

    pub fn frame_index(&self) -> u64 {
        self.frame_index
    }

    /// Score of a single feature under the current model.
    pub fn score(&self, feature: &Vector) -> Result<f64> {
        let l = &self.learner;
        score(&l.metric, &l.fg_cache, &l.bg_cache, feature, &self.cfg)
    }

    /// See [`OnlineLearner::consistency_error`].
    pub fn consistency_error(&self) -> Result<f64> {
        self.learner.consistency_error()
    }

    /// Processes the next frame: [`estimate`](Self::estimate) followed by
    /// [`update`](Self::update).
    pub fn step(&mut self, frame: &GrayFrame) -> Result<StepReport> {
        let est = self.estimate(frame)?;
        self.update(frame, est)
    }

    /// Propagates and scores the particles on `frame` and picks the MAP
    /// particle. The model itself is not changed until the estimate is
    /// passed to [`update`](Self::update) or [`hold`](Self::hold).
    pub fn estimate(&mut self, frame: &GrayFrame) -> Result<Estimate> {
        self.frame_index += 1;
        // every particle restarts from the previous estimate
        for p in self.particles.iter_mut() {
            p.state = self.state;
        }
        propagate(&mut self.particles, self.cfg.sigma, &mut self.rng)?;

        let mode = self.cfg.feature_mode;
        let scores: Vec<f64> = {
            let model = &*self;
            model
                .particles
                .par_iter()
                .map(|p| model.score(&featurize(frame, &p.state.bbox(&model.init_box), mode)))
                .collect::<Result<_>>()?
        };
        let total: f64 = scores.iter().sum();
        let uniform_reweight = !(total > 0.0 && total.is_finite());
        let n = self.particles.len() as f64;
        for (p, s) in self.particles.iter_mut().zip(&scores) {
            p.weight = if uniform_reweight { 1.0 / n } else { s / total };
        }
        let best = (0..self.particles.len())
            .fold(0, |b, i| if self.particles[i].weight > self.particles[b].weight { i } else { b });
        let state = self.particles[best].state;
        let bbox = state.bbox(&self.init_box);
        Ok(Estimate {
            frame_index: self.frame_index,
            state,
            bbox,
            map_score: scores[best],
            uniform_reweight,
            feature: featurize(frame, &bbox, mode),
        })
    }

    /// Accepts `est` as the new state and learns from `frame`: harvests
    /// training samples, updates the buffers and caches, and runs the
    /// metric updates.
    pub fn update(&mut self, frame: &GrayFrame, est: Estimate) -> Result<StepReport> {
        self.check_pending(&est)?;
        let cfg = self.cfg.clone();
        let t = est.frame_index;
        self.state = est.state;
        let map_box = est.bbox;

        let mut samples = select_training_samples(frame, &map_box, cfg.feature_mode, &mut self.rng);
        let anchor = samples.remove(0).feature;
        let usable_anchor = anchor.norm() >= MIN_FEATURE_NORM;
        let others = samples.into_iter().map(|s| (s.feature, s.label)).collect();
        let learned = self.learner.learn(anchor.clone(), others, t, &mut self.rng)?;

        let mut structured_iterations = 0;
        if let (Some(scfg), true) = (&cfg.structured, cfg.learn_metric && usable_anchor) {
            let candidates: Vec<ScoredBox> = sample_candidate_boxes(&map_box, scfg.n_candidate_boxes, &mut self.rng)
                .into_iter()
                .map(|b| ScoredBox {
                    feature: featurize(frame, &b, cfg.feature_mode),
                    bbox: b,
                })
                .collect();
            let centre = ScoredBox {
                bbox: map_box,
                feature: anchor,
            };
            structured_iterations = self.learner.structured_round(&centre, &candidates, scfg)?.iterations;
        }

        Ok(StepReport {
            frame_index: t,
            state: self.state,
            bbox: map_box,
            map_score: est.map_score,
            uniform_reweight: est.uniform_reweight,
            active_pa_steps: learned.active_pa_steps,
            structured_iterations,
            dense_rebuilds: learned.dense_rebuilds,
            held: false,
        })
    }

    /// Rejects `est` (for example on an occluded frame): the previous state
    /// is kept and nothing is learned.
    pub fn hold(&mut self, est: Estimate) -> Result<StepReport> {
        self.check_pending(&est)?;
        Ok(StepReport {
            frame_index: est.frame_index,
            state: self.state,
            bbox: self.bbox(),
            map_score: est.map_score,
            uniform_reweight: est.uniform_reweight,
            active_pa_steps: 0,
            structured_iterations: 0,
            dense_rebuilds: 0,
            held: true,
        })
    }

    fn check_pending(&self, est: &Estimate) -> Result<()> {
        if est.frame_index != self.frame_index {
            return Err(Error::Input(format!(
                "estimate for frame {} does not belong to frame {}",
                est.frame_index, self.frame_index
            )));
        }
        Ok(())
    }
}
