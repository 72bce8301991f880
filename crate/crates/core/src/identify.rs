//! Identification of the tracked object against static template classes.
//!
//! Each frame's tracked feature `y_t` is reconstructed from every class's
//! templates under the current metric; the class with the smallest
//! score-weighted cumulative residual `H_k = Σ S(y_i)·g_k(y_i)` wins. A
//! frame whose best residual spikes above the running median is flagged as
//! occluded.

use std::collections::VecDeque;
use std::path::Path;

use crate::error::{Error, Result};
use crate::features::{featurize, BoundingBox, FeatureMode};
use crate::frame::{list_images, load_frame};
use crate::linalg::{solve_regression, MetricMatrix, RegressionCache, Vector};

pub const OCCLUSION_FACTOR: f64 = 3.0;
pub const OCCLUSION_WINDOW: usize = 30;
pub const OCCLUSION_MIN_HISTORY: usize = 10;
/// Features below this norm come from flat patches; nothing is visible.
pub const BLANK_FEATURE_NORM: f64 = 1e-12;
/// Residuals at or below this fraction of `yᵀMy` count as exact.
pub const EXACT_RECONSTRUCTION: f64 = 1e-9;

/// A labelled template set.
#[derive(Debug, Clone, PartialEq)]
pub struct TemplateClass {
    class_id: String,
    templates: Vec<Vector>,
}

impl TemplateClass {
    pub fn new(class_id: impl Into<String>, templates: Vec<Vector>) -> Result<Self> {
        let class_id = class_id.into();
        let Some(first) = templates.first() else {
            return Err(Error::Input(format!("class {class_id} has no templates")));
        };
        if let Some(bad) = templates.iter().find(|t| t.len() != first.len()) {
            return Err(Error::dim(first.len(), bad.len()));
        }
        Ok(Self { class_id, templates })
    }

    pub fn class_id(&self) -> &str {
        &self.class_id
    }

    pub fn templates(&self) -> &[Vector] {
        &self.templates
    }

    /// Template cache built against `metric`.
    pub fn cache(&self, metric: &MetricMatrix) -> Result<RegressionCache> {
        RegressionCache::build(metric, self.templates.clone(), self.templates.len())
    }
}

/// Loads one class per subdirectory of `dir` (class id = directory name,
/// sorted). Every image becomes one template, featurized over its full
/// extent.
pub fn load_templates(dir: &Path, mode: FeatureMode) -> Result<Vec<TemplateClass>> {
    let mut class_dirs = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            class_dirs.push(path);
        }
    }
    class_dirs.sort();
    if class_dirs.is_empty() {
        return Err(Error::Input(format!("no class directories in {}", dir.display())));
    }
    class_dirs
        .iter()
        .map(|class_dir| {
            let id = class_dir
                .file_name()
                .and_then(|n| n.to_str())
                .ok_or_else(|| Error::Input(format!("bad class directory {}", class_dir.display())))?;
            let templates = list_images(class_dir)?
                .iter()
                .map(|p| {
                    let img = load_frame(p)?;
                    let full = BoundingBox::new(0.0, 0.0, img.width() as f64, img.height() as f64);
                    Ok(featurize(&img, &full, mode))
                })
                .collect::<Result<Vec<_>>>()?;
            TemplateClass::new(id, templates)
        })
        .collect()
}

/// `min_x (y − P_T x)ᵀ M (y − P_T x)` over the class templates.
pub fn class_residual(metric: &MetricMatrix, class: &TemplateClass, y: &Vector) -> Result<f64> {
    Ok(solve_regression(&class.cache(metric)?, metric, y)?.residual)
}

/// Running cumulative residuals `H_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentityLedger {
    cumulative: Vec<f64>,
    per_frame: Vec<(Vec<f64>, f64)>,
}

impl IdentityLedger {
    pub fn new(n_classes: usize) -> Self {
        Self {
            cumulative: vec![0.0; n_classes],
            per_frame: Vec::new(),
        }
    }

    pub fn cumulative(&self) -> &[f64] {
        &self.cumulative
    }

    pub fn per_frame(&self) -> &[(Vec<f64>, f64)] {
        &self.per_frame
    }

    /// `H_k += frame_score · residuals[k]`.
    pub fn accumulate(&mut self, residuals: &[f64], frame_score: f64) -> Result<()> {
        if residuals.len() != self.cumulative.len() {
            return Err(Error::dim(self.cumulative.len(), residuals.len()));
        }
        if !(frame_score >= 0.0 && frame_score.is_finite()) {
            return Err(Error::Input(format!("frame score must be finite and >= 0, got {frame_score}")));
        }
        for (h, r) in self.cumulative.iter_mut().zip(residuals) {
            *h += frame_score * r;
        }
        self.per_frame.push((residuals.to_vec(), frame_score));
        Ok(())
    }

    /// Index of the smallest cumulative residual; the lowest index wins ties.
    pub fn classify(&self) -> Option<usize> {
        let mut best: Option<usize> = None;
        for (k, &h) in self.cumulative.iter().enumerate() {
            if best.is_none_or(|b| h < self.cumulative[b]) {
                best = Some(k);
            }
        }
        best
    }
}

/// True iff `history` has at least `OCCLUSION_MIN_HISTORY` entries and
/// `residual > factor · median(history)`.
pub fn detect_occlusion(residual: f64, history: &[f64], factor: f64) -> bool {
    if history.len() < OCCLUSION_MIN_HISTORY {
        return false;
    }
    let mut sorted = history.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    residual > factor * median
}

/// Per-frame identification result.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameDecision {
    pub class_index: usize,
    pub residuals: Vec<f64>,
    pub residual_best: f64,
    pub occluded: bool,
}

/// Identification session over one trajectory.
///
/// Occluded frames are reported but neither enter the ledger nor the
/// residual history, so an occlusion cannot drag the label or the
/// threshold.
#[derive(Debug, Clone)]
pub struct Identifier {
    classes: Vec<TemplateClass>,
    ledger: IdentityLedger,
    history: VecDeque<f64>,
    factor: f64,
}

impl Identifier {
    pub fn new(classes: Vec<TemplateClass>) -> Result<Self> {
        if classes.is_empty() {
            return Err(Error::Input("identification needs at least one class".into()));
        }
        let dim = classes[0].templates[0].len();
        if let Some(c) = classes.iter().find(|c| c.templates[0].len() != dim) {
            return Err(Error::dim(dim, c.templates[0].len()));
        }
        Ok(Self {
            ledger: IdentityLedger::new(classes.len()),
            classes,
            history: VecDeque::with_capacity(OCCLUSION_WINDOW),
            factor: OCCLUSION_FACTOR,
        })
    }

    pub fn classes(&self) -> &[TemplateClass] {
        &self.classes
    }

    pub fn ledger(&self) -> &IdentityLedger {
        &self.ledger
    }

    /// Scores one frame's feature `y` with weight `frame_score` under the
    /// metric current at that frame.
    pub fn observe(&mut self, metric: &MetricMatrix, y: &Vector, frame_score: f64) -> Result<FrameDecision> {
        let residuals = self
            .classes
            .iter()
            .map(|c| class_residual(metric, c, y))
            .collect::<Result<Vec<_>>>()?;
        let residual_best = residuals.iter().copied().fold(f64::INFINITY, f64::min);
        let history: Vec<f64> = self.history.iter().copied().collect();
        // a reconstruction exact to rounding is never a spike, however
        // small the recent residuals are
        let exact = residual_best <= EXACT_RECONSTRUCTION * metric.quad_form(y).abs();
        let occluded =
            y.norm() < BLANK_FEATURE_NORM || (!exact && detect_occlusion(residual_best, &history, self.factor));
        if !occluded {
            self.ledger.accumulate(&residuals, frame_score)?;
            if self.history.len() == OCCLUSION_WINDOW {
                self.history.pop_front();
            }
            self.history.push_back(residual_best);
        }
        Ok(FrameDecision {
            class_index: self.ledger.classify().expect("at least one class"),
            residuals,
            residual_best,
            occluded,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{solve_regression_dense, testutil};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn v(x: &[f64]) -> Vector {
        Vector::from_row_slice(x)
    }

    #[test]
    fn residual_examples() {
        let m = MetricMatrix::identity(3);
        let class = TemplateClass::new("a", vec![v(&[1.0, 0.0, 0.0]), v(&[0.0, 1.0, 0.0])]).unwrap();
        assert!(class_residual(&m, &class, &v(&[1.0, 0.0, 0.0])).unwrap().abs() < 1e-15);
        assert!((class_residual(&m, &class, &v(&[0.0, 0.0, 2.5])).unwrap() - 6.25).abs() < 1e-12);
        assert!(TemplateClass::new("empty", vec![]).is_err());
    }

    #[test]
    fn residual_matches_dense_solve() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let m = testutil::random_spd_metric(&mut rng, 8);
            let templates: Vec<_> = (0..4).map(|_| testutil::random_vector(&mut rng, 8)).collect();
            let y = testutil::random_vector(&mut rng, 8);
            let class = TemplateClass::new("c", templates.clone()).unwrap();
            let dense = solve_regression_dense(&templates, &m, &y).unwrap().residual;
            assert!((class_residual(&m, &class, &y).unwrap() - dense).abs() < 1e-8);
        }
    }

    #[test]
    fn ledger_examples() {
        let mut l = IdentityLedger::new(3);
        l.accumulate(&[4.0, 5.0, 6.0], 0.0).unwrap();
        assert_eq!(l.cumulative(), &[0.0, 0.0, 0.0]);
        let mut l = IdentityLedger::new(3);
        l.accumulate(&[4.0, 5.0, 6.0], 1.0).unwrap();
        assert_eq!(l.cumulative(), &[4.0, 5.0, 6.0]);
        assert!(l.accumulate(&[1.0], 1.0).is_err());
        assert!(l.accumulate(&[1.0, 1.0, 1.0], -1.0).is_err());
    }

    #[test]
    fn classify_examples() {
        let mut single = IdentityLedger::new(1);
        single.accumulate(&[9.0], 0.5).unwrap();
        assert_eq!(single.classify(), Some(0));
        let mut l = IdentityLedger::new(3);
        l.accumulate(&[3.0, 1.0, 2.0], 1.0).unwrap();
        assert_eq!(l.classify(), Some(1));
        assert_eq!(IdentityLedger::new(2).classify(), Some(0));
    }

    #[test]
    fn ledger_matches_resummation() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut l = IdentityLedger::new(4);
        let frames: Vec<(Vec<f64>, f64)> = (0..50)
            .map(|_| ((0..4).map(|_| rng.random_range(0.0..5.0)).collect(), rng.random_range(0.0..1.0)))
            .collect();
        for (r, w) in &frames {
            l.accumulate(r, *w).unwrap();
        }
        for k in 0..4 {
            let oracle: f64 = frames.iter().map(|(r, w)| w * r[k]).sum();
            assert!((l.cumulative()[k] - oracle).abs() < 1e-9);
        }
        let argmin = (0..4).fold(0, |b, k| if l.cumulative()[k] < l.cumulative()[b] { k } else { b });
        assert_eq!(l.classify(), Some(argmin));
    }

    #[test]
    fn occlusion_examples() {
        assert!(!detect_occlusion(100.0, &[1.0; 5], 3.0));
        assert!(!detect_occlusion(2.0, &[2.0; 12], 3.0));
        assert!(detect_occlusion(8.0, &[2.0; 12], 3.0));
        assert!(!detect_occlusion(6.0, &[2.0; 12], 3.0));
    }

    #[test]
    fn spanned_features_are_identified_from_the_first_frame() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let d = 12;
        let classes: Vec<TemplateClass> = (0..3)
            .map(|k| {
                let ts = (0..3)
                    .map(|j| {
                        let mut t = Vector::zeros(d);
                        t[4 * k + j] = 1.0;
                        t[4 * k + 3] = rng.random_range(0.1..1.0);
                        t
                    })
                    .collect();
                TemplateClass::new(format!("class{k}"), ts).unwrap()
            })
            .collect();
        let m = MetricMatrix::identity(d);
        let mut id = Identifier::new(classes.clone()).unwrap();
        for _ in 0..20 {
            let mix: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let y = classes[1].templates().iter().zip(&mix).fold(Vector::zeros(d), |acc, (t, a)| acc + t * *a);
            let decision = id.observe(&m, &y, rng.random_range(0.1..1.0)).unwrap();
            assert_eq!(decision.class_index, 1);
            assert!(!decision.occluded);
        }
        let blank = id.observe(&m, &Vector::zeros(d), 0.5).unwrap();
        assert!(blank.occluded);
    }

    #[test]
    fn residual_spikes_are_flagged_and_kept_out_of_the_ledger() {
        let class = TemplateClass::new("only", vec![v(&[1.0, 0.0])]).unwrap();
        let m = MetricMatrix::identity(2);
        let mut id = Identifier::new(vec![class]).unwrap();
        for _ in 0..OCCLUSION_MIN_HISTORY {
            assert!(!id.observe(&m, &v(&[1.0, 0.1]), 1.0).unwrap().occluded);
        }
        let before = id.ledger().cumulative().to_vec();
        let spike = id.observe(&m, &v(&[1.0, 0.5]), 1.0).unwrap();
        assert!(spike.occluded);
        assert_eq!(id.ledger().cumulative(), &before[..]);
    }

    #[test]
    fn templates_load_from_class_directories() {
        let dir = tempfile::tempdir().unwrap();
        for (class, level) in [("beta", 0.2), ("alpha", 0.8)] {
            let sub = dir.path().join(class);
            std::fs::create_dir(&sub).unwrap();
            for k in 0..2 {
                let f = crate::frame::GrayFrame::from_fn(16, 16, |r, c| if (r + c + k) % 4 < 2 { level } else { 0.5 })
                    .unwrap();
                crate::frame::write_pgm(&sub.join(format!("{k}.pgm")), &f).unwrap();
            }
        }
        let classes = load_templates(dir.path(), FeatureMode::Hog405).unwrap();
        assert_eq!(classes.iter().map(|c| c.class_id()).collect::<Vec<_>>(), ["alpha", "beta"]);
        assert!(classes.iter().all(|c| c.templates().len() == 2 && c.templates()[0].len() == 405));
        assert!(load_templates(&dir.path().join("alpha"), FeatureMode::Hog405).is_err());
    }

    proptest! {
        #[test]
        fn classify_ignores_common_weight_scaling(
            seed in any::<u64>(),
            scale in 0.01f64..100.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut a = IdentityLedger::new(3);
            let mut b = IdentityLedger::new(3);
            for _ in 0..10 {
                let r: Vec<f64> = (0..3).map(|_| rng.random_range(0.0..5.0)).collect();
                let w = rng.random_range(0.0..1.0);
                let before = a.cumulative().to_vec();
                a.accumulate(&r, w).unwrap();
                b.accumulate(&r, w * scale).unwrap();
                prop_assert!(a.cumulative().iter().zip(&before).all(|(x, y)| x >= y));
            }
            prop_assert_eq!(a.classify(), b.classify());
        }
    }
}
