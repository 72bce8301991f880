//! Run configuration: a flat TOML file.
//!
//! Every key is optional except `frames_dir` and `init_box`; the defaults
//! are the published tracker constants. Relative paths are resolved
//! against the directory holding the config file. Unknown keys are errors.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use metrack_core::features::{BoundingBox, FeatureMode};
use metrack_core::metric::{PaConfig, StructuredConfig};
use metrack_core::reservoir::SamplerConfig;
use metrack_core::tracker::TrackerConfig;
use metrack_core::{Error, Result};

/// Commented default config, printed by `metrack config`.
pub const TEMPLATE: &str = include_str!("template.toml");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub frames_dir: PathBuf,
    pub init_box: [f64; 4],
    #[serde(default = "defaults::trajectory_csv")]
    pub trajectory_csv: PathBuf,
    #[serde(default = "defaults::diagnostics_json")]
    pub diagnostics_json: PathBuf,
    #[serde(default = "defaults::identity_csv")]
    pub identity_csv: PathBuf,
    #[serde(default)]
    pub seed: u64,

    #[serde(default = "defaults::n_particles")]
    pub n_particles: usize,
    #[serde(default = "defaults::sigma")]
    pub sigma: [f64; 3],
    #[serde(default = "defaults::one")]
    pub gamma_f: f64,
    #[serde(default = "defaults::one")]
    pub gamma_b: f64,
    #[serde(default = "defaults::rho")]
    pub rho: f64,
    #[serde(default = "defaults::buffer_capacity")]
    pub buffer_capacity: usize,
    #[serde(default = "defaults::q_factor")]
    pub q_factor: f64,
    #[serde(default = "defaults::yes")]
    pub learn_metric: bool,
    #[serde(default = "defaults::triplets_per_frame")]
    pub triplets_per_frame: usize,
    #[serde(default = "defaults::one")]
    pub pa_c: f64,
    #[serde(default)]
    pub structured: bool,
    #[serde(default = "defaults::one")]
    pub structured_c: f64,
    #[serde(default = "defaults::structured_max_iterations")]
    pub structured_max_iterations: usize,
    #[serde(default = "defaults::structured_candidates")]
    pub structured_candidates: usize,
    #[serde(default)]
    pub feature_mode: FeatureMode,

    /// Directory holding the config file; relative paths hang off it.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

mod defaults {
    use super::*;

    pub fn trajectory_csv() -> PathBuf {
        "trajectory.csv".into()
    }
    pub fn diagnostics_json() -> PathBuf {
        "diagnostics.json".into()
    }
    pub fn identity_csv() -> PathBuf {
        "identity.csv".into()
    }
    pub fn n_particles() -> usize {
        TrackerConfig::default().n_particles
    }
    pub fn sigma() -> [f64; 3] {
        TrackerConfig::default().sigma
    }
    pub fn one() -> f64 {
        1.0
    }
    pub fn rho() -> f64 {
        TrackerConfig::default().rho
    }
    pub fn buffer_capacity() -> usize {
        SamplerConfig::default().capacity
    }
    pub fn q_factor() -> f64 {
        SamplerConfig::default().q_factor
    }
    pub fn yes() -> bool {
        true
    }
    pub fn triplets_per_frame() -> usize {
        TrackerConfig::default().triplets_per_frame
    }
    pub fn structured_max_iterations() -> usize {
        StructuredConfig::default().max_iterations
    }
    pub fn structured_candidates() -> usize {
        StructuredConfig::default().n_candidate_boxes
    }
}

impl RunConfig {
    /// Defaults for everything except the input.
    pub fn new(frames_dir: impl Into<PathBuf>, init_box: BoundingBox) -> Self {
        let mut cfg = Self::from_toml_str("frames_dir = \"\"\ninit_box = [0.0, 0.0, 1.0, 1.0]", Path::new(""))
            .expect("defaults parse");
        cfg.frames_dir = frames_dir.into();
        cfg.init_box = [init_box.x, init_box.y, init_box.w, init_box.h];
        cfg
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let base = path.parent().unwrap_or(Path::new("")).to_path_buf();
        Self::from_toml_str(&text, &base).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.base_dir = base_dir.to_path_buf();
        cfg.tracker_config()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn init_box(&self) -> BoundingBox {
        let [x, y, w, h] = self.init_box;
        BoundingBox::new(x, y, w, h)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn tracker_config(&self) -> Result<TrackerConfig> {
        let cfg = TrackerConfig {
            n_particles: self.n_particles,
            sigma: self.sigma,
            gamma_f: self.gamma_f,
            gamma_b: self.gamma_b,
            rho: self.rho,
            sampler: SamplerConfig {
                capacity: self.buffer_capacity,
                q_factor: self.q_factor,
            },
            pa: PaConfig { c_bound: self.pa_c },
            structured: self.structured.then_some(StructuredConfig {
                c_bound: self.structured_c,
                max_iterations: self.structured_max_iterations,
                n_candidate_boxes: self.structured_candidates,
            }),
            triplets_per_frame: self.triplets_per_frame,
            feature_mode: self.feature_mode,
            rng_seed: self.seed,
            learn_metric: self.learn_metric,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
