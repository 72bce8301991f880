//! Time-weighted reservoir buffers.
//!
//! Each sample streamed at frame `t` gets weight `w = q^t` and key
//! `k = u^{1/w}` with `u ~ U(0, 1)`; a full buffer keeps the entries with
//! the largest keys. Weights overflow quickly (`1.6^1000`), so entries keep
//! `ln w` and are ordered by `score = ln w − ln(−ln u) = −ln(−ln k)`, which
//! is increasing in `k`.

use rand::distr::Open01;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{MetricMatrix, Vector};
use crate::metric::{triplet_loss, Triplet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Foreground,
    Background,
}

impl Label {
    pub fn other(self) -> Self {
        match self {
            Label::Foreground => Label::Background,
            Label::Background => Label::Foreground,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub capacity: usize,
    pub q_factor: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            capacity: 300,
            q_factor: 1.6,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.capacity == 0 {
            return Err(Error::Config("buffer capacity must be >= 1".into()));
        }
        if !(self.q_factor >= 1.0 && self.q_factor.is_finite()) {
            return Err(Error::Config(format!("q_factor must be >= 1, got {}", self.q_factor)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BufferEntry {
    pub sample: Vector,
    pub frame_index: u64,
    pub entry_id: u64,
    log_weight: f64,
    score: f64,
}

impl BufferEntry {
    /// `ln w = t·ln q`.
    pub fn log_weight(&self) -> f64 {
        self.log_weight
    }

    /// `w = q^t`; saturates to infinity for very long streams.
    pub fn weight(&self) -> f64 {
        self.log_weight.exp()
    }

    /// Order-equivalent form of the key, `−ln(−ln k)`.
    pub fn score(&self) -> f64 {
        self.score
    }

    /// `k = u^{1/w}`. Rounds to 1 once `w` is astronomically large; use
    /// [`BufferEntry::score`] for comparisons.
    pub fn key(&self) -> f64 {
        (-(-self.score).exp()).exp()
    }

    fn ranks_below(&self, other: &BufferEntry) -> bool {
        (self.score, self.entry_id) < (other.score, other.entry_id)
    }
}

/// What happened to a sample offered to a buffer.
#[derive(Debug, Clone, PartialEq)]
pub enum InsertOutcome {
    /// Buffer was below capacity; the entry now sits at the end.
    Appended,
    /// The entry at `index` was evicted; later entries shifted down by one
    /// and the new entry sits at the end.
    Replaced { index: usize, evicted: BufferEntry },
    /// The new key did not beat the minimum; the buffer is unchanged.
    Rejected(BufferEntry),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleBuffer {
    label: Label,
    capacity: usize,
    entries: Vec<BufferEntry>,
    next_id: u64,
    last_frame: Option<u64>,
}

impl SampleBuffer {
    pub fn new(label: Label, capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("buffer capacity must be >= 1".into()));
        }
        Ok(Self {
            label,
            capacity,
            entries: Vec::with_capacity(capacity),
            next_id: 0,
            last_frame: None,
        })
    }

    pub fn label(&self) -> Label {
        self.label
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[BufferEntry] {
        &self.entries
    }

    pub fn samples(&self) -> impl Iterator<Item = &Vector> {
        self.entries.iter().map(|e| &e.sample)
    }

    /// Samples with weights rescaled by the largest weight, so they stay
    /// finite for any stream length.
    pub fn relative_weights(&self) -> Vec<(Vector, f64)> {
        let top = self.entries.iter().map(|e| e.log_weight).fold(f64::NEG_INFINITY, f64::max);
        self.entries
            .iter()
            .map(|e| (e.sample.clone(), (e.log_weight - top).exp()))
            .collect()
    }

    /// Index of the smallest-key entry, ties broken by the lower id.
    pub fn min_key_index(&self) -> Option<usize> {
        let mut best: Option<usize> = None;
        for (i, e) in self.entries.iter().enumerate() {
            if best.is_none_or(|b| e.ranks_below(&self.entries[b])) {
                best = Some(i);
            }
        }
        best
    }

    pub fn min_key_entry(&self) -> Option<&BufferEntry> {
        self.min_key_index().map(|i| &self.entries[i])
    }

    pub fn insert(
        &mut self,
        sample: Vector,
        frame_index: u64,
        cfg: &SamplerConfig,
        rng: &mut impl Rng,
    ) -> Result<InsertOutcome> {
        cfg.validate()?;
        if let Some(first) = self.entries.first() {
            if first.sample.len() != sample.len() {
                return Err(Error::dim(first.sample.len(), sample.len()));
            }
        }
        if self.last_frame.is_some_and(|last| frame_index < last) {
            return Err(Error::Input(format!(
                "frame index went backwards ({} after {})",
                frame_index,
                self.last_frame.unwrap_or_default()
            )));
        }
        self.last_frame = Some(frame_index);

        let u: f64 = rng.sample(Open01);
        let log_weight = frame_index as f64 * cfg.q_factor.ln();
        let entry = BufferEntry {
            sample,
            frame_index,
            entry_id: self.next_id,
            log_weight,
            score: log_weight - (-u.ln()).ln(),
        };
        self.next_id += 1;

        if self.entries.len() < self.capacity {
            self.entries.push(entry);
            return Ok(InsertOutcome::Appended);
        }
        let index = self.min_key_index().expect("full buffer is non-empty");
        if entry.score > self.entries[index].score {
            let evicted = self.entries.remove(index);
            self.entries.push(entry);
            Ok(InsertOutcome::Replaced { index, evicted })
        } else {
            Ok(InsertOutcome::Rejected(entry))
        }
    }
}

/// Draws `count` triplets around `anchor`: `p⁺` uniformly from the buffer
/// labelled `anchor_label`, `p⁻` uniformly from the other one. Returns an
/// empty list when either buffer is empty.
pub fn generate_triplets(
    fg: &SampleBuffer,
    bg: &SampleBuffer,
    anchor: &Vector,
    anchor_label: Label,
    count: usize,
    rng: &mut impl Rng,
) -> Result<Vec<Triplet>> {
    if fg.is_empty() || bg.is_empty() {
        return Ok(Vec::new());
    }
    let (same, other) = match anchor_label {
        Label::Foreground => (fg, bg),
        Label::Background => (bg, fg),
    };
    (0..count)
        .map(|_| {
            let p = &same.entries[rng.random_range(0..same.len())].sample;
            let n = &other.entries[rng.random_range(0..other.len())].sample;
            Triplet::new(anchor.clone(), p.clone(), n.clone())
        })
        .collect()
}

/// `Σᵢ Σⱼ (wᵢ⁺/Σw⁺)(wⱼ⁻/Σw⁻) · l_M(p, pᵢ⁺, pⱼ⁻)`.
pub fn weighted_empirical_loss(
    metric: &MetricMatrix,
    anchor: &Vector,
    same_class: &[(Vector, f64)],
    other_class: &[(Vector, f64)],
) -> Result<f64> {
    let total = |set: &[(Vector, f64)]| -> Result<f64> {
        if set.iter().any(|(_, w)| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::Input("sample weights must be finite and non-negative".into()));
        }
        let s: f64 = set.iter().map(|(_, w)| w).sum();
        if s > 0.0 {
            Ok(s)
        } else {
            Err(Error::Input("weighted loss needs a positive total weight per class".into()))
        }
    };
    let (wp, wn) = (total(same_class)?, total(other_class)?);
    let mut loss = 0.0;
    for (p, w_p) in same_class {
        let mut inner = 0.0;
        for (n, w_n) in other_class {
            let t = Triplet::new(anchor.clone(), p.clone(), n.clone())?;
            inner += w_n / wn * triplet_loss(metric, &t);
        }
        loss += w_p / wp * inner;
    }
    Ok(loss)
}
