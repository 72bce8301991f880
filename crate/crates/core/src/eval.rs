//! Tracking-quality metrics: centre location error, VOC overlap and
//! success rate (overlap above 0.5).

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::BoundingBox;
use crate::metric::vor_overlap;

pub const SUCCESS_OVERLAP: f64 = 0.5;

/// Euclidean distance between box centres.
pub fn cle(pred: &BoundingBox, gt: &BoundingBox) -> f64 {
    let (px, py) = pred.center();
    let (gx, gy) = gt.center();
    (px - gx).hypot(py - gy)
}

/// Frame-indexed boxes, as read from a `frame,x,y,w,h` CSV.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GroundTruth {
    boxes: BTreeMap<u64, BoundingBox>,
}

impl GroundTruth {
    /// Rows must have strictly increasing frame numbers.
    pub fn from_rows(rows: &[(u64, BoundingBox)]) -> Result<Self> {
        for pair in rows.windows(2) {
            if pair[1].0 <= pair[0].0 {
                return Err(Error::Input(format!(
                    "ground-truth frames must increase strictly ({} after {})",
                    pair[1].0, pair[0].0
                )));
            }
        }
        Ok(Self {
            boxes: rows.iter().copied().collect(),
        })
    }

    pub fn get(&self, frame: u64) -> Option<&BoundingBox> {
        self.boxes.get(&frame)
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameEval {
    pub frame: u64,
    pub cle: f64,
    pub vor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceReport {
    pub per_frame: Vec<FrameEval>,
    pub mean_cle: f64,
    pub mean_vor: f64,
    pub success_rate: f64,
    /// Predicted frames that had a ground-truth box.
    pub evaluated_frames: usize,
    /// Predicted frames without ground truth, left out of the means.
    pub skipped_frames: usize,
}

/// Scores predictions against ground truth. Input order does not matter;
/// a frame predicted twice is an error.
pub fn summarize(preds: &[(u64, BoundingBox)], gt: &GroundTruth) -> Result<SequenceReport> {
    let mut sorted = preds.to_vec();
    sorted.sort_by_key(|(f, _)| *f);
    if let Some(pair) = sorted.windows(2).find(|p| p[0].0 == p[1].0) {
        return Err(Error::Input(format!("frame {} predicted twice", pair[0].0)));
    }
    let mut per_frame = Vec::new();
    let mut skipped_frames = 0;
    for (frame, pred) in &sorted {
        match gt.get(*frame) {
            Some(truth) => per_frame.push(FrameEval {
                frame: *frame,
                cle: cle(pred, truth),
                vor: vor_overlap(pred, truth),
            }),
            None => skipped_frames += 1,
        }
    }
    if per_frame.is_empty() {
        return Err(Error::Input("no predicted frame has ground truth".into()));
    }
    let n = per_frame.len() as f64;
    Ok(SequenceReport {
        mean_cle: per_frame.iter().map(|f| f.cle).sum::<f64>() / n,
        mean_vor: per_frame.iter().map(|f| f.vor).sum::<f64>() / n,
        success_rate: per_frame.iter().filter(|f| f.vor > SUCCESS_OVERLAP).count() as f64 / n,
        evaluated_frames: per_frame.len(),
        skipped_frames,
        per_frame,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct BoxRow {
    frame: u64,
    x: f64,
    y: f64,
    w: f64,
    h: f64,
}

/// Reads a `frame,x,y,w,h` CSV (header required, top-left convention).
pub fn read_boxes_csv(path: &Path) -> Result<Vec<(u64, BoundingBox)>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let headers = reader
        .headers()
        .map_err(|e| Error::Input(format!("{}: {e}", path.display())))?
        .clone();
    if headers.iter().collect::<Vec<_>>() != ["frame", "x", "y", "w", "h"] {
        return Err(Error::Input(format!(
            "{}: expected header frame,x,y,w,h",
            path.display()
        )));
    }
    reader
        .deserialize::<BoxRow>()
        .map(|row| {
            let r = row.map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
            Ok((r.frame, BoundingBox::new(r.x, r.y, r.w, r.h)))
        })
        .collect()
}

/// Writes boxes as `frame,x,y,w,h`.
pub fn write_boxes_csv(path: &Path, rows: &[(u64, BoundingBox)]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for (frame, b) in rows {
        writer
            .serialize(BoxRow {
                frame: *frame,
                x: b.x,
                y: b.y,
                w: b.w,
                h: b.h,
            })
            .map_err(|e| csv_error(path, e))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

/// Writes the per-frame table `frame,cle,vor`.
pub fn write_per_frame_csv(path: &Path, report: &SequenceReport) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for f in &report.per_frame {
        writer.serialize(f).map_err(|e| csv_error(path, e))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            _ => unreachable!(),
        }
    } else {
        Error::Input(format!("{}: {e}", path.display()))
    }
}
