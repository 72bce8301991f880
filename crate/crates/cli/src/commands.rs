//! The `track`, `identify`, `eval` and `synth` commands.
//!
//! Each command computes everything in memory first and only then writes
//! its outputs, so a failed run leaves no partial files behind.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use metrack_core::eval::{read_boxes_csv, summarize, write_boxes_csv, write_per_frame_csv, GroundTruth, SequenceReport};
use metrack_core::features::{featurize, BoundingBox};
use metrack_core::frame::{list_frame_sequence, load_frame, write_pgm};
use metrack_core::identify::{load_templates, Identifier};
use metrack_core::synth::{class_templates, Pattern, SquareSequence};
use metrack_core::tracker::{StepReport, TrackerModel};
use metrack_core::{Error, Result};

use crate::config::RunConfig;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FrameDiagnostics {
    pub frame: u64,
    pub map_score: f64,
    pub fg_buffer: usize,
    pub bg_buffer: usize,
    pub active_pa_steps: usize,
    pub structured_iterations: usize,
    pub dense_rebuilds: usize,
    pub uniform_reweight: bool,
    pub held: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Diagnostics {
    pub frames: Vec<FrameDiagnostics>,
    pub total_active_pa_steps: usize,
    pub total_dense_rebuilds: usize,
    /// Relative deviation of the maintained inverses from a dense
    /// recompute after the last frame.
    pub final_inverse_error: f64,
}

#[derive(Debug, Clone)]
pub struct TrackRun {
    pub trajectory: Vec<(u64, BoundingBox)>,
    pub diagnostics: Diagnostics,
}

fn frame_diagnostics(frame: u64, report: &StepReport, model: &TrackerModel) -> FrameDiagnostics {
    let (fg, bg) = model.buffers();
    FrameDiagnostics {
        frame,
        map_score: report.map_score,
        fg_buffer: fg.len(),
        bg_buffer: bg.len(),
        active_pa_steps: report.active_pa_steps,
        structured_iterations: report.structured_iterations,
        dense_rebuilds: report.dense_rebuilds,
        uniform_reweight: report.uniform_reweight,
        held: report.held,
    }
}

fn finish_diagnostics(frames: Vec<FrameDiagnostics>, model: &TrackerModel) -> Result<Diagnostics> {
    Ok(Diagnostics {
        total_active_pa_steps: frames.iter().map(|f| f.active_pa_steps).sum(),
        total_dense_rebuilds: frames.iter().map(|f| f.dense_rebuilds).sum(),
        final_inverse_error: model.consistency_error()?,
        frames,
    })
}

/// Drives the tracker over the configured sequence. `on_frame` sees each
/// frame's estimate and decides whether the model learns from it
/// (`true`) or holds its previous state (`false`).
fn drive<F>(cfg: &RunConfig, mut on_frame: F) -> Result<(TrackRun, TrackerModel)>
where
    F: FnMut(u64, &TrackerModel, &metrack_core::tracker::Estimate) -> Result<bool>,
{
    let frames = list_frame_sequence(&cfg.resolve(&cfg.frames_dir))?;
    let (first_no, first_path) = &frames[0];
    let first = load_frame(first_path)?;
    let init = cfg.init_box();
    let mut model = TrackerModel::init(&first, init, cfg.tracker_config()?)?;
    let mut trajectory = vec![(*first_no, init)];
    let mut diagnostics = Vec::with_capacity(frames.len());
    for (no, path) in &frames[1..] {
        let frame = load_frame(path)?;
        let est = model.estimate(&frame)?;
        let report = if on_frame(*no, &model, &est)? {
            model.update(&frame, est)?
        } else {
            model.hold(est)?
        };
        trajectory.push((*no, report.bbox));
        diagnostics.push(frame_diagnostics(*no, &report, &model));
    }
    let diagnostics = finish_diagnostics(diagnostics, &model)?;
    Ok((TrackRun { trajectory, diagnostics }, model))
}

/// Runs the tracker without writing anything.
pub fn run_tracker(cfg: &RunConfig) -> Result<TrackRun> {
    drive(cfg, |_, _, _| Ok(true)).map(|(run, _)| run)
}

fn with_seed(mut cfg: RunConfig, seed: Option<u64>) -> RunConfig {
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    fs::write(path, text + "\n").map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// `metrack track`: writes the trajectory CSV and diagnostics JSON.
pub fn cmd_track(config_path: &Path, seed: Option<u64>) -> Result<TrackRun> {
    let cfg = with_seed(RunConfig::load(config_path)?, seed);
    let run = run_tracker(&cfg)?;
    write_boxes_csv(&cfg.resolve(&cfg.trajectory_csv), &run.trajectory)?;
    write_json(&cfg.resolve(&cfg.diagnostics_json), &run.diagnostics)?;
    Ok(run)
}

/// `metrack eval`: scores a trajectory against ground truth.
pub fn cmd_eval(
    trajectory_csv: &Path,
    gt_csv: &Path,
    report_json: Option<&Path>,
    per_frame_csv: Option<&Path>,
) -> Result<SequenceReport> {
    let preds = read_boxes_csv(trajectory_csv)?;
    let gt = GroundTruth::from_rows(&read_boxes_csv(gt_csv)?)?;
    let report = summarize(&preds, &gt)?;
    if let Some(p) = report_json {
        write_json(p, &report)?;
    }
    if let Some(p) = per_frame_csv {
        write_per_frame_csv(p, &report)?;
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IdentityRow {
    pub frame: u64,
    pub class: String,
    pub residual_best: f64,
    pub occluded: bool,
}

#[derive(Debug, Clone)]
pub struct IdentifyRun {
    pub rows: Vec<IdentityRow>,
    pub final_label: String,
    pub track: TrackRun,
}

/// Tracks the configured sequence and identifies the target against the
/// template classes in `templates_dir`. The tracker does not learn from
/// frames flagged as occluded and keeps its previous position there.
pub fn run_identify(cfg: &RunConfig, templates_dir: &Path) -> Result<IdentifyRun> {
    let tracker_cfg = cfg.tracker_config()?;
    let classes = load_templates(templates_dir, tracker_cfg.feature_mode)?;
    if classes[0].templates()[0].len() != tracker_cfg.feature_mode.dim() {
        return Err(Error::Input("template features do not match the feature mode".into()));
    }
    let mut identifier = Identifier::new(classes)?;
    let mut rows = Vec::new();

    // the first frame is identified from the initial box
    let frames = list_frame_sequence(&cfg.resolve(&cfg.frames_dir))?;
    let first = load_frame(&frames[0].1)?;
    let probe = TrackerModel::init(&first, cfg.init_box(), tracker_cfg.clone())?;
    let y0 = featurize(&first, &cfg.init_box(), tracker_cfg.feature_mode);
    let d0 = identifier.observe(probe.metric(), &y0, probe.score(&y0)?)?;
    rows.push((frames[0].0, d0));

    let (track, _) = drive(cfg, |no, model, est| {
        let d = identifier.observe(model.metric(), &est.feature, est.map_score)?;
        let learn = !d.occluded;
        rows.push((no, d));
        Ok(learn)
    })?;
    let class_name = |k: usize| identifier.classes()[k].class_id().to_string();
    let rows: Vec<IdentityRow> = rows
        .into_iter()
        .map(|(frame, d)| IdentityRow {
            frame,
            class: class_name(d.class_index),
            residual_best: d.residual_best,
            occluded: d.occluded,
        })
        .collect();
    let final_label = rows.last().expect("at least one frame").class.clone();
    Ok(IdentifyRun {
        rows,
        final_label,
        track,
    })
}

/// `metrack identify`: writes the per-frame decisions CSV.
pub fn cmd_identify(config_path: &Path, templates_dir: &Path, seed: Option<u64>) -> Result<IdentifyRun> {
    let cfg = with_seed(RunConfig::load(config_path)?, seed);
    let run = run_identify(&cfg, templates_dir)?;
    let path = cfg.resolve(&cfg.identity_csv);
    let mut writer = csv::Writer::from_path(&path).map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
    for row in &run.rows {
        writer
            .serialize(row)
            .map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
    }
    writer.flush().map_err(|e| Error::Io { path, source: e })?;
    Ok(run)
}

/// Options for `metrack synth`.
#[derive(Debug, Clone)]
pub struct SynthOptions {
    pub sequence: SquareSequence,
    pub seed: u64,
    pub templates: bool,
}

/// Layout written by [`cmd_synth`].
#[derive(Debug, Clone)]
pub struct SynthLayout {
    pub frames_dir: PathBuf,
    pub ground_truth: PathBuf,
    pub config: PathBuf,
    pub templates_dir: Option<PathBuf>,
}

/// `metrack synth`: renders a synthetic sequence with ground truth and a
/// ready-to-run config (and optionally a three-class template set).
pub fn cmd_synth(out_dir: &Path, opts: &SynthOptions) -> Result<SynthLayout> {
    let seq = opts.sequence.render(opts.seed)?;
    let io = |p: &Path, e| Error::Io {
        path: p.to_path_buf(),
        source: e,
    };
    let frames_dir = out_dir.join("frames");
    fs::create_dir_all(&frames_dir).map_err(|e| io(&frames_dir, e))?;
    for (t, frame) in seq.frames.iter().enumerate() {
        write_pgm(&frames_dir.join(format!("{:04}.pgm", t + 1)), frame)?;
    }
    let rows: Vec<(u64, BoundingBox)> = seq.truth.iter().enumerate().map(|(t, b)| (t as u64 + 1, *b)).collect();
    let ground_truth = out_dir.join("groundtruth.csv");
    write_boxes_csv(&ground_truth, &rows)?;

    let mut cfg = RunConfig::new("frames", seq.truth[0]);
    cfg.seed = opts.seed;
    let config = out_dir.join("config.toml");
    fs::write(&config, cfg.to_toml()).map_err(|e| io(&config, e))?;

    let templates_dir = if opts.templates {
        let dir = out_dir.join("templates");
        for (k, p) in Pattern::CLASSES.iter().enumerate() {
            let class_dir = dir.join(p.name());
            fs::create_dir_all(&class_dir).map_err(|e| io(&class_dir, e))?;
            for (j, img) in class_templates(*p, opts.sequence.side, 6, opts.seed + k as u64)?.iter().enumerate() {
                write_pgm(&class_dir.join(format!("{j}.pgm")), img)?;
            }
        }
        Some(dir)
    } else {
        None
    };
    Ok(SynthLayout {
        frames_dir,
        ground_truth,
        config,
        templates_dir,
    })
}
