//! Command-line front end: argument parsing, commands and exit codes.
//!
//! Exit codes: 0 ok, 1 input or usage error, 2 numerical failure,
//! 3 I/O error.

pub mod bench;
pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use metrack_core::synth::{Pattern, SquareSequence};
use metrack_core::Error;

use bench::{BenchOptions, BenchTarget};
use commands::SynthOptions;

const CONFIG_HELP: &str = concat!(
    "Config keys (TOML; every key except frames_dir and init_box is optional):\n\n",
    include_str!("template.toml")
);

#[derive(Debug, Parser)]
#[command(name = "metrack", version, about = "Particle-filter tracking with online metric-weighted linear representations")]
pub struct Cli {
    /// RNG seed; overrides the config's `seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Track the target through a frame sequence.
    #[command(after_long_help = CONFIG_HELP)]
    Track {
        /// Run config (TOML).
        config: PathBuf,
    },
    /// Score a trajectory against ground truth (CLE, VOR, success rate).
    Eval {
        /// Trajectory CSV (`frame,x,y,w,h`).
        trajectory: PathBuf,
        /// Ground-truth CSV, same layout.
        ground_truth: PathBuf,
        /// Also write the report as JSON.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Also write per-frame CLE and VOR as CSV.
        #[arg(long)]
        per_frame: Option<PathBuf>,
    },
    /// Track and identify the target against template classes.
    #[command(after_long_help = CONFIG_HELP)]
    Identify {
        /// Run config (TOML); decisions go to its `identity_csv`.
        config: PathBuf,
        /// One subdirectory of template images per class.
        templates: PathBuf,
    },
    /// Host micro-benchmarks, CSV on stdout or to --out.
    Bench {
        target: BenchTarget,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Time-weight bases for `sampling`.
        #[arg(long, value_delimiter = ',', default_value = "1.0,1.2,1.6")]
        q: Vec<f64>,
        /// Monte-Carlo trials for `sampling`.
        #[arg(long, default_value_t = 2000)]
        trials: usize,
        /// Basis sizes for `inverse`.
        #[arg(long, value_delimiter = ',', default_value = "50,100,200,300")]
        sizes: Vec<usize>,
        /// Sample dimension for `inverse` and `metric`.
        #[arg(long, default_value_t = 405)]
        dim: usize,
        /// Timed repetitions.
        #[arg(long, default_value_t = 20)]
        repeats: usize,
    },
    /// Render a synthetic sequence with ground truth and a config.
    Synth {
        out_dir: PathBuf,
        #[arg(long, default_value_t = 100)]
        frames: usize,
        /// Texture of the moving square.
        #[arg(long, default_value = "blocks", value_parser = parse_pattern)]
        pattern: Pattern,
        /// 1-based frame numbers rendered without the square.
        #[arg(long, value_delimiter = ',')]
        blank: Vec<usize>,
        /// Also write a three-class template set.
        #[arg(long)]
        templates: bool,
    },
    /// Print the default config with every key documented.
    Config,
}

fn parse_pattern(s: &str) -> Result<Pattern, String> {
    [Pattern::Blocks, Pattern::HorizontalBars, Pattern::VerticalBars, Pattern::DiagonalBars]
        .into_iter()
        .find(|p| p.name() == s)
        .ok_or_else(|| format!("unknown pattern `{s}` (blocks, horizontal, vertical, diagonal)"))
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Numerical(_) => 2,
        Error::Io { .. } => 3,
        _ => 1,
    }
}

fn execute(cli: Cli, out: &mut dyn Write) -> metrack_core::Result<()> {
    let w = |r: std::io::Result<()>| r.map_err(|e| Error::Io { path: "<stdout>".into(), source: e });
    match cli.command {
        Command::Track { config } => {
            let run = commands::cmd_track(&config, cli.seed)?;
            w(writeln!(out, "tracked {} frames", run.trajectory.len()))?;
        }
        Command::Eval {
            trajectory,
            ground_truth,
            report,
            per_frame,
        } => {
            let r = commands::cmd_eval(&trajectory, &ground_truth, report.as_deref(), per_frame.as_deref())?;
            let json = serde_json::json!({
                "mean_cle": r.mean_cle,
                "mean_vor": r.mean_vor,
                "success_rate": r.success_rate,
                "evaluated_frames": r.evaluated_frames,
                "skipped_frames": r.skipped_frames,
            });
            w(writeln!(out, "{}", serde_json::to_string_pretty(&json).expect("json")))?;
        }
        Command::Identify { config, templates } => {
            let run = commands::cmd_identify(&config, &templates, cli.seed)?;
            let occluded = run.rows.iter().filter(|r| r.occluded).count();
            w(writeln!(out, "frames: {} occluded: {occluded}", run.rows.len()))?;
            w(writeln!(out, "final label: {}", run.final_label))?;
        }
        Command::Bench {
            target,
            out: path,
            q,
            trials,
            sizes,
            dim,
            repeats,
        } => {
            let opts = BenchOptions {
                seed: cli.seed.unwrap_or(0),
                q,
                trials,
                sizes,
                dim,
                repeats,
                ..BenchOptions::default()
            };
            let mut buf = Vec::new();
            bench::run_bench(target, &opts, &mut buf)?;
            match path {
                Some(p) => std::fs::write(&p, &buf).map_err(|e| Error::Io { path: p, source: e })?,
                None => w(out.write_all(&buf))?,
            }
        }
        Command::Synth {
            out_dir,
            frames,
            pattern,
            blank,
            templates,
        } => {
            if blank.iter().any(|&b| b == 0 || b > frames) {
                return Err(Error::Input(format!("--blank frames must lie in 1..={frames}")));
            }
            let opts = SynthOptions {
                sequence: SquareSequence {
                    n_frames: frames,
                    pattern,
                    blank_frames: blank.iter().map(|b| b - 1).collect(),
                    ..SquareSequence::default()
                },
                seed: cli.seed.unwrap_or(0),
                templates,
            };
            let layout = commands::cmd_synth(&out_dir, &opts)?;
            w(writeln!(out, "wrote {}", layout.config.display()))?;
        }
        Command::Config => w(write!(out, "{}", config::TEMPLATE))?,
    }
    Ok(())
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code. Messages go to `out` and `err`.
pub fn run_with<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 { write!(out, "{text}") } else { write!(err, "{text}") };
            return code;
        }
    };
    match execute(cli, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    run_with(args, &mut std::io::stdout().lock(), &mut std::io::stderr().lock())
}
