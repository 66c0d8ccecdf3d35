//! Command-line front end: `gen`, `train`, `infer`, `eval` and `slices`.
//!
//! Exit codes: 0 on success, 1 for usage errors, 2 for data or config errors.
//! Diagnostics go to stderr; results only to files.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;

use crate::config::{RunConfig, EFFECTIVE_CONFIG_FILE};
use crate::error::Result;
use crate::infer::segment_volume;
use crate::io::{create_dir_all, write_atomic};
use crate::metrics::{confusion_map, distance_tolerant_prf};
use crate::net::Checkpoint;
use crate::synth::generate_dataset;
use crate::train::{train, Dataset, TrainOutputs};
use crate::volume::{Axis, Normalization, Volume};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "rootseg", version, about = "Super-resolution root segmentation of 3D MRI volumes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic training/validation dataset.
    Gen {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Train a network on a generated dataset.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Accepted for symmetry with `gen`; training runs on one thread.
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Segment a full volume at twice its resolution.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        #[arg(long, default_value_t = 60)]
        tile: usize,
        /// Ground truth for an optional confusion-map export.
        #[arg(long)]
        gt: Option<PathBuf>,
        #[arg(long)]
        dontcare: Option<PathBuf>,
        #[arg(long, default_value_t = 1.0)]
        confusion_tolerance: f64,
        #[arg(long, default_value = "z")]
        axis: Axis,
    },
    /// Distance-tolerant precision/recall/F1 of a prediction.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        dontcare: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4,5")]
        tolerances: Vec<f64>,
        #[arg(long)]
        csv: PathBuf,
        /// Directory for per-slice TP/FP/FN images.
        #[arg(long)]
        confusion: Option<PathBuf>,
        #[arg(long, default_value_t = 1.0)]
        confusion_tolerance: f64,
        #[arg(long, default_value = "z")]
        axis: Axis,
    },
    /// Export every slice along an axis as PGM images.
    Slices {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "z")]
        axis: Axis,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parses `args` (including the program name), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_DATA
        }
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    write_atomic(path, &serde_json::to_vec_pretty(value)?)
}

fn dir_of(file: &Path) -> PathBuf {
    match file.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn export_confusion(pred: &Volume, gt_path: &Path, dc_path: Option<&PathBuf>, tolerance: f64, axis: Axis, dir: &Path) -> Result<()> {
    let gt = Volume::read_rvol(gt_path)?;
    let dc = dc_path.map(Volume::read_rvol).transpose()?;
    let cv = confusion_map(pred, &gt, tolerance, dc.as_ref())?;
    cv.export_slices(axis, dir)?;
    Ok(())
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::Gen { config, out, workers } => {
            let cfg = RunConfig::load(&config)?;
            create_dir_all(&out)?;
            cfg.write_effective(&out)?;
            let m = generate_dataset(&cfg.gen, &out, workers)?;
            eprintln!("wrote {} training and {} validation samples to {}", m.train.len(), m.val.len(), out.display());
        }
        Command::Train { config, data, out, workers: _ } => {
            let cfg = RunConfig::load(&config)?;
            create_dir_all(&out)?;
            cfg.write_effective(&out)?;
            let dataset = Dataset::load(&data)?;
            let r = train(&cfg.net, &cfg.train, &dataset, &TrainOutputs { dir: Some(out.clone()) })?;
            if let Some(last) = r.log.steps.last() {
                eprintln!("trained {} steps, final loss {:.5}", last.step, last.loss);
            }
            if let Some((step, f1)) = r.best {
                eprintln!("best validation F1 {f1:.4} at step {step}");
            }
        }
        Command::Infer { ckpt, input, out, threshold, tile, gt, dontcare, confusion_tolerance, axis } => {
            #[derive(Serialize)]
            struct Echo<'a> {
                command: &'a str,
                ckpt: &'a Path,
                input: &'a Path,
                threshold: f64,
                tile: usize,
                gt: Option<&'a Path>,
                dontcare: Option<&'a Path>,
                confusion_tolerance: f64,
                axis: String,
            }
            create_dir_all(&out)?;
            let echo = Echo {
                command: "infer",
                ckpt: &ckpt,
                input: &input,
                threshold,
                tile,
                gt: gt.as_deref(),
                dontcare: dontcare.as_deref(),
                confusion_tolerance,
                axis: axis.to_string(),
            };
            write_json(&out.join(EFFECTIVE_CONFIG_FILE), &echo)?;
            let net = Checkpoint::load(&ckpt)?.network;
            let volume = Volume::read_rvol(&input)?;
            let s = segment_volume(&net, &volume, threshold, tile)?;
            s.prob.write_rvol(out.join("prob.rvol"))?;
            s.seg.write_rvol(out.join("seg.rvol"))?;
            if let Some(gt) = &gt {
                export_confusion(&s.seg, gt, dontcare.as_ref(), confusion_tolerance, axis, &out.join("confusion"))?;
            }
        }
        Command::Eval { pred, gt, dontcare, tolerances, csv, confusion, confusion_tolerance, axis } => {
            #[derive(Serialize)]
            struct Echo<'a> {
                command: &'a str,
                pred: &'a Path,
                gt: &'a Path,
                dontcare: Option<&'a Path>,
                tolerances: &'a [f64],
                csv: &'a Path,
                confusion: Option<&'a Path>,
                confusion_tolerance: f64,
                axis: String,
            }
            let dir = dir_of(&csv);
            create_dir_all(&dir)?;
            let echo = Echo {
                command: "eval",
                pred: &pred,
                gt: &gt,
                dontcare: dontcare.as_deref(),
                tolerances: &tolerances,
                csv: &csv,
                confusion: confusion.as_deref(),
                confusion_tolerance,
                axis: axis.to_string(),
            };
            write_json(&dir.join(EFFECTIVE_CONFIG_FILE), &echo)?;
            let p = Volume::read_rvol(&pred)?;
            let g = Volume::read_rvol(&gt)?;
            let dc = dontcare.as_ref().map(Volume::read_rvol).transpose()?;
            let report = distance_tolerant_prf(&p, &g, &tolerances, dc.as_ref())?;
            report.write_csv(&csv)?;
            if let Some(dir) = &confusion {
                export_confusion(&p, &gt, dontcare.as_ref(), confusion_tolerance, axis, dir)?;
            }
        }
        Command::Slices { input, axis, out } => {
            create_dir_all(&out)?;
            write_json(
                &out.join(EFFECTIVE_CONFIG_FILE),
                &serde_json::json!({ "command": "slices", "input": input, "axis": axis.to_string(), "normalization": "min_max" }),
            )?;
            let v = Volume::read_rvol(&input)?;
            let extent = v.spatial()[axis.index()];
            for i in 0..extent {
                v.export_slice(axis, i, out.join(format!("slice_{i:04}.pgm")), Normalization::MinMax)?;
            }
        }
    }
    Ok(())
}

