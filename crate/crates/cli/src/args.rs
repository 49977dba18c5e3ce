use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use evdeblur_core::edi::DEFAULT_SAMPLES;
use evdeblur_core::events::DEFAULT_BINS;
use serde::{Deserialize, Serialize};

#[derive(Parser, Clone, Debug, PartialEq, Serialize, Deserialize)]
#[command(name = "evdeblur", version, about = "Event-based image deblurring toolkit")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlobalArgs {
    /// Seed for every random choice in the run.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads for simulation and evaluation.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    /// `key = value` configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output file or directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Command {
    /// Render a synthetic dataset of blurry frames, events and sharp targets.
    Simulate,
    /// Convert an event file to a voxel grid checkpoint.
    Voxelize {
        events: PathBuf,
        #[arg(long, default_value_t = DEFAULT_BINS)]
        bins: usize,
    },
    /// Deblur one frame with the event double integral.
    Edi {
        #[arg(long)]
        blur: PathBuf,
        #[arg(long)]
        events: PathBuf,
        /// Contrast threshold.
        #[arg(long, conflicts_with = "estimate_c", required_unless_present = "estimate_c")]
        c: Option<f64>,
        /// Pick the contrast threshold by maximizing sharpness.
        #[arg(long)]
        estimate_c: bool,
        /// Reconstruction time inside the exposure.
        #[arg(long, conflicts_with = "mid", required_unless_present = "mid")]
        t: Option<f64>,
        /// Reconstruct the middle of the exposure.
        #[arg(long)]
        mid: bool,
        #[arg(long, default_value_t = DEFAULT_SAMPLES)]
        samples: usize,
    },
    /// Train the network on a manifest.
    Train {
        #[arg(long)]
        train: PathBuf,
        /// Held-out manifest evaluated after every epoch.
        #[arg(long)]
        val: Option<PathBuf>,
        /// Continue from `latest.edkp` in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Deblur one frame with trained weights.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        blur: PathBuf,
        #[arg(long)]
        events: PathBuf,
    },
    /// Score a method on every scene of a manifest.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, conflicts_with = "edi", required_unless_present = "edi")]
        checkpoint: Option<PathBuf>,
        /// Evaluate the double-integral baseline instead of a network.
        #[arg(long)]
        edi: bool,
        /// Contrast threshold for `--edi`; defaults to the manifest's.
        #[arg(long, requires = "edi", conflicts_with = "checkpoint")]
        c: Option<f64>,
        #[arg(long, default_value_t = DEFAULT_SAMPLES)]
        samples: usize,
    },
    /// Train and score one model per component row.
    Ablate {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        test: PathBuf,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        #[arg(conflicts_with = "all", required_unless_present = "all")]
        op: Option<String>,
        #[arg(long)]
        all: bool,
    },
    /// Rerun a recorded command from its run manifest.
    Replay { manifest: PathBuf },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Voxelize { .. } => "voxelize",
            Command::Edi { .. } => "edi",
            Command::Train { .. } => "train",
            Command::Infer { .. } => "infer",
            Command::Eval { .. } => "eval",
            Command::Ablate { .. } => "ablate",
            Command::Gradcheck { .. } => "gradcheck",
            Command::Replay { .. } => "replay",
        }
    }

    /// Whether `--out` names a directory rather than a file.
    pub fn writes_directory(&self) -> bool {
        matches!(self, Command::Simulate | Command::Train { .. })
    }

    /// Files and directories the command reads.
    pub fn inputs(&self) -> Vec<&Path> {
        match self {
            Command::Simulate | Command::Gradcheck { .. } => vec![],
            Command::Voxelize { events, .. } => vec![events],
            Command::Edi { blur, events, .. } | Command::Infer { blur, events, .. } => {
                let mut v: Vec<&Path> = vec![blur, events];
                if let Command::Infer { checkpoint, .. } = self {
                    v.insert(0, checkpoint);
                }
                v
            }
            Command::Train { train, val, .. } => std::iter::once(train.as_path()).chain(val.as_deref()).collect(),
            Command::Eval {
                manifest, checkpoint, ..
            } => std::iter::once(manifest.as_path())
                .chain(checkpoint.as_deref())
                .collect(),
            Command::Ablate { train, test } => vec![train, test],
            Command::Replay { manifest } => vec![manifest],
        }
    }

    fn paths_mut(&mut self) -> Vec<&mut PathBuf> {
        match self {
            Command::Simulate | Command::Gradcheck { .. } => vec![],
            Command::Voxelize { events, .. } => vec![events],
            Command::Edi { blur, events, .. } => vec![blur, events],
            Command::Train { train, val, .. } => std::iter::once(train).chain(val.as_mut()).collect(),
            Command::Infer {
                checkpoint,
                blur,
                events,
            } => vec![checkpoint, blur, events],
            Command::Eval {
                manifest, checkpoint, ..
            } => std::iter::once(manifest).chain(checkpoint.as_mut()).collect(),
            Command::Ablate { train, test } => vec![train, test],
            Command::Replay { manifest } => vec![manifest],
        }
    }
}

impl Cli {
    /// Rewrites every path argument relative to `cwd`, so the command can be
    /// replayed from any directory.
    pub fn absolutize(&mut self, cwd: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = cwd.join(&*p);
            }
        };
        self.global.config.as_mut().map(fix);
        self.global.out.as_mut().map(fix);
        for p in self.command.paths_mut() {
            fix(p);
        }
    }
}
