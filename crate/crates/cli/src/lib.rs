//! The `evdeblur` command: argument parsing, command execution and run
//! manifests.

pub mod args;
pub mod commands;
pub mod manifest;

use std::path::{Path, PathBuf};
use std::time::Instant;

use evdeblur_core::config::KeyValues;
use evdeblur_core::Error;

pub use args::{Cli, Command, GlobalArgs};
pub use commands::{CheckFailed, MODEL_CONFIG_FILE};
pub use manifest::{manifest_path, RunManifest, MANIFEST_FILE};

/// Default report file for `gradcheck`.
pub const GRADCHECK_REPORT: &str = "gradcheck.json";

/// Runs a parsed command and writes its run manifest. `replay` reruns the
/// recorded command, optionally redirected by `--out`.
pub fn run(mut cli: Cli) -> anyhow::Result<RunManifest> {
    let cwd = std::env::current_dir().map_err(|e| Error::io(".", e))?;
    cli.absolutize(&cwd);
    if let Command::Replay { manifest } = &cli.command {
        let recorded = RunManifest::read(manifest)?;
        let mut again = recorded.command.clone();
        if let Some(out) = cli.global.out.take() {
            again.global.out = Some(out);
        }
        again.global.config = None;
        log::info!("replaying {} from {}", recorded.subcommand, manifest.display());
        return run_with(again, Some(recorded.resolved_config()));
    }
    run_with(cli, None)
}

fn resolve_out(cli: &Cli) -> anyhow::Result<PathBuf> {
    match (&cli.global.out, &cli.command) {
        (Some(out), _) => Ok(out.clone()),
        (None, Command::Gradcheck { .. }) => Ok(std::env::current_dir()
            .map_err(|e| Error::io(".", e))?
            .join(GRADCHECK_REPORT)),
        (None, cmd) => Err(Error::InvalidArgument(format!("{} needs --out", cmd.name())).into()),
    }
}

fn check_not_an_input(cli: &Cli, out: &Path) -> anyhow::Result<()> {
    let manifest = manifest_path(out, cli.command.writes_directory());
    let clobbered = cli
        .command
        .inputs()
        .into_iter()
        .chain(cli.global.config.as_deref())
        .find(|p| *p == out || *p == manifest);
    match clobbered {
        Some(p) => Err(Error::InvalidArgument(format!("output would overwrite input {}", p.display())).into()),
        None => Ok(()),
    }
}

fn run_with(mut cli: Cli, preset: Option<KeyValues>) -> anyhow::Result<RunManifest> {
    let start = Instant::now();
    let out = resolve_out(&cli)?;
    cli.global.out = Some(out.clone());
    check_not_an_input(&cli, &out)?;
    let kv = match (preset, &cli.global.config) {
        (Some(kv), _) => kv,
        (None, Some(path)) => KeyValues::read(path)?,
        (None, None) => KeyValues::new(),
    };
    if let Some(parent) = out.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let outcome = commands::execute(&cli, kv, &out)?;
    let mut inputs: Vec<PathBuf> = cli.command.inputs().into_iter().map(Path::to_path_buf).collect();
    inputs.extend(cli.global.config.clone());
    let m = RunManifest {
        subcommand: cli.command.name().to_string(),
        config: manifest::config_map(&outcome.config),
        seed: cli.global.seed,
        threads: cli.global.threads,
        inputs,
        outputs: outcome.outputs,
        version: env!("CARGO_PKG_VERSION").to_string(),
        wall_time_s: start.elapsed().as_secs_f64(),
        command: cli,
    };
    let path = manifest_path(&out, m.command.command.writes_directory());
    m.write(&path)?;
    log::info!("run manifest {}", path.display());
    match outcome.failure {
        Some(msg) => Err(CheckFailed(msg).into()),
        None => Ok(m),
    }
}

/// Machine-parsable class of an error returned by [`run`].
pub fn error_class(e: &anyhow::Error) -> &'static str {
    if let Some(e) = e.downcast_ref::<Error>() {
        e.class()
    } else if e.is::<CheckFailed>() {
        "check-failed"
    } else if e.is::<clap::Error>() {
        "usage"
    } else if e.is::<serde_json::Error>() {
        "parse"
    } else if e.is::<std::io::Error>() {
        "io"
    } else {
        "internal"
    }
}

/// The single line printed for a failed run.
pub fn error_line(e: &anyhow::Error) -> String {
    let mut msg = String::new();
    for cause in e.chain().map(|c| c.to_string()) {
        // Some errors already embed their source in their own message.
        if !msg.contains(&cause) {
            if !msg.is_empty() {
                msg.push_str(": ");
            }
            msg.push_str(&cause);
        }
    }
    format!("error:{}: {}", error_class(e), msg.replace('\n', " "))
}
