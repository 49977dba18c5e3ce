use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use evdeblur_core::config::KeyValues;
use evdeblur_core::image::write_all_atomic;
use serde::{Deserialize, Serialize};

use crate::args::Cli;

pub const MANIFEST_FILE: &str = "run.json";

/// Everything needed to rerun a command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub command: Cli,
    /// Configuration after defaults and overrides were applied.
    pub config: BTreeMap<String, String>,
    pub seed: u64,
    pub threads: usize,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub version: String,
    pub wall_time_s: f64,
}

impl RunManifest {
    pub fn resolved_config(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        for (k, v) in &self.config {
            kv.set(k, v);
        }
        kv
    }

    pub fn write(&self, path: &Path) -> anyhow::Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        write_all_atomic(path, text.as_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| evdeblur_core::Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| evdeblur_core::Error::Parse(format!("{}: {e}", path.display())).into())
    }
}

pub fn config_map(kv: &KeyValues) -> BTreeMap<String, String> {
    kv.keys()
        .map(|k| (k.to_string(), kv.get_str(k).unwrap_or_default().to_string()))
        .collect()
}

/// `<dir>/run.json` for directory outputs, `<file>.run.json` otherwise.
pub fn manifest_path(out: &Path, is_dir: bool) -> PathBuf {
    if is_dir {
        out.join(MANIFEST_FILE)
    } else {
        let mut name = out.file_name().unwrap_or_default().to_os_string();
        name.push(".");
        name.push(MANIFEST_FILE);
        out.with_file_name(name)
    }
}
