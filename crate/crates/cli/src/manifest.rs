use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use affordance_core::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::Command;

/// Everything needed to regenerate an artifact: the command as invoked
/// (paths made absolute) and the fully resolved config.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub command: Command,
    pub config: Config,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub seed: u64,
    pub tool_version: String,
    pub duration_secs: f64,
}

pub const RUN_SUFFIX: &str = ".run.json";

pub fn run_path(artifact: &Path) -> PathBuf {
    let mut s = artifact.as_os_str().to_owned();
    s.push(RUN_SUFFIX);
    PathBuf::from(s)
}

pub fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = PathBuf::from(tmp);
    let mut f = std::fs::File::create(&tmp).map_err(|e| io_err(&tmp, e))?;
    f.write_all(bytes).map_err(|e| io_err(&tmp, e))?;
    f.sync_all().map_err(|e| io_err(&tmp, e))?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

impl RunManifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_vec_pretty(self)?;
        text.push(b'\n');
        write_atomic(path, &text)
    }

    pub fn read(path: &Path) -> Result<RunManifest> {
        let text = std::fs::read(path).map_err(|e| io_err(path, e))?;
        serde_json::from_slice(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })
    }
}

/// Contents of every file under the given outputs, run manifests excluded.
pub fn snapshot(outputs: &[PathBuf]) -> Result<BTreeMap<PathBuf, Vec<u8>>> {
    let mut out = BTreeMap::new();
    for root in outputs {
        for entry in walkdir::WalkDir::new(root).sort_by_file_name() {
            let entry = entry.map_err(|e| Error::Io {
                path: root.clone(),
                source: e.into(),
            })?;
            let p = entry.path();
            if !entry.file_type().is_file() || p.to_string_lossy().ends_with(RUN_SUFFIX) {
                continue;
            }
            let bytes = std::fs::read(p).map_err(|e| io_err(p, e))?;
            out.insert(p.to_path_buf(), bytes);
        }
    }
    Ok(out)
}
