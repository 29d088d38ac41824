use std::path::{Path, PathBuf};
use std::time::Instant;

use prism_core::training::RunConfig;
use prism_core::{Error, Result};
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Provenance record written next to a command's outputs.
pub struct Manifest {
    command: String,
    config_path: Option<PathBuf>,
    config: RunConfig,
    seeds: Vec<u64>,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    started: Instant,
}

impl Manifest {
    pub fn new(command: impl Into<String>, config_path: Option<&Path>, config: &RunConfig, seeds: &[u64]) -> Self {
        Manifest {
            command: command.into(),
            config_path: config_path.map(Path::to_path_buf),
            config: config.clone(),
            seeds: seeds.to_vec(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            started: Instant::now(),
        }
    }

    pub fn input(&mut self, path: impl Into<PathBuf>) {
        self.inputs.push(path.into());
    }

    pub fn output(&mut self, path: impl Into<PathBuf>) {
        self.outputs.push(path.into());
    }

    fn digests(paths: &[PathBuf]) -> Result<Map<String, Value>> {
        let mut m = Map::new();
        for p in paths {
            m.insert(p.display().to_string(), Value::String(sha256_file(p)?));
        }
        Ok(m)
    }

    /// Writes `manifest_<command>.json` into `dir` and returns its path.
    pub fn write(self, dir: &Path) -> Result<PathBuf> {
        let config: Map<String, Value> = self
            .config
            .to_map()
            .into_iter()
            .map(|(k, v)| (k, Value::String(v)))
            .collect();
        let doc = json!({
            "command": self.command,
            "config_path": self.config_path.as_ref().map(|p| p.display().to_string()),
            "config": config,
            "seeds": self.seeds,
            "inputs": Self::digests(&self.inputs)?,
            "outputs": Self::digests(&self.outputs)?,
            "wall_clock_secs": self.started.elapsed().as_secs_f64(),
            "artifacts": self.outputs.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
        });
        let path = dir.join(format!("manifest_{}.json", self.command));
        let text = serde_json::to_string_pretty(&doc).expect("manifest is plain JSON");
        std::fs::write(&path, text + "\n").map_err(|e| io_err(&path, e))?;
        Ok(path)
    }
}
