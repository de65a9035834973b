//! Output directory handling and the per-run manifest.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{CliError, CliResult};

pub const MANIFEST_FILE: &str = "run.json";

/// Record of one invocation, written to `<out>/run.json`.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: Option<PathBuf>,
    pub seed: u64,
    pub out: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub deterministic: bool,
    /// Unix seconds; omitted in deterministic mode so reruns are byte-identical.
    pub started: Option<f64>,
    pub finished: Option<f64>,
    pub status: String,
    pub exit_code: i32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub outputs: Vec<String>,
}

fn now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

/// An output directory owned by this run.
pub struct Run {
    pub manifest: RunManifest,
    dir: PathBuf,
}

impl Run {
    /// Claim `out`. An existing directory is refused unless `force`, and even
    /// then only if none of `inputs` lives inside it.
    pub fn start(
        command: &str,
        out: &Path,
        force: bool,
        inputs: &[&Path],
        config: Option<PathBuf>,
        seed: u64,
        checkpoint: Option<PathBuf>,
        deterministic: bool,
    ) -> CliResult<Self> {
        if out.exists() {
            if !force {
                return Err(CliError::Config(format!(
                    "output directory {} already exists; pass --force to replace it",
                    out.display()
                )));
            }
            let canon_out = out.canonicalize()?;
            for input in inputs {
                if let Ok(c) = input.canonicalize() {
                    if c.starts_with(&canon_out) {
                        return Err(CliError::Config(format!(
                            "input {} is inside the output directory; refusing to replace it",
                            input.display()
                        )));
                    }
                }
            }
            fs::remove_dir_all(out)?;
        }
        fs::create_dir_all(out)?;
        Ok(Self {
            manifest: RunManifest {
                command: command.into(),
                config,
                seed,
                out: out.to_path_buf(),
                checkpoint,
                deterministic,
                started: (!deterministic).then(now),
                finished: None,
                status: "running".into(),
                exit_code: 0,
                error: None,
                outputs: vec![],
            },
            dir: out.to_path_buf(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn record(&mut self, name: &str) {
        if !self.manifest.outputs.iter().any(|n| n == name) {
            self.manifest.outputs.push(name.to_string());
        }
    }

    pub fn write_bytes(&mut self, name: &str, bytes: &[u8]) -> CliResult<()> {
        let p = self.path(name);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(p, bytes)?;
        self.record(name);
        Ok(())
    }

    pub fn write_text(&mut self, name: &str, text: &str) -> CliResult<()> {
        self.write_bytes(name, text.as_bytes())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> CliResult<()> {
        let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Data(e.to_string()))?;
        self.write_text(name, &(text + "\n"))
    }

    pub fn write_obj(&mut self, name: &str, mesh: &deform_core::TriMesh) -> CliResult<()> {
        self.write_text(name, &mesh.to_obj_string())
    }

    /// Note a file written by library code directly into the directory.
    pub fn note_output(&mut self, name: &str) {
        self.record(name);
    }

    /// Write the manifest with the final status.
    pub fn finish(mut self, result: &CliResult<()>) -> CliResult<()> {
        self.manifest.finished = (!self.manifest.deterministic).then(now);
        match result {
            Ok(()) => self.manifest.status = "ok".into(),
            Err(e) => {
                self.manifest.status = "error".into();
                self.manifest.exit_code = e.exit_code();
                self.manifest.error = Some(e.to_string());
            }
        }
        let text = serde_json::to_string_pretty(&self.manifest).map_err(|e| CliError::Data(e.to_string()))?;
        fs::write(self.dir.join(MANIFEST_FILE), text + "\n")?;
        Ok(())
    }
}

pub fn read_json<T: DeserializeOwned>(path: &Path, what: &str) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Data(format!("{what} {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{what} {}: {e}", path.display())))
}

/// Parse a JSON config file; malformed or mistyped configs are config errors.
pub fn read_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> CliResult<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text =
                fs::read_to_string(p).map_err(|e| CliError::Config(format!("config {}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("config {}: {e}", p.display())))
        }
    }
}
