//! Output files and the run manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const MANIFEST: &str = "manifest.json";
pub const MANIFEST_SCHEMA: &str = "epigam.manifest.v1";

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct FileHash {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

pub fn hash_file(path: &Path) -> Result<FileHash, CliError> {
    let data = fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(FileHash {
        path: path.display().to_string(),
        bytes: data.len() as u64,
        sha256: format!("{:x}", Sha256::digest(&data)),
    })
}

/// Everything that determines a run's outputs.
#[derive(Debug, Clone, Serialize, PartialEq, Default)]
pub struct RunConfig {
    pub command: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub inputs: BTreeMap<String, String>,
    pub parameters: BTreeMap<String, serde_json::Value>,
    pub out: String,
}

impl RunConfig {
    pub fn new(command: &str, out: &Path) -> Self {
        Self {
            command: command.into(),
            out: out.display().to_string(),
            ..Default::default()
        }
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn input(mut self, role: &str, path: &Path) -> Self {
        self.inputs.insert(role.into(), path.display().to_string());
        self
    }

    pub fn param(mut self, name: &str, value: impl Serialize) -> Self {
        self.parameters
            .insert(name.into(), serde_json::to_value(value).expect("serializable parameter"));
        self
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub schema: &'static str,
    pub tool: &'static str,
    pub version: &'static str,
    pub library_version: &'static str,
    pub rng: &'static str,
    pub config: RunConfig,
    pub inputs: Vec<FileHash>,
    pub outputs: Vec<FileHash>,
    pub diagnostics: serde_json::Value,
}

/// Output directory that records every file it writes.
pub struct Outputs {
    dir: PathBuf,
    written: Vec<String>,
}

impl Outputs {
    pub fn create(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            written: Vec::new(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn record(&mut self, name: &str) {
        if !self.written.iter().any(|w| w == name) {
            self.written.push(name.into());
        }
    }

    pub fn csv<T: Serialize>(&mut self, name: &str, rows: &[T]) -> Result<(), CliError> {
        self.csv_with_header(name, rows, None)
    }

    /// Writes `rows`; `header` is used when `rows` is empty.
    pub fn csv_with_header<T: Serialize>(&mut self, name: &str, rows: &[T], header: Option<&[&str]>) -> Result<(), CliError> {
        let path = self.path(name);
        let mut w = csv::Writer::from_path(&path)?;
        if rows.is_empty() {
            if let Some(h) = header {
                w.write_record(h)?;
            }
        }
        for r in rows {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| CliError::io(&path, e))?;
        self.record(name);
        Ok(())
    }

    pub fn json<T: Serialize + ?Sized>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let path = self.path(name);
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
        self.record(name);
        Ok(())
    }

    /// Hashes inputs and outputs and writes the manifest last.
    pub fn finish(mut self, config: RunConfig, diagnostics: serde_json::Value) -> Result<Manifest, CliError> {
        let inputs = config
            .inputs
            .values()
            .map(|p| hash_file(Path::new(p)))
            .collect::<Result<Vec<_>, _>>()?;
        let outputs = self
            .written
            .iter()
            .map(|n| {
                let mut h = hash_file(&self.path(n))?;
                h.path = n.clone();
                Ok(h)
            })
            .collect::<Result<Vec<_>, CliError>>()?;
        let manifest = Manifest {
            schema: MANIFEST_SCHEMA,
            tool: "epigam",
            version: env!("CARGO_PKG_VERSION"),
            library_version: epigam::VERSION,
            rng: epigam::rng::RNG_SCHEME,
            config,
            inputs,
            outputs,
            diagnostics,
        };
        self.json(MANIFEST, &manifest)?;
        Ok(manifest)
    }
}
