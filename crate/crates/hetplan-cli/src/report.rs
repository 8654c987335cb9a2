use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};

use hetplan::{Error, Result};

#[derive(Debug, Clone, Serialize)]
pub struct FileRecord {
    pub path: String,
    pub sha256: String,
}

impl FileRecord {
    fn new(path: &Path, bytes: &[u8]) -> Self {
        FileRecord {
            path: path.display().to_string(),
            sha256: hex::encode(Sha256::digest(bytes)),
        }
    }
}

/// One record per invocation, written to `--report` or stderr.
#[derive(Debug, Serialize)]
pub struct RunReport {
    pub command: String,
    pub exit_code: i32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub inputs: Vec<FileRecord>,
    pub outputs: Vec<FileRecord>,
    pub wall_ms: f64,
    pub warnings: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub details: serde_json::Value,
}

/// Tracks files read and written while a command runs.
pub struct Ctx {
    started: Instant,
    pub command: String,
    pub seed: Option<u64>,
    pub inputs: Vec<FileRecord>,
    pub outputs: Vec<FileRecord>,
    pub warnings: Vec<String>,
    pub details: serde_json::Map<String, serde_json::Value>,
}

impl Ctx {
    pub fn new(command: &str) -> Self {
        Ctx {
            started: Instant::now(),
            command: command.to_string(),
            seed: None,
            inputs: Vec::new(),
            outputs: Vec::new(),
            warnings: Vec::new(),
            details: serde_json::Map::new(),
        }
    }

    pub fn read(&mut self, path: &Path) -> Result<String> {
        let bytes = std::fs::read(path).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })?;
        self.inputs.push(FileRecord::new(path, &bytes));
        String::from_utf8(bytes).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
    }

    pub fn write(&mut self, path: &Path, content: &str) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|source| Error::Io {
                path: dir.display().to_string(),
                source,
            })?;
        }
        std::fs::write(path, content).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })?;
        self.outputs.push(FileRecord::new(path, content.as_bytes()));
        Ok(())
    }

    pub fn warn(&mut self, msg: impl Into<String>) {
        let msg = msg.into();
        eprintln!("warning: {msg}");
        self.warnings.push(msg);
    }

    pub fn detail(&mut self, key: &str, value: impl Serialize) {
        let v = serde_json::to_value(value).expect("detail serializes");
        self.details.insert(key.to_string(), v);
    }

    pub fn finish(self, exit_code: i32, error: Option<String>, target: Option<&PathBuf>) {
        let report = RunReport {
            command: self.command,
            exit_code,
            seed: self.seed,
            inputs: self.inputs,
            outputs: self.outputs,
            wall_ms: self.started.elapsed().as_secs_f64() * 1e3,
            warnings: self.warnings,
            error,
            details: serde_json::Value::Object(self.details),
        };
        match target {
            Some(path) => {
                let text = serde_json::to_string_pretty(&report).expect("report serializes");
                if let Err(e) = std::fs::write(path, text + "\n") {
                    eprintln!("error: cannot write report {}: {e}", path.display());
                }
            }
            None => eprintln!("{}", serde_json::to_string(&report).expect("report serializes")),
        }
    }
}
