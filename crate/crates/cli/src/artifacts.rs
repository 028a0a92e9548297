use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use osic_core::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST: &str = "artifacts.json";

#[derive(Debug, Default, Serialize, Deserialize)]
struct Manifest {
    /// Relative path to sha256 and the command that wrote it.
    files: BTreeMap<String, Entry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    command: String,
    sha256: String,
    bytes: u64,
}

/// Output directory of one command. Every file written through it is listed
/// in `artifacts.json`, merged with entries from earlier commands.
pub struct OutDir {
    dir: PathBuf,
    command: &'static str,
    written: Vec<PathBuf>,
}

impl OutDir {
    pub fn create(dir: &Path, command: &'static str) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            command,
            written: Vec::new(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let p = self.path(name);
        std::fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
        self.written.push(p.clone());
        Ok(p)
    }

    /// Records a file some other writer already put under the directory.
    pub fn record(&mut self, path: PathBuf) {
        self.written.push(path);
    }

    pub fn finish(self) -> Result<()> {
        let path = self.dir.join(MANIFEST);
        let mut manifest: Manifest = match std::fs::read(&path) {
            Ok(bytes) => serde_json::from_slice(&bytes)
                .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Manifest::default(),
            Err(e) => return Err(Error::io(&path, e)),
        };
        for p in &self.written {
            let bytes = std::fs::read(p).map_err(|e| Error::io(p, e))?;
            let rel = p.strip_prefix(&self.dir).unwrap_or(p);
            manifest.files.insert(
                rel.to_string_lossy().replace('\\', "/"),
                Entry {
                    command: self.command.to_string(),
                    sha256: hex(&Sha256::digest(&bytes)),
                    bytes: bytes.len() as u64,
                },
            );
        }
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
