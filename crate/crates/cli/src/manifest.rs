//! Run manifests written next to every output file.

use std::fs::File;
use std::io::{self, Read};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputDigest {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

/// Everything needed to rerun a command and check its inputs. Apart from
/// `created_unix`, identical inputs and flags give identical manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: Vec<String>,
    pub config: Value,
    pub inputs: Vec<InputDigest>,
    pub version: String,
    pub created_unix: u64,
}

pub fn digest_file(path: &Path) -> io::Result<InputDigest> {
    let mut file = File::open(path)?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    let mut bytes = 0u64;
    loop {
        let n = file.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
        bytes += n as u64;
    }
    Ok(InputDigest {
        path: path.display().to_string(),
        bytes,
        sha256: hex::encode(hasher.finalize()),
    })
}

impl RunManifest {
    pub fn new(config: Value, inputs: &[&Path]) -> io::Result<Self> {
        Ok(Self {
            command: std::env::args().collect(),
            config,
            inputs: inputs.iter().map(|p| digest_file(p)).collect::<io::Result<_>>()?,
            version: effo_core::VERSION.to_string(),
            created_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map_or(0, |d| d.as_secs()),
        })
    }

    pub fn write(&self, path: &Path) -> io::Result<()> {
        let mut text = serde_json::to_string_pretty(self).map_err(io::Error::from)?;
        text.push('\n');
        std::fs::write(path, text)
    }
}

/// `results.jsonl` -> `results.jsonl.manifest.json`.
pub fn manifest_path(output: &Path) -> PathBuf {
    let mut name = output.as_os_str().to_owned();
    name.push(".manifest.json");
    PathBuf::from(name)
}
