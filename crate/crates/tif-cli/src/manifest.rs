//! Run manifests: every command writes exactly one `manifest.json` into its
//! output directory, pinning the effective seed, fingerprints of its inputs
//! and the list of artifacts it produced. Fingerprints recompute identically
//! from the same inputs; only the timestamp varies between reruns.

use std::path::Path;

use serde::Serialize;

use tif_core::Result;

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    /// Whether the seed came from a flag or the config file.
    pub seed_source: String,
    pub config_fingerprint: String,
    pub dataset_fingerprint: String,
    pub outputs: Vec<String>,
    pub created_unix: u64,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, seed_from_flag: bool) -> Self {
        RunManifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            seed_source: if seed_from_flag { "flag" } else { "config" }.to_string(),
            config_fingerprint: String::new(),
            dataset_fingerprint: String::new(),
            outputs: Vec::new(),
            created_unix: std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        }
    }

    pub fn with_config_bytes(mut self, bytes: &[u8]) -> Self {
        self.config_fingerprint = format!("{:016x}", tif_core::util::fnv64(bytes));
        self
    }

    pub fn with_dataset_dir(mut self, dir: &Path) -> Result<Self> {
        self.dataset_fingerprint =
            format!("{:016x}", tif_core::data::dataset_fingerprint(dir)?);
        Ok(self)
    }

    pub fn add_output(&mut self, name: &str) {
        self.outputs.push(name.to_string());
    }

    pub fn write(&self, out_dir: &Path) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        std::fs::write(out_dir.join("manifest.json"), bytes)?;
        Ok(())
    }
}
