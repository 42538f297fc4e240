//! Run manifests: resolved config, seeds and SHA-256 digests of inputs and
//! outputs. Paths are relative to the run directory and nothing
//! time-dependent is recorded, so repeated runs write identical manifests.

use std::collections::BTreeMap;
use std::path::Path;

use fisherjscc::models::PowerAudit;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub command: String,
    pub tool_version: String,
    pub root_seed: u64,
    pub seeds: BTreeMap<String, u64>,
    pub config: RunConfig,
    /// Input role to digest.
    pub inputs: BTreeMap<String, String>,
    /// Output path (relative to the run directory) to digest.
    pub outputs: BTreeMap<String, String>,
    pub power_audit: AuditRecord,
    pub summary: BTreeMap<String, serde_json::Value>,
}

/// Encoded symbols checked against the power budget during this command.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub symbols_checked: u64,
    pub violations: u64,
}

impl AuditRecord {
    pub fn since(start: PowerAudit, end: PowerAudit) -> Self {
        AuditRecord {
            symbols_checked: end.symbols_checked - start.symbols_checked,
            violations: end.violations - start.violations,
        }
    }
}

impl Manifest {
    pub fn new(command: &str, cfg: &RunConfig) -> Self {
        let mut config = cfg.clone();
        // The run directory itself is not part of what was computed.
        config.out_dir = ".".into();
        Manifest {
            command: command.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            root_seed: cfg.seed,
            seeds: BTreeMap::new(),
            config,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            power_audit: AuditRecord {
                symbols_checked: 0,
                violations: 0,
            },
            summary: BTreeMap::new(),
        }
    }

    pub fn add_output(&mut self, out_dir: &Path, rel: &str) -> Result<(), CliError> {
        self.outputs.insert(rel.to_string(), sha256_file(&out_dir.join(rel))?);
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        std::fs::write(path, s)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
    }
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes =
        std::fs::read(path).map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}
