//! Per-run bookkeeping: which stages ran, on what inputs, producing what.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageStatus {
    Completed,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageRecord {
    pub status: StageStatus,
    /// Content hash of everything the stage read.
    pub digest: String,
    /// Paths relative to the run directory.
    pub outputs: Vec<String>,
    pub wall_clock_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub config_digest: String,
    pub tool_version: String,
    pub stages: BTreeMap<String, StageRecord>,
}

impl RunManifest {
    pub fn new(config_digest: String) -> Self {
        RunManifest { config_digest, tool_version: env!("CARGO_PKG_VERSION").to_string(), stages: BTreeMap::new() }
    }

    /// Reads `dir/manifest.json`; a missing file is `Ok(None)`.
    pub fn load(dir: &Path) -> Result<Option<RunManifest>, CliError> {
        let path = dir.join(MANIFEST_FILE);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(CliError::Io(format!("{}: {e}", path.display()))),
        };
        serde_json::from_slice(&bytes).map(Some).map_err(|e| CliError::Manifest(format!("{}: {e}", path.display())))
    }

    /// Write-temp-then-rename, so readers never see a torn file.
    pub fn save(&self, dir: &Path) -> Result<(), CliError> {
        let io = |e: std::io::Error| CliError::Io(format!("{}: {e}", dir.display()));
        fs::create_dir_all(dir).map_err(io)?;
        let tmp = dir.join(format!(".{MANIFEST_FILE}.tmp"));
        let mut f = fs::File::create(&tmp).map_err(io)?;
        f.write_all(serde_json::to_string_pretty(self).expect("manifest serializes").as_bytes()).map_err(io)?;
        f.write_all(b"\n").map_err(io)?;
        f.sync_all().map_err(io)?;
        fs::rename(&tmp, dir.join(MANIFEST_FILE)).map_err(io)
    }

    pub fn is_fresh(&self, stage: &str, digest: &str) -> bool {
        self.stages.get(stage).is_some_and(|r| r.status == StageStatus::Completed && r.digest == digest)
    }

    pub fn outputs(&self, stage: &str) -> &[String] {
        self.stages.get(stage).map(|r| r.outputs.as_slice()).unwrap_or(&[])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(digest: &str, status: StageStatus) -> StageRecord {
        StageRecord { status, digest: digest.into(), outputs: vec!["a.csv".into()], wall_clock_s: 0.5, error: None }
    }

    #[test]
    fn round_trip_and_freshness() {
        let dir = tempfile::tempdir().unwrap();
        assert!(RunManifest::load(dir.path()).unwrap().is_none());
        let mut m = RunManifest::new("abc".into());
        m.stages.insert("train".into(), record("d1", StageStatus::Completed));
        m.stages.insert("taskmap".into(), record("d2", StageStatus::Failed));
        m.save(dir.path()).unwrap();
        let back = RunManifest::load(dir.path()).unwrap().unwrap();
        assert_eq!(back, m);
        assert!(back.is_fresh("train", "d1"));
        assert!(!back.is_fresh("train", "d9"));
        assert!(!back.is_fresh("taskmap", "d2"));
        assert!(!back.is_fresh("servo", "d1"));
        assert!(!dir.path().join(".manifest.json.tmp").exists());
    }

    #[test]
    fn corrupted_manifest_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join(MANIFEST_FILE), b"{\"config_digest\": 4").unwrap();
        assert!(matches!(RunManifest::load(dir.path()), Err(CliError::Manifest(_))));
    }
}
