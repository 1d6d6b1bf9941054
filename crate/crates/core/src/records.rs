//! Append-only result records.
//!
//! Every experiment emits one JSON object per line. Records carry a schema
//! version, the subcommand that produced them, the resolved-config
//! fingerprint, and the seed, so any number can be traced back to the exact
//! run that produced it.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::Result;

/// Schema version of the record format.
pub const RECORD_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordKind {
    CleanAcc,
    RobustErr,
    QuantAcc,
    FilterNorms,
    PreactMean,
    CorruptionAcc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub version: u32,
    pub kind: RecordKind,
    /// Subcommand (or test harness) that produced the record.
    pub producer: String,
    /// SHA-256 hex fingerprint of the fully resolved configuration.
    pub config_fingerprint: String,
    pub seed: u64,
    /// Free-form keyed dimensions (model epsilon, attack delta, beta, ...).
    pub labels: std::collections::BTreeMap<String, String>,
    /// The measured values, keyed by metric name.
    pub values: std::collections::BTreeMap<String, f64>,
}

impl ResultRecord {
    pub fn new(
        kind: RecordKind,
        producer: impl Into<String>,
        config_fingerprint: impl Into<String>,
        seed: u64,
    ) -> Self {
        ResultRecord {
            version: RECORD_VERSION,
            kind,
            producer: producer.into(),
            config_fingerprint: config_fingerprint.into(),
            seed,
            labels: Default::default(),
            values: Default::default(),
        }
    }

    pub fn label(mut self, key: &str, value: impl ToString) -> Self {
        self.labels.insert(key.into(), value.to_string());
        self
    }

    pub fn value(mut self, key: &str, value: f64) -> Self {
        self.values.insert(key.into(), value);
        self
    }
}

/// Fingerprint of a resolved configuration: SHA-256 of its canonical
/// serialization, as lowercase hex.
pub fn config_fingerprint(resolved: &str) -> String {
    let mut h = Sha256::new();
    h.update(resolved.as_bytes());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Append-only JSON-lines sink.
pub struct RecordSink {
    file: std::fs::File,
}

impl RecordSink {
    /// Open (creating or appending to) the record file at `path`.
    pub fn open(path: &Path) -> Result<Self> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(RecordSink { file })
    }

    pub fn append(&mut self, record: &ResultRecord) -> Result<()> {
        let mut line = serde_json::to_string(record)?;
        line.push('\n');
        self.file.write_all(line.as_bytes())?;
        Ok(())
    }
}

/// Read every record back from a JSON-lines file.
pub fn read_records(path: &Path) -> Result<Vec<ResultRecord>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(line)?);
    }
    Ok(out)
}
