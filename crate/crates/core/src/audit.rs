//! Append-only JSONL audit trail.
//!
//! Every engine request — allowed or denied — produces exactly one line.
//! Lines are self-contained JSON objects so the log can be tailed, grepped,
//! and shipped without a reader that understands framing. Nothing ever
//! rewrites or truncates the file; the engine only appends.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use chrono::{SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// One audited request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    /// RFC 3339 UTC timestamp, e.g. `2026-08-14T09:30:00.123Z`.
    pub timestamp: String,
    pub user_id: String,
    /// What was attempted: `query`, `fetch`, `ingest`, `remove`, `train`,
    /// `policy_reload`.
    pub action: String,
    /// Inference mode for `query` actions, absent otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<String>,
    /// `"allowed"` or `"denied"`.
    pub decision: String,
    /// Ids of the documents or experts the request touched.
    #[serde(default)]
    pub resources: Vec<String>,
    /// Deny reasons (e.g. `ClearanceInsufficient`), empty when allowed.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub deny_reasons: Vec<String>,
}

impl AuditEntry {
    /// A new entry stamped with the current time; defaults to a denied
    /// decision with nothing attached so forgetting to fill it in fails
    /// closed in the log.
    pub fn now(user_id: impl Into<String>, action: impl Into<String>) -> AuditEntry {
        AuditEntry {
            timestamp: Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true),
            user_id: user_id.into(),
            action: action.into(),
            mode: None,
            decision: "denied".to_owned(),
            resources: Vec::new(),
            deny_reasons: Vec::new(),
        }
    }

    pub fn with_mode(mut self, mode: impl Into<String>) -> AuditEntry {
        self.mode = Some(mode.into());
        self
    }

    pub fn allowed(mut self, resources: Vec<String>) -> AuditEntry {
        self.decision = "allowed".to_owned();
        self.resources = resources;
        self.deny_reasons = Vec::new();
        self
    }

    pub fn denied(mut self, resources: Vec<String>, reasons: Vec<String>) -> AuditEntry {
        self.decision = "denied".to_owned();
        self.resources = resources;
        self.deny_reasons = reasons;
        self
    }

    pub fn is_allowed(&self) -> bool {
        self.decision == "allowed"
    }
}

#[derive(Debug, Error)]
pub enum AuditError {
    #[error("audit storage failure: {0}")]
    Storage(#[from] std::io::Error),
    #[error("audit line {line} malformed: {source}")]
    Malformed {
        line: usize,
        source: serde_json::Error,
    },
}

/// Appender over a JSONL file. Writes are serialized through a mutex and
/// each entry goes out as a single `write_all` of one line, so concurrent
/// requests cannot interleave bytes within a line.
#[derive(Debug)]
pub struct AuditLog {
    path: PathBuf,
    file: Mutex<File>,
}

impl AuditLog {
    /// Opens (or creates) the log for appending.
    pub fn open(path: impl Into<PathBuf>) -> Result<AuditLog, AuditError> {
        let path = path.into();
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(AuditLog {
            path,
            file: Mutex::new(file),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&self, entry: &AuditEntry) -> Result<(), AuditError> {
        let mut line = serde_json::to_string(entry).expect("audit entries always serialize");
        line.push('\n');
        let mut file = self.file.lock().expect("audit mutex poisoned");
        file.write_all(line.as_bytes())?;
        file.flush()?;
        Ok(())
    }

    /// The last `n` entries in file order. Reads the whole file; fine at
    /// the intended scale.
    pub fn tail(&self, n: usize) -> Result<Vec<AuditEntry>, AuditError> {
        let entries = self.read_all()?;
        let skip = entries.len().saturating_sub(n);
        Ok(entries.into_iter().skip(skip).collect())
    }

    pub fn read_all(&self) -> Result<Vec<AuditEntry>, AuditError> {
        // Hold the writer lock so a concurrent append cannot give us a
        // torn final line.
        let _guard = self.file.lock().expect("audit mutex poisoned");
        let file = File::open(&self.path)?;
        let reader = BufReader::new(file);
        let mut entries = Vec::new();
        for (index, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let entry = serde_json::from_str(&line).map_err(|source| AuditError::Malformed {
                line: index + 1,
                source,
            })?;
            entries.push(entry);
        }
        Ok(entries)
    }

    pub fn line_count(&self) -> Result<usize, AuditError> {
        Ok(self.read_all()?.len())
    }
}
