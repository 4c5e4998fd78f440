//! Append-only record of mutating requests, written before they are applied.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use chrono::{DateTime, Utc};
use lexmoe_core::error::Result;
use lexmoe_core::taxonomy::Role;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JournalEntry {
    pub seq: u64,
    pub at: DateTime<Utc>,
    pub role: Role,
    pub method: String,
    pub path: String,
    pub body: serde_json::Value,
}

pub struct Journal {
    path: PathBuf,
    inner: Mutex<(File, u64)>,
}

impl Journal {
    /// Opens `path` for appending; sequence numbers continue from the last
    /// entry already in the file.
    pub fn open(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir)?;
            }
        }
        let seq = match std::fs::read_to_string(path) {
            Ok(text) => text.lines().filter(|l| !l.trim().is_empty()).count() as u64,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => 0,
            Err(e) => return Err(e.into()),
        };
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            path: path.to_owned(),
            inner: Mutex::new((file, seq)),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Appends one entry and syncs it to disk.
    pub fn append(&self, role: Role, method: &str, path: &str, body: serde_json::Value) -> Result<u64> {
        let mut guard = self.inner.lock().unwrap_or_else(|p| p.into_inner());
        let (file, seq) = &mut *guard;
        let entry = JournalEntry {
            seq: *seq + 1,
            at: Utc::now(),
            role,
            method: method.to_owned(),
            path: path.to_owned(),
            body,
        };
        let mut line = serde_json::to_string(&entry)?;
        line.push('\n');
        file.write_all(line.as_bytes())?;
        file.sync_data()?;
        *seq += 1;
        Ok(*seq)
    }
}

pub fn read_journal(path: &Path) -> Result<Vec<JournalEntry>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}
