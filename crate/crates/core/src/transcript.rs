//! Append-only session transcripts, persisted as JSON lines.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryKind {
    Event,
    Action,
    PhaseChange,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TranscriptEntry {
    pub seq: u64,
    pub timestamp_ms: u64,
    pub kind: EntryKind,
    pub payload: Value,
}

#[derive(Debug, Error)]
pub enum TranscriptError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("line {line}: {reason} (last valid seq: {})", last_valid_seq.map_or("none".to_owned(), |s| s.to_string()))]
    Corrupt {
        line: usize,
        last_valid_seq: Option<u64>,
        reason: String,
    },
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Transcript {
    pub entries: Vec<TranscriptEntry>,
}

impl Transcript {
    pub fn push(&mut self, entry: TranscriptEntry) {
        self.entries.push(entry);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            // TranscriptEntry holds only string keys and finite numbers
            out.push_str(&serde_json::to_string(e).expect("transcript entry serializes"));
            out.push('\n');
        }
        out
    }

    /// Parses JSON lines, requiring `seq` to count up from 0 without gaps.
    pub fn from_jsonl(text: &str) -> Result<Self, TranscriptError> {
        let mut entries: Vec<TranscriptEntry> = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let last_valid_seq = entries.last().map(|e| e.seq);
            let entry: TranscriptEntry =
                serde_json::from_str(line).map_err(|e| TranscriptError::Corrupt {
                    line: i + 1,
                    last_valid_seq,
                    reason: e.to_string(),
                })?;
            let expected = entries.len() as u64;
            if entry.seq != expected {
                return Err(TranscriptError::Corrupt {
                    line: i + 1,
                    last_valid_seq,
                    reason: format!("expected seq {expected}, found {}", entry.seq),
                });
            }
            entries.push(entry);
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self, TranscriptError> {
        let text = fs::read_to_string(path).map_err(|source| TranscriptError::Io {
            path: path.to_owned(),
            source,
        })?;
        Self::from_jsonl(&text)
    }

    pub fn persist(&self, path: &Path) -> Result<(), TranscriptError> {
        let io_err = |source| TranscriptError::Io {
            path: path.to_owned(),
            source,
        };
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(io_err)?;
        }
        let mut f = fs::File::create(path).map_err(io_err)?;
        f.write_all(self.to_jsonl().as_bytes()).map_err(io_err)?;
        f.sync_all().map_err(io_err)
    }

    /// The session events recorded in this transcript, in order.
    pub fn events(&self) -> impl Iterator<Item = &TranscriptEntry> {
        self.entries.iter().filter(|e| e.kind == EntryKind::Event)
    }

    pub fn actions(&self) -> impl Iterator<Item = &TranscriptEntry> {
        self.entries.iter().filter(|e| e.kind == EntryKind::Action)
    }

    /// First `seq` where the two transcripts differ, if any.
    pub fn first_divergence(&self, other: &Transcript) -> Option<u64> {
        let n = self.entries.len().min(other.entries.len());
        (0..n)
            .find(|&i| self.entries[i] != other.entries[i])
            .or((self.entries.len() != other.entries.len()).then_some(n))
            .map(|i| i as u64)
    }
}

/// Path of a session's transcript within `dir`.
pub fn transcript_path(dir: &Path, session_id: &str) -> PathBuf {
    dir.join(format!("{session_id}.jsonl"))
}
