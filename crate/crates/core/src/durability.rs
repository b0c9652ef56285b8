//! Append-only change log: `changes.log`, one wire-form change per line,
//! genesis first, always in an order where deps precede dependents.

use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use crate::change::Change;
use crate::engine::{ApplyOutcome, Document};
use crate::kv::RevisionMode;

pub const LOG_FILE: &str = "changes.log";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FsyncPolicy {
    /// Flush to stable storage after every appended change.
    PerChange,
    /// Leave flushing to the OS.
    Never,
}

#[derive(Debug)]
pub struct ChangeLog {
    path: PathBuf,
    file: File,
    fsync: FsyncPolicy,
}

/// Outcome of loading a log directory.
#[derive(Debug)]
pub struct Loaded {
    pub doc: Document,
    /// Lines dropped at the first corrupt or torn line.
    pub truncated_lines: usize,
}

impl ChangeLog {
    /// Opens (or creates) the log in `dir` and replays it. Everything from the
    /// first unreadable line on is cut off so later appends stay well-formed.
    pub fn open(dir: &Path, mode: RevisionMode, fsync: FsyncPolicy) -> io::Result<(ChangeLog, Loaded)> {
        fs::create_dir_all(dir)?;
        let path = dir.join(LOG_FILE);
        let existing = match fs::read(&path) {
            Ok(bytes) => bytes,
            Err(e) if e.kind() == io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(e),
        };
        let (doc, good_len, truncated_lines) = replay(&existing, mode)?;
        let file = OpenOptions::new().create(true).read(true).append(true).open(&path)?;
        if good_len < existing.len() {
            log::warn!(
                "{}: dropping {} unreadable line(s) after byte {}",
                path.display(),
                truncated_lines,
                good_len
            );
            file.set_len(good_len as u64)?;
        }
        let mut log = ChangeLog { path, file, fsync };
        if good_len == 0 {
            let genesis = doc.changes().next().expect("genesis is always stored").clone();
            log.append(&genesis)?;
        }
        Ok((log, Loaded { doc, truncated_lines }))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&mut self, change: &Change) -> io::Result<()> {
        let mut line = change.to_wire_json();
        line.push('\n');
        self.file.write_all(line.as_bytes())?;
        if self.fsync == FsyncPolicy::PerChange {
            self.file.sync_data()?;
        }
        Ok(())
    }
}

/// Replays log bytes. Returns the document, the byte length of the valid
/// prefix and how many lines were rejected. A readable genesis line from the
/// other revision mode is an error rather than corruption.
fn replay(bytes: &[u8], mode: RevisionMode) -> io::Result<(Document, usize, usize)> {
    let mut doc = Document::new(mode);
    if let Some(first) = bytes.split(|b| *b == b'\n').next() {
        let parsed = std::str::from_utf8(first).ok().and_then(|t| Change::from_wire_json(t).ok());
        if let Some(change) = parsed {
            if change.is_genesis() && change.hash() != doc.genesis_hash() {
                return Err(io::Error::new(
                    io::ErrorKind::InvalidData,
                    format!("change log was written by a {} mode cluster", other_mode(mode)),
                ));
            }
        }
    }
    let mut offset = 0;
    let mut line_no = 0;
    while offset < bytes.len() {
        let Some(nl) = bytes[offset..].iter().position(|b| *b == b'\n') else { break };
        let line = &bytes[offset..offset + nl];
        line_no += 1;
        if !accept_line(&mut doc, line, line_no == 1) {
            log::warn!("change log line {line_no} is unreadable");
            break;
        }
        offset += nl + 1;
    }
    let rest = &bytes[offset..];
    let dropped = rest.split(|b| *b == b'\n').filter(|l| !l.is_empty()).count();
    Ok((doc, offset, dropped))
}

fn other_mode(mode: RevisionMode) -> RevisionMode {
    match mode {
        RevisionMode::Counter => RevisionMode::Hash,
        RevisionMode::Hash => RevisionMode::Counter,
    }
}

fn accept_line(doc: &mut Document, line: &[u8], first: bool) -> bool {
    let Ok(text) = std::str::from_utf8(line) else { return false };
    let Ok(change) = Change::from_wire_json(text) else { return false };
    if first {
        return change.hash() == doc.genesis_hash();
    }
    matches!(doc.apply_remote(change), Ok(ApplyOutcome::Applied))
}

/// Writes `doc` as a fresh log file at `path`.
pub fn save(doc: &Document, path: &Path) -> io::Result<()> {
    let mut out = String::new();
    for change in doc.changes() {
        out.push_str(&change.to_wire_json());
        out.push('\n');
    }
    fs::write(path, out)
}
