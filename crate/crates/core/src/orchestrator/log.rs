use std::collections::{BTreeMap, HashSet};
use std::fs::OpenOptions;
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use super::session::SessionEvent;

#[derive(Debug, thiserror::Error)]
pub enum LogError {
    #[error("I/O error on session log {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("session log {path} line {line}: {message}")]
    Malformed {
        path: String,
        line: usize,
        message: String,
    },
    #[error("invalid session id `{0}`")]
    InvalidId(String),
}

/// Append-only, per-session event storage.
pub trait EventLog: Send + Sync {
    /// Durably append one event. Either the whole event is stored or none
    /// of it is.
    fn append(&self, event: &SessionEvent) -> Result<(), LogError>;

    /// All events of a session in order; empty for an unknown session.
    fn read(&self, session_id: &str) -> Result<Vec<SessionEvent>, LogError>;

    fn session_ids(&self) -> Result<Vec<String>, LogError>;
}

#[derive(Debug, Default)]
pub struct MemoryLog {
    sessions: Mutex<BTreeMap<String, Vec<SessionEvent>>>,
}

impl MemoryLog {
    pub fn new() -> Self {
        Self::default()
    }
}

impl EventLog for MemoryLog {
    fn append(&self, event: &SessionEvent) -> Result<(), LogError> {
        self.sessions
            .lock()
            .expect("log lock")
            .entry(event.session_id.clone())
            .or_default()
            .push(event.clone());
        Ok(())
    }

    fn read(&self, session_id: &str) -> Result<Vec<SessionEvent>, LogError> {
        Ok(self
            .sessions
            .lock()
            .expect("log lock")
            .get(session_id)
            .cloned()
            .unwrap_or_default())
    }

    fn session_ids(&self) -> Result<Vec<String>, LogError> {
        Ok(self
            .sessions
            .lock()
            .expect("log lock")
            .keys()
            .cloned()
            .collect())
    }
}

/// `<dir>/<session_id>.jsonl`, one event per line, fsynced per append.
///
/// A line cut short by a crash was never acknowledged; reads skip it and
/// the next append truncates it away.
#[derive(Debug)]
pub struct JsonlLog {
    dir: PathBuf,
    repaired: Mutex<HashSet<String>>,
}

impl JsonlLog {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, LogError> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(|source| LogError::Io {
            path: dir.display().to_string(),
            source,
        })?;
        Ok(Self {
            dir,
            repaired: Mutex::new(HashSet::new()),
        })
    }

    pub fn path(&self, session_id: &str) -> Result<PathBuf, LogError> {
        let valid = !session_id.is_empty()
            && session_id
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
            && !session_id.starts_with('.');
        if !valid {
            return Err(LogError::InvalidId(session_id.to_string()));
        }
        Ok(self.dir.join(format!("{session_id}.jsonl")))
    }

    fn io(path: &Path) -> impl FnOnce(std::io::Error) -> LogError + '_ {
        move |source| LogError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

impl EventLog for JsonlLog {
    fn append(&self, event: &SessionEvent) -> Result<(), LogError> {
        let path = self.path(&event.session_id)?;
        let mut file = OpenOptions::new()
            .create(true)
            .read(true)
            .append(true)
            .open(&path)
            .map_err(Self::io(&path))?;
        let mut repaired = self.repaired.lock().expect("repair lock");
        if !repaired.contains(&event.session_id) {
            let mut text = Vec::new();
            file.read_to_end(&mut text).map_err(Self::io(&path))?;
            let keep = text.iter().rposition(|b| *b == b'\n').map_or(0, |i| i + 1);
            if keep < text.len() {
                tracing::warn!(path = %path.display(), "dropping torn tail of session log");
                file.set_len(keep as u64).map_err(Self::io(&path))?;
                file.seek(SeekFrom::End(0)).map_err(Self::io(&path))?;
            }
            repaired.insert(event.session_id.clone());
        }
        drop(repaired);
        let mut line = serde_json::to_vec(event).expect("events serialize");
        line.push(b'\n');
        file.write_all(&line).map_err(Self::io(&path))?;
        file.sync_data().map_err(Self::io(&path))?;
        Ok(())
    }

    fn read(&self, session_id: &str) -> Result<Vec<SessionEvent>, LogError> {
        let path = self.path(session_id)?;
        let text = match std::fs::read_to_string(&path) {
            Ok(text) => text,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(Self::io(&path)(e)),
        };
        let complete = text.rfind('\n').map_or("", |i| &text[..=i]);
        complete
            .lines()
            .enumerate()
            .filter(|(_, line)| !line.trim().is_empty())
            .map(|(i, line)| {
                serde_json::from_str(line).map_err(|e| LogError::Malformed {
                    path: path.display().to_string(),
                    line: i + 1,
                    message: e.to_string(),
                })
            })
            .collect()
    }

    fn session_ids(&self) -> Result<Vec<String>, LogError> {
        let mut ids = Vec::new();
        for entry in std::fs::read_dir(&self.dir).map_err(Self::io(&self.dir))? {
            let entry = entry.map_err(Self::io(&self.dir))?;
            let name = entry.file_name();
            if let Some(id) = name.to_str().and_then(|n| n.strip_suffix(".jsonl")) {
                ids.push(id.to_string());
            }
        }
        ids.sort();
        Ok(ids)
    }
}
