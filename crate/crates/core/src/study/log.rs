use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::engine::Event;
use super::StudyError;

pub const LOG_FILE: &str = "events.jsonl";
pub const SNAPSHOT_FILE: &str = "snapshot.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoggedEvent {
    /// 1-based, contiguous.
    pub seq: u64,
    /// Milliseconds since the Unix epoch.
    pub at: i64,
    pub event: Event,
}

/// Derived state as of event `seq`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub seq: u64,
    pub pool_digest: String,
    pub state: serde_json::Value,
}

/// Append-only event log, in memory or as JSON lines in a directory.
#[derive(Debug)]
pub struct EventStore {
    events: Vec<LoggedEvent>,
    snapshot: Option<Snapshot>,
    dir: Option<(PathBuf, File)>,
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> StudyError {
    StudyError::Log(format!("{}: {e}", path.display()))
}

impl EventStore {
    pub fn in_memory() -> Self {
        Self { events: Vec::new(), snapshot: None, dir: None }
    }

    /// Validates an existing event sequence and keeps it in memory.
    pub fn from_events(events: Vec<LoggedEvent>) -> Result<Self, StudyError> {
        for (i, e) in events.iter().enumerate() {
            if e.seq != i as u64 + 1 {
                return Err(StudyError::Log(format!("event {} has sequence number {}", i + 1, e.seq)));
            }
        }
        Ok(Self { events, snapshot: None, dir: None })
    }

    /// Opens or creates the log in `dir`. A torn final line, left by a crash
    /// mid-write, is dropped; any other unreadable line is an error.
    pub fn open_dir(dir: impl AsRef<Path>) -> Result<Self, StudyError> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        let path = dir.join(LOG_FILE);
        let mut events = Vec::new();
        let mut good_len = 0u64;
        if path.exists() {
            let raw = fs::read(&path).map_err(|e| io_err(&path, e))?;
            let mut offset = 0usize;
            let reader = BufReader::new(raw.as_slice());
            for (n, line) in reader.split(b'\n').enumerate() {
                let line = line.map_err(|e| io_err(&path, e))?;
                let complete = offset + line.len() < raw.len();
                offset += line.len() + 1;
                if line.iter().all(u8::is_ascii_whitespace) {
                    if complete {
                        good_len = offset as u64;
                    }
                    continue;
                }
                if !complete {
                    break;
                }
                match serde_json::from_slice::<LoggedEvent>(&line) {
                    Ok(e) => {
                        if e.seq != events.len() as u64 + 1 {
                            return Err(io_err(&path, format!("line {}: sequence number {} out of order", n + 1, e.seq)));
                        }
                        events.push(e);
                        good_len = offset as u64;
                    }
                    Err(e) => return Err(io_err(&path, format!("line {}: {e}", n + 1))),
                }
            }
            if good_len < raw.len() as u64 {
                let f = OpenOptions::new().write(true).open(&path).map_err(|e| io_err(&path, e))?;
                f.set_len(good_len).map_err(|e| io_err(&path, e))?;
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(&path).map_err(|e| io_err(&path, e))?;
        let snap_path = dir.join(SNAPSHOT_FILE);
        // A damaged snapshot only costs a full replay.
        let snapshot = fs::read(&snap_path).ok().and_then(|b| serde_json::from_slice(&b).ok());
        Ok(Self { events, snapshot, dir: Some((dir.to_path_buf(), file)) })
    }

    pub fn events(&self) -> &[LoggedEvent] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn is_persistent(&self) -> bool {
        self.dir.is_some()
    }

    pub fn snapshot(&self) -> Option<&Snapshot> {
        self.snapshot.as_ref()
    }

    /// Appends and, for a directory store, syncs before returning the
    /// sequence number.
    pub fn append(&mut self, at: i64, event: Event) -> Result<u64, StudyError> {
        let logged = LoggedEvent { seq: self.events.len() as u64 + 1, at, event };
        if let Some((dir, file)) = &mut self.dir {
            let mut line = serde_json::to_vec(&logged).map_err(|e| StudyError::Log(e.to_string()))?;
            line.push(b'\n');
            file.write_all(&line).and_then(|_| file.sync_data()).map_err(|e| io_err(dir, e))?;
        }
        self.events.push(logged);
        Ok(self.events.len() as u64)
    }

    /// Writes the snapshot atomically (temporary file, then rename).
    pub fn write_snapshot(&mut self, snapshot: &Snapshot) -> Result<(), StudyError> {
        if let Some((dir, _)) = &self.dir {
            let tmp = dir.join(format!("{SNAPSHOT_FILE}.tmp"));
            let bytes = serde_json::to_vec(snapshot).map_err(|e| StudyError::Log(e.to_string()))?;
            let mut f = File::create(&tmp).map_err(|e| io_err(&tmp, e))?;
            f.write_all(&bytes).and_then(|_| f.sync_all()).map_err(|e| io_err(&tmp, e))?;
            fs::rename(&tmp, dir.join(SNAPSHOT_FILE)).map_err(|e| io_err(dir, e))?;
        }
        self.snapshot = Some(snapshot.clone());
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(cycle: u32) -> Event {
        Event::CycleClosed { cycle }
    }

    #[test]
    fn round_trip_and_torn_tail() {
        let dir = tempfile::tempdir().unwrap();
        {
            let mut s = EventStore::open_dir(dir.path()).unwrap();
            s.append(10, ev(1)).unwrap();
            s.append(20, ev(2)).unwrap();
        }
        let path = dir.path().join(LOG_FILE);
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        f.write_all(br#"{"seq":3,"at":30,"ev"#).unwrap();
        drop(f);
        let mut s = EventStore::open_dir(dir.path()).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s.events()[1].at, 20);
        s.append(40, ev(3)).unwrap();
        let s = EventStore::open_dir(dir.path()).unwrap();
        assert_eq!(s.events().iter().map(|e| e.seq).collect::<Vec<_>>(), vec![1, 2, 3]);
    }

    #[test]
    fn corrupt_middle_line_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join(LOG_FILE), "{\"seq\":1,\"at\":0,\"event\":{\"type\":\"cycle_closed\",\"cycle\":1}}\nnot json\n{}\n")
            .unwrap();
        let err = EventStore::open_dir(dir.path()).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn snapshot_persists() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = EventStore::open_dir(dir.path()).unwrap();
        let snap = Snapshot { seq: 0, pool_digest: "x".into(), state: serde_json::json!({}) };
        s.write_snapshot(&snap).unwrap();
        assert_eq!(EventStore::open_dir(dir.path()).unwrap().snapshot(), Some(&snap));
    }
}
