use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use crate::context_model::ContextEvent;

/// Append-only local event store: one event per line, UTF-8, fixed field order.
///
/// Optionally mirrored to a file; the in-memory copy is always authoritative.
#[derive(Debug, Default)]
pub struct EventStore {
    events: Vec<ContextEvent>,
    file: Option<(PathBuf, File)>,
}

impl EventStore {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens (or creates) a file-backed store, loading existing lines.
    pub fn open(path: impl AsRef<Path>) -> io::Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut events = Vec::new();
        if path.exists() {
            for line in BufReader::new(File::open(&path)?).lines() {
                let line = line?;
                if line.is_empty() {
                    continue;
                }
                let ev = ContextEvent::from_line(&line)
                    .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
                events.push(ev);
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(EventStore {
            events,
            file: Some((path, file)),
        })
    }

    pub fn append(&mut self, event: ContextEvent) -> io::Result<()> {
        if let Some((_, file)) = &mut self.file {
            let mut line = event.to_line();
            line.push('\n');
            file.write_all(line.as_bytes())?;
        }
        self.events.push(event);
        Ok(())
    }

    pub fn clear(&mut self) -> io::Result<()> {
        if let Some((_, file)) = &mut self.file {
            file.set_len(0)?;
            file.sync_data()?;
        }
        self.events.clear();
        Ok(())
    }

    pub fn events(&self) -> &[ContextEvent] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn path(&self) -> Option<&Path> {
        self.file.as_ref().map(|(p, _)| p.as_path())
    }

    /// The exact bytes of the store format.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for ev in &self.events {
            out.extend_from_slice(ev.to_line().as_bytes());
            out.push(b'\n');
        }
        out
    }
}
