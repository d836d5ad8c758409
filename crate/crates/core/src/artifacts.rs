//! Where run outputs go. The server writes every file through an
//! [`ArtifactSink`], which keeps its disk footprint auditable.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

pub trait ArtifactSink: Send + Sync {
    /// Appends `bytes` to the named artifact, creating it if needed.
    fn append(&self, name: &str, bytes: &[u8]) -> io::Result<()>;
    /// Replaces the named artifact atomically.
    fn replace(&self, name: &str, bytes: &[u8]) -> io::Result<()>;
}

/// Files under one directory.
#[derive(Debug, Clone)]
pub struct DirSink {
    dir: PathBuf,
}

impl DirSink {
    pub fn new(dir: impl Into<PathBuf>) -> io::Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path(&self, name: &str) -> io::Result<PathBuf> {
        if name.is_empty() || name.contains(['/', '\\']) || name.starts_with('.') {
            return Err(io::Error::new(
                io::ErrorKind::InvalidInput,
                format!("bad artifact name `{name}`"),
            ));
        }
        Ok(self.dir.join(name))
    }
}

impl ArtifactSink for DirSink {
    fn append(&self, name: &str, bytes: &[u8]) -> io::Result<()> {
        let mut f = OpenOptions::new().create(true).append(true).open(self.path(name)?)?;
        f.write_all(bytes)
    }

    fn replace(&self, name: &str, bytes: &[u8]) -> io::Result<()> {
        let path = self.path(name)?;
        let tmp = self.dir.join(format!(".{name}.tmp"));
        fs::write(&tmp, bytes)?;
        fs::rename(tmp, path)
    }
}

/// In-memory artifacts, for tests and embedding.
#[derive(Debug, Default)]
pub struct MemorySink {
    files: Mutex<BTreeMap<String, Vec<u8>>>,
}

impl MemorySink {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, name: &str) -> Option<Vec<u8>> {
        self.files.lock().unwrap().get(name).cloned()
    }

    pub fn names(&self) -> Vec<String> {
        self.files.lock().unwrap().keys().cloned().collect()
    }

    pub fn total_bytes(&self) -> usize {
        self.files.lock().unwrap().values().map(Vec::len).sum()
    }
}

impl ArtifactSink for MemorySink {
    fn append(&self, name: &str, bytes: &[u8]) -> io::Result<()> {
        self.files
            .lock()
            .unwrap()
            .entry(name.to_string())
            .or_default()
            .extend_from_slice(bytes);
        Ok(())
    }

    fn replace(&self, name: &str, bytes: &[u8]) -> io::Result<()> {
        self.files.lock().unwrap().insert(name.to_string(), bytes.to_vec());
        Ok(())
    }
}

/// One write as seen by a [`RecordingSink`].
#[derive(Debug, Clone, PartialEq)]
pub struct WriteRecord {
    pub name: String,
    pub bytes: Vec<u8>,
    pub append: bool,
}

/// Forwards to an inner sink and keeps a copy of every write.
pub struct RecordingSink<S> {
    inner: S,
    log: Mutex<Vec<WriteRecord>>,
}

impl<S: ArtifactSink> RecordingSink<S> {
    pub fn new(inner: S) -> Self {
        Self {
            inner,
            log: Mutex::new(Vec::new()),
        }
    }

    pub fn records(&self) -> Vec<WriteRecord> {
        self.log.lock().unwrap().clone()
    }

    pub fn inner(&self) -> &S {
        &self.inner
    }
}

impl<S: ArtifactSink> ArtifactSink for RecordingSink<S> {
    fn append(&self, name: &str, bytes: &[u8]) -> io::Result<()> {
        self.log.lock().unwrap().push(WriteRecord {
            name: name.to_string(),
            bytes: bytes.to_vec(),
            append: true,
        });
        self.inner.append(name, bytes)
    }

    fn replace(&self, name: &str, bytes: &[u8]) -> io::Result<()> {
        self.log.lock().unwrap().push(WriteRecord {
            name: name.to_string(),
            bytes: bytes.to_vec(),
            append: false,
        });
        self.inner.replace(name, bytes)
    }
}
