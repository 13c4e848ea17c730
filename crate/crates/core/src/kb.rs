//! Append-only knowledge base on disk.
//!
//! Layout of a KB directory:
//!
//! ```text
//! index.json            key -> entry file names, oldest first
//! entries/NNNNNNNN.json one immutable record: key, origin, timestamp, payload
//! tables/NNNNNNNN.xplt  compressed lineage tables referenced by entries
//! lock                  present while a writer holds the store
//! ```
//!
//! Every file is written to a temporary name and renamed into place.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lineage::{compress_table, decompress_table, CompressedTable, LineageError, LineageTable, Origin};
use crate::tags::ConstraintTag;

#[derive(Debug, Error)]
pub enum KbError {
    #[error("corrupt knowledge base file {path}: {reason}")]
    CorruptStore { path: PathBuf, reason: String },
    #[error("knowledge base {0} is locked by another writer")]
    Locked(PathBuf),
    #[error("knowledge base i/o error at {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Lineage(#[from] LineageError),
}

pub type Result<T, E = KbError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> KbError + '_ {
    move |source| KbError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TagRecord {
    pub tag: ConstraintTag,
    pub origin: Origin,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Payload {
    /// Operation-level tags.
    Tags { tags: Vec<TagRecord> },
    /// A node-level lineage table stored under `tables/`.
    Table { file: String, records: usize, boxes: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KbEntry {
    pub key: String,
    pub origin: Origin,
    pub timestamp: u64,
    pub payload: Payload,
    #[serde(skip)]
    pub file: String,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct Index {
    next: u64,
    keys: BTreeMap<String, Vec<String>>,
}

#[derive(Debug, Clone)]
pub struct Kb {
    root: PathBuf,
}

/// Advisory single-writer lock; released on drop.
pub struct KbLock {
    path: PathBuf,
}

impl Drop for KbLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(dir))?;
    tmp.write_all(bytes).map_err(io_err(path))?;
    tmp.as_file().sync_all().map_err(io_err(path))?;
    tmp.persist(path).map_err(|e| KbError::Io {
        path: path.to_path_buf(),
        source: e.error,
    })?;
    Ok(())
}

impl Kb {
    /// Opens (creating if needed) the KB rooted at `root`.
    pub fn open(root: impl Into<PathBuf>) -> Result<Kb> {
        let root = root.into();
        for sub in ["entries", "tables"] {
            let p = root.join(sub);
            fs::create_dir_all(&p).map_err(io_err(&p))?;
        }
        Ok(Kb { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Takes the writer lock, waiting up to `wait`.
    pub fn lock(&self, wait: Duration) -> Result<KbLock> {
        let path = self.root.join("lock");
        let started = Instant::now();
        loop {
            match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
                Ok(mut f) => {
                    let _ = writeln!(f, "{}", std::process::id());
                    return Ok(KbLock { path });
                }
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                    if started.elapsed() >= wait {
                        return Err(KbError::Locked(self.root.clone()));
                    }
                    std::thread::sleep(Duration::from_millis(20));
                }
                Err(e) => return Err(io_err(&path)(e)),
            }
        }
    }

    fn read_index(&self) -> Result<Index> {
        let path = self.root.join("index.json");
        match fs::read_to_string(&path) {
            Ok(text) => serde_json::from_str(&text).map_err(|e| KbError::CorruptStore {
                path,
                reason: e.to_string(),
            }),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Index::default()),
            Err(e) => Err(io_err(&path)(e)),
        }
    }

    fn read_entry(&self, file: &str) -> Result<KbEntry> {
        let path = self.root.join("entries").join(file);
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let mut entry: KbEntry = serde_json::from_str(&text).map_err(|e| KbError::CorruptStore {
            path: path.clone(),
            reason: e.to_string(),
        })?;
        entry.file = file.to_string();
        Ok(entry)
    }

    fn append(&self, key: &str, origin: Origin, payload: impl FnOnce(&str) -> Result<Payload>) -> Result<KbEntry> {
        let _lock = self.lock(Duration::from_secs(10))?;
        let mut index = self.read_index()?;
        index.next += 1;
        let stem = format!("{:08}", index.next);
        let payload = payload(&stem)?;
        let entry = KbEntry {
            key: key.to_string(),
            origin,
            timestamp: origin.timestamp,
            payload,
            file: format!("{stem}.json"),
        };
        let mut body = serde_json::to_string_pretty(&entry).expect("entry serializes");
        body.push('\n');
        write_atomic(&self.root.join("entries").join(&entry.file), body.as_bytes())?;
        index.keys.entry(key.to_string()).or_default().push(entry.file.clone());
        let mut text = serde_json::to_string_pretty(&index).expect("index serializes");
        text.push('\n');
        write_atomic(&self.root.join("index.json"), text.as_bytes())?;
        Ok(entry)
    }

    /// Appends a lineage table for a node-signature key.
    pub fn store_table(&self, key: &str, table: &LineageTable) -> Result<KbEntry> {
        self.append(key, table.origin(), |stem| {
            let compressed = compress_table(table);
            let file = format!("{stem}.xplt");
            write_atomic(&self.root.join("tables").join(&file), compressed.payload.as_bytes())?;
            Ok(Payload::Table {
                file,
                records: table.len(),
                boxes: compressed.box_count(),
            })
        })
    }

    /// Appends operation-level tags. The entry origin is the weakest tag
    /// origin.
    pub fn store_tags(&self, key: &str, tags: &[(ConstraintTag, Origin)]) -> Result<KbEntry> {
        let origin = tags
            .iter()
            .map(|(_, o)| *o)
            .reduce(|a, b| Origin::at(a.kind.weakest(b.kind), a.timestamp.max(b.timestamp)))
            .unwrap_or_else(|| Origin::now(crate::lineage::OriginKind::Declared));
        let tags = tags
            .iter()
            .map(|(tag, origin)| TagRecord {
                tag: tag.clone(),
                origin: *origin,
            })
            .collect();
        self.append(key, origin, |_| Ok(Payload::Tags { tags }))
    }

    /// All entries under `key`, newest first.
    pub fn lookup(&self, key: &str) -> Result<Vec<KbEntry>> {
        let index = self.read_index()?;
        index
            .keys
            .get(key)
            .map(|files| files.iter().rev().map(|f| self.read_entry(f)).collect())
            .unwrap_or_else(|| Ok(Vec::new()))
    }

    /// Every entry, newest first.
    pub fn list(&self) -> Result<Vec<KbEntry>> {
        let index = self.read_index()?;
        let mut files: Vec<&String> = index.keys.values().flatten().collect();
        files.sort_unstable_by(|a, b| b.cmp(a));
        files.into_iter().map(|f| self.read_entry(f)).collect()
    }

    pub fn load_table(&self, entry: &KbEntry) -> Result<Option<LineageTable>> {
        let Payload::Table { file, .. } = &entry.payload else {
            return Ok(None);
        };
        let path = self.root.join("tables").join(file);
        let payload = fs::read_to_string(&path).map_err(io_err(&path))?;
        decompress_table(&CompressedTable { payload })
            .map(Some)
            .map_err(|e| KbError::CorruptStore {
                path,
                reason: e.to_string(),
            })
    }

    /// The newest lineage table stored under `key`.
    pub fn latest_table(&self, key: &str) -> Result<Option<LineageTable>> {
        for entry in self.lookup(key)? {
            if let Some(t) = self.load_table(&entry)? {
                return Ok(Some(t));
            }
        }
        Ok(None)
    }

    /// Union of the tags stored under an operation key; for a tag stored more
    /// than once the newest record wins.
    pub fn op_tags(&self, key: &str) -> Result<Vec<(ConstraintTag, Origin)>> {
        let mut out: BTreeMap<ConstraintTag, Origin> = BTreeMap::new();
        for entry in self.lookup(key)? {
            if let Payload::Tags { tags } = entry.payload {
                for t in tags {
                    out.entry(t.tag).or_insert(t.origin);
                }
            }
        }
        Ok(out.into_iter().collect())
    }
}
