//! Embedded document store.
//!
//! Layout under the data directory:
//!
//! ```text
//! index.json              documents + catalog, rewritten atomically
//! objects/<sha256>        immutable document bodies
//! runs/<run_id>.ndjson    append-only run event journals
//! telemetry.ndjson        telemetry history
//! ```
//!
//! Every file that is replaced goes through write-then-rename, so a crash
//! leaves either the old or the new version. Objects are written before the
//! index references them; unreferenced objects are swept on open.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use twinloop_core::events::{Millis, Mode};

const INDEX_FILE: &str = "index.json";
const INDEX_SCHEMA: &str = "twinloop-index/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DocKind {
    AmlSource,
    PlantConfig,
    BpmnProcess,
    ScenarioHistory,
    RunLog,
}

impl DocKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DocKind::AmlSource => "aml_source",
            DocKind::PlantConfig => "plant_config",
            DocKind::BpmnProcess => "bpmn_process",
            DocKind::ScenarioHistory => "scenario_history",
            DocKind::RunLog => "run_log",
        }
    }

    pub fn media_type(self) -> &'static str {
        match self {
            DocKind::AmlSource | DocKind::BpmnProcess => "application/xml",
            DocKind::PlantConfig | DocKind::ScenarioHistory => "application/json",
            DocKind::RunLog => "application/x-ndjson",
        }
    }
}

/// Metadata of an immutable stored body.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoredDocument {
    pub doc_id: String,
    pub kind: DocKind,
    pub created_at: Millis,
    /// Hex SHA-256 of the body.
    pub content_hash: String,
    pub size: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlantRecord {
    pub plant_id: String,
    pub plant_name: String,
    pub aml_doc: String,
    pub config_doc: String,
    pub created_at: Millis,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioRecord {
    pub scenario_id: String,
    pub plant_id: String,
    pub backend: twinloop_core::scenario::BackendKind,
    pub phase: twinloop_core::scenario::LoopPhase,
    /// Latest `scenario_history` document.
    pub history_doc: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accepted_process_doc: Option<String>,
    pub created_at: Millis,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Finished,
    /// Interrupted by a service shutdown or crash.
    Aborted,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub deployment_id: String,
    pub plant_id: String,
    pub process_doc: String,
    pub process_id: String,
    pub mode: Mode,
    pub status: RunStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outcome: Option<twinloop_core::bpmn::RunOutcome>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_log_doc: Option<String>,
    pub started_at: Millis,
}

/// Mutable pointers into the immutable documents.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Catalog {
    #[serde(default)]
    pub plants: BTreeMap<String, PlantRecord>,
    #[serde(default)]
    pub scenarios: BTreeMap<String, ScenarioRecord>,
    #[serde(default)]
    pub runs: BTreeMap<String, RunRecord>,
    /// Monotonic counter for deployment, run and scenario ids.
    #[serde(default)]
    pub seq: u64,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct IndexFile {
    schema: String,
    documents: BTreeMap<String, StoredDocument>,
    catalog: Catalog,
}

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: corrupt index: {reason}")]
    Index { path: PathBuf, reason: String },
    #[error("document {0} not found")]
    NotFound(String),
    #[error("document {doc_id} does not match its content hash")]
    Corrupt { doc_id: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn now_ms() -> Millis {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as Millis)
}

pub fn sha256_hex(body: &[u8]) -> String {
    hex::encode(Sha256::digest(body))
}

/// Replaces `path` with `bytes` so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
    let tmp = path.with_extension(format!("tmp{}", std::process::id()));
    let mut f = File::create(&tmp).map_err(io_err(&tmp))?;
    f.write_all(bytes).map_err(io_err(&tmp))?;
    f.sync_all().map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))?;
    if let Some(dir) = path.parent() {
        // Persist the rename itself; not all platforms allow opening a directory.
        if let Ok(d) = File::open(dir) {
            let _ = d.sync_all();
        }
    }
    Ok(())
}

#[derive(Debug)]
pub struct DocStore {
    root: PathBuf,
    index: Mutex<IndexFile>,
}

impl DocStore {
    /// Opens or creates a store, sweeping leftovers of interrupted writes.
    pub fn open(root: &Path) -> Result<Self, StoreError> {
        for dir in [root.to_path_buf(), root.join("objects"), root.join("runs")] {
            fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        }
        let path = root.join(INDEX_FILE);
        let index = match fs::read(&path) {
            Ok(bytes) => {
                let index: IndexFile = serde_json::from_slice(&bytes).map_err(|e| StoreError::Index {
                    path: path.clone(),
                    reason: e.to_string(),
                })?;
                if index.schema != INDEX_SCHEMA {
                    return Err(StoreError::Index {
                        path,
                        reason: format!("unsupported schema {:?}", index.schema),
                    });
                }
                index
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => IndexFile {
                schema: INDEX_SCHEMA.into(),
                ..Default::default()
            },
            Err(e) => return Err(io_err(&path)(e)),
        };
        let store = DocStore {
            root: root.to_path_buf(),
            index: Mutex::new(index),
        };
        store.sweep()?;
        Ok(store)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn sweep(&self) -> Result<(), StoreError> {
        let index = self.index.lock().expect("index lock");
        let live: std::collections::BTreeSet<&str> =
            index.documents.values().map(|d| d.content_hash.as_str()).collect();
        for dir in [self.root.clone(), self.root.join("objects")] {
            for entry in fs::read_dir(&dir).map_err(io_err(&dir))? {
                let entry = entry.map_err(io_err(&dir))?;
                let name = entry.file_name().to_string_lossy().into_owned();
                let is_tmp = entry
                    .path()
                    .extension()
                    .is_some_and(|e| e.to_string_lossy().starts_with("tmp"));
                let orphan = dir.ends_with("objects") && !live.contains(name.as_str());
                if is_tmp || orphan {
                    log::info!("removing leftover {}", entry.path().display());
                    let _ = fs::remove_file(entry.path());
                }
            }
        }
        Ok(())
    }

    fn object_path(&self, hash: &str) -> PathBuf {
        self.root.join("objects").join(hash)
    }

    fn persist(&self, index: &IndexFile) -> Result<(), StoreError> {
        let mut bytes = serde_json::to_vec_pretty(index).expect("index serializes");
        bytes.push(b'\n');
        write_atomic(&self.root.join(INDEX_FILE), &bytes)
    }

    /// Stores `body`; identical content of the same kind maps to the same id.
    pub fn put(&self, kind: DocKind, body: &[u8]) -> Result<StoredDocument, StoreError> {
        self.put_with(kind, body, |_| {})
    }

    /// Stores `body` and applies `update` to the catalog in the same index write.
    pub fn put_with(
        &self,
        kind: DocKind,
        body: &[u8],
        update: impl FnOnce(&mut Catalog),
    ) -> Result<StoredDocument, StoreError> {
        let hash = sha256_hex(body);
        let doc_id = format!("{}-{}", kind.as_str(), &hash[..16]);
        let mut index = self.index.lock().expect("index lock");
        let doc = match index.documents.get(&doc_id) {
            Some(d) => d.clone(),
            None => {
                let path = self.object_path(&hash);
                if !path.exists() {
                    write_atomic(&path, body)?;
                }
                StoredDocument {
                    doc_id: doc_id.clone(),
                    kind,
                    created_at: now_ms(),
                    content_hash: hash,
                    size: body.len() as u64,
                }
            }
        };
        let mut next = IndexFile {
            schema: index.schema.clone(),
            documents: index.documents.clone(),
            catalog: index.catalog.clone(),
        };
        next.documents.insert(doc_id, doc.clone());
        update(&mut next.catalog);
        if next.documents != index.documents || next.catalog != index.catalog {
            self.persist(&next)?;
            *index = next;
        }
        Ok(doc)
    }

    pub fn meta(&self, doc_id: &str) -> Option<StoredDocument> {
        self.index.lock().expect("index lock").documents.get(doc_id).cloned()
    }

    pub fn documents(&self) -> Vec<StoredDocument> {
        self.index
            .lock()
            .expect("index lock")
            .documents
            .values()
            .cloned()
            .collect()
    }

    pub fn get(&self, doc_id: &str) -> Result<(StoredDocument, Vec<u8>), StoreError> {
        let meta = self.meta(doc_id).ok_or_else(|| StoreError::NotFound(doc_id.into()))?;
        let path = self.object_path(&meta.content_hash);
        let body = fs::read(&path).map_err(io_err(&path))?;
        if sha256_hex(&body) != meta.content_hash {
            return Err(StoreError::Corrupt { doc_id: doc_id.into() });
        }
        Ok((meta, body))
    }

    pub fn get_text(&self, doc_id: &str) -> Result<(StoredDocument, String), StoreError> {
        let (meta, body) = self.get(doc_id)?;
        String::from_utf8(body)
            .map(|t| (meta, t))
            .map_err(|_| StoreError::Corrupt { doc_id: doc_id.into() })
    }

    pub fn catalog(&self) -> Catalog {
        self.index.lock().expect("index lock").catalog.clone()
    }

    /// Applies `f` to the catalog and persists it. The closure's result is
    /// returned whether or not anything changed.
    pub fn update<T>(&self, f: impl FnOnce(&mut Catalog) -> T) -> Result<T, StoreError> {
        let mut index = self.index.lock().expect("index lock");
        let mut catalog = index.catalog.clone();
        let out = f(&mut catalog);
        if catalog != index.catalog {
            let next = IndexFile {
                schema: index.schema.clone(),
                documents: index.documents.clone(),
                catalog,
            };
            self.persist(&next)?;
            *index = next;
        }
        Ok(out)
    }

    /// Allocates the next value of the shared id counter.
    pub fn next_seq(&self) -> Result<u64, StoreError> {
        self.update(|c| {
            c.seq += 1;
            c.seq
        })
    }

    pub fn journal_path(&self, run_id: &str) -> PathBuf {
        self.root.join("runs").join(format!("{run_id}.ndjson"))
    }

    pub fn telemetry_path(&self) -> PathBuf {
        self.root.join("telemetry.ndjson")
    }
}

/// Append-only NDJSON file, flushed after every line.
#[derive(Debug)]
pub struct Journal {
    path: PathBuf,
    file: File,
}

impl Journal {
    pub fn create(path: &Path) -> Result<Self, StoreError> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(io_err(path))?;
        Ok(Journal {
            path: path.to_path_buf(),
            file,
        })
    }

    pub fn append<T: Serialize>(&mut self, item: &T) -> Result<(), StoreError> {
        let mut line = serde_json::to_vec(item).expect("journal item serializes");
        line.push(b'\n');
        self.file.write_all(&line).map_err(io_err(&self.path))?;
        self.file.sync_data().map_err(io_err(&self.path))
    }

    /// Parses every complete line; a torn final line from a crash is dropped.
    pub fn read<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, StoreError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let mut out = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            match serde_json::from_str(line) {
                Ok(item) => out.push(item),
                Err(e) => log::warn!("{}: skipping unreadable journal line: {e}", path.display()),
            }
        }
        Ok(out)
    }
}
