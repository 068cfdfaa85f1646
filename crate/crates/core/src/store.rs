//! Append-only run archive.
//!
//! Layout under the archive root:
//!
//! ```text
//! manifest.json          {"schema_version": "1.0", "config_hash": "<sha256>", "created_at": "..."}
//! plan.json              the experiment plan
//! runstate.json          checkpoint of completed (puppet, day, phase) triples
//! records/<puppet>.jsonl one envelope per line
//! ```
//!
//! Envelope: `{"seq": u64, "puppet_id": str, "kind": "visit"|"snapshot"|"marker", "ts": str, "body": {...}}`.
//! `seq` starts at 1 and increases by one per puppet. `ts` is UTC ISO-8601
//! with milliseconds. A phase becomes part of the run only once its marker
//! is written; the marker lists the sequence numbers of the records it
//! commits, so records from an interrupted phase are ignored by loaders.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::experiment::{ExperimentPlan, Group};
use crate::session::{Environment, RecommendationSnapshot, SnapshotPhase, VisitLog};
use crate::timefmt;

pub const SCHEMA_VERSION: &str = "1.0";
pub const MANIFEST: &str = "manifest.json";
pub const PLAN: &str = "plan.json";
pub const RUNSTATE: &str = "runstate.json";
const RECORDS: &str = "records";

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("record rejected: {0}")]
    Validation(String),
    #[error("{path}:{line}: corrupt record: {message}")]
    Corrupt {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("archive already exists at {0}")]
    AlreadyExists(PathBuf),
    #[error("no archive at {0}")]
    Missing(PathBuf),
    #[error("archive schema {found} is incompatible with {expected}")]
    SchemaMismatch { found: String, expected: String },
    #[error("archive was created with config {found}, current config is {expected}")]
    ConfigMismatch { found: String, expected: String },
}

pub type Result<T> = std::result::Result<T, StoreError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: String,
    pub config_hash: String,
    #[serde(with = "crate::timefmt")]
    pub created_at: DateTime<Utc>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Setting,
    Exposure,
    Measurement,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarkerOutcome {
    Completed,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseMarker {
    pub day_index: u32,
    pub phase: Phase,
    pub outcome: MarkerOutcome,
    /// Sequence numbers of the records this phase produced.
    pub commits: Vec<u64>,
    #[serde(with = "crate::timefmt")]
    pub at: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordKind {
    Visit,
    Snapshot,
    Marker,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Record {
    Visit(VisitLog),
    Snapshot(RecommendationSnapshot),
    Marker(PhaseMarker),
}

impl Record {
    pub fn kind(&self) -> RecordKind {
        match self {
            Record::Visit(_) => RecordKind::Visit,
            Record::Snapshot(_) => RecordKind::Snapshot,
            Record::Marker(_) => RecordKind::Marker,
        }
    }

    fn timestamp(&self) -> DateTime<Utc> {
        match self {
            Record::Visit(v) => v.started_at,
            Record::Snapshot(s) => s.captured_at,
            Record::Marker(m) => m.at,
        }
    }

    fn validate(&self, puppet_id: &str) -> std::result::Result<(), String> {
        match self {
            Record::Visit(v) => v.validate(),
            Record::Snapshot(s) => {
                if s.puppet_id != puppet_id {
                    return Err(format!("snapshot of {} filed under {puppet_id}", s.puppet_id));
                }
                s.validate()
            }
            Record::Marker(m) => {
                if m.phase == Phase::Setting && m.day_index != 0 {
                    return Err("setting marker must have day_index 0".into());
                }
                Ok(())
            }
        }
    }

    fn body(&self) -> serde_json::Result<Value> {
        match self {
            Record::Visit(v) => serde_json::to_value(v),
            Record::Snapshot(s) => serde_json::to_value(s),
            Record::Marker(m) => serde_json::to_value(m),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Envelope {
    seq: u64,
    puppet_id: String,
    kind: RecordKind,
    ts: String,
    body: Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoredRecord {
    pub seq: u64,
    pub puppet_id: String,
    pub ts: DateTime<Utc>,
    pub record: Record,
}

/// Records of one or more puppet files plus the number of truncated final
/// lines that were skipped.
#[derive(Debug, Clone, Default)]
pub struct Scan {
    pub records: Vec<StoredRecord>,
    pub truncated_lines: usize,
}

impl Scan {
    /// Records committed by a completed marker, plus the markers themselves.
    pub fn committed(&self) -> impl Iterator<Item = &StoredRecord> {
        let mut live: HashSet<(&str, u64)> = HashSet::new();
        for r in &self.records {
            if let Record::Marker(m) = &r.record {
                if m.outcome == MarkerOutcome::Completed {
                    live.extend(m.commits.iter().map(|s| (r.puppet_id.as_str(), *s)));
                }
            }
        }
        self.records
            .iter()
            .filter(move |r| matches!(r.record, Record::Marker(_)) || live.contains(&(r.puppet_id.as_str(), r.seq)))
    }

    pub fn markers(&self) -> impl Iterator<Item = (&str, &PhaseMarker)> {
        self.records.iter().filter_map(|r| match &r.record {
            Record::Marker(m) => Some((r.puppet_id.as_str(), m)),
            _ => None,
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SnapshotFilter {
    pub puppet_id: Option<String>,
    pub group: Option<Group>,
    pub environment: Option<Environment>,
    pub phase: Option<SnapshotPhase>,
    pub day_index: Option<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Durability {
    /// fsync every record before `append` returns.
    Sync,
    /// Flush to the OS only. For throwaway archives.
    Flush,
}

struct PuppetLog {
    file: File,
    next_seq: u64,
}

pub struct RunArchive {
    root: PathBuf,
    manifest: Manifest,
    durability: Durability,
    logs: Mutex<HashMap<String, Arc<Mutex<PuppetLog>>>>,
}

fn sanitize(id: &str) -> String {
    id.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

impl RunArchive {
    /// Create a new archive. Fails if one already exists at `root`.
    pub fn create(root: impl Into<PathBuf>, config_hash: &str) -> Result<Self> {
        let root = root.into();
        let manifest_path = root.join(MANIFEST);
        if manifest_path.exists() {
            return Err(StoreError::AlreadyExists(root));
        }
        fs::create_dir_all(root.join(RECORDS)).map_err(io_err(&root))?;
        let manifest = Manifest {
            schema_version: SCHEMA_VERSION.into(),
            config_hash: config_hash.into(),
            created_at: timefmt::now_ms(),
        };
        write_atomic(
            &manifest_path,
            &serde_json::to_vec_pretty(&manifest).expect("manifest serialises"),
        )?;
        Ok(Self::with_manifest(root, manifest))
    }

    /// Open an existing archive, refusing a different schema major version.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        let manifest_path = root.join(MANIFEST);
        if !manifest_path.exists() {
            return Err(StoreError::Missing(root));
        }
        let bytes = fs::read(&manifest_path).map_err(io_err(&manifest_path))?;
        let manifest: Manifest = serde_json::from_slice(&bytes).map_err(|e| StoreError::Corrupt {
            path: manifest_path.clone(),
            line: 1,
            message: e.to_string(),
        })?;
        let major = |v: &str| v.split('.').next().unwrap_or("").to_string();
        if major(&manifest.schema_version) != major(SCHEMA_VERSION) {
            return Err(StoreError::SchemaMismatch {
                found: manifest.schema_version,
                expected: SCHEMA_VERSION.into(),
            });
        }
        Ok(Self::with_manifest(root, manifest))
    }

    /// Open for resuming: the stored config hash must match.
    pub fn open_for_resume(root: impl Into<PathBuf>, config_hash: &str) -> Result<Self> {
        let archive = Self::open(root)?;
        if archive.manifest.config_hash != config_hash {
            return Err(StoreError::ConfigMismatch {
                found: archive.manifest.config_hash.clone(),
                expected: config_hash.into(),
            });
        }
        Ok(archive)
    }

    fn with_manifest(root: PathBuf, manifest: Manifest) -> Self {
        Self {
            root,
            manifest,
            durability: Durability::Sync,
            logs: Mutex::new(HashMap::new()),
        }
    }

    pub fn set_durability(&mut self, durability: Durability) {
        self.durability = durability;
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    fn puppet_path(&self, puppet_id: &str) -> PathBuf {
        self.root.join(RECORDS).join(format!("{}.jsonl", sanitize(puppet_id)))
    }

    /// Open a puppet's log for appending. A torn final line left by a crash
    /// is cut off so the next record starts on a fresh line.
    fn open_log(&self, puppet_id: &str) -> Result<PuppetLog> {
        let path = self.puppet_path(puppet_id);
        let mut file = OpenOptions::new()
            .create(true)
            .read(true)
            .append(true)
            .open(&path)
            .map_err(io_err(&path))?;
        let mut content = Vec::new();
        file.read_to_end(&mut content).map_err(io_err(&path))?;
        let keep = match content.iter().rposition(|b| *b == b'\n') {
            Some(i) => i + 1,
            None => 0,
        };
        if keep < content.len() {
            log::warn!(
                "{}: dropping torn final line ({} bytes)",
                path.display(),
                content.len() - keep
            );
            file.set_len(keep as u64).map_err(io_err(&path))?;
            file.seek(SeekFrom::End(0)).map_err(io_err(&path))?;
        }
        let mut last = 0;
        for (i, line) in content[..keep].split(|b| *b == b'\n').enumerate() {
            if line.is_empty() {
                continue;
            }
            let env: Envelope = serde_json::from_slice(line).map_err(|e| StoreError::Corrupt {
                path: path.clone(),
                line: i + 1,
                message: e.to_string(),
            })?;
            last = env.seq;
        }
        Ok(PuppetLog {
            file,
            next_seq: last + 1,
        })
    }

    fn log_for(&self, puppet_id: &str) -> Result<Arc<Mutex<PuppetLog>>> {
        let mut logs = self.logs.lock().expect("log table poisoned");
        if let Some(log) = logs.get(puppet_id) {
            return Ok(Arc::clone(log));
        }
        let log = Arc::new(Mutex::new(self.open_log(puppet_id)?));
        logs.insert(puppet_id.to_string(), Arc::clone(&log));
        Ok(log)
    }

    /// Append a record; returns its sequence number once it is durable.
    pub fn append(&self, puppet_id: &str, record: &Record) -> Result<u64> {
        record.validate(puppet_id).map_err(StoreError::Validation)?;
        let body = record.body().map_err(|e| StoreError::Validation(e.to_string()))?;
        let log = self.log_for(puppet_id)?;
        let mut log = log.lock().expect("puppet log poisoned");
        let seq = log.next_seq;
        let env = Envelope {
            seq,
            puppet_id: puppet_id.to_string(),
            kind: record.kind(),
            ts: timefmt::format(&record.timestamp()),
            body,
        };
        let mut line = serde_json::to_vec(&env).map_err(|e| StoreError::Validation(e.to_string()))?;
        line.push(b'\n');
        let path = self.puppet_path(puppet_id);
        log.file.write_all(&line).map_err(io_err(&path))?;
        match self.durability {
            Durability::Sync => log.file.sync_data().map_err(io_err(&path))?,
            Durability::Flush => log.file.flush().map_err(io_err(&path))?,
        }
        log.next_seq += 1;
        Ok(seq)
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        let bytes = serde_json::to_vec_pretty(value).map_err(|e| StoreError::Validation(e.to_string()))?;
        write_atomic(&self.root.join(name), &bytes)
    }

    pub fn read_json<T: for<'de> Deserialize<'de>>(&self, name: &str) -> Result<Option<T>> {
        let path = self.root.join(name);
        if !path.exists() {
            return Ok(None);
        }
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        serde_json::from_slice(&bytes)
            .map(Some)
            .map_err(|e| StoreError::Corrupt {
                path,
                line: 1,
                message: e.to_string(),
            })
    }

    pub fn read_plan(&self) -> Result<Option<ExperimentPlan>> {
        self.read_json(PLAN)
    }

    /// Puppet ids with a record file, sorted.
    pub fn puppet_ids(&self) -> Result<Vec<String>> {
        let dir = self.root.join(RECORDS);
        let mut ids = Vec::new();
        if !dir.exists() {
            return Ok(ids);
        }
        for entry in fs::read_dir(&dir).map_err(io_err(&dir))? {
            let entry = entry.map_err(io_err(&dir))?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if let Some(id) = name.strip_suffix(".jsonl") {
                ids.push(id.to_string());
            }
        }
        ids.sort();
        Ok(ids)
    }

    /// Read every record of one puppet in file order.
    pub fn scan_puppet(&self, puppet_id: &str) -> Result<Scan> {
        let path = self.puppet_path(puppet_id);
        let mut scan = Scan::default();
        if !path.exists() {
            return Ok(scan);
        }
        let file = File::open(&path).map_err(io_err(&path))?;
        let mut reader = BufReader::new(file);
        let mut line_no = 0;
        let mut buf = String::new();
        loop {
            buf.clear();
            let n = reader.read_line(&mut buf).map_err(io_err(&path))?;
            if n == 0 {
                break;
            }
            line_no += 1;
            let terminated = buf.ends_with('\n');
            let text = buf.trim_end_matches(['\n', '\r']);
            if text.trim().is_empty() {
                continue;
            }
            match parse_envelope(text) {
                Ok(rec) => scan.records.push(rec),
                Err(_) if !terminated => {
                    log::warn!("{}:{line_no}: truncated final record skipped", path.display());
                    scan.truncated_lines += 1;
                }
                Err(message) => {
                    return Err(StoreError::Corrupt {
                        path,
                        line: line_no,
                        message,
                    })
                }
            }
        }
        Ok(scan)
    }

    /// Read every puppet's records, puppets in id order.
    pub fn scan(&self) -> Result<Scan> {
        let mut all = Scan::default();
        for id in self.puppet_ids()? {
            let s = self.scan_puppet(&id)?;
            all.truncated_lines += s.truncated_lines;
            all.records.extend(s.records);
        }
        Ok(all)
    }

    /// Committed snapshots matching `filter`, ordered by
    /// (puppet_id, day_index, sequence).
    pub fn load_snapshots(&self, filter: &SnapshotFilter) -> Result<Vec<RecommendationSnapshot>> {
        let cells: Option<BTreeMap<String, (Group, Environment)>> =
            if filter.group.is_some() || filter.environment.is_some() {
                let plan = self
                    .read_plan()?
                    .ok_or_else(|| StoreError::Missing(self.root.join(PLAN)))?;
                Some(
                    plan.puppets()
                        .map(|p| (p.puppet_id.clone(), (p.group, p.environment)))
                        .collect(),
                )
            } else {
                None
            };
        let scan = match &filter.puppet_id {
            Some(id) => self.scan_puppet(id)?,
            None => self.scan()?,
        };
        if scan.truncated_lines > 0 {
            log::warn!(
                "{} truncated record(s) skipped while loading snapshots",
                scan.truncated_lines
            );
        }
        let mut out: Vec<(u64, RecommendationSnapshot)> = scan
            .committed()
            .filter_map(|r| match &r.record {
                Record::Snapshot(s) => Some((r.seq, s.clone())),
                _ => None,
            })
            .filter(|(_, s)| {
                filter.puppet_id.as_ref().is_none_or(|p| *p == s.puppet_id)
                    && filter.phase.is_none_or(|p| p == s.phase)
                    && filter.day_index.is_none_or(|d| d == s.day_index)
                    && cells.as_ref().is_none_or(|cells| {
                        cells.get(&s.puppet_id).is_some_and(|(g, e)| {
                            filter.group.is_none_or(|fg| fg == *g) && filter.environment.is_none_or(|fe| fe == *e)
                        })
                    })
            })
            .collect();
        out.sort_by(|a, b| {
            (a.1.puppet_id.as_str(), a.1.day_index, a.0).cmp(&(b.1.puppet_id.as_str(), b.1.day_index, b.0))
        });
        Ok(out.into_iter().map(|(_, s)| s).collect())
    }

    /// Committed visit logs of one puppet in sequence order.
    pub fn load_visits(&self, puppet_id: &str) -> Result<Vec<VisitLog>> {
        let scan = self.scan_puppet(puppet_id)?;
        Ok(scan
            .committed()
            .filter_map(|r| match &r.record {
                Record::Visit(v) => Some(v.clone()),
                _ => None,
            })
            .collect())
    }
}

fn parse_envelope(text: &str) -> std::result::Result<StoredRecord, String> {
    let env: Envelope = serde_json::from_str(text).map_err(|e| e.to_string())?;
    let ts = timefmt::parse(&env.ts).map_err(|e| format!("bad ts: {e}"))?;
    let record = match env.kind {
        RecordKind::Visit => Record::Visit(serde_json::from_value(env.body).map_err(|e| e.to_string())?),
        RecordKind::Snapshot => Record::Snapshot(serde_json::from_value(env.body).map_err(|e| e.to_string())?),
        RecordKind::Marker => Record::Marker(serde_json::from_value(env.body).map_err(|e| e.to_string())?),
    };
    Ok(StoredRecord {
        seq: env.seq,
        puppet_id: env.puppet_id,
        ts,
        record,
    })
}
