//! Append-only sharded JSONL persistence for region records.
//!
//! Each image maps to one of `shard_count` shard files. Every append writes
//! a full record with a per-region generation number; readers see the latest
//! generation. Compaction rewrites a shard into a new file generation and
//! never edits a file in place.

mod index;

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{Read, Write};
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::geometry::ScaleBucket;
use crate::region::{Region, VerificationStatus};

pub use index::{ConceptEntry, ConceptIndex};

pub const SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_SHARD_COUNT: usize = 16;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("store io: {0}")]
    Io(#[from] std::io::Error),
    #[error("record rejected: {0}")]
    Rejected(String),
    #[error("corrupt record in {path} at byte {offset}: {diagnostic}")]
    Corrupt {
        path: PathBuf,
        offset: u64,
        diagnostic: String,
    },
    #[error("shard count mismatch: store has {found}, configured {configured}")]
    ShardCount { found: usize, configured: usize },
    #[error("injected crash after {written} bytes")]
    InjectedCrash { written: usize },
}

/// One persisted line: schema version, region fields, generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub schema: u32,
    #[serde(flatten)]
    pub region: Region,
    pub generation: u64,
    /// Marks a region removed from the working corpus (e.g. by cleaning).
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub tombstone: bool,
}

impl Record {
    pub fn parse(line: &[u8]) -> Result<Record, String> {
        let rec: Record = serde_json::from_slice(line).map_err(|e| e.to_string())?;
        if rec.schema != SCHEMA_VERSION {
            return Err(format!("unsupported schema version {}", rec.schema));
        }
        rec.region.validate().map_err(|e| e.to_string())?;
        Ok(rec)
    }
}

/// Filters for [`Store::scan`]. Empty fields match everything.
#[derive(Debug, Clone, Default)]
pub struct ScanFilter {
    pub image_id: Option<String>,
    pub bucket: Option<ScaleBucket>,
    /// Matches the top-1 matched tag, the same key the concept index uses.
    pub tag: Option<String>,
    pub verification: Option<VerificationStatus>,
}

impl ScanFilter {
    pub fn matches(&self, r: &Region) -> bool {
        self.image_id.as_ref().is_none_or(|i| &r.image_id == i)
            && self.bucket.is_none_or(|b| r.bucket() == b)
            && self
                .tag
                .as_ref()
                .is_none_or(|t| r.top1().is_some_and(|m| &m.text == t))
            && self.verification.is_none_or(|v| r.verification.status == v)
    }
}

/// Simulated crash: the append writes only the first `crash_after_bytes` bytes.
#[derive(Debug, Clone, Copy)]
pub struct FaultPlan {
    pub crash_after_bytes: usize,
}

/// A torn final line dropped while opening a shard.
#[derive(Debug, Clone, PartialEq)]
pub struct TornTail {
    pub path: PathBuf,
    pub dropped_bytes: u64,
}

#[derive(Debug, Clone, Copy)]
struct Entry {
    offset: u64,
    len: u64,
    generation: u64,
    tombstone: bool,
}

struct Shard {
    path: PathBuf,
    file_generation: u32,
    file: File,
    len: u64,
    latest: HashMap<String, Entry>,
}

pub fn shard_of(image_id: &str, shard_count: usize) -> usize {
    let d = Sha256::digest(image_id.as_bytes());
    (u64::from_le_bytes(d[..8].try_into().expect("8 bytes")) % shard_count as u64) as usize
}

fn shard_path(dir: &Path, id: usize, file_generation: u32) -> PathBuf {
    dir.join(format!("shard-{id:02}.g{file_generation:04}.jsonl"))
}

/// Writes `bytes` to `path` through a synced temp file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name().and_then(|n| n.to_str()).unwrap_or("write")
    ));
    {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    if let Ok(d) = File::open(dir) {
        let _ = d.sync_all();
    }
    Ok(())
}

/// Content hash of a corpus: latest records sorted by region id, generation excluded.
pub fn corpus_hash(regions: &[Region]) -> String {
    let mut sorted: Vec<&Region> = regions.iter().collect();
    sorted.sort_by(|a, b| a.region_id.cmp(&b.region_id));
    let mut h = Sha256::new();
    for r in sorted {
        h.update(serde_json::to_vec(r).expect("region serializes"));
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

pub struct Store {
    dir: PathBuf,
    shard_count: usize,
    shards: Vec<Mutex<Shard>>,
    torn: Vec<TornTail>,
}

impl Store {
    /// Opens or creates a store, truncating torn final lines.
    pub fn open(dir: impl AsRef<Path>, shard_count: usize) -> Result<Store, StoreError> {
        let dir = dir.as_ref().to_path_buf();
        if shard_count == 0 {
            return Err(StoreError::Rejected("shard_count must be positive".into()));
        }
        fs::create_dir_all(&dir)?;
        let mut found: HashMap<usize, u32> = HashMap::new();
        for entry in fs::read_dir(&dir)? {
            let name = entry?.file_name().to_string_lossy().into_owned();
            if let Some((id, generation)) = parse_shard_name(&name) {
                let g = found.entry(id).or_insert(generation);
                *g = (*g).max(generation);
            }
        }
        if let Some(max) = found.keys().max() {
            if *max >= shard_count {
                return Err(StoreError::ShardCount {
                    found: max + 1,
                    configured: shard_count,
                });
            }
        }
        let mut shards = Vec::with_capacity(shard_count);
        let mut torn = Vec::new();
        for id in 0..shard_count {
            let file_generation = found.get(&id).copied().unwrap_or(0);
            let path = shard_path(&dir, id, file_generation);
            let (shard, tail) = open_shard(path, file_generation)?;
            if let Some(t) = tail {
                tracing::warn!("truncated torn tail of {} ({} bytes)", t.path.display(), t.dropped_bytes);
                torn.push(t);
            }
            shards.push(Mutex::new(shard));
        }
        // older generations left by an interrupted compaction
        for entry in fs::read_dir(&dir)? {
            let name = entry?.file_name().to_string_lossy().into_owned();
            if let Some((id, generation)) = parse_shard_name(&name) {
                if found.get(&id).is_some_and(|g| *g > generation) {
                    let _ = fs::remove_file(dir.join(name));
                }
            }
        }
        Ok(Store {
            dir,
            shard_count,
            shards,
            torn,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn shard_count(&self) -> usize {
        self.shard_count
    }

    /// Torn tails dropped when this store was opened.
    pub fn recovered(&self) -> &[TornTail] {
        &self.torn
    }

    /// Appends regions; durable (fsynced) on return. Returns the generations.
    pub fn append(&self, regions: &[Region]) -> Result<Vec<u64>, StoreError> {
        self.write(regions, false, None)
    }

    /// Appends tombstones for the given regions.
    pub fn remove(&self, regions: &[Region]) -> Result<Vec<u64>, StoreError> {
        self.write(regions, true, None)
    }

    /// Like [`Store::append`] but stops after the planned byte count and
    /// returns [`StoreError::InjectedCrash`]. Reopen the store afterwards.
    pub fn append_with_fault(&self, regions: &[Region], plan: FaultPlan) -> Result<Vec<u64>, StoreError> {
        self.write(regions, false, Some(plan))
    }

    fn write(&self, regions: &[Region], tombstone: bool, fault: Option<FaultPlan>) -> Result<Vec<u64>, StoreError> {
        for r in regions {
            r.validate().map_err(|e| StoreError::Rejected(e.to_string()))?;
        }
        // group by shard, keeping input order inside each shard
        let mut by_shard: Vec<Vec<usize>> = vec![Vec::new(); self.shard_count];
        for (i, r) in regions.iter().enumerate() {
            by_shard[shard_of(&r.image_id, self.shard_count)].push(i);
        }
        let mut generations = vec![0u64; regions.len()];
        let mut budget = fault.map(|f| f.crash_after_bytes);
        let mut written = 0usize;
        for (sid, idxs) in by_shard.iter().enumerate() {
            if idxs.is_empty() {
                continue;
            }
            let mut shard = self.shards[sid].lock();
            let mut buf = Vec::new();
            let mut pending = Vec::with_capacity(idxs.len());
            let mut next_gen: HashMap<&str, u64> = HashMap::new();
            for &i in idxs {
                let r = &regions[i];
                let generation = match next_gen.get(r.region_id.as_str()) {
                    Some(g) => *g,
                    None => shard.latest.get(&r.region_id).map_or(0, |e| e.generation + 1),
                };
                next_gen.insert(&r.region_id, generation + 1);
                let rec = Record {
                    schema: SCHEMA_VERSION,
                    region: r.clone(),
                    generation,
                    tombstone,
                };
                let mut line = serde_json::to_vec(&rec).map_err(|e| StoreError::Rejected(e.to_string()))?;
                line.push(b'\n');
                let offset = shard.len + buf.len() as u64;
                pending.push((
                    r.region_id.clone(),
                    Entry {
                        offset,
                        len: line.len() as u64 - 1,
                        generation,
                        tombstone,
                    },
                ));
                generations[i] = generation;
                buf.extend_from_slice(&line);
            }
            if let Some(left) = budget.as_mut() {
                if buf.len() > *left {
                    shard.file.write_all(&buf[..*left])?;
                    shard.file.sync_data()?;
                    written += *left;
                    return Err(StoreError::InjectedCrash { written });
                }
                *left -= buf.len();
            }
            shard.file.write_all(&buf)?;
            shard.file.sync_data()?;
            written += buf.len();
            shard.len += buf.len() as u64;
            for (id, e) in pending {
                shard.latest.insert(id, e);
            }
        }
        Ok(generations)
    }

    /// Latest live generation of a region.
    pub fn get(&self, region_id: &str) -> Result<Option<Region>, StoreError> {
        Ok(self.get_record(region_id)?.filter(|r| !r.tombstone).map(|r| r.region))
    }

    pub fn get_record(&self, region_id: &str) -> Result<Option<Record>, StoreError> {
        for shard in &self.shards {
            let shard = shard.lock();
            if let Some(e) = shard.latest.get(region_id) {
                let mut buf = vec![0u8; e.len as usize];
                shard.file.read_exact_at(&mut buf, e.offset)?;
                let rec = Record::parse(&buf).map_err(|diagnostic| StoreError::Corrupt {
                    path: shard.path.clone(),
                    offset: e.offset,
                    diagnostic,
                })?;
                return Ok(Some(rec));
            }
        }
        Ok(None)
    }

    /// Latest live records passing `filter`, sorted by region id.
    pub fn scan(&self, filter: &ScanFilter) -> Result<Vec<Region>, StoreError> {
        let mut out = Vec::new();
        for shard in &self.shards {
            let shard = shard.lock();
            if shard.latest.values().all(|e| e.tombstone) {
                continue;
            }
            let mut bytes = vec![0u8; shard.len as usize];
            shard.file.read_exact_at(&mut bytes, 0)?;
            for e in shard.latest.values().filter(|e| !e.tombstone) {
                let line = &bytes[e.offset as usize..(e.offset + e.len) as usize];
                let rec = Record::parse(line).map_err(|diagnostic| StoreError::Corrupt {
                    path: shard.path.clone(),
                    offset: e.offset,
                    diagnostic,
                })?;
                if filter.matches(&rec.region) {
                    out.push(rec.region);
                }
            }
        }
        out.sort_by(|a, b| a.region_id.cmp(&b.region_id));
        Ok(out)
    }

    pub fn all(&self) -> Result<Vec<Region>, StoreError> {
        self.scan(&ScanFilter::default())
    }

    pub fn len(&self) -> usize {
        self.shards
            .iter()
            .map(|s| s.lock().latest.values().filter(|e| !e.tombstone).count())
            .sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn corpus_hash(&self) -> Result<String, StoreError> {
        Ok(corpus_hash(&self.all()?))
    }

    /// Rewrites every shard into a new file generation holding only the
    /// latest live record per region.
    pub fn compact(&self) -> Result<(), StoreError> {
        for shard in &self.shards {
            let mut shard = shard.lock();
            let mut bytes = vec![0u8; shard.len as usize];
            shard.file.read_exact_at(&mut bytes, 0)?;
            let mut live: Vec<(&String, &Entry)> = shard.latest.iter().filter(|(_, e)| !e.tombstone).collect();
            live.sort_by_key(|(_, e)| e.offset);
            let mut out = Vec::new();
            let mut latest = HashMap::new();
            for (id, e) in live {
                let offset = out.len() as u64;
                out.extend_from_slice(&bytes[e.offset as usize..(e.offset + e.len) as usize]);
                out.push(b'\n');
                latest.insert(id.clone(), Entry { offset, ..*e });
            }
            let next = shard.file_generation + 1;
            let id = shard_index(&shard.path);
            let path = shard_path(&self.dir, id, next);
            write_atomic(&path, &out)?;
            let old = std::mem::replace(&mut shard.path, path.clone());
            shard.file = OpenOptions::new().read(true).append(true).open(&path)?;
            shard.file_generation = next;
            shard.len = out.len() as u64;
            shard.latest = latest;
            fs::remove_file(old)?;
        }
        Ok(())
    }
}

fn parse_shard_name(name: &str) -> Option<(usize, u32)> {
    let rest = name.strip_prefix("shard-")?.strip_suffix(".jsonl")?;
    let (id, generation) = rest.split_once(".g")?;
    Some((id.parse().ok()?, generation.parse().ok()?))
}

fn shard_index(path: &Path) -> usize {
    path.file_name()
        .and_then(|n| n.to_str())
        .and_then(parse_shard_name)
        .map(|(id, _)| id)
        .expect("shard paths are well formed")
}

fn open_shard(path: PathBuf, file_generation: u32) -> Result<(Shard, Option<TornTail>), StoreError> {
    let mut file = OpenOptions::new()
        .read(true)
        .append(true)
        .create(true)
        .open(&path)?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)?;
    let keep = bytes.iter().rposition(|b| *b == b'\n').map_or(0, |p| p + 1);
    let mut torn = None;
    if keep < bytes.len() {
        file.set_len(keep as u64)?;
        file.sync_all()?;
        torn = Some(TornTail {
            path: path.clone(),
            dropped_bytes: (bytes.len() - keep) as u64,
        });
        bytes.truncate(keep);
    }
    let mut latest = HashMap::new();
    let mut offset = 0usize;
    for line in bytes.split_inclusive(|b| *b == b'\n') {
        let body = &line[..line.len() - 1];
        if !body.iter().all(u8::is_ascii_whitespace) {
            let rec = Record::parse(body).map_err(|diagnostic| StoreError::Corrupt {
                path: path.clone(),
                offset: offset as u64,
                diagnostic,
            })?;
            latest.insert(
                rec.region.region_id.clone(),
                Entry {
                    offset: offset as u64,
                    len: body.len() as u64,
                    generation: rec.generation,
                    tombstone: rec.tombstone,
                },
            );
        }
        offset += line.len();
    }
    Ok((
        Shard {
            path,
            file_generation,
            file,
            len: bytes.len() as u64,
            latest,
        },
        torn,
    ))
}
