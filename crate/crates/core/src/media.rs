//! Byte-addressable durable media behind a volatile line cache.
//!
//! Every write lands in a per-line overlay (`DirtyUnflushed`). A flush marks
//! the touched dirty lines `FlushedUnfenced`; a fence commits every flushed
//! line to the durable store. A crash at any point may persist any subset of
//! the flushed-but-unfenced lines and none of the unflushed ones, which is
//! what [`Media::crash_space`] enumerates.
//!
//! Two durable stores back the same overlay logic: an in-memory image
//! (simulated, optionally charging a latency per flush) and a plain file
//! whose fence writes the committed lines and calls `fdatasync`.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use crate::error::{Error, Result};

pub const DEFAULT_LINE_SIZE: u64 = 64;
pub const DEFAULT_ENUMERATION_BOUND: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MediaMode {
    RealFile,
    Simulated,
    SimulatedWithLatency,
}

#[derive(Debug, Clone)]
pub struct MediaConfig {
    pub capacity_bytes: u64,
    pub line_size: u64,
    pub mode: MediaMode,
    /// Charged on every flush call in `SimulatedWithLatency` mode.
    pub latency_ns_per_flush: u64,
    /// Backing file for `RealFile` mode.
    pub path: Option<PathBuf>,
    /// Upper bound on candidate lines for crash-state enumeration.
    pub enumeration_bound: usize,
}

impl MediaConfig {
    pub fn simulated(capacity_bytes: u64, line_size: u64) -> Self {
        MediaConfig {
            capacity_bytes,
            line_size,
            mode: MediaMode::Simulated,
            latency_ns_per_flush: 0,
            path: None,
            enumeration_bound: DEFAULT_ENUMERATION_BOUND,
        }
    }

    pub fn real_file(path: impl Into<PathBuf>, capacity_bytes: u64, line_size: u64) -> Self {
        MediaConfig {
            capacity_bytes,
            line_size,
            mode: MediaMode::RealFile,
            latency_ns_per_flush: 0,
            path: Some(path.into()),
            enumeration_bound: DEFAULT_ENUMERATION_BOUND,
        }
    }

    pub fn with_latency(mut self, ns_per_flush: u64) -> Self {
        self.mode = MediaMode::SimulatedWithLatency;
        self.latency_ns_per_flush = ns_per_flush;
        self
    }

    pub fn validate(&self) -> Result<()> {
        validate_geometry(self.capacity_bytes, self.line_size)?;
        if self.mode == MediaMode::RealFile && self.path.is_none() {
            return Err(Error::Config("real_file mode requires a path".into()));
        }
        Ok(())
    }
}

fn validate_geometry(capacity: u64, line_size: u64) -> Result<()> {
    if !line_size.is_power_of_two() || !(8..=4096).contains(&line_size) {
        return Err(Error::Config(format!(
            "line_size {line_size} must be a power of two in 8..=4096"
        )));
    }
    if !capacity.is_multiple_of(line_size) {
        return Err(Error::Config(format!(
            "capacity {capacity} is not a multiple of line_size {line_size}"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LineStatus {
    Clean,
    DirtyUnflushed,
    FlushedUnfenced,
}

/// Snapshot of one cache line as seen by tests and tooling.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CacheLineState {
    pub line_index: u64,
    pub status: LineStatus,
    pub pending_bytes: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CrashState {
    pub durable_image: Vec<u8>,
    pub persisted_subset: Vec<u64>,
}

/// One recorded media operation (only when recording is enabled).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MediaOp {
    Write { offset: u64, len: u64 },
    Read { offset: u64, len: u64 },
    Flush { offset: u64, len: u64 },
    Fence,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MediaStats {
    pub writes: u64,
    pub write_bytes: u64,
    pub reads: u64,
    pub read_bytes: u64,
    pub flushes: u64,
    pub flushed_lines: u64,
    pub fences: u64,
    pub committed_lines: u64,
    pub latency_ns: u64,
}

#[derive(Debug, Clone)]
struct PendingLine {
    status: LineStatus,
    bytes: Box<[u8]>,
}

#[derive(Debug)]
enum DurableStore {
    Memory(Vec<u8>),
    File { file: File, path: PathBuf },
}

#[derive(Debug)]
pub struct Media {
    capacity: u64,
    line_size: u64,
    mode: MediaMode,
    latency_ns_per_flush: u64,
    enumeration_bound: usize,
    store: DurableStore,
    overlay: BTreeMap<u64, PendingLine>,
    stats: MediaStats,
    /// Mutating operations (write/flush/fence) applied so far.
    ops: u64,
    crash_after: Option<u64>,
    recorded: Option<Vec<MediaOp>>,
}

impl Media {
    pub fn new(config: &MediaConfig) -> Result<Self> {
        config.validate()?;
        let store = match config.mode {
            MediaMode::Simulated | MediaMode::SimulatedWithLatency => {
                DurableStore::Memory(vec![0; config.capacity_bytes as usize])
            }
            MediaMode::RealFile => {
                let path = config.path.clone().expect("validated");
                let file = OpenOptions::new()
                    .read(true)
                    .write(true)
                    .create(true)
                    .truncate(false)
                    .open(&path)?;
                let len = file.metadata()?.len();
                if len < config.capacity_bytes {
                    file.set_len(config.capacity_bytes)?;
                }
                DurableStore::File { file, path }
            }
        };
        Ok(Self::with_store(config, store))
    }

    pub fn simulated(capacity_bytes: u64, line_size: u64) -> Result<Self> {
        Media::new(&MediaConfig::simulated(capacity_bytes, line_size))
    }

    /// Opens an existing file; capacity is the file length.
    pub fn open_file(path: impl AsRef<Path>, line_size: u64) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = OpenOptions::new().read(true).write(true).open(&path)?;
        let capacity = file.metadata()?.len();
        let config = MediaConfig::real_file(path.clone(), capacity, line_size);
        config.validate()?;
        Ok(Self::with_store(&config, DurableStore::File { file, path }))
    }

    /// A clean simulated media whose durable contents are `image`.
    pub fn from_image(image: Vec<u8>, line_size: u64) -> Result<Self> {
        let config = MediaConfig::simulated(image.len() as u64, line_size);
        config.validate()?;
        Ok(Self::with_store(&config, DurableStore::Memory(image)))
    }

    fn with_store(config: &MediaConfig, store: DurableStore) -> Self {
        Media {
            capacity: config.capacity_bytes,
            line_size: config.line_size,
            mode: config.mode,
            latency_ns_per_flush: config.latency_ns_per_flush,
            enumeration_bound: config.enumeration_bound,
            store,
            overlay: BTreeMap::new(),
            stats: MediaStats::default(),
            ops: 0,
            crash_after: None,
            recorded: None,
        }
    }

    pub fn capacity(&self) -> u64 {
        self.capacity
    }

    pub fn line_size(&self) -> u64 {
        self.line_size
    }

    pub fn mode(&self) -> MediaMode {
        self.mode
    }

    pub fn path(&self) -> Option<&Path> {
        match &self.store {
            DurableStore::File { path, .. } => Some(path),
            DurableStore::Memory(_) => None,
        }
    }

    pub fn stats(&self) -> MediaStats {
        self.stats
    }

    pub fn fence_count(&self) -> u64 {
        self.stats.fences
    }

    /// Number of mutating operations (write, flush, fence) applied so far.
    pub fn op_count(&self) -> u64 {
        self.ops
    }

    /// Allow at most `ops` more mutating operations; the next one fails with
    /// [`Error::Crashed`] and leaves the media untouched.
    pub fn crash_after(&mut self, ops: Option<u64>) {
        self.crash_after = ops.map(|n| self.ops + n);
    }

    pub fn set_enumeration_bound(&mut self, bound: usize) {
        self.enumeration_bound = bound;
    }

    pub fn record_ops(&mut self, on: bool) {
        self.recorded = if on { Some(Vec::new()) } else { None };
    }

    pub fn take_recorded(&mut self) -> Vec<MediaOp> {
        self.recorded.as_mut().map(std::mem::take).unwrap_or_default()
    }

    fn check_range(&self, offset: u64, len: u64) -> Result<()> {
        match offset.checked_add(len) {
            Some(end) if end <= self.capacity => Ok(()),
            _ => Err(Error::out_of_range(offset, len, self.capacity)),
        }
    }

    fn begin_op(&mut self) -> Result<()> {
        if let Some(limit) = self.crash_after {
            if self.ops >= limit {
                return Err(Error::Crashed { ops: self.ops });
            }
        }
        self.ops += 1;
        Ok(())
    }

    fn record(&mut self, op: MediaOp) {
        if let Some(ops) = self.recorded.as_mut() {
            ops.push(op);
        }
    }

    fn lines(&self, offset: u64, len: u64) -> std::ops::Range<u64> {
        if len == 0 {
            return 0..0;
        }
        offset / self.line_size..(offset + len - 1) / self.line_size + 1
    }

    fn read_durable(&self, offset: u64, buf: &mut [u8]) -> Result<()> {
        match &self.store {
            DurableStore::Memory(image) => {
                let start = offset as usize;
                buf.copy_from_slice(&image[start..start + buf.len()]);
            }
            DurableStore::File { file, .. } => file.read_exact_at(buf, offset)?,
        }
        Ok(())
    }

    pub fn write(&mut self, offset: u64, data: &[u8]) -> Result<()> {
        let len = data.len() as u64;
        self.check_range(offset, len)?;
        self.begin_op()?;
        self.record(MediaOp::Write { offset, len });
        self.stats.writes += 1;
        self.stats.write_bytes += len;
        for line in self.lines(offset, len) {
            let line_start = line * self.line_size;
            if !self.overlay.contains_key(&line) {
                let mut bytes = vec![0; self.line_size as usize].into_boxed_slice();
                self.read_durable(line_start, &mut bytes)?;
                self.overlay.insert(
                    line,
                    PendingLine {
                        status: LineStatus::Clean,
                        bytes,
                    },
                );
            }
            let pending = self.overlay.get_mut(&line).expect("inserted above");
            let lo = offset.max(line_start);
            let hi = (offset + len).min(line_start + self.line_size);
            pending.bytes[(lo - line_start) as usize..(hi - line_start) as usize]
                .copy_from_slice(&data[(lo - offset) as usize..(hi - offset) as usize]);
            pending.status = LineStatus::DirtyUnflushed;
        }
        Ok(())
    }

    /// Reads the current (cache-visible) contents.
    pub fn read(&mut self, offset: u64, buf: &mut [u8]) -> Result<()> {
        let len = buf.len() as u64;
        self.check_range(offset, len)?;
        self.record(MediaOp::Read { offset, len });
        self.stats.reads += 1;
        self.stats.read_bytes += len;
        self.read_durable(offset, buf)?;
        for (&line, pending) in self.overlay.range(self.lines(offset, len)) {
            let line_start = line * self.line_size;
            let lo = offset.max(line_start);
            let hi = (offset + len).min(line_start + self.line_size);
            buf[(lo - offset) as usize..(hi - offset) as usize]
                .copy_from_slice(&pending.bytes[(lo - line_start) as usize..(hi - line_start) as usize]);
        }
        Ok(())
    }

    pub fn flush(&mut self, offset: u64, len: u64) -> Result<()> {
        self.check_range(offset, len)?;
        self.begin_op()?;
        self.record(MediaOp::Flush { offset, len });
        self.stats.flushes += 1;
        let range = self.lines(offset, len);
        for pending in self.overlay.range_mut(range).map(|(_, p)| p) {
            if pending.status == LineStatus::DirtyUnflushed {
                pending.status = LineStatus::FlushedUnfenced;
                self.stats.flushed_lines += 1;
            }
        }
        if self.mode == MediaMode::SimulatedWithLatency && self.latency_ns_per_flush > 0 {
            spin_for(Duration::from_nanos(self.latency_ns_per_flush));
            self.stats.latency_ns += self.latency_ns_per_flush;
        }
        Ok(())
    }

    pub fn fence(&mut self) -> Result<()> {
        self.begin_op()?;
        self.record(MediaOp::Fence);
        self.stats.fences += 1;
        let committed: Vec<u64> = self
            .overlay
            .iter()
            .filter(|(_, p)| p.status == LineStatus::FlushedUnfenced)
            .map(|(&line, _)| line)
            .collect();
        if committed.is_empty() {
            return Ok(());
        }
        let line_size = self.line_size;
        for &line in &committed {
            let pending = self.overlay.remove(&line).expect("listed above");
            let start = line * line_size;
            match &mut self.store {
                DurableStore::Memory(image) => {
                    image[start as usize..(start + line_size) as usize].copy_from_slice(&pending.bytes)
                }
                DurableStore::File { file, .. } => file.write_all_at(&pending.bytes, start)?,
            }
        }
        if let DurableStore::File { file, .. } = &self.store {
            file.sync_data()?;
        }
        self.stats.committed_lines += committed.len() as u64;
        Ok(())
    }

    /// Flushes and fences everything outstanding, including unflushed lines.
    pub fn persist_all(&mut self) -> Result<()> {
        let capacity = self.capacity;
        self.flush(0, capacity)?;
        self.fence()
    }

    /// The committed durable image, without any volatile overlay.
    pub fn durable_snapshot(&self) -> Result<Vec<u8>> {
        let mut image = vec![0; self.capacity as usize];
        self.read_durable(0, &mut image)?;
        Ok(image)
    }

    pub fn line_state(&self, line_index: u64) -> Result<CacheLineState> {
        if line_index >= self.capacity / self.line_size {
            return Err(Error::out_of_range(
                line_index * self.line_size,
                self.line_size,
                self.capacity,
            ));
        }
        Ok(match self.overlay.get(&line_index) {
            Some(p) => CacheLineState {
                line_index,
                status: p.status,
                pending_bytes: p.bytes.to_vec(),
            },
            None => {
                let mut bytes = vec![0; self.line_size as usize];
                self.read_durable(line_index * self.line_size, &mut bytes)?;
                CacheLineState {
                    line_index,
                    status: LineStatus::Clean,
                    pending_bytes: bytes,
                }
            }
        })
    }

    /// Lines currently not clean, in index order.
    pub fn pending_lines(&self) -> Vec<CacheLineState> {
        self.overlay
            .iter()
            .filter(|(_, p)| p.status != LineStatus::Clean)
            .map(|(&line_index, p)| CacheLineState {
                line_index,
                status: p.status,
                pending_bytes: p.bytes.to_vec(),
            })
            .collect()
    }

    /// All crash states reachable now: one per subset of the
    /// flushed-but-unfenced lines.
    pub fn enumerate_crash_states(&self) -> Result<Vec<CrashState>> {
        let space = self.crash_space(false)?;
        let mut states = Vec::with_capacity(space.len());
        space.for_each(|subset, image| {
            states.push(CrashState {
                durable_image: image.to_vec(),
                persisted_subset: subset.to_vec(),
            });
        });
        Ok(states)
    }

    /// Crash-state space over the flushed-but-unfenced lines.
    ///
    /// With `distinct_only`, lines whose pending bytes equal their durable
    /// bytes are left out: persisting them cannot change the image, so the
    /// space still covers every reachable durable image exactly once.
    pub fn crash_space(&self, distinct_only: bool) -> Result<CrashSpace> {
        let base = self.durable_snapshot()?;
        let mut lines = Vec::new();
        for (&line, pending) in &self.overlay {
            if pending.status != LineStatus::FlushedUnfenced {
                continue;
            }
            let start = (line * self.line_size) as usize;
            let durable = &base[start..start + self.line_size as usize];
            if distinct_only && durable == &pending.bytes[..] {
                continue;
            }
            lines.push(CandidateLine {
                index: line,
                durable: durable.to_vec(),
                pending: pending.bytes.to_vec(),
            });
        }
        if lines.len() > self.enumeration_bound {
            return Err(Error::EnumerationBound {
                lines: lines.len(),
                bound: self.enumeration_bound,
            });
        }
        Ok(CrashSpace {
            base,
            line_size: self.line_size,
            lines,
        })
    }
}

fn spin_for(duration: Duration) {
    let start = Instant::now();
    while start.elapsed() < duration {
        std::hint::spin_loop();
    }
}

#[derive(Debug, Clone)]
struct CandidateLine {
    index: u64,
    durable: Vec<u8>,
    pending: Vec<u8>,
}

/// The set of durable images a crash could leave behind.
#[derive(Debug, Clone)]
pub struct CrashSpace {
    base: Vec<u8>,
    line_size: u64,
    lines: Vec<CandidateLine>,
}

impl CrashSpace {
    pub fn len(&self) -> usize {
        1usize << self.lines.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn candidate_lines(&self) -> Vec<u64> {
        self.lines.iter().map(|l| l.index).collect()
    }

    /// Visits every state in Gray-code order, flipping one line per step so
    /// the image is patched in place instead of rebuilt.
    pub fn for_each(&self, mut visit: impl FnMut(&[u64], &[u8])) {
        let mut image = self.base.clone();
        let mut persisted = vec![false; self.lines.len()];
        let mut subset = Vec::with_capacity(self.lines.len());
        for step in 0..self.len() {
            if step > 0 {
                let bit = step.trailing_zeros() as usize;
                persisted[bit] = !persisted[bit];
                let line = &self.lines[bit];
                let start = (line.index * self.line_size) as usize;
                let src = if persisted[bit] { &line.pending } else { &line.durable };
                image[start..start + src.len()].copy_from_slice(src);
            }
            subset.clear();
            subset.extend(
                self.lines
                    .iter()
                    .zip(&persisted)
                    .filter(|(_, &on)| on)
                    .map(|(l, _)| l.index),
            );
            visit(&subset, &image);
        }
    }
}
