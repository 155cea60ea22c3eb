//! Crash injection and checking.
//!
//! A trace is run once without faults to record the image of the data area
//! at every completed sync. It is then rerun with the media told to fail
//! after `b` operations, for every boundary `b` from 0 to the number of
//! media operations the trace performs. At each boundary every durable image
//! the crash could leave behind is recovered with [`Region::open`] and
//! compared with the recorded images: with `e` syncs completed it must equal
//! the image of sync `e`, or of sync `e + 1` if that sync had started.
//!
//! Traces are JSON arrays of `{"op": ..., "args": {...}}` records; see
//! [`TraceOp`]. Offsets are data-area offsets.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rand::rngs::StdRng;
use rand::{Rng, RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heap::{walk_image, Heap, HEAP_MAGIC};
use crate::kv::KvStore;
use crate::layout::Layout;
use crate::media::Media;
use crate::msync::SyncReport;
use crate::region::{format, Region, RegionConfig, SyncOptions};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", content = "args", rename_all = "snake_case")]
pub enum TraceOp {
    /// Tracked write of `data` at `offset`.
    Write {
        offset: u64,
        data: Vec<u8>,
    },
    /// Instrumented scalar store of the low `size` bytes of `value`.
    Store {
        offset: u64,
        size: u64,
        value: u64,
    },
    Memset {
        offset: u64,
        byte: u8,
        len: u64,
    },
    /// Copy through a temporary buffer.
    Memcpy {
        dst: u64,
        src: u64,
        len: u64,
    },
    Memmove {
        dst: u64,
        src: u64,
        len: u64,
    },
    Sync,
    /// Heap allocation; later ops name it by its position among allocations.
    Alloc {
        size: u64,
    },
    Free {
        alloc: usize,
    },
    /// Set the heap root to an allocation, or clear it.
    SetRoot {
        alloc: Option<usize>,
    },
    /// KV put (includes its own sync).
    Put {
        key: u64,
        value: Vec<u8>,
    },
    /// KV delete (includes its own sync).
    Delete {
        key: u64,
    },
}

impl TraceOp {
    fn uses_heap(&self) -> bool {
        matches!(
            self,
            TraceOp::Alloc { .. }
                | TraceOp::Free { .. }
                | TraceOp::SetRoot { .. }
                | TraceOp::Put { .. }
                | TraceOp::Delete { .. }
        )
    }
}

pub fn parse_trace(json: &str) -> Result<Vec<TraceOp>> {
    serde_json::from_str(json).map_err(|e| Error::Trace(e.to_string()))
}

pub fn load_trace(path: impl AsRef<Path>) -> Result<Vec<TraceOp>> {
    parse_trace(&std::fs::read_to_string(path)?)
}

pub fn trace_to_json(ops: &[TraceOp]) -> String {
    serde_json::to_string_pretty(ops).expect("trace ops serialize")
}

#[derive(Debug, Clone, PartialEq)]
pub struct HarnessConfig {
    pub region_size: u64,
    pub line_size: u64,
    pub max_threads: usize,
    pub slot_size: u64,
    pub enumeration_bound: usize,
    pub options: SyncOptions,
    pub kv_buckets: u64,
    pub kv_value_size: u64,
}

impl HarnessConfig {
    /// 128-byte region on 8-byte lines, for raw stores.
    pub fn raw() -> Self {
        HarnessConfig {
            region_size: 128,
            line_size: 8,
            max_threads: 1,
            slot_size: 2048,
            enumeration_bound: 16,
            options: SyncOptions::default(),
            kv_buckets: 4,
            kv_value_size: 8,
        }
    }

    /// 1 KiB region on 64-byte lines and 4 KiB slots, for heap and KV
    /// traces.
    pub fn structured() -> Self {
        HarnessConfig {
            region_size: 1024,
            line_size: 64,
            slot_size: 4096,
            ..HarnessConfig::raw()
        }
    }

    pub fn for_trace(ops: &[TraceOp]) -> Self {
        if ops.iter().any(TraceOp::uses_heap) {
            HarnessConfig::structured()
        } else {
            HarnessConfig::raw()
        }
    }

    pub fn region_config(&self) -> RegionConfig {
        RegionConfig::new(self.region_size).with_slots(self.max_threads, self.slot_size)
    }

    pub fn layout(&self) -> Result<Layout> {
        self.region_config().layout()
    }

    fn fresh_media(&self) -> Result<Media> {
        let mut media = Media::simulated(self.layout()?.media_capacity(self.line_size), self.line_size)?;
        media.set_enumeration_bound(self.enumeration_bound);
        Ok(media)
    }
}

struct Executor<'r> {
    region: &'r Region,
    config: &'r HarnessConfig,
    heap: Option<Heap<'r>>,
    kv: Option<KvStore<'r>>,
    allocs: Vec<u64>,
}

impl<'r> Executor<'r> {
    fn heap(&mut self) -> Result<&Heap<'r>> {
        if self.heap.is_none() {
            self.heap = Some(Heap::attach(self.region)?);
        }
        Ok(self.heap.as_ref().expect("attached above"))
    }

    fn kv(&mut self) -> Result<&KvStore<'r>> {
        if self.kv.is_none() {
            let heap = Heap::attach(self.region)?;
            self.kv = Some(KvStore::open_or_create(
                heap,
                self.config.kv_buckets,
                self.config.kv_value_size,
            )?);
        }
        Ok(self.kv.as_ref().expect("created above"))
    }

    fn alloc_offset(&self, index: usize) -> Result<u64> {
        self.allocs
            .get(index)
            .copied()
            .ok_or_else(|| Error::Trace(format!("allocation {index} does not exist")))
    }

    fn apply(&mut self, op: &TraceOp) -> Result<()> {
        let r = self.region;
        match op {
            TraceOp::Write { offset, data } => r.tracked_write(r.addr(*offset), data),
            TraceOp::Store { offset, size, value } => {
                if !matches!(size, 1 | 2 | 4 | 8) {
                    return Err(Error::InvalidStore { size: *size });
                }
                r.store(r.addr(*offset), &value.to_le_bytes()[..*size as usize])
            }
            TraceOp::Memset { offset, byte, len } => r.tracked_memset(r.addr(*offset), *byte, *len),
            TraceOp::Memcpy { dst, src, len } => {
                let mut buf = vec![0; *len as usize];
                r.read(r.addr(*src), &mut buf)?;
                r.tracked_memcpy(r.addr(*dst), &buf)
            }
            TraceOp::Memmove { dst, src, len } => r.tracked_memmove(r.addr(*dst), r.addr(*src), *len),
            TraceOp::Sync => r.fa_msync().map(drop),
            TraceOp::Alloc { size } => {
                let offset = self.heap()?.alloc(*size)?;
                self.allocs.push(offset);
                Ok(())
            }
            TraceOp::Free { alloc } => {
                let offset = self.alloc_offset(*alloc)?;
                self.heap()?.free(offset)
            }
            TraceOp::SetRoot { alloc } => {
                let offset = match alloc {
                    Some(i) => self.alloc_offset(*i)?,
                    None => 0,
                };
                self.heap()?.root_set(offset)
            }
            TraceOp::Put { key, value } => self.kv()?.put(*key, value).map(drop),
            TraceOp::Delete { key } => self.kv()?.delete(*key).map(drop),
        }
    }
}

/// Applies a trace to an open region.
pub fn run_trace(region: &Region, config: &HarnessConfig, ops: &[TraceOp]) -> Result<()> {
    let mut exec = Executor {
        region,
        config,
        heap: None,
        kv: None,
        allocs: Vec::new(),
    };
    ops.iter().try_for_each(|op| exec.apply(op))
}

/// One run of a trace from blank media, possibly cut short by a crash.
#[derive(Debug)]
pub struct Execution {
    pub media: Media,
    pub crashed: bool,
    pub completed_syncs: u64,
    pub sync_in_progress: bool,
    /// Data-area image before the first sync and after each completed one.
    pub epoch_images: Vec<Vec<u8>>,
    pub sync_reports: Vec<SyncReport>,
}

/// Formats blank media and runs `ops`, allowing `crash_after` media
/// operations if given.
pub fn execute(config: &HarnessConfig, ops: &[TraceOp], crash_after: Option<u64>) -> Result<Execution> {
    let layout = config.layout()?;
    let mut media = config.fresh_media()?;
    media.crash_after(crash_after);
    let blank = vec![0; config.region_size as usize];
    match format(&mut media, &layout) {
        Ok(()) => {}
        Err(e) if e.is_crash() => {
            return Ok(Execution {
                media,
                crashed: true,
                completed_syncs: 0,
                sync_in_progress: false,
                epoch_images: vec![blank],
                sync_reports: Vec::new(),
            })
        }
        Err(e) => return Err(e),
    }
    let region = Region::open_with(config.region_config(), media, config.options)?;
    region.capture_epoch_images(true);
    let crashed = match run_trace(&region, config, ops) {
        Ok(()) => false,
        Err(e) if e.is_crash() => true,
        Err(e) => return Err(e),
    };
    let mut epoch_images = vec![blank];
    epoch_images.extend(region.take_epoch_images());
    Ok(Execution {
        crashed,
        completed_syncs: region.sync_epoch(),
        sync_in_progress: region.sync_in_progress(),
        epoch_images,
        sync_reports: region.sync_history(),
        media: region.into_media(),
    })
}

/// The fault-free run a sweep compares against.
#[derive(Debug, Clone)]
pub struct Reference {
    pub media_ops: u64,
    pub epoch_images: Vec<Vec<u8>>,
    pub sync_reports: Vec<SyncReport>,
    pub final_image: Vec<u8>,
}

pub fn reference(config: &HarnessConfig, ops: &[TraceOp]) -> Result<Reference> {
    let run = execute(config, ops, None)?;
    Ok(Reference {
        media_ops: run.media.op_count(),
        final_image: run.media.durable_snapshot()?,
        epoch_images: run.epoch_images,
        sync_reports: run.sync_reports,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ViolationKind {
    /// Recovered to the image of a sync older than the last one returned.
    DurabilityRollback,
    /// Recovered to an image that no sync produced.
    AtomicityTear,
    /// Opening the crashed media failed.
    RecoveryFailure,
    /// The heap walker found leaks, overlaps or a broken free list.
    HeapInconsistency,
}

impl fmt::Display for ViolationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ViolationKind::DurabilityRollback => "durability-rollback",
            ViolationKind::AtomicityTear => "atomicity-tear",
            ViolationKind::RecoveryFailure => "recovery-failure",
            ViolationKind::HeapInconsistency => "heap-inconsistency",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Counterexample {
    pub boundary: u64,
    pub kind: ViolationKind,
    pub completed_syncs: u64,
    pub sync_in_progress: bool,
    pub persisted_lines: Vec<u64>,
    pub detail: String,
}

impl fmt::Display for Counterexample {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} at boundary {} ({} syncs done{}, persisted lines {:?}): {}",
            self.kind,
            self.boundary,
            self.completed_syncs,
            if self.sync_in_progress { ", one in progress" } else { "" },
            self.persisted_lines,
            self.detail
        )
    }
}

/// Counterexamples kept per boundary and per sweep; the counts cover all
/// of them.
pub const KEPT_EXAMPLES: usize = 32;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BoundaryVerdict {
    pub boundary: u64,
    pub states: usize,
    pub candidate_lines: usize,
    pub completed_syncs: u64,
    pub sync_in_progress: bool,
    pub violations: BTreeMap<ViolationKind, u64>,
    /// The first [`KEPT_EXAMPLES`] violations.
    pub counterexamples: Vec<Counterexample>,
}

impl BoundaryVerdict {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

fn describe_diff(expected: &[u8], got: &[u8]) -> String {
    let diffs: Vec<String> = expected
        .iter()
        .zip(got)
        .enumerate()
        .filter(|(_, (a, b))| a != b)
        .take(8)
        .map(|(i, (a, b))| format!("@{i}: {a:#04x}->{b:#04x}"))
        .collect();
    format!("differs from expected image {}", diffs.join(" "))
}

/// Crashes the trace after `boundary` media operations and recovers every
/// reachable durable image.
pub fn inject_and_check(
    config: &HarnessConfig,
    ops: &[TraceOp],
    reference: &Reference,
    boundary: u64,
) -> Result<BoundaryVerdict> {
    let run = execute(config, ops, Some(boundary))?;
    let e = run.completed_syncs as usize;
    let images = &reference.epoch_images;
    let expected = images
        .get(e)
        .ok_or_else(|| Error::Trace(format!("run completed {e} syncs, reference only {}", images.len() - 1)))?;
    let next = if run.sync_in_progress { images.get(e + 1) } else { None };
    let check_heap = ops.iter().any(TraceOp::uses_heap);
    let space = run.media.crash_space(true)?;
    let mut verdict = BoundaryVerdict {
        boundary,
        states: space.len(),
        candidate_lines: space.candidate_lines().len(),
        completed_syncs: run.completed_syncs,
        sync_in_progress: run.sync_in_progress,
        violations: BTreeMap::new(),
        counterexamples: Vec::new(),
    };
    space.for_each(|subset, image| {
        let violation = match recover_image(config, image) {
            Err(err) => Some((ViolationKind::RecoveryFailure, err.to_string())),
            Ok(got) if &got == expected || next == Some(&got) => heap_problem(check_heap, &got),
            Ok(got) => Some(match images[..e].iter().position(|img| *img == got) {
                Some(j) => (
                    ViolationKind::DurabilityRollback,
                    format!("recovered the image of sync {j} after sync {e} returned"),
                ),
                None => (ViolationKind::AtomicityTear, describe_diff(expected, &got)),
            }),
        };
        if let Some((kind, detail)) = violation {
            *verdict.violations.entry(kind).or_default() += 1;
            if verdict.counterexamples.len() >= KEPT_EXAMPLES {
                return;
            }
            verdict.counterexamples.push(Counterexample {
                boundary,
                kind,
                completed_syncs: run.completed_syncs,
                sync_in_progress: run.sync_in_progress,
                persisted_lines: subset.to_vec(),
                detail,
            });
        }
    });
    Ok(verdict)
}

fn heap_problem(check_heap: bool, image: &[u8]) -> Option<(ViolationKind, String)> {
    if !check_heap || image[..8] != HEAP_MAGIC.to_le_bytes() {
        return None;
    }
    match walk_image(image) {
        Ok(walk) if walk.is_consistent() => None,
        Ok(walk) => Some((ViolationKind::HeapInconsistency, walk.problems.join("; "))),
        Err(e) => Some((ViolationKind::HeapInconsistency, e.to_string())),
    }
}

/// Opens a crash image as a fresh process would and returns the recovered
/// data area.
pub fn recover_image(config: &HarnessConfig, image: &[u8]) -> Result<Vec<u8>> {
    let media = Media::from_image(image.to_vec(), config.line_size)?;
    let region = Region::open_with(config.region_config(), media, config.options)?;
    Ok(region.working_image())
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SweepSummary {
    pub traces: u64,
    pub boundaries: u64,
    pub states: u64,
    pub syncs: u64,
    pub max_candidate_lines: usize,
    /// Fences issued by each sync of the reference runs.
    pub fences_per_sync: Vec<u64>,
    pub violations: BTreeMap<ViolationKind, u64>,
    pub examples: Vec<Counterexample>,
}

impl SweepSummary {
    pub fn counterexamples(&self) -> u64 {
        self.violations.values().sum()
    }

    pub fn count(&self, kind: ViolationKind) -> u64 {
        self.violations.get(&kind).copied().unwrap_or(0)
    }

    pub fn merge(&mut self, other: SweepSummary) {
        self.traces += other.traces;
        self.boundaries += other.boundaries;
        self.states += other.states;
        self.syncs += other.syncs;
        self.max_candidate_lines = self.max_candidate_lines.max(other.max_candidate_lines);
        self.fences_per_sync.extend(other.fences_per_sync);
        for (kind, n) in other.violations {
            *self.violations.entry(kind).or_default() += n;
        }
        let room = KEPT_EXAMPLES.saturating_sub(self.examples.len());
        self.examples.extend(other.examples.into_iter().take(room));
    }
}

impl fmt::Display for SweepSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "traces {} boundaries {} crash states {} syncs {} max candidate lines {}",
            self.traces, self.boundaries, self.states, self.syncs, self.max_candidate_lines
        )?;
        if self.violations.is_empty() {
            write!(f, "counterexamples 0")
        } else {
            let by_kind: Vec<String> = self.violations.iter().map(|(k, n)| format!("{k} {n}")).collect();
            write!(f, "counterexamples {} ({})", self.counterexamples(), by_kind.join(", "))?;
            for example in &self.examples {
                write!(f, "\n  {example}")?;
            }
            Ok(())
        }
    }
}

/// Checks every boundary of one trace.
pub fn sweep(config: &HarnessConfig, ops: &[TraceOp]) -> Result<SweepSummary> {
    let reference = reference(config, ops)?;
    let mut summary = SweepSummary {
        traces: 1,
        boundaries: reference.media_ops + 1,
        syncs: reference.sync_reports.len() as u64,
        fences_per_sync: reference.sync_reports.iter().map(|r| r.fences_issued).collect(),
        ..SweepSummary::default()
    };
    for boundary in 0..=reference.media_ops {
        let verdict = inject_and_check(config, ops, &reference, boundary)?;
        summary.states += verdict.states as u64;
        summary.max_candidate_lines = summary.max_candidate_lines.max(verdict.candidate_lines);
        for (kind, n) in verdict.violations {
            *summary.violations.entry(kind).or_default() += n;
        }
        let room = KEPT_EXAMPLES.saturating_sub(summary.examples.len());
        summary.examples.extend(verdict.counterexamples.into_iter().take(room));
    }
    Ok(summary)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceKind {
    /// Stores, writes and mem* calls.
    Raw,
    /// Allocations, frees and root updates.
    Heap,
    /// KV puts and deletes.
    Kv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RandomTraceSpec {
    pub kind: TraceKind,
    pub max_ops: usize,
    pub max_syncs: usize,
}

impl RandomTraceSpec {
    pub fn raw() -> Self {
        RandomTraceSpec::for_kind(TraceKind::Raw)
    }

    /// Heap traces sync more often so each sync's log fits a slot.
    pub fn for_kind(kind: TraceKind) -> Self {
        let (max_ops, max_syncs) = match kind {
            TraceKind::Raw | TraceKind::Kv => (20, 3),
            TraceKind::Heap => (12, 6),
        };
        RandomTraceSpec {
            kind,
            max_ops,
            max_syncs,
        }
    }
}

fn random_raw_op(rng: &mut StdRng, region: u64, hot: &[u64]) -> TraceOp {
    let offset = |rng: &mut StdRng, len: u64| {
        let pick = if rng.random_bool(0.5) {
            hot[rng.random_range(0..hot.len())]
        } else {
            rng.random_range(0..region)
        };
        pick.min(region - len)
    };
    match rng.random_range(0..20) {
        0..=6 => {
            let size = [1u64, 2, 4, 8][rng.random_range(0..4)];
            let at = offset(rng, size) / size * size;
            TraceOp::Store {
                offset: at,
                size,
                value: rng.next_u64(),
            }
        }
        7..=11 => {
            let len = rng.random_range(1..=8);
            let mut data = vec![0; len as usize];
            rng.fill_bytes(&mut data);
            TraceOp::Write {
                offset: offset(rng, len),
                data,
            }
        }
        12..=14 => {
            let len = rng.random_range(1..=12);
            TraceOp::Memset {
                offset: offset(rng, len),
                byte: rng.random(),
                len,
            }
        }
        15..=17 => {
            let len = rng.random_range(1..=8);
            TraceOp::Memmove {
                dst: offset(rng, len),
                src: offset(rng, len),
                len,
            }
        }
        _ => {
            let len = rng.random_range(1..=8);
            TraceOp::Memcpy {
                dst: offset(rng, len),
                src: offset(rng, len),
                len,
            }
        }
    }
}

/// A random trace of at most `spec.max_ops` operations besides syncs, with
/// at most `spec.max_syncs` syncs spread between them.
pub fn random_trace(rng: &mut StdRng, spec: &RandomTraceSpec, config: &HarnessConfig) -> Vec<TraceOp> {
    let n = rng.random_range(1..=spec.max_ops.max(1));
    let mut body: Vec<TraceOp> = match spec.kind {
        TraceKind::Raw => {
            let hot: Vec<u64> = (0..3).map(|_| rng.random_range(0..config.region_size)).collect();
            (0..n).map(|_| random_raw_op(rng, config.region_size, &hot)).collect()
        }
        TraceKind::Heap => {
            let mut live: Vec<usize> = Vec::new();
            let mut allocs = 0;
            let mut ops = Vec::new();
            for _ in 0..n {
                let roll = rng.random_range(0..10);
                if roll < 5 || live.is_empty() {
                    ops.push(TraceOp::Alloc {
                        size: rng.random_range(1..=48),
                    });
                    live.push(allocs);
                    allocs += 1;
                } else if roll < 8 {
                    let i = live.swap_remove(rng.random_range(0..live.len()));
                    ops.push(TraceOp::Free { alloc: i });
                } else {
                    let target = live[rng.random_range(0..live.len())];
                    ops.push(TraceOp::SetRoot { alloc: Some(target) });
                }
            }
            // a root must stay live: clear it before its block is freed
            let mut root = None;
            let mut fixed = Vec::new();
            for op in ops {
                match op {
                    TraceOp::SetRoot { alloc } => root = alloc,
                    TraceOp::Free { alloc } if root == Some(alloc) => {
                        fixed.push(TraceOp::SetRoot { alloc: None });
                        root = None;
                    }
                    _ => {}
                }
                fixed.push(op);
            }
            fixed
        }
        TraceKind::Kv => (0..n)
            .map(|_| {
                let key = rng.random_range(0..12);
                if rng.random_bool(0.7) {
                    let mut value = vec![0; config.kv_value_size as usize];
                    rng.fill_bytes(&mut value);
                    TraceOp::Put { key, value }
                } else {
                    TraceOp::Delete { key }
                }
            })
            .collect(),
    };
    let syncs = rng.random_range(0..=spec.max_syncs);
    for k in 0..syncs {
        // spread syncs evenly, with jitter
        let ideal = body.len() * (k + 1) / (syncs + 1);
        let at = (ideal + rng.random_range(0..=2)).saturating_sub(1).min(body.len());
        let at = (at + k).min(body.len());
        body.insert(at, TraceOp::Sync);
    }
    body
}

#[derive(Debug, Clone, Default)]
pub struct RandomSweep {
    pub summary: SweepSummary,
    /// Traces discarded because a crash point exceeded the enumeration bound
    /// or the trace outgrew the heap or a log slot.
    pub regenerated: u64,
}

/// Sweeps `count` random traces drawn from `seed`.
pub fn random_sweep(config: &HarnessConfig, spec: &RandomTraceSpec, seed: u64, count: u64) -> Result<RandomSweep> {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut out = RandomSweep::default();
    while out.summary.traces < count {
        let trace = random_trace(&mut rng, spec, config);
        match sweep(config, &trace) {
            Ok(summary) => out.summary.merge(summary),
            Err(Error::EnumerationBound { .. } | Error::OutOfMemory { .. } | Error::LogFull { .. }) => {
                out.regenerated += 1
            }
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}
