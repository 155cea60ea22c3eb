//! YCSB-style workloads over [`KvStore`] and the benchmark driver that
//! compares the sync modes.

use std::collections::{BTreeMap, HashSet, VecDeque};
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::rngs::StdRng;
use rand::{Rng, RngCore, SeedableRng};
use rand_distr::{Distribution, Zipf};

use crate::error::{Error, Result};
use crate::heap::Heap;
use crate::kv::KvStore;
use crate::media::{Media, MediaConfig};
use crate::region::{BaselineMode, Region, RegionConfig, SyncOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mix {
    /// Read 50%, update 50%.
    A,
    /// Read 95%, update 5%.
    B,
    /// Read 100%.
    C,
    /// Read among the latest 100 keys 90%, insert a new key 5%, delete the
    /// oldest live key 5%.
    D,
    /// Read-modify-write.
    E,
    /// Scans of 1 to 10 records.
    F,
    /// Update 100%.
    G,
}

impl Mix {
    pub const ALL: [Mix; 7] = [Mix::A, Mix::B, Mix::C, Mix::D, Mix::E, Mix::F, Mix::G];
}

impl fmt::Display for Mix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl FromStr for Mix {
    type Err = Error;

    fn from_str(s: &str) -> Result<Mix> {
        Mix::ALL
            .into_iter()
            .find(|m| m.to_string().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown mix {s:?}; expected A..G")))
    }
}

impl fmt::Display for BaselineMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BaselineMode::Famsync => "famsync",
            BaselineMode::Page4k => "page4k",
            BaselineMode::Wal => "wal",
        })
    }
}

impl FromStr for BaselineMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<BaselineMode> {
        match s {
            "famsync" => Ok(BaselineMode::Famsync),
            "page4k" => Ok(BaselineMode::Page4k),
            "wal" => Ok(BaselineMode::Wal),
            _ => Err(Error::Config(format!(
                "unknown mode {s:?}; expected famsync, page4k or wal"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KeyDist {
    Uniform,
    Zipfian { theta: f64 },
}

impl Default for KeyDist {
    fn default() -> Self {
        KeyDist::Zipfian { theta: 0.99 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkloadSpec {
    pub mix: Mix,
    pub record_count: u64,
    pub op_count: u64,
    pub key_dist: KeyDist,
    pub value_size: u64,
    pub seed: u64,
}

impl WorkloadSpec {
    pub fn new(mix: Mix) -> Self {
        WorkloadSpec {
            mix,
            record_count: 100_000,
            op_count: 100_000,
            key_dist: KeyDist::default(),
            value_size: 8,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum KvOp {
    Read(u64),
    Update(u64, Vec<u8>),
    Insert(u64, Vec<u8>),
    Delete(u64),
    /// Read the value, bump its first byte, write it back.
    ReadModifyWrite(u64),
    Scan(u64, usize),
}

impl KvOp {
    pub fn is_mutation(&self) -> bool {
        matches!(
            self,
            KvOp::Update(..) | KvOp::Insert(..) | KvOp::Delete(_) | KvOp::ReadModifyWrite(_)
        )
    }

    pub fn key(&self) -> u64 {
        match self {
            KvOp::Read(k)
            | KvOp::Update(k, _)
            | KvOp::Insert(k, _)
            | KvOp::Delete(k)
            | KvOp::ReadModifyWrite(k)
            | KvOp::Scan(k, _) => *k,
        }
    }

    /// Applies the operation to a map with the store's semantics.
    pub fn apply_to(&self, map: &mut BTreeMap<u64, Vec<u8>>, value_size: u64) {
        match self {
            KvOp::Update(k, v) | KvOp::Insert(k, v) => {
                map.insert(*k, v.clone());
            }
            KvOp::Delete(k) => {
                map.remove(k);
            }
            KvOp::ReadModifyWrite(k) => {
                let mut v = map.get(k).cloned().unwrap_or_else(|| vec![0; value_size as usize]);
                v[0] = v[0].wrapping_add(1);
                map.insert(*k, v);
            }
            KvOp::Read(_) | KvOp::Scan(..) => {}
        }
    }

    /// Runs the operation against the store; returns whether it synced.
    pub fn execute(&self, store: &KvStore<'_>) -> Result<bool> {
        match self {
            KvOp::Read(k) => {
                store.get(*k)?;
                Ok(false)
            }
            KvOp::Scan(k, n) => {
                store.scan(*k, *n)?;
                Ok(false)
            }
            KvOp::Update(k, v) | KvOp::Insert(k, v) => {
                store.put(*k, v)?;
                Ok(true)
            }
            KvOp::Delete(k) => {
                store.delete(*k)?;
                Ok(true)
            }
            KvOp::ReadModifyWrite(k) => {
                let mut v = store.get(*k)?.unwrap_or_else(|| vec![0; store.value_size() as usize]);
                v[0] = v[0].wrapping_add(1);
                store.put(*k, &v)?;
                Ok(true)
            }
        }
    }
}

fn scramble(rank: u64) -> u64 {
    // FNV-1a over the rank's bytes, as YCSB's scrambled zipfian does
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in rank.to_le_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Deterministic operation stream for one thread's partition of the key
/// space. Thread `t` of `T` owns the keys congruent to `t` mod `T`.
#[derive(Debug)]
pub struct OpGenerator {
    mix: Mix,
    value_size: u64,
    dist: KeyDist,
    zipf: Option<Zipf<f64>>,
    rng: StdRng,
    thread: u64,
    threads: u64,
    owned: u64,
    live: VecDeque<u64>,
    next_insert: u64,
}

impl OpGenerator {
    pub fn new(spec: &WorkloadSpec, thread: u64, threads: u64) -> Result<OpGenerator> {
        if threads == 0 || thread >= threads {
            return Err(Error::Config(format!("thread {thread} of {threads}")));
        }
        let owned = spec.record_count.saturating_sub(thread).div_ceil(threads);
        let zipf = match spec.key_dist {
            KeyDist::Zipfian { theta } if owned > 0 => {
                Some(Zipf::new(owned as f64, theta).map_err(|e| Error::Config(format!("zipfian: {e}")))?)
            }
            _ => None,
        };
        let seed = spec.seed ^ thread.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        Ok(OpGenerator {
            mix: spec.mix,
            value_size: spec.value_size,
            dist: spec.key_dist,
            zipf,
            rng: StdRng::seed_from_u64(seed),
            thread,
            threads,
            owned,
            live: (0..owned).map(|j| j * threads + thread).collect(),
            next_insert: owned,
        })
    }

    /// Keys preloaded for this partition.
    pub fn preload_keys(&self) -> impl Iterator<Item = u64> + '_ {
        (0..self.owned).map(|j| j * self.threads + self.thread)
    }

    fn value(&mut self) -> Vec<u8> {
        let mut v = vec![0; self.value_size as usize];
        self.rng.fill_bytes(&mut v);
        v
    }

    fn existing_key(&mut self) -> u64 {
        if self.owned == 0 {
            return self.thread;
        }
        let index = match (&self.zipf, self.dist) {
            (Some(z), _) => {
                let rank = z.sample(&mut self.rng) as u64 - 1;
                scramble(rank) % self.owned
            }
            _ => self.rng.random_range(0..self.owned),
        };
        index * self.threads + self.thread
    }

    pub fn next_op(&mut self) -> KvOp {
        let p: f64 = self.rng.random();
        match self.mix {
            Mix::A | Mix::B | Mix::C | Mix::G => {
                let read_share = match self.mix {
                    Mix::A => 0.5,
                    Mix::B => 0.95,
                    Mix::C => 1.0,
                    _ => 0.0,
                };
                let key = self.existing_key();
                if p < read_share {
                    KvOp::Read(key)
                } else {
                    KvOp::Update(key, self.value())
                }
            }
            Mix::D => {
                if p < 0.05 || self.live.is_empty() {
                    let key = self.next_insert * self.threads + self.thread;
                    self.next_insert += 1;
                    self.live.push_back(key);
                    KvOp::Insert(key, self.value())
                } else if p < 0.10 {
                    KvOp::Delete(self.live.pop_front().expect("non-empty"))
                } else {
                    let recent = self.live.len().min(100);
                    let back = self.rng.random_range(0..recent);
                    KvOp::Read(self.live[self.live.len() - 1 - back])
                }
            }
            Mix::E => KvOp::ReadModifyWrite(self.existing_key()),
            Mix::F => {
                let key = self.existing_key();
                KvOp::Scan(key, self.rng.random_range(1..=10))
            }
        }
    }
}

/// A store-independent stream of puts, deletes and reads over
/// `0..key_space`, for recovery testing against a map oracle.
pub fn mixed_ops(seed: u64, count: usize, key_space: u64, value_size: u64) -> Vec<KvOp> {
    let mut rng = StdRng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let key = rng.random_range(0..key_space);
            match rng.random_range(0..4) {
                0 | 1 => {
                    let mut v = vec![0; value_size as usize];
                    rng.fill_bytes(&mut v);
                    KvOp::Update(key, v)
                }
                2 => KvOp::Delete(key),
                _ => KvOp::Read(key),
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub spec: WorkloadSpec,
    pub mode: BaselineMode,
    pub threads: u64,
    pub region_size: u64,
    pub line_size: u64,
    pub slot_size: u64,
    pub latency_ns_per_flush: u64,
}

impl BenchConfig {
    pub fn new(spec: WorkloadSpec, mode: BaselineMode) -> Self {
        BenchConfig {
            spec,
            mode,
            threads: 1,
            region_size: 64 << 20,
            line_size: 64,
            slot_size: 1 << 20,
            latency_ns_per_flush: 0,
        }
    }
}

/// Counters for the measured phase (preloading excluded).
#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub mode: BaselineMode,
    pub mix: Mix,
    pub ops: u64,
    pub mutations: u64,
    pub seconds: f64,
    pub ops_per_sec: f64,
    pub syncs: u64,
    pub fences: u64,
    pub logged_bytes: u64,
    pub copied_bytes: u64,
    pub wal_bytes: u64,
    pub durability_points: u64,
    /// Distinct keys written by mutations.
    pub distinct_keys: u64,
    pub latency_ns: u64,
    /// CRC-32 of the final durable image.
    pub durable_crc: u32,
}

impl BenchReport {
    pub const CSV_HEADER: &'static str = "mode,mix,ops_per_sec,syncs,fences,logged_bytes,copied_bytes,wal_bytes";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.1},{},{},{},{},{}",
            self.mode,
            self.mix,
            self.ops_per_sec,
            self.syncs,
            self.fences,
            self.logged_bytes,
            self.copied_bytes,
            self.wal_bytes
        )
    }
}

/// Preloads `spec.record_count` records, then runs `spec.op_count`
/// operations split across the threads.
pub fn run_benchmark(config: &BenchConfig) -> Result<BenchReport> {
    let spec = &config.spec;
    let threads = config.threads.max(1);
    let region_config = RegionConfig::new(config.region_size).with_slots(threads as usize + 1, config.slot_size);
    let layout = region_config.layout()?;
    let media = Media::new(
        &MediaConfig::simulated(layout.media_capacity(config.line_size), config.line_size)
            .with_latency(config.latency_ns_per_flush),
    )?;
    let options = SyncOptions {
        baseline: config.mode,
        ..SyncOptions::default()
    };
    let region = Region::open_with(region_config, media, options)?;
    let bucket_count = (spec.record_count / 4).max(16);
    let store = KvStore::create(Heap::attach(&region)?, bucket_count, spec.value_size)?;

    let generators: Vec<OpGenerator> = (0..threads)
        .map(|t| OpGenerator::new(spec, t, threads))
        .collect::<Result<_>>()?;
    let batch = (layout.area_size() / (8 * (spec.value_size + 72))).max(1);
    let mut rng = StdRng::seed_from_u64(spec.seed.wrapping_add(0x5EED));
    let mut pending = 0;
    for generator in &generators {
        for key in generator.preload_keys() {
            let mut v = vec![0; spec.value_size as usize];
            rng.fill_bytes(&mut v);
            store.put_unsynced(key, &v)?;
            pending += 1;
            if pending == batch {
                store.sync()?;
                pending = 0;
            }
        }
    }
    store.sync()?;
    region.release_thread_slot();

    let syncs_before = region.sync_history().len();
    let (fences_before, latency_before) = {
        let media = region.media();
        (media.fence_count(), media.stats().latency_ns)
    };
    let start = Instant::now();
    let per_thread: Vec<(u64, u64, HashSet<u64>)> = std::thread::scope(|s| {
        let handles: Vec<_> = generators
            .into_iter()
            .enumerate()
            .map(|(t, mut generator)| {
                let store = &store;
                let region = &region;
                let ops = spec.op_count / threads + u64::from((t as u64) < spec.op_count % threads);
                s.spawn(move || -> Result<(u64, u64, HashSet<u64>)> {
                    let mut mutations = 0;
                    let mut written = HashSet::new();
                    for _ in 0..ops {
                        let op = generator.next_op();
                        if op.execute(store)? {
                            mutations += 1;
                            written.insert(op.key());
                        }
                    }
                    region.release_thread_slot();
                    Ok((ops, mutations, written))
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|e| std::panic::resume_unwind(e)))
            .collect::<Result<Vec<_>>>()
    })?;
    let seconds = start.elapsed().as_secs_f64();

    let history = region.sync_history();
    let run = &history[syncs_before..];
    let (fences, latency_ns) = {
        let media = region.media();
        (
            media.fence_count() - fences_before,
            media.stats().latency_ns - latency_before,
        )
    };
    let ops: u64 = per_thread.iter().map(|p| p.0).sum();
    let mutations: u64 = per_thread.iter().map(|p| p.1).sum();
    let distinct_keys = per_thread.iter().flat_map(|p| p.2.iter()).collect::<HashSet<_>>().len() as u64;
    let durable_crc = crc32fast::hash(&region.close()?.durable_snapshot()?);
    Ok(BenchReport {
        mode: config.mode,
        mix: spec.mix,
        ops,
        mutations,
        seconds,
        ops_per_sec: if seconds > 0.0 { ops as f64 / seconds } else { 0.0 },
        syncs: run.len() as u64,
        fences,
        logged_bytes: run.iter().map(|r| r.logged_bytes).sum(),
        copied_bytes: run.iter().map(|r| r.bytes_copied).sum(),
        wal_bytes: run.iter().map(|r| r.wal_bytes).sum(),
        durability_points: run.iter().map(|r| r.durability_points).sum(),
        distinct_keys,
        latency_ns,
        durable_crc,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(mix: Mix) -> WorkloadSpec {
        WorkloadSpec {
            record_count: 400,
            op_count: 400,
            ..WorkloadSpec::new(mix)
        }
    }

    fn small(spec: WorkloadSpec, mode: BaselineMode) -> BenchConfig {
        BenchConfig {
            region_size: 1 << 20,
            slot_size: 256 * 1024,
            ..BenchConfig::new(spec, mode)
        }
    }

    #[test]
    fn mix_shares() {
        for (mix, reads) in [(Mix::A, 0.5), (Mix::B, 0.95), (Mix::C, 1.0), (Mix::G, 0.0)] {
            let mut g = OpGenerator::new(&spec(mix), 0, 1).unwrap();
            let n = 20_000;
            let r = (0..n).filter(|_| matches!(g.next_op(), KvOp::Read(_))).count() as f64 / n as f64;
            assert!((r - reads).abs() < 0.02, "{mix}: {r}");
        }
    }

    #[test]
    fn mix_d_reads_latest_and_deletes_oldest() {
        let mut g = OpGenerator::new(&spec(Mix::D), 0, 1).unwrap();
        let mut live: VecDeque<u64> = (0..400).collect();
        for _ in 0..5000 {
            match g.next_op() {
                KvOp::Insert(k, _) => {
                    assert!(k >= 400 && !live.contains(&k));
                    live.push_back(k);
                }
                KvOp::Delete(k) => assert_eq!(Some(k), live.pop_front()),
                KvOp::Read(k) => assert!(live.iter().rev().take(100).any(|&x| x == k)),
                op => panic!("unexpected {op:?}"),
            }
        }
    }

    #[test]
    fn partitions_are_disjoint() {
        let s = spec(Mix::G);
        let mut seen = HashSet::new();
        for t in 0..3 {
            let mut g = OpGenerator::new(&s, t, 3).unwrap();
            let keys: Vec<u64> = g.preload_keys().collect();
            assert!(keys.iter().all(|k| k % 3 == t && seen.insert(*k)));
            for _ in 0..500 {
                assert_eq!(g.next_op().key() % 3, t);
            }
        }
        assert_eq!(seen.len(), 400);
    }

    #[test]
    fn zipfian_is_skewed() {
        let mut g = OpGenerator::new(&spec(Mix::G), 0, 1).unwrap();
        let mut counts = BTreeMap::<u64, u64>::new();
        for _ in 0..20_000 {
            *counts.entry(g.next_op().key()).or_default() += 1;
        }
        let top = counts.values().max().copied().unwrap();
        assert!(top > 20_000 / 400 * 10, "hottest key drew {top}");
    }

    #[test]
    fn read_only_mix_copies_nothing() {
        let r = run_benchmark(&small(spec(Mix::C), BaselineMode::Famsync)).unwrap();
        assert_eq!((r.syncs, r.copied_bytes, r.logged_bytes, r.mutations), (0, 0, 0, 0));
    }

    #[test]
    fn same_seed_same_image() {
        for mix in [Mix::D, Mix::E] {
            let a = run_benchmark(&small(spec(mix), BaselineMode::Famsync)).unwrap();
            let b = run_benchmark(&small(spec(mix), BaselineMode::Famsync)).unwrap();
            assert_eq!(a.durable_crc, b.durable_crc);
            assert_eq!(a.copied_bytes, b.copied_bytes);
        }
    }

    #[test]
    fn page_mode_copies_more() {
        for mix in [Mix::A, Mix::D, Mix::E, Mix::G] {
            let fam = run_benchmark(&small(spec(mix), BaselineMode::Famsync)).unwrap();
            let page = run_benchmark(&small(spec(mix), BaselineMode::Page4k)).unwrap();
            assert!(fam.copied_bytes < page.copied_bytes, "{mix}");
            assert_eq!(page.copied_bytes % 4096, 0);
        }
    }

    #[test]
    fn durability_points_per_update() {
        let s = spec(Mix::G);
        let fam = run_benchmark(&small(s.clone(), BaselineMode::Famsync)).unwrap();
        let wal = run_benchmark(&small(s, BaselineMode::Wal)).unwrap();
        assert_eq!(fam.durability_points, fam.mutations);
        assert_eq!(wal.durability_points, 2 * wal.mutations);
        assert_eq!(fam.fences, 3 * fam.syncs);
        assert!(wal.wal_bytes > 0 && wal.logged_bytes == 0);
    }

    #[test]
    fn threaded_run_completes() {
        let mut config = small(spec(Mix::A), BaselineMode::Famsync);
        config.threads = 4;
        let r = run_benchmark(&config).unwrap();
        assert_eq!(r.ops, 400);
        assert_eq!(r.syncs, r.mutations);
    }

    #[test]
    fn parse_names() {
        assert_eq!("g".parse::<Mix>().unwrap(), Mix::G);
        assert!("H".parse::<Mix>().is_err());
        assert_eq!("page4k".parse::<BaselineMode>().unwrap(), BaselineMode::Page4k);
        assert_eq!(BaselineMode::Wal.to_string(), "wal");
    }
}
