//! A hash table whose buckets are growable vectors of fixed-size records,
//! allocated on the persistent heap. Every put and delete is its own
//! transaction: the mutation is followed by one `fa_msync`.
//!
//! ```text
//! table   magic, bucket_count, value_size, buckets, ops_applied, len
//! bucket  len, cap, data          (24 bytes, `bucket_count` of them)
//! record  key u64, value          (8 + value_size bytes)
//! ```
//!
//! `ops_applied` counts completed puts and deletes and is updated inside
//! the same transaction, so a recovered store names exactly how many
//! operations it reflects.

use std::collections::BTreeMap;
use std::sync::{RwLock, RwLockReadGuard, RwLockWriteGuard};

use crate::error::{Error, Result};
use crate::heap::Heap;
use crate::msync::SyncReport;
use crate::region::Region;

pub const KV_MAGIC: u64 = u64::from_le_bytes(*b"FAMKVTB1");
const TABLE_SIZE: u64 = 48;
const BUCKET_SIZE: u64 = 24;
const INITIAL_CAPACITY: u64 = 4;

const T_BUCKET_COUNT: u64 = 8;
const T_VALUE_SIZE: u64 = 16;
const T_BUCKETS: u64 = 24;
const T_OPS: u64 = 32;
const T_LEN: u64 = 40;

pub fn bucket_of(key: u64, bucket_count: u64) -> u64 {
    let mut z = key.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    (z ^ (z >> 31)) % bucket_count
}

#[derive(Debug, Clone, Copy)]
struct Bucket {
    at: u64,
    len: u64,
    cap: u64,
    data: u64,
}

#[derive(Debug)]
pub struct KvStore<'r> {
    heap: Heap<'r>,
    table: u64,
    bucket_count: u64,
    value_size: u64,
    buckets: u64,
    rw: RwLock<()>,
}

impl<'r> KvStore<'r> {
    /// Allocates an empty table and makes it the heap's root object.
    pub fn create(heap: Heap<'r>, bucket_count: u64, value_size: u64) -> Result<KvStore<'r>> {
        if bucket_count == 0 || value_size == 0 {
            return Err(Error::Config("bucket count and value size must be non-zero".into()));
        }
        let region = heap.region();
        let table = heap.alloc(TABLE_SIZE)?;
        let buckets = heap.alloc(bucket_count * BUCKET_SIZE)?;
        zero_in_chunks(region, buckets, bucket_count * BUCKET_SIZE)?;
        let mut header = Vec::with_capacity(TABLE_SIZE as usize);
        for word in [KV_MAGIC, bucket_count, value_size, buckets, 0, 0] {
            header.extend_from_slice(&word.to_le_bytes());
        }
        region.tracked_write(region.addr(table), &header)?;
        heap.root_set(table)?;
        region.fa_msync()?;
        KvStore::open(heap)
    }

    /// Opens the table named by the heap's root object.
    pub fn open(heap: Heap<'r>) -> Result<KvStore<'r>> {
        let table = heap.root_get()?;
        if table == 0 {
            return Err(Error::Corruption("heap has no KV table".into()));
        }
        let region = heap.region();
        let word = |at: u64| region.read_u64(region.addr(table + at));
        if word(0)? != KV_MAGIC {
            return Err(Error::Corruption(format!("bad KV magic at {table}")));
        }
        let bucket_count = word(T_BUCKET_COUNT)?;
        let value_size = word(T_VALUE_SIZE)?;
        let buckets = word(T_BUCKETS)?;
        let end = bucket_count
            .checked_mul(BUCKET_SIZE)
            .and_then(|n| n.checked_add(buckets));
        if bucket_count == 0 || value_size == 0 || end.is_none_or(|e| e > region.region_size()) {
            return Err(Error::Corruption("KV table header out of range".into()));
        }
        Ok(KvStore {
            heap,
            table,
            bucket_count,
            value_size,
            buckets,
            rw: RwLock::new(()),
        })
    }

    pub fn open_or_create(heap: Heap<'r>, bucket_count: u64, value_size: u64) -> Result<KvStore<'r>> {
        if heap.root_get()? == 0 {
            KvStore::create(heap, bucket_count, value_size)
        } else {
            KvStore::open(heap)
        }
    }

    pub fn heap(&self) -> &Heap<'r> {
        &self.heap
    }

    pub fn region(&self) -> &'r Region {
        self.heap.region()
    }

    pub fn bucket_count(&self) -> u64 {
        self.bucket_count
    }

    pub fn value_size(&self) -> u64 {
        self.value_size
    }

    fn record_size(&self) -> u64 {
        8 + self.value_size
    }

    fn reading(&self) -> RwLockReadGuard<'_, ()> {
        self.rw.read().unwrap_or_else(|e| e.into_inner())
    }

    fn writing(&self) -> RwLockWriteGuard<'_, ()> {
        self.rw.write().unwrap_or_else(|e| e.into_inner())
    }

    fn word(&self, offset: u64) -> Result<u64> {
        let r = self.region();
        r.read_u64(r.addr(offset))
    }

    fn bucket(&self, key: u64) -> Result<Bucket> {
        self.bucket_at(bucket_of(key, self.bucket_count))
    }

    fn bucket_at(&self, index: u64) -> Result<Bucket> {
        let at = self.buckets + index * BUCKET_SIZE;
        Ok(Bucket {
            at,
            len: self.word(at)?,
            cap: self.word(at + 8)?,
            data: self.word(at + 16)?,
        })
    }

    fn find(&self, b: &Bucket, key: u64) -> Result<Option<u64>> {
        let rec = self.record_size();
        for i in 0..b.len {
            if self.word(b.data + i * rec)? == key {
                return Ok(Some(i));
            }
        }
        Ok(None)
    }

    fn read_value(&self, b: &Bucket, index: u64) -> Result<Vec<u8>> {
        let r = self.region();
        let mut value = vec![0; self.value_size as usize];
        r.read(r.addr(b.data + index * self.record_size() + 8), &mut value)?;
        Ok(value)
    }

    /// Completed puts and deletes reflected by the current image.
    pub fn ops_applied(&self) -> Result<u64> {
        self.word(self.table + T_OPS)
    }

    pub fn len(&self) -> Result<u64> {
        self.word(self.table + T_LEN)
    }

    pub fn is_empty(&self) -> Result<bool> {
        Ok(self.len()? == 0)
    }

    pub fn get(&self, key: u64) -> Result<Option<Vec<u8>>> {
        let _shared = self.reading();
        let b = self.bucket(key)?;
        match self.find(&b, key)? {
            Some(i) => self.read_value(&b, i).map(Some),
            None => Ok(None),
        }
    }

    /// Up to `n` records of `start`'s bucket with keys `>= start`, in key
    /// order.
    pub fn scan(&self, start: u64, n: usize) -> Result<Vec<(u64, Vec<u8>)>> {
        let _shared = self.reading();
        let b = self.bucket(start)?;
        let rec = self.record_size();
        let mut out = Vec::new();
        for i in 0..b.len {
            let key = self.word(b.data + i * rec)?;
            if key >= start {
                out.push((key, self.read_value(&b, i)?));
            }
        }
        out.sort_unstable_by_key(|(k, _)| *k);
        out.truncate(n);
        Ok(out)
    }

    /// Inserts or overwrites, then syncs.
    pub fn put(&self, key: u64, value: &[u8]) -> Result<SyncReport> {
        let _exclusive = self.writing();
        self.put_locked(key, value)?;
        self.region().fa_msync()
    }

    /// Removes `key` if present, then syncs. Returns whether it was present.
    pub fn delete(&self, key: u64) -> Result<(bool, SyncReport)> {
        let _exclusive = self.writing();
        let found = self.delete_locked(key)?;
        Ok((found, self.region().fa_msync()?))
    }

    /// A put whose durability is left to a later [`KvStore::sync`], for
    /// batched loading.
    pub fn put_unsynced(&self, key: u64, value: &[u8]) -> Result<()> {
        let _exclusive = self.writing();
        self.put_locked(key, value)
    }

    pub fn delete_unsynced(&self, key: u64) -> Result<bool> {
        let _exclusive = self.writing();
        self.delete_locked(key)
    }

    pub fn sync(&self) -> Result<SyncReport> {
        let _exclusive = self.writing();
        self.region().fa_msync()
    }

    fn put_locked(&self, key: u64, value: &[u8]) -> Result<()> {
        if value.len() as u64 != self.value_size {
            return Err(Error::ValueSize {
                expected: self.value_size,
                got: value.len() as u64,
            });
        }
        let r = self.region();
        let rec = self.record_size();
        let mut b = self.bucket(key)?;
        if let Some(i) = self.find(&b, key)? {
            r.tracked_write(r.addr(b.data + i * rec + 8), value)?;
            return r.store_u64(r.addr(self.table + T_OPS), self.ops_applied()? + 1);
        }
        if b.len == b.cap {
            b = self.grow(b)?;
        }
        let mut record = Vec::with_capacity(rec as usize);
        record.extend_from_slice(&key.to_le_bytes());
        record.extend_from_slice(value);
        r.tracked_write(r.addr(b.data + b.len * rec), &record)?;
        r.store_u64(r.addr(b.at), b.len + 1)?;
        self.bump_counters(1)
    }

    fn delete_locked(&self, key: u64) -> Result<bool> {
        let r = self.region();
        let rec = self.record_size();
        let b = self.bucket(key)?;
        let Some(i) = self.find(&b, key)? else {
            r.store_u64(r.addr(self.table + T_OPS), self.ops_applied()? + 1)?;
            return Ok(false);
        };
        let last = b.len - 1;
        if i != last {
            let mut moved = vec![0; rec as usize];
            r.read(r.addr(b.data + last * rec), &mut moved)?;
            r.tracked_write(r.addr(b.data + i * rec), &moved)?;
        }
        r.store_u64(r.addr(b.at), last)?;
        self.bump_counters(-1)?;
        Ok(true)
    }

    /// ops_applied += 1 and len += `delta` in one write.
    fn bump_counters(&self, delta: i64) -> Result<()> {
        let r = self.region();
        let ops = self.ops_applied()? + 1;
        let len = self.len()?.wrapping_add_signed(delta);
        let mut both = [0u8; 16];
        both[..8].copy_from_slice(&ops.to_le_bytes());
        both[8..].copy_from_slice(&len.to_le_bytes());
        r.tracked_write(r.addr(self.table + T_OPS), &both)
    }

    fn grow(&self, b: Bucket) -> Result<Bucket> {
        let r = self.region();
        let rec = self.record_size();
        let cap = (b.cap * 2).max(INITIAL_CAPACITY);
        let data = self.heap.alloc(cap * rec)?;
        if b.len > 0 {
            let mut old = vec![0; (b.len * rec) as usize];
            r.read(r.addr(b.data), &mut old)?;
            r.tracked_write(r.addr(data), &old)?;
        }
        if b.data != 0 {
            self.heap.free(b.data)?;
        }
        let mut desc = [0u8; 16];
        desc[..8].copy_from_slice(&cap.to_le_bytes());
        desc[8..].copy_from_slice(&data.to_le_bytes());
        r.tracked_write(r.addr(b.at + 8), &desc)?;
        Ok(Bucket { cap, data, ..b })
    }

    /// Every record, keyed.
    pub fn entries(&self) -> Result<BTreeMap<u64, Vec<u8>>> {
        let _shared = self.reading();
        let rec = self.record_size();
        let mut out = BTreeMap::new();
        for index in 0..self.bucket_count {
            let b = self.bucket_at(index)?;
            for i in 0..b.len {
                out.insert(self.word(b.data + i * rec)?, self.read_value(&b, i)?);
            }
        }
        Ok(out)
    }

    /// Checks that every key sits in its hash bucket exactly once and that
    /// the table length matches the buckets.
    pub fn check(&self) -> Result<()> {
        let _shared = self.reading();
        let rec = self.record_size();
        let mut seen = std::collections::HashSet::new();
        let mut total = 0;
        for index in 0..self.bucket_count {
            let b = self.bucket_at(index)?;
            if b.len > b.cap || (b.cap > 0 && b.data == 0) {
                return Err(Error::Corruption(format!(
                    "bucket {index}: len {} cap {}",
                    b.len, b.cap
                )));
            }
            for i in 0..b.len {
                let key = self.word(b.data + i * rec)?;
                if bucket_of(key, self.bucket_count) != index {
                    return Err(Error::Corruption(format!("key {key} in bucket {index}")));
                }
                if !seen.insert(key) {
                    return Err(Error::Corruption(format!("key {key} stored twice")));
                }
            }
            total += b.len;
        }
        if total != self.len()? {
            return Err(Error::Corruption(format!(
                "table len {} but {total} records",
                self.len()?
            )));
        }
        Ok(())
    }
}

/// Zeroes `[offset, offset + len)` with tracked writes, syncing between
/// chunks so no single sync outgrows a log slot. Chunks that are already
/// zero are skipped.
fn zero_in_chunks(region: &Region, offset: u64, len: u64) -> Result<()> {
    let chunk = (region.layout().area_size() / 4).clamp(8, 1 << 18) & !7;
    let mut buf = vec![0u8; chunk as usize];
    let mut at = offset;
    while at < offset + len {
        let n = chunk.min(offset + len - at);
        let part = &mut buf[..n as usize];
        region.read(region.addr(at), part)?;
        if part.iter().any(|&b| b != 0) {
            region.tracked_memset(region.addr(at), 0, n)?;
            region.fa_msync()?;
        }
        at += n;
    }
    Ok(())
}
