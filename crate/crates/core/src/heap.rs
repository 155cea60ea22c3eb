//! A shared-heap allocator inside the region's data area.
//!
//! It is an ordinary volatile first-fit allocator: every metadata update is
//! a tracked store, so the undo log makes it crash consistent without any
//! persistence code of its own. All links are data-area offsets.
//!
//! ```text
//! 0..8    magic
//! 8..16   root object offset (0 = unset)
//! 16..24  free list head (0 = empty)
//! 24..32  high water mark (end of the last bumped block)
//! 32..    blocks: size u64 (including this 16-byte header), next_free u64
//!         (LIVE for allocated blocks), then the payload
//! ```

use std::collections::HashSet;
use std::sync::Mutex;

use crate::error::{Error, Result};
use crate::region::{lock, Region};

pub const HEAP_MAGIC: u64 = u64::from_le_bytes(*b"FAMHEAP1");
pub const HEAP_HEADER_SIZE: u64 = 32;
pub const BLOCK_HEADER_SIZE: u64 = 16;
pub const MIN_BLOCK_SIZE: u64 = 32;
const LIVE: u64 = u64::MAX;

const MAGIC_AT: u64 = 0;
const ROOT_AT: u64 = 8;
const FREE_HEAD_AT: u64 = 16;
const HIGH_WATER_AT: u64 = 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeapHeader {
    pub magic: u64,
    pub root_offset: u64,
    pub free_list_head: u64,
    pub high_water: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockInfo {
    /// Offset of the block header.
    pub offset: u64,
    pub size: u64,
    pub free: bool,
}

impl BlockInfo {
    pub fn payload(&self) -> u64 {
        self.offset + BLOCK_HEADER_SIZE
    }
}

/// Result of walking the whole heap.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeapWalk {
    pub header: HeapHeader,
    pub blocks: Vec<BlockInfo>,
    pub free_list: Vec<u64>,
    /// Leaks, overlaps, cycles and other inconsistencies.
    pub problems: Vec<String>,
}

impl HeapWalk {
    pub fn is_consistent(&self) -> bool {
        self.problems.is_empty()
    }

    pub fn live_bytes(&self) -> u64 {
        self.blocks.iter().filter(|b| !b.free).map(|b| b.size).sum()
    }
}

#[derive(Debug)]
pub struct Heap<'r> {
    region: &'r Region,
    alloc_lock: Mutex<()>,
    debug_checks: bool,
}

impl<'r> Heap<'r> {
    /// Formats the heap (tracked writes plus one sync) if its magic is
    /// absent, otherwise validates the header.
    pub fn attach(region: &'r Region) -> Result<Heap<'r>> {
        let heap = Heap {
            region,
            alloc_lock: Mutex::new(()),
            debug_checks: false,
        };
        let magic = heap.load(MAGIC_AT)?;
        if magic == 0 {
            if region.region_size() < HEAP_HEADER_SIZE + MIN_BLOCK_SIZE {
                return Err(Error::Config("region too small for a heap".into()));
            }
            heap.put(MAGIC_AT, HEAP_MAGIC)?;
            heap.put(ROOT_AT, 0)?;
            heap.put(FREE_HEAD_AT, 0)?;
            heap.put(HIGH_WATER_AT, HEAP_HEADER_SIZE)?;
            region.fa_msync()?;
        } else if magic != HEAP_MAGIC {
            return Err(Error::Heap(format!("bad heap magic {magic:#x}")));
        } else {
            let h = heap.header()?;
            if h.high_water < HEAP_HEADER_SIZE || h.high_water > region.region_size() {
                return Err(Error::Heap(format!("high water {} out of range", h.high_water)));
            }
        }
        Ok(heap)
    }

    /// Validate every free against a full heap walk.
    pub fn with_debug_checks(mut self, on: bool) -> Self {
        self.debug_checks = on;
        self
    }

    pub fn region(&self) -> &'r Region {
        self.region
    }

    fn load(&self, offset: u64) -> Result<u64> {
        self.region.read_u64(self.region.addr(offset))
    }

    fn put(&self, offset: u64, value: u64) -> Result<()> {
        self.region.store_u64(self.region.addr(offset), value)
    }

    pub fn header(&self) -> Result<HeapHeader> {
        Ok(HeapHeader {
            magic: self.load(MAGIC_AT)?,
            root_offset: self.load(ROOT_AT)?,
            free_list_head: self.load(FREE_HEAD_AT)?,
            high_water: self.load(HIGH_WATER_AT)?,
        })
    }

    /// Allocates `size` bytes and returns the payload offset. First fit
    /// from the free list, splitting off the tail of a larger block;
    /// otherwise bump allocation.
    pub fn alloc(&self, size: u64) -> Result<u64> {
        let _guard = lock(&self.alloc_lock);
        let need = BLOCK_HEADER_SIZE + size.next_multiple_of(8).max(MIN_BLOCK_SIZE - BLOCK_HEADER_SIZE);
        let mut prev: Option<u64> = None;
        let mut cur = self.load(FREE_HEAD_AT)?;
        let mut steps = 0u64;
        while cur != 0 {
            steps += 1;
            if steps > self.region.region_size() / MIN_BLOCK_SIZE {
                return Err(Error::Heap("free list cycle".into()));
            }
            let block_size = self.load(cur)?;
            let next = self.load(cur + 8)?;
            if block_size >= need {
                if block_size - need >= MIN_BLOCK_SIZE {
                    // keep the front on the free list, hand out the tail
                    self.put(cur, block_size - need)?;
                    let block = cur + block_size - need;
                    self.put(block, need)?;
                    self.put(block + 8, LIVE)?;
                    return Ok(block + BLOCK_HEADER_SIZE);
                }
                match prev {
                    Some(p) => self.put(p + 8, next)?,
                    None => self.put(FREE_HEAD_AT, next)?,
                }
                self.put(cur + 8, LIVE)?;
                return Ok(cur + BLOCK_HEADER_SIZE);
            }
            prev = Some(cur);
            cur = next;
        }
        let high = self.load(HIGH_WATER_AT)?;
        if high + need > self.region.region_size() {
            return Err(Error::OutOfMemory { requested: size });
        }
        self.put(high, need)?;
        self.put(high + 8, LIVE)?;
        self.put(HIGH_WATER_AT, high + need)?;
        Ok(high + BLOCK_HEADER_SIZE)
    }

    /// Returns the block whose payload starts at `offset` to the free list.
    pub fn free(&self, offset: u64) -> Result<()> {
        let _guard = lock(&self.alloc_lock);
        let high = self.load(HIGH_WATER_AT)?;
        let block = offset
            .checked_sub(BLOCK_HEADER_SIZE)
            .filter(|&b| b >= HEAP_HEADER_SIZE && b < high && b % 8 == 0)
            .ok_or_else(|| Error::Heap(format!("{offset} is not a heap block")))?;
        if self.debug_checks {
            let walk = self.walk_unlocked()?;
            if !walk.blocks.iter().any(|b| b.offset == block && !b.free) {
                return Err(Error::Heap(format!("{offset} is not a live block")));
            }
        }
        if self.load(block + 8)? != LIVE {
            return Err(Error::Heap(format!("double free of {offset}")));
        }
        let head = self.load(FREE_HEAD_AT)?;
        self.put(block + 8, head)?;
        self.put(FREE_HEAD_AT, block)
    }

    pub fn root_get(&self) -> Result<u64> {
        self.load(ROOT_AT)
    }

    pub fn root_set(&self, offset: u64) -> Result<()> {
        self.put(ROOT_AT, offset)
    }

    pub fn walk(&self) -> Result<HeapWalk> {
        let _guard = lock(&self.alloc_lock);
        self.walk_unlocked()
    }

    fn walk_unlocked(&self) -> Result<HeapWalk> {
        walk_image(&self.region.working_image())
    }
}

/// Walks a heap laid out at the start of `data` (a data-area image). The
/// blocks between the header and the high water mark must tile exactly, and
/// the free list must be acyclic and name exactly the blocks marked free.
pub fn walk_image(data: &[u8]) -> Result<HeapWalk> {
    let word = |at: u64| -> Option<u64> {
        let at = at as usize;
        data.get(at..at + 8)
            .map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")))
    };
    let header = HeapHeader {
        magic: word(MAGIC_AT).unwrap_or(0),
        root_offset: word(ROOT_AT).unwrap_or(0),
        free_list_head: word(FREE_HEAD_AT).unwrap_or(0),
        high_water: word(HIGH_WATER_AT).unwrap_or(0),
    };
    if header.magic != HEAP_MAGIC {
        return Err(Error::Heap(format!("bad heap magic {:#x}", header.magic)));
    }
    let mut problems = Vec::new();
    let mut blocks = Vec::new();
    let limit = (data.len() as u64).min(header.high_water);
    if header.high_water > data.len() as u64 {
        problems.push(format!("high water {} beyond region", header.high_water));
    }
    let mut at = HEAP_HEADER_SIZE;
    while at < limit {
        let (Some(size), Some(next)) = (word(at), word(at + 8)) else {
            problems.push(format!("block header at {at} truncated"));
            break;
        };
        if size < MIN_BLOCK_SIZE || size % 8 != 0 || at + size > limit {
            problems.push(format!("block at {at} has bad size {size}"));
            break;
        }
        blocks.push(BlockInfo {
            offset: at,
            size,
            free: next != LIVE,
        });
        at += size;
    }
    let starts: HashSet<u64> = blocks.iter().map(|b| b.offset).collect();
    let mut free_list = Vec::new();
    let mut seen = HashSet::new();
    let mut cur = header.free_list_head;
    while cur != 0 {
        if !seen.insert(cur) {
            problems.push(format!("free list cycle at {cur}"));
            break;
        }
        if !starts.contains(&cur) {
            problems.push(format!("free list names {cur}, which is not a block"));
            break;
        }
        free_list.push(cur);
        match word(cur + 8) {
            Some(LIVE) => {
                problems.push(format!("free list names live block {cur}"));
                break;
            }
            Some(next) => cur = next,
            None => break,
        }
    }
    for b in blocks.iter().filter(|b| b.free) {
        if !seen.contains(&b.offset) {
            problems.push(format!("block {} is marked free but unreachable (leak)", b.offset));
        }
    }
    if header.root_offset != 0
        && !blocks
            .iter()
            .any(|b| !b.free && b.payload() <= header.root_offset && header.root_offset < b.offset + b.size)
    {
        problems.push(format!("root {} is not inside a live block", header.root_offset));
    }
    Ok(HeapWalk {
        header,
        blocks,
        free_list,
        problems,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::media::Media;
    use crate::region::RegionConfig;

    fn region() -> Region {
        let config = RegionConfig::new(4096).with_slots(1, 8192);
        let layout = config.layout().unwrap();
        Region::open(config, Media::simulated(layout.media_capacity(64), 64).unwrap()).unwrap()
    }

    #[test]
    fn fresh_heap_is_empty() {
        let r = region();
        let heap = Heap::attach(&r).unwrap();
        let walk = heap.walk().unwrap();
        assert!(walk.is_consistent());
        assert!(walk.blocks.is_empty());
        assert_eq!(walk.header.high_water, HEAP_HEADER_SIZE);
        assert_eq!(heap.root_get().unwrap(), 0);
        assert_eq!(r.sync_epoch(), 1);
    }

    #[test]
    fn first_alloc_lands_after_header() {
        let r = region();
        let heap = Heap::attach(&r).unwrap();
        let off = heap.alloc(24).unwrap();
        assert_eq!(off, HEAP_HEADER_SIZE + BLOCK_HEADER_SIZE);
        let walk = heap.walk().unwrap();
        assert_eq!(
            walk.blocks,
            vec![BlockInfo {
                offset: 32,
                size: 40,
                free: false
            }]
        );
    }

    #[test]
    fn reuse_after_free() {
        let r = region();
        let heap = Heap::attach(&r).unwrap().with_debug_checks(true);
        let a = heap.alloc(24).unwrap();
        let _b = heap.alloc(24).unwrap();
        heap.free(a).unwrap();
        let walk = heap.walk().unwrap();
        assert!(walk.is_consistent());
        assert_eq!(walk.free_list, vec![a - BLOCK_HEADER_SIZE]);
        assert_eq!(heap.alloc(24).unwrap(), a);
    }

    #[test]
    fn split_large_free_block() {
        let r = region();
        let heap = Heap::attach(&r).unwrap();
        let big = heap.alloc(200).unwrap();
        heap.free(big).unwrap();
        let small = heap.alloc(16).unwrap();
        let walk = heap.walk().unwrap();
        assert!(walk.is_consistent(), "{:?}", walk.problems);
        assert_eq!(walk.blocks.len(), 2);
        assert!(small > big);
    }

    #[test]
    fn oom_and_double_free() {
        let r = region();
        let heap = Heap::attach(&r).unwrap().with_debug_checks(true);
        assert!(matches!(heap.alloc(1 << 20), Err(Error::OutOfMemory { .. })));
        let a = heap.alloc(8).unwrap();
        heap.free(a).unwrap();
        assert!(matches!(heap.free(a), Err(Error::Heap(_))));
        assert!(matches!(heap.free(a + 8), Err(Error::Heap(_))));
        assert!(matches!(heap.free(3), Err(Error::Heap(_))));
    }

    #[test]
    fn reattach_after_sync() {
        let config = RegionConfig::new(4096).with_slots(1, 8192);
        let layout = config.layout().unwrap();
        let r = Region::open(config.clone(), Media::simulated(layout.media_capacity(64), 64).unwrap()).unwrap();
        let heap = Heap::attach(&r).unwrap();
        let a = heap.alloc(40).unwrap();
        heap.alloc(8).unwrap();
        heap.free(a).unwrap();
        heap.root_set(0).unwrap();
        r.fa_msync().unwrap();
        let before = heap.walk().unwrap();
        let r = Region::open(config, r.close().unwrap()).unwrap();
        let heap = Heap::attach(&r).unwrap();
        assert_eq!(heap.walk().unwrap(), before);
    }

    #[test]
    fn root_roundtrip_and_unsynced_loss() {
        let config = RegionConfig::new(4096).with_slots(1, 8192);
        let layout = config.layout().unwrap();
        let r = Region::open(config.clone(), Media::simulated(layout.media_capacity(64), 64).unwrap()).unwrap();
        let heap = Heap::attach(&r).unwrap();
        let obj = heap.alloc(16).unwrap();
        heap.root_set(obj).unwrap();
        r.fa_msync().unwrap();
        let other = heap.alloc(16).unwrap();
        heap.root_set(other).unwrap();
        let r = Region::open(config, r.into_media()).unwrap();
        let heap = Heap::attach(&r).unwrap();
        assert_eq!(heap.root_get().unwrap(), obj);
        assert!(heap.walk().unwrap().is_consistent());
    }

    #[test]
    fn persistence_only_through_tracked_stores() {
        let src = include_str!("heap.rs");
        let body = &src[..src.find("#[cfg(test)]").unwrap()];
        for forbidden in ["media", "Media", "flush", "fence", "raw_store"] {
            assert!(!body.contains(forbidden), "heap code mentions {forbidden}");
        }
    }
}
