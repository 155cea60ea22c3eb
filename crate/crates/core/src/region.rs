//! A persistent file exposed at two coordinated ranges.
//!
//! The working range is the in-memory copy the application mutates; the
//! backing range is the data area of the media. Both map the data area at
//! identical offsets, so `working_base + o` and `backing_base + o` name the
//! same byte and a sync copies offset `o` to offset `o`.

use std::cell::Cell;
use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicU8, Ordering};
use std::sync::{Mutex, MutexGuard, RwLock};
use std::thread::ThreadId;

use crate::error::{Error, Result};
use crate::layout::{Layout, SlotHeader, Superblock, SLOT_HEADER_SIZE, SUPERBLOCK_SIZE};
use crate::media::Media;
use crate::msync::{recover_region, RecoveryReport, SyncReport};
use crate::tracker::DirtyList;
use crate::undolog::UndoLog;

pub const DEFAULT_RESERVE_SIZE: u64 = 1 << 40;
pub const DEFAULT_SLOT_SIZE: u64 = 1 << 20;
pub const DEFAULT_MAX_THREADS: usize = 16;
pub const DEFAULT_WORKING_BASE: u64 = 0x1000_0000_0000;
pub const PAGE_SIZE: u64 = 4096;

/// An abstract address in one of the region's reserved ranges.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Addr(pub u64);

impl std::ops::Add<u64> for Addr {
    type Output = Addr;

    fn add(self, n: u64) -> Addr {
        Addr(self.0 + n)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionConfig {
    pub region_size: u64,
    pub max_threads: usize,
    pub slot_size: u64,
    pub working_base: u64,
    pub backing_base: u64,
    pub reserve_size: u64,
}

impl RegionConfig {
    pub fn new(region_size: u64) -> Self {
        RegionConfig {
            region_size,
            max_threads: DEFAULT_MAX_THREADS,
            slot_size: DEFAULT_SLOT_SIZE,
            working_base: DEFAULT_WORKING_BASE,
            backing_base: DEFAULT_WORKING_BASE + DEFAULT_RESERVE_SIZE,
            reserve_size: DEFAULT_RESERVE_SIZE,
        }
    }

    pub fn with_slots(mut self, max_threads: usize, slot_size: u64) -> Self {
        self.max_threads = max_threads;
        self.slot_size = slot_size;
        self
    }

    pub fn layout(&self) -> Result<Layout> {
        Layout::new(self.region_size, self.max_threads, self.slot_size)
    }

    pub fn log_area_size(&self) -> Result<u64> {
        Ok(self.layout()?.log_area_size())
    }

    pub fn validate(&self) -> Result<()> {
        let layout = self.layout()?;
        let (w, b, r) = (self.working_base, self.backing_base, self.reserve_size);
        if w.checked_add(r).is_none() || b.checked_add(r).is_none() {
            return Err(Error::Config("reserved ranges overflow the address space".into()));
        }
        if w < b + r && b < w + r {
            return Err(Error::Config("working and backing ranges overlap".into()));
        }
        if self.region_size + layout.log_area_size() > r {
            return Err(Error::Config(format!(
                "region ({}) plus log area ({}) exceeds the reserved range ({r})",
                self.region_size,
                layout.log_area_size()
            )));
        }
        Ok(())
    }

    fn from_layout(layout: &Layout) -> Self {
        RegionConfig::new(layout.region_size).with_slots(layout.max_threads, layout.slot_size)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FenceMode {
    /// Seal, copy, invalidate: each ends with a fence.
    #[default]
    Three,
    /// The invalidation is flushed but its fence is left to the next sync.
    /// Leaves a window where a returned sync can still be rolled back.
    TwoCompat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CopySource {
    /// The volatile dirty lists.
    #[default]
    DirtyList,
    /// Re-read the sealed logs from media.
    Log,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BaselineMode {
    /// Undo-logged stores, line-granular copy.
    #[default]
    Famsync,
    /// Undo-logged stores, but every dirty 4 KiB page is copied whole.
    Page4k,
    /// No per-store logging; each sync writes a redo log, makes it durable,
    /// applies it page-granular in place, and makes that durable.
    Wal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SyncOptions {
    pub fence_mode: FenceMode,
    pub copy_source: CopySource,
    pub baseline: BaselineMode,
    /// Reject a sync when two threads dirtied the same bytes.
    pub check_contract: bool,
}

#[derive(Debug)]
pub(crate) struct ThreadSlot {
    pub(crate) log: UndoLog,
    pub(crate) dirty: DirtyList,
}

#[derive(Debug, Default)]
struct Bindings {
    by_thread: HashMap<ThreadId, usize>,
    free: Vec<usize>,
}

static NEXT_REGION_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    /// (region id, slot) of the last binding looked up on this thread.
    static SLOT_CACHE: Cell<(u64, usize)> = const { Cell::new((0, 0)) };
}

pub(crate) fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

#[derive(Debug)]
pub struct Region {
    id: u64,
    config: RegionConfig,
    layout: Layout,
    line_size: u64,
    pub(crate) options: SyncOptions,
    pub(crate) media: Mutex<Media>,
    working: Box<[AtomicU8]>,
    pub(crate) slots: Vec<Mutex<ThreadSlot>>,
    bindings: Mutex<Bindings>,
    pub(crate) sync_lock: RwLock<()>,
    pub(crate) epoch: AtomicU64,
    pub(crate) sync_in_progress: AtomicBool,
    /// A compat-mode invalidation is flushed but not yet fenced.
    pub(crate) invalidation_pending: AtomicBool,
    pub(crate) history: Mutex<Vec<SyncReport>>,
    pub(crate) epoch_images: Mutex<Option<Vec<Vec<u8>>>>,
    recovery: RecoveryReport,
}

impl Region {
    pub fn open(config: RegionConfig, media: Media) -> Result<Region> {
        Region::open_with(config, media, SyncOptions::default())
    }

    /// Opens a region, formatting blank media and recovering any valid logs
    /// before the working image is loaded.
    pub fn open_with(config: RegionConfig, mut media: Media, options: SyncOptions) -> Result<Region> {
        config.validate()?;
        let layout = config.layout()?;
        let needed = layout.data_offset() + layout.region_size;
        if media.capacity() < needed {
            return Err(Error::Config(format!(
                "media holds {} bytes but the region needs {needed}",
                media.capacity()
            )));
        }
        let mut raw = [0u8; SUPERBLOCK_SIZE as usize];
        media.read(0, &mut raw)?;
        match Superblock::decode(&raw)? {
            None => format(&mut media, &layout)?,
            Some(sb) => {
                let found = Layout::from_superblock(&sb)?;
                if found != layout {
                    return Err(Error::Config(format!(
                        "media was formatted as {found:?}, requested {layout:?}"
                    )));
                }
            }
        }
        let recovery = recover_region(&mut media, &layout)?;
        Region::load(config, layout, media, options, recovery)
    }

    /// Opens already-formatted media using the geometry in its superblock.
    pub fn attach(mut media: Media, options: SyncOptions) -> Result<Region> {
        let mut raw = [0u8; SUPERBLOCK_SIZE as usize];
        media.read(0, &mut raw)?;
        let sb = Superblock::decode(&raw)?.ok_or_else(|| Error::Corruption("media is not formatted".into()))?;
        let layout = Layout::from_superblock(&sb)?;
        Region::open_with(RegionConfig::from_layout(&layout), media, options)
    }

    fn load(
        config: RegionConfig,
        layout: Layout,
        mut media: Media,
        options: SyncOptions,
        recovery: RecoveryReport,
    ) -> Result<Region> {
        let size = layout.region_size as usize;
        let working: Box<[AtomicU8]> = (0..size).map(|_| AtomicU8::new(0)).collect();
        const CHUNK: usize = 1 << 20;
        let mut buf = vec![0u8; CHUNK.min(size)];
        let mut off = 0usize;
        while off < size {
            let n = CHUNK.min(size - off);
            media.read(layout.data_offset() + off as u64, &mut buf[..n])?;
            for (cell, &b) in working[off..off + n].iter().zip(&buf[..n]) {
                cell.store(b, Ordering::Relaxed);
            }
            off += n;
        }
        let mut slots = Vec::with_capacity(layout.max_threads);
        for slot in 0..layout.max_threads {
            let mut raw = [0u8; SLOT_HEADER_SIZE as usize];
            media.read(layout.slot_base(slot), &mut raw)?;
            let header = SlotHeader::decode(&raw)?;
            slots.push(Mutex::new(ThreadSlot {
                log: UndoLog::new(slot, header.generation),
                dirty: DirtyList::new(),
            }));
        }
        Ok(Region {
            id: NEXT_REGION_ID.fetch_add(1, Ordering::Relaxed),
            line_size: media.line_size(),
            config,
            layout,
            options,
            media: Mutex::new(media),
            working,
            slots,
            bindings: Mutex::new(Bindings {
                by_thread: HashMap::new(),
                free: (0..layout.max_threads).rev().collect(),
            }),
            sync_lock: RwLock::new(()),
            epoch: AtomicU64::new(0),
            sync_in_progress: AtomicBool::new(false),
            invalidation_pending: AtomicBool::new(false),
            history: Mutex::new(Vec::new()),
            epoch_images: Mutex::new(None),
            recovery,
        })
    }

    pub fn config(&self) -> &RegionConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn options(&self) -> SyncOptions {
        self.options
    }

    pub fn line_size(&self) -> u64 {
        self.line_size
    }

    pub fn region_size(&self) -> u64 {
        self.layout.region_size
    }

    /// What recovery did when this region was opened.
    pub fn recovery(&self) -> &RecoveryReport {
        &self.recovery
    }

    /// Number of completed syncs since open.
    pub fn sync_epoch(&self) -> u64 {
        self.epoch.load(Ordering::Acquire)
    }

    /// True while a sync has started but not returned (also after a sync
    /// that failed part way).
    pub fn sync_in_progress(&self) -> bool {
        self.sync_in_progress.load(Ordering::Acquire)
    }

    pub fn sync_history(&self) -> Vec<SyncReport> {
        lock(&self.history).clone()
    }

    /// Keep a copy of the working image as of every completed sync.
    pub fn capture_epoch_images(&self, on: bool) {
        *lock(&self.epoch_images) = on.then(Vec::new);
    }

    /// Images captured since the last call, oldest first.
    pub fn take_epoch_images(&self) -> Vec<Vec<u8>> {
        lock(&self.epoch_images)
            .as_mut()
            .map(std::mem::take)
            .unwrap_or_default()
    }

    pub fn media(&self) -> MutexGuard<'_, Media> {
        lock(&self.media)
    }

    /// Consumes the region without any further media operation, as a crash
    /// would.
    pub fn into_media(self) -> Media {
        self.media.into_inner().unwrap_or_else(|e| e.into_inner())
    }

    /// Clean shutdown: completes a deferred compat-mode invalidation.
    /// Unsynced working-image changes are discarded.
    pub fn close(self) -> Result<Media> {
        let pending = self.invalidation_pending.load(Ordering::Acquire);
        let mut media = self.into_media();
        if pending {
            media.fence()?;
        }
        Ok(media)
    }

    pub fn in_working_range(&self, addr: Addr) -> bool {
        addr.0 >= self.config.working_base && addr.0 - self.config.working_base < self.layout.region_size
    }

    pub fn to_offset(&self, addr: Addr) -> Result<u64> {
        if self.in_working_range(addr) {
            Ok(addr.0 - self.config.working_base)
        } else {
            Err(Error::BadAddress { addr: addr.0 })
        }
    }

    /// Working-range address of data-area offset `offset`.
    pub fn addr(&self, offset: u64) -> Addr {
        Addr(self.config.working_base + offset)
    }

    /// Backing-range address of the same offset.
    pub fn backing_addr(&self, offset: u64) -> Addr {
        Addr(self.config.backing_base + offset)
    }

    /// Offset of `[addr, addr + len)`, which must lie inside the working range.
    pub(crate) fn offset_of_range(&self, addr: Addr, len: u64) -> Result<u64> {
        let offset = self.to_offset(addr)?;
        match offset.checked_add(len) {
            Some(end) if end <= self.layout.region_size => Ok(offset),
            _ => Err(Error::out_of_range(offset, len, self.layout.region_size)),
        }
    }

    pub fn read(&self, addr: Addr, buf: &mut [u8]) -> Result<()> {
        let offset = self.offset_of_range(addr, buf.len() as u64)?;
        self.load_bytes(offset, buf);
        Ok(())
    }

    pub fn read_u64(&self, addr: Addr) -> Result<u64> {
        let mut b = [0u8; 8];
        self.read(addr, &mut b)?;
        Ok(u64::from_le_bytes(b))
    }

    /// Copy of the whole working image.
    pub fn working_image(&self) -> Vec<u8> {
        let mut out = vec![0; self.layout.region_size as usize];
        self.load_bytes(0, &mut out);
        out
    }

    pub(crate) fn load_bytes(&self, offset: u64, buf: &mut [u8]) {
        let start = offset as usize;
        let cells = &self.working[start..start + buf.len()];
        for (b, cell) in buf.iter_mut().zip(cells) {
            *b = cell.load(Ordering::Relaxed);
        }
    }

    pub(crate) fn store_bytes(&self, offset: u64, data: &[u8]) {
        let start = offset as usize;
        for (cell, &b) in self.working[start..start + data.len()].iter().zip(data) {
            cell.store(b, Ordering::Relaxed);
        }
    }

    pub(crate) fn working_cell(&self, offset: u64) -> &AtomicU8 {
        &self.working[offset as usize]
    }

    /// The log slot bound to the calling thread, binding a free one on first
    /// use.
    pub fn thread_slot(&self) -> Result<usize> {
        let (cached_region, cached_slot) = SLOT_CACHE.with(Cell::get);
        if cached_region == self.id {
            return Ok(cached_slot);
        }
        let me = std::thread::current().id();
        let mut b = lock(&self.bindings);
        let slot = match b.by_thread.get(&me) {
            Some(&slot) => slot,
            None => {
                let slot = b.free.pop().ok_or(Error::TooManyThreads {
                    max_threads: self.layout.max_threads,
                })?;
                b.by_thread.insert(me, slot);
                slot
            }
        };
        SLOT_CACHE.with(|c| c.set((self.id, slot)));
        Ok(slot)
    }

    /// Returns the calling thread's slot to the pool. Entries it already
    /// logged stay in the slot and are sealed by the next sync.
    pub fn release_thread_slot(&self) {
        let me = std::thread::current().id();
        let mut b = lock(&self.bindings);
        if let Some(slot) = b.by_thread.remove(&me) {
            b.free.push(slot);
        }
        SLOT_CACHE.with(|c| {
            if c.get().0 == self.id {
                c.set((0, 0));
            }
        });
    }
}

/// Writes blank slot headers and the superblock geometry, makes them
/// durable, then writes the magic on its own. A crash part way leaves the
/// magic absent and the media is formatted again on the next open.
pub(crate) fn format(media: &mut Media, layout: &Layout) -> Result<()> {
    let superblock = layout.superblock().encode();
    media.write(8, &superblock[8..])?;
    let blank = SlotHeader {
        state: crate::layout::SlotState::Invalid,
        tail: 0,
        generation: 0,
    }
    .encode();
    for slot in 0..layout.max_threads {
        media.write(layout.slot_base(slot), &blank)?;
    }
    media.flush(0, layout.data_offset())?;
    media.fence()?;
    media.write(0, &superblock[..8])?;
    media.flush(0, 8)?;
    media.fence()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::{encode_entry, SlotState};
    use proptest::prelude::*;

    fn small_config() -> RegionConfig {
        RegionConfig::new(4096).with_slots(2, 1024)
    }

    fn fresh(config: &RegionConfig) -> Media {
        let layout = config.layout().unwrap();
        Media::simulated(layout.media_capacity(64), 64).unwrap()
    }

    #[test]
    fn open_fresh_media() {
        let config = small_config();
        let region = Region::open(config.clone(), fresh(&config)).unwrap();
        assert!(region.working_image().iter().all(|&b| b == 0));
        assert_eq!(region.recovery().slots_rolled_back, 0);
        let snap = region.media().durable_snapshot().unwrap();
        assert_eq!(&snap[0..8], b"FAMSYNC1");
    }

    #[test]
    fn open_recovers_valid_slot_before_loading() {
        let config = small_config();
        let layout = config.layout().unwrap();
        let mut image = vec![0u8; layout.media_capacity(64) as usize];
        image[..40].copy_from_slice(&layout.superblock().encode());
        let original = [0x11u8; 8];
        let entry = encode_entry(0, 64, &original);
        let header = SlotHeader {
            state: SlotState::Valid,
            tail: entry.len() as u64,
            generation: 0,
        };
        let sb = layout.slot_base(0) as usize;
        image[sb..sb + 16].copy_from_slice(&header.encode());
        let ab = layout.area_base(0, 0) as usize;
        image[ab..ab + entry.len()].copy_from_slice(&entry);
        let d = layout.data_offset() as usize;
        image[d + 64..d + 72].copy_from_slice(&[0xEE; 8]);

        let region = Region::open(config, Media::from_image(image, 64).unwrap()).unwrap();
        assert_eq!(region.recovery().slots_rolled_back, 1);
        assert_eq!(&region.working_image()[64..72], &original);
        let snap = region.media().durable_snapshot().unwrap();
        assert_eq!(&snap[d + 64..d + 72], &original);
    }

    #[test]
    fn wrong_magic_is_corruption() {
        let config = small_config();
        let mut media = fresh(&config);
        media.write(0, b"NOTMAGIC").unwrap();
        media.persist_all().unwrap();
        assert!(matches!(Region::open(config, media), Err(Error::Corruption(_))));
    }

    #[test]
    fn media_too_small() {
        let config = small_config();
        let media = Media::simulated(4096, 64).unwrap();
        assert!(matches!(Region::open(config, media), Err(Error::Config(_))));
    }

    #[test]
    fn config_invariants() {
        let mut c = small_config();
        c.backing_base = c.working_base + 10;
        assert!(c.validate().is_err());
        let mut c = small_config();
        c.reserve_size = 4096;
        c.backing_base = c.working_base + 4096;
        assert!(c.validate().is_err());
        assert!(small_config().validate().is_ok());
    }

    #[test]
    fn range_checks() {
        let config = small_config();
        let region = Region::open(config.clone(), fresh(&config)).unwrap();
        let base = config.working_base;
        assert!(region.in_working_range(Addr(base)));
        assert!(!region.in_working_range(Addr(base + 4096)));
        assert!(!region.in_working_range(Addr(config.backing_base)));
        assert!(!region.in_working_range(Addr(base - 1)));
        assert_eq!(region.to_offset(Addr(base)).unwrap(), 0);
        assert_eq!(region.to_offset(Addr(base + 4095)).unwrap(), 4095);
        assert!(matches!(region.to_offset(Addr(0)), Err(Error::BadAddress { .. })));
    }

    #[test]
    fn thread_slots_are_bounded() {
        let config = RegionConfig::new(4096).with_slots(1, 256);
        let region = Region::open(config.clone(), fresh(&config)).unwrap();
        assert_eq!(region.thread_slot().unwrap(), 0);
        std::thread::scope(|s| {
            let err = s.spawn(|| region.thread_slot()).join().unwrap();
            assert!(matches!(err, Err(Error::TooManyThreads { max_threads: 1 })));
        });
        region.release_thread_slot();
        std::thread::scope(|s| {
            assert_eq!(s.spawn(|| region.thread_slot()).join().unwrap().unwrap(), 0);
        });
    }

    proptest! {
        #[test]
        fn offset_roundtrip(o in 0u64..4096) {
            let config = small_config();
            let region = Region::open(config.clone(), fresh(&config)).unwrap();
            prop_assert_eq!(region.to_offset(region.addr(o)).unwrap(), o);
            prop_assert_eq!(region.backing_addr(o).0 - config.backing_base, o);
        }
    }
}
