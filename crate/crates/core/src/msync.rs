//! The failure-atomic sync and recovery.
//!
//! A sync runs under the exclusive side of the region's sync lock:
//!
//! 1. seal every non-empty log (header VALID + entries flushed), fence;
//! 2. copy the coalesced, line-aligned dirty ranges from the working image
//!    to the same offsets of the data area, flushing each, fence;
//! 3. write and flush an INVALID header for every sealed log, fence.
//!
//! A crash before step 3 is durable leaves VALID logs whose entries roll
//! the data area back to the previous sync; after it, recovery finds
//! nothing to do.

use std::sync::atomic::Ordering;
use std::sync::MutexGuard;

use crate::error::{Error, Result};
use crate::layout::{Layout, SlotHeader, SlotState, COMMIT_MARKER, SLOT_HEADER_SIZE};
use crate::media::Media;
use crate::region::{lock, BaselineMode, CopySource, FenceMode, Region, ThreadSlot, PAGE_SIZE};
use crate::tracker::{self, DirtyRecord};
use crate::undolog::{read_slot, replay_redo, rollback};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SyncReport {
    /// Epoch reached by this sync.
    pub epoch: u64,
    pub entries_sealed: u64,
    /// Dirty records across all threads.
    pub records: u64,
    /// Undo payload bytes logged since the previous sync.
    pub logged_bytes: u64,
    pub coalesced_bytes: u64,
    /// Bytes written to the data area (after alignment widening).
    pub bytes_copied: u64,
    pub fences_issued: u64,
    /// Media reads issued during the sync.
    pub media_reads: u64,
    /// Redo-log bytes written (WAL baseline only).
    pub wal_bytes: u64,
    /// msync-equivalent durability points (1, or 2 for the WAL baseline).
    pub durability_points: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RecoveryReport {
    pub slots_rolled_back: usize,
    pub entries_applied: usize,
    pub redo_batches_replayed: usize,
}

impl Region {
    /// Makes every logged modification since the previous sync durable,
    /// atomically with respect to crashes.
    pub fn fa_msync(&self) -> Result<SyncReport> {
        let _exclusive = self.sync_lock.write().unwrap_or_else(|e| e.into_inner());
        self.sync_in_progress.store(true, Ordering::Release);
        let mut slots: Vec<MutexGuard<'_, ThreadSlot>> = self.slots.iter().map(lock).collect();
        let mut media = lock(&self.media);
        let fences_before = media.fence_count();
        let reads_before = media.stats().reads;

        if self.options.check_contract {
            let lists: Vec<_> = slots.iter().map(|s| &s.dirty).collect();
            if let Some((a, b, offset)) = tracker::first_overlap(&lists) {
                return Err(Error::ContractViolation { a, b, offset });
            }
        }

        let mut report = SyncReport {
            records: slots.iter().map(|s| s.dirty.len() as u64).sum(),
            logged_bytes: slots.iter().map(|s| s.log.payload_bytes()).sum(),
            ..SyncReport::default()
        };
        match self.options.baseline {
            BaselineMode::Famsync | BaselineMode::Page4k => self.undo_sync(&mut media, &mut slots, &mut report)?,
            BaselineMode::Wal => self.wal_sync(&mut media, &mut slots, &mut report)?,
        }
        for s in slots.iter_mut() {
            s.dirty.clear();
        }
        report.fences_issued = media.fence_count() - fences_before;
        report.media_reads = media.stats().reads - reads_before;
        report.epoch = self.epoch.fetch_add(1, Ordering::AcqRel) + 1;
        lock(&self.history).push(report);
        if let Some(images) = lock(&self.epoch_images).as_mut() {
            images.push(self.working_image());
        }
        self.sync_in_progress.store(false, Ordering::Release);
        Ok(report)
    }

    fn undo_sync(
        &self,
        media: &mut Media,
        slots: &mut [MutexGuard<'_, ThreadSlot>],
        report: &mut SyncReport,
    ) -> Result<()> {
        let layout = *self.layout();
        let sealed: Vec<usize> = (0..slots.len()).filter(|&i| !slots[i].log.is_empty()).collect();

        // seal
        for &i in &sealed {
            slots[i].log.seal(media, &layout, SlotState::Valid)?;
            report.entries_sealed += slots[i].log.entry_count();
        }
        media.fence()?;
        self.invalidation_pending.store(false, Ordering::Release);

        // copy
        let ranges = match self.options.copy_source {
            CopySource::DirtyList => tracker::coalesce(slots.iter().map(|s| &s.dirty)),
            CopySource::Log => {
                let mut ranges = Vec::new();
                for &i in &sealed {
                    for e in slots[i].log.read_entries(media, &layout)? {
                        ranges.push(DirtyRecord {
                            offset: e.offset,
                            size: e.size(),
                        });
                    }
                }
                tracker::merge_ranges(ranges)
            }
        };
        report.coalesced_bytes = tracker::total_bytes(&ranges);
        let granularity = match self.options.baseline {
            BaselineMode::Page4k => PAGE_SIZE,
            _ => self.line_size(),
        };
        let aligned = tracker::widen(&ranges, granularity, layout.region_size);
        report.bytes_copied = self.copy_ranges(media, &aligned)?;
        media.fence()?;

        // invalidate
        for &i in &sealed {
            slots[i].log.invalidate(media, &layout)?;
        }
        match self.options.fence_mode {
            FenceMode::Three => media.fence()?,
            FenceMode::TwoCompat => self.invalidation_pending.store(!sealed.is_empty(), Ordering::Release),
        }
        report.durability_points = 1;
        Ok(())
    }

    /// The WAL baseline: redo records for the dirty ranges, commit record,
    /// fence; page-granular in-place copy, fence; truncate without a fence
    /// (a stale committed batch is idempotent to replay).
    fn wal_sync(
        &self,
        media: &mut Media,
        slots: &mut [MutexGuard<'_, ThreadSlot>],
        report: &mut SyncReport,
    ) -> Result<()> {
        let layout = *self.layout();
        let ranges = tracker::coalesce(slots.iter().map(|s| &s.dirty));
        report.coalesced_bytes = tracker::total_bytes(&ranges);
        let wal = &mut slots[0].log;
        for r in &ranges {
            let mut data = vec![0; r.size as usize];
            self.load_bytes(r.offset, &mut data);
            wal.append(media, &layout, r.offset, &data)?;
        }
        wal.append(media, &layout, COMMIT_MARKER, &(ranges.len() as u64).to_le_bytes())?;
        report.wal_bytes = wal.tail();
        report.entries_sealed = wal.entry_count();
        wal.seal(media, &layout, SlotState::Redo)?;
        media.fence()?;

        let pages = tracker::widen(&ranges, PAGE_SIZE, layout.region_size);
        report.bytes_copied = self.copy_ranges(media, &pages)?;
        media.fence()?;

        wal.invalidate(media, &layout)?;
        report.durability_points = 2;
        Ok(())
    }

    fn copy_ranges(&self, media: &mut Media, ranges: &[DirtyRecord]) -> Result<u64> {
        let base = self.layout().data_offset();
        let mut buf = Vec::new();
        for r in ranges {
            buf.resize(r.size as usize, 0);
            self.load_bytes(r.offset, &mut buf);
            media.write(base + r.offset, &buf)?;
            media.flush(base + r.offset, r.size)?;
        }
        Ok(tracker::total_bytes(ranges))
    }
}

/// Rolls back every VALID slot (and replays every committed redo batch),
/// then durably invalidates them. Safe to re-run after a crash during
/// recovery: rollback rewrites the same original bytes.
pub fn recover_region(media: &mut Media, layout: &Layout) -> Result<RecoveryReport> {
    let mut report = RecoveryReport::default();
    let mut touched = Vec::new();
    for slot in 0..layout.max_threads {
        let mut raw = [0u8; SLOT_HEADER_SIZE as usize];
        media.read(layout.slot_base(slot), &mut raw)?;
        let header = SlotHeader::decode(&raw)?;
        match header.state {
            SlotState::Invalid => continue,
            SlotState::Valid => {
                report.entries_applied += rollback(media, layout, slot)?;
                report.slots_rolled_back += 1;
            }
            SlotState::Redo => {
                if replay_redo(media, layout, slot)? > 0 {
                    report.redo_batches_replayed += 1;
                }
            }
        }
        touched.push((slot, header.generation));
    }
    if touched.is_empty() {
        return Ok(report);
    }
    for &(slot, generation) in &touched {
        let header = SlotHeader {
            state: SlotState::Invalid,
            tail: 0,
            generation: generation.wrapping_add(1),
        };
        media.write(layout.slot_base(slot), &header.encode())?;
        media.flush(layout.slot_base(slot), SLOT_HEADER_SIZE)?;
    }
    media.fence()?;
    Ok(report)
}

/// Decoded view of every slot, for inspection tooling.
pub fn inspect_slots(media: &mut Media, layout: &Layout) -> Result<Vec<crate::undolog::SlotImage>> {
    (0..layout.max_threads).map(|s| read_slot(media, layout, s)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::region::{RegionConfig, SyncOptions};

    fn region_with(options: SyncOptions, threads: usize) -> Region {
        let config = RegionConfig::new(8192).with_slots(threads, 4096);
        let layout = config.layout().unwrap();
        Region::open_with(
            config,
            Media::simulated(layout.media_capacity(64), 64).unwrap(),
            options,
        )
        .unwrap()
    }

    fn region() -> Region {
        region_with(SyncOptions::default(), 4)
    }

    #[test]
    fn empty_sync_still_three_fences() {
        let r = region();
        let before = r.media().durable_snapshot().unwrap();
        let rep = r.fa_msync().unwrap();
        assert_eq!(rep.fences_issued, 3);
        assert_eq!(rep.bytes_copied, 0);
        assert_eq!(rep.epoch, 1);
        assert_eq!(r.media().durable_snapshot().unwrap(), before);
    }

    #[test]
    fn single_store_copies_one_line() {
        let r = region();
        r.store_u64(r.addr(0), 42).unwrap();
        let rep = r.fa_msync().unwrap();
        assert_eq!(rep.bytes_copied, r.line_size());
        assert_eq!(rep.coalesced_bytes, 8);
        assert_eq!(rep.entries_sealed, 1);
        assert_eq!(rep.media_reads, 0);
    }

    #[test]
    fn compat_mode_two_fences() {
        let r = region_with(
            SyncOptions {
                fence_mode: FenceMode::TwoCompat,
                ..SyncOptions::default()
            },
            1,
        );
        r.store_u64(r.addr(0), 1).unwrap();
        assert_eq!(r.fa_msync().unwrap().fences_issued, 2);
        assert_eq!(r.fa_msync().unwrap().fences_issued, 2);
    }

    #[test]
    fn three_threads_one_seal_fence() {
        let r = region();
        let r = &r;
        std::thread::scope(|s| {
            for t in 0..3u64 {
                s.spawn(move || r.store_u64(r.addr(t * 1024), t + 1).unwrap());
            }
        });
        let fences = r.media().fence_count();
        let rep = r.fa_msync().unwrap();
        assert_eq!(rep.entries_sealed, 3);
        assert_eq!(r.media().fence_count() - fences, 3);
        let d = r.layout().data_offset() as usize;
        let snap = r.media().durable_snapshot().unwrap();
        for t in 0..3usize {
            assert_eq!(snap[d + t * 1024], t as u8 + 1);
        }
    }

    #[test]
    fn contract_checker_flags_shared_bytes() {
        let r = region_with(
            SyncOptions {
                check_contract: true,
                ..SyncOptions::default()
            },
            2,
        );
        r.store_u64(r.addr(0), 1).unwrap();
        let r = &r;
        std::thread::scope(|s| {
            s.spawn(move || r.store_u64(r.addr(4), 2).unwrap());
        });
        assert!(matches!(r.fa_msync(), Err(Error::ContractViolation { offset: 4, .. })));
    }

    #[test]
    fn sync_from_log_reads_the_log_and_matches() {
        let a = region();
        let b = region_with(
            SyncOptions {
                copy_source: CopySource::Log,
                ..SyncOptions::default()
            },
            4,
        );
        for r in [&a, &b] {
            r.tracked_write(r.addr(100), &[7; 30]).unwrap();
            r.store_u64(r.addr(4000), 9).unwrap();
        }
        let ra = a.fa_msync().unwrap();
        let rb = b.fa_msync().unwrap();
        assert_eq!(ra.media_reads, 0);
        assert!(rb.media_reads > 0);
        assert_eq!(ra.bytes_copied, rb.bytes_copied);
        assert_eq!(
            a.media().durable_snapshot().unwrap(),
            b.media().durable_snapshot().unwrap()
        );
    }

    #[test]
    fn page4k_copies_pages() {
        let r = region_with(
            SyncOptions {
                baseline: BaselineMode::Page4k,
                ..SyncOptions::default()
            },
            1,
        );
        r.store(r.addr(10), &[1]).unwrap();
        assert_eq!(r.fa_msync().unwrap().bytes_copied, 4096);
    }

    #[test]
    fn wal_mode_two_durability_points() {
        let r = region_with(
            SyncOptions {
                baseline: BaselineMode::Wal,
                ..SyncOptions::default()
            },
            1,
        );
        r.store_u64(r.addr(8), 77).unwrap();
        let rep = r.fa_msync().unwrap();
        assert_eq!(rep.durability_points, 2);
        assert_eq!(rep.fences_issued, 2);
        assert_eq!(rep.logged_bytes, 0);
        assert_eq!(rep.wal_bytes, 24 + 24);
        let d = r.layout().data_offset() as usize;
        assert_eq!(
            &r.media().durable_snapshot().unwrap()[d + 8..d + 16],
            &77u64.to_le_bytes()
        );
    }

    #[test]
    fn recovery_all_invalid_is_zero() {
        let r = region();
        let mut media = r.into_media();
        let layout = Layout::new(8192, 4, 4096).unwrap();
        let fences = media.fence_count();
        assert_eq!(recover_region(&mut media, &layout).unwrap().slots_rolled_back, 0);
        assert_eq!(media.fence_count(), fences);
    }

    #[test]
    fn recovery_is_independent_of_slot_order() {
        use crate::layout::encode_entry;
        let layout = Layout::new(8192, 4, 4096).unwrap();
        let mut image = vec![0u8; layout.media_capacity(64) as usize];
        image[..40].copy_from_slice(&layout.superblock().encode());
        let d = layout.data_offset() as usize;
        image[d..d + 16].copy_from_slice(&[0xEE; 16]);
        image[d + 512..d + 520].copy_from_slice(&[0xDD; 8]);
        for (slot, offset, original) in [(0usize, 0u64, [1u8; 8]), (1, 512, [2; 8])] {
            let entry = encode_entry(0, offset, &original);
            let header = SlotHeader {
                state: SlotState::Valid,
                tail: entry.len() as u64,
                generation: 0,
            };
            let b = layout.slot_base(slot) as usize;
            image[b..b + 16].copy_from_slice(&header.encode());
            let a = layout.area_base(slot, 0) as usize;
            image[a..a + entry.len()].copy_from_slice(&entry);
        }
        let mut forward = Media::from_image(image.clone(), 64).unwrap();
        rollback(&mut forward, &layout, 0).unwrap();
        rollback(&mut forward, &layout, 1).unwrap();
        let mut backward = Media::from_image(image.clone(), 64).unwrap();
        rollback(&mut backward, &layout, 1).unwrap();
        rollback(&mut backward, &layout, 0).unwrap();
        assert_eq!(
            forward.durable_snapshot().unwrap(),
            backward.durable_snapshot().unwrap()
        );

        let mut media = Media::from_image(image, 64).unwrap();
        let report = recover_region(&mut media, &layout).unwrap();
        assert_eq!(report.slots_rolled_back, 2);
        let snap = media.durable_snapshot().unwrap();
        assert_eq!(&snap[d..d + 8], &[1; 8]);
        assert_eq!(&snap[d + 8..d + 16], &[0xEE; 8]);
        assert_eq!(&snap[d + 512..d + 520], &[2; 8]);
        // second pass finds nothing
        assert_eq!(recover_region(&mut media, &layout).unwrap().slots_rolled_back, 0);
    }
}
