//! Store interposition.
//!
//! [`Region::on_store`] is the call an instrumented store makes before it
//! executes: a range check, then an undo entry holding the bytes about to
//! be overwritten plus a dirty record. The `tracked_*` functions fuse the
//! hook with the mutation for callers without instrumentation and stand in
//! for the wrapped `memcpy`/`memset`/`memmove`.

use std::sync::atomic::Ordering;
use std::sync::RwLockReadGuard;

use crate::error::{Error, Result};
use crate::region::{lock, Addr, BaselineMode, Region};

impl Region {
    fn shared(&self) -> RwLockReadGuard<'_, ()> {
        self.sync_lock.read().unwrap_or_else(|e| e.into_inner())
    }

    /// Logs `[offset, offset + len)` before it is overwritten.
    fn log_before_store(&self, offset: u64, len: u64) -> Result<()> {
        if len == 0 {
            return Ok(());
        }
        let slot = self.thread_slot()?;
        let mut thread = lock(&self.slots[slot]);
        if self.options.baseline != BaselineMode::Wal {
            let mut original = vec![0; len as usize];
            self.load_bytes(offset, &mut original);
            let mut media = lock(&self.media);
            thread.log.append(&mut media, self.layout(), offset, &original)?;
        }
        thread.dirty.record(offset, len);
        Ok(())
    }

    /// Instrumentation hook for a scalar store of `size` bytes at `addr`,
    /// called before the store executes. Stores outside the working range
    /// return immediately.
    ///
    /// The hook and the store that follows must not straddle a sync issued
    /// from another thread; [`Region::store`] holds the sync lock across
    /// both.
    pub fn on_store(&self, addr: Addr, size: u64) -> Result<()> {
        if !self.in_working_range(addr) {
            return Ok(());
        }
        if !matches!(size, 1 | 2 | 4 | 8) {
            return Err(Error::InvalidStore { size });
        }
        let offset = self.offset_of_range(addr, size)?;
        let _shared = self.shared();
        self.log_before_store(offset, size)
    }

    /// Writes the working image without logging. Paired with
    /// [`Region::on_store`] this is an instrumented store; on its own it is
    /// an uninstrumented one and will not be persisted or rolled back.
    pub fn raw_store(&self, addr: Addr, data: &[u8]) -> Result<()> {
        let offset = self.offset_of_range(addr, data.len() as u64)?;
        self.store_bytes(offset, data);
        Ok(())
    }

    /// An instrumented scalar store: hook plus mutation.
    pub fn store(&self, addr: Addr, data: &[u8]) -> Result<()> {
        let size = data.len() as u64;
        if !matches!(size, 1 | 2 | 4 | 8) {
            return Err(Error::InvalidStore { size });
        }
        self.tracked_write(addr, data)
    }

    pub fn store_u64(&self, addr: Addr, value: u64) -> Result<()> {
        self.store(addr, &value.to_le_bytes())
    }

    /// Logs and writes `data` at `addr`.
    pub fn tracked_write(&self, addr: Addr, data: &[u8]) -> Result<()> {
        let offset = self.offset_of_range(addr, data.len() as u64)?;
        let _shared = self.shared();
        self.log_before_store(offset, data.len() as u64)?;
        self.store_bytes(offset, data);
        Ok(())
    }

    pub fn tracked_memcpy(&self, dst: Addr, src: &[u8]) -> Result<()> {
        self.tracked_write(dst, src)
    }

    pub fn tracked_memset(&self, dst: Addr, byte: u8, len: u64) -> Result<()> {
        let offset = self.offset_of_range(dst, len)?;
        let _shared = self.shared();
        self.log_before_store(offset, len)?;
        for i in 0..len {
            self.working_cell(offset + i).store(byte, Ordering::Relaxed);
        }
        Ok(())
    }

    /// Overlap-safe move within the working range; only the destination is
    /// logged.
    pub fn tracked_memmove(&self, dst: Addr, src: Addr, len: u64) -> Result<()> {
        let to = self.offset_of_range(dst, len)?;
        let from = self.offset_of_range(src, len)?;
        let _shared = self.shared();
        self.log_before_store(to, len)?;
        let copy = |i: u64| {
            let b = self.working_cell(from + i).load(Ordering::Relaxed);
            self.working_cell(to + i).store(b, Ordering::Relaxed);
        };
        if to <= from {
            (0..len).for_each(copy);
        } else {
            (0..len).rev().for_each(copy);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use crate::layout::ENTRY_HEADER_SIZE;
    use crate::media::{Media, MediaOp};
    use crate::region::{Region, RegionConfig};
    use crate::Error;

    fn region() -> Region {
        let config = RegionConfig::new(4096).with_slots(1, 8192);
        let layout = config.layout().unwrap();
        Region::open(config, Media::simulated(layout.media_capacity(64), 64).unwrap()).unwrap()
    }

    fn entries(r: &Region) -> u64 {
        let slot = r.thread_slot().unwrap();
        crate::region::lock(&r.slots[slot]).log.entry_count()
    }

    #[test]
    fn out_of_range_store_is_free() {
        let r = region();
        r.media().record_ops(true);
        let stack = crate::Addr(0x7fff_0000);
        r.on_store(stack, 8).unwrap();
        r.on_store(r.backing_addr(0), 8).unwrap();
        assert_eq!(entries(&r), 0);
        assert!(r.media().take_recorded().is_empty());
    }

    #[test]
    fn on_store_logs_prior_bytes() {
        let r = region();
        r.raw_store(r.addr(0), &[1, 2, 3, 4, 5, 6, 7, 8]).unwrap();
        r.on_store(r.addr(0), 8).unwrap();
        let slot = r.thread_slot().unwrap();
        let s = crate::region::lock(&r.slots[slot]);
        assert_eq!(s.log.tail(), ENTRY_HEADER_SIZE + 8);
        let mut media = r.media();
        let e = s.log.read_entries(&mut media, r.layout()).unwrap();
        assert_eq!(e[0].payload, vec![1, 2, 3, 4, 5, 6, 7, 8]);
        assert_eq!(e[0].offset, 0);
    }

    #[test]
    fn scalar_store_sizes() {
        let r = region();
        assert!(matches!(r.on_store(r.addr(0), 3), Err(Error::InvalidStore { size: 3 })));
        assert!(matches!(r.on_store(r.addr(4092), 8), Err(Error::OutOfRange { .. })));
        assert!(r.store(r.addr(0), &[0; 16]).is_err());
    }

    #[test]
    fn hundred_stores_hundred_entries() {
        let r = region();
        let mut rng = 12345u64;
        for _ in 0..100 {
            rng = rng.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let off = (rng >> 33) % 4088;
            r.store_u64(r.addr(off), rng).unwrap();
        }
        let slot = r.thread_slot().unwrap();
        let s = crate::region::lock(&r.slots[slot]);
        assert_eq!(s.log.entry_count(), 100);
        assert_eq!(s.dirty.len(), 100);
    }

    #[test]
    fn tracked_write_changes_working_only() {
        let r = region();
        let d = r.layout().data_offset() as usize;
        r.tracked_write(r.addr(8), &[9; 8]).unwrap();
        assert_eq!(&r.working_image()[8..16], &[9; 8]);
        assert_eq!(&r.media().durable_snapshot().unwrap()[d + 8..d + 16], &[0; 8]);
        r.fa_msync().unwrap();
        assert_eq!(&r.media().durable_snapshot().unwrap()[d + 8..d + 16], &[9; 8]);
        assert!(r.tracked_write(r.addr(4090), &[0; 8]).is_err());
        assert!(r.tracked_write(r.backing_addr(0), &[0; 8]).is_err());
    }

    #[test]
    fn memset_one_entry() {
        let r = region();
        r.tracked_memset(r.addr(0), 0xAB, 64).unwrap();
        assert_eq!(entries(&r), 1);
        assert!(r.working_image()[..64].iter().all(|&b| b == 0xAB));
    }

    #[test]
    fn memmove_matches_plain_buffer() {
        for (dst, src) in [(4u64, 0u64), (0, 4), (100, 200), (10, 10)] {
            let r = region();
            let init: Vec<u8> = (0..=255).collect();
            r.raw_store(r.addr(0), &init).unwrap();
            let mut oracle = init.clone();
            oracle.copy_within(src as usize..src as usize + 16, dst as usize);
            r.tracked_memmove(r.addr(dst), r.addr(src), 16).unwrap();
            assert_eq!(&r.working_image()[..256], &oracle[..]);
            assert_eq!(entries(&r), 1);
        }
    }

    #[test]
    fn log_writes_stay_inside_own_slot() {
        let config = RegionConfig::new(4096).with_slots(3, 1024);
        let layout = config.layout().unwrap();
        let r = Region::open(config, Media::simulated(layout.media_capacity(64), 64).unwrap()).unwrap();
        r.media().record_ops(true);
        let r = &r;
        let slots: Vec<usize> = std::thread::scope(|s| {
            (0..3u64)
                .map(|t| {
                    s.spawn(move || {
                        for i in 0..5 {
                            r.store_u64(r.addr(t * 512 + i * 8), i).unwrap();
                        }
                        r.thread_slot().unwrap()
                    })
                })
                .collect::<Vec<_>>()
                .into_iter()
                .map(|h| h.join().unwrap())
                .collect()
        });
        let ops = r.media().take_recorded();
        assert_eq!(ops.len(), 15);
        for op in ops {
            let MediaOp::Write { offset, len } = op else {
                panic!("unexpected {op:?}")
            };
            let owners: Vec<_> = slots
                .iter()
                .filter(|&&s| offset >= layout.slot_base(s) && offset + len <= layout.slot_base(s) + 1024)
                .collect();
            assert_eq!(owners.len(), 1);
        }
    }
}
