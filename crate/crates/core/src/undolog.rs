//! Per-thread persistent logs.
//!
//! An [`UndoLog`] owns one slot of the log area. Appends serialize an
//! entry at the tail of the current generation's area with no flush or
//! fence; the sync engine seals every slot behind a single fence, copies
//! the data, then invalidates every slot and advances its generation.

use crate::error::{Error, Result};
use crate::layout::{
    decode_entries, encode_entry, entry_len, Layout, LogEntry, SlotHeader, SlotState, COMMIT_MARKER, SLOT_HEADER_SIZE,
};
use crate::media::Media;

#[derive(Debug, Clone)]
pub struct UndoLog {
    slot: usize,
    generation: u32,
    tail: u64,
    entries: u64,
    payload_bytes: u64,
}

impl UndoLog {
    pub fn new(slot: usize, generation: u32) -> Self {
        UndoLog {
            slot,
            generation,
            tail: 0,
            entries: 0,
            payload_bytes: 0,
        }
    }

    pub fn slot(&self) -> usize {
        self.slot
    }

    pub fn generation(&self) -> u32 {
        self.generation
    }

    /// Bytes used in the current area.
    pub fn tail(&self) -> u64 {
        self.tail
    }

    pub fn entry_count(&self) -> u64 {
        self.entries
    }

    pub fn payload_bytes(&self) -> u64 {
        self.payload_bytes
    }

    pub fn is_empty(&self) -> bool {
        self.entries == 0
    }

    /// Serializes `(offset, payload)` at the tail. No flush, no fence.
    pub fn append(&mut self, media: &mut Media, layout: &Layout, offset: u64, payload: &[u8]) -> Result<()> {
        let size = payload.len() as u64;
        let needed = entry_len(size);
        let available = layout.area_size() - self.tail;
        if size > u32::MAX as u64 || needed > available {
            return Err(Error::LogFull {
                slot: self.slot,
                needed,
                available,
            });
        }
        let bytes = encode_entry(self.generation, offset, payload);
        media.write(layout.area_base(self.slot, self.generation) + self.tail, &bytes)?;
        self.tail += needed;
        self.entries += 1;
        if offset != COMMIT_MARKER {
            self.payload_bytes += size;
        }
        Ok(())
    }

    fn header(&self, state: SlotState) -> SlotHeader {
        SlotHeader {
            state,
            tail: self.tail,
            generation: self.generation,
        }
    }

    /// Writes the header with `state` and flushes header and entries.
    /// The caller issues the fence.
    pub fn seal(&self, media: &mut Media, layout: &Layout, state: SlotState) -> Result<()> {
        let base = layout.slot_base(self.slot);
        media.write(base, &self.header(state).encode())?;
        if self.tail > 0 {
            media.flush(layout.area_base(self.slot, self.generation), self.tail)?;
        }
        media.flush(base, SLOT_HEADER_SIZE)
    }

    /// Writes and flushes an INVALID header for the next generation, then
    /// resets the in-memory tail. The caller issues the fence.
    pub fn invalidate(&mut self, media: &mut Media, layout: &Layout) -> Result<()> {
        let next = self.generation.wrapping_add(1);
        let header = SlotHeader {
            state: SlotState::Invalid,
            tail: 0,
            generation: next,
        };
        let base = layout.slot_base(self.slot);
        media.write(base, &header.encode())?;
        media.flush(base, SLOT_HEADER_SIZE)?;
        self.generation = next;
        self.tail = 0;
        self.entries = 0;
        self.payload_bytes = 0;
        Ok(())
    }

    /// Reads this log's current entries back from media.
    pub fn read_entries(&self, media: &mut Media, layout: &Layout) -> Result<Vec<LogEntry>> {
        let mut area = vec![0; self.tail as usize];
        media.read(layout.area_base(self.slot, self.generation), &mut area)?;
        Ok(decode_entries(&area, self.generation, layout.region_size).0)
    }
}

/// Decoded contents of one slot as found on media.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SlotImage {
    pub slot: usize,
    pub header: SlotHeader,
    pub entries: Vec<LogEntry>,
    /// Bytes spanned by the valid entries.
    pub valid_bytes: u64,
}

pub fn read_slot(media: &mut Media, layout: &Layout, slot: usize) -> Result<SlotImage> {
    let mut raw = [0u8; SLOT_HEADER_SIZE as usize];
    media.read(layout.slot_base(slot), &mut raw)?;
    let header = SlotHeader::decode(&raw)?;
    let mut area = vec![0; layout.area_size() as usize];
    media.read(layout.area_base(slot, header.generation), &mut area)?;
    let (entries, valid_bytes) = decode_entries(&area, header.generation, layout.region_size);
    Ok(SlotImage {
        slot,
        header,
        entries,
        valid_bytes,
    })
}

/// Applies the slot's valid undo entries to the data area in reverse append
/// order, then flushes and fences. Returns the number of entries applied.
pub fn rollback(media: &mut Media, layout: &Layout, slot: usize) -> Result<usize> {
    let image = read_slot(media, layout, slot)?;
    if image.header.state != SlotState::Valid {
        return Ok(0);
    }
    let data = layout.data_offset();
    for entry in image.entries.iter().rev() {
        media.write(data + entry.offset, &entry.payload)?;
        media.flush(data + entry.offset, entry.size())?;
    }
    media.fence()?;
    Ok(image.entries.len())
}

/// Re-applies a committed redo batch. Only a batch ending in a commit
/// record that counts every preceding entry is applied; anything else is a
/// commit that never completed and is ignored.
pub fn replay_redo(media: &mut Media, layout: &Layout, slot: usize) -> Result<usize> {
    let image = read_slot(media, layout, slot)?;
    if image.header.state != SlotState::Redo {
        return Ok(0);
    }
    let Some((commit, records)) = image.entries.split_last() else {
        return Ok(0);
    };
    let complete = commit.is_commit()
        && crate::layout::le_u64(&commit.payload) == records.len() as u64
        && records.iter().all(|e| !e.is_commit());
    if !complete {
        return Ok(0);
    }
    let data = layout.data_offset();
    for entry in records {
        media.write(data + entry.offset, &entry.payload)?;
        media.flush(data + entry.offset, entry.size())?;
    }
    media.fence()?;
    Ok(records.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::{Superblock, ENTRY_HEADER_SIZE};

    fn setup(line: u64) -> (Media, Layout) {
        let layout = Layout::new(256, 2, 256).unwrap();
        let mut media = Media::simulated(layout.media_capacity(line), line).unwrap();
        media.write(0, &layout.superblock().encode()).unwrap();
        media.persist_all().unwrap();
        (media, layout)
    }

    #[test]
    fn first_append_tail() {
        let (mut media, layout) = setup(64);
        let mut log = UndoLog::new(0, 0);
        log.append(&mut media, &layout, 0, &[0; 8]).unwrap();
        assert_eq!(log.tail(), ENTRY_HEADER_SIZE + 8);
        assert_eq!(media.fence_count(), 1); // only the setup fence
    }

    #[test]
    fn repeated_offsets_kept_in_order() {
        let (mut media, layout) = setup(64);
        let mut log = UndoLog::new(1, 0);
        log.append(&mut media, &layout, 0, &[1; 8]).unwrap();
        log.append(&mut media, &layout, 0, &[2; 8]).unwrap();
        let entries = log.read_entries(&mut media, &layout).unwrap();
        assert_eq!(entries.len(), 2);
        assert_eq!(entries[0].payload, vec![1; 8]);
        assert_eq!(entries[1].payload, vec![2; 8]);
    }

    #[test]
    fn log_full() {
        let (mut media, layout) = setup(64);
        let mut log = UndoLog::new(0, 0);
        let big = vec![0; layout.area_size() as usize];
        assert!(matches!(
            log.append(&mut media, &layout, 0, &big),
            Err(Error::LogFull { slot: 0, .. })
        ));
        assert_eq!(log.tail(), 0);
    }

    #[test]
    fn rollback_reverse_order() {
        let (mut media, layout) = setup(64);
        let mut log = UndoLog::new(0, 0);
        log.append(&mut media, &layout, 0, &[0xA]).unwrap();
        log.append(&mut media, &layout, 0, &[0xB]).unwrap();
        log.seal(&mut media, &layout, SlotState::Valid).unwrap();
        media.fence().unwrap();
        // data area holds the latest store
        media.write(layout.data_offset(), &[0xC]).unwrap();
        media.persist_all().unwrap();
        assert_eq!(rollback(&mut media, &layout, 0).unwrap(), 2);
        assert_eq!(media.durable_snapshot().unwrap()[layout.data_offset() as usize], 0xA);
    }

    #[test]
    fn rollback_empty_valid_slot() {
        let (mut media, layout) = setup(64);
        let log = UndoLog::new(0, 0);
        log.seal(&mut media, &layout, SlotState::Valid).unwrap();
        media.fence().unwrap();
        let before = media.durable_snapshot().unwrap();
        assert_eq!(rollback(&mut media, &layout, 0).unwrap(), 0);
        assert_eq!(media.durable_snapshot().unwrap(), before);
    }

    #[test]
    fn rollback_stops_at_corrupt_entry() {
        let (mut media, layout) = setup(64);
        let mut log = UndoLog::new(0, 0);
        log.append(&mut media, &layout, 0, &[0xA; 8]).unwrap();
        log.append(&mut media, &layout, 8, &[0xB; 8]).unwrap();
        log.seal(&mut media, &layout, SlotState::Valid).unwrap();
        media.fence().unwrap();
        // corrupt the second entry's checksum
        let crc_at = layout.area_base(0, 0) + 24 + 12;
        media.write(crc_at, &[0xFF]).unwrap();
        media.persist_all().unwrap();
        assert_eq!(rollback(&mut media, &layout, 0).unwrap(), 1);
        let snap = media.durable_snapshot().unwrap();
        let d = layout.data_offset() as usize;
        assert_eq!(&snap[d..d + 8], &[0xA; 8]);
        assert_eq!(&snap[d + 8..d + 16], &[0; 8]);
    }

    #[test]
    fn invalidate_advances_generation_and_area() {
        let (mut media, layout) = setup(64);
        let mut log = UndoLog::new(0, 0);
        log.append(&mut media, &layout, 0, &[1]).unwrap();
        log.invalidate(&mut media, &layout).unwrap();
        log.invalidate(&mut media, &layout).unwrap();
        assert_eq!(log.generation(), 2);
        media.fence().unwrap();
        let img = read_slot(&mut media, &layout, 0).unwrap();
        assert_eq!(img.header.state, SlotState::Invalid);
        assert_eq!(img.header.generation, 2);
        assert!(img.entries.is_empty());
        let _ = Superblock::decode(&media.durable_snapshot().unwrap()).unwrap();
    }

    #[test]
    fn redo_requires_commit_record() {
        let (mut media, layout) = setup(64);
        let mut log = UndoLog::new(0, 0);
        log.append(&mut media, &layout, 0, &[5; 8]).unwrap();
        log.seal(&mut media, &layout, SlotState::Redo).unwrap();
        media.fence().unwrap();
        assert_eq!(replay_redo(&mut media, &layout, 0).unwrap(), 0);
        log.append(&mut media, &layout, COMMIT_MARKER, &1u64.to_le_bytes())
            .unwrap();
        log.seal(&mut media, &layout, SlotState::Redo).unwrap();
        media.fence().unwrap();
        assert_eq!(replay_redo(&mut media, &layout, 0).unwrap(), 1);
        let d = layout.data_offset() as usize;
        assert_eq!(&media.durable_snapshot().unwrap()[d..d + 8], &[5; 8]);
    }
}
