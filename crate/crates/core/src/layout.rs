//! On-media format of a region file.
//!
//! ```text
//! 0..8     magic "FAMSYNC1"
//! 8..16    format version (1), u64 LE
//! 16..24   region_size
//! 24..32   max_threads
//! 32..40   log slot size
//! 40..     max_threads log slots, back to back
//! ...      data area, starting at the next 4096-byte boundary
//! ```
//!
//! Each slot starts with a 16-byte header (`state` u32, `tail` u64,
//! `generation` u32) followed by two equal entry areas. A slot's
//! generation advances every time its log is invalidated, and entries of
//! generation `g` live in area `g % 2`, so the entries of the previous
//! epoch are never overwritten while its invalidation may still be
//! undurable. Entries are `offset` u64, `size` u32, `crc` u32, then
//! `size` payload bytes padded with zeros to 8 bytes. The CRC-32 covers
//! the generation, offset, size and payload, so a stale entry from an
//! older epoch never validates.

use crate::error::{Error, Result};

pub const MAGIC: [u8; 8] = *b"FAMSYNC1";
pub const FORMAT_VERSION: u64 = 1;
pub const SUPERBLOCK_SIZE: u64 = 40;
pub const DATA_ALIGN: u64 = 4096;
pub const SLOT_HEADER_SIZE: u64 = 16;
pub const ENTRY_HEADER_SIZE: u64 = 16;
/// Smallest slot that still fits one 8-byte entry per area.
pub const MIN_SLOT_SIZE: u64 = SLOT_HEADER_SIZE + 2 * (ENTRY_HEADER_SIZE + 8);
/// `offset` value marking a redo commit record.
pub const COMMIT_MARKER: u64 = u64::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u32)]
pub enum SlotState {
    Invalid = 0,
    /// Holds undo entries (original bytes) of a sealed epoch.
    Valid = 1,
    /// Holds a committed redo batch written by the WAL baseline.
    Redo = 2,
}

impl SlotState {
    fn from_raw(raw: u32) -> Option<Self> {
        match raw {
            0 => Some(SlotState::Invalid),
            1 => Some(SlotState::Valid),
            2 => Some(SlotState::Redo),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Superblock {
    pub region_size: u64,
    pub max_threads: u64,
    pub slot_size: u64,
}

impl Superblock {
    pub fn encode(&self) -> [u8; SUPERBLOCK_SIZE as usize] {
        let mut out = [0u8; SUPERBLOCK_SIZE as usize];
        out[0..8].copy_from_slice(&MAGIC);
        out[8..16].copy_from_slice(&FORMAT_VERSION.to_le_bytes());
        out[16..24].copy_from_slice(&self.region_size.to_le_bytes());
        out[24..32].copy_from_slice(&self.max_threads.to_le_bytes());
        out[32..40].copy_from_slice(&self.slot_size.to_le_bytes());
        out
    }

    /// `Ok(None)` when the magic is absent: never formatted, or a format
    /// that did not complete.
    pub fn decode(bytes: &[u8]) -> Result<Option<Self>> {
        if bytes.len() < SUPERBLOCK_SIZE as usize {
            return Err(Error::Corruption("superblock truncated".into()));
        }
        if bytes[0..8].iter().all(|&b| b == 0) {
            return Ok(None);
        }
        if bytes[0..8] != MAGIC {
            return Err(Error::Corruption(format!("bad magic {:02x?}", &bytes[0..8])));
        }
        let version = le_u64(&bytes[8..16]);
        if version != FORMAT_VERSION {
            return Err(Error::Corruption(format!("unsupported format version {version}")));
        }
        Ok(Some(Superblock {
            region_size: le_u64(&bytes[16..24]),
            max_threads: le_u64(&bytes[24..32]),
            slot_size: le_u64(&bytes[32..40]),
        }))
    }
}

/// Byte offsets derived from the superblock geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub region_size: u64,
    pub max_threads: usize,
    pub slot_size: u64,
}

impl Layout {
    pub fn new(region_size: u64, max_threads: usize, slot_size: u64) -> Result<Self> {
        if max_threads == 0 {
            return Err(Error::Config("max_threads must be at least 1".into()));
        }
        if slot_size < MIN_SLOT_SIZE || !slot_size.is_multiple_of(8) {
            return Err(Error::Config(format!(
                "slot size {slot_size} must be a multiple of 8 and at least {MIN_SLOT_SIZE}"
            )));
        }
        if region_size == 0 {
            return Err(Error::Config("region_size must be non-zero".into()));
        }
        Ok(Layout {
            region_size,
            max_threads,
            slot_size,
        })
    }

    pub fn from_superblock(sb: &Superblock) -> Result<Self> {
        Layout::new(sb.region_size, sb.max_threads as usize, sb.slot_size)
    }

    pub fn superblock(&self) -> Superblock {
        Superblock {
            region_size: self.region_size,
            max_threads: self.max_threads as u64,
            slot_size: self.slot_size,
        }
    }

    pub fn slot_base(&self, slot: usize) -> u64 {
        SUPERBLOCK_SIZE + slot as u64 * self.slot_size
    }

    /// Bytes available to one generation's entries.
    pub fn area_size(&self) -> u64 {
        (self.slot_size - SLOT_HEADER_SIZE) / 2 / 8 * 8
    }

    pub fn area_base(&self, slot: usize, generation: u32) -> u64 {
        self.slot_base(slot) + SLOT_HEADER_SIZE + (generation as u64 % 2) * self.area_size()
    }

    /// Media offset where the data area starts; everything before it is the
    /// log area.
    pub fn data_offset(&self) -> u64 {
        (SUPERBLOCK_SIZE + self.max_threads as u64 * self.slot_size).next_multiple_of(DATA_ALIGN)
    }

    pub fn log_area_size(&self) -> u64 {
        self.data_offset()
    }

    /// Smallest media capacity holding this layout, rounded to `line_size`.
    pub fn media_capacity(&self, line_size: u64) -> u64 {
        (self.data_offset() + self.region_size).next_multiple_of(line_size)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SlotHeader {
    pub state: SlotState,
    pub tail: u64,
    pub generation: u32,
}

impl SlotHeader {
    pub fn encode(&self) -> [u8; SLOT_HEADER_SIZE as usize] {
        let mut out = [0u8; SLOT_HEADER_SIZE as usize];
        out[0..4].copy_from_slice(&(self.state as u32).to_le_bytes());
        out[4..12].copy_from_slice(&self.tail.to_le_bytes());
        out[12..16].copy_from_slice(&self.generation.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let raw = le_u32(&bytes[0..4]);
        let state = SlotState::from_raw(raw).ok_or_else(|| Error::Corruption(format!("unknown slot state {raw}")))?;
        Ok(SlotHeader {
            state,
            tail: le_u64(&bytes[4..12]),
            generation: le_u32(&bytes[12..16]),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogEntry {
    pub offset: u64,
    pub payload: Vec<u8>,
}

impl LogEntry {
    pub fn size(&self) -> u64 {
        self.payload.len() as u64
    }

    pub fn is_commit(&self) -> bool {
        self.offset == COMMIT_MARKER
    }
}

pub fn entry_len(payload_len: u64) -> u64 {
    ENTRY_HEADER_SIZE + payload_len.next_multiple_of(8)
}

pub fn entry_checksum(generation: u32, offset: u64, payload: &[u8]) -> u32 {
    let mut h = crc32fast::Hasher::new();
    h.update(&generation.to_le_bytes());
    h.update(&offset.to_le_bytes());
    h.update(&(payload.len() as u32).to_le_bytes());
    h.update(payload);
    h.finalize()
}

pub fn encode_entry(generation: u32, offset: u64, payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(entry_len(payload.len() as u64) as usize);
    out.extend_from_slice(&offset.to_le_bytes());
    out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    out.extend_from_slice(&entry_checksum(generation, offset, payload).to_le_bytes());
    out.extend_from_slice(payload);
    out.resize(entry_len(payload.len() as u64) as usize, 0);
    out
}

/// Decodes entries from the start of `area` until the first entry that is
/// malformed, out of bounds, or fails its checksum for `generation`.
/// Returns the entries and the number of bytes they span.
pub fn decode_entries(area: &[u8], generation: u32, region_size: u64) -> (Vec<LogEntry>, u64) {
    let mut entries = Vec::new();
    let mut pos = 0usize;
    while pos + ENTRY_HEADER_SIZE as usize <= area.len() {
        let offset = le_u64(&area[pos..pos + 8]);
        let size = le_u32(&area[pos + 8..pos + 12]) as u64;
        let crc = le_u32(&area[pos + 12..pos + 16]);
        if size == 0 {
            break;
        }
        let in_bounds = if offset == COMMIT_MARKER {
            size == 8
        } else {
            offset.checked_add(size).is_some_and(|end| end <= region_size)
        };
        if !in_bounds {
            break;
        }
        let len = entry_len(size) as usize;
        if pos + len > area.len() {
            break;
        }
        let body = pos + ENTRY_HEADER_SIZE as usize;
        let payload = &area[body..body + size as usize];
        let padding = &area[body + size as usize..pos + len];
        if padding.iter().any(|&b| b != 0) || entry_checksum(generation, offset, payload) != crc {
            break;
        }
        entries.push(LogEntry {
            offset,
            payload: payload.to_vec(),
        });
        pos += len;
    }
    (entries, pos as u64)
}

pub(crate) fn le_u64(bytes: &[u8]) -> u64 {
    u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"))
}

pub(crate) fn le_u32(bytes: &[u8]) -> u32 {
    u32::from_le_bytes(bytes[..4].try_into().expect("4 bytes"))
}
