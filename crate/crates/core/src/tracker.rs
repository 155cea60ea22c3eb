//! Volatile record of modified ranges, kept per thread so a sync never has
//! to walk the persistent log to find what to copy.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DirtyRecord {
    pub offset: u64,
    pub size: u64,
}

impl DirtyRecord {
    pub fn end(&self) -> u64 {
        self.offset + self.size
    }
}

#[derive(Debug, Clone, Default)]
pub struct DirtyList {
    records: Vec<DirtyRecord>,
    total_logged_bytes: u64,
}

impl DirtyList {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a record. Zero-sized records are ignored.
    pub fn record(&mut self, offset: u64, size: u64) {
        if size == 0 {
            return;
        }
        self.records.push(DirtyRecord { offset, size });
        self.total_logged_bytes += size;
    }

    pub fn records(&self) -> &[DirtyRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn total_logged_bytes(&self) -> u64 {
        self.total_logged_bytes
    }

    pub fn clear(&mut self) {
        self.records.clear();
        self.total_logged_bytes = 0;
    }
}

/// Sorts and merges overlapping or adjacent records from every list.
pub fn coalesce<'a>(lists: impl IntoIterator<Item = &'a DirtyList>) -> Vec<DirtyRecord> {
    let mut all: Vec<DirtyRecord> = lists.into_iter().flat_map(|l| l.records.iter().copied()).collect();
    merge_sorted(&mut all)
}

/// Sort + sweep merge of arbitrary ranges.
pub fn merge_ranges(mut ranges: Vec<DirtyRecord>) -> Vec<DirtyRecord> {
    merge_sorted(&mut ranges)
}

fn merge_sorted(ranges: &mut [DirtyRecord]) -> Vec<DirtyRecord> {
    ranges.sort_unstable_by_key(|r| r.offset);
    let mut out: Vec<DirtyRecord> = Vec::new();
    for r in ranges.iter().filter(|r| r.size > 0) {
        match out.last_mut() {
            Some(last) if r.offset <= last.end() => {
                let end = last.end().max(r.end());
                last.size = end - last.offset;
            }
            _ => out.push(*r),
        }
    }
    out
}

/// Widens every range outward to `granularity` boundaries, clips to
/// `limit`, and re-merges ranges that now touch.
pub fn widen(ranges: &[DirtyRecord], granularity: u64, limit: u64) -> Vec<DirtyRecord> {
    let widened = ranges
        .iter()
        .map(|r| {
            let start = r.offset / granularity * granularity;
            let end = r.end().div_ceil(granularity) * granularity;
            let end = end.min(limit);
            DirtyRecord {
                offset: start,
                size: end - start,
            }
        })
        .collect();
    merge_ranges(widened)
}

pub fn total_bytes(ranges: &[DirtyRecord]) -> u64 {
    ranges.iter().map(|r| r.size).sum()
}

/// First byte written by more than one list, with the two list indices.
/// Used by the contract checker: two threads must not modify the same
/// location between syncs.
pub fn first_overlap(lists: &[&DirtyList]) -> Option<(usize, usize, u64)> {
    let mut tagged: Vec<(DirtyRecord, usize)> = Vec::new();
    for (i, list) in lists.iter().enumerate() {
        for r in merge_ranges(list.records.clone()) {
            tagged.push((r, i));
        }
    }
    tagged.sort_unstable_by_key(|(r, _)| r.offset);
    let mut reach: Option<(u64, usize)> = None;
    for (r, owner) in tagged {
        if let Some((end, prev)) = reach {
            if r.offset < end && prev != owner {
                return Some((prev.min(owner), prev.max(owner), r.offset));
            }
            if r.end() > end {
                reach = Some((r.end(), owner));
            }
        } else {
            reach = Some((r.end(), owner));
        }
    }
    None
}
