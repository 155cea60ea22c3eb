use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("range error: [{offset}, {offset}+{len}) outside 0..{limit}")]
    OutOfRange { offset: u64, len: u64, limit: u64 },

    #[error("address {addr:#x} is outside the working range")]
    BadAddress { addr: u64 },

    #[error("scalar store of {size} bytes; scalar stores are 1, 2, 4 or 8 bytes")]
    InvalidStore { size: u64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("corrupt region: {0}")]
    Corruption(String),

    #[error("log slot {slot} is full (need {needed} bytes, {available} available)")]
    LogFull { slot: usize, needed: u64, available: u64 },

    #[error("all {max_threads} log slots are bound to threads")]
    TooManyThreads { max_threads: usize },

    #[error("crash-state enumeration bound exceeded: {lines} candidate lines > bound {bound}; use a smaller trace")]
    EnumerationBound { lines: usize, bound: usize },

    /// The simulated media reached its injected crash point; no further
    /// operation was applied.
    #[error("simulated crash after {ops} media operations")]
    Crashed { ops: u64 },

    #[error("threads {a} and {b} modified overlapping bytes at offset {offset} between syncs")]
    ContractViolation { a: usize, b: usize, offset: u64 },

    #[error("heap: {0}")]
    Heap(String),

    #[error("out of memory: requested {requested} bytes")]
    OutOfMemory { requested: u64 },

    #[error("value is {got} bytes; this store holds {expected}-byte values")]
    ValueSize { expected: u64, got: u64 },

    #[error("invalid trace: {0}")]
    Trace(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn out_of_range(offset: u64, len: u64, limit: u64) -> Self {
        Error::OutOfRange { offset, len, limit }
    }

    pub fn is_crash(&self) -> bool {
        matches!(self, Error::Crashed { .. })
    }
}
