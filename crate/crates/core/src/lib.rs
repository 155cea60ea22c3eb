//! Failure-atomic msync in userspace.
//!
//! A [`Region`] keeps the application's working copy of a persistent file
//! in memory. Every instrumented store first appends the bytes it is about
//! to overwrite to a per-thread undo log on the media and records the range
//! in a volatile dirty list; [`Region::fa_msync`] then copies exactly the
//! dirty ranges to the backing data area behind a sealed log, so a crash at
//! any point recovers to the state of some completed sync.
//!
//! The crate also carries the pieces used to evaluate that claim: a
//! crash-simulating [`media`] backend, a persistent [`heap`] allocator that
//! relies only on the logging for crash consistency, a KV-store benchmark
//! with page-granular and WAL baselines ([`kv`], [`workload`]) and an
//! exhaustive crash-injection harness ([`crashharness`]).

pub mod crashharness;
pub mod error;
pub mod heap;
mod interpose;
pub mod kv;
pub mod layout;
pub mod media;
pub mod msync;
pub mod region;
pub mod tracker;
pub mod undolog;
pub mod workload;

pub use error::{Error, Result};
pub use heap::Heap;
pub use kv::KvStore;
pub use media::{Media, MediaConfig, MediaMode};
pub use msync::{recover_region, RecoveryReport, SyncReport};
pub use region::{Addr, BaselineMode, CopySource, FenceMode, Region, RegionConfig, SyncOptions};
