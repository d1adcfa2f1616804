//! A heap allocator that keeps all of its metadata out of band.
//!
//! Small requests are served from bins in a reserved heap range: fixed-size
//! cells tracked by bitmaps up to 512 bytes, and variable blocks tracked by
//! a per-bin cell array up to 128 KiB. Larger requests get their own
//! mappings. No allocator state is stored next to user data, so an
//! overflowing write cannot corrupt the allocator.

pub mod backing;
mod bin;
pub mod config;
pub mod external;
pub mod fbin;
pub mod global;
mod heap;
mod local;
mod meta;
pub mod revlookup;
pub mod vbin;

pub use backing::{ArenaBacking, Backing, BackingError, PlatformBacking};
pub use config::{ClassId, PolicyAction, RouteKind, SizeClassRoute, ViolationPolicy};
pub use external::CacheCaps;
pub use global::OobHeap;
pub use heap::{
    AuditError, AuditReport, BlockInfo, Context, Heap, HeapConfig, HeapStats, Violation, ViolationHook,
    ViolationKind, DEFAULT_RESERVE,
};
