//! Access tracing and a fully associative LRU cache simulator.

mod cache;
mod compare;
mod trace;

pub use cache::{simulate, CacheConfig, CacheStats, LruCache};
pub use compare::{compare_map_backends, compare_map_backends_with, BackendComparison};
pub use trace::{Access, AccessTrace, NoTrace, Region, TraceSink};
