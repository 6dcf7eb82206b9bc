use rustc_hash::FxHashMap;
use serde::{Deserialize, Serialize};

use super::trace::{AccessTrace, Region, TraceSink};
use crate::error::{invalid, Error, Result};

/// Fully associative LRU cache geometry.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheConfig {
    pub capacity_bytes: u64,
    pub line_bytes: u64,
}

impl Default for CacheConfig {
    fn default() -> Self {
        CacheConfig { capacity_bytes: 4 << 20, line_bytes: 128 }
    }
}

impl CacheConfig {
    pub fn new(capacity_bytes: u64, line_bytes: u64) -> Result<Self> {
        let cfg = CacheConfig { capacity_bytes, line_bytes };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.line_bytes == 0 || self.capacity_bytes == 0 {
            return Err(invalid("cache capacity and line size must be positive"));
        }
        if self.capacity_bytes % self.line_bytes != 0 {
            return Err(invalid(format!(
                "capacity {} is not a multiple of the line size {}",
                self.capacity_bytes, self.line_bytes
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn lines(&self) -> usize {
        (self.capacity_bytes / self.line_bytes) as usize
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheStats {
    pub hits: u64,
    pub misses: u64,
}

impl CacheStats {
    #[inline]
    pub fn touches(&self) -> u64 {
        self.hits + self.misses
    }

    pub fn hit_ratio(&self) -> Result<f64> {
        match self.touches() {
            0 => Err(Error::EmptyTrace),
            n => Ok(self.hits as f64 / n as f64),
        }
    }
}

const NIL: u32 = u32::MAX;

/// Streaming LRU simulator. Implements [`TraceSink`], so index structures can
/// feed it directly without materializing a trace.
pub struct LruCache {
    config: CacheConfig,
    slots: FxHashMap<u64, u32>,
    line_of: Vec<u64>,
    prev: Vec<u32>,
    next: Vec<u32>,
    head: u32,
    tail: u32,
    stats: CacheStats,
}

impl LruCache {
    pub fn new(config: CacheConfig) -> Result<Self> {
        config.validate()?;
        let n = config.lines();
        Ok(LruCache {
            config,
            slots: FxHashMap::with_capacity_and_hasher(n, Default::default()),
            line_of: Vec::with_capacity(n),
            prev: Vec::with_capacity(n),
            next: Vec::with_capacity(n),
            head: NIL,
            tail: NIL,
            stats: CacheStats::default(),
        })
    }

    pub fn stats(&self) -> CacheStats {
        self.stats
    }

    pub fn config(&self) -> CacheConfig {
        self.config
    }

    /// Touches every line covered by `⌈width / line⌉` starting at the line of `address`.
    #[inline]
    pub fn access(&mut self, address: u64, width: u32) {
        let first = address / self.config.line_bytes;
        let count = (width as u64).div_ceil(self.config.line_bytes).max(1);
        for line in first..first + count {
            self.touch_line(line);
        }
    }

    fn touch_line(&mut self, line: u64) {
        if let Some(&slot) = self.slots.get(&line) {
            self.stats.hits += 1;
            self.move_to_front(slot);
            return;
        }
        self.stats.misses += 1;
        let slot = if self.line_of.len() < self.config.lines() {
            self.line_of.push(line);
            self.prev.push(NIL);
            self.next.push(NIL);
            (self.line_of.len() - 1) as u32
        } else {
            let victim = self.tail;
            self.unlink(victim);
            self.slots.remove(&self.line_of[victim as usize]);
            self.line_of[victim as usize] = line;
            victim
        };
        self.slots.insert(line, slot);
        self.push_front(slot);
    }

    fn unlink(&mut self, slot: u32) {
        let (p, n) = (self.prev[slot as usize], self.next[slot as usize]);
        if p != NIL {
            self.next[p as usize] = n;
        } else {
            self.head = n;
        }
        if n != NIL {
            self.prev[n as usize] = p;
        } else {
            self.tail = p;
        }
    }

    fn push_front(&mut self, slot: u32) {
        self.prev[slot as usize] = NIL;
        self.next[slot as usize] = self.head;
        if self.head != NIL {
            self.prev[self.head as usize] = slot;
        }
        self.head = slot;
        if self.tail == NIL {
            self.tail = slot;
        }
    }

    fn move_to_front(&mut self, slot: u32) {
        if self.head != slot {
            self.unlink(slot);
            self.push_front(slot);
        }
    }
}

impl TraceSink for LruCache {
    #[inline]
    fn touch(&mut self, region: Region, byte_offset: u64, width: u32) {
        self.access(region.base() + byte_offset, width);
    }
}

/// Replays a recorded trace through a fresh cache.
pub fn simulate(trace: &AccessTrace, config: CacheConfig) -> Result<CacheStats> {
    let mut cache = LruCache::new(config)?;
    for a in trace.accesses() {
        cache.access(a.address, a.width);
    }
    Ok(cache.stats())
}
