//! Reference kernel-map builders: a hash-table engine in the style of
//! existing sparse-convolution libraries, and an exhaustive oracle.

use rayon::prelude::*;

use super::{merge_chunks, KernelMap, Match};
use crate::geometry::{pack_unchecked, Coordinate, OffsetSet, PackedKey, PointCloud};
use crate::tracesim::{NoTrace, Region, TraceSink};

const FIBONACCI: u64 = 0x9E37_79B9_7F4A_7C15;
const EMPTY: u64 = u64::MAX;
const SLOT_BYTES: u64 = std::mem::size_of::<Slot>() as u64;
const QUERY_CHUNK: usize = 2048;

#[derive(Clone, Copy, Debug)]
#[repr(C)]
struct Slot {
    key: u64,
    index: u32,
}

/// Open-addressed table from packed input coordinates to input indices.
///
/// Linear probing over a power-of-two slot array (at least `2N` slots, so the
/// load factor never exceeds 0.5), with Fibonacci multiplicative hashing.
#[derive(Clone, Debug)]
pub struct HashIndex {
    slots: Vec<Slot>,
    bits: u32,
    len: usize,
    max_probe: usize,
}

/// Probe statistics of a batch of lookups.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ProbeStats {
    pub lookups: u64,
    pub probes: u64,
    pub max_probe: u64,
}

impl HashIndex {
    pub fn capacity(&self) -> usize {
        self.slots.len()
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Longest probe sequence seen while inserting.
    pub fn max_insert_probe(&self) -> usize {
        self.max_probe
    }

    pub fn load_factor(&self) -> f64 {
        self.len as f64 / self.slots.len() as f64
    }

    #[inline]
    fn home(&self, key: u64) -> usize {
        if self.bits == 0 {
            0
        } else {
            (key.wrapping_mul(FIBONACCI) >> (64 - self.bits)) as usize
        }
    }

    /// Returns the stored index and the number of slots examined.
    pub fn lookup(&self, key: PackedKey) -> (Option<u32>, usize) {
        self.lookup_traced(key, &mut NoTrace)
    }

    #[inline]
    fn lookup_traced<S: TraceSink>(&self, key: PackedKey, sink: &mut S) -> (Option<u32>, usize) {
        let mask = self.slots.len() - 1;
        let mut pos = self.home(key.0);
        let mut probes = 0;
        loop {
            probes += 1;
            sink.touch(Region::HashSlots, pos as u64 * SLOT_BYTES, SLOT_BYTES as u32);
            let slot = self.slots[pos];
            if slot.key == key.0 {
                return (Some(slot.index), probes);
            }
            if slot.key == EMPTY {
                return (None, probes);
            }
            pos = (pos + 1) & mask;
        }
    }
}

/// Inserts every input coordinate of `cloud`, keyed by its packed value.
pub fn build_hash_index(cloud: &PointCloud) -> HashIndex {
    let n = cloud.len();
    let capacity = (2 * n).max(1).next_power_of_two();
    let mut index = HashIndex {
        slots: vec![Slot { key: EMPTY, index: 0 }; capacity],
        bits: capacity.trailing_zeros(),
        len: 0,
        max_probe: 0,
    };
    let mask = capacity - 1;
    for (j, &c) in cloud.coords().iter().enumerate() {
        let key = pack_unchecked(c).0;
        let mut pos = index.home(key);
        let mut probes = 1;
        while index.slots[pos].key != EMPTY && index.slots[pos].key != key {
            pos = (pos + 1) & mask;
            probes += 1;
        }
        index.slots[pos] = Slot { key, index: j as u32 };
        index.max_probe = index.max_probe.max(probes);
        index.len += 1;
    }
    index
}

fn query_range<S: TraceSink>(
    index: &HashIndex,
    outputs: &[Coordinate],
    first_output: usize,
    offsets: &OffsetSet,
    stats: &mut ProbeStats,
    sink: &mut S,
) -> Vec<Vec<Match>> {
    let mut lists = vec![Vec::new(); offsets.len()];
    for (local, &q) in outputs.iter().enumerate() {
        let i = (first_output + local) as u32;
        for (k, &delta) in offsets.offsets().iter().enumerate() {
            let Some(target) = q.offset_by(delta) else { continue };
            let (hit, probes) = index.lookup_traced(pack_unchecked(target), sink);
            stats.lookups += 1;
            stats.probes += probes as u64;
            stats.max_probe = stats.max_probe.max(probes as u64);
            if let Some(j) = hit {
                lists[k].push(Match { input: j, output: i });
            }
        }
    }
    lists
}

/// Looks up `q_i + δ_k` for every output and offset.
pub fn query_hash_map(index: &HashIndex, outputs: &[Coordinate], offsets: &OffsetSet) -> (KernelMap, ProbeStats) {
    let parts: Vec<(Vec<Vec<Match>>, ProbeStats)> = outputs
        .par_chunks(QUERY_CHUNK)
        .enumerate()
        .map(|(c, chunk)| {
            let mut stats = ProbeStats::default();
            let lists = query_range(index, chunk, c * QUERY_CHUNK, offsets, &mut stats, &mut NoTrace);
            (lists, stats)
        })
        .collect();
    let mut stats = ProbeStats::default();
    let mut chunks = Vec::with_capacity(parts.len());
    for (lists, s) in parts {
        stats.lookups += s.lookups;
        stats.probes += s.probes;
        stats.max_probe = stats.max_probe.max(s.max_probe);
        chunks.push(lists);
    }
    (KernelMap::from_lists_unchecked(offsets.clone(), merge_chunks(offsets.len(), chunks)), stats)
}

/// Single-worker variant that reports every slot touch to `sink`, in query
/// order (output-major, then offset).
pub fn query_hash_map_traced<S: TraceSink>(
    index: &HashIndex,
    outputs: &[Coordinate],
    offsets: &OffsetSet,
    sink: &mut S,
) -> (KernelMap, ProbeStats) {
    let mut stats = ProbeStats::default();
    let lists = query_range(index, outputs, 0, offsets, &mut stats, sink);
    (KernelMap::from_lists_unchecked(offsets.clone(), lists), stats)
}

/// Exhaustive oracle: for every offset and output, compares the candidate
/// coordinate against every input coordinate.
pub fn brute_force_map(inputs: &[Coordinate], outputs: &[Coordinate], offsets: &OffsetSet) -> KernelMap {
    let xs: Vec<i32> = inputs.iter().map(|c| c.x).collect();
    let ys: Vec<i32> = inputs.iter().map(|c| c.y).collect();
    let zs: Vec<i32> = inputs.iter().map(|c| c.z).collect();
    let lists = offsets
        .offsets()
        .iter()
        .map(|&delta| {
            outputs
                .par_iter()
                .enumerate()
                .filter_map(|(i, &q)| {
                    let target = q.offset_by(delta)?;
                    scan_equal(&xs, &ys, &zs, target).map(|j| Match { input: j as u32, output: i as u32 })
                })
                .collect()
        })
        .collect();
    KernelMap::from_lists_unchecked(offsets.clone(), lists)
}

fn scan_equal(xs: &[i32], ys: &[i32], zs: &[i32], t: Coordinate) -> Option<usize> {
    const LANES: usize = 64;
    let whole = xs.len() / LANES * LANES;
    for base in (0..whole).step_by(LANES) {
        let (cx, cy, cz) = (&xs[base..base + LANES], &ys[base..base + LANES], &zs[base..base + LANES]);
        let mut any = false;
        for l in 0..LANES {
            any |= (cx[l] == t.x) & (cy[l] == t.y) & (cz[l] == t.z);
        }
        if any {
            return (base..base + LANES).find(|&j| xs[j] == t.x && ys[j] == t.y && zs[j] == t.z);
        }
    }
    (whole..xs.len()).find(|&j| xs[j] == t.x && ys[j] == t.y && zs[j] == t.z)
}
