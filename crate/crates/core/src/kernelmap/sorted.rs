//! Kernel-map construction by binary search over a sorted source array.
//!
//! The source array holds the packed input coordinates in key order. Output
//! coordinates are sorted once; for each weight offset `δ_k` the query
//! segment `{q_i + δ_k}` is therefore sorted too and is never materialized,
//! its keys are computed on demand from `(i, k)`.
//!
//! Matching runs in two traversals:
//! 1. *backward*: the source array is cut into blocks of at most `B` keys.
//!    The last key of each block (its pivot) is binary-searched in the query
//!    segment, which splits the segment into one query block per source block.
//! 2. *forward*: query blocks longer than `C` are split into near-equal
//!    ranges. Each range copies its source block into a worker-local buffer
//!    and binary-searches every query of the range inside that buffer only.
//!
//! Comparisons are counted as three-way key comparisons, so a search over
//! `n` keys costs at most `⌈log2(n + 1)⌉`.

use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{KernelMap, Match};
use crate::error::{invalid, Result};
use crate::geometry::{pack_unchecked, Coordinate, OffsetSet, PackedKey, PointCloud};
use crate::tracesim::{NoTrace, Region, TraceSink};

const KEY_BYTES: u64 = 8;
const INDEX_BYTES: u64 = 4;

/// Source-block size `B` and balanced query-block bound `C`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchParams {
    pub block_size: usize,
    pub query_block: usize,
}

impl Default for SearchParams {
    fn default() -> Self {
        SearchParams { block_size: 256, query_block: 512 }
    }
}

impl SearchParams {
    pub fn validate(&self) -> Result<()> {
        if self.block_size == 0 || self.query_block == 0 {
            return Err(invalid("block size B and query block bound C must be positive"));
        }
        Ok(())
    }
}

/// Block sizes suggested by the asymptotic work analysis:
/// `B = (|P|/|Q|)·log2|Q|`, `C = sqrt(|Q| / (|P|·log2 B))·B`, each rounded and
/// clamped to at least 1 (with `log2 B` floored at 1).
///
/// Advisory only; [`SearchParams::default`] is what layers use.
pub fn theoretical_hyperparams(inputs: usize, outputs: usize) -> SearchParams {
    let (p, q) = (inputs.max(1) as f64, outputs.max(1) as f64);
    let b = ((p / q) * q.log2()).round().max(1.0);
    let log_b = b.log2().max(1.0);
    let c = ((q / (p * log_b)).sqrt() * b).round().max(1.0);
    SearchParams { block_size: b as usize, query_block: c as usize }
}

/// Instrumentation tallies for one build.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchCounters {
    pub backward_comparisons: u64,
    pub forward_comparisons: u64,
    pub source_elements_loaded: u64,
    pub queries_executed: u64,
}

impl SearchCounters {
    fn absorb(&mut self, other: &SearchCounters) {
        self.backward_comparisons += other.backward_comparisons;
        self.forward_comparisons += other.forward_comparisons;
        self.source_elements_loaded += other.source_elements_loaded;
        self.queries_executed += other.queries_executed;
    }

    pub fn total_comparisons(&self) -> u64 {
        self.backward_comparisons + self.forward_comparisons
    }
}

/// Packed input keys in increasing order, with the original input index of
/// each key, cut into blocks of `block_size`.
#[derive(Clone, Debug)]
pub struct SortedSource {
    keys: Vec<PackedKey>,
    indices: Vec<u32>,
    block_size: usize,
    pivots: Vec<PackedKey>,
    sorts_performed: usize,
}

impl SortedSource {
    pub fn keys(&self) -> &[PackedKey] {
        &self.keys
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn num_blocks(&self) -> usize {
        self.pivots.len()
    }

    /// Last key of each block.
    pub fn pivots(&self) -> &[PackedKey] {
        &self.pivots
    }

    pub fn block_range(&self, block: usize) -> Range<usize> {
        let start = block * self.block_size;
        start..(start + self.block_size).min(self.keys.len())
    }

    /// 0 when the input cloud was already flagged sorted, 1 otherwise.
    pub fn sorts_performed(&self) -> usize {
        self.sorts_performed
    }
}

/// Packs and sorts the input coordinates, carrying their original indices.
/// The sort is skipped for clouds flagged as sorted.
pub fn build_source_array(cloud: &PointCloud, block_size: usize) -> Result<SortedSource> {
    if block_size == 0 {
        return Err(invalid("block size B must be positive"));
    }
    let mut pairs: Vec<(PackedKey, u32)> =
        cloud.coords().iter().enumerate().map(|(j, &c)| (pack_unchecked(c), j as u32)).collect();
    let sorts_performed = if cloud.is_sorted() {
        0
    } else {
        pairs.par_sort_unstable_by_key(|&(k, _)| k);
        1
    };
    let (keys, indices): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
    let pivots = keys.chunks(block_size).map(|b| *b.last().unwrap()).collect();
    Ok(SortedSource { keys, indices, block_size, pivots, sorts_performed })
}

/// Key of query `q_i + δ_k`, or [`PackedKey::UNMATCHABLE`] when the sum
/// leaves the coordinate range.
#[inline]
pub fn segment_query_key(outputs: &[Coordinate], offsets: &OffsetSet, q_index: usize, offset_index: usize) -> PackedKey {
    match outputs[q_index].offset_by(offsets.get(offset_index)) {
        Some(c) => pack_unchecked(c),
        None => PackedKey::UNMATCHABLE,
    }
}

/// Split of one query segment by the source pivots.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Partition {
    /// `boundaries[b]` is the first query position whose key exceeds
    /// `pivot_b`; query block `b` is `[boundaries[b-1], boundaries[b])`.
    pub boundaries: Vec<usize>,
    pub comparisons: u64,
}

impl Partition {
    pub fn block(&self, b: usize) -> Range<usize> {
        let start = if b == 0 { 0 } else { self.boundaries[b - 1] };
        start..self.boundaries[b]
    }

    /// Position from which queries exceed every source key.
    pub fn unmatched_from(&self) -> usize {
        self.boundaries.last().copied().unwrap_or(0)
    }
}

/// Upper-bound search of every pivot in the segment of offset `offset_index`.
pub fn backward_partition(source: &SortedSource, outputs: &[Coordinate], offsets: &OffsetSet, offset_index: usize) -> Partition {
    backward_partition_traced(source, outputs, offsets, offset_index, &mut NoTrace)
}

fn backward_partition_traced<S: TraceSink>(
    source: &SortedSource,
    outputs: &[Coordinate],
    offsets: &OffsetSet,
    offset_index: usize,
    sink: &mut S,
) -> Partition {
    let n = outputs.len();
    let mut boundaries = Vec::with_capacity(source.num_blocks());
    let mut comparisons = 0;
    // Pivots increase, so each search can start at the previous boundary.
    let mut lo = 0;
    for (b, &pivot) in source.pivots().iter().enumerate() {
        let pivot_pos = source.block_range(b).end - 1;
        sink.touch(Region::SourceKeys, pivot_pos as u64 * KEY_BYTES, KEY_BYTES as u32);
        let mut hi = n;
        while lo < hi {
            let mid = lo + (hi - lo) / 2;
            comparisons += 1;
            if segment_query_key(outputs, offsets, mid, offset_index) <= pivot {
                lo = mid + 1;
            } else {
                hi = mid;
            }
        }
        boundaries.push(lo);
    }
    Partition { boundaries, comparisons }
}

/// Splits each query block longer than `query_block` into `⌈L/C⌉` contiguous
/// ranges whose lengths differ by at most one (longer ranges first).
/// Returns the ranges of each source block; empty blocks yield no range.
pub fn balance_blocks(partition: &Partition, query_block: usize) -> Result<Vec<Vec<Range<usize>>>> {
    if query_block == 0 {
        return Err(invalid("query block bound C must be positive"));
    }
    Ok((0..partition.boundaries.len()).map(|b| split_even(partition.block(b), query_block)).collect())
}

fn split_even(range: Range<usize>, limit: usize) -> Vec<Range<usize>> {
    let len = range.len();
    if len == 0 {
        return Vec::new();
    }
    let parts = len.div_ceil(limit);
    let (base, extra) = (len / parts, len % parts);
    let mut out = Vec::with_capacity(parts);
    let mut start = range.start;
    for p in 0..parts {
        let size = base + usize::from(p < extra);
        out.push(start..start + size);
        start += size;
    }
    out
}

/// One balanced query range bound to its source block.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WorkItem {
    pub offset: usize,
    pub block: usize,
    pub queries: Range<usize>,
}

/// All forward-search work of one build, ordered by (offset, block, range).
#[derive(Clone, Debug, Default)]
pub struct QueryBlockPlan {
    pub items: Vec<WorkItem>,
}

impl QueryBlockPlan {
    fn build(partitions: &[Partition], query_block: usize) -> QueryBlockPlan {
        let mut items = Vec::new();
        for (offset, part) in partitions.iter().enumerate() {
            for block in 0..part.boundaries.len() {
                for queries in split_even(part.block(block), query_block) {
                    items.push(WorkItem { offset, block, queries });
                }
            }
        }
        QueryBlockPlan { items }
    }
}

/// Scratch copy of one source block.
#[derive(Default)]
struct BlockBuffer {
    keys: Vec<PackedKey>,
    indices: Vec<u32>,
}

impl BlockBuffer {
    fn load<S: TraceSink>(&mut self, source: &SortedSource, block: usize, sink: &mut S) {
        let range = source.block_range(block);
        self.keys.clear();
        self.indices.clear();
        for pos in range.clone() {
            sink.touch(Region::SourceKeys, pos as u64 * KEY_BYTES, KEY_BYTES as u32);
            sink.touch(Region::SourceIndices, pos as u64 * INDEX_BYTES, INDEX_BYTES as u32);
        }
        self.keys.extend_from_slice(&source.keys[range.clone()]);
        self.indices.extend_from_slice(&source.indices[range]);
    }
}

/// Three-way binary search; returns the position on a hit and the number of
/// comparisons made.
#[inline]
fn search_block(keys: &[PackedKey], key: PackedKey) -> (Option<usize>, u64) {
    let (mut lo, mut hi) = (0, keys.len());
    let mut comparisons = 0;
    while lo < hi {
        let mid = lo + (hi - lo) / 2;
        comparisons += 1;
        match keys[mid].cmp(&key) {
            std::cmp::Ordering::Equal => return (Some(mid), comparisons),
            std::cmp::Ordering::Less => lo = mid + 1,
            std::cmp::Ordering::Greater => hi = mid,
        }
    }
    (None, comparisons)
}

fn run_item<S: TraceSink>(
    source: &SortedSource,
    outputs: &[Coordinate],
    offsets: &OffsetSet,
    item: &WorkItem,
    buffer: &mut BlockBuffer,
    sink: &mut S,
) -> (Vec<Match>, SearchCounters) {
    buffer.load(source, item.block, sink);
    let mut counters = SearchCounters { source_elements_loaded: buffer.keys.len() as u64, ..Default::default() };
    let mut found = Vec::new();
    for i in item.queries.clone() {
        let key = segment_query_key(outputs, offsets, i, item.offset);
        let (hit, comparisons) = search_block(&buffer.keys, key);
        counters.forward_comparisons += comparisons;
        counters.queries_executed += 1;
        if let Some(pos) = hit {
            found.push(Match { input: buffer.indices[pos], output: i as u32 });
        }
    }
    (found, counters)
}

/// Forward search of the queries `queries` of offset `offset_index` inside
/// source block `block` alone.
pub fn forward_block_search(
    source: &SortedSource,
    block: usize,
    queries: Range<usize>,
    outputs: &[Coordinate],
    offsets: &OffsetSet,
    offset_index: usize,
) -> (Vec<Match>, SearchCounters) {
    let item = WorkItem { offset: offset_index, block, queries };
    run_item(source, outputs, offsets, &item, &mut BlockBuffer::default(), &mut NoTrace)
}

fn check_outputs(outputs: &[Coordinate]) -> Result<()> {
    if outputs.windows(2).any(|w| w[0] >= w[1]) {
        return Err(invalid("output coordinates must be sorted and unique"));
    }
    Ok(())
}

fn assemble(offsets: &OffsetSet, plan: &QueryBlockPlan, results: Vec<(Vec<Match>, SearchCounters)>, mut counters: SearchCounters) -> (KernelMap, SearchCounters) {
    let mut lists: Vec<Vec<Match>> = vec![Vec::new(); offsets.len()];
    for (item, (found, c)) in plan.items.iter().zip(results) {
        counters.absorb(&c);
        lists[item.offset].extend(found);
    }
    (KernelMap::from_lists_unchecked(offsets.clone(), lists), counters)
}

/// Runs both traversals against an already-built source array. Work items
/// are processed in parallel; the result does not depend on worker count.
pub fn search_kernel_map(
    source: &SortedSource,
    outputs: &[Coordinate],
    offsets: &OffsetSet,
    query_block: usize,
) -> Result<(KernelMap, SearchCounters)> {
    if query_block == 0 {
        return Err(invalid("query block bound C must be positive"));
    }
    check_outputs(outputs)?;
    let partitions: Vec<Partition> =
        (0..offsets.len()).into_par_iter().map(|k| backward_partition(source, outputs, offsets, k)).collect();
    let counters = SearchCounters {
        backward_comparisons: partitions.iter().map(|p| p.comparisons).sum(),
        ..Default::default()
    };
    let plan = QueryBlockPlan::build(&partitions, query_block);
    let results: Vec<_> = plan
        .items
        .par_iter()
        .map_init(BlockBuffer::default, |buf, item| run_item(source, outputs, offsets, item, buf, &mut NoTrace))
        .collect();
    Ok(assemble(offsets, &plan, results, counters))
}

/// Single-worker variant reporting every source-array touch to `sink`:
/// pivot loads during the backward pass, then block copies.
pub fn search_kernel_map_traced<S: TraceSink>(
    source: &SortedSource,
    outputs: &[Coordinate],
    offsets: &OffsetSet,
    query_block: usize,
    sink: &mut S,
) -> Result<(KernelMap, SearchCounters)> {
    if query_block == 0 {
        return Err(invalid("query block bound C must be positive"));
    }
    check_outputs(outputs)?;
    let partitions: Vec<Partition> =
        (0..offsets.len()).map(|k| backward_partition_traced(source, outputs, offsets, k, sink)).collect();
    let counters = SearchCounters {
        backward_comparisons: partitions.iter().map(|p| p.comparisons).sum(),
        ..Default::default()
    };
    let plan = QueryBlockPlan::build(&partitions, query_block);
    let mut buf = BlockBuffer::default();
    let results = plan.items.iter().map(|item| run_item(source, outputs, offsets, item, &mut buf, sink)).collect();
    Ok(assemble(offsets, &plan, results, counters))
}

/// Query-block plan that [`search_kernel_map`] would execute.
pub fn plan_query_blocks(source: &SortedSource, outputs: &[Coordinate], offsets: &OffsetSet, query_block: usize) -> Result<QueryBlockPlan> {
    if query_block == 0 {
        return Err(invalid("query block bound C must be positive"));
    }
    let partitions: Vec<Partition> = (0..offsets.len()).map(|k| backward_partition(source, outputs, offsets, k)).collect();
    Ok(QueryBlockPlan::build(&partitions, query_block))
}

/// Builds the source array from `inputs` and matches the sorted `outputs`.
pub fn build_kernel_map_sorted(
    inputs: &PointCloud,
    outputs: &[Coordinate],
    offsets: &OffsetSet,
    params: SearchParams,
) -> Result<(KernelMap, SearchCounters)> {
    params.validate()?;
    let source = build_source_array(inputs, params.block_size)?;
    search_kernel_map(&source, outputs, offsets, params.query_block)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{generate_output_coords, unpack_key, weight_offsets};
    use crate::kernelmap::baseline::brute_force_map;
    use crate::matrix::Matrix;
    use crate::synthetic::{random_cloud, Stream};
    use crate::tracesim::AccessTrace;

    fn c(x: i32, y: i32, z: i32) -> Coordinate {
        Coordinate::new(x, y, z)
    }

    fn bare(coords: Vec<Coordinate>) -> PointCloud {
        let n = coords.len();
        PointCloud::new(coords, Matrix::zeros(n, 0)).unwrap()
    }

    fn ceil_log2_plus1(n: usize) -> u64 {
        (usize::BITS - n.leading_zeros()) as u64
    }

    #[test]
    fn source_array_sorts_and_carries_indices() {
        let pc = bare(vec![c(3, 0, 0), c(0, 0, 1), c(0, 0, 0), c(1, 5, 5)]);
        let src = build_source_array(&pc, 2).unwrap();
        let coords: Vec<_> = src.keys().iter().map(|&k| unpack_key(k)).collect();
        assert_eq!(coords, vec![c(0, 0, 0), c(0, 0, 1), c(1, 5, 5), c(3, 0, 0)]);
        assert_eq!(src.indices(), &[2, 1, 3, 0]);
        assert_eq!(src.sorts_performed(), 1);
        assert_eq!(src.pivots(), &[src.keys()[1], src.keys()[3]]);
    }

    #[test]
    fn source_array_reuses_sorted_flag() {
        let pc = random_cloud(300, 20, 0, 1).unwrap().to_sorted().0;
        let src = build_source_array(&pc, 64).unwrap();
        assert_eq!(src.sorts_performed(), 0);
        assert_eq!(src.indices(), (0..300).collect::<Vec<u32>>().as_slice());
        assert!(src.keys().windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn block_arithmetic() {
        let pc = random_cloud(1000, 40, 0, 2).unwrap();
        let src = build_source_array(&pc, 256).unwrap();
        assert_eq!(src.num_blocks(), 4);
        let pivot_positions: Vec<usize> = (0..4).map(|b| src.block_range(b).end - 1).collect();
        assert_eq!(pivot_positions, vec![255, 511, 767, 999]);
        for (b, &pos) in pivot_positions.iter().enumerate() {
            assert_eq!(src.pivots()[b], src.keys()[pos]);
        }
        assert_eq!(*src.pivots().last().unwrap(), *src.keys().last().unwrap());
        assert!(build_source_array(&pc, 0).is_err());
    }

    #[test]
    fn segment_keys_follow_offset() {
        let q = vec![c(0, 0, 0), c(0, 0, 8), c(1, 0, 0), c(1, 3, 0)];
        let offsets = weight_offsets(3, 1).unwrap();
        let k = offsets.offsets().iter().position(|&o| o == c(0, 1, 0)).unwrap();
        let keys: Vec<_> = (0..4).map(|i| segment_query_key(&q, &offsets, i, k)).collect();
        let expect: Vec<_> = [c(0, 1, 0), c(0, 1, 8), c(1, 1, 0), c(1, 4, 0)].iter().map(|&x| pack_unchecked(x)).collect();
        assert_eq!(keys, expect);
        assert!(keys.windows(2).all(|w| w[0] < w[1]));
        let lim = crate::geometry::COORD_LIMIT;
        assert_eq!(segment_query_key(&[c(lim, 0, 0)], &offsets, 0, offsets.len() - 1), PackedKey::UNMATCHABLE);
    }

    fn linear_classify(src: &SortedSource, q: &[Coordinate], offsets: &OffsetSet, k: usize) -> Vec<usize> {
        // Block of each query by scanning pivots; usize::MAX for the unmatched tail.
        (0..q.len())
            .map(|i| {
                let key = segment_query_key(q, offsets, i, k);
                src.pivots().iter().position(|&p| key <= p).unwrap_or(usize::MAX)
            })
            .collect()
    }

    #[test]
    fn partition_matches_linear_scan() {
        for seed in 0..20 {
            let pc = random_cloud(700, 15, 0, seed).unwrap();
            let q = generate_output_coords(&pc, 1 + seed as usize % 2).unwrap().coords;
            let offsets = weight_offsets(3, 1 + seed as usize % 2).unwrap();
            let src = build_source_array(&pc, 1 + seed as usize * 13).unwrap();
            for k in 0..offsets.len() {
                let part = backward_partition(&src, &q, &offsets, k);
                let class = linear_classify(&src, &q, &offsets, k);
                for b in 0..src.num_blocks() {
                    for i in part.block(b) {
                        assert_eq!(class[i], b);
                    }
                }
                assert!(class[part.unmatched_from()..q.len()].iter().all(|&c| c == usize::MAX));
                let bound = src.num_blocks() as u64 * ceil_log2_plus1(q.len());
                assert!(part.comparisons <= bound);
            }
        }
    }

    #[test]
    fn partition_edge_cases() {
        let src = build_source_array(&bare(vec![c(0, 0, 0), c(0, 0, 1)]), 1).unwrap();
        let offsets = weight_offsets(1, 1).unwrap();
        let q = vec![c(5, 0, 0), c(6, 0, 0)];
        let part = backward_partition(&src, &q, &offsets, 0);
        assert_eq!(part.boundaries, vec![0, 0]);
        assert_eq!(part.unmatched_from(), 0);

        let src = build_source_array(&bare(vec![c(0, 0, 0), c(0, 0, 4)]), 8).unwrap();
        let q = vec![c(0, 0, 0), c(0, 0, 2), c(0, 0, 4), c(0, 0, 9)];
        let part = backward_partition(&src, &q, &offsets, 0);
        assert_eq!(part.boundaries, vec![3]);
    }

    #[test]
    fn balancing_is_near_equal() {
        let part = Partition { boundaries: vec![1300, 1300, 1500], comparisons: 0 };
        let plan = balance_blocks(&part, 512).unwrap();
        assert_eq!(plan[0].iter().map(|r| r.len()).collect::<Vec<_>>(), vec![434, 433, 433]);
        assert!(plan[1].is_empty());
        assert_eq!(plan[2], vec![1300..1500]);
        let joined: Vec<usize> = plan[0].iter().flat_map(|r| r.clone()).collect();
        assert_eq!(joined, (0..1300).collect::<Vec<_>>());
        assert!(balance_blocks(&part, 0).is_err());
    }

    #[test]
    fn forward_search_hits_and_misses() {
        let pc = bare(vec![c(0, 0, 4), c(0, 0, 0), c(0, 0, 2)]);
        let src = build_source_array(&pc, 4).unwrap();
        let id = weight_offsets(1, 1).unwrap();
        let (found, counters) = forward_block_search(&src, 0, 0..1, &[c(0, 0, 2)], &id, 0);
        assert_eq!(found, vec![Match { input: 2, output: 0 }]);
        assert_eq!(counters.source_elements_loaded, 3);
        let (found, counters) = forward_block_search(&src, 0, 0..1, &[c(0, 0, 3)], &id, 0);
        assert!(found.is_empty());
        assert!(counters.forward_comparisons <= ceil_log2_plus1(4));
    }

    #[test]
    fn forward_search_matches_block_scan() {
        let pc = random_cloud(3000, 18, 0, 11).unwrap();
        let q = pc.to_sorted().0.coords().clone();
        let offsets = weight_offsets(3, 1).unwrap();
        let src = build_source_array(&pc, 200).unwrap();
        let mut rng = Stream::new(4, 4);
        for _ in 0..1000 {
            let block = rng.below(src.num_blocks() as u64) as usize;
            let k = rng.below(offsets.len() as u64) as usize;
            let lo = rng.below(q.len() as u64) as usize;
            let hi = (lo + 1 + rng.below(64) as usize).min(q.len());
            let (found, counters) = forward_block_search(&src, block, lo..hi, &q, &offsets, k);
            let range = src.block_range(block);
            let expect: Vec<Match> = (lo..hi)
                .filter_map(|i| {
                    let key = segment_query_key(&q, &offsets, i, k);
                    range.clone().find(|&p| src.keys()[p] == key).map(|p| Match { input: src.indices()[p], output: i as u32 })
                })
                .collect();
            assert_eq!(found, expect);
            assert!(counters.forward_comparisons <= (hi - lo) as u64 * ceil_log2_plus1(200));
        }
    }

    #[test]
    fn equals_brute_force_across_params() {
        for seed in 0..30u64 {
            let n = 100 + (seed as usize * 97) % 1500;
            let extent: u32 = [8, 20, 60][seed as usize % 3];
            let pc = random_cloud(n.min(extent.pow(3) as usize), extent, 0, seed).unwrap();
            let s = 1 + seed as usize % 2;
            let q = generate_output_coords(&pc, s).unwrap().coords;
            for k in [1, 3, 5] {
                let offsets = weight_offsets(k, s).unwrap();
                let params = SearchParams { block_size: [1, 7, 256][seed as usize % 3], query_block: [1, 5, 512][(seed as usize / 3) % 3] };
                let (map, counters) = build_kernel_map_sorted(&pc, &q, &offsets, params).unwrap();
                assert_eq!(map, brute_force_map(pc.coords(), &q, &offsets), "seed {seed} K={k}");
                let blocks = pc.len().div_ceil(params.block_size) as u64;
                assert!(counters.backward_comparisons <= offsets.len() as u64 * blocks * ceil_log2_plus1(q.len()));
                assert!(counters.forward_comparisons <= counters.queries_executed * ceil_log2_plus1(params.block_size));
            }
        }
    }

    #[test]
    fn empty_inputs() {
        let offsets = weight_offsets(3, 1).unwrap();
        let empty = bare(vec![]);
        let (map, counters) = build_kernel_map_sorted(&empty, &[c(0, 0, 0)], &offsets, SearchParams::default()).unwrap();
        assert_eq!(map.total(), 0);
        assert_eq!(counters, SearchCounters::default());
        let pc = bare(vec![c(0, 0, 0)]);
        let (map, _) = build_kernel_map_sorted(&pc, &[], &offsets, SearchParams::default()).unwrap();
        assert_eq!(map.total(), 0);
    }

    #[test]
    fn rejects_unsorted_outputs() {
        let pc = bare(vec![c(0, 0, 0)]);
        let offsets = weight_offsets(1, 1).unwrap();
        assert!(build_kernel_map_sorted(&pc, &[c(1, 0, 0), c(0, 0, 0)], &offsets, SearchParams::default()).is_err());
    }

    #[test]
    fn traced_equals_parallel() {
        let pc = random_cloud(2000, 20, 0, 8).unwrap();
        let q = pc.to_sorted().0.coords().clone();
        let offsets = weight_offsets(3, 1).unwrap();
        let src = build_source_array(&pc, 64).unwrap();
        let mut trace = AccessTrace::new();
        trace.declare(Region::SourceKeys, src.len() as u64 * KEY_BYTES);
        trace.declare(Region::SourceIndices, src.len() as u64 * INDEX_BYTES);
        let (a, ca) = search_kernel_map_traced(&src, &q, &offsets, 100, &mut trace).unwrap();
        let (b, cb) = search_kernel_map(&src, &q, &offsets, 100).unwrap();
        assert_eq!(a, b);
        assert_eq!(ca, cb);
        trace.check_bounds().unwrap();
        let pivots = offsets.len() * src.num_blocks();
        assert_eq!(trace.len() as u64, pivots as u64 + 2 * ca.source_elements_loaded);
    }

    #[test]
    fn hyperparameter_formula() {
        let p = theoretical_hyperparams(1 << 16, 1 << 16);
        assert_eq!(p.block_size, 16);
        assert_eq!(p.query_block, (16.0 * (1.0f64 / 4.0).sqrt()).round() as usize);
        assert_eq!(SearchParams::default(), SearchParams { block_size: 256, query_block: 512 });
        let p = theoretical_hyperparams(1, 1);
        assert_eq!((p.block_size, p.query_block), (1, 1));
    }
}
