use serde::{Deserialize, Serialize};

use super::cache::{CacheConfig, CacheStats, LruCache};
use crate::error::{Error, Result};
use crate::geometry::{Coordinate, OffsetSet, PointCloud};
use crate::kernelmap::baseline::{build_hash_index, query_hash_map_traced, ProbeStats};
use crate::kernelmap::sorted::{build_source_array, search_kernel_map_traced, SearchCounters, SearchParams};

/// Paired cache statistics of the two map backends on identical inputs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackendComparison {
    pub hash: CacheStats,
    pub sorted: CacheStats,
    pub hash_hit_ratio: f64,
    pub sorted_hit_ratio: f64,
    pub counters: SearchCounters,
    pub probes: ProbeStats,
    pub matches: usize,
}

/// [`compare_map_backends_with`] using the default search parameters.
pub fn compare_map_backends(
    inputs: &PointCloud,
    outputs: &[Coordinate],
    offsets: &OffsetSet,
    config: CacheConfig,
) -> Result<BackendComparison> {
    compare_map_backends_with(inputs, outputs, offsets, config, SearchParams::default())
}

/// Streams the query-phase touches of the hash lookup and of the sorted
/// search, each into its own cold cache, in single-worker order.
/// Index construction is not traced for either backend.
pub fn compare_map_backends_with(
    inputs: &PointCloud,
    outputs: &[Coordinate],
    offsets: &OffsetSet,
    config: CacheConfig,
    params: SearchParams,
) -> Result<BackendComparison> {
    params.validate()?;
    let index = build_hash_index(inputs);
    let mut hash_cache = LruCache::new(config)?;
    let (hash_map, probes) = query_hash_map_traced(&index, outputs, offsets, &mut hash_cache);
    drop(index);

    let source = build_source_array(inputs, params.block_size)?;
    let mut sorted_cache = LruCache::new(config)?;
    let (sorted_map, counters) =
        search_kernel_map_traced(&source, outputs, offsets, params.query_block, &mut sorted_cache)?;
    if hash_map != sorted_map {
        return Err(Error::Invariant("hash and sorted backends built different kernel maps".into()));
    }
    let (hash, sorted) = (hash_cache.stats(), sorted_cache.stats());
    Ok(BackendComparison {
        hash,
        sorted,
        hash_hit_ratio: hash.hit_ratio()?,
        sorted_hit_ratio: sorted.hit_ratio()?,
        counters,
        probes,
        matches: sorted_map.total(),
    })
}
