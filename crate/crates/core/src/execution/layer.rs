use std::fmt;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::gather::{gather, scatter};
use super::gemm::{gemm_execute, WeightSet};
use super::grouping::{group_gemms, padding_overhead, GemmGroupPlan, GroupingParams, GroupingPolicy};
use super::metadata::{build_metadata_tables, MetadataTables};
use crate::error::{invalid, Error, Result};
use crate::geometry::{generate_output_coords, weight_offsets, Coordinate, OffsetSet, PointCloud};
use crate::kernelmap::baseline::{build_hash_index, query_hash_map, ProbeStats};
use crate::kernelmap::sorted::{build_source_array, search_kernel_map, SearchCounters, SearchParams};
use crate::kernelmap::KernelMap;

/// Kernel-map builder used by a layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapBackend {
    Hash,
    Sorted,
}

impl fmt::Display for MapBackend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MapBackend::Hash => "hash",
            MapBackend::Sorted => "sorted",
        })
    }
}

impl FromStr for MapBackend {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hash" => Ok(MapBackend::Hash),
            "sorted" => Ok(MapBackend::Sorted),
            other => Err(invalid(format!("unknown map backend {other:?} (expected hash or sorted)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerConfig {
    pub backend: MapBackend,
    pub grouping: GroupingPolicy,
    pub group_params: GroupingParams,
    /// Requested gather tile; the largest divisor of `C_in` not above it is used.
    pub gather_tile: usize,
    /// Requested scatter tile, fitted to `C_out` the same way.
    pub scatter_tile: usize,
    pub search: SearchParams,
    /// Groups in flight at once during the GEMM phase.
    pub gemm_width: usize,
}

impl Default for LayerConfig {
    fn default() -> Self {
        LayerConfig {
            backend: MapBackend::Sorted,
            grouping: GroupingPolicy::Sorted,
            group_params: GroupingParams::default(),
            gather_tile: 4,
            scatter_tile: 4,
            search: SearchParams::default(),
            gemm_width: 4,
        }
    }
}

/// Largest divisor of `channels` that does not exceed `requested` (at least 1).
pub fn fit_tile(requested: usize, channels: usize) -> usize {
    (1..=requested.min(channels).max(1)).rev().find(|t| channels % t == 0).unwrap_or(1)
}

/// Wall-clock seconds per phase.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseTimings {
    /// Input sort (when needed) and output-coordinate generation.
    pub coords: f64,
    pub map_build: f64,
    pub map_query: f64,
    /// GEMM grouping, weight reordering and metadata tables.
    pub plan: f64,
    pub gather: f64,
    pub gemm: f64,
    pub scatter: f64,
}

impl PhaseTimings {
    pub fn map(&self) -> f64 {
        self.map_build + self.map_query
    }

    pub fn gmas(&self) -> f64 {
        self.plan + self.gather + self.gemm + self.scatter
    }

    pub fn total(&self) -> f64 {
        self.coords + self.map() + self.gmas()
    }

    pub fn add(&mut self, o: &PhaseTimings) {
        self.coords += o.coords;
        self.map_build += o.map_build;
        self.map_query += o.map_query;
        self.plan += o.plan;
        self.gather += o.gather;
        self.gemm += o.gemm;
        self.scatter += o.scatter;
    }
}

/// Counters and timings of one layer execution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerMetrics {
    pub inputs: usize,
    pub outputs: usize,
    pub matches: usize,
    pub sorts_performed: usize,
    pub timings: PhaseTimings,
    pub search_counters: Option<SearchCounters>,
    pub probe_stats: Option<ProbeStats>,
    pub groups: usize,
    pub real_rows: usize,
    pub padded_rows: usize,
    pub padding_overhead: Option<f64>,
    pub gather_tile: usize,
    pub scatter_tile: usize,
    pub gather_lookups: u64,
    pub scatter_lookups: u64,
}

impl LayerMetrics {
    /// Copy with all timings zeroed, for comparing runs.
    pub fn without_timings(&self) -> LayerMetrics {
        LayerMetrics { timings: PhaseTimings::default(), ..self.clone() }
    }
}

/// Everything of a layer that does not depend on feature values.
#[derive(Clone, Debug)]
pub struct PreparedLayer {
    /// The input cloud in sorted order.
    pub input: PointCloud,
    pub outputs: Arc<[Coordinate]>,
    pub offsets: OffsetSet,
    pub map: KernelMap,
    pub plan: GemmGroupPlan,
    pub tables: MetadataTables,
    pub metrics: LayerMetrics,
}

fn timed<T>(slot: &mut f64, f: impl FnOnce() -> T) -> T {
    let t = Instant::now();
    let out = f();
    *slot += t.elapsed().as_secs_f64();
    out
}

/// Sorts the input if needed, generates output coordinates, builds the
/// kernel map, the GEMM plan and the metadata tables.
pub fn prepare_layer(cloud: &PointCloud, kernel: usize, stride: usize, config: &LayerConfig) -> Result<PreparedLayer> {
    config.search.validate()?;
    config.group_params.validate()?;
    let offsets = weight_offsets(kernel, stride)?;
    let mut t = PhaseTimings::default();
    let (input, outputs, sorts) = timed(&mut t.coords, || -> Result<_> {
        let (input, mut sorts) = if cloud.is_sorted() { (cloud.clone(), 0) } else { cloud.to_sorted() };
        let out = generate_output_coords(&input, stride)?;
        sorts += out.sorts_performed;
        Ok((input, out.coords, sorts))
    })?;

    let (map, search_counters, probe_stats, build_sorts) = match config.backend {
        MapBackend::Sorted => {
            let source = timed(&mut t.map_build, || build_source_array(&input, config.search.block_size))?;
            let (map, c) = timed(&mut t.map_query, || search_kernel_map(&source, &outputs, &offsets, config.search.query_block))?;
            (map, Some(c), None, source.sorts_performed())
        }
        MapBackend::Hash => {
            let index = timed(&mut t.map_build, || build_hash_index(&input));
            let (map, p) = timed(&mut t.map_query, || query_hash_map(&index, &outputs, &offsets));
            (map, None, Some(p), 0)
        }
    };

    let (plan, tables) = timed(&mut t.plan, || -> Result<_> {
        let plan = group_gemms(&map.sizes(), config.grouping, config.group_params)?;
        let tables = build_metadata_tables(&map, &plan, input.len(), outputs.len())?;
        Ok((plan, tables))
    })?;

    let metrics = LayerMetrics {
        inputs: input.len(),
        outputs: outputs.len(),
        matches: map.total(),
        sorts_performed: sorts + build_sorts,
        timings: t,
        search_counters,
        probe_stats,
        groups: plan.group_count(),
        real_rows: plan.real_rows(),
        padded_rows: plan.padded_rows(),
        padding_overhead: padding_overhead(&plan).ok(),
        gather_tile: 0,
        scatter_tile: 0,
        gather_lookups: 0,
        scatter_lookups: 0,
    };
    Ok(PreparedLayer { input, outputs, offsets, map, plan, tables, metrics })
}

/// Gather, grouped GEMM and scatter over a prepared layer.
pub fn execute_prepared(prep: &PreparedLayer, weights: &WeightSet, config: &LayerConfig) -> Result<(PointCloud, LayerMetrics)> {
    check_weights(weights, prep.offsets.len(), prep.input.channels())?;
    let mut metrics = prep.metrics.clone();
    let gather_tile = fit_tile(config.gather_tile, weights.c_in());
    let scatter_tile = fit_tile(config.scatter_tile, weights.c_out());
    let t = &mut metrics.timings;
    let (buffer, gather_lookups) =
        timed(&mut t.gather, || gather(prep.input.features(), &prep.tables.imt, prep.tables.buffer_len, gather_tile))?;
    let products = timed(&mut t.gemm, || gemm_execute(&buffer, weights, &prep.plan, config.gemm_width))?;
    drop(buffer);
    let (features, scatter_lookups) = timed(&mut t.scatter, || scatter(&products, &prep.tables.omt, scatter_tile))?;
    metrics.gather_tile = gather_tile;
    metrics.scatter_tile = scatter_tile;
    metrics.gather_lookups = gather_lookups;
    metrics.scatter_lookups = scatter_lookups;
    Ok((PointCloud::from_parts(Arc::clone(&prep.outputs), features, true), metrics))
}

fn check_weights(weights: &WeightSet, offsets: usize, channels: usize) -> Result<()> {
    if weights.len() != offsets {
        return Err(invalid(format!("{} weight matrices for {offsets} offsets", weights.len())));
    }
    if weights.c_in() != channels {
        return Err(invalid(format!("weights expect {} input channels, cloud has {channels}", weights.c_in())));
    }
    Ok(())
}

/// One sparse convolution layer. The output cloud is sorted.
pub fn sc_layer_forward(
    cloud: &PointCloud,
    weights: &WeightSet,
    kernel: usize,
    stride: usize,
    config: &LayerConfig,
) -> Result<(PointCloud, LayerMetrics)> {
    let offsets = kernel.checked_pow(3).ok_or_else(|| invalid("kernel size too large"))?;
    check_weights(weights, offsets, cloud.channels())?;
    let prep = prepare_layer(cloud, kernel, stride, config)?;
    execute_prepared(&prep, weights, config)
}
