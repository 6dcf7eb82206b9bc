//! JSON reports written by the `bench`, `tune`, `simcache` and `verify` verbs.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use sconv_core::autotune::TunedLayerConfig;
use sconv_core::execution::{GroupingPolicy, LayerMetrics, MapBackend, OracleCheck, PhaseTimings};
use sconv_core::kernelmap::baseline::ProbeStats;
use sconv_core::kernelmap::sorted::SearchCounters;
use sconv_core::netdef::LayerSpec;
use sconv_core::tracesim::{BackendComparison, CacheConfig};
use sconv_core::{Error, PointCloud};

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub workers: usize,
    pub seed: u64,
    pub version: String,
}

impl Environment {
    pub fn current(seed: u64) -> Self {
        Environment { workers: rayon::current_num_threads(), seed, version: env!("CARGO_PKG_VERSION").to_string() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputInfo {
    pub path: String,
    pub points: usize,
    pub channels: usize,
}

impl InputInfo {
    pub fn new(path: &Path, cloud: &PointCloud) -> Self {
        InputInfo { path: path.display().to_string(), points: cloud.len(), channels: cloud.channels() }
    }
}

/// How tiles were chosen for a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TileSource {
    Fixed(usize),
    Auto,
    File(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub layer: usize,
    pub spec: LayerSpec,
    pub inputs: usize,
    pub outputs: usize,
    pub matches: usize,
    pub sorts_performed: usize,
    pub timings: PhaseTimings,
    pub groups: usize,
    pub real_rows: usize,
    pub padded_rows: usize,
    pub padding_overhead: Option<f64>,
    pub gather_tile: usize,
    pub scatter_tile: usize,
    pub gather_lookups: u64,
    pub scatter_lookups: u64,
    pub comparisons: Option<SearchCounters>,
    pub probes: Option<ProbeStats>,
}

impl LayerReport {
    pub fn new(layer: usize, spec: LayerSpec, m: &LayerMetrics) -> Self {
        LayerReport {
            layer,
            spec,
            inputs: m.inputs,
            outputs: m.outputs,
            matches: m.matches,
            sorts_performed: m.sorts_performed,
            timings: m.timings,
            groups: m.groups,
            real_rows: m.real_rows,
            padded_rows: m.padded_rows,
            padding_overhead: m.padding_overhead,
            gather_tile: m.gather_tile,
            scatter_tile: m.scatter_tile,
            gather_lookups: m.gather_lookups,
            scatter_lookups: m.scatter_lookups,
            comparisons: m.search_counters,
            probes: m.probe_stats,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Totals {
    pub timings: PhaseTimings,
    pub map_seconds: f64,
    pub gmas_seconds: f64,
    pub end_to_end_seconds: f64,
    pub sorts_performed: usize,
    pub matches: usize,
    pub groups: usize,
    pub real_rows: usize,
    pub padded_rows: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerCacheReport {
    pub layer: usize,
    pub comparison: BackendComparison,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CacheReport {
    pub config: CacheConfig,
    pub layers: Vec<LayerCacheReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub environment: Environment,
    pub input: InputInfo,
    pub network: String,
    pub backend: MapBackend,
    pub grouping: GroupingPolicy,
    pub epsilon: f64,
    pub max_batch: usize,
    pub block_size: usize,
    pub query_block: usize,
    pub gemm_width: usize,
    pub tiles: TileSource,
    pub layers: Vec<LayerReport>,
    pub totals: Totals,
    pub output_points: usize,
    pub output_channels: usize,
    /// FNV-1a over the output coordinates and feature bits.
    pub output_checksum: u64,
    pub tuned: Option<Vec<TunedLayerConfig>>,
    pub cache: Option<CacheReport>,
}

impl BenchReport {
    /// Checks that timings are nonnegative and padding overheads agree with
    /// the reported row counts.
    pub fn validate(&self) -> Result<(), Error> {
        let bad = |msg: String| Err(Error::Invariant(msg));
        for l in &self.layers {
            let t = &l.timings;
            if [t.coords, t.map_build, t.map_query, t.plan, t.gather, t.gemm, t.scatter].iter().any(|v| v.is_nan() || *v < 0.0) {
                return bad(format!("layer {}: negative or NaN timing", l.layer));
            }
            let expect = (l.real_rows > 0).then(|| l.padded_rows as f64 / l.real_rows as f64);
            match (expect, l.padding_overhead) {
                (None, None) => {}
                (Some(a), Some(b)) if (a - b).abs() <= 1e-12 * a.max(1.0) => {}
                _ => return bad(format!("layer {}: padding overhead does not match the plan", l.layer)),
            }
        }
        if self.totals.end_to_end_seconds.is_nan() || self.totals.end_to_end_seconds < 0.0 {
            return bad("negative end-to-end time".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuneReport {
    pub environment: Environment,
    pub input: InputInfo,
    pub network: String,
    pub rounds: usize,
    pub samples: Vec<usize>,
    pub tuned: Vec<TunedLayerConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimcacheReport {
    pub environment: Environment,
    pub input: InputInfo,
    pub kernel: usize,
    pub stride: usize,
    pub config: CacheConfig,
    pub block_size: usize,
    pub query_block: usize,
    pub comparison: BackendComparison,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapOracleResult {
    pub backend: MapBackend,
    pub matches: usize,
    pub expected: usize,
    pub equal: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvOracleResult {
    pub backend: MapBackend,
    pub check: OracleCheck,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub environment: Environment,
    pub points: usize,
    pub extent: u32,
    pub kernel: usize,
    pub stride: usize,
    pub channels: usize,
    pub tolerance: f64,
    pub fault_injected: bool,
    pub map_oracles: Vec<MapOracleResult>,
    pub conv_oracles: Vec<ConvOracleResult>,
    pub backends_bit_identical: bool,
    pub passed: bool,
}

pub fn checksum(cloud: &PointCloud) -> u64 {
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    let mut eat = |bytes: [u8; 4]| {
        for b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(PRIME);
        }
    };
    for c in cloud.coords().iter() {
        for v in [c.x, c.y, c.z] {
            eat(v.to_le_bytes());
        }
    }
    for v in cloud.features().as_slice() {
        eat(v.to_bits().to_le_bytes());
    }
    h
}

pub fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("reports serialize")
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    fs::write(path, to_json(value) + "\n").map_err(|e| CliError::Io { path: path.to_path_buf(), source: e })
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Io { path: path.to_path_buf(), source: e })?;
    serde_json::from_str(&text).map_err(|source| CliError::Json { path: path.to_path_buf(), source })
}

#[cfg(test)]
mod tests {
    use super::*;
    use sconv_core::execution::LayerConfig;
    use sconv_core::netdef::{forward_network, NetworkSpec};
    use sconv_core::synthetic::random_cloud;

    fn sample_report() -> BenchReport {
        let net = NetworkSpec::parse("3 1 2 4\n3 2 4 4\n").unwrap();
        let cloud = random_cloud(300, 12, 2, 3).unwrap();
        let cfg = LayerConfig::default();
        let run = forward_network(&net, &cloud, &cfg, 3).unwrap();
        let layers: Vec<LayerReport> =
            run.layers.iter().zip(net.layers()).enumerate().map(|(i, (m, s))| LayerReport::new(i, *s, m)).collect();
        let mut timings = PhaseTimings::default();
        layers.iter().for_each(|l| timings.add(&l.timings));
        BenchReport {
            environment: Environment::current(3),
            input: InputInfo::new(Path::new("x.mpc"), &cloud),
            network: net.to_text(),
            backend: cfg.backend,
            grouping: cfg.grouping,
            epsilon: cfg.group_params.epsilon,
            max_batch: cfg.group_params.max_batch,
            block_size: cfg.search.block_size,
            query_block: cfg.search.query_block,
            gemm_width: cfg.gemm_width,
            tiles: TileSource::Fixed(4),
            totals: Totals {
                timings,
                map_seconds: timings.map(),
                gmas_seconds: timings.gmas(),
                end_to_end_seconds: timings.total(),
                sorts_performed: run.total_sorts(),
                matches: layers.iter().map(|l| l.matches).sum(),
                groups: layers.iter().map(|l| l.groups).sum(),
                real_rows: layers.iter().map(|l| l.real_rows).sum(),
                padded_rows: layers.iter().map(|l| l.padded_rows).sum(),
            },
            layers,
            output_points: run.output.len(),
            output_channels: run.output.channels(),
            output_checksum: checksum(&run.output),
            tuned: None,
            cache: None,
        }
    }

    #[test]
    fn bench_report_round_trips() {
        let r = sample_report();
        let back: BenchReport = serde_json::from_str(&to_json(&r)).unwrap();
        assert_eq!(back, r);
        r.validate().unwrap();
    }

    #[test]
    fn validate_catches_bad_overheads() {
        let mut r = sample_report();
        r.layers[0].padding_overhead = Some(r.layers[0].padding_overhead.unwrap() + 0.5);
        assert!(r.validate().is_err());
        let mut r = sample_report();
        r.layers[1].timings.gather = -1.0;
        assert!(r.validate().is_err());
    }

    #[test]
    fn checksum_sees_feature_bits() {
        let a = random_cloud(20, 5, 2, 1).unwrap();
        let mut f = a.features().clone();
        f.row_mut(0)[0] = -f.row(0)[0];
        let b = a.with_features(f).unwrap();
        assert_ne!(checksum(&a), checksum(&b));
        assert_eq!(checksum(&a), checksum(&a.clone()));
    }

    #[test]
    fn tile_source_serializes_by_name() {
        assert_eq!(serde_json::to_string(&TileSource::Auto).unwrap(), "\"auto\"");
        assert_eq!(serde_json::to_string(&TileSource::Fixed(8)).unwrap(), "{\"fixed\":8}");
    }
}
