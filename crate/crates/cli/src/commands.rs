use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use sconv_core::autotune::{autotune_network, TunedLayerConfig, WallClockProfiler};
use sconv_core::execution::{
    check_against_oracle, dense_conv_oracle, sc_layer_forward, GroupingParams, LayerConfig, MapBackend, PhaseTimings,
    WeightSet,
};
use sconv_core::geometry::{generate_output_coords, weight_offsets};
use sconv_core::kernelmap::baseline::{brute_force_map, build_hash_index, query_hash_map};
use sconv_core::kernelmap::sorted::{build_kernel_map_sorted, SearchParams};
use sconv_core::netdef::{forward_network_tuned, NetworkSpec};
use sconv_core::synthetic::{random_cloud, Stream};
use sconv_core::tracesim::{compare_map_backends_with, CacheConfig};
use sconv_core::{KernelMap, Match, Matrix, PointCloud};

use crate::error::CliError;
use crate::formats::{read_cloud, write_cloud};
use crate::report::{
    checksum, read_json, to_json, write_json, BenchReport, CacheReport, ConvOracleResult, Environment, InputInfo,
    LayerCacheReport, LayerReport, MapOracleResult, SimcacheReport, Totals, TileSource, TuneReport, VerifyReport,
};
use crate::{BenchArgs, GenArgs, InputArgs, SearchArgs, SimcacheArgs, TuneArgs, VerifyArgs};

const STREAM_TUNE_SUBSET: u64 = 0x40_0000;
const TUNE_SAMPLES: usize = 3;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TileArg {
    Fixed(usize),
    Auto,
    File(PathBuf),
}

impl FromStr for TileArg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s == "auto" {
            return Ok(TileArg::Auto);
        }
        if let Some(t) = s.strip_prefix("fixed:") {
            return match t.parse() {
                Ok(0) | Err(_) => Err(format!("bad tile {t:?} (expected a positive integer)")),
                Ok(t) => Ok(TileArg::Fixed(t)),
            };
        }
        if let Some(p) = s.strip_prefix("file:") {
            return Ok(TileArg::File(PathBuf::from(p)));
        }
        Err(format!("expected fixed:T, auto or file:PATH, got {s:?}"))
    }
}

fn emit<T: serde::Serialize>(path: Option<&Path>, value: &T) -> Result<(), CliError> {
    match path {
        Some(p) => write_json(p, value),
        None => {
            println!("{}", to_json(value));
            Ok(())
        }
    }
}

fn load_input(a: &InputArgs) -> Result<PointCloud, CliError> {
    if a.resolution.is_nan() || a.resolution <= 0.0 {
        return Err(CliError::Usage("--resolution must be positive".into()));
    }
    read_cloud(&a.input, a.resolution)
}

pub fn load_network(arg: &str) -> Result<NetworkSpec, CliError> {
    if let Some(net) = NetworkSpec::preset(arg) {
        return Ok(net);
    }
    let path = Path::new(arg);
    let text = fs::read_to_string(path).map_err(|e| CliError::Io { path: path.to_path_buf(), source: e })?;
    NetworkSpec::parse(&text).map_err(|source| CliError::Network { path: path.to_path_buf(), source })
}

fn search_params(a: &SearchArgs) -> Result<SearchParams, CliError> {
    let p = SearchParams { block_size: a.block_size, query_block: a.query_block };
    p.validate()?;
    Ok(p)
}

pub fn gen(a: &GenArgs, seed: u64) -> Result<(), CliError> {
    let cloud = random_cloud(a.points, a.extent, a.channels, seed)?;
    write_cloud(&a.out, &cloud)?;
    println!("wrote {} points x {} channels to {}", cloud.len(), cloud.channels(), a.out.display());
    Ok(())
}

fn default_extent(points: usize) -> u32 {
    let mut e = 1u32;
    while (e as u64).pow(3) < 4 * points as u64 {
        e += 1;
    }
    e
}

/// Breaks a map: drops its first match, or invents one if it has none.
fn corrupt(map: KernelMap, inputs: usize, outputs: usize) -> Result<KernelMap, CliError> {
    let offsets = map.offsets().clone();
    let mut lists = map.into_lists();
    if let Some(list) = lists.iter_mut().find(|l| !l.is_empty()) {
        list.remove(0);
    } else if inputs > 0 && outputs > 0 && !lists.is_empty() {
        lists[0].push(Match { input: 0, output: 0 });
    } else {
        return Err(CliError::Usage("fault injection needs at least one point".into()));
    }
    Ok(KernelMap::from_lists(offsets, lists)?)
}

pub fn verify(a: &VerifyArgs, seed: u64) -> Result<(), CliError> {
    let extent = a.extent.unwrap_or_else(|| default_extent(a.points));
    let cloud = random_cloud(a.points, extent, a.channels, seed)?;
    let (sorted, _) = cloud.to_sorted();
    let outputs = generate_output_coords(&sorted, a.stride)?.coords;
    let offsets = weight_offsets(a.kernel, a.stride)?;

    let expected = brute_force_map(sorted.coords(), &outputs, &offsets);
    let (hash_map, _) = query_hash_map(&build_hash_index(&sorted), &outputs, &offsets);
    let (mut sorted_map, _) = build_kernel_map_sorted(&sorted, &outputs, &offsets, SearchParams::default())?;
    if a.inject_fault {
        sorted_map = corrupt(sorted_map, sorted.len(), outputs.len())?;
    }
    let map_oracles: Vec<MapOracleResult> = [(MapBackend::Hash, &hash_map), (MapBackend::Sorted, &sorted_map)]
        .into_iter()
        .map(|(backend, map)| MapOracleResult {
            backend,
            matches: map.total(),
            expected: expected.total(),
            equal: *map == expected,
        })
        .collect();

    let weights = WeightSet::random(offsets.len(), a.channels, a.channels, seed, 0);
    let oracle = dense_conv_oracle(&cloud, &weights, a.kernel, a.stride)?;
    let mut conv_oracles = Vec::new();
    let mut outs = Vec::new();
    for backend in [MapBackend::Hash, MapBackend::Sorted] {
        let cfg = LayerConfig { backend, ..LayerConfig::default() };
        let (out, _) = sc_layer_forward(&cloud, &weights, a.kernel, a.stride, &cfg)?;
        conv_oracles.push(ConvOracleResult { backend, check: check_against_oracle(&out, &oracle, a.tolerance) });
        outs.push(out);
    }
    let backends_bit_identical = outs[0].bit_eq(&outs[1]);
    let passed = map_oracles.iter().all(|m| m.equal) && conv_oracles.iter().all(|c| c.check.passed) && backends_bit_identical;
    let report = VerifyReport {
        environment: Environment::current(seed),
        points: a.points,
        extent,
        kernel: a.kernel,
        stride: a.stride,
        channels: a.channels,
        tolerance: a.tolerance,
        fault_injected: a.inject_fault,
        map_oracles,
        conv_oracles,
        backends_bit_identical,
        passed,
    };
    emit(a.report.as_deref(), &report)?;
    if !passed {
        let failed: Vec<String> = report
            .map_oracles
            .iter()
            .filter(|m| !m.equal)
            .map(|m| format!("{} map", m.backend))
            .chain(report.conv_oracles.iter().filter(|c| !c.check.passed).map(|c| format!("{} convolution", c.backend)))
            .chain((!report.backends_bit_identical).then(|| "backend agreement".to_string()))
            .collect();
        return Err(CliError::Verify(failed.join(", ")));
    }
    eprintln!("all oracles passed");
    Ok(())
}

/// The input cloud plus deterministic random halves of it.
pub fn tune_samples(cloud: &PointCloud, seed: u64) -> Result<Vec<PointCloud>, CliError> {
    let mut out = vec![cloud.clone()];
    for s in 1..TUNE_SAMPLES {
        let mut rng = Stream::new(seed, STREAM_TUNE_SUBSET + s as u64);
        let keep: Vec<usize> = (0..cloud.len()).filter(|_| rng.below(2) == 0).collect();
        let coords = keep.iter().map(|&i| cloud.coords()[i]).collect();
        out.push(PointCloud::new(coords, cloud.features().select_rows(&keep))?);
    }
    Ok(out)
}

fn layer_config(a: &BenchArgs) -> Result<LayerConfig, CliError> {
    let group_params = GroupingParams { epsilon: a.epsilon, max_batch: a.max_batch };
    group_params.validate()?;
    if a.gemm_width == 0 {
        return Err(CliError::Usage("--gemm-width must be at least 1".into()));
    }
    let mut cfg = LayerConfig {
        backend: a.backend,
        grouping: a.grouping,
        group_params,
        search: search_params(&a.search)?,
        gemm_width: a.gemm_width,
        ..LayerConfig::default()
    };
    if let TileArg::Fixed(t) = a.tiles {
        cfg.gather_tile = t;
        cfg.scatter_tile = t;
    }
    Ok(cfg)
}

fn cache_report(net: &NetworkSpec, cloud: &PointCloud, config: CacheConfig, search: SearchParams) -> Result<CacheReport, CliError> {
    let mut current = cloud.to_sorted().0;
    let mut layers = Vec::with_capacity(net.len());
    for (l, spec) in net.layers().iter().enumerate() {
        let outputs = generate_output_coords(&current, spec.stride)?.coords;
        let offsets = weight_offsets(spec.kernel, spec.stride)?;
        let comparison = compare_map_backends_with(&current, &outputs, &offsets, config, search)?;
        layers.push(LayerCacheReport { layer: l, comparison });
        let n = outputs.len();
        current = PointCloud::from_sorted(outputs, Matrix::zeros(n, 0))?;
    }
    Ok(CacheReport { config, layers })
}

pub fn bench(a: &BenchArgs, seed: u64) -> Result<(), CliError> {
    let cloud = load_input(&a.input)?;
    let net = load_network(&a.net)?;
    let config = layer_config(a)?;
    let cache_config = a.cache_capacity.map(|c| CacheConfig::new(c, a.cache_line)).transpose()?;

    let (tiles, tuned) = match &a.tiles {
        TileArg::Fixed(t) => (TileSource::Fixed(*t), None),
        TileArg::Auto => {
            if a.rounds == 0 {
                return Err(CliError::Usage("--rounds must be at least 1".into()));
            }
            let samples = tune_samples(&cloud, seed)?;
            (TileSource::Auto, Some(autotune_network(net.layers(), &samples, &config, a.rounds, &mut WallClockProfiler)?))
        }
        TileArg::File(p) => {
            let saved: TuneReport = read_json(p)?;
            (TileSource::File(p.display().to_string()), Some(saved.tuned))
        }
    };

    let start = Instant::now();
    let run = forward_network_tuned(&net, &cloud, &config, tuned.as_deref(), seed)?;
    let end_to_end_seconds = start.elapsed().as_secs_f64();

    let layers: Vec<LayerReport> =
        run.layers.iter().zip(net.layers()).enumerate().map(|(i, (m, s))| LayerReport::new(i, *s, m)).collect();
    let mut timings = PhaseTimings::default();
    layers.iter().for_each(|l| timings.add(&l.timings));
    let totals = Totals {
        timings,
        map_seconds: timings.map(),
        gmas_seconds: timings.gmas(),
        end_to_end_seconds,
        sorts_performed: run.total_sorts(),
        matches: layers.iter().map(|l| l.matches).sum(),
        groups: layers.iter().map(|l| l.groups).sum(),
        real_rows: layers.iter().map(|l| l.real_rows).sum(),
        padded_rows: layers.iter().map(|l| l.padded_rows).sum(),
    };
    let cache = cache_config.map(|c| cache_report(&net, &cloud, c, config.search)).transpose()?;
    let report = BenchReport {
        environment: Environment::current(seed),
        input: InputInfo::new(&a.input.input, &cloud),
        network: net.to_text(),
        backend: config.backend,
        grouping: config.grouping,
        epsilon: config.group_params.epsilon,
        max_batch: config.group_params.max_batch,
        block_size: config.search.block_size,
        query_block: config.search.query_block,
        gemm_width: config.gemm_width,
        tiles,
        layers,
        totals,
        output_points: run.output.len(),
        output_channels: run.output.channels(),
        output_checksum: checksum(&run.output),
        tuned,
        cache,
    };
    report.validate()?;
    emit(a.report.as_deref(), &report)?;
    eprintln!(
        "{} layers, {} points: map {:.4}s, gather-gemm-scatter {:.4}s, end-to-end {:.4}s",
        net.len(),
        cloud.len(),
        report.totals.map_seconds,
        report.totals.gmas_seconds,
        end_to_end_seconds
    );
    Ok(())
}

pub fn tune(a: &TuneArgs, seed: u64) -> Result<(), CliError> {
    if a.rounds == 0 {
        return Err(CliError::Usage("--rounds must be at least 1".into()));
    }
    let cloud = load_input(&a.input)?;
    let net = load_network(&a.net)?;
    let samples = tune_samples(&cloud, seed)?;
    let tuned: Vec<TunedLayerConfig> =
        autotune_network(net.layers(), &samples, &LayerConfig::default(), a.rounds, &mut WallClockProfiler)?;
    let report = TuneReport {
        environment: Environment::current(seed),
        input: InputInfo::new(&a.input.input, &cloud),
        network: net.to_text(),
        rounds: a.rounds,
        samples: samples.iter().map(PointCloud::len).collect(),
        tuned,
    };
    write_json(&a.out, &report)?;
    for t in &report.tuned {
        eprintln!("layer {}: gather tile {}, scatter tile {}", t.layer, t.gather_tile, t.scatter_tile);
    }
    Ok(())
}

pub fn simcache(a: &SimcacheArgs, seed: u64) -> Result<(), CliError> {
    let cloud = load_input(&a.input)?.to_sorted().0;
    let config = CacheConfig::new(a.capacity, a.line)?;
    let search = search_params(&a.search)?;
    let outputs = generate_output_coords(&cloud, a.stride)?.coords;
    let offsets = weight_offsets(a.kernel, a.stride)?;
    let comparison = compare_map_backends_with(&cloud, &outputs, &offsets, config, search)?;
    let report = SimcacheReport {
        environment: Environment::current(seed),
        input: InputInfo::new(&a.input.input, &cloud),
        kernel: a.kernel,
        stride: a.stride,
        config,
        block_size: search.block_size,
        query_block: search.query_block,
        comparison,
    };
    emit(a.report.as_deref(), &report)?;
    eprintln!("hit ratio: hash {:.4}, sorted {:.4}", comparison.hash_hit_ratio, comparison.sorted_hit_ratio);
    Ok(())
}
