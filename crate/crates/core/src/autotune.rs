//! Per-layer tile-size tuning for gather and scatter.
//!
//! For each layer the tuner builds metadata tables from a few sample clouds,
//! profiles every divisor tile of the channel count and keeps the tile with
//! the smallest latency summed over samples (smallest tile on ties).

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::execution::{execute_prepared, gather_into, prepare_layer, scatter_into, LayerConfig, PreparedLayer, WeightSet};
use crate::geometry::PointCloud;
use crate::matrix::Matrix;
use crate::netdef::LayerSpec;
use crate::synthetic::random_matrix;

/// Streams of the placeholder layer inputs and output buffers used while
/// tuning, offset by the layer index.
const STREAM_PLACEHOLDER_FEATURES: u64 = 0x20_0000;
const STREAM_PLACEHOLDER_BUFFER: u64 = 0x30_0000;

/// Positive divisors of `channels`, ascending.
pub fn candidate_tiles(channels: usize) -> Vec<usize> {
    let mut small = Vec::new();
    let mut large = Vec::new();
    let mut d = 1;
    while d * d <= channels {
        if channels % d == 0 {
            small.push(d);
            if d * d != channels {
                large.push(channels / d);
            }
        }
        d += 1;
    }
    small.extend(large.into_iter().rev());
    small
}

/// Median; the mean of the two middle values for even lengths.
pub fn median(samples: &mut [f64]) -> f64 {
    samples.sort_by(f64::total_cmp);
    let n = samples.len();
    if n % 2 == 1 {
        samples[n / 2]
    } else {
        (samples[n / 2 - 1] + samples[n / 2]) / 2.0
    }
}

/// One warmup run, then the median of `rounds` timed runs, in seconds.
pub fn profile_candidate(mut run: impl FnMut(), rounds: usize) -> Result<f64> {
    if rounds == 0 {
        return Err(invalid("profiling needs at least one round"));
    }
    run();
    let mut times: Vec<f64> = (0..rounds)
        .map(|_| {
            let t = Instant::now();
            run();
            t.elapsed().as_secs_f64()
        })
        .collect();
    Ok(median(&mut times))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TunePhase {
    Gather,
    Scatter,
}

/// What a profiler is asked to time: one phase of one layer on one sample.
pub struct TuneTask<'a> {
    pub layer: usize,
    pub sample: usize,
    pub phase: TunePhase,
    pub prepared: &'a PreparedLayer,
    /// Gather: the layer input features. Scatter: an output-buffer stand-in.
    pub data: &'a Matrix,
}

impl TuneTask<'_> {
    pub fn channels(&self) -> usize {
        self.data.cols()
    }

    /// Destination matrix of the phase: the padded buffer for gather, the
    /// output features for scatter.
    pub fn scratch(&self) -> Matrix {
        let t = &self.prepared.tables;
        match self.phase {
            TunePhase::Gather => Matrix::zeros(t.buffer_len, self.channels()),
            TunePhase::Scatter => Matrix::zeros(t.omt.points(), self.channels()),
        }
    }

    /// Executes the phase once with `tile`, writing into `scratch`.
    pub fn run_into(&self, tile: usize, scratch: &mut Matrix) -> Result<()> {
        let t = &self.prepared.tables;
        match self.phase {
            TunePhase::Gather => gather_into(self.data, &t.imt, scratch, tile).map(drop),
            TunePhase::Scatter => scatter_into(self.data, &t.omt, scratch, tile).map(drop),
        }
    }

    /// Executes the phase once with `tile` into a fresh destination.
    pub fn run(&self, tile: usize) -> Result<()> {
        self.run_into(tile, &mut self.scratch())
    }
}

pub trait TileProfiler {
    /// Latency statistic of `task` with `tile`, in seconds.
    fn profile(&mut self, task: &TuneTask<'_>, tile: usize, rounds: usize) -> Result<f64>;
}

/// Times the real gather/scatter with [`profile_candidate`]. The destination
/// is allocated once per candidate and reused across rounds.
#[derive(Clone, Copy, Debug, Default)]
pub struct WallClockProfiler;

impl TileProfiler for WallClockProfiler {
    fn profile(&mut self, task: &TuneTask<'_>, tile: usize, rounds: usize) -> Result<f64> {
        let mut scratch = task.scratch();
        task.run_into(tile, &mut scratch)?;
        profile_candidate(|| task.run_into(tile, &mut scratch).expect("tile validated by the first run"), rounds)
    }
}

/// Deterministic stand-in: latency given by a function of the task and tile.
pub struct CostModelProfiler<F>(pub F);

impl<F: FnMut(&TuneTask<'_>, usize) -> f64> TileProfiler for CostModelProfiler<F> {
    fn profile(&mut self, task: &TuneTask<'_>, tile: usize, _rounds: usize) -> Result<f64> {
        Ok((self.0)(task, tile))
    }
}

/// Tuned tiles of one layer with the latency recorded for each candidate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TunedLayerConfig {
    pub layer: usize,
    pub gather_tile: usize,
    pub scatter_tile: usize,
    pub gather_latencies: BTreeMap<usize, f64>,
    pub scatter_latencies: BTreeMap<usize, f64>,
}

impl TunedLayerConfig {
    /// Checks that both tiles divide the channel counts and attain the
    /// smallest recorded latency.
    pub fn validate(&self, c_in: usize, c_out: usize) -> Result<()> {
        for (tile, channels, lat, what) in [
            (self.gather_tile, c_in, &self.gather_latencies, "gather"),
            (self.scatter_tile, c_out, &self.scatter_latencies, "scatter"),
        ] {
            if tile == 0 || channels % tile != 0 {
                return Err(Error::Invariant(format!("layer {}: {what} tile {tile} does not divide {channels}", self.layer)));
            }
            let best = lat.values().copied().fold(f64::INFINITY, f64::min);
            if lat.get(&tile) != Some(&best) {
                return Err(Error::Invariant(format!("layer {}: {what} tile {tile} is not the recorded minimum", self.layer)));
            }
        }
        Ok(())
    }
}

fn pick(latencies: &BTreeMap<usize, f64>) -> usize {
    let mut best = (0, f64::INFINITY);
    for (&tile, &lat) in latencies {
        if lat < best.1 {
            best = (tile, lat);
        }
    }
    best.0
}

/// Prepared layers of every sample, propagating coordinates through the
/// network. Downstream layers get placeholder features.
pub fn prepare_network_samples(layers: &[LayerSpec], samples: &[PointCloud], config: &LayerConfig) -> Result<Vec<Vec<PreparedLayer>>> {
    let mut per_layer: Vec<Vec<PreparedLayer>> = layers.iter().map(|_| Vec::with_capacity(samples.len())).collect();
    for (si, sample) in samples.iter().enumerate() {
        let mut cloud = sample.clone();
        for (l, spec) in layers.iter().enumerate() {
            if cloud.channels() != spec.c_in {
                return Err(invalid(format!("layer {l} expects {} channels, sample has {}", spec.c_in, cloud.channels())));
            }
            let prep = prepare_layer(&cloud, spec.kernel, spec.stride, config)?;
            let next = random_matrix(prep.outputs.len(), spec.c_out, si as u64, STREAM_PLACEHOLDER_FEATURES + l as u64, 0.0, 1.0);
            cloud = PointCloud::from_parts(Arc::clone(&prep.outputs), next, true);
            per_layer[l].push(prep);
        }
    }
    Ok(per_layer)
}

/// Tunes gather and scatter tiles for every layer.
pub fn autotune_network<P: TileProfiler>(
    layers: &[LayerSpec],
    samples: &[PointCloud],
    config: &LayerConfig,
    rounds: usize,
    profiler: &mut P,
) -> Result<Vec<TunedLayerConfig>> {
    if samples.is_empty() {
        return Err(invalid("autotuning needs at least one sample cloud"));
    }
    if rounds == 0 {
        return Err(invalid("profiling needs at least one round"));
    }
    let prepared = prepare_network_samples(layers, samples, config)?;
    let mut out = Vec::with_capacity(layers.len());
    for (l, (spec, preps)) in layers.iter().zip(&prepared).enumerate() {
        let scatter_inputs: Vec<Matrix> =
            preps.iter().enumerate().map(|(s, p)| random_matrix(p.tables.buffer_len, spec.c_out, s as u64, STREAM_PLACEHOLDER_BUFFER + l as u64, -1.0, 1.0)).collect();
        let mut tune = |phase: TunePhase, channels: usize| -> Result<BTreeMap<usize, f64>> {
            let mut lat = BTreeMap::new();
            for tile in candidate_tiles(channels) {
                let mut total = 0.0;
                for (s, prep) in preps.iter().enumerate() {
                    let data = match phase {
                        TunePhase::Gather => prep.input.features(),
                        TunePhase::Scatter => &scatter_inputs[s],
                    };
                    let task = TuneTask { layer: l, sample: s, phase, prepared: prep, data };
                    total += profiler.profile(&task, tile, rounds)?;
                }
                lat.insert(tile, total);
            }
            Ok(lat)
        };
        let gather_latencies = tune(TunePhase::Gather, spec.c_in)?;
        let scatter_latencies = tune(TunePhase::Scatter, spec.c_out)?;
        out.push(TunedLayerConfig {
            layer: l,
            gather_tile: pick(&gather_latencies),
            scatter_tile: pick(&scatter_latencies),
            gather_latencies,
            scatter_latencies,
        });
    }
    Ok(out)
}

/// Runs every prepared sample of a layer with the given tiles; used to check
/// that tuning leaves results unchanged.
pub fn run_with_tiles(prep: &PreparedLayer, weights: &WeightSet, config: &LayerConfig, gather_tile: usize, scatter_tile: usize) -> Result<PointCloud> {
    let cfg = LayerConfig { gather_tile, scatter_tile, ..*config };
    execute_prepared(prep, weights, &cfg).map(|(pc, _)| pc)
}
