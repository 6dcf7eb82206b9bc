//! `sconv`: generate point clouds, check the kernel-map builders and layer
//! execution against their oracles, benchmark networks, tune tiles and
//! replay map-search traces through a cache model.

mod commands;
mod error;
mod formats;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sconv_core::execution::{GroupingPolicy, MapBackend};

use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "sconv", version, about = "Sparse convolution engine for 3D point clouds")]
struct Cli {
    /// Seed for every random draw (clouds, weights, tuning samples).
    #[arg(long, global = true, env = "SC_SEED", default_value_t = 0)]
    seed: u64,

    /// Worker threads for parallel phases (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a uniform random point cloud (.xyz or .mpc).
    Gen(GenArgs),
    /// Run the kernel-map and convolution oracles on a random cloud.
    Verify(VerifyArgs),
    /// Time a network on a point-cloud file and write a JSON report.
    Bench(BenchArgs),
    /// Autotune gather/scatter tiles for a network and save them.
    Tune(TuneArgs),
    /// Compare cache hit ratios of the two map backends.
    Simcache(SimcacheArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub points: usize,
    #[arg(long, default_value_t = 400)]
    pub extent: u32,
    #[arg(long, default_value_t = 4)]
    pub channels: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long, default_value_t = 1000)]
    pub points: usize,
    #[arg(long, default_value_t = 3)]
    pub kernel: usize,
    #[arg(long, default_value_t = 1)]
    pub stride: usize,
    #[arg(long, default_value_t = 4)]
    pub channels: usize,
    /// Bounding extent; defaults to roughly 25% occupancy.
    #[arg(long)]
    pub extent: Option<u32>,
    #[arg(long, default_value_t = 1e-5)]
    pub tolerance: f64,
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Corrupt the sorted-search kernel map before comparing.
    #[arg(long, hide = true)]
    pub inject_fault: bool,
}

#[derive(Debug, Args)]
pub struct InputArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Voxel size used when reading .xyz files.
    #[arg(long, default_value_t = 1.0)]
    pub resolution: f64,
}

#[derive(Debug, Args)]
pub struct SearchArgs {
    /// Source block size of the sorted search.
    #[arg(long = "B", default_value_t = 256)]
    pub block_size: usize,
    /// Query block size of the sorted search.
    #[arg(long = "C", default_value_t = 512)]
    pub query_block: usize,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub input: InputArgs,
    /// Preset name (resnet_like, unet_like) or network file.
    #[arg(long, default_value = "resnet_like")]
    pub net: String,
    #[arg(long = "map", default_value_t = MapBackend::Sorted)]
    pub backend: MapBackend,
    #[arg(long = "group", default_value_t = GroupingPolicy::Sorted)]
    pub grouping: GroupingPolicy,
    #[arg(long, default_value_t = 0.25)]
    pub epsilon: f64,
    #[arg(long, default_value_t = 16)]
    pub max_batch: usize,
    /// fixed:T, auto, or file:PATH (a `tune` output).
    #[arg(long, default_value = "fixed:4")]
    pub tiles: commands::TileArg,
    /// Profiling rounds for `--tiles auto`.
    #[arg(long, default_value_t = 5)]
    pub rounds: usize,
    #[arg(long, default_value_t = 4)]
    pub gemm_width: usize,
    #[command(flatten)]
    pub search: SearchArgs,
    /// Also replay every layer's map search through an LRU cache of this many bytes.
    #[arg(long)]
    pub cache_capacity: Option<u64>,
    #[arg(long, default_value_t = 64)]
    pub cache_line: u64,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TuneArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[arg(long, default_value = "resnet_like")]
    pub net: String,
    #[arg(long, default_value_t = 5)]
    pub rounds: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SimcacheArgs {
    #[command(flatten)]
    pub input: InputArgs,
    /// Cache capacity in bytes.
    #[arg(long, default_value_t = 1 << 20)]
    pub capacity: u64,
    /// Line size in bytes.
    #[arg(long, default_value_t = 64)]
    pub line: u64,
    #[arg(long, default_value_t = 3)]
    pub kernel: usize,
    #[arg(long, default_value_t = 1)]
    pub stride: usize,
    #[command(flatten)]
    pub search: SearchArgs,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let seed = cli.seed;
    let go = move || match cli.command {
        Command::Gen(a) => commands::gen(&a, seed),
        Command::Verify(a) => commands::verify(&a, seed),
        Command::Bench(a) => commands::bench(&a, seed),
        Command::Tune(a) => commands::tune(&a, seed),
        Command::Simcache(a) => commands::simcache(&a, seed),
    };
    match cli.workers {
        Some(0) => Err(CliError::Usage("--workers must be at least 1".into())),
        Some(w) => rayon::ThreadPoolBuilder::new()
            .num_threads(w)
            .build()
            .map_err(|e| CliError::Usage(format!("cannot start {w} workers: {e}")))?
            .install(go),
        None => go(),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("sconv: {e}");
            ExitCode::FAILURE
        }
    }
}
