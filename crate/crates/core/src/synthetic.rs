//! Deterministic pseudo-random streams and synthetic point clouds.
//!
//! Every stream is ChaCha8 (`rand_chacha::ChaCha8Rng`) seeded with 32 bytes:
//! the 64-bit seed little-endian, then the 64-bit stream id little-endian,
//! then 16 zero bytes. Values are derived from `next_u64` only:
//! - unit reals: `(x >> 40) · 2^-24`, uniform in `[0, 1)`;
//! - integers below `n`: `(x · n) >> 64` in 128-bit arithmetic.
//!
//! Stream ids: coordinates `0x10`, features `0x11`, layer `l` weights
//! `0x1_0000_0000 + l`.

use std::collections::HashSet;

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};
use crate::geometry::{Coordinate, PointCloud, COORD_LIMIT};
use crate::matrix::Matrix;

pub const STREAM_COORDS: u64 = 0x10;
pub const STREAM_FEATURES: u64 = 0x11;
pub const STREAM_WEIGHTS: u64 = 0x1_0000_0000;

/// Default bounding extent of synthetic clouds (a 400³ volume).
pub const DEFAULT_EXTENT: u32 = 400;

/// Seeded random stream.
pub struct Stream(ChaCha8Rng);

impl Stream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut bytes = [0u8; 32];
        bytes[..8].copy_from_slice(&seed.to_le_bytes());
        bytes[8..16].copy_from_slice(&stream.to_le_bytes());
        Stream(ChaCha8Rng::from_seed(bytes))
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    #[inline]
    pub fn unit_f32(&mut self) -> f32 {
        (self.next_u64() >> 40) as f32 * (1.0 / (1u32 << 24) as f32)
    }

    /// Uniform in `[lo, hi)`.
    #[inline]
    pub fn uniform_f32(&mut self, lo: f32, hi: f32) -> f32 {
        lo + (hi - lo) * self.unit_f32()
    }

    #[inline]
    pub fn below(&mut self, n: u64) -> u64 {
        ((self.next_u64() as u128 * n as u128) >> 64) as u64
    }
}

/// `n` distinct coordinates uniform over `[0, extent)³`, in generation order
/// (not sorted), with `channels` features uniform in `[0, 1)`.
pub fn random_cloud(n: usize, extent: u32, channels: usize, seed: u64) -> Result<PointCloud> {
    if extent == 0 || extent as i64 - 1 > COORD_LIMIT as i64 {
        return Err(invalid(format!("extent {extent} is not in [1, {}]", COORD_LIMIT as i64 + 1)));
    }
    let cells = (extent as u64).pow(3);
    if n as u64 > cells {
        return Err(invalid(format!("cannot place {n} unique points in {extent}^3 = {cells} cells")));
    }
    let mut rng = Stream::new(seed, STREAM_COORDS);
    let e = extent as u64;
    let decode = |cell: u64| Coordinate::new((cell / (e * e)) as i32, (cell / e % e) as i32, (cell % e) as i32);
    let coords: Vec<Coordinate> = if (n as u64) * 2 <= cells {
        let mut seen = HashSet::with_capacity(n);
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let cell = rng.below(cells);
            if seen.insert(cell) {
                out.push(decode(cell));
            }
        }
        out
    } else {
        // Dense request: partial Fisher-Yates over all cells.
        let mut all: Vec<u64> = (0..cells).collect();
        for i in 0..n {
            let j = i + rng.below(cells - i as u64) as usize;
            all.swap(i, j);
        }
        all[..n].iter().map(|&c| decode(c)).collect()
    };
    let features = random_matrix(n, channels, seed, STREAM_FEATURES, 0.0, 1.0);
    PointCloud::new(coords, features)
}

/// Matrix with entries uniform in `[lo, hi)` drawn row-major from one stream.
pub fn random_matrix(rows: usize, cols: usize, seed: u64, stream: u64, lo: f32, hi: f32) -> Matrix {
    let mut rng = Stream::new(seed, stream);
    let data = (0..rows * cols).map(|_| rng.uniform_f32(lo, hi)).collect();
    Matrix::from_vec(rows, cols, data).expect("sized by construction")
}
