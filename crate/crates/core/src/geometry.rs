//! Coordinate algebra: voxel coordinates, their sortable 64-bit keys, weight
//! offsets and strided output-coordinate generation.
//!
//! Keys pack each axis into 21 bits after adding a bias of 2^20, with `x` in
//! the most significant field. Comparing keys therefore matches comparing
//! coordinates lexicographically on `(x, y, z)`, which is also the derived
//! `Ord` of [`Coordinate`].

use std::collections::HashSet;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::matrix::Matrix;

/// Largest magnitude a coordinate component may take.
pub const COORD_LIMIT: i32 = (1 << 20) - 1;

const BIAS: i64 = 1 << 20;
const FIELD_BITS: u32 = 21;
const FIELD_MASK: u64 = (1 << FIELD_BITS) - 1;

/// Integer voxel coordinate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Coordinate {
    pub x: i32,
    pub y: i32,
    pub z: i32,
}

impl Coordinate {
    pub const ORIGIN: Coordinate = Coordinate { x: 0, y: 0, z: 0 };

    #[inline]
    pub const fn new(x: i32, y: i32, z: i32) -> Self {
        Coordinate { x, y, z }
    }

    /// Builds a coordinate from wide components, rejecting anything outside
    /// `±COORD_LIMIT`.
    pub fn checked(x: i64, y: i64, z: i64) -> Result<Self> {
        Ok(Coordinate { x: check_axis('x', x)?, y: check_axis('y', y)?, z: check_axis('z', z)? })
    }

    pub fn validate(self) -> Result<Self> {
        Coordinate::checked(self.x as i64, self.y as i64, self.z as i64)
    }

    /// Componentwise sum, `None` when the result leaves the key range.
    #[inline]
    pub fn offset_by(self, delta: Coordinate) -> Option<Coordinate> {
        let x = self.x as i64 + delta.x as i64;
        let y = self.y as i64 + delta.y as i64;
        let z = self.z as i64 + delta.z as i64;
        let lim = COORD_LIMIT as i64;
        if x.abs() > lim || y.abs() > lim || z.abs() > lim {
            return None;
        }
        Some(Coordinate { x: x as i32, y: y as i32, z: z as i32 })
    }
}

impl From<[i32; 3]> for Coordinate {
    fn from([x, y, z]: [i32; 3]) -> Self {
        Coordinate { x, y, z }
    }
}

#[inline]
fn check_axis(axis: char, value: i64) -> Result<i32> {
    if value.abs() > COORD_LIMIT as i64 {
        Err(Error::CoordinateRange { axis, value })
    } else {
        Ok(value as i32)
    }
}

/// Order-preserving 64-bit encoding of a [`Coordinate`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PackedKey(pub u64);

impl PackedKey {
    /// Sorts above every real key (real keys never set bit 63).
    pub const UNMATCHABLE: PackedKey = PackedKey(u64::MAX);

    #[inline]
    pub fn value(self) -> u64 {
        self.0
    }
}

/// Packs an in-range coordinate.
pub fn pack_key(c: Coordinate) -> Result<PackedKey> {
    c.validate()?;
    Ok(pack_unchecked(c))
}

/// Packs a coordinate that is already known to be in range.
#[inline]
pub(crate) fn pack_unchecked(c: Coordinate) -> PackedKey {
    debug_assert!(c.validate().is_ok());
    let x = (c.x as i64 + BIAS) as u64;
    let y = (c.y as i64 + BIAS) as u64;
    let z = (c.z as i64 + BIAS) as u64;
    PackedKey((x << (2 * FIELD_BITS)) | (y << FIELD_BITS) | z)
}

/// Inverse of [`pack_key`].
#[inline]
pub fn unpack_key(key: PackedKey) -> Coordinate {
    let field = |shift: u32| (((key.0 >> shift) & FIELD_MASK) as i64 - BIAS) as i32;
    Coordinate { x: field(2 * FIELD_BITS), y: field(FIELD_BITS), z: field(0) }
}

/// Unique voxel coordinates with one feature row per coordinate.
///
/// `sorted` records that `coords` is strictly increasing in key order; layers
/// use it to skip re-sorting coordinates produced by an earlier layer.
#[derive(Clone, Debug)]
pub struct PointCloud {
    coords: Arc<[Coordinate]>,
    features: Matrix,
    sorted: bool,
}

impl PointCloud {
    /// Coordinates in arbitrary order. Checks range and uniqueness.
    pub fn new(coords: Vec<Coordinate>, features: Matrix) -> Result<Self> {
        check_rows(coords.len(), &features)?;
        let mut seen = HashSet::with_capacity(coords.len());
        for c in &coords {
            c.validate()?;
            if !seen.insert(*c) {
                return Err(invalid(format!("duplicate coordinate {c:?}")));
            }
        }
        Ok(PointCloud { coords: coords.into(), features, sorted: false })
    }

    /// Coordinates already in strictly increasing key order.
    pub fn from_sorted(coords: impl Into<Arc<[Coordinate]>>, features: Matrix) -> Result<Self> {
        let coords = coords.into();
        check_rows(coords.len(), &features)?;
        for c in coords.iter() {
            c.validate()?;
        }
        if let Some(w) = coords.windows(2).find(|w| w[0] >= w[1]) {
            return Err(invalid(format!("coordinates not strictly increasing at {:?}, {:?}", w[0], w[1])));
        }
        Ok(PointCloud { coords, features, sorted: true })
    }

    pub(crate) fn from_parts(coords: Arc<[Coordinate]>, features: Matrix, sorted: bool) -> Self {
        debug_assert_eq!(coords.len(), features.rows());
        PointCloud { coords, features, sorted }
    }

    pub fn empty(channels: usize) -> Self {
        PointCloud { coords: Arc::from(Vec::new()), features: Matrix::zeros(0, channels), sorted: true }
    }

    #[inline]
    pub fn coords(&self) -> &Arc<[Coordinate]> {
        &self.coords
    }

    #[inline]
    pub fn features(&self) -> &Matrix {
        &self.features
    }

    #[inline]
    pub fn is_sorted(&self) -> bool {
        self.sorted
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.features.cols()
    }

    pub fn with_features(&self, features: Matrix) -> Result<Self> {
        check_rows(self.len(), &features)?;
        Ok(PointCloud { coords: Arc::clone(&self.coords), features, sorted: self.sorted })
    }

    /// Returns the cloud in key order together with the number of sorts
    /// performed (0 when the cloud is already flagged sorted).
    pub fn to_sorted(&self) -> (PointCloud, usize) {
        if self.sorted {
            return (self.clone(), 0);
        }
        let mut order: Vec<(PackedKey, usize)> =
            self.coords.iter().enumerate().map(|(i, &c)| (pack_unchecked(c), i)).collect();
        order.par_sort_unstable_by_key(|&(k, _)| k);
        let coords: Vec<Coordinate> = order.iter().map(|&(k, _)| unpack_key(k)).collect();
        let rows: Vec<usize> = order.iter().map(|&(_, i)| i).collect();
        let features = self.features.select_rows(&rows);
        (PointCloud { coords: coords.into(), features, sorted: true }, 1)
    }

    /// True when every coordinate and feature bit matches.
    pub fn bit_eq(&self, other: &PointCloud) -> bool {
        self.coords == other.coords && self.features.bit_eq(&other.features)
    }
}

fn check_rows(n: usize, features: &Matrix) -> Result<()> {
    if features.rows() != n {
        return Err(Error::Shape(format!("{n} coordinates but {} feature rows", features.rows())));
    }
    Ok(())
}

/// Floors real points onto a grid of the given resolution, merging points
/// that land in the same voxel by averaging their feature rows.
///
/// Contributions to one voxel are summed in a canonical order (by feature
/// bits), so the result does not depend on the order of `points`.
pub fn voxelize(points: &[[f64; 3]], features: &Matrix, resolution: f64) -> Result<PointCloud> {
    if !(resolution > 0.0 && resolution.is_finite()) {
        return Err(invalid(format!("resolution must be positive, got {resolution}")));
    }
    check_rows(points.len(), features)?;
    let mut keyed = Vec::with_capacity(points.len());
    for (i, p) in points.iter().enumerate() {
        let mut cell = [0i64; 3];
        for (axis, (&v, out)) in p.iter().zip(cell.iter_mut()).enumerate() {
            let f = (v / resolution).floor();
            if !f.is_finite() || f.abs() > COORD_LIMIT as f64 {
                return Err(Error::CoordinateRange {
                    axis: ['x', 'y', 'z'][axis],
                    value: if f.is_finite() { f as i64 } else { i64::MAX },
                });
            }
            *out = f as i64;
        }
        let c = Coordinate::checked(cell[0], cell[1], cell[2])?;
        keyed.push((pack_unchecked(c), i));
    }
    keyed.sort_unstable_by(|a, b| {
        a.0.cmp(&b.0).then_with(|| {
            let (ra, rb) = (features.row(a.1), features.row(b.1));
            ra.iter()
                .zip(rb)
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        })
    });

    let cols = features.cols();
    let mut coords = Vec::new();
    let mut data = Vec::new();
    let mut acc = vec![0f64; cols];
    let mut start = 0;
    while start < keyed.len() {
        let key = keyed[start].0;
        let end = start + keyed[start..].iter().take_while(|e| e.0 == key).count();
        acc.iter_mut().for_each(|a| *a = 0.0);
        for &(_, i) in &keyed[start..end] {
            for (a, &v) in acc.iter_mut().zip(features.row(i)) {
                *a += v as f64;
            }
        }
        let n = (end - start) as f64;
        data.extend(acc.iter().map(|&a| (a / n) as f32));
        coords.push(unpack_key(key));
        start = end;
    }
    let rows = coords.len();
    Ok(PointCloud { coords: coords.into(), features: Matrix::from_vec(rows, cols, data)?, sorted: true })
}

/// The weight offsets `{s·t : t ∈ [-⌊K/2⌋, ⌊K/2⌋]}³` of a cubic kernel.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OffsetSet {
    kernel_size: usize,
    stride: usize,
    offsets: Vec<Coordinate>,
}

impl OffsetSet {
    #[inline]
    pub fn kernel_size(&self) -> usize {
        self.kernel_size
    }

    #[inline]
    pub fn stride(&self) -> usize {
        self.stride
    }

    #[inline]
    pub fn offsets(&self) -> &[Coordinate] {
        &self.offsets
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    #[inline]
    pub fn get(&self, k: usize) -> Coordinate {
        self.offsets[k]
    }

    /// Index of the zero offset (always present).
    pub fn center(&self) -> usize {
        self.offsets.len() / 2
    }
}

/// Enumerates `Δ(K, s)` in lexicographic order.
pub fn weight_offsets(kernel_size: usize, stride: usize) -> Result<OffsetSet> {
    if kernel_size == 0 || kernel_size % 2 == 0 {
        return Err(invalid(format!("kernel size must be a positive odd integer, got {kernel_size}")));
    }
    if stride == 0 {
        return Err(invalid("stride must be positive"));
    }
    let half = (kernel_size / 2) as i64;
    let reach = half * stride as i64;
    if reach > COORD_LIMIT as i64 {
        return Err(Error::CoordinateRange { axis: 'x', value: reach });
    }
    let steps: Vec<i32> = (-half..=half).map(|t| (t * stride as i64) as i32).collect();
    let mut offsets = Vec::with_capacity(kernel_size.pow(3));
    for &x in &steps {
        for &y in &steps {
            for &z in &steps {
                offsets.push(Coordinate::new(x, y, z));
            }
        }
    }
    Ok(OffsetSet { kernel_size, stride, offsets })
}

/// Output coordinates of a strided layer plus the number of sorts it took.
#[derive(Clone, Debug)]
pub struct OutputCoords {
    pub coords: Arc<[Coordinate]>,
    pub sorts_performed: usize,
}

/// `Q = {(⌊x/s⌋·s, ⌊y/s⌋·s, ⌊z/s⌋·s)}`, deduplicated and sorted.
///
/// With `s = 1` and a sorted input the input coordinate list is returned
/// as-is (shared, no copy, no sort).
pub fn generate_output_coords(input: &PointCloud, stride: usize) -> Result<OutputCoords> {
    if stride == 0 {
        return Err(invalid("stride must be positive"));
    }
    if stride == 1 {
        if input.is_sorted() {
            return Ok(OutputCoords { coords: Arc::clone(input.coords()), sorts_performed: 0 });
        }
        let mut keys: Vec<PackedKey> = input.coords().iter().map(|&c| pack_unchecked(c)).collect();
        keys.par_sort_unstable();
        let coords: Vec<Coordinate> = keys.into_iter().map(unpack_key).collect();
        return Ok(OutputCoords { coords: coords.into(), sorts_performed: 1 });
    }
    let s = stride as i64;
    let down = |v: i32| (v as i64).div_euclid(s) * s;
    let mut keys = Vec::with_capacity(input.len());
    for c in input.coords().iter() {
        keys.push(pack_unchecked(Coordinate::checked(down(c.x), down(c.y), down(c.z))?));
    }
    keys.par_sort_unstable();
    keys.dedup();
    let coords: Vec<Coordinate> = keys.into_iter().map(unpack_key).collect();
    Ok(OutputCoords { coords: coords.into(), sorts_performed: 1 })
}
