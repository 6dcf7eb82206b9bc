//! Tiled gather into and scatter out of the padded feature buffers.

use rayon::prelude::*;

use super::metadata::SlotTable;
use crate::error::{invalid, Error, Result};
use crate::matrix::Matrix;

/// Points handled per parallel work item.
const POINT_CHUNK: usize = 256;

/// Raw view of a matrix for writers that touch provably disjoint elements.
#[derive(Clone, Copy)]
pub(crate) struct SharedRows {
    ptr: *mut f32,
    len: usize,
}

// SAFETY: callers only write disjoint element ranges through this view while
// the underlying matrix is exclusively borrowed for the view's lifetime.
unsafe impl Send for SharedRows {}
unsafe impl Sync for SharedRows {}

impl SharedRows {
    pub(crate) fn new(m: &mut Matrix) -> Self {
        let s = m.as_mut_slice();
        SharedRows { ptr: s.as_mut_ptr(), len: s.len() }
    }

    /// # Safety
    /// No other thread may access `start..start + len` concurrently.
    #[inline]
    #[allow(clippy::mut_from_ref)]
    pub(crate) unsafe fn slice(&self, start: usize, len: usize) -> &mut [f32] {
        assert!(start + len <= self.len);
        std::slice::from_raw_parts_mut(self.ptr.add(start), len)
    }
}

fn check_tile(tile: usize, channels: usize, what: &str) -> Result<()> {
    if tile == 0 || channels % tile != 0 {
        return Err(invalid(format!("{what} tile {tile} does not divide {channels} channels")));
    }
    Ok(())
}

/// Copies each input feature row, tile by tile, into every buffer slot its
/// table entries name. Returns the buffer and the number of table lookups,
/// `(C/T)` per match.
pub fn gather(features: &Matrix, imt: &SlotTable, buffer_len: usize, tile: usize) -> Result<(Matrix, u64)> {
    let mut buffer = Matrix::zeros(buffer_len, features.cols());
    let lookups = gather_into(features, imt, &mut buffer, tile)?;
    Ok((buffer, lookups))
}

/// [`gather`] into an existing buffer. Only rows named by the table are
/// written; padding rows keep their contents.
pub fn gather_into(features: &Matrix, imt: &SlotTable, buffer: &mut Matrix, tile: usize) -> Result<u64> {
    let c = features.cols();
    check_tile(tile, c, "gather")?;
    if imt.points() != features.rows() {
        return Err(Error::Shape(format!("table covers {} inputs, features have {} rows", imt.points(), features.rows())));
    }
    if buffer.cols() != c {
        return Err(Error::Shape(format!("buffer has {} columns, features have {c}", buffer.cols())));
    }
    if c == 0 {
        return Ok(0);
    }
    let out = SharedRows::new(buffer);
    let tiles = c / tile;
    let chunks = features.rows().div_ceil(POINT_CHUNK);
    let lookups: u64 = (0..tiles * chunks)
        .into_par_iter()
        .map_init(
            || vec![0f32; tile],
            |local, item| {
                let (t, chunk) = (item / chunks, item % chunks);
                let lo = t * tile;
                let mut lookups = 0;
                for j in chunk * POINT_CHUNK..((chunk + 1) * POINT_CHUNK).min(features.rows()) {
                    local.copy_from_slice(&features.row(j)[lo..lo + tile]);
                    for r in imt.entries_for(j) {
                        lookups += 1;
                        // SAFETY: each (slot, tile) pair belongs to exactly one
                        // (input, offset) entry and one tile index.
                        let dst = unsafe { out.slice(r.slot as usize * c + lo, tile) };
                        dst.copy_from_slice(local);
                    }
                }
                lookups
            },
        )
        .sum();
    Ok(lookups)
}

/// Sums, for each output, the buffer rows its table entries name, in
/// ascending offset order with 64-bit accumulation. Returns the features and
/// the number of table lookups.
pub fn scatter(buffer: &Matrix, omt: &SlotTable, tile: usize) -> Result<(Matrix, u64)> {
    let mut result = Matrix::zeros(omt.points(), buffer.cols());
    let lookups = scatter_into(buffer, omt, &mut result, tile)?;
    Ok((result, lookups))
}

/// [`scatter`] into an existing output matrix; every element is overwritten.
pub fn scatter_into(buffer: &Matrix, omt: &SlotTable, result: &mut Matrix, tile: usize) -> Result<u64> {
    let c = buffer.cols();
    check_tile(tile, c, "scatter")?;
    let outputs = omt.points();
    if result.rows() != outputs || result.cols() != c {
        return Err(Error::Shape(format!(
            "output is {}x{}, expected {outputs}x{c}",
            result.rows(),
            result.cols()
        )));
    }
    if c == 0 {
        return Ok(0);
    }
    let out = SharedRows::new(result);
    let tiles = c / tile;
    let chunks = outputs.div_ceil(POINT_CHUNK);
    let lookups: u64 = (0..tiles * chunks)
        .into_par_iter()
        .map_init(
            || vec![0f64; tile],
            |acc, item| {
                let (t, chunk) = (item / chunks, item % chunks);
                let lo = t * tile;
                let mut lookups = 0;
                for i in chunk * POINT_CHUNK..((chunk + 1) * POINT_CHUNK).min(outputs) {
                    acc.fill(0.0);
                    for r in omt.entries_for(i) {
                        lookups += 1;
                        let src = &buffer.row(r.slot as usize)[lo..lo + tile];
                        for (a, &v) in acc.iter_mut().zip(src) {
                            *a += v as f64;
                        }
                    }
                    // SAFETY: output row i, tile t is produced by this item only.
                    let dst = unsafe { out.slice(i * c + lo, tile) };
                    for (d, &a) in dst.iter_mut().zip(acc.iter()) {
                        *d = a as f32;
                    }
                }
                lookups
            },
        )
        .sum();
    Ok(lookups)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autotune::candidate_tiles;
    use crate::execution::grouping::{group_gemms, GroupingParams, GroupingPolicy};
    use crate::execution::metadata::{build_metadata_tables, MetadataTables};
    use crate::geometry::{generate_output_coords, weight_offsets, Coordinate, PointCloud};
    use crate::kernelmap::baseline::brute_force_map;
    use crate::synthetic::{random_cloud, random_matrix};

    fn tables_for(pc: &PointCloud, k: usize, s: usize) -> (MetadataTables, usize, usize) {
        let q = generate_output_coords(pc, s).unwrap().coords;
        let offsets = weight_offsets(k, s).unwrap();
        let map = brute_force_map(pc.coords(), &q, &offsets);
        let plan = group_gemms(&map.sizes(), GroupingPolicy::Sorted, GroupingParams::default()).unwrap();
        (build_metadata_tables(&map, &plan, pc.len(), q.len()).unwrap(), map.total(), q.len())
    }

    #[test]
    fn identity_gather_copies_features() {
        let pc = random_cloud(300, 10, 8, 1).unwrap().to_sorted().0;
        let (t, _, _) = tables_for(&pc, 1, 1);
        let (buf, lookups) = gather(pc.features(), &t.imt, t.buffer_len, 8).unwrap();
        assert!(buf.bit_eq(pc.features()));
        assert_eq!(lookups, 300);
    }

    #[test]
    fn one_input_fills_several_slots() {
        // The centre of a plus shape is a neighbour of all 4 arms and itself.
        let coords = vec![
            Coordinate::new(0, 0, 0),
            Coordinate::new(-1, 0, 0),
            Coordinate::new(1, 0, 0),
            Coordinate::new(0, -1, 0),
            Coordinate::new(0, 1, 0),
        ];
        let features = random_matrix(5, 4, 2, 2, 0.0, 1.0);
        let pc = PointCloud::new(coords, features).unwrap().to_sorted().0;
        let centre = pc.coords().iter().position(|c| *c == Coordinate::new(0, 0, 0)).unwrap();
        let (t, _, _) = tables_for(&pc, 3, 1);
        assert_eq!(t.imt.entries_for(centre).len(), 5);
        let (buf, _) = gather(pc.features(), &t.imt, t.buffer_len, 2).unwrap();
        let copies = (0..buf.rows()).filter(|&r| buf.row(r) == pc.features().row(centre)).count();
        assert_eq!(copies, 5);
    }

    #[test]
    fn tile_invariance_and_lookup_scaling() {
        let pc = random_cloud(1500, 14, 24, 3).unwrap().to_sorted().0;
        for s in [1, 2] {
            let (t, matches, outputs) = tables_for(&pc, 3, s);
            let (reference, _) = gather(pc.features(), &t.imt, t.buffer_len, 24).unwrap();
            let (out_ref, _) = scatter(&reference, &t.omt, 24).unwrap();
            assert_eq!(out_ref.rows(), outputs);
            for tile in candidate_tiles(24) {
                let (buf, lookups) = gather(pc.features(), &t.imt, t.buffer_len, tile).unwrap();
                assert!(buf.bit_eq(&reference));
                assert_eq!(lookups, (24 / tile * matches) as u64);
                let (out, lookups) = scatter(&buf, &t.omt, tile).unwrap();
                assert!(out.bit_eq(&out_ref));
                assert_eq!(lookups, (24 / tile * matches) as u64);
            }
        }
    }

    #[test]
    fn padded_rows_stay_zero() {
        let pc = random_cloud(600, 10, 4, 5).unwrap().to_sorted().0;
        let (t, _, _) = tables_for(&pc, 3, 1);
        let (buf, _) = gather(pc.features(), &t.imt, t.buffer_len, 1).unwrap();
        let mut used = vec![false; t.buffer_len];
        for j in 0..pc.len() {
            for r in t.imt.entries_for(j) {
                used[r.slot as usize] = true;
            }
        }
        for (row, used) in used.iter().enumerate() {
            if !used {
                assert!(buf.row(row).iter().all(|&v| v.to_bits() == 0));
            }
        }
    }

    #[test]
    fn scatter_sums_in_order() {
        let pc = PointCloud::from_sorted(vec![Coordinate::new(0, 0, 0), Coordinate::new(0, 0, 1)], Matrix::zeros(2, 1)).unwrap();
        let (t, _, _) = tables_for(&pc, 3, 1);
        let mut buf = Matrix::zeros(t.buffer_len, 1);
        for i in 0..2 {
            for (n, r) in t.omt.entries_for(i).iter().enumerate() {
                buf.row_mut(r.slot as usize)[0] = (10 * i + n + 1) as f32;
            }
        }
        let (out, _) = scatter(&buf, &t.omt, 1).unwrap();
        assert_eq!(out.row(0), &[3.0]);
        assert_eq!(out.row(1), &[23.0]);
    }

    #[test]
    fn reused_buffers_match_fresh_ones() {
        let pc = random_cloud(800, 12, 8, 6).unwrap().to_sorted().0;
        let (t, _, _) = tables_for(&pc, 3, 1);
        let (fresh, _) = gather(pc.features(), &t.imt, t.buffer_len, 2).unwrap();
        let mut buf = Matrix::zeros(t.buffer_len, 8);
        for tile in [8, 4, 1] {
            gather_into(pc.features(), &t.imt, &mut buf, tile).unwrap();
            assert!(buf.bit_eq(&fresh));
        }
        let (out, _) = scatter(&fresh, &t.omt, 8).unwrap();
        let mut reused = random_matrix(out.rows(), 8, 1, 1, -5.0, 5.0);
        scatter_into(&fresh, &t.omt, &mut reused, 4).unwrap();
        assert!(reused.bit_eq(&out));
        assert!(gather_into(pc.features(), &t.imt, &mut Matrix::zeros(t.buffer_len, 4), 4).is_err());
        assert!(scatter_into(&fresh, &t.omt, &mut Matrix::zeros(1, 8), 4).is_err());
    }

    #[test]
    fn non_divisor_tiles_are_rejected() {
        let pc = random_cloud(10, 5, 6, 1).unwrap();
        let (t, _, _) = tables_for(&pc, 1, 1);
        assert!(gather(pc.features(), &t.imt, t.buffer_len, 4).is_err());
        assert!(gather(pc.features(), &t.imt, t.buffer_len, 0).is_err());
        assert!(scatter(&Matrix::zeros(t.buffer_len, 6), &t.omt, 5).is_err());
    }
}
