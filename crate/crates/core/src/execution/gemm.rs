use rayon::prelude::*;

use super::gather::SharedRows;
use super::grouping::GemmGroupPlan;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::synthetic::{random_matrix, STREAM_WEIGHTS};

/// Buffer rows per parallel GEMM work item.
const ROW_CHUNK: usize = 64;

/// One `C_in × C_out` weight matrix per offset.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightSet {
    c_in: usize,
    c_out: usize,
    mats: Vec<Matrix>,
}

impl WeightSet {
    pub fn new(mats: Vec<Matrix>) -> Result<Self> {
        let (c_in, c_out) = mats.first().map(|m| (m.rows(), m.cols())).unwrap_or((0, 0));
        if let Some(k) = mats.iter().position(|m| m.rows() != c_in || m.cols() != c_out) {
            return Err(Error::Shape(format!("weight {k} is not {c_in}x{c_out}")));
        }
        Ok(WeightSet { c_in, c_out, mats })
    }

    /// Entries uniform in `[-0.1, 0.1)` from the weight stream of `layer`,
    /// drawn offset by offset, row-major.
    pub fn random(offsets: usize, c_in: usize, c_out: usize, seed: u64, layer: u64) -> Self {
        let all = random_matrix(offsets, c_in * c_out, seed, STREAM_WEIGHTS + layer, -0.1, 0.1);
        let mats = (0..offsets)
            .map(|k| Matrix::from_vec(c_in, c_out, all.row(k).to_vec()).expect("sized by construction"))
            .collect();
        WeightSet { c_in, c_out, mats }
    }

    pub fn identity(offsets: usize, channels: usize) -> Self {
        WeightSet { c_in: channels, c_out: channels, mats: vec![Matrix::identity(channels); offsets] }
    }

    pub fn zeros(offsets: usize, c_in: usize, c_out: usize) -> Self {
        WeightSet { c_in, c_out, mats: vec![Matrix::zeros(c_in, c_out); offsets] }
    }

    pub fn len(&self) -> usize {
        self.mats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mats.is_empty()
    }

    pub fn c_in(&self) -> usize {
        self.c_in
    }

    pub fn c_out(&self) -> usize {
        self.c_out
    }

    pub fn get(&self, k: usize) -> &Matrix {
        &self.mats[k]
    }

    pub fn mats(&self) -> &[Matrix] {
        &self.mats
    }
}

/// `out = a · w` for `rows` consecutive rows, accumulated in f64.
#[inline]
fn multiply_rows(a: &[f32], w: &[f64], c_in: usize, c_out: usize, out: &mut [f32], acc: &mut [f64]) {
    for (row, dst) in a.chunks_exact(c_in).zip(out.chunks_exact_mut(c_out)) {
        acc.fill(0.0);
        for (&x, w_row) in row.iter().zip(w.chunks_exact(c_out)) {
            let x = x as f64;
            for (a, &wv) in acc.iter_mut().zip(w_row) {
                *a += x * wv;
            }
        }
        for (d, &a) in dst.iter_mut().zip(acc.iter()) {
            *d = a as f32;
        }
    }
}

fn check_shapes(buffer: &Matrix, weights: &WeightSet, plan: &GemmGroupPlan) -> Result<()> {
    if buffer.rows() != plan.buffer_len {
        return Err(Error::Shape(format!("buffer has {} rows, plan needs {}", buffer.rows(), plan.buffer_len)));
    }
    if weights.len() != plan.sizes.len() {
        return Err(Error::Shape(format!("{} weight matrices for {} offsets", weights.len(), plan.sizes.len())));
    }
    if buffer.cols() != weights.c_in() {
        return Err(Error::Shape(format!("buffer has {} channels, weights expect {}", buffer.cols(), weights.c_in())));
    }
    Ok(())
}

fn widen(weights: &WeightSet) -> Vec<Vec<f64>> {
    weights.mats().iter().map(|m| m.as_slice().iter().map(|&v| v as f64).collect()).collect()
}

/// Grouped batched multiplication: every member offset of a group multiplies
/// its whole padded slice. Groups are issued in waves of `width` concurrent
/// groups.
pub fn gemm_execute(buffer: &Matrix, weights: &WeightSet, plan: &GemmGroupPlan, width: usize) -> Result<Matrix> {
    check_shapes(buffer, weights, plan)?;
    let (c_in, c_out) = (weights.c_in(), weights.c_out());
    let mut out = Matrix::zeros(plan.buffer_len, c_out);
    if c_in == 0 || c_out == 0 {
        return Ok(out);
    }
    let wide = widen(weights);
    let shared = SharedRows::new(&mut out);
    let groups: Vec<usize> = (0..plan.group_count()).collect();
    for wave in groups.chunks(width.max(1)) {
        let items: Vec<(usize, usize, usize)> = wave
            .iter()
            .flat_map(|&g| {
                let h = plan.padded_heights[g];
                plan.members(g).iter().flat_map(move |&k| {
                    let start = plan.buffer_offsets[k].expect("scheduled offsets have slices");
                    (0..h).step_by(ROW_CHUNK).map(move |r| (k, start + r, (h - r).min(ROW_CHUNK)))
                })
            })
            .collect();
        items.par_iter().for_each_init(
            || vec![0f64; c_out],
            |acc, &(k, row, rows)| {
                let a = &buffer.as_slice()[row * c_in..(row + rows) * c_in];
                // SAFETY: member slices are disjoint row ranges and chunks
                // split each slice without overlap.
                let dst = unsafe { shared.slice(row * c_out, rows * c_out) };
                multiply_rows(a, &wide[k], c_in, c_out, dst, acc);
            },
        );
    }
    Ok(out)
}

/// Reference: one multiplication per offset over its real rows only.
pub fn gemm_unbatched(buffer: &Matrix, weights: &WeightSet, plan: &GemmGroupPlan) -> Result<Matrix> {
    check_shapes(buffer, weights, plan)?;
    let (c_in, c_out) = (weights.c_in(), weights.c_out());
    let mut out = Matrix::zeros(plan.buffer_len, c_out);
    let wide = widen(weights);
    let mut acc = vec![0f64; c_out];
    for (k, &n) in plan.sizes.iter().enumerate() {
        let Some(start) = plan.buffer_offsets[k] else { continue };
        let a = &buffer.as_slice()[start * c_in..(start + n) * c_in];
        let dst = &mut out.as_mut_slice()[start * c_out..(start + n) * c_out];
        multiply_rows(a, &wide[k], c_in, c_out, dst, &mut acc);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::execution::grouping::{group_gemms, GroupingParams, GroupingPolicy};
    use crate::synthetic::Stream;

    fn plan_for(sizes: &[usize], policy: GroupingPolicy) -> GemmGroupPlan {
        group_gemms(sizes, policy, GroupingParams { epsilon: 0.5, max_batch: 4 }).unwrap()
    }

    /// Buffer with random real rows and zero padded rows.
    fn buffer_for(plan: &GemmGroupPlan, c: usize, seed: u64) -> Matrix {
        let mut m = random_matrix(plan.buffer_len, c, seed, 1, -1.0, 1.0);
        for (k, &n) in plan.sizes.iter().enumerate() {
            if let Some(start) = plan.buffer_offsets[k] {
                let h = plan.padded_heights[plan.groups.iter().position(|g| plan.offset_order[g.clone()].contains(&k)).unwrap()];
                for r in start + n..start + h {
                    m.row_mut(r).fill(0.0);
                }
            }
        }
        m
    }

    #[test]
    fn identity_weights_preserve_buffer() {
        let plan = plan_for(&[3, 0, 5, 4], GroupingPolicy::Sorted);
        let buf = buffer_for(&plan, 6, 1);
        let out = gemm_execute(&buf, &WeightSet::identity(4, 6), &plan, 4).unwrap();
        assert!(out.bit_eq(&buf));
    }

    #[test]
    fn scalar_weight_scales() {
        let plan = plan_for(&[4], GroupingPolicy::Sorted);
        let buf = Matrix::from_vec(4, 1, vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        let w = WeightSet::new(vec![Matrix::from_vec(1, 1, vec![2.5]).unwrap()]).unwrap();
        let out = gemm_execute(&buf, &w, &plan, 1).unwrap();
        assert_eq!(out.as_slice(), &[2.5, -5.0, 1.25, 7.5]);
    }

    #[test]
    fn grouped_equals_unbatched() {
        let mut rng = Stream::new(8, 8);
        for trial in 0..40 {
            let sizes: Vec<usize> = (0..27).map(|_| rng.below(150) as usize).collect();
            let (c_in, c_out) = (1 + rng.below(20) as usize, 1 + rng.below(20) as usize);
            for policy in [GroupingPolicy::MapOrder, GroupingPolicy::Sorted] {
                let plan = plan_for(&sizes, policy);
                let buf = buffer_for(&plan, c_in, trial);
                let w = WeightSet::random(27, c_in, c_out, trial, 0);
                let grouped = gemm_execute(&buf, &w, &plan, 1 + trial as usize % 5).unwrap();
                assert!(grouped.bit_eq(&gemm_unbatched(&buf, &w, &plan).unwrap()));
            }
        }
    }

    #[test]
    fn shape_errors() {
        let plan = plan_for(&[2], GroupingPolicy::Sorted);
        let w = WeightSet::identity(1, 3);
        assert!(gemm_execute(&Matrix::zeros(2, 4), &w, &plan, 1).is_err());
        assert!(gemm_execute(&Matrix::zeros(3, 3), &w, &plan, 1).is_err());
        assert!(gemm_execute(&Matrix::zeros(2, 3), &WeightSet::identity(2, 3), &plan, 1).is_err());
        assert!(WeightSet::new(vec![Matrix::zeros(2, 2), Matrix::zeros(2, 3)]).is_err());
    }

    #[test]
    fn random_weights_are_reproducible() {
        let a = WeightSet::random(27, 4, 8, 3, 2);
        assert_eq!(a, WeightSet::random(27, 4, 8, 3, 2));
        assert_ne!(a, WeightSet::random(27, 4, 8, 3, 1));
        assert!(a.mats().iter().all(|m| m.as_slice().iter().all(|v| (-0.1..0.1).contains(v))));
    }
}
