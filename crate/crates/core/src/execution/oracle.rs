//! Direct nested-loop evaluation of a sparse convolution, for testing.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::gemm::WeightSet;
use crate::error::{invalid, Result};
use crate::geometry::{weight_offsets, Coordinate, PointCloud};
use crate::matrix::Matrix;

/// Oracle output: coordinates, features, and per element the sum of the
/// absolute values of its products (`Σ |f|·|w|`), the scale for errors.
#[derive(Clone, Debug)]
pub struct OracleOutput {
    pub coords: Vec<Coordinate>,
    pub features: Matrix,
    pub magnitude: Matrix,
}

/// For every output `q`, every offset `δ_k` in ascending order and every
/// input `p`: if `p = q + δ_k`, adds `F_p · W_k` in f64.
pub fn dense_conv_oracle(cloud: &PointCloud, weights: &WeightSet, kernel: usize, stride: usize) -> Result<OracleOutput> {
    let offsets = weight_offsets(kernel, stride)?;
    if weights.len() != offsets.len() || weights.c_in() != cloud.channels() {
        return Err(invalid("weights do not match the layer shape"));
    }
    let s = stride as i64;
    let down = |v: i32| ((v as i64).div_euclid(s) * s) as i32;
    let coords: Vec<Coordinate> = cloud
        .coords()
        .iter()
        .map(|c| Coordinate::new(down(c.x), down(c.y), down(c.z)))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let (c_in, c_out) = (weights.c_in(), weights.c_out());
    let mut features = Matrix::zeros(coords.len(), c_out);
    let mut magnitude = Matrix::zeros(coords.len(), c_out);
    let mut acc = vec![0f64; c_out];
    let mut mag = vec![0f64; c_out];
    for (i, q) in coords.iter().enumerate() {
        acc.fill(0.0);
        mag.fill(0.0);
        for (k, d) in offsets.offsets().iter().enumerate() {
            let target = (q.x as i64 + d.x as i64, q.y as i64 + d.y as i64, q.z as i64 + d.z as i64);
            for (j, p) in cloud.coords().iter().enumerate() {
                if (p.x as i64, p.y as i64, p.z as i64) != target {
                    continue;
                }
                let w = weights.get(k);
                for c in 0..c_in {
                    let f = cloud.features().row(j)[c] as f64;
                    for o in 0..c_out {
                        let wv = w.row(c)[o] as f64;
                        acc[o] += f * wv;
                        mag[o] += (f * wv).abs();
                    }
                }
            }
        }
        for o in 0..c_out {
            features.row_mut(i)[o] = acc[o] as f32;
            magnitude.row_mut(i)[o] = mag[o] as f32;
        }
    }
    Ok(OracleOutput { coords, features, magnitude })
}

/// Element-wise comparison against the oracle.
///
/// The error of an element is `|got - want| / Σ|f|·|w|`; elements whose
/// magnitude is zero must match exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleCheck {
    pub passed: bool,
    pub coords_match: bool,
    pub elements: usize,
    pub max_error: f64,
    /// Largest `|got - want| / |want|` over nonzero `want`, for reference.
    pub max_plain_relative: f64,
}

pub fn check_against_oracle(out: &PointCloud, oracle: &OracleOutput, tolerance: f64) -> OracleCheck {
    let coords_match = out.coords().as_ref() == oracle.coords.as_slice();
    let shape_ok = out.features().rows() == oracle.features.rows() && out.features().cols() == oracle.features.cols();
    let mut max_error = 0f64;
    let mut max_plain_relative = 0f64;
    let mut exact_ok = true;
    if coords_match && shape_ok {
        let got = out.features().as_slice();
        let want = oracle.features.as_slice();
        for ((&g, &w), &m) in got.iter().zip(want).zip(oracle.magnitude.as_slice()) {
            let diff = (g as f64 - w as f64).abs();
            if m == 0.0 {
                exact_ok &= diff == 0.0;
            } else {
                max_error = max_error.max(diff / m as f64);
            }
            if w != 0.0 {
                max_plain_relative = max_plain_relative.max(diff / (w as f64).abs());
            }
            if diff.is_nan() {
                exact_ok = false;
            }
        }
    }
    OracleCheck {
        passed: coords_match && shape_ok && exact_ok && max_error <= tolerance,
        coords_match,
        elements: oracle.features.as_slice().len(),
        max_error,
        max_plain_relative,
    }
}
