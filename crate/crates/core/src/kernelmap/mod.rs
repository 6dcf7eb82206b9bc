//! Kernel maps: the `(input j, output i, offset k)` triples with
//! `p_j = q_i + δ_k`, stored grouped by offset.
//!
//! Three builders produce the same canonical map:
//! - [`sorted`]: segmented query sorting with double-traversed binary search,
//! - [`baseline::query_hash_map`]: open-addressing hash table lookups,
//! - [`baseline::brute_force_map`]: exhaustive comparison, for testing.

pub mod baseline;
pub mod sorted;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Coordinate, OffsetSet};

/// One kernel-map entry for a fixed offset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Match {
    pub input: u32,
    pub output: u32,
}

/// Kernel map in canonical form: one list per offset, each sorted by output
/// index. Canonical form makes `==` coincide with set equality of triples.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KernelMap {
    offsets: OffsetSet,
    matches: Vec<Vec<Match>>,
}

impl KernelMap {
    /// Wraps per-offset lists after checking they are canonical.
    pub fn from_lists(offsets: OffsetSet, matches: Vec<Vec<Match>>) -> Result<Self> {
        if matches.len() != offsets.len() {
            return Err(Error::Shape(format!("{} match lists for {} offsets", matches.len(), offsets.len())));
        }
        for (k, list) in matches.iter().enumerate() {
            if list.windows(2).any(|w| w[0].output >= w[1].output) {
                return Err(Error::Invariant(format!("offset {k}: matches not strictly ordered by output")));
            }
        }
        Ok(KernelMap { offsets, matches })
    }

    pub(crate) fn from_lists_unchecked(offsets: OffsetSet, matches: Vec<Vec<Match>>) -> Self {
        debug_assert!(matches.len() == offsets.len());
        KernelMap { offsets, matches }
    }

    pub fn offsets(&self) -> &OffsetSet {
        &self.offsets
    }

    pub fn for_offset(&self, k: usize) -> &[Match] {
        &self.matches[k]
    }

    pub fn lists(&self) -> &[Vec<Match>] {
        &self.matches
    }

    pub fn into_lists(self) -> Vec<Vec<Match>> {
        self.matches
    }

    /// Match count per offset (GEMM heights before padding).
    pub fn sizes(&self) -> Vec<usize> {
        self.matches.iter().map(Vec::len).collect()
    }

    pub fn total(&self) -> usize {
        self.matches.iter().map(Vec::len).sum()
    }

    /// All triples `(j, i, k)`.
    pub fn triples(&self) -> impl Iterator<Item = (u32, u32, usize)> + '_ {
        self.matches
            .iter()
            .enumerate()
            .flat_map(|(k, list)| list.iter().map(move |m| (m.input, m.output, k)))
    }

    /// Checks every triple against the defining condition `p_j = q_i + δ_k`.
    pub fn verify(&self, inputs: &[Coordinate], outputs: &[Coordinate]) -> Result<()> {
        for (j, i, k) in self.triples() {
            let (j, i) = (j as usize, i as usize);
            if j >= inputs.len() || i >= outputs.len() {
                return Err(Error::Invariant(format!("triple ({j}, {i}, {k}) indexes past the clouds")));
            }
            if outputs[i].offset_by(self.offsets.get(k)) != Some(inputs[j]) {
                return Err(Error::Invariant(format!("triple ({j}, {i}, {k}) violates p_j = q_i + δ_k")));
            }
        }
        Ok(())
    }
}

/// Merges per-chunk `[offset][match]` lists produced over consecutive output
/// ranges into one canonical list per offset.
pub(crate) fn merge_chunks(num_offsets: usize, chunks: Vec<Vec<Vec<Match>>>) -> Vec<Vec<Match>> {
    let mut lists: Vec<Vec<Match>> = (0..num_offsets)
        .map(|k| Vec::with_capacity(chunks.iter().map(|c| c[k].len()).sum()))
        .collect();
    for chunk in chunks {
        for (list, part) in lists.iter_mut().zip(chunk) {
            list.extend(part);
        }
    }
    lists
}
