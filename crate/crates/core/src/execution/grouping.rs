//! GEMM grouping: offsets whose matrices share a padded row height and run
//! as one batched multiplication.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Order in which offsets are scanned before greedy grouping.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupingPolicy {
    /// Offsets in the order the map step produced them (lexicographic).
    MapOrder,
    /// Offsets sorted by nondecreasing match count, ties by offset index.
    Sorted,
}

impl fmt::Display for GroupingPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GroupingPolicy::MapOrder => "map_order",
            GroupingPolicy::Sorted => "sorted",
        })
    }
}

impl FromStr for GroupingPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "map_order" => Ok(GroupingPolicy::MapOrder),
            "sorted" => Ok(GroupingPolicy::Sorted),
            other => Err(invalid(format!("unknown grouping policy {other:?} (expected map_order or sorted)"))),
        }
    }
}

/// Greedy grouping thresholds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupingParams {
    /// Largest padded/real row ratio a group may reach.
    pub epsilon: f64,
    /// Largest number of offsets per group.
    pub max_batch: usize,
}

impl Default for GroupingParams {
    fn default() -> Self {
        GroupingParams { epsilon: 0.25, max_batch: 16 }
    }
}

impl GroupingParams {
    pub fn validate(&self) -> Result<()> {
        if self.epsilon.is_nan() || self.epsilon < 0.0 {
            return Err(invalid(format!("epsilon must be a nonnegative number, got {}", self.epsilon)));
        }
        if self.max_batch == 0 {
            return Err(invalid("max_batch must be positive"));
        }
        Ok(())
    }
}

/// Grouped, padded GEMM schedule and the buffer layout it implies.
///
/// Group `g` covers `offset_order[groups[g]]`; each member gets a slice of
/// `padded_heights[g]` consecutive buffer rows, members laid out in order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GemmGroupPlan {
    pub offset_order: Vec<usize>,
    pub sizes: Vec<usize>,
    pub groups: Vec<Range<usize>>,
    pub padded_heights: Vec<usize>,
    /// First buffer row of each offset's slice; `None` for empty offsets.
    pub buffer_offsets: Vec<Option<usize>>,
    pub buffer_len: usize,
}

impl GemmGroupPlan {
    /// Lays out buffer slices for an explicit order and grouping.
    pub fn from_groups(sizes: Vec<usize>, offset_order: Vec<usize>, groups: Vec<Range<usize>>) -> Result<Self> {
        let mut seen = vec![false; sizes.len()];
        for &k in &offset_order {
            if k >= sizes.len() || std::mem::replace(&mut seen[k], true) {
                return Err(Error::Invariant(format!("offset {k} repeated or out of range in the order")));
            }
            if sizes[k] == 0 {
                return Err(Error::Invariant(format!("offset {k} has no matches but is scheduled")));
            }
        }
        if sizes.iter().zip(&seen).any(|(&n, &s)| n > 0 && !s) {
            return Err(Error::Invariant("an offset with matches is missing from the order".into()));
        }
        let mut next = 0;
        for g in &groups {
            if g.start != next || g.end <= g.start {
                return Err(Error::Invariant("groups must tile the offset order with nonempty ranges".into()));
            }
            next = g.end;
        }
        if next != offset_order.len() {
            return Err(Error::Invariant("groups must tile the offset order with nonempty ranges".into()));
        }
        let mut buffer_offsets = vec![None; sizes.len()];
        let mut padded_heights = Vec::with_capacity(groups.len());
        let mut row = 0;
        for g in &groups {
            let h = offset_order[g.clone()].iter().map(|&k| sizes[k]).max().unwrap_or(0);
            for &k in &offset_order[g.clone()] {
                buffer_offsets[k] = Some(row);
                row += h;
            }
            padded_heights.push(h);
        }
        Ok(GemmGroupPlan { offset_order, sizes, groups, padded_heights, buffer_offsets, buffer_len: row })
    }

    pub fn group_count(&self) -> usize {
        self.groups.len()
    }

    pub fn members(&self, group: usize) -> &[usize] {
        &self.offset_order[self.groups[group].clone()]
    }

    /// Σ n_k over scheduled offsets.
    pub fn real_rows(&self) -> usize {
        self.sizes.iter().sum()
    }

    /// Buffer rows holding no match.
    pub fn padded_rows(&self) -> usize {
        self.buffer_len - self.real_rows()
    }
}

/// Orders offsets by `policy`, drops empty ones and groups greedily: the
/// next offset joins the current group while the group's padding ratio
/// after inclusion stays within `epsilon` and the group has fewer than
/// `max_batch` members.
pub fn group_gemms(sizes: &[usize], policy: GroupingPolicy, params: GroupingParams) -> Result<GemmGroupPlan> {
    params.validate()?;
    let mut order: Vec<usize> = (0..sizes.len()).filter(|&k| sizes[k] > 0).collect();
    if policy == GroupingPolicy::Sorted {
        order.sort_by_key(|&k| (sizes[k], k));
    }
    let mut groups = Vec::new();
    let mut start = 0;
    let (mut max, mut real) = (0usize, 0usize);
    for (pos, &k) in order.iter().enumerate() {
        let n = sizes[k];
        let members = pos - start;
        if members > 0 {
            let new_max = max.max(n);
            let new_real = real + n;
            let padding = new_max * (members + 1) - new_real;
            if members < params.max_batch && padding as f64 <= params.epsilon * new_real as f64 {
                max = new_max;
                real = new_real;
                continue;
            }
            groups.push(start..pos);
            start = pos;
        }
        max = n;
        real = n;
    }
    if start < order.len() {
        groups.push(start..order.len());
    }
    GemmGroupPlan::from_groups(sizes.to_vec(), order, groups)
}

/// Padded rows divided by real rows.
pub fn padding_overhead(plan: &GemmGroupPlan) -> Result<f64> {
    match plan.real_rows() {
        0 => Err(Error::EmptyPlan),
        real => Ok(plan.padded_rows() as f64 / real as f64),
    }
}

/// Total padding when `sizes` are cut, in this order, into consecutive
/// groups of the given cardinalities.
pub fn arrangement_padding(sizes: &[usize], cardinalities: &[usize]) -> usize {
    let mut pos = 0;
    let mut padding = 0;
    for &c in cardinalities {
        let g = &sizes[pos..pos + c];
        let h = g.iter().copied().max().unwrap_or(0);
        padding += g.iter().map(|&n| h - n).sum::<usize>();
        pos += c;
    }
    padding
}
