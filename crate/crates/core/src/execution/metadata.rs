use super::grouping::GemmGroupPlan;
use crate::error::{Error, Result};
use crate::kernelmap::KernelMap;

/// One table entry: offset index and buffer slot.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SlotRef {
    pub offset: u32,
    pub slot: u32,
}

/// Per-point lists of buffer slots, ascending by offset (CSR layout).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SlotTable {
    starts: Vec<usize>,
    entries: Vec<SlotRef>,
}

impl SlotTable {
    fn build(points: usize, triples: impl Iterator<Item = (usize, SlotRef)> + Clone) -> Self {
        let mut starts = vec![0usize; points + 1];
        for (p, _) in triples.clone() {
            starts[p + 1] += 1;
        }
        for p in 0..points {
            starts[p + 1] += starts[p];
        }
        let mut fill = starts.clone();
        let mut entries = vec![SlotRef { offset: 0, slot: 0 }; starts[points]];
        // Triples arrive by ascending offset, so each list ends up sorted.
        for (p, r) in triples {
            entries[fill[p]] = r;
            fill[p] += 1;
        }
        SlotTable { starts, entries }
    }

    pub fn points(&self) -> usize {
        self.starts.len() - 1
    }

    #[inline]
    pub fn entries_for(&self, point: usize) -> &[SlotRef] {
        &self.entries[self.starts[point]..self.starts[point + 1]]
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Slot of `(offset, point)`, if that pair has a match.
    pub fn lookup(&self, offset: usize, point: usize) -> Option<usize> {
        self.entries_for(point).iter().find(|r| r.offset as usize == offset).map(|r| r.slot as usize)
    }
}

/// Input table (where the gather writes) and output table (where the scatter
/// reads) for one layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MetadataTables {
    pub imt: SlotTable,
    pub omt: SlotTable,
    pub buffer_len: usize,
}

/// The `r`-th match of offset `k` owns slot `buffer_offsets[k] + r`.
pub fn build_metadata_tables(map: &KernelMap, plan: &GemmGroupPlan, inputs: usize, outputs: usize) -> Result<MetadataTables> {
    if map.sizes() != plan.sizes {
        return Err(Error::Invariant("plan sizes do not match the kernel map".into()));
    }
    if plan.buffer_len > u32::MAX as usize {
        return Err(Error::Invariant(format!("buffer of {} rows exceeds the slot range", plan.buffer_len)));
    }
    for (j, i, _) in map.triples() {
        if j as usize >= inputs || i as usize >= outputs {
            return Err(Error::Invariant(format!("match ({j}, {i}) indexes past the clouds")));
        }
    }
    let slots = || {
        map.lists().iter().enumerate().flat_map(move |(k, list)| {
            let base = plan.buffer_offsets[k].unwrap_or(0);
            list.iter().enumerate().map(move |(r, m)| (k, m, (base + r) as u32))
        })
    };
    let imt = SlotTable::build(inputs, slots().map(|(k, m, slot)| (m.input as usize, SlotRef { offset: k as u32, slot })));
    let omt = SlotTable::build(outputs, slots().map(|(k, m, slot)| (m.output as usize, SlotRef { offset: k as u32, slot })));
    Ok(MetadataTables { imt, omt, buffer_len: plan.buffer_len })
}
