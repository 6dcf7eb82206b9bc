use std::io::{self, Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"MTR1";
const RECORD_BYTES: usize = 13;

/// Memory region an access belongs to. Each region lives in its own
/// 2^40-byte window of the simulated address space.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(u8)]
pub enum Region {
    SourceKeys = 0,
    SourceIndices = 1,
    HashSlots = 2,
    QueryKeys = 3,
}

impl Region {
    pub const ALL: [Region; 4] = [Region::SourceKeys, Region::SourceIndices, Region::HashSlots, Region::QueryKeys];

    #[inline]
    pub fn base(self) -> u64 {
        (self as u64 + 1) << 40
    }

    pub fn from_tag(tag: u8) -> Option<Region> {
        Region::ALL.get(tag as usize).copied()
    }
}

/// One memory touch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Access {
    pub address: u64,
    pub width: u32,
    pub region: Region,
}

/// Receiver of memory touches issued by an index structure.
pub trait TraceSink {
    fn touch(&mut self, region: Region, byte_offset: u64, width: u32);
}

/// Discards every touch.
#[derive(Clone, Copy, Debug, Default)]
pub struct NoTrace;

impl TraceSink for NoTrace {
    #[inline(always)]
    fn touch(&mut self, _: Region, _: u64, _: u32) {}
}

impl<T: TraceSink + ?Sized> TraceSink for &mut T {
    #[inline]
    fn touch(&mut self, region: Region, byte_offset: u64, width: u32) {
        (**self).touch(region, byte_offset, width)
    }
}

/// Recorded access sequence in execution order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AccessTrace {
    accesses: Vec<Access>,
    bounds: Vec<(Region, u64)>,
}

impl AccessTrace {
    pub fn new() -> Self {
        Self::default()
    }

    /// Declares the byte length of a region; touches beyond it are rejected
    /// by [`AccessTrace::check_bounds`].
    pub fn declare(&mut self, region: Region, len_bytes: u64) {
        match self.bounds.iter_mut().find(|(r, _)| *r == region) {
            Some(entry) => entry.1 = entry.1.max(len_bytes),
            None => self.bounds.push((region, len_bytes)),
        }
    }

    pub fn push(&mut self, access: Access) {
        self.accesses.push(access);
    }

    pub fn accesses(&self) -> &[Access] {
        &self.accesses
    }

    pub fn len(&self) -> usize {
        self.accesses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.accesses.is_empty()
    }

    /// Accesses to a single region, in order.
    pub fn filter(&self, region: Region) -> AccessTrace {
        AccessTrace {
            accesses: self.accesses.iter().copied().filter(|a| a.region == region).collect(),
            bounds: self.bounds.iter().copied().filter(|(r, _)| *r == region).collect(),
        }
    }

    pub fn check_bounds(&self) -> Result<()> {
        for a in &self.accesses {
            let Some(&(_, len)) = self.bounds.iter().find(|(r, _)| *r == a.region) else {
                continue;
            };
            let base = a.region.base();
            if a.address < base || a.address + a.width as u64 > base + len {
                return Err(Error::TraceFormat(format!(
                    "access at {:#x} (+{}) outside {:?} bounds",
                    a.address, a.width, a.region
                )));
            }
        }
        Ok(())
    }

    /// Writes `MTR1` followed by little-endian `(u64 address, u32 width, u8 region)` records.
    pub fn write_to<W: Write>(&self, mut w: W) -> io::Result<()> {
        w.write_all(MAGIC)?;
        let mut rec = [0u8; RECORD_BYTES];
        for a in &self.accesses {
            rec[..8].copy_from_slice(&a.address.to_le_bytes());
            rec[8..12].copy_from_slice(&a.width.to_le_bytes());
            rec[12] = a.region as u8;
            w.write_all(&rec)?;
        }
        w.flush()
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<AccessTrace> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() < MAGIC.len() || &bytes[..4] != MAGIC {
            return Err(Error::TraceFormat("missing MTR1 magic".into()));
        }
        let body = &bytes[4..];
        if body.len() % RECORD_BYTES != 0 {
            return Err(Error::TraceFormat(format!(
                "truncated record at byte offset {}",
                4 + body.len() / RECORD_BYTES * RECORD_BYTES
            )));
        }
        let mut trace = AccessTrace::new();
        for (i, rec) in body.chunks_exact(RECORD_BYTES).enumerate() {
            let address = u64::from_le_bytes(rec[..8].try_into().unwrap());
            let width = u32::from_le_bytes(rec[8..12].try_into().unwrap());
            let region = Region::from_tag(rec[12]).ok_or_else(|| {
                Error::TraceFormat(format!("record {i}: unknown region tag {}", rec[12]))
            })?;
            trace.push(Access { address, width, region });
        }
        Ok(trace)
    }
}

impl TraceSink for AccessTrace {
    #[inline]
    fn touch(&mut self, region: Region, byte_offset: u64, width: u32) {
        self.accesses.push(Access { address: region.base() + byte_offset, width, region });
    }
}
