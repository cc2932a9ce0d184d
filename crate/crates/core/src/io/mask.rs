use std::path::Path;

use super::{read_bytes, write_bytes, Reader, FORMAT_VERSION};
use crate::error::{Error, Result};

pub const MASK_MAGIC: [u8; 4] = *b"SVM1";

/// One binary segment mask as sorted, non-overlapping runs over row-major
/// pixel order. Each run is `(start, len)` with `len > 0`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RleMask {
    runs: Vec<(u32, u32)>,
}

impl RleMask {
    pub fn empty() -> Self {
        RleMask::default()
    }

    /// Validates runs against an image of `total` pixels.
    pub fn from_runs(runs: Vec<(u32, u32)>, total: u64) -> Result<Self> {
        let mut prev_end = 0u64;
        for (i, &(start, len)) in runs.iter().enumerate() {
            if len == 0 {
                return Err(Error::InvalidRle(format!("run {i} has zero length")));
            }
            let (start, end) = (u64::from(start), u64::from(start) + u64::from(len));
            if i > 0 && start < prev_end {
                return Err(Error::InvalidRle(format!(
                    "run {i} starting at {start} overlaps or precedes the previous run"
                )));
            }
            if end > total {
                return Err(Error::InvalidRle(format!(
                    "run {i} ends at {end}, beyond {total} pixels"
                )));
            }
            prev_end = end;
        }
        Ok(RleMask { runs })
    }

    /// Canonical (maximal-run) encoding of a pixel set. Indices may be
    /// unsorted or repeated.
    pub fn from_pixels(pixels: impl IntoIterator<Item = u32>) -> Self {
        let mut px: Vec<u32> = pixels.into_iter().collect();
        px.sort_unstable();
        px.dedup();
        let mut runs: Vec<(u32, u32)> = Vec::new();
        for p in px {
            match runs.last_mut() {
                Some((s, l)) if *s + *l == p => *l += 1,
                _ => runs.push((p, 1)),
            }
        }
        RleMask { runs }
    }

    pub fn from_bitmap(bits: &[bool]) -> Self {
        RleMask::from_pixels(
            bits.iter()
                .enumerate()
                .filter(|(_, &b)| b)
                .map(|(i, _)| i as u32),
        )
    }

    pub fn runs(&self) -> &[(u32, u32)] {
        &self.runs
    }

    pub fn area(&self) -> u64 {
        self.runs.iter().map(|&(_, l)| u64::from(l)).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.runs.is_empty()
    }

    /// Pixel indices in ascending order.
    pub fn pixels(&self) -> impl Iterator<Item = u32> + '_ {
        self.runs.iter().flat_map(|&(s, l)| s..s + l)
    }

    pub fn to_bitmap(&self, total: usize) -> Vec<bool> {
        let mut bits = vec![false; total];
        for p in self.pixels() {
            bits[p as usize] = true;
        }
        bits
    }
}

/// All segment masks of one image. Segments may overlap each other.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentMaskSet {
    pub height: u32,
    pub width: u32,
    pub segments: Vec<RleMask>,
}

impl SegmentMaskSet {
    pub fn new(height: u32, width: u32) -> Self {
        SegmentMaskSet {
            height,
            width,
            segments: Vec::new(),
        }
    }

    pub fn pixel_count(&self) -> u64 {
        u64::from(self.height) * u64::from(self.width)
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let total = self.pixel_count();
        for (i, seg) in self.segments.iter().enumerate() {
            RleMask::from_runs(seg.runs.clone(), total)
                .map_err(|e| Error::InvalidRle(format!("segment {i}: {e}")))?;
        }
        Ok(())
    }
}

pub fn encode_masks(set: &SegmentMaskSet) -> Result<Vec<u8>> {
    set.validate()?;
    let mut out = Vec::new();
    out.extend_from_slice(&MASK_MAGIC);
    out.push(FORMAT_VERSION);
    out.extend_from_slice(&set.height.to_le_bytes());
    out.extend_from_slice(&set.width.to_le_bytes());
    out.extend_from_slice(&(set.segments.len() as u32).to_le_bytes());
    for seg in &set.segments {
        out.extend_from_slice(&(seg.runs.len() as u32).to_le_bytes());
        for &(s, l) in &seg.runs {
            out.extend_from_slice(&s.to_le_bytes());
            out.extend_from_slice(&l.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_masks(bytes: &[u8]) -> Result<SegmentMaskSet> {
    let mut r = Reader::new(bytes);
    r.magic(MASK_MAGIC)?;
    let version = r.u8()?;
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let height = r.u32()?;
    let width = r.u32()?;
    let count = r.u32()?;
    let total = u64::from(height) * u64::from(width);
    let mut segments = Vec::new();
    for i in 0..count {
        let nruns = r.u32()? as usize;
        if nruns.saturating_mul(8) > r.remaining() {
            return Err(Error::Truncated {
                expected: nruns * 8,
                found: r.remaining(),
            });
        }
        let mut runs = Vec::with_capacity(nruns);
        for _ in 0..nruns {
            runs.push((r.u32()?, r.u32()?));
        }
        let mask = RleMask::from_runs(runs, total)
            .map_err(|e| Error::InvalidRle(format!("segment {i}: {e}")))?;
        segments.push(mask);
    }
    if r.remaining() != 0 {
        return Err(Error::Malformed(format!(
            "{} trailing bytes after mask data",
            r.remaining()
        )));
    }
    Ok(SegmentMaskSet {
        height,
        width,
        segments,
    })
}

pub fn write_masks(path: impl AsRef<Path>, set: &SegmentMaskSet) -> Result<()> {
    let bytes = encode_masks(set)?;
    write_bytes(path.as_ref(), &bytes)
}

pub fn read_masks(path: impl AsRef<Path>) -> Result<SegmentMaskSet> {
    decode_masks(&read_bytes(path.as_ref())?)
}
