//! On-disk formats shared with the extractor sidecar.
//!
//! All binary formats are little-endian with a fixed header layout:
//!
//! ```text
//! tensor: "SVT1" | version u8 | dtype u8 | ndim u8 | pad u8 | dims u64 x ndim | payload
//! masks:  "SVM1" | version u8 | H u32 | W u32 | S u32 | per segment: runs u32, (start u32, len u32) x runs
//! ```

mod features;
mod manifest;
mod mask;
mod tensor;

pub use features::{read_features, write_features, FeatureMap};
pub use manifest::{load_manifest, save_manifest, DatasetManifest, ManifestEntry, Split};
pub use mask::{
    decode_masks, encode_masks, read_masks, write_masks, RleMask, SegmentMaskSet, MASK_MAGIC,
};
pub use tensor::{
    decode_tensor, encode_tensor, read_tensor, write_tensor, Dtype, TensorData, TensorFile,
    TENSOR_MAGIC,
};

pub(crate) const FORMAT_VERSION: u8 = 1;

use std::path::Path;

use crate::error::{Error, Result};

pub(crate) fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Cursor over a byte buffer that reports truncation instead of panicking.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Truncated {
                expected: self.pos.saturating_add(n),
                found: self.buf.len(),
            }),
        }
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn magic(&mut self, expected: [u8; 4]) -> Result<()> {
        let found: [u8; 4] = self.take(4)?.try_into().unwrap();
        if found != expected {
            return Err(Error::BadMagic { expected, found });
        }
        Ok(())
    }

    pub(crate) fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}
