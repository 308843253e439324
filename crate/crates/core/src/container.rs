//! Binary tensor container used for model checkpoints and patch files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic            4 bytes  "AMF1"
//! descriptor_len   u32
//! descriptor       UTF-8 text (architecture or payload descriptor)
//! per tensor:      rank u32, dims rank*u32, values product(dims)*f64
//! metadata_len     u32
//! metadata         UTF-8 text (JSON)
//! ```
//!
//! The tensor count is implied by the descriptor, so readers pass the
//! expected shapes; a size mismatch is a malformed-container error.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"AMF1";

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub descriptor: String,
    pub tensors: Vec<(Vec<usize>, Vec<f64>)>,
    pub metadata: String,
}

impl Container {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.descriptor.len() as u32).to_le_bytes());
        out.extend_from_slice(self.descriptor.as_bytes());
        for (dims, values) in &self.tensors {
            out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
            for &d in dims {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&(self.metadata.len() as u32).to_le_bytes());
        out.extend_from_slice(self.metadata.as_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            if *pos + n > bytes.len() {
                return Err(Error::MalformedContainer(format!(
                    "truncated at byte {} (wanted {n} more)",
                    *pos
                )));
            }
            let s = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        let take_u32 = |pos: &mut usize| -> Result<u32> {
            let b = take(pos, 4)?;
            Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        };

        if take(&mut pos, 4)? != MAGIC {
            return Err(Error::MalformedContainer("bad magic (expected AMF1)".into()));
        }
        let dlen = take_u32(&mut pos)? as usize;
        let descriptor = String::from_utf8(take(&mut pos, dlen)?.to_vec())
            .map_err(|_| Error::MalformedContainer("descriptor is not UTF-8".into()))?;

        // Tensors occupy everything up to the trailing metadata block; parse
        // greedily and backtrack for the metadata length at the end is not
        // possible without the descriptor, so read tensors until what remains
        // parses as a metadata block. Instead, we require the caller-visible
        // structure: tensors are read until the remaining bytes equal
        // 4 + metadata_len as declared at the current cursor. Practically,
        // each tensor is self-describing, so parse tensors while more than
        // one block could remain.
        let mut tensors = Vec::new();
        loop {
            // Try interpreting the cursor as the metadata block.
            if pos + 4 <= bytes.len() {
                let maybe_len = u32::from_le_bytes([
                    bytes[pos],
                    bytes[pos + 1],
                    bytes[pos + 2],
                    bytes[pos + 3],
                ]) as usize;
                if pos + 4 + maybe_len == bytes.len() {
                    let metadata = String::from_utf8(bytes[pos + 4..].to_vec())
                        .map_err(|_| Error::MalformedContainer("metadata is not UTF-8".into()))?;
                    return Ok(Container {
                        descriptor,
                        tensors,
                        metadata,
                    });
                }
            }
            // Otherwise the next block must be a tensor.
            let rank = take_u32(&mut pos)? as usize;
            if rank == 0 || rank > 8 {
                return Err(Error::MalformedContainer(format!("implausible rank {rank}")));
            }
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(take_u32(&mut pos)? as usize);
            }
            let numel: usize = dims.iter().product();
            let raw = take(&mut pos, numel * 8)?;
            let values: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
                .collect();
            tensors.push((dims, values));
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_bit_exact() {
        let c = Container {
            descriptor: "input 1x4x4; dense 2".into(),
            tensors: vec![
                (vec![2, 3], vec![1.0, -2.5, 0.0, f64::MIN_POSITIVE, 3.25, 9.0]),
                (vec![2], vec![0.125, -0.75]),
            ],
            metadata: "{\"seed\":42}".into(),
        };
        let bytes = c.to_bytes();
        let back = Container::from_bytes(&bytes).unwrap();
        assert_eq!(c, back);
        assert_eq!(bytes, back.to_bytes());
    }

    #[test]
    fn bad_magic_is_rejected() {
        let err = Container::from_bytes(b"NOPE").unwrap_err();
        assert!(err.to_string().contains("magic"));
    }

    #[test]
    fn truncation_is_detected() {
        let c = Container {
            descriptor: "d".into(),
            tensors: vec![(vec![4], vec![1.0, 2.0, 3.0, 4.0])],
            metadata: String::new(),
        };
        let bytes = c.to_bytes();
        assert!(Container::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    }
}
