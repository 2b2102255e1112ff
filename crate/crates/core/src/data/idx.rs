//! The IDX container used by the MNIST distribution: a big-endian magic
//! number `0x0000 08 NN` (type byte `0x08` = unsigned byte, `NN` = number of
//! dimensions), `NN` big-endian `u32` sizes, then the payload.

use crate::error::{Error, Result};

pub const LABELS_MAGIC: u32 = 0x0000_0801;
pub const IMAGES_MAGIC: u32 = 0x0000_0803;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxFile {
    pub magic: u32,
    pub dims: Vec<u32>,
    pub payload: Vec<u8>,
}

impl IdxFile {
    pub fn count(&self) -> usize {
        self.dims.first().copied().unwrap_or(0) as usize
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + 4 * self.dims.len() + self.payload.len());
        out.extend_from_slice(&self.magic.to_be_bytes());
        for d in &self.dims {
            out.extend_from_slice(&d.to_be_bytes());
        }
        out.extend_from_slice(&self.payload);
        out
    }
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().expect("4-byte slice"))
}

pub fn parse_idx(bytes: &[u8]) -> Result<IdxFile> {
    if bytes.len() < 8 {
        return Err(Error::Truncated {
            expected: 8,
            actual: bytes.len(),
        });
    }
    let magic = read_u32(bytes, 0);
    let ndims = match magic {
        LABELS_MAGIC => 1,
        IMAGES_MAGIC => 3,
        other => return Err(Error::BadMagic(other)),
    };
    let header = 4 + 4 * ndims;
    if bytes.len() < header {
        return Err(Error::Truncated {
            expected: header,
            actual: bytes.len(),
        });
    }
    let dims: Vec<u32> = (0..ndims).map(|i| read_u32(bytes, 4 + 4 * i)).collect();
    let payload_len = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
        .ok_or_else(|| Error::Format("IDX dimensions overflow".into()))?;
    let expected = header + payload_len;
    if bytes.len() != expected {
        return Err(Error::Truncated {
            expected,
            actual: bytes.len(),
        });
    }
    Ok(IdxFile {
        magic,
        dims,
        payload: bytes[header..].to_vec(),
    })
}
