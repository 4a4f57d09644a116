//! SWTN container: `b"SWTN"`, version byte, dtype byte, rank byte,
//! `rank` little-endian u32 dims, then the row-major little-endian payload.

use std::fs;
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"SWTN";
const VERSION: u8 = 1;
const DTYPE_F32_LE: u8 = 0;

pub fn swtn_bytes(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(7 + 4 * t.rank() + 4 * t.numel());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(DTYPE_F32_LE);
    out.push(t.rank() as u8);
    for &d in t.dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Decode an SWTN buffer. `origin` only labels errors.
pub fn swtn_from_bytes(bytes: &[u8], origin: &Path) -> Result<Tensor> {
    let bad = |reason: &str| Error::format(origin, reason);
    if bytes.len() < 7 || &bytes[..4] != MAGIC {
        return Err(bad("missing SWTN magic"));
    }
    if bytes[4] != VERSION {
        return Err(bad(&format!("unsupported version {}", bytes[4])));
    }
    if bytes[5] != DTYPE_F32_LE {
        return Err(bad(&format!("unsupported dtype code {}", bytes[5])));
    }
    let rank = bytes[6] as usize;
    let header = 7 + 4 * rank;
    if bytes.len() < header {
        return Err(bad("truncated dims"));
    }
    let dims: Vec<usize> = bytes[7..header]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let n: usize = dims.iter().product();
    if bytes.len() != header + 4 * n {
        return Err(bad(&format!(
            "payload holds {} bytes, dims {:?} need {}",
            bytes.len() - header,
            dims,
            4 * n
        )));
    }
    let data = bytes[header..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new(dims, data).map_err(|e| bad(&e.to_string()))
}

pub fn write_swtn(path: &Path, t: &Tensor) -> Result<()> {
    fs::write(path, swtn_bytes(t)).map_err(|e| Error::io(path, e))
}

pub fn read_swtn(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    swtn_from_bytes(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor::new(vec![2, 1], vec![1.0, -2.5]).unwrap();
        let b = swtn_bytes(&t);
        assert_eq!(&b[..4], b"SWTN");
        assert_eq!(b[4..7], [1, 0, 2]);
        assert_eq!(b[7..11], 2u32.to_le_bytes());
        assert_eq!(b[11..15], 1u32.to_le_bytes());
        assert_eq!(b[15..19], 1.0f32.to_le_bytes());
        assert_eq!(b.len(), 7 + 8 + 8);
    }

    #[test]
    fn rejects_corruption() {
        let t = Tensor::zeros(&[3]);
        let mut b = swtn_bytes(&t);
        let p = Path::new("mem");
        b.pop();
        assert!(swtn_from_bytes(&b, p).is_err());
        let mut b = swtn_bytes(&t);
        b[0] = b'X';
        assert!(swtn_from_bytes(&b, p).is_err());
        let mut b = swtn_bytes(&t);
        b[5] = 7;
        assert!(swtn_from_bytes(&b, p).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_bitwise(dims in prop::collection::vec(1usize..5, 1..4), seed in any::<u32>()) {
            let t = Tensor::from_fn(&dims, |i| f32::from_bits(seed.wrapping_mul(2654435761).wrapping_add(i as u32 * 97)) .clamp(-1e30, 1e30));
            let back = swtn_from_bytes(&swtn_bytes(&t), Path::new("mem")).unwrap();
            prop_assert!(back.bit_eq(&t));
        }
    }
}
