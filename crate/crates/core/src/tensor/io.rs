//! Flat binary tensor layout: `rank: u32`, `dims: u32 * rank`, then
//! little-endian f64 values in row-major order. Values are always stored as
//! f64 regardless of the build's `Float`.

use std::io::{Read, Write};

use super::{Float, Tensor};
use crate::error::{Error, Result};

const MAX_RANK: u32 = 16;

impl Tensor {
    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(&(self.shape.len() as u32).to_le_bytes())?;
        for &d in &self.shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in &self.values {
            w.write_all(&(v as f64).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let rank = read_u32(r)?;
        if rank > MAX_RANK {
            return Err(Error::Checkpoint(format!("tensor rank {rank} too large")));
        }
        let mut shape = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            shape.push(read_u32(r)? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&n| n <= MAX_NUMEL)
            .ok_or_else(|| Error::Checkpoint(format!("tensor shape {shape:?} too large")))?;
        let mut bytes = vec![0u8; numel * 8];
        r.read_exact(&mut bytes)
            .map_err(|e| Error::Checkpoint(format!("truncated tensor data: {e}")))?;
        let values = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()) as Float)
            .collect();
        Tensor::new(shape, values)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + 4 * self.shape.len() + 8 * self.values.len());
        self.write_to(&mut out)
            .expect("writing to a Vec cannot fail");
        out
    }
}

/// Upper bound on elements accepted when reading, guarding corrupt headers.
const MAX_NUMEL: usize = 1 << 28;

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|e| Error::Checkpoint(format!("truncated header: {e}")))?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn layout_is_rank_dims_then_f64() {
        let t = Tensor::new(vec![1, 2], vec![1.5, -2.0]).unwrap();
        let b = t.to_bytes();
        assert_eq!(&b[0..4], &2u32.to_le_bytes());
        assert_eq!(&b[4..8], &1u32.to_le_bytes());
        assert_eq!(&b[8..12], &2u32.to_le_bytes());
        assert_eq!(&b[12..20], &1.5f64.to_le_bytes());
        assert_eq!(b.len(), 28);
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let b = Tensor::zeros(&[3]).to_bytes();
        assert!(Tensor::read_from(&mut &b[..b.len() - 1]).is_err());
    }

    proptest! {
        #[test]
        fn roundtrip(dims in proptest::collection::vec(1usize..4, 0..4), seed in any::<u64>()) {
            let numel: usize = dims.iter().product();
            let values: Vec<Float> = (0..numel).map(|i| ((i as u64 ^ seed) % 1000) as Float * 0.25 - 100.0).collect();
            let t = Tensor::new(dims, values).unwrap();
            let back = Tensor::read_from(&mut t.to_bytes().as_slice()).unwrap();
            prop_assert_eq!(back, t);
        }
    }
}
