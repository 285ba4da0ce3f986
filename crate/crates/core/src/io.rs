//! Little-endian binary format for [`BlockMatrix`] checkpoints.
//!
//! ```text
//! "BLKM" | version u32 | d u32 | w_max u32 | n_clusters u32
//! n_clusters × (weight u32, size u32)
//! n_blocks u32
//! n_blocks × (a u32, b u32, rows u32, cols u32, rows·cols × (re f64, im f64))
//! ```
//! Block entries are column-major.

use crate::basis::ClusterLayout;
use crate::blockmat::{Block, BlockError, BlockMatrix, C64};
use std::collections::BTreeMap;
use std::sync::Arc;

const MAGIC: &[u8; 4] = b"BLKM";
const VERSION: u32 = 1;

pub(crate) fn block_matrix_to_bytes(m: &BlockMatrix) -> Vec<u8> {
    let l = m.layout();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    for v in [VERSION, l.d as u32, l.w_max, l.n_clusters() as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for c in 0..l.n_clusters() {
        out.extend_from_slice(&l.weights[c].to_le_bytes());
        out.extend_from_slice(&(l.sizes[c] as u32).to_le_bytes());
    }
    out.extend_from_slice(&(m.n_blocks() as u32).to_le_bytes());
    for (&(a, b), blk) in m.blocks() {
        for v in [a as u32, b as u32, blk.nrows() as u32, blk.ncols() as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for z in blk.iter() {
            out.extend_from_slice(&z.re.to_le_bytes());
            out.extend_from_slice(&z.im.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], BlockError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| BlockError::Malformed("unexpected end of data".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, BlockError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, BlockError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub(crate) fn block_matrix_from_bytes(bytes: &[u8]) -> Result<BlockMatrix, BlockError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(BlockError::Malformed("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(BlockError::Malformed(format!("unsupported version {version}")));
    }
    let d = r.u32()? as usize;
    let w_max = r.u32()?;
    let nc = r.u32()? as usize;
    let mut weights = Vec::with_capacity(nc.min(1 << 16));
    let mut sizes = Vec::with_capacity(nc.min(1 << 16));
    for _ in 0..nc {
        weights.push(r.u32()?);
        sizes.push(r.u32()? as usize);
    }
    let mut layout = ClusterLayout::from_sizes(d, weights, sizes);
    layout.w_max = w_max;
    let nb = r.u32()? as usize;
    let mut blocks = BTreeMap::new();
    for _ in 0..nb {
        let a = r.u32()? as usize;
        let b = r.u32()? as usize;
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        if a >= nc || b >= nc || rows != layout.sizes[a] || cols != layout.sizes[b] {
            return Err(BlockError::Malformed(format!("block ({a}, {b}) inconsistent with layout")));
        }
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            let re = r.f64()?;
            let im = r.f64()?;
            data.push(C64::new(re, im));
        }
        blocks.insert((a, b), Block::from_vec(rows, cols, data));
    }
    if r.pos != bytes.len() {
        return Err(BlockError::Malformed("trailing bytes".into()));
    }
    Ok(BlockMatrix::from_parts(Arc::new(layout), blocks))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::enumerate_modes;

    #[test]
    fn binary_round_trip_is_bit_exact() {
        let l = Arc::new(enumerate_modes(2, 8).unwrap().layout());
        let mut m = BlockMatrix::zeros(l.clone());
        m.insert(1, 2, Block::from_fn(2, 3, |i, j| C64::new(i as f64 + 0.1, -(j as f64) / 3.0)));
        m.insert(3, 3, Block::identity(4, 4) * C64::new(1e-300, f64::MIN_POSITIVE));
        let bytes = m.to_bytes();
        assert_eq!(&bytes[..4], b"BLKM");
        let back = BlockMatrix::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_dense(), m.to_dense());
        assert_eq!(**back.layout(), *l);
    }

    #[test]
    fn truncated_or_corrupt_data_is_rejected() {
        let l = Arc::new(enumerate_modes(1, 5).unwrap().layout());
        let bytes = BlockMatrix::identity(l).to_bytes();
        assert!(BlockMatrix::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(BlockMatrix::from_bytes(&bad).is_err());
    }
}
