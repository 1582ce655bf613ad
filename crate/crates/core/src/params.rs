//! Flat views over parameter sets, shared by the optimizers, the gradient
//! reports and the binary checkpoints.

use std::collections::BTreeMap;

use ndarray::{ArrayD, IxDyn};

use crate::error::{Error, Result};

/// A parameter set made of named, contiguous `f64` blocks in a fixed order.
pub trait ParamBlocks {
    /// `(name, shape, values)` for every block, in declaration order.
    fn blocks(&self) -> Vec<(String, Vec<usize>, &[f64])>;

    /// Mutable views in the same order as [`ParamBlocks::blocks`].
    fn blocks_mut(&mut self) -> Vec<&mut [f64]>;

    fn param_len(&self) -> usize {
        self.blocks().iter().map(|(_, _, v)| v.len()).sum()
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_len());
        for (_, _, v) in self.blocks() {
            out.extend_from_slice(v);
        }
        out
    }

    /// Overwrites every block from a flat vector produced by [`ParamBlocks::flatten`].
    fn load_flat(&mut self, flat: &[f64]) {
        let mut offset = 0;
        for block in self.blocks_mut() {
            let n = block.len();
            block.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        assert_eq!(offset, flat.len(), "flat parameter length mismatch");
    }

    fn named_arrays(&self) -> BTreeMap<String, ArrayD<f64>> {
        self.blocks()
            .into_iter()
            .map(|(name, shape, v)| {
                let arr = ArrayD::from_shape_vec(IxDyn(&shape), v.to_vec()).expect("block shape");
                (name, arr)
            })
            .collect()
    }

    fn l2_norm(&self) -> f64 {
        self.blocks()
            .iter()
            .flat_map(|(_, _, v)| v.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }
}

/// Cursor over a little-endian checkpoint buffer.
pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Parse {
                offset: self.bytes.len() as u64,
                msg: format!("truncated: need {n} bytes at offset {}", self.pos),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn expect_magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        let got = self.take(4)?;
        if got != magic {
            return Err(Error::Parse {
                offset: 0,
                msg: format!("bad magic {:?}, expected {:?}", got, std::str::from_utf8(magic).unwrap_or("?")),
            });
        }
        Ok(())
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(8 * n)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Parse {
                offset: self.pos as u64,
                msg: format!("{} trailing bytes", self.bytes.len() - self.pos),
            });
        }
        Ok(())
    }
}
