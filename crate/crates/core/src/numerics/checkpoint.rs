//! `FPNN` network checkpoints.
//!
//! Layout (all little-endian): magic `FPNN`, version `u16`, layer count `u16`,
//! then per layer `rows u32`, `cols u32`, `rows * cols` f32 weights in
//! row-major order, then `cols` f32 biases.

use std::fs;
use std::path::Path;

use super::mlp::{Activation, Linear, Mlp};
use super::tensor::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"FPNN";
const VERSION: u16 = 1;

pub fn encode_mlp(net: &Mlp<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + net.param_count() * 4 + net.layers().len() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(net.layers().len() as u16).to_le_bytes());
    for layer in net.layers() {
        out.extend_from_slice(&(layer.in_dim() as u32).to_le_bytes());
        out.extend_from_slice(&(layer.out_dim() as u32).to_le_bytes());
        for v in layer.weight.data().iter().chain(layer.bias.data()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Format {
                kind: "FPNN",
                reason: format!("truncated at byte {}", self.pos),
            }
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::Format {
            kind: "FPNN",
            reason: "layer size overflows".into(),
        })?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn decode_mlp(bytes: &[u8]) -> Result<Mlp<f32>> {
    let bad = |reason: String| Error::Format {
        kind: "FPNN",
        reason,
    };
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(bad("bad magic".into()));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let count = r.u16()? as usize;
    let mut layers = Vec::with_capacity(count);
    for i in 0..count {
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        if rows == 0 || cols == 0 {
            return Err(bad(format!("layer {i} has a zero extent")));
        }
        let weight = Tensor::matrix(rows, cols, r.f32s(rows * cols)?)?;
        let bias = Tensor::vector(r.f32s(cols)?);
        layers.push(Linear { weight, bias });
    }
    if r.pos != bytes.len() {
        return Err(bad(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Mlp::from_layers(layers, Activation::Silu)
}

pub fn save_mlp(net: &Mlp<f32>, path: &Path) -> Result<()> {
    fs::write(path, encode_mlp(net)).map_err(|e| Error::io(path, e))
}

pub fn load_mlp(path: &Path) -> Result<Mlp<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_mlp(&bytes)
}
