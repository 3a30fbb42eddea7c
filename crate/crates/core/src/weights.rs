//! `LIFW` weight files.
//!
//! Layout, all integers little-endian: magic `LIFW`, version `u32`, tensor
//! count `u32`, then per tensor: name (`u16` length + UTF-8), dtype `u8`
//! (0 = f32, 1 = i8), rank `u8`, dims `u32 x rank`, a quantization block for
//! i8 tensors, and the row-major payload.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::quant::QuantParams;

pub const MAGIC: &[u8; 4] = b"LIFW";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum QuantBlock {
    PerTensor(QuantParams),
    PerChannel {
        axis: u8,
        scales: Vec<f32>,
        zero_points: Vec<i32>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    I8 { data: Vec<i8>, quant: QuantBlock },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub dims: Vec<u32>,
    pub data: TensorData,
}

impl Tensor {
    pub fn f32(name: impl Into<String>, dims: Vec<u32>, data: Vec<f32>) -> Self {
        Self {
            name: name.into(),
            dims,
            data: TensorData::F32(data),
        }
    }

    pub fn i8(name: impl Into<String>, dims: Vec<u32>, data: Vec<i8>, quant: QuantBlock) -> Self {
        Self {
            name: name.into(),
            dims,
            data: TensorData::I8 { data, quant },
        }
    }

    pub fn numel(&self) -> u64 {
        self.dims.iter().map(|&d| d as u64).product()
    }

    fn validate(&self) -> Result<()> {
        if self.name.len() > u16::MAX as usize {
            return Err(Error::tensor(self.name.chars().take(64).collect::<String>(), "name longer than 65535 bytes"));
        }
        if self.dims.len() > u8::MAX as usize {
            return Err(Error::tensor(&self.name, "rank above 255"));
        }
        let len = match &self.data {
            TensorData::F32(d) => d.len(),
            TensorData::I8 { data, quant } => {
                if let QuantBlock::PerChannel { axis, scales, zero_points } = quant {
                    let Some(&c) = self.dims.get(*axis as usize) else {
                        return Err(Error::tensor(&self.name, format!("channel axis {axis} out of rank")));
                    };
                    if scales.len() != c as usize || zero_points.len() != c as usize {
                        return Err(Error::tensor(&self.name, format!("{} scales for {c} channels", scales.len())));
                    }
                }
                data.len()
            }
        };
        if len as u64 != self.numel() {
            return Err(Error::tensor(&self.name, format!("{len} values for dims {:?}", self.dims)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightFile {
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format(format!(
                "truncated at byte {} reading {what} ({n} bytes needed, {} left)",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn i32(&mut self, what: &str) -> Result<i32> {
        Ok(i32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::Format("size overflow".into()))?, what)?;
        Ok(bytes.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect())
    }
}

impl WeightFile {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, tensor: Tensor) -> Result<()> {
        tensor.validate()?;
        if self.index.contains_key(&tensor.name) {
            return Err(Error::tensor(&tensor.name, "duplicate name"));
        }
        self.index.insert(tensor.name.clone(), self.tensors.len());
        self.tensors.push(tensor);
        Ok(())
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&k| &self.tensors[k])
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name).ok_or_else(|| Error::tensor(name, "missing"))
    }

    fn check_dims(t: &Tensor, dims: &[u32]) -> Result<()> {
        if t.dims != dims {
            return Err(Error::tensor(&t.name, format!("dims {:?}, expected {dims:?}", t.dims)));
        }
        Ok(())
    }

    /// f32 payload of `name`, which must have exactly `dims`.
    pub fn f32(&self, name: &str, dims: &[u32]) -> Result<&[f32]> {
        let t = self.require(name)?;
        Self::check_dims(t, dims)?;
        match &t.data {
            TensorData::F32(d) => Ok(d),
            TensorData::I8 { .. } => Err(Error::tensor(name, "expected f32, found i8")),
        }
    }

    /// i8 payload and quantization block of `name`.
    pub fn i8(&self, name: &str, dims: &[u32]) -> Result<(&[i8], &QuantBlock)> {
        let t = self.require(name)?;
        Self::check_dims(t, dims)?;
        match &t.data {
            TensorData::I8 { data, quant } => Ok((data, quant)),
            TensorData::F32(_) => Err(Error::tensor(name, "expected i8, found f32")),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(match t.data {
                TensorData::F32(_) => 0,
                TensorData::I8 { .. } => 1,
            });
            out.push(t.dims.len() as u8);
            for d in &t.dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            match &t.data {
                TensorData::F32(d) => {
                    for v in d {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                TensorData::I8 { data, quant } => {
                    match quant {
                        QuantBlock::PerTensor(qp) => {
                            out.push(0);
                            out.extend_from_slice(&qp.scale.to_le_bytes());
                            out.extend_from_slice(&qp.zero_point.to_le_bytes());
                        }
                        QuantBlock::PerChannel { axis, scales, zero_points } => {
                            out.push(1);
                            out.push(*axis);
                            out.extend_from_slice(&(scales.len() as u32).to_le_bytes());
                            for s in scales {
                                out.extend_from_slice(&s.to_le_bytes());
                            }
                            for z in zero_points {
                                out.extend_from_slice(&z.to_le_bytes());
                            }
                        }
                    }
                    out.extend(data.iter().map(|&v| v as u8));
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::Format("bad magic, not a LIFW file".into()));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let count = r.u32("tensor count")?;
        let mut file = WeightFile::new();
        for k in 0..count {
            let len = r.u16("name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|_| Error::Format(format!("tensor {k}: name is not UTF-8")))?
                .to_string();
            let dtype = r.u8("dtype")?;
            let rank = r.u8("rank")? as usize;
            let dims = (0..rank).map(|_| r.u32("dims")).collect::<Result<Vec<_>>>()?;
            let numel = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d as usize));
            let numel = numel.ok_or_else(|| Error::tensor(&name, "element count overflows"))?;
            let data = match dtype {
                0 => TensorData::F32(r.f32s(numel, "payload")?),
                1 => {
                    let quant = match r.u8("quant flag")? {
                        0 => {
                            let scale = r.f32("scale")?;
                            let zp = r.i32("zero point")?;
                            QuantBlock::PerTensor(QuantParams::new(scale, zp).map_err(|e| Error::tensor(&name, e.to_string()))?)
                        }
                        1 => {
                            let axis = r.u8("channel axis")?;
                            let c = r.u32("channel count")? as usize;
                            let scales = r.f32s(c, "scales")?;
                            let zero_points = (0..c).map(|_| r.i32("zero points")).collect::<Result<Vec<_>>>()?;
                            QuantBlock::PerChannel { axis, scales, zero_points }
                        }
                        f => return Err(Error::tensor(&name, format!("unknown quant flag {f}"))),
                    };
                    let data = r.take(numel, "payload")?.iter().map(|&b| b as i8).collect();
                    TensorData::I8 { data, quant }
                }
                d => return Err(Error::tensor(&name, format!("unknown dtype {d}"))),
            };
            file.push(Tensor { name, dims, data })?;
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes after last tensor", bytes.len() - r.pos)));
        }
        Ok(file)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> WeightFile {
        let mut f = WeightFile::new();
        f.push(Tensor::f32("a.weight", vec![2, 3], vec![0.5, -1.0, 2.0, 3.5, 0.0, -0.25])).unwrap();
        f.push(Tensor::i8(
            "b.weight",
            vec![1, 2],
            vec![-128, 127],
            QuantBlock::PerChannel { axis: 1, scales: vec![0.5, 0.25], zero_points: vec![0, 0] },
        ))
        .unwrap();
        f.push(Tensor::i8("b.act", vec![0], vec![], QuantBlock::PerTensor(QuantParams::new(0.1, -3).unwrap())))
            .unwrap();
        f
    }

    #[test]
    fn header_layout() {
        let mut f = WeightFile::new();
        f.push(Tensor::f32("w", vec![1], vec![1.0])).unwrap();
        let b = f.to_bytes();
        let mut want = b"LIFW".to_vec();
        want.extend_from_slice(&[1, 0, 0, 0, 1, 0, 0, 0, 1, 0, b'w', 0, 1, 1, 0, 0, 0]);
        want.extend_from_slice(&1.0f32.to_le_bytes());
        assert_eq!(b, want);
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let bytes = sample().to_bytes();
        let back = WeightFile::from_bytes(&bytes).unwrap();
        assert_eq!(back, sample());
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn rejects_truncation_and_trailing_bytes() {
        let bytes = sample().to_bytes();
        for cut in [3, 10, bytes.len() - 1] {
            assert!(matches!(WeightFile::from_bytes(&bytes[..cut]), Err(Error::Format(_))));
        }
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(WeightFile::from_bytes(&longer).is_err());
    }

    #[test]
    fn rejects_bad_header() {
        let mut bytes = sample().to_bytes();
        bytes[0] = b'X';
        assert!(WeightFile::from_bytes(&bytes).is_err());
        let mut bytes = sample().to_bytes();
        bytes[4] = 2;
        assert!(WeightFile::from_bytes(&bytes).is_err());
    }

    #[test]
    fn rejects_duplicates_and_bad_sizes() {
        let mut f = sample();
        assert!(f.push(Tensor::f32("a.weight", vec![1], vec![0.0])).is_err());
        assert!(f.push(Tensor::f32("c", vec![2, 2], vec![0.0; 3])).is_err());
        let bad = Tensor::i8("d", vec![2], vec![0, 0], QuantBlock::PerChannel { axis: 0, scales: vec![1.0], zero_points: vec![0] });
        assert!(f.push(bad).is_err());
    }

    #[test]
    fn typed_access() {
        let f = sample();
        assert_eq!(f.f32("a.weight", &[2, 3]).unwrap()[3], 3.5);
        let err = f.f32("a.weight", &[3, 2]).unwrap_err();
        assert!(err.to_string().contains("a.weight"));
        assert!(f.f32("b.weight", &[1, 2]).is_err());
        assert!(matches!(f.require("zzz"), Err(Error::Tensor { .. })));
    }
}
