//! Binary encodings shared by the graph format and the wire protocol.
//!
//! A tensor is encoded as `dtype u8, rank u8, dims u64 LE each` followed by
//! the raw little-endian row-major payload.

use std::io::{self, Read};

use crate::tensor::{DType, Shape, Tensor};

/// Error while decoding a byte buffer, with the offset where it happened.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("decode error at byte {offset}: {reason}")]
pub struct DecodeError {
    pub offset: usize,
    pub reason: String,
}

/// An encoded tensor whose payload is still in the source buffer.
#[derive(Debug)]
pub struct TensorView<'a> {
    pub dtype: DType,
    pub shape: Shape,
    pub data: &'a [u8],
}

/// Bounds-checked little-endian cursor.
pub struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8]) -> ByteReader<'a> {
        ByteReader { buf, pos: 0 }
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn is_empty(&self) -> bool {
        self.remaining() == 0
    }

    pub fn error(&self, reason: impl Into<String>) -> DecodeError {
        DecodeError { offset: self.pos, reason: reason.into() }
    }

    pub fn bytes(&mut self, n: usize) -> Result<&'a [u8], DecodeError> {
        if self.remaining() < n {
            return Err(self.error(format!("need {n} bytes, {} left", self.remaining())));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn u8(&mut self) -> Result<u8, DecodeError> {
        Ok(self.bytes(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16, DecodeError> {
        Ok(u16::from_le_bytes(self.bytes(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32, DecodeError> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64, DecodeError> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    pub fn i64(&mut self) -> Result<i64, DecodeError> {
        Ok(i64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64, DecodeError> {
        Ok(f64::from_bits(self.u64()?))
    }

    /// u16-length-prefixed UTF-8 string.
    pub fn str16(&mut self) -> Result<String, DecodeError> {
        let n = self.u16()? as usize;
        let b = self.bytes(n)?;
        String::from_utf8(b.to_vec()).map_err(|_| self.error("invalid utf-8"))
    }

    pub fn tensor(&mut self) -> Result<Tensor, DecodeError> {
        let start = self.pos;
        let v = self.tensor_view()?;
        Tensor::from_le_bytes(v.dtype, v.shape, v.data).map_err(|e| DecodeError { offset: start, reason: e.to_string() })
    }

    /// Tensor header plus a borrowed view of its payload bytes.
    pub fn tensor_view(&mut self) -> Result<TensorView<'a>, DecodeError> {
        let dtype = DType::from_tag(self.u8()?).map_err(|e| self.error(e.to_string()))?;
        let rank = self.u8()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(usize::try_from(self.u64()?).map_err(|_| self.error("dimension overflow"))?);
        }
        let shape = Shape::new(dims).map_err(|e| self.error(e.to_string()))?;
        let len = shape
            .num_elements()
            .checked_mul(dtype.size_of())
            .ok_or_else(|| self.error("payload overflow"))?;
        let data = self.bytes(len)?;
        Ok(TensorView { dtype, shape, data })
    }
}

pub fn put_u16(out: &mut Vec<u8>, v: u16) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub fn put_str16(out: &mut Vec<u8>, s: &str) {
    put_u16(out, s.len() as u16);
    out.extend_from_slice(s.as_bytes());
}

/// The `dtype, rank, dims` prefix of an encoded tensor.
pub fn tensor_header(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(2 + 8 * t.shape().rank());
    out.push(t.dtype().tag());
    out.push(t.shape().rank() as u8);
    for &d in t.shape().dims() {
        put_u64(&mut out, d as u64);
    }
    out
}

/// Encoded size of a tensor in bytes.
pub fn encoded_tensor_len(t: &Tensor) -> usize {
    2 + 8 * t.shape().rank() + t.byte_len()
}

pub fn put_tensor(out: &mut Vec<u8>, t: &Tensor) {
    out.extend_from_slice(&tensor_header(t));
    out.extend_from_slice(&t.le_bytes());
}

/// Read one encoded tensor from a stream, filling the element buffer
/// directly on little-endian targets.
pub fn read_tensor(r: &mut impl Read) -> io::Result<Tensor> {
    let invalid = |m: String| io::Error::new(io::ErrorKind::InvalidData, m);
    let mut head = [0u8; 2];
    r.read_exact(&mut head)?;
    let dtype = DType::from_tag(head[0]).map_err(|e| invalid(e.to_string()))?;
    let mut dims = Vec::with_capacity(head[1] as usize);
    for _ in 0..head[1] {
        let mut d = [0u8; 8];
        r.read_exact(&mut d)?;
        dims.push(usize::try_from(u64::from_le_bytes(d)).map_err(|_| invalid("dimension overflow".into()))?);
    }
    let shape = Shape::new(dims).map_err(|e| invalid(e.to_string()))?;
    #[cfg(target_endian = "little")]
    {
        let mut t = Tensor::zeros(dtype, shape);
        r.read_exact(t.le_bytes_mut().expect("fresh tensor"))?;
        Ok(t)
    }
    #[cfg(not(target_endian = "little"))]
    {
        let mut buf = vec![0u8; shape.num_elements() * dtype.size_of()];
        r.read_exact(&mut buf)?;
        Tensor::from_le_bytes(dtype, shape, &buf).map_err(|e| invalid(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::random::random_uniform;
    use proptest::prelude::*;

    #[test]
    fn scalar_tensor_layout() {
        let mut out = Vec::new();
        put_tensor(&mut out, &Tensor::scalar_f64(1.0));
        assert_eq!(out.len(), 2 + 8);
        assert_eq!(&out[..2], &[1, 0]);
        assert_eq!(&out[2..], &1.0f64.to_le_bytes());
    }

    #[test]
    fn truncated_tensor_reports_offset() {
        let mut out = Vec::new();
        put_tensor(&mut out, &Tensor::vector_f32(vec![1.0, 2.0]));
        out.pop();
        let err = ByteReader::new(&out).tensor().unwrap_err();
        assert_eq!(err.offset, 10);
    }

    proptest! {
        #[test]
        fn tensor_encoding_round_trips(rows in 0usize..6, cols in 0usize..6, tag in 0u8..3, seed in any::<u64>()) {
            let dtype = DType::from_tag(tag).unwrap();
            let t = random_uniform(&Shape::matrix(rows, cols), dtype, seed);
            let mut buf = Vec::new();
            put_tensor(&mut buf, &t);
            prop_assert_eq!(buf.len(), encoded_tensor_len(&t));
            let back = ByteReader::new(&buf).tensor().unwrap();
            prop_assert!(back.bit_identical(&t));
            let streamed = read_tensor(&mut buf.as_slice()).unwrap();
            prop_assert!(streamed.bit_identical(&t));
        }
    }
}
