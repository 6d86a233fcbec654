//! Dense tensor value type.
//!
//! A [`Tensor`] is an immutable, row-major, reference-counted buffer tagged
//! with a [`DType`] and a [`Shape`]. Cloning is cheap; the element buffer is
//! shared. Mutable state lives in the cluster runtime's variable store, never
//! here.

use std::borrow::Cow;
use std::fmt;
use std::sync::Arc;

use num_complex::Complex64;

use crate::error::TensorError;

/// Element type of a tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
    F64,
    C128,
}

impl DType {
    /// Width of one element in bytes.
    pub const fn size_of(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
            DType::C128 => 16,
        }
    }

    /// Stable one-byte tag used by every binary format in the workspace.
    pub const fn tag(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
            DType::C128 => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Result<DType, TensorError> {
        match tag {
            0 => Ok(DType::F32),
            1 => Ok(DType::F64),
            2 => Ok(DType::C128),
            other => Err(TensorError::UnknownDType(other)),
        }
    }

    pub const fn name(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
            DType::C128 => "c128",
        }
    }

    pub fn from_name(name: &str) -> Option<DType> {
        match name {
            "f32" => Some(DType::F32),
            "f64" => Some(DType::F64),
            "c128" => Some(DType::C128),
            _ => None,
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

const MAX_ELEMENTS: u128 = (1u128 << 63) - 1;

/// Ordered list of extents. The empty shape is a scalar with one element.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: impl Into<Vec<usize>>) -> Result<Shape, TensorError> {
        let dims = dims.into();
        let mut count: u128 = 1;
        for &d in &dims {
            count = count.saturating_mul(d as u128);
            if count > MAX_ELEMENTS {
                return Err(TensorError::InvalidShape(format!(
                    "element count of {dims:?} exceeds 2^63 - 1"
                )));
            }
        }
        Ok(Shape(dims))
    }

    pub fn scalar() -> Shape {
        Shape(Vec::new())
    }

    pub fn vector(len: usize) -> Shape {
        Shape(vec![len])
    }

    pub fn matrix(rows: usize, cols: usize) -> Shape {
        Shape(vec![rows, cols])
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn num_elements(&self) -> usize {
        self.0.iter().product()
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (i, d) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{d}")?;
        }
        write!(f, ")")
    }
}

/// Shared element storage.
#[derive(Clone, Debug)]
pub enum Buffer {
    F32(Arc<Vec<f32>>),
    F64(Arc<Vec<f64>>),
    C128(Arc<Vec<Complex64>>),
}

impl Buffer {
    fn len(&self) -> usize {
        match self {
            Buffer::F32(v) => v.len(),
            Buffer::F64(v) => v.len(),
            Buffer::C128(v) => v.len(),
        }
    }

    fn dtype(&self) -> DType {
        match self {
            Buffer::F32(_) => DType::F32,
            Buffer::F64(_) => DType::F64,
            Buffer::C128(_) => DType::C128,
        }
    }
}

/// Immutable n-dimensional array.
#[derive(Clone, Debug)]
pub struct Tensor {
    shape: Shape,
    buffer: Buffer,
}

impl Tensor {
    pub fn new(shape: Shape, buffer: Buffer) -> Result<Tensor, TensorError> {
        let expected = shape.num_elements();
        if buffer.len() != expected {
            return Err(TensorError::LengthMismatch {
                expected,
                found: buffer.len(),
            });
        }
        Ok(Tensor { shape, buffer })
    }

    pub fn from_f32(shape: Shape, data: Vec<f32>) -> Result<Tensor, TensorError> {
        Tensor::new(shape, Buffer::F32(Arc::new(data)))
    }

    pub fn from_f64(shape: Shape, data: Vec<f64>) -> Result<Tensor, TensorError> {
        Tensor::new(shape, Buffer::F64(Arc::new(data)))
    }

    pub fn from_c128(shape: Shape, data: Vec<Complex64>) -> Result<Tensor, TensorError> {
        Tensor::new(shape, Buffer::C128(Arc::new(data)))
    }

    pub fn vector_f32(data: Vec<f32>) -> Tensor {
        let shape = Shape::vector(data.len());
        Tensor { shape, buffer: Buffer::F32(Arc::new(data)) }
    }

    pub fn vector_f64(data: Vec<f64>) -> Tensor {
        let shape = Shape::vector(data.len());
        Tensor { shape, buffer: Buffer::F64(Arc::new(data)) }
    }

    pub fn vector_c128(data: Vec<Complex64>) -> Tensor {
        let shape = Shape::vector(data.len());
        Tensor { shape, buffer: Buffer::C128(Arc::new(data)) }
    }

    pub fn scalar_f32(v: f32) -> Tensor {
        Tensor { shape: Shape::scalar(), buffer: Buffer::F32(Arc::new(vec![v])) }
    }

    pub fn scalar_f64(v: f64) -> Tensor {
        Tensor { shape: Shape::scalar(), buffer: Buffer::F64(Arc::new(vec![v])) }
    }

    pub fn zeros(dtype: DType, shape: Shape) -> Tensor {
        Tensor::filled(dtype, shape, 0.0)
    }

    pub fn ones(dtype: DType, shape: Shape) -> Tensor {
        Tensor::filled(dtype, shape, 1.0)
    }

    /// Every element set to `value` (real part for complex tensors).
    pub fn filled(dtype: DType, shape: Shape, value: f64) -> Tensor {
        let n = shape.num_elements();
        let buffer = match dtype {
            DType::F32 => Buffer::F32(Arc::new(vec![value as f32; n])),
            DType::F64 => Buffer::F64(Arc::new(vec![value; n])),
            DType::C128 => Buffer::C128(Arc::new(vec![Complex64::new(value, 0.0); n])),
        };
        Tensor { shape, buffer }
    }

    pub fn identity_f32(n: usize) -> Tensor {
        let mut data = vec![0.0f32; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Tensor { shape: Shape::matrix(n, n), buffer: Buffer::F32(Arc::new(data)) }
    }

    pub fn identity_f64(n: usize) -> Tensor {
        let mut data = vec![0.0f64; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Tensor { shape: Shape::matrix(n, n), buffer: Buffer::F64(Arc::new(data)) }
    }

    /// Reinterpret with a new shape of the same element count.
    pub fn reshape(&self, shape: Shape) -> Result<Tensor, TensorError> {
        Tensor::new(shape, self.buffer.clone())
    }

    pub fn dtype(&self) -> DType {
        self.buffer.dtype()
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn buffer(&self) -> &Buffer {
        &self.buffer
    }

    pub fn num_elements(&self) -> usize {
        self.buffer.len()
    }

    pub fn byte_len(&self) -> usize {
        self.num_elements() * self.dtype().size_of()
    }

    pub fn as_f32(&self) -> Option<&[f32]> {
        match &self.buffer {
            Buffer::F32(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_f64(&self) -> Option<&[f64]> {
        match &self.buffer {
            Buffer::F64(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_c128(&self) -> Option<&[Complex64]> {
        match &self.buffer {
            Buffer::C128(v) => Some(v),
            _ => None,
        }
    }

    pub fn expect_f32(&self, op: &'static str) -> Result<&[f32], TensorError> {
        self.as_f32().ok_or(TensorError::DTypeMismatch {
            op,
            expected: DType::F32,
            found: self.dtype(),
        })
    }

    pub fn expect_f64(&self, op: &'static str) -> Result<&[f64], TensorError> {
        self.as_f64().ok_or(TensorError::DTypeMismatch {
            op,
            expected: DType::F64,
            found: self.dtype(),
        })
    }

    pub fn expect_c128(&self, op: &'static str) -> Result<&[Complex64], TensorError> {
        self.as_c128().ok_or(TensorError::DTypeMismatch {
            op,
            expected: DType::C128,
            found: self.dtype(),
        })
    }

    /// Value of a one-element real tensor, widened to f64.
    pub fn scalar_value(&self) -> Result<f64, TensorError> {
        if self.num_elements() != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "scalar_value",
                lhs: self.shape.clone(),
                rhs: Shape::scalar(),
            });
        }
        match &self.buffer {
            Buffer::F32(v) => Ok(v[0] as f64),
            Buffer::F64(v) => Ok(v[0]),
            Buffer::C128(_) => Err(TensorError::UnsupportedDType {
                op: "scalar_value",
                dtype: DType::C128,
            }),
        }
    }

    /// Raw little-endian row-major bytes. Borrowed on little-endian targets.
    pub fn le_bytes(&self) -> Cow<'_, [u8]> {
        #[cfg(target_endian = "little")]
        {
            match &self.buffer {
                Buffer::F32(v) => Cow::Borrowed(bytemuck::cast_slice(v.as_slice())),
                Buffer::F64(v) => Cow::Borrowed(bytemuck::cast_slice(v.as_slice())),
                Buffer::C128(v) => Cow::Borrowed(bytemuck::cast_slice(v.as_slice())),
            }
        }
        #[cfg(not(target_endian = "little"))]
        {
            let mut out = Vec::with_capacity(self.byte_len());
            match &self.buffer {
                Buffer::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                Buffer::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                Buffer::C128(v) => v.iter().for_each(|x| {
                    out.extend_from_slice(&x.re.to_le_bytes());
                    out.extend_from_slice(&x.im.to_le_bytes());
                }),
            }
            Cow::Owned(out)
        }
    }

    /// Inverse of [`Tensor::le_bytes`].
    pub fn from_le_bytes(dtype: DType, shape: Shape, bytes: &[u8]) -> Result<Tensor, TensorError> {
        let n = shape.num_elements();
        if bytes.len() != n * dtype.size_of() {
            return Err(TensorError::LengthMismatch {
                expected: n * dtype.size_of(),
                found: bytes.len(),
            });
        }
        let mut t = Tensor::zeros(dtype, shape);
        match &mut t.buffer {
            Buffer::F32(v) => fill_from_le(Arc::get_mut(v).expect("fresh"), bytes),
            Buffer::F64(v) => fill_from_le(Arc::get_mut(v).expect("fresh"), bytes),
            Buffer::C128(v) => fill_from_le(Arc::get_mut(v).expect("fresh"), bytes),
        }
        Ok(t)
    }

    /// `self += delta` where `delta` is the little-endian payload of a tensor
    /// with this dtype and shape. Copies the buffer first only if shared.
    pub fn add_le_bytes(&mut self, dtype: DType, shape: &Shape, bytes: &[u8]) -> Result<(), TensorError> {
        if dtype != self.dtype() {
            return Err(TensorError::DTypeMismatch { op: "add_le_bytes", expected: self.dtype(), found: dtype });
        }
        if *shape != self.shape {
            return Err(TensorError::ShapeMismatch { op: "add_le_bytes", lhs: self.shape.clone(), rhs: shape.clone() });
        }
        let expected = shape.num_elements();
        if bytes.len() != expected * dtype.size_of() {
            return Err(TensorError::LengthMismatch { expected, found: bytes.len() / dtype.size_of() });
        }
        match &mut self.buffer {
            Buffer::F32(v) => add_from_le(Arc::make_mut(v).as_mut_slice(), bytes),
            Buffer::F64(v) => add_from_le(Arc::make_mut(v).as_mut_slice(), bytes),
            Buffer::C128(v) => add_from_le(Arc::make_mut(v).as_mut_slice(), bytes),
        }
        Ok(())
    }

    /// Mutable little-endian byte view of a freshly allocated tensor, for
    /// readers that want to fill the buffer straight from a socket or file.
    /// Returns `None` if the buffer is shared.
    #[cfg(target_endian = "little")]
    pub fn le_bytes_mut(&mut self) -> Option<&mut [u8]> {
        match &mut self.buffer {
            Buffer::F32(v) => Arc::get_mut(v).map(|v| bytemuck::cast_slice_mut(v.as_mut_slice())),
            Buffer::F64(v) => Arc::get_mut(v).map(|v| bytemuck::cast_slice_mut(v.as_mut_slice())),
            Buffer::C128(v) => Arc::get_mut(v).map(|v| bytemuck::cast_slice_mut(v.as_mut_slice())),
        }
    }

    /// Bitwise equality of dtype, shape and every element.
    pub fn bit_identical(&self, other: &Tensor) -> bool {
        self.dtype() == other.dtype() && self.shape == other.shape && self.le_bytes() == other.le_bytes()
    }

    /// Element-wise `|a - b| <= rtol * |b| + atol` on real tensors, or on the
    /// modulus of the difference for complex tensors.
    pub fn all_close(&self, reference: &Tensor, rtol: f64, atol: f64) -> bool {
        if self.dtype() != reference.dtype() || self.shape != reference.shape {
            return false;
        }
        match (&self.buffer, &reference.buffer) {
            (Buffer::F32(a), Buffer::F32(b)) => a
                .iter()
                .zip(b.iter())
                .all(|(&x, &y)| ((x as f64) - (y as f64)).abs() <= rtol * (y as f64).abs() + atol),
            (Buffer::F64(a), Buffer::F64(b)) => {
                a.iter().zip(b.iter()).all(|(&x, &y)| (x - y).abs() <= rtol * y.abs() + atol)
            }
            (Buffer::C128(a), Buffer::C128(b)) => {
                a.iter().zip(b.iter()).all(|(x, y)| (x - y).norm() <= rtol * y.norm() + atol)
            }
            _ => false,
        }
    }

    /// Take the buffer back out, cloning only if it is shared.
    pub fn into_buffer(self) -> Buffer {
        self.buffer
    }
}

/// Little-endian element conversion used by [`Tensor::from_le_bytes`].
trait LeElement: Sized {
    const WIDTH: usize;
    fn read(bytes: &[u8]) -> Self;
}

impl LeElement for f32 {
    const WIDTH: usize = 4;
    fn read(b: &[u8]) -> f32 {
        f32::from_le_bytes(b.try_into().expect("width"))
    }
}

impl LeElement for f64 {
    const WIDTH: usize = 8;
    fn read(b: &[u8]) -> f64 {
        f64::from_le_bytes(b.try_into().expect("width"))
    }
}

impl LeElement for Complex64 {
    const WIDTH: usize = 16;
    fn read(b: &[u8]) -> Complex64 {
        Complex64::new(f64::read(&b[..8]), f64::read(&b[8..]))
    }
}

fn add_from_le<T: LeElement + std::ops::AddAssign>(dst: &mut [T], bytes: &[u8]) {
    for (d, chunk) in dst.iter_mut().zip(bytes.chunks_exact(T::WIDTH)) {
        *d += T::read(chunk);
    }
}

fn fill_from_le<T: LeElement>(dst: &mut [T], bytes: &[u8]) {
    for (d, chunk) in dst.iter_mut().zip(bytes.chunks_exact(T::WIDTH)) {
        *d = T::read(chunk);
    }
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Tensor) -> bool {
        if self.dtype() != other.dtype() || self.shape != other.shape {
            return false;
        }
        match (&self.buffer, &other.buffer) {
            (Buffer::F32(a), Buffer::F32(b)) => a == b,
            (Buffer::F64(a), Buffer::F64(b)) => a == b,
            (Buffer::C128(a), Buffer::C128(b)) => a == b,
            _ => false,
        }
    }
}
