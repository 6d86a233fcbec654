//! Local numerical kernels. Every kernel returns a fresh tensor and
//! accumulates sequentially left to right, so a single-process run is
//! bit-reproducible.

use num_complex::Complex64;

use crate::error::TensorError;
use crate::tensor::{Buffer, DType, Shape, Tensor};

fn same_layout(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(), TensorError> {
    if a.dtype() != b.dtype() {
        return Err(TensorError::DTypeMismatch { op, expected: a.dtype(), found: b.dtype() });
    }
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch { op, lhs: a.shape().clone(), rhs: b.shape().clone() });
    }
    Ok(())
}

fn zip_map(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f32_op: impl Fn(f32, f32) -> f32,
    f64_op: impl Fn(f64, f64) -> f64,
    c128_op: impl Fn(Complex64, Complex64) -> Complex64,
) -> Result<Tensor, TensorError> {
    same_layout(op, a, b)?;
    let shape = a.shape().clone();
    match (a.buffer(), b.buffer()) {
        (Buffer::F32(x), Buffer::F32(y)) => {
            Tensor::from_f32(shape, x.iter().zip(y.iter()).map(|(&p, &q)| f32_op(p, q)).collect())
        }
        (Buffer::F64(x), Buffer::F64(y)) => {
            Tensor::from_f64(shape, x.iter().zip(y.iter()).map(|(&p, &q)| f64_op(p, q)).collect())
        }
        (Buffer::C128(x), Buffer::C128(y)) => {
            Tensor::from_c128(shape, x.iter().zip(y.iter()).map(|(&p, &q)| c128_op(p, q)).collect())
        }
        _ => unreachable!("dtypes checked"),
    }
}

/// Element-wise sum.
pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    zip_map("add", a, b, |x, y| x + y, |x, y| x + y, |x, y| x + y)
}

/// Element-wise quotient.
pub fn div(a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    zip_map("div", a, b, |x, y| x / y, |x, y| x / y, |x, y| x / y)
}

trait Real: Copy + Default + std::ops::Add<Output = Self> + std::ops::Mul<Output = Self> {}
impl Real for f32 {}
impl Real for f64 {}

fn matmul_kernel<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::default(); m * n];
    // i-k-j order: every c[i][j] accumulates over k in ascending order.
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for (p, &a_ip) in a[i * k..(i + 1) * k].iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (cj, &bj) in c_row.iter_mut().zip(b_row) {
                *cj = *cj + a_ip * bj;
            }
        }
    }
    c
}

fn matrix_dims(op: &'static str, t: &Tensor) -> Result<(usize, usize), TensorError> {
    match t.shape().dims() {
        &[r, c] => Ok((r, c)),
        _ => Err(TensorError::InvalidShape(format!("{op}: expected a matrix, got {}", t.shape()))),
    }
}

/// Matrix product of `(m,k)` and `(k,n)` operands.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    let (m, k) = matrix_dims("matmul", a)?;
    let (k2, n) = matrix_dims("matmul", b)?;
    if a.dtype() != b.dtype() {
        return Err(TensorError::DTypeMismatch { op: "matmul", expected: a.dtype(), found: b.dtype() });
    }
    if k != k2 {
        return Err(TensorError::ShapeMismatch { op: "matmul", lhs: a.shape().clone(), rhs: b.shape().clone() });
    }
    let shape = Shape::matrix(m, n);
    match (a.buffer(), b.buffer()) {
        (Buffer::F32(x), Buffer::F32(y)) => Tensor::from_f32(shape, matmul_kernel(x, y, m, k, n)),
        (Buffer::F64(x), Buffer::F64(y)) => Tensor::from_f64(shape, matmul_kernel(x, y, m, k, n)),
        _ => Err(TensorError::UnsupportedDType { op: "matmul", dtype: a.dtype() }),
    }
}

fn vector_len(op: &'static str, t: &Tensor) -> Result<usize, TensorError> {
    match t.shape().dims() {
        &[n] => Ok(n),
        _ => Err(TensorError::InvalidShape(format!("{op}: expected a vector, got {}", t.shape()))),
    }
}

/// Inner product of two equal-length vectors, returned as a scalar.
pub fn dot(a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    vector_len("dot", a)?;
    same_layout("dot", a, b)?;
    match (a.buffer(), b.buffer()) {
        (Buffer::F64(x), Buffer::F64(y)) => {
            let mut acc = 0.0f64;
            for (&p, &q) in x.iter().zip(y.iter()) {
                acc += p * q;
            }
            Ok(Tensor::scalar_f64(acc))
        }
        (Buffer::F32(x), Buffer::F32(y)) => {
            let mut acc = 0.0f32;
            for (&p, &q) in x.iter().zip(y.iter()) {
                acc += p * q;
            }
            Ok(Tensor::scalar_f32(acc))
        }
        _ => Err(TensorError::UnsupportedDType { op: "dot", dtype: a.dtype() }),
    }
}

/// Matrix-vector product of `(m,n)` and `(n,)`.
pub fn matvec(a: &Tensor, x: &Tensor) -> Result<Tensor, TensorError> {
    let (m, n) = matrix_dims("matvec", a)?;
    let len = vector_len("matvec", x)?;
    if a.dtype() != x.dtype() {
        return Err(TensorError::DTypeMismatch { op: "matvec", expected: a.dtype(), found: x.dtype() });
    }
    if len != n {
        return Err(TensorError::ShapeMismatch { op: "matvec", lhs: a.shape().clone(), rhs: x.shape().clone() });
    }
    match (a.buffer(), x.buffer()) {
        (Buffer::F64(av), Buffer::F64(xv)) => {
            let out = av
                .chunks_exact(n.max(1))
                .take(m)
                .map(|row| {
                    let mut acc = 0.0f64;
                    for (&p, &q) in row.iter().zip(xv.iter()) {
                        acc += p * q;
                    }
                    acc
                })
                .collect::<Vec<_>>();
            Tensor::from_f64(Shape::vector(m), if n == 0 { vec![0.0; m] } else { out })
        }
        (Buffer::F32(av), Buffer::F32(xv)) => {
            let out = av
                .chunks_exact(n.max(1))
                .take(m)
                .map(|row| {
                    let mut acc = 0.0f32;
                    for (&p, &q) in row.iter().zip(xv.iter()) {
                        acc += p * q;
                    }
                    acc
                })
                .collect::<Vec<_>>();
            Tensor::from_f32(Shape::vector(m), if n == 0 { vec![0.0; m] } else { out })
        }
        _ => Err(TensorError::UnsupportedDType { op: "matvec", dtype: a.dtype() }),
    }
}

/// `alpha * x + y`.
pub fn axpy(alpha: f64, x: &Tensor, y: &Tensor) -> Result<Tensor, TensorError> {
    let a32 = alpha as f32;
    let ac = Complex64::new(alpha, 0.0);
    zip_map("axpy", x, y, move |p, q| a32 * p + q, move |p, q| alpha * p + q, move |p, q| ac * p + q)
}

/// `alpha * x`.
pub fn scale(alpha: f64, x: &Tensor) -> Result<Tensor, TensorError> {
    let shape = x.shape().clone();
    match x.buffer() {
        Buffer::F32(v) => {
            let a = alpha as f32;
            Tensor::from_f32(shape, v.iter().map(|&p| a * p).collect())
        }
        Buffer::F64(v) => Tensor::from_f64(shape, v.iter().map(|&p| alpha * p).collect()),
        Buffer::C128(v) => Tensor::from_c128(shape, v.iter().map(|&p| p * alpha).collect()),
    }
}

/// Contiguous sub-vector `x[offset..offset+len]`.
pub fn slice(x: &Tensor, offset: usize, len: usize) -> Result<Tensor, TensorError> {
    let n = vector_len("slice", x)?;
    if offset.checked_add(len).map_or(true, |end| end > n) {
        return Err(TensorError::InvalidShape(format!("slice [{offset}, +{len}) out of range for length {n}")));
    }
    Ok(match x.buffer() {
        Buffer::F32(v) => Tensor::vector_f32(v[offset..offset + len].to_vec()),
        Buffer::F64(v) => Tensor::vector_f64(v[offset..offset + len].to_vec()),
        Buffer::C128(v) => Tensor::vector_c128(v[offset..offset + len].to_vec()),
    })
}

/// Embed a vector at `offset` inside a zero vector of length `total`.
pub fn pad(x: &Tensor, offset: usize, total: usize) -> Result<Tensor, TensorError> {
    let n = vector_len("pad", x)?;
    if offset.checked_add(n).map_or(true, |end| end > total) {
        return Err(TensorError::InvalidShape(format!("pad: length {n} at {offset} exceeds {total}")));
    }
    Ok(match x.buffer() {
        Buffer::F32(v) => {
            let mut out = vec![0.0f32; total];
            out[offset..offset + n].copy_from_slice(v);
            Tensor::vector_f32(out)
        }
        Buffer::F64(v) => {
            let mut out = vec![0.0f64; total];
            out[offset..offset + n].copy_from_slice(v);
            Tensor::vector_f64(out)
        }
        Buffer::C128(v) => {
            let mut out = vec![Complex64::new(0.0, 0.0); total];
            out[offset..offset + n].copy_from_slice(v);
            Tensor::vector_c128(out)
        }
    })
}

/// Element-wise complex conjugate; real tensors are returned unchanged.
pub fn conj(x: &Tensor) -> Tensor {
    match x.buffer() {
        Buffer::C128(v) => {
            Tensor::from_c128(x.shape().clone(), v.iter().map(|c| c.conj()).collect()).expect("same shape")
        }
        _ => x.clone(),
    }
}

/// Convert a real tensor to another real dtype, or to complex.
pub fn cast(x: &Tensor, dtype: DType) -> Result<Tensor, TensorError> {
    let shape = x.shape().clone();
    let as_f64: Vec<f64> = match x.buffer() {
        Buffer::F32(v) => v.iter().map(|&p| p as f64).collect(),
        Buffer::F64(v) => v.to_vec(),
        Buffer::C128(_) if dtype == DType::C128 => return Ok(x.clone()),
        Buffer::C128(_) => return Err(TensorError::UnsupportedDType { op: "cast", dtype: DType::C128 }),
    };
    match dtype {
        DType::F32 => Tensor::from_f32(shape, as_f64.iter().map(|&p| p as f32).collect()),
        DType::F64 => Tensor::from_f64(shape, as_f64),
        DType::C128 => Tensor::from_c128(shape, as_f64.iter().map(|&p| Complex64::new(p, 0.0)).collect()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::random::random_uniform;

    fn naive_matmul(a: &[f32], b: &[f32], n: usize) -> Vec<f32> {
        let mut c = vec![0.0f32; n * n];
        for i in 0..n {
            for j in 0..n {
                let mut s = 0.0f32;
                for k in 0..n {
                    s += a[i * n + k] * b[k * n + j];
                }
                c[i * n + j] = s;
            }
        }
        c
    }

    fn mat(rows: usize, cols: usize, v: &[f32]) -> Tensor {
        Tensor::from_f32(Shape::matrix(rows, cols), v.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_zero() {
        let b = mat(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(matmul(&Tensor::identity_f32(2), &b).unwrap(), b);
        let z = Tensor::zeros(DType::F32, Shape::matrix(2, 2));
        assert_eq!(matmul(&b, &z).unwrap(), z);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let a = random_uniform(&Shape::matrix(8, 8), DType::F32, 11);
        let b = random_uniform(&Shape::matrix(8, 8), DType::F32, 12);
        let expected = naive_matmul(a.as_f32().unwrap(), b.as_f32().unwrap(), 8);
        let got = matmul(&a, &b).unwrap();
        assert!(got.all_close(&mat(8, 8, &expected), 1e-5, 0.0));
    }

    #[test]
    fn matmul_errors() {
        let a = mat(2, 3, &[0.0; 6]);
        assert!(matches!(matmul(&a, &a), Err(TensorError::ShapeMismatch { .. })));
        let d = Tensor::zeros(DType::F64, Shape::matrix(3, 2));
        assert!(matches!(matmul(&a, &d), Err(TensorError::DTypeMismatch { .. })));
    }

    #[test]
    fn add_cases() {
        let x = Tensor::vector_f32(vec![1.0, 2.0, 3.0]);
        assert_eq!(add(&x, &Tensor::vector_f32(vec![0.0; 3])).unwrap(), x);
        let one = Tensor::vector_f32(vec![1.0, 1.0]);
        assert_eq!(add(&one, &one).unwrap(), Tensor::vector_f32(vec![2.0, 2.0]));
        let mut acc = Tensor::zeros(DType::F32, Shape::vector(5));
        let ones = Tensor::ones(DType::F32, Shape::vector(5));
        for _ in 0..100 {
            acc = add(&acc, &ones).unwrap();
        }
        assert_eq!(acc, Tensor::filled(DType::F32, Shape::vector(5), 100.0));
        assert!(matches!(add(&x, &one), Err(TensorError::ShapeMismatch { .. })));
        let xd = Tensor::vector_f64(vec![1.0, 2.0, 3.0]);
        assert!(matches!(add(&x, &xd), Err(TensorError::DTypeMismatch { .. })));
    }

    #[test]
    fn dot_cases() {
        let mut e0 = vec![0.0; 4];
        e0[0] = 1.0;
        let mut e1 = vec![0.0; 4];
        e1[1] = 1.0;
        let d = dot(&Tensor::vector_f64(e0), &Tensor::vector_f64(e1)).unwrap();
        assert_eq!(d.scalar_value().unwrap(), 0.0);
        let ones = Tensor::ones(DType::F64, Shape::vector(4));
        assert_eq!(dot(&ones, &ones).unwrap().scalar_value().unwrap(), 4.0);

        let a = random_uniform(&Shape::vector(64), DType::F64, 3);
        let b = random_uniform(&Shape::vector(64), DType::F64, 4);
        let (av, bv) = (a.as_f64().unwrap(), b.as_f64().unwrap());
        let mut oracle = 0.0;
        for i in 0..64 {
            oracle += av[i] * bv[i];
        }
        let got = dot(&a, &b).unwrap().scalar_value().unwrap();
        assert!((got - oracle).abs() <= 1e-12 * oracle.abs());
        assert_eq!(
            dot(&a, &b).unwrap().scalar_value().unwrap().to_bits(),
            dot(&b, &a).unwrap().scalar_value().unwrap().to_bits()
        );
        assert!(dot(&a, &Tensor::vector_f64(vec![1.0; 3])).is_err());
    }

    #[test]
    fn blas_level_one_and_two() {
        let x = Tensor::vector_f64(vec![1.0, 2.0, 3.0]);
        assert_eq!(matvec(&Tensor::identity_f64(3), &x).unwrap(), x);
        let y = Tensor::vector_f64(vec![4.0, 5.0, 6.0]);
        assert_eq!(axpy(0.0, &x, &y).unwrap(), y);
        let diag = Tensor::from_f64(Shape::matrix(3, 3), vec![1.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 3.0]).unwrap();
        assert_eq!(matvec(&diag, &Tensor::vector_f64(vec![1.0; 3])).unwrap(), x);
        assert_eq!(scale(2.0, &x).unwrap(), Tensor::vector_f64(vec![2.0, 4.0, 6.0]));
        assert!(matvec(&diag, &Tensor::vector_f64(vec![1.0; 2])).is_err());
    }

    #[test]
    fn slice_and_pad() {
        let x = Tensor::vector_f64(vec![1.0, 2.0, 3.0, 4.0]);
        let s = slice(&x, 1, 2).unwrap();
        assert_eq!(s, Tensor::vector_f64(vec![2.0, 3.0]));
        assert_eq!(pad(&s, 1, 4).unwrap(), Tensor::vector_f64(vec![0.0, 2.0, 3.0, 0.0]));
        assert!(slice(&x, 3, 2).is_err());
        assert!(pad(&x, 1, 4).is_err());
    }
}
