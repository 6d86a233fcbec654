//! Radix-2 decimation-in-time FFT.

use std::f64::consts::PI;

use num_complex::Complex64;

use crate::error::TensorError;
use crate::kernels;
use crate::tensor::Tensor;

/// `exp(-2*pi*i * numerator / denominator)` with the angle reduced exactly in
/// integer arithmetic first.
pub fn twiddle(numerator: u64, denominator: u64) -> Complex64 {
    let reduced = numerator % denominator;
    let angle = -2.0 * PI * (reduced as f64) / (denominator as f64);
    let (s, c) = angle.sin_cos();
    Complex64::new(c, s)
}

/// In-place forward transform of a power-of-two length buffer.
pub fn fft_in_place(data: &mut [Complex64]) -> Result<(), TensorError> {
    let n = data.len();
    if n == 0 || !n.is_power_of_two() {
        return Err(TensorError::NonPowerOfTwo(n));
    }
    if n == 1 {
        return Ok(());
    }
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = i.reverse_bits() >> (usize::BITS - bits);
        if j > i {
            data.swap(i, j);
        }
    }
    // Twiddles for the widest stage; narrower stages stride through it.
    let half = n / 2;
    let table: Vec<Complex64> = (0..half).map(|k| twiddle(k as u64, n as u64)).collect();
    let mut len = 2;
    while len <= n {
        let step = n / len;
        let h = len / 2;
        for block in data.chunks_exact_mut(len) {
            let (lo, hi) = block.split_at_mut(h);
            for (k, (a, b)) in lo.iter_mut().zip(hi.iter_mut()).enumerate() {
                let t = table[k * step] * *b;
                *b = *a - t;
                *a += t;
            }
        }
        len <<= 1;
    }
    Ok(())
}

/// Unnormalized forward DFT of a rank-1 complex tensor.
pub fn fft_local(x: &Tensor) -> Result<Tensor, TensorError> {
    let v = x.expect_c128("fft")?;
    if x.shape().rank() != 1 {
        return Err(TensorError::InvalidShape(format!("fft: expected a vector, got {}", x.shape())));
    }
    let mut data = v.to_vec();
    fft_in_place(&mut data)?;
    Ok(Tensor::vector_c128(data))
}

/// Inverse transform as conjugate, forward FFT, conjugate, scale by `1/n`.
pub fn fft_inverse(x: &Tensor) -> Result<Tensor, TensorError> {
    let n = x.num_elements();
    let y = fft_local(&kernels::conj(x))?;
    kernels::scale(1.0 / n as f64, &kernels::conj(&y))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::random::random_uniform;
    use crate::tensor::{DType, Shape};

    fn direct_dft(x: &[Complex64]) -> Vec<Complex64> {
        let n = x.len() as u64;
        (0..n)
            .map(|k| {
                let mut acc = Complex64::new(0.0, 0.0);
                for (j, &xj) in x.iter().enumerate() {
                    acc += xj * twiddle(j as u64 * k, n);
                }
                acc
            })
            .collect()
    }

    fn c(re: f64) -> Complex64 {
        Complex64::new(re, 0.0)
    }

    #[test]
    fn impulse_and_constant() {
        let mut delta = vec![c(0.0); 8];
        delta[0] = c(1.0);
        let y = fft_local(&Tensor::vector_c128(delta)).unwrap();
        assert!(y.as_c128().unwrap().iter().all(|v| (*v - c(1.0)).norm() < 1e-15));

        let y = fft_local(&Tensor::vector_c128(vec![c(1.0); 8])).unwrap();
        let y = y.as_c128().unwrap();
        assert!((y[0] - c(8.0)).norm() < 1e-12);
        assert!(y[1..].iter().all(|v| v.norm() < 1e-12));
    }

    #[test]
    fn matches_direct_dft() {
        let x = random_uniform(&Shape::vector(1024), DType::C128, 21);
        let expected = direct_dft(x.as_c128().unwrap());
        let got = fft_local(&x).unwrap();
        let err = got
            .as_c128()
            .unwrap()
            .iter()
            .zip(&expected)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max);
        assert!(err < 1e-9, "max abs error {err}");
    }

    #[test]
    fn rejects_non_power_of_two() {
        let x = Tensor::vector_c128(vec![c(0.0); 6]);
        assert_eq!(fft_local(&x).unwrap_err(), TensorError::NonPowerOfTwo(6));
        let x = Tensor::vector_c128(vec![]);
        assert_eq!(fft_local(&x).unwrap_err(), TensorError::NonPowerOfTwo(0));
    }

    #[test]
    fn inverse_round_trip_and_parseval() {
        for log_n in [0u32, 1, 5, 12, 16] {
            let n = 1usize << log_n;
            let x = random_uniform(&Shape::vector(n), DType::C128, 100 + log_n as u64);
            let y = fft_local(&x).unwrap();
            let back = fft_inverse(&y).unwrap();
            assert!(back.all_close(&x, 0.0, 1e-10));
            let ex: f64 = x.as_c128().unwrap().iter().map(|v| v.norm_sqr()).sum();
            let ey: f64 = y.as_c128().unwrap().iter().map(|v| v.norm_sqr()).sum();
            assert!((ey - n as f64 * ex).abs() <= 1e-9 * n as f64 * ex);
        }
    }
}
