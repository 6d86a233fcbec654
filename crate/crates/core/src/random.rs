//! Counter-based uniform generator.
//!
//! Element `i` of a tensor generated with seed `s` depends only on `(s, i)`:
//! the ChaCha keystream for `s` is seeked to a word offset derived from `i`.
//! Any sub-block of a large random matrix can therefore be generated on its
//! own and matches the corresponding block of the whole.

use num_complex::Complex64;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{DType, Shape, Tensor};

fn words_per_element(dtype: DType) -> u128 {
    match dtype {
        DType::F32 => 1,
        DType::F64 => 2,
        DType::C128 => 4,
    }
}

#[inline]
fn unit_f32(word: u32) -> f32 {
    (word >> 8) as f32 * (1.0 / (1u32 << 24) as f32)
}

#[inline]
fn unit_f64(word: u64) -> f64 {
    (word >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Sequential run of generator output starting at element `start`.
struct Stream {
    rng: ChaCha8Rng,
}

impl Stream {
    fn at(seed: u64, dtype: DType, start: u64) -> Stream {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_word_pos(start as u128 * words_per_element(dtype));
        Stream { rng }
    }

    fn f32(&mut self) -> f32 {
        unit_f32(self.rng.next_u32())
    }

    fn f64(&mut self) -> f64 {
        unit_f64(self.rng.next_u64())
    }
}

/// Tensor of values uniform in `[0, 1)`; complex tensors draw both parts.
pub fn random_uniform(shape: &Shape, dtype: DType, seed: u64) -> Tensor {
    let n = shape.num_elements();
    let cols = n.max(1);
    random_block(shape.clone(), dtype, seed, cols, 0, 0, 1, n)
}

/// `rows x cols` block of the row-major `? x row_len` random matrix for
/// `seed`, starting at `(row0, col0)`. The block has the given `shape`
/// (whose element count must equal `rows * cols`).
#[allow(clippy::too_many_arguments)]
pub fn random_block(
    shape: Shape,
    dtype: DType,
    seed: u64,
    row_len: usize,
    row0: usize,
    col0: usize,
    rows: usize,
    cols: usize,
) -> Tensor {
    assert_eq!(shape.num_elements(), rows * cols, "block shape disagrees with extent");
    let mut out_f32 = Vec::new();
    let mut out_f64 = Vec::new();
    let mut out_c = Vec::new();
    match dtype {
        DType::F32 => out_f32.reserve(rows * cols),
        DType::F64 => out_f64.reserve(rows * cols),
        DType::C128 => out_c.reserve(rows * cols),
    }
    for r in 0..rows {
        if cols == 0 {
            break;
        }
        let start = ((row0 + r) * row_len + col0) as u64;
        let mut s = Stream::at(seed, dtype, start);
        for _ in 0..cols {
            match dtype {
                DType::F32 => out_f32.push(s.f32()),
                DType::F64 => out_f64.push(s.f64()),
                DType::C128 => {
                    let re = s.f64();
                    let im = s.f64();
                    out_c.push(Complex64::new(re, im));
                }
            }
        }
    }
    match dtype {
        DType::F32 => Tensor::from_f32(shape, out_f32),
        DType::F64 => Tensor::from_f64(shape, out_f64),
        DType::C128 => Tensor::from_c128(shape, out_c),
    }
    .expect("length matches shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_shape_gives_empty_tensor() {
        let t = random_uniform(&Shape::vector(0), DType::F32, 1);
        assert_eq!(t.num_elements(), 0);
    }

    #[test]
    fn deterministic_per_seed() {
        for dtype in [DType::F32, DType::F64, DType::C128] {
            let a = random_uniform(&Shape::matrix(4, 5), dtype, 77);
            let b = random_uniform(&Shape::matrix(4, 5), dtype, 77);
            assert!(a.bit_identical(&b));
            let c = random_uniform(&Shape::matrix(4, 5), dtype, 78);
            assert!(!a.bit_identical(&c));
        }
    }

    #[test]
    fn values_in_unit_interval() {
        let t = random_uniform(&Shape::vector(4096), DType::F32, 5);
        assert!(t.as_f32().unwrap().iter().all(|&v| (0.0..1.0).contains(&v)));
        let t = random_uniform(&Shape::vector(4096), DType::F64, 5);
        assert!(t.as_f64().unwrap().iter().all(|&v| (0.0..1.0).contains(&v)));
    }

    #[test]
    fn block_matches_whole() {
        let whole = random_uniform(&Shape::matrix(6, 6), DType::F64, 9);
        let block = random_block(Shape::matrix(2, 3), DType::F64, 9, 6, 2, 3, 2, 3);
        let w = whole.as_f64().unwrap();
        let b = block.as_f64().unwrap();
        for r in 0..2 {
            for c in 0..3 {
                assert_eq!(b[r * 3 + c].to_bits(), w[(2 + r) * 6 + 3 + c].to_bits());
            }
        }
    }
}
