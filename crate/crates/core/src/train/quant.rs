//! Symmetric blockwise absmax 4-bit quantization.
//!
//! Each block of [`BLOCK_SIZE`] values stores one scale `absmax / 7` and
//! codes in `[-7, 7]`, packed two per byte.

use serde::{Deserialize, Serialize};

pub const BLOCK_SIZE: usize = 64;
const MAX_CODE: f64 = 7.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedTensor {
    /// Two codes per byte, each stored as `code + 8` in a nibble; low nibble first.
    packed: Vec<u8>,
    scales: Vec<f64>,
    shape: Vec<usize>,
    len: usize,
}

impl QuantizedTensor {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    pub fn code(&self, i: usize) -> i8 {
        let byte = self.packed[i / 2];
        let nibble = if i % 2 == 0 { byte & 0x0f } else { byte >> 4 };
        nibble as i8 - 8
    }

    /// Storage used by codes and scales, in bytes.
    pub fn storage_bytes(&self) -> usize {
        self.packed.len() + self.scales.len() * std::mem::size_of::<f64>()
    }
}

/// Quantizes a row-major buffer of the given shape. Inputs must be finite.
pub fn quantize_blockwise(values: &[f64], shape: &[usize]) -> QuantizedTensor {
    debug_assert_eq!(shape.iter().product::<usize>(), values.len());
    debug_assert!(values.iter().all(|v| v.is_finite()));
    let mut packed = vec![0u8; values.len().div_ceil(2)];
    let mut scales = Vec::with_capacity(values.len().div_ceil(BLOCK_SIZE));
    for (b, block) in values.chunks(BLOCK_SIZE).enumerate() {
        let absmax = block.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let scale = absmax / MAX_CODE;
        scales.push(scale);
        for (k, v) in block.iter().enumerate() {
            let code = if scale > 0.0 {
                (v / scale).round().clamp(-MAX_CODE, MAX_CODE) as i8
            } else {
                0
            };
            let i = b * BLOCK_SIZE + k;
            let nibble = (code + 8) as u8;
            packed[i / 2] |= if i % 2 == 0 { nibble } else { nibble << 4 };
        }
    }
    QuantizedTensor {
        packed,
        scales,
        shape: shape.to_vec(),
        len: values.len(),
    }
}

pub fn dequantize_blockwise(q: &QuantizedTensor) -> Vec<f64> {
    (0..q.len)
        .map(|i| f64::from(q.code(i)) * q.scales[i / BLOCK_SIZE])
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zeros_round_trip() {
        let x = vec![0.0; 130];
        let q = quantize_blockwise(&x, &[130]);
        assert_eq!(dequantize_blockwise(&q), x);
        assert_eq!(q.scales().len(), 3);
    }

    #[test]
    fn grid_points_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            // Scales with a short mantissa keep 7·s and k·s exact.
            let s = f64::from(rng.gen_range(1u32..1000)) / 1024.0;
            let mut x: Vec<f64> = (0..BLOCK_SIZE)
                .map(|_| f64::from(rng.gen_range(-7i32..=7)) * s)
                .collect();
            x[0] = 7.0 * s;
            let q = quantize_blockwise(&x, &[8, 8]);
            assert_eq!(dequantize_blockwise(&q), x);
        }
    }

    #[test]
    fn error_bound_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x: Vec<f64> = (0..BLOCK_SIZE * 20 + 5)
            .map(|_| rng.gen_range(-3.0..3.0))
            .collect();
        let q = quantize_blockwise(&x, &[x.len()]);
        let d = dequantize_blockwise(&q);
        for (b, (xs, ds)) in x.chunks(BLOCK_SIZE).zip(d.chunks(BLOCK_SIZE)).enumerate() {
            let absmax = xs.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            for (a, c) in xs.iter().zip(ds) {
                assert!((a - c).abs() <= absmax / 14.0 + 1e-7, "block {b}");
            }
        }
        for i in 0..x.len() {
            assert!((-7..=7).contains(&q.code(i)));
        }
    }

    #[test]
    fn packs_two_codes_per_byte() {
        let x: Vec<f64> = (0..128).map(|i| i as f64).collect();
        let q = quantize_blockwise(&x, &[128]);
        assert_eq!(q.storage_bytes(), 64 + 2 * 8);
    }
}
