//! Per-token quantization of cached latents behind a randomized Hadamard
//! transform.
//!
//! A latent `v` of length `r` is zero-padded to `r̂ = r.next_power_of_two()`,
//! multiplied by a seeded diagonal of random signs `D`, and rotated by the
//! orthonormal Walsh-Hadamard matrix `H`. The rotated vector `y = H·D·v` is
//! quantized asymmetrically with one scale and one integer zero point:
//!
//! ```text
//! scale = (max y − min y) / (2^bits − 1)
//! zp    = round(−min y / scale)
//! q     = clamp(round(y / scale) + zp, 0, 2^bits − 1)
//! y'    = (q − zp) · scale
//! ```
//!
//! Dequantization computes `D·H·y'` and drops the padding. Every element of
//! `y'` is within `scale / 2` of `y`.
//!
//! A vector whose entries are all equal is stored as a sentinel with
//! `scale = 0` and the constant kept verbatim, so it round-trips exactly.

use rand::Rng;

use crate::error::{Error, Result};
use crate::synth::rng;

/// Bit widths supported by [`quantize_token`].
pub const SUPPORTED_BITS: [u8; 2] = [3, 4];

/// Nominal per-token metadata in the cache accounting: a 16-bit scale and a
/// 16-bit zero point.
pub const TOKEN_OVERHEAD_BYTES: usize = 4;

/// Size of the fixed header written by [`QuantizedLatent::to_bytes`].
pub const HEADER_BYTES: usize = 32;

const FLAG_CONSTANT: u8 = 1;

/// Orthonormal Walsh-Hadamard transform (Sylvester ordering).
pub fn hadamard(v: &[f64]) -> Result<Vec<f64>> {
    let mut out = v.to_vec();
    hadamard_in_place(&mut out)?;
    Ok(out)
}

pub fn hadamard_in_place(v: &mut [f64]) -> Result<()> {
    let n = v.len();
    if n == 0 || !n.is_power_of_two() {
        return Err(Error::invalid(format!("hadamard length {n} is not a power of two")));
    }
    let mut h = 1;
    while h < n {
        for start in (0..n).step_by(2 * h) {
            for i in start..start + h {
                let (a, b) = (v[i], v[i + h]);
                v[i] = a + b;
                v[i + h] = a - b;
            }
        }
        h *= 2;
    }
    let norm = 1.0 / (n as f64).sqrt();
    for x in v.iter_mut() {
        *x *= norm;
    }
    Ok(())
}

/// Padded length used for a latent of width `r`.
pub fn padded_len(r: usize) -> usize {
    r.max(1).next_power_of_two()
}

/// The `±1` diagonal drawn from `seed`.
pub fn random_signs(n: usize, seed: u64) -> Vec<f64> {
    let mut r = rng(seed);
    (0..n).map(|_| if r.random::<bool>() { 1.0 } else { -1.0 }).collect()
}

/// `H·D·pad(v)`.
pub fn forward_transform(v: &[f64], seed: u64) -> Vec<f64> {
    let n = padded_len(v.len());
    let signs = random_signs(n, seed);
    let mut y: Vec<f64> = (0..n).map(|i| v.get(i).copied().unwrap_or(0.0) * signs[i]).collect();
    hadamard_in_place(&mut y).expect("padded length is a power of two");
    y
}

/// `D·H·y`, truncated to `r` entries.
pub fn inverse_transform(y: &[f64], r: usize, seed: u64) -> Vec<f64> {
    let signs = random_signs(y.len(), seed);
    let mut v = y.to_vec();
    hadamard_in_place(&mut v).expect("padded length is a power of two");
    v.iter().zip(&signs).take(r).map(|(x, s)| x * s).collect()
}

/// One quantized latent vector.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedLatent {
    bits: u8,
    rank: usize,
    seed: u64,
    scale: f64,
    zero_point: i32,
    constant: f64,
    packed: Vec<u8>,
}

fn check_bits(bits: u8) -> Result<()> {
    if SUPPORTED_BITS.contains(&bits) {
        Ok(())
    } else {
        Err(Error::invalid(format!("unsupported bit width {bits}; use 3 or 4")))
    }
}

/// Quantize one latent vector.
pub fn quantize_token(v: &[f64], bits: u8, seed: u64) -> Result<QuantizedLatent> {
    check_bits(bits)?;
    if v.is_empty() {
        return Err(Error::invalid("cannot quantize an empty vector"));
    }
    if v.len() > u16::MAX as usize {
        return Err(Error::invalid(format!("latent width {} exceeds {}", v.len(), u16::MAX)));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("latent vector".into()));
    }
    let n = padded_len(v.len());
    if v.iter().all(|&x| x == v[0]) {
        return Ok(QuantizedLatent {
            bits,
            rank: v.len(),
            seed,
            scale: 0.0,
            zero_point: 0,
            constant: v[0],
            packed: pack_codes(&vec![0; n], bits),
        });
    }
    let y = forward_transform(v, seed);
    let (scale, zero_point) = affine_params(&y, bits);
    let max_code = (1u32 << bits) - 1;
    let codes: Vec<u32> = y
        .iter()
        .map(|&x| ((x / scale).round() + zero_point as f64).clamp(0.0, max_code as f64) as u32)
        .collect();
    Ok(QuantizedLatent {
        bits,
        rank: v.len(),
        seed,
        scale,
        zero_point,
        constant: 0.0,
        packed: pack_codes(&codes, bits),
    })
}

/// Scale and zero point for the transformed vector `y`. A zero range (all
/// entries equal to `m`) is represented exactly with `scale = |m|`.
fn affine_params(y: &[f64], bits: u8) -> (f64, i32) {
    let lo = y.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        let scale = (hi - lo) / ((1u32 << bits) - 1) as f64;
        let zp = (-lo / scale).round();
        (scale, zp.clamp(i32::MIN as f64, i32::MAX as f64) as i32)
    } else if lo > 0.0 {
        (lo, 0)
    } else if lo < 0.0 {
        (-lo, 1)
    } else {
        (1.0, 0)
    }
}

pub fn dequantize_token(q: &QuantizedLatent) -> Vec<f64> {
    if q.is_constant() {
        return vec![q.constant; q.rank];
    }
    inverse_transform(&q.transformed(), q.rank, q.seed)
}

impl QuantizedLatent {
    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn padded_rank(&self) -> usize {
        padded_len(self.rank)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Zero for the constant-vector sentinel.
    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn zero_point(&self) -> i32 {
        self.zero_point
    }

    pub fn is_constant(&self) -> bool {
        self.scale == 0.0
    }

    pub fn constant(&self) -> Option<f64> {
        self.is_constant().then_some(self.constant)
    }

    pub fn codes(&self) -> Vec<u32> {
        unpack_codes(&self.packed, self.bits, self.padded_rank())
    }

    pub fn packed(&self) -> &[u8] {
        &self.packed
    }

    /// Dequantized values in the transformed (padded) domain.
    pub fn transformed(&self) -> Vec<f64> {
        self.codes()
            .iter()
            .map(|&c| (c as f64 - self.zero_point as f64) * self.scale)
            .collect()
    }

    /// Bytes this token occupies in the cache accounting model.
    pub fn cache_bytes(&self) -> usize {
        cache_bytes_per_token(self.rank, self.bits)
    }

    /// Serialize with the fixed little-endian layout:
    ///
    /// | offset | size | field |
    /// |---|---|---|
    /// | 0 | 1 | bit width |
    /// | 1 | 1 | flags (bit 0: constant vector) |
    /// | 2 | 2 | rank `r`, u16 |
    /// | 4 | 8 | sign seed, u64 |
    /// | 12 | 8 | scale, f64 |
    /// | 20 | 4 | zero point, i32 |
    /// | 24 | 8 | constant value, f64 |
    /// | 32 | ⌈r̂·bits/8⌉ | packed codes, LSB first |
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_BYTES + self.packed.len());
        out.push(self.bits);
        out.push(if self.is_constant() { FLAG_CONSTANT } else { 0 });
        out.extend_from_slice(&(self.rank as u16).to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&self.scale.to_le_bytes());
        out.extend_from_slice(&self.zero_point.to_le_bytes());
        out.extend_from_slice(&self.constant.to_le_bytes());
        out.extend_from_slice(&self.packed);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_BYTES {
            return Err(Error::invalid(format!("{} bytes is shorter than the header", bytes.len())));
        }
        let bits = bytes[0];
        check_bits(bits)?;
        let flags = bytes[1];
        let rank = u16::from_le_bytes([bytes[2], bytes[3]]) as usize;
        if rank == 0 {
            return Err(Error::invalid("quantized latent has rank 0"));
        }
        let seed = u64::from_le_bytes(bytes[4..12].try_into().expect("8 bytes"));
        let scale = f64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
        let zero_point = i32::from_le_bytes(bytes[20..24].try_into().expect("4 bytes"));
        let constant = f64::from_le_bytes(bytes[24..32].try_into().expect("8 bytes"));
        let packed = bytes[HEADER_BYTES..].to_vec();
        if packed.len() != packed_len(padded_len(rank), bits) {
            return Err(Error::invalid(format!(
                "expected {} code bytes for rank {rank}, found {}",
                packed_len(padded_len(rank), bits),
                packed.len()
            )));
        }
        let constant_flag = flags & FLAG_CONSTANT != 0;
        if constant_flag != (scale == 0.0) || !scale.is_finite() || scale < 0.0 || !constant.is_finite() {
            return Err(Error::invalid("inconsistent scale / constant fields"));
        }
        Ok(QuantizedLatent {
            bits,
            rank,
            seed,
            scale,
            zero_point,
            constant,
            packed,
        })
    }
}

/// Cache bytes for one quantized latent of width `r`: packed codes for the
/// padded width plus [`TOKEN_OVERHEAD_BYTES`].
pub fn cache_bytes_per_token(r: usize, bits: u8) -> usize {
    packed_len(padded_len(r), bits) + TOKEN_OVERHEAD_BYTES
}

fn packed_len(n: usize, bits: u8) -> usize {
    (n * bits as usize).div_ceil(8)
}

/// Pack codes LSB first: bit `b` of code `k` is stream bit `k·bits + b`,
/// stored at byte `i / 8`, bit `i % 8`.
pub fn pack_codes(codes: &[u32], bits: u8) -> Vec<u8> {
    let mut out = vec![0u8; packed_len(codes.len(), bits)];
    for (k, &c) in codes.iter().enumerate() {
        for b in 0..bits as usize {
            if c >> b & 1 == 1 {
                let i = k * bits as usize + b;
                out[i / 8] |= 1 << (i % 8);
            }
        }
    }
    out
}

pub fn unpack_codes(bytes: &[u8], bits: u8, n: usize) -> Vec<u32> {
    (0..n)
        .map(|k| {
            (0..bits as usize).fold(0u32, |c, b| {
                let i = k * bits as usize + b;
                c | (((bytes[i / 8] >> (i % 8)) & 1) as u32) << b
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::Matrix;
    use crate::synth::random_matrix;

    /// Sylvester construction as an explicit matrix.
    fn hadamard_matrix(n: usize) -> Matrix {
        let s = 1.0 / (n as f64).sqrt();
        Matrix::from_fn(n, n, |i, j| if (i & j).count_ones() % 2 == 0 { s } else { -s })
    }

    #[test]
    fn h2_row() {
        let y = hadamard(&[1.0, 0.0]).unwrap();
        let s = 1.0 / 2f64.sqrt();
        assert!((y[0] - s).abs() < 1e-15 && (y[1] - s).abs() < 1e-15);
        assert!(hadamard(&[1.0, 2.0, 3.0]).is_err());
        assert!(hadamard(&[]).is_err());
    }

    #[test]
    fn matches_matrix_and_preserves_norm() {
        let v = random_matrix(1, 8, 3).into_data();
        let fast = hadamard(&v).unwrap();
        let direct = hadamard_matrix(8).matmul(&Matrix::new(8, 1, v.clone()).unwrap());
        for (a, b) in fast.iter().zip(direct.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        let n0: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let n1: f64 = fast.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((n0 - n1).abs() < 1e-12);
        let back = hadamard(&fast).unwrap();
        for (a, b) in back.iter().zip(&v) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_round_trips() {
        for c in [0.0, 2.5, -1.0] {
            let v = vec![c; 6];
            let q = quantize_token(&v, 4, 7).unwrap();
            assert_eq!(q.scale(), 0.0);
            assert_eq!(dequantize_token(&q), v);
        }
        let q = quantize_token(&[3.25], 3, 1).unwrap();
        assert_eq!(dequantize_token(&q), vec![3.25]);
    }

    #[test]
    fn codebook_aligned_is_exact() {
        // build y on the 4-bit grid in the transformed domain, then invert
        let seed = 11;
        let scale = 0.25;
        let zp = 6;
        let codes: Vec<u32> = vec![0, 15, 3, 9, 6, 1, 12, 7];
        let y: Vec<f64> = codes.iter().map(|&c| (c as f64 - zp as f64) * scale).collect();
        let v = inverse_transform(&y, 8, seed);
        let q = quantize_token(&v, 4, seed).unwrap();
        assert_eq!(q.codes(), codes);
        assert_eq!(q.zero_point(), zp);
        let back = dequantize_token(&q);
        for (a, b) in back.iter().zip(&v) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn error_within_half_step() {
        for seed in 0..50 {
            let v = random_matrix(1, 5 + seed as usize % 7, seed).into_data();
            for bits in SUPPORTED_BITS {
                let q = quantize_token(&v, bits, seed).unwrap();
                let y = forward_transform(&v, seed);
                let max_code = (1u32 << bits) - 1;
                for (k, (&yk, &c)) in y.iter().zip(&q.codes()).enumerate() {
                    assert!(c <= max_code);
                    let direct = (c as f64 - q.zero_point() as f64) * q.scale();
                    let err = (yk - direct).abs();
                    assert!(err <= q.scale() / 2.0 * (1.0 + 1e-12), "seed {seed} k {k}: {err}");
                }
            }
        }
    }

    #[test]
    fn packing_round_trip_and_layout() {
        let codes = vec![1, 2, 3, 4, 5, 6, 7, 0];
        let packed = pack_codes(&codes, 3);
        assert_eq!(packed.len(), 3);
        // 1 | 2<<3 | 3<<6 → low byte 0b1101_0001
        assert_eq!(packed[0], 0b1101_0001);
        assert_eq!(unpack_codes(&packed, 3, 8), codes);
        let nib = pack_codes(&[0xA, 0x5], 4);
        assert_eq!(nib, vec![0x5A]);
    }

    #[test]
    fn bytes_round_trip() {
        let v = random_matrix(1, 6, 9).into_data();
        let q = quantize_token(&v, 3, 42).unwrap();
        let bytes = q.to_bytes();
        assert_eq!(bytes.len(), HEADER_BYTES + 3);
        assert_eq!(QuantizedLatent::from_bytes(&bytes).unwrap(), q);
        assert!(QuantizedLatent::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let c = quantize_token(&[1.0; 4], 4, 0).unwrap();
        assert_eq!(QuantizedLatent::from_bytes(&c.to_bytes()).unwrap(), c);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(quantize_token(&[1.0, 2.0], 5, 0).is_err());
        assert!(quantize_token(&[], 4, 0).is_err());
        assert!(quantize_token(&[f64::NAN, 1.0], 4, 0).is_err());
    }
}
