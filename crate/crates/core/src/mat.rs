//! Flat row-major matrix storage plus seeded-randomness helpers.
//!
//! Everything numeric in this crate is `f64`. Tensors destined for the
//! 32-bit checkpoint container are generated on the f32 grid (see
//! [`Mat::quantize_f32`]) so save/load round-trips are bit-exact.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Row-major dense matrix. Vectors are 1×n, scalars 1×1.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "Mat::from_vec size mismatch");
        Mat { rows, cols, data }
    }

    pub fn row_vector(data: Vec<f64>) -> Self {
        Mat { rows: 1, cols: data.len(), data }
    }

    /// Identity matrix of size n.
    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Entries drawn i.i.d. from N(0, std²), then snapped to the f32 grid.
    pub fn random_normal(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Self {
        let normal = Normal::new(0.0, std).expect("std must be finite and positive");
        let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
        let mut m = Mat { rows, cols, data };
        m.quantize_f32();
        m
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Snap every entry to the nearest f32. Keeps values exactly
    /// representable in the 32-bit checkpoint container.
    pub fn quantize_f32(&mut self) {
        for v in &mut self.data {
            *v = *v as f32 as f64;
        }
    }

    /// Bitwise equality (distinguishes -0.0 from 0.0, rejects NaN).
    pub fn bits_eq(&self, other: &Mat) -> bool {
        self.rows == other.rows
            && self.cols == other.cols
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Derive a child seed from a base seed and a textual tag, so independent
/// random streams (per tensor, per epoch, per image) never collide and do
/// not depend on draw order elsewhere.
pub fn derive_seed(base: u64, tag: &str) -> u64 {
    // FNV-1a over the tag, mixed with the base via splitmix64 finalizer.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for byte in tag.as_bytes() {
        h ^= *byte as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = base ^ h;
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seeded RNG for the stream named by `tag`.
pub fn seeded_rng(base: u64, tag: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, tag))
}

/// FNV-1a hash over the raw f64 bit patterns of a tensor list. Used for
/// frozen-parameter integrity checks.
pub fn param_hash<'a>(tensors: impl Iterator<Item = &'a Mat>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for m in tensors {
        for v in &m.data {
            for byte in v.to_bits().to_le_bytes() {
                h ^= byte as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
    }
    h
}
