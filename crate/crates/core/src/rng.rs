//! Seed derivation and Gaussian draws.
//!
//! Every random quantity in a run is drawn from a ChaCha stream whose seed is
//! derived from the master seed and a purpose tag, so that unrelated
//! consumers never share or shift each other's streams.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic child seed for `(seed, tag, index)`.
pub fn derive_seed(seed: u64, tag: &str, index: u64) -> u64 {
    let mut h = splitmix(seed);
    for b in tag.bytes() {
        h = splitmix(h ^ u64::from(b));
    }
    splitmix(h ^ splitmix(index))
}

pub fn rng_for(seed: u64, tag: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, tag, index))
}

pub fn standard_normal(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(rng))
}

/// One independent noise stream per sample row, all keyed by a single seed.
///
/// Row `i` always reads stream `i`, and each call to [`NoiseStreams::draw`]
/// consumes exactly `dim` normals per row, so runs that take the same number
/// of steps see the same noise regardless of which model produced `eps`.
pub struct NoiseStreams {
    rngs: Vec<ChaCha8Rng>,
    dim: usize,
}

impl NoiseStreams {
    pub fn new(seed: u64, rows: usize, dim: usize) -> Self {
        let rngs = (0..rows)
            .map(|i| {
                let mut r = ChaCha8Rng::seed_from_u64(seed);
                r.set_stream(i as u64);
                r
            })
            .collect();
        Self { rngs, dim }
    }

    pub fn draw(&mut self) -> Array2<f64> {
        let mut out = Array2::zeros((self.rngs.len(), self.dim));
        for (mut row, rng) in out.rows_mut().into_iter().zip(self.rngs.iter_mut()) {
            for v in row.iter_mut() {
                *v = StandardNormal.sample(rng);
            }
        }
        out
    }
}
