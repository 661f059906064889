//! Reproducible uniform sampling of the unit ball.
//!
//! Sample `i` belongs to block `i / BLOCK_LEN`; each block draws from its own
//! ChaCha8 stream keyed by `(seed, block)`. Blocks are evaluated in parallel
//! and their hit counts summed as integers, so results do not depend on the
//! number of worker threads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::Result;

pub const BLOCK_LEN: u64 = 4096;

/// Largest dimension supported by the sampler.
pub const MAX_DIM: usize = 4;

fn block_rng(seed: u64, block: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(block);
    rng
}

/// Draws a point uniformly from `B(0, 1)` in `R^n` by rejection from the
/// cube `[-1, 1]^n`.
pub fn ball_point<R: Rng>(rng: &mut R, n: usize, out: &mut [f64; MAX_DIM]) {
    loop {
        let mut r2 = 0.0;
        for c in out.iter_mut().take(n) {
            *c = 2.0 * rng.random::<f64>() - 1.0;
            r2 += *c * *c;
        }
        if r2 <= 1.0 {
            return;
        }
    }
}

/// Counts the samples `u ~ U(B(0,1))` accepted by `accept`.
pub fn count_hits<F>(n: usize, samples: u64, seed: u64, accept: F) -> Result<u64>
where
    F: Fn(&[f64]) -> Result<bool> + Sync,
{
    assert!((1..=MAX_DIM).contains(&n), "sampler dimension out of range");
    let blocks = samples.div_ceil(BLOCK_LEN);
    (0..blocks)
        .into_par_iter()
        .map(|block| {
            let mut rng = block_rng(seed, block);
            let start = block * BLOCK_LEN;
            let len = BLOCK_LEN.min(samples - start);
            let mut u = [0.0; MAX_DIM];
            let mut hits = 0u64;
            for _ in 0..len {
                ball_point(&mut rng, n, &mut u);
                if accept(&u[..n])? {
                    hits += 1;
                }
            }
            Ok(hits)
        })
        .try_reduce(|| 0, |a, b| Ok(a + b))
}

/// The first `count` sample points for `seed`, in sample order.
pub fn ball_points(n: usize, count: u64, seed: u64) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(count as usize);
    let mut u = [0.0; MAX_DIM];
    for block in 0..count.div_ceil(BLOCK_LEN) {
        let mut rng = block_rng(seed, block);
        let len = BLOCK_LEN.min(count - block * BLOCK_LEN);
        for _ in 0..len {
            ball_point(&mut rng, n, &mut u);
            out.push(u[..n].to_vec());
        }
    }
    out
}
