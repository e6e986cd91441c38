//! Seeded random streams. Every consumer of randomness draws from its own
//! stream so that adding or removing one consumer never shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Independent generator number `stream` for a run seed.
pub fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Fills a `rows x cols` buffer with standard normal draws.
pub fn normal_matrix<R: rand::Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> crate::diffcore::Tensor {
    let data = (0..rows * cols).map(|_| rng.sample(rand_distr::StandardNormal)).collect();
    crate::diffcore::Tensor::matrix(rows, cols, data).expect("sized buffer")
}
