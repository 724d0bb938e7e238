//! Seeded inputs shared by the benchmarks.

use halluguard::eval::LabeledScore;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `rows x dim` uniform values in [-1, 1).
pub fn matrix(rows: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..rows)
        .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect()
}

/// Scores where positives sit slightly higher than negatives.
pub fn labeled_scores(n: usize, seed: u64) -> Vec<LabeledScore> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let label = u8::from(rng.random_bool(0.3));
            let score = rng.random::<f64>() + 0.3 * f64::from(label);
            LabeledScore::new(format!("p{i}"), score, label)
        })
        .collect()
}
