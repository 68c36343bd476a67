use rand::seq::index;
use rand::Rng;

use super::Sampling;
use crate::error::{contract, Result};
use crate::frames::FrameSet;

/// B timestamps with their camera choices and frame indices.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeBatch {
    pub frames: Vec<usize>,
    pub timestamps: Vec<f64>,
    pub cameras: Vec<usize>,
}

impl TimeBatch {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Indices into `pool` for one batch.
pub fn sample_indices(pool: usize, batch: usize, strategy: Sampling, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if batch == 0 || batch > pool {
        return contract(format!("cannot draw a batch of {batch} from {pool} frames"));
    }
    Ok(match strategy {
        Sampling::Random => index::sample(rng, pool, batch).into_vec(),
        Sampling::Continuous => {
            let start = rng.random_range(0..=pool - batch);
            (start..start + batch).collect()
        }
    })
}

/// Draws a batch from the `pool` frames of `set`; each frame is paired
/// with a uniformly chosen camera.
pub fn sample_batch(set: &FrameSet, pool: &[usize], batch: usize, strategy: Sampling, rng: &mut impl Rng) -> Result<TimeBatch> {
    let picks = sample_indices(pool.len(), batch, strategy, rng)?;
    let frames: Vec<usize> = picks.iter().map(|&i| pool[i]).collect();
    let cameras = frames.iter().map(|_| rng.random_range(0..set.cameras.len())).collect();
    Ok(TimeBatch {
        timestamps: frames.iter().map(|&f| set.timestamps[f]).collect(),
        frames,
        cameras,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn full_draw_is_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut v = sample_indices(6, 6, Sampling::Random, &mut rng).unwrap();
        v.sort();
        assert_eq!(v, (0..6).collect::<Vec<_>>());
    }

    #[test]
    fn continuous_is_consecutive() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let v = sample_indices(10, 4, Sampling::Continuous, &mut rng).unwrap();
            assert!(v.windows(2).all(|w| w[1] == w[0] + 1));
            assert!(v[3] < 10);
        }
    }

    #[test]
    fn oversized_batch_is_contract_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert!(sample_indices(3, 4, Sampling::Random, &mut rng).is_err());
    }
}
