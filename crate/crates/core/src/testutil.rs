//! Fixtures shared by unit tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{load_embeddings, ObjectProposal, Scene, FEATURE_DIM};
use crate::slgc::{SpatialWordBank, HORIZONTAL_WORDS, VERTICAL_WORDS};
use crate::Box3;

pub fn bank() -> SpatialWordBank<f64> {
    let words: Vec<&str> = HORIZONTAL_WORDS.iter().chain(&VERTICAL_WORDS).copied().collect();
    SpatialWordBank::from_table(&load_embeddings(None, &words).unwrap())
}

pub fn random_box(rng: &mut impl Rng) -> Box3<f64> {
    Box3::new(
        rng.random_range(-4.0..4.0),
        rng.random_range(-4.0..4.0),
        rng.random_range(0.0..2.0),
        rng.random_range(0.2..1.5),
        rng.random_range(0.2..1.5),
        rng.random_range(0.2..1.5),
    )
    .unwrap()
}

/// Scene with `n` random boxes and unit-scale Gaussian-ish features.
pub fn random_scene(n: usize, seed: u64) -> Scene<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let objects = (0..n)
        .map(|i| {
            let b = random_box(&mut rng);
            let f = (0..FEATURE_DIM).map(|_| rng.random_range(-1.0..1.0)).collect();
            ObjectProposal::new(i, "thing", b, f).unwrap()
        })
        .collect();
    Scene::new(format!("r{seed}"), objects).unwrap()
}
