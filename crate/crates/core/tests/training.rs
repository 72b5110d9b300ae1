//! Training on a linearly separable two-class task.

use driftcal_core::refmodel::{train, ModelConfig};
use driftcal_core::{SequenceMeta, TokenSequence};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Class 0 uses tokens 1..10, class 1 uses tokens 10..19.
fn separable(n: usize, seed: u64) -> Vec<TokenSequence> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let target = rng.random_range(0..2u32);
            let lo = 1 + 9 * target;
            TokenSequence {
                id: format!("s{i}"),
                tokens: (0..5).map(|_| rng.random_range(lo..lo + 9)).collect(),
                meta: SequenceMeta {
                    timestamp: i as i64,
                    project: "p".into(),
                    author: "a".into(),
                },
                target,
            }
        })
        .collect()
}

#[test]
fn separable_task_reaches_high_dev_accuracy() {
    let config = ModelConfig {
        vocab_size: 20,
        class_count: 2,
        ..ModelConfig::default()
    };
    let ck = train(&config, &separable(400, 1), &separable(200, 2)).unwrap();
    assert!(ck.dev_accuracy >= 0.95, "dev accuracy {}", ck.dev_accuracy);
    assert!((ck.accuracy(&separable(200, 2)).unwrap() - ck.dev_accuracy).abs() < 1e-12);
}

#[test]
fn training_is_reproducible_per_seed() {
    let config = ModelConfig {
        vocab_size: 20,
        class_count: 2,
        epochs: 3,
        seed: 5,
        ..ModelConfig::default()
    };
    let (tr, dev) = (separable(100, 3), separable(50, 4));
    let a = train(&config, &tr, &dev).unwrap();
    let b = train(&config, &tr, &dev).unwrap();
    assert!(a.bitwise_eq(&b));
}
