//! Toy tasks shared by unit tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::prob::{SequenceMeta, TokenSequence};
use crate::refmodel::ModelConfig;

pub const TOY_VOCAB: usize = 30;
pub const TOY_CLASSES: usize = 3;

/// Class `k` draws most of its tokens from a private block of five tokens;
/// the rest is shared noise. Separable by construction.
pub fn toy_split(n: usize, seed: u64) -> Vec<TokenSequence> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let k = rng.random_range(0..TOY_CLASSES as u32);
            let tokens = (0..6)
                .map(|_| {
                    if rng.random::<f64>() < 0.6 {
                        3 + k * 5 + rng.random_range(0..5)
                    } else {
                        rng.random_range(18..TOY_VOCAB as u32)
                    }
                })
                .collect();
            TokenSequence {
                id: format!("toy-{seed}-{i}"),
                tokens,
                meta: SequenceMeta {
                    timestamp: i as i64,
                    project: "toy".into(),
                    author: "toy".into(),
                },
                target: k,
            }
        })
        .collect()
}

pub fn toy_config(seed: u32) -> ModelConfig {
    ModelConfig {
        vocab_size: TOY_VOCAB,
        class_count: TOY_CLASSES,
        context_len: 8,
        hidden_dim: 16,
        layer_count: 3,
        dropout_rate: 0.1,
        epochs: 15,
        batch_size: 16,
        learning_rate: 0.05,
        seed,
    }
}
