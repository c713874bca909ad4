//! Shared fixtures for the benchmarks.

use longnote::attention::AttentionMode;
use longnote::model::{HeadSpec, ModelCheckpoint, ModelConfig};
use longnote::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Random `[len, d]` query, key and value matrices.
pub fn qkv(len: usize, d: usize, seed: u64) -> [Tensor; 3] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    [(); 3].map(|_| Tensor::randn(&[len, d], 1.0, &mut rng))
}

pub fn encoder(max_positions: usize, mode: AttentionMode) -> ModelCheckpoint {
    ModelCheckpoint::init(ModelConfig {
        vocab_size: 256,
        max_positions,
        d_model: 32,
        n_layers: 2,
        n_heads: 4,
        ffn_dim: 64,
        attention_mode: mode,
        head: HeadSpec::Binary,
        dropout_p: 0.0,
        seed: 0,
        init_std: 0.02,
    })
    .expect("valid bench config")
}

/// Deterministic token ids in `[4, vocab)`, CLS first.
pub fn tokens(len: usize) -> Vec<usize> {
    (0..len).map(|i| if i == 0 { 1 } else { 4 + (i * 37) % 252 }).collect()
}
