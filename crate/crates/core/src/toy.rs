//! Seeded synthetic weights and the bundled toy vocabulary.
//!
//! No pre-trained weights ship with the engine; these helpers produce
//! deterministic archives for tests, demos and benchmarks.

use crate::archive::{ArchiveError, ModelConfig, Tensor, WeightsArchive};
use crate::sampler::RandomStream;
use crate::vocabulary::{TokenId, Vocabulary};

/// The 32-token demo vocabulary (PAD, two static sex tokens, 28 ICD-10
/// level-3 codes, DEATH).
pub const TOY_VOCAB_TSV: &str = include_str!("../fixtures/toy_vocab.tsv");

pub fn toy_vocabulary() -> Vocabulary {
    Vocabulary::parse(TOY_VOCAB_TSV).expect("bundled vocabulary is valid")
}

/// Archive with every value drawn uniformly from `[-scale, scale)` by a
/// splitmix64 stream, tensor by tensor in manifest order, row-major.
/// LayerNorm gains are offset by 1.
pub fn random_archive(
    config: ModelConfig,
    seed: u64,
    scale: f32,
) -> Result<WeightsArchive, ArchiveError> {
    let mut rng = RandomStream::new(seed);
    let tensors = config
        .manifest()
        .into_iter()
        .map(|(name, shape)| {
            let n: usize = shape.iter().product();
            let offset = if name.ends_with(".gain") { 1.0 } else { 0.0 };
            let data = (0..n)
                .map(|_| offset + (2.0 * rng.next_uniform() - 1.0) as f32 * scale)
                .collect();
            Tensor::new(name, shape, data)
        })
        .collect();
    WeightsArchive::new(config, tensors)
}

/// Archive whose logits are input-independent: `high` for `favoured`,
/// `low` for every other token.
///
/// The final LayerNorm has zero gain and a one-hot bias, so its output is
/// the first basis vector whatever the hidden state; the head's first column
/// then supplies the logits.
pub fn biased_archive(
    config: ModelConfig,
    favoured: TokenId,
    high: f32,
    low: f32,
) -> Result<WeightsArchive, ArchiveError> {
    let e = config.n_embd;
    WeightsArchive::zeros(config)?
        .map_tensor("ln_f.bias", |t| t.data[0] = 1.0)?
        .map_tensor("head.weight", |t| {
            for (row, chunk) in t.data.chunks_exact_mut(e).enumerate() {
                chunk[0] = if row == favoured { high } else { low };
            }
        })
}
