//! Inference engine for generative disease-trajectory models.
//!
//! A patient's history is a sequence of (ICD-10 event, age) pairs. The engine
//! runs a small decoder-only transformer over the age-encoded sequence, turns
//! the last position's logits into competing exponential waiting times, takes
//! the earliest event as the next one, and repeats until a terminal event or
//! the maximum age. Repeating that with independent seeds gives Monte Carlo
//! risk estimates.
//!
//! ```
//! use dtraj_core::{toy, Engine, ModelConfig, Trajectory, WeightsArchive};
//!
//! let vocab = toy::toy_vocabulary();
//! let archive = toy::random_archive(ModelConfig::toy(), 1, 0.5).unwrap();
//! let engine = Engine::new(&archive, vocab).unwrap();
//! let input = Trajectory::from_codes(&[("SEX_F", 0.0), ("E11", 42.0)], engine.vocab()).unwrap();
//! let future = engine.generate_trajectory(&input, &engine.default_params(7)).unwrap();
//! assert_eq!(&future.events()[..2], input.events());
//! ```

pub mod archive;
pub mod document;
pub mod generator;
pub mod model;
#[cfg(any(test, feature = "reference"))]
pub mod reference;
pub mod sampler;
pub mod toy;
pub mod vocabulary;

pub use archive::{ArchiveError, ModelConfig, Tensor, WeightsArchive};
pub use generator::{
    encode_for_model, risk_from_samples, Engine, EngineError, GenerateError, GenerationParams,
    HealthEvent, RiskEstimate, Trajectory, TrajectoryError,
};
pub use model::{EncodedSequence, LogitVector, Model, ModelError};
pub use sampler::{derive_seed, next_event_distribution, Mask, RandomStream, SampleOutcome};
pub use vocabulary::{Token, TokenId, TokenKind, VocabError, Vocabulary};
