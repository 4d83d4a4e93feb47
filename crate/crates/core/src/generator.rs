//! Autoregressive trajectory generation and Monte Carlo risk estimation.

use std::collections::BTreeSet;

use rayon::prelude::*;
use thiserror::Error;

use crate::archive::WeightsArchive;
use crate::model::{DecodeState, EncodedSequence, LogitVector, Model, ModelError};
use crate::sampler::{
    derive_seed, next_event_distribution, sample_next, Mask, RandomStream, SampleError,
};
use crate::vocabulary::{TokenId, TokenKind, VocabError, Vocabulary};

/// Upper bound on any recorded age, in years.
pub const MAX_PLAUSIBLE_AGE: f64 = 130.0;
pub const DEFAULT_MAX_AGE: f64 = 85.0;
pub const DEFAULT_MAX_STEPS: usize = 256;

#[derive(Debug, Error, PartialEq)]
pub enum TrajectoryError {
    #[error("event {index}: age {age} is outside [0, {MAX_PLAUSIBLE_AGE}]")]
    AgeOutOfRange { index: usize, age: f64 },
    #[error("event {index}: age {age} is earlier than the previous event")]
    AgeDecreasing { index: usize, age: f64 },
    #[error("event {index}: token id {id} is not in the vocabulary")]
    UnknownToken { index: usize, id: TokenId },
    #[error("event {index}: padding token {code:?} cannot appear in a trajectory")]
    Padding { index: usize, code: String },
    #[error("event {index}: terminal token {code:?} must be the last event")]
    TerminalNotLast { index: usize, code: String },
}

#[derive(Debug, Error, PartialEq)]
pub enum GenerateError {
    #[error("invalid trajectory: {0}")]
    Trajectory(#[from] TrajectoryError),
    #[error("input trajectory is empty")]
    EmptyInput,
    #[error("input trajectory already ends in a terminal event")]
    AlreadyTerminated,
    #[error("last input age {last} is not below the maximum age {max_age}")]
    PastMaxAge { last: f64, max_age: f64 },
    #[error("invalid generation parameters: {0}")]
    Params(String),
    #[error("horizon {horizon} must exceed the last input age {last}")]
    Horizon { horizon: f64, last: f64 },
    #[error("no risk targets given")]
    NoTargets,
    #[error("sample count must be at least 1")]
    NoSamples,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Sample(#[from] SampleError),
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("model vocabulary size {model} differs from vocabulary file size {vocab}")]
    VocabSizeMismatch { model: usize, vocab: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HealthEvent {
    pub token: TokenId,
    pub age_years: f64,
}

impl HealthEvent {
    pub fn new(token: TokenId, age_years: f64) -> Self {
        Self { token, age_years }
    }
}

/// Chronological (token, age) sequence for one individual.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    events: Vec<HealthEvent>,
}

impl Trajectory {
    /// Validates ages, token kinds and terminal placement against `vocab`.
    pub fn new(events: Vec<HealthEvent>, vocab: &Vocabulary) -> Result<Self, TrajectoryError> {
        let mut prev = 0.0;
        let last = events.len().saturating_sub(1);
        for (index, ev) in events.iter().enumerate() {
            let age = ev.age_years;
            if !(age.is_finite() && (0.0..=MAX_PLAUSIBLE_AGE).contains(&age)) {
                return Err(TrajectoryError::AgeOutOfRange { index, age });
            }
            if age < prev {
                return Err(TrajectoryError::AgeDecreasing { index, age });
            }
            prev = age;
            let tok = vocab
                .decode(ev.token)
                .map_err(|_| TrajectoryError::UnknownToken { index, id: ev.token })?;
            match tok.kind {
                TokenKind::Padding => {
                    return Err(TrajectoryError::Padding {
                        index,
                        code: tok.code.clone(),
                    })
                }
                TokenKind::Terminal if index != last => {
                    return Err(TrajectoryError::TerminalNotLast {
                        index,
                        code: tok.code.clone(),
                    })
                }
                _ => {}
            }
        }
        Ok(Self { events })
    }

    /// Builds a trajectory from `(code, age)` pairs.
    pub fn from_codes<S: AsRef<str>>(
        pairs: &[(S, f64)],
        vocab: &Vocabulary,
    ) -> Result<Self, CodeOrTrajectoryError> {
        let events = pairs
            .iter()
            .map(|(c, a)| Ok(HealthEvent::new(vocab.encode(c.as_ref())?, *a)))
            .collect::<Result<Vec<_>, VocabError>>()?;
        Ok(Self::new(events, vocab)?)
    }

    pub fn events(&self) -> &[HealthEvent] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn last_age(&self) -> Option<f64> {
        self.events.last().map(|e| e.age_years)
    }

    /// Whether `token` occurs at an age no later than `horizon`.
    pub fn contains_by(&self, token: TokenId, horizon: f64) -> bool {
        self.events
            .iter()
            .any(|e| e.token == token && e.age_years <= horizon)
    }

    pub fn into_events(self) -> Vec<HealthEvent> {
        self.events
    }
}

#[derive(Debug, Error)]
pub enum CodeOrTrajectoryError {
    #[error(transparent)]
    Code(#[from] VocabError),
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationParams {
    pub seed: u64,
    pub max_age_years: f64,
    pub termination_tokens: BTreeSet<TokenId>,
    pub max_steps: usize,
    /// Tokens never sampled.
    pub mask: Mask,
}

impl GenerationParams {
    /// Defaults: stop at DEATH (or every terminal token if the vocabulary has
    /// no `DEATH` code) or past age 85, at most 256 steps, padding and static
    /// tokens masked.
    pub fn defaults(vocab: &Vocabulary, seed: u64) -> Self {
        let termination_tokens = match vocab.encode("DEATH") {
            Ok(id) if vocab.kind(id) == Some(TokenKind::Terminal) => [id].into(),
            _ => vocab.ids_of_kind(TokenKind::Terminal).collect(),
        };
        let mask = vocab
            .tokens()
            .iter()
            .filter(|t| matches!(t.kind, TokenKind::Padding | TokenKind::Static))
            .map(|t| t.id)
            .collect();
        Self {
            seed,
            max_age_years: DEFAULT_MAX_AGE,
            termination_tokens,
            max_steps: DEFAULT_MAX_STEPS,
            mask,
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }

    pub fn validate(&self, vocab: &Vocabulary) -> Result<(), GenerateError> {
        let bad = |m: String| Err(GenerateError::Params(m));
        if !(self.max_age_years.is_finite() && self.max_age_years > 0.0) {
            return bad(format!("max_age_years must be positive, got {}", self.max_age_years));
        }
        if self.max_steps == 0 {
            return bad("max_steps must be at least 1".into());
        }
        if self.termination_tokens.is_empty() {
            return bad("termination token set is empty".into());
        }
        for &id in &self.termination_tokens {
            match vocab.kind(id) {
                Some(TokenKind::Terminal) => {}
                Some(_) => {
                    return bad(format!(
                        "token {:?} is not a terminal token",
                        vocab.decode(id).map(|t| t.code.as_str()).unwrap_or("?")
                    ))
                }
                None => return bad(format!("termination token id {id} out of range")),
            }
        }
        if let Some(&id) = self.mask.iter().find(|&&id| id >= vocab.len()) {
            return bad(format!("mask token id {id} out of range"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RiskEstimate {
    pub target: TokenId,
    pub horizon_age_years: f64,
    pub probability: f64,
    pub n_samples: usize,
    pub std_error: f64,
}

impl RiskEstimate {
    pub fn from_counts(target: TokenId, horizon_age_years: f64, hits: usize, n: usize) -> Self {
        let p = hits as f64 / n as f64;
        Self {
            target,
            horizon_age_years,
            probability: p,
            n_samples: n,
            std_error: (p * (1.0 - p) / n as f64).sqrt(),
        }
    }
}

/// Model input for a trajectory, truncated to the context window if needed.
///
/// When the trajectory is longer than `max_seq`, every static token is kept
/// and the remaining slots go to the most recent events; if the static tokens
/// alone fill the window, the most recent `max_seq` events are kept. The flag
/// reports whether anything was dropped.
pub fn encode_for_model(
    t: &Trajectory,
    vocab: &Vocabulary,
    max_seq: usize,
) -> (EncodedSequence, bool) {
    let events = t.events();
    let keep: Vec<usize> = if events.len() <= max_seq {
        (0..events.len()).collect()
    } else {
        let is_static = |i: usize| vocab.kind(events[i].token) == Some(TokenKind::Static);
        let n_static = (0..events.len()).filter(|&i| is_static(i)).count();
        if n_static >= max_seq {
            (events.len() - max_seq..events.len()).collect()
        } else {
            let mut recent_budget = max_seq - n_static;
            let mut keep_flags = vec![false; events.len()];
            for i in (0..events.len()).rev() {
                if is_static(i) {
                    keep_flags[i] = true;
                } else if recent_budget > 0 {
                    keep_flags[i] = true;
                    recent_budget -= 1;
                }
            }
            (0..events.len()).filter(|&i| keep_flags[i]).collect()
        }
    };
    let truncated = keep.len() < events.len();
    let seq = EncodedSequence::new(
        keep.iter().map(|&i| events[i].token).collect(),
        keep.iter().map(|&i| events[i].age_years).collect(),
    );
    (seq, truncated)
}

/// Model plus vocabulary, checked for agreement. Immutable and shareable.
pub struct Engine {
    model: Model,
    vocab: Vocabulary,
}

impl Engine {
    pub fn new(archive: &WeightsArchive, vocab: Vocabulary) -> Result<Self, EngineError> {
        let model_vocab = archive.config().vocab_size;
        if model_vocab != vocab.len() {
            return Err(EngineError::VocabSizeMismatch {
                model: model_vocab,
                vocab: vocab.len(),
            });
        }
        Ok(Self {
            model: Model::new(archive),
            vocab,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn default_params(&self, seed: u64) -> GenerationParams {
        GenerationParams::defaults(&self.vocab, seed)
    }

    /// Next-event logits for a trajectory (after context truncation).
    pub fn logits(&self, t: &Trajectory) -> Result<LogitVector, GenerateError> {
        if t.is_empty() {
            return Err(GenerateError::EmptyInput);
        }
        let (seq, _) = encode_for_model(t, &self.vocab, self.model.config().max_seq);
        Ok(self.model.get_logits(&seq)?)
    }

    /// Analytic law of the next sampled event.
    pub fn next_event_distribution(
        &self,
        t: &Trajectory,
        mask: &Mask,
    ) -> Result<Vec<f64>, GenerateError> {
        Ok(next_event_distribution(&self.logits(t)?, mask)?)
    }

    fn check_input(&self, input: &Trajectory, params: &GenerationParams) -> Result<(), GenerateError> {
        params.validate(&self.vocab)?;
        let last = input.events().last().ok_or(GenerateError::EmptyInput)?;
        if input
            .events()
            .iter()
            .any(|e| self.vocab.kind(e.token) == Some(TokenKind::Terminal))
        {
            return Err(GenerateError::AlreadyTerminated);
        }
        if last.age_years >= params.max_age_years {
            return Err(GenerateError::PastMaxAge {
                last: last.age_years,
                max_age: params.max_age_years,
            });
        }
        Ok(())
    }

    /// Extends `input` one sampled event at a time until a termination token
    /// is drawn, the next event would fall after `max_age_years`, or
    /// `max_steps` events have been appended.
    pub fn generate_trajectory(
        &self,
        input: &Trajectory,
        params: &GenerationParams,
    ) -> Result<Trajectory, GenerateError> {
        self.check_input(input, params)?;
        self.generate_unchecked(input, params)
    }

    fn generate_unchecked(
        &self,
        input: &Trajectory,
        params: &GenerationParams,
    ) -> Result<Trajectory, GenerateError> {
        let max_seq = self.model.config().max_seq;
        let mut rng = RandomStream::new(params.seed);
        let mut out = input.clone();
        // Valid until the context window first overflows; after that the
        // window slides and every step re-encodes from scratch.
        let mut cache = Some(DecodeState::new(&self.model));

        for _ in 0..params.max_steps {
            let logits = match cache.as_mut() {
                Some(state) if out.len() <= max_seq => {
                    let ev = out.events();
                    let n = ev.len();
                    for e in &ev[state.len()..n - 1] {
                        state.advance(e.token, e.age_years)?;
                    }
                    state.push(ev[n - 1].token, ev[n - 1].age_years)?
                }
                _ => {
                    cache = None;
                    let (seq, _) = encode_for_model(&out, &self.vocab, max_seq);
                    self.model.get_logits(&seq)?
                }
            };
            let outcome = sample_next(&logits, &mut rng, &params.mask)?;
            let age = out.last_age().expect("non-empty");
            let mut next_age = age + outcome.wait_years;
            if next_age <= age {
                // wait below the resolution of `age`
                next_age = age.next_up();
            }
            if next_age > params.max_age_years {
                break;
            }
            out.events.push(HealthEvent::new(outcome.token, next_age));
            if params.termination_tokens.contains(&outcome.token) {
                break;
            }
        }
        Ok(out)
    }

    /// `n` independent futures; sample `k` uses the stream seeded with
    /// `derive_seed(params.seed, k)`. Runs on the current rayon pool and the
    /// result does not depend on its size.
    pub fn generate_samples(
        &self,
        input: &Trajectory,
        params: &GenerationParams,
        n: usize,
    ) -> Result<Vec<Trajectory>, GenerateError> {
        if n == 0 {
            return Err(GenerateError::NoSamples);
        }
        self.check_input(input, params)?;
        (0..n as u64)
            .into_par_iter()
            .map(|k| self.generate_unchecked(input, &params.with_seed(derive_seed(params.seed, k))))
            .collect()
    }

    /// Probability of each target occurring by `horizon_age_years`, all
    /// estimated from one shared set of `n` samples.
    pub fn estimate_risk(
        &self,
        input: &Trajectory,
        targets: &[TokenId],
        horizon_age_years: f64,
        params: &GenerationParams,
        n: usize,
    ) -> Result<Vec<RiskEstimate>, GenerateError> {
        if targets.is_empty() {
            return Err(GenerateError::NoTargets);
        }
        if let Some(&id) = targets.iter().find(|&&id| id >= self.vocab.len()) {
            return Err(GenerateError::Params(format!("target id {id} out of range")));
        }
        let last = input.last_age().ok_or(GenerateError::EmptyInput)?;
        if !(horizon_age_years.is_finite() && horizon_age_years > last) {
            return Err(GenerateError::Horizon {
                horizon: horizon_age_years,
                last,
            });
        }
        let samples = self.generate_samples(input, params, n)?;
        Ok(risk_from_samples(&samples, targets, horizon_age_years))
    }
}

/// Fraction of `samples` containing each target at an age `<= horizon`.
pub fn risk_from_samples(
    samples: &[Trajectory],
    targets: &[TokenId],
    horizon_age_years: f64,
) -> Vec<RiskEstimate> {
    targets
        .iter()
        .map(|&target| {
            let hits = samples
                .iter()
                .filter(|s| s.contains_by(target, horizon_age_years))
                .count();
            RiskEstimate::from_counts(target, horizon_age_years, hits, samples.len())
        })
        .collect()
}
