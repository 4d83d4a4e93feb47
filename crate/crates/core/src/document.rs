//! JSON interchange for trajectories.
//!
//! Input documents are either a bare list of `{code, age_years}` objects or an
//! object with an `events` list. Emitted documents carry the sampling `seed`
//! and mark each event with `generated`.

use serde::{Deserialize, Serialize};

use crate::generator::{CodeOrTrajectoryError, HealthEvent, Trajectory};
use crate::vocabulary::{VocabError, Vocabulary};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub code: String,
    pub age_years: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generated: Option<bool>,
}

impl EventRecord {
    pub fn new(code: impl Into<String>, age_years: f64) -> Self {
        Self {
            code: code.into(),
            age_years,
            generated: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum InputDocument {
    List(Vec<EventRecord>),
    Object { events: Vec<EventRecord> },
}

impl InputDocument {
    pub fn events(&self) -> &[EventRecord] {
        match self {
            InputDocument::List(ev) | InputDocument::Object { events: ev } => ev,
        }
    }
}

/// A trajectory as emitted by the CLI and service.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryDocument {
    pub seed: u64,
    pub events: Vec<EventRecord>,
}

pub fn parse_input(text: &str) -> Result<InputDocument, serde_json::Error> {
    serde_json::from_str(text)
}

/// Resolves codes and checks trajectory invariants.
pub fn trajectory_from_records(
    records: &[EventRecord],
    vocab: &Vocabulary,
) -> Result<Trajectory, CodeOrTrajectoryError> {
    let events = records
        .iter()
        .map(|r| Ok(HealthEvent::new(vocab.encode(&r.code)?, r.age_years)))
        .collect::<Result<Vec<_>, VocabError>>()?;
    Ok(Trajectory::new(events, vocab)?)
}

/// Emits `t`, marking every event after the first `input_len` as generated.
pub fn to_document(
    t: &Trajectory,
    input_len: usize,
    seed: u64,
    vocab: &Vocabulary,
) -> TrajectoryDocument {
    let events = t
        .events()
        .iter()
        .enumerate()
        .map(|(i, e)| EventRecord {
            code: vocab
                .decode(e.token)
                .map(|t| t.code.clone())
                .expect("trajectory tokens are in the vocabulary"),
            age_years: e.age_years,
            generated: Some(i >= input_len),
        })
        .collect();
    TrajectoryDocument { seed, events }
}
