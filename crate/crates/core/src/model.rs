//! Decoder-only transformer forward pass.
//!
//! Pre-norm GPT blocks over an age-encoded token sequence. There is no
//! ordinal positional encoding: each position's input embedding is the token
//! embedding plus `(age / age_scale) * age_emb`. All arithmetic is `f32`
//! with fixed left-to-right accumulation so repeated calls are bit-identical.
//!
//! The forward pass is computed incrementally: each position appends its keys
//! and values to a per-layer cache and attends over the cached prefix. Under
//! strict causal masking this is exactly the full-sequence computation.

use thiserror::Error;

use crate::archive::{ModelConfig, WeightsArchive};
use crate::vocabulary::TokenId;

pub const LAYER_NORM_EPS: f32 = 1e-5;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("sequence is empty")]
    EmptySequence,
    #[error("sequence length {len} exceeds context window {max_seq}")]
    SequenceTooLong { len: usize, max_seq: usize },
    #[error("token id {id} at position {position} out of range for vocabulary of size {vocab_size}")]
    TokenOutOfRange {
        position: usize,
        id: TokenId,
        vocab_size: usize,
    },
    #[error("age at position {position} is not finite or decreases")]
    InvalidAge { position: usize },
    #[error("token_ids and ages differ in length ({tokens} vs {ages})")]
    LengthMismatch { tokens: usize, ages: usize },
}

/// Numeric model input: token ids with their ages in years.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSequence {
    pub token_ids: Vec<TokenId>,
    pub ages: Vec<f64>,
}

impl EncodedSequence {
    pub fn new(token_ids: Vec<TokenId>, ages: Vec<f64>) -> Self {
        Self { token_ids, ages }
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<(), ModelError> {
        if self.token_ids.len() != self.ages.len() {
            return Err(ModelError::LengthMismatch {
                tokens: self.token_ids.len(),
                ages: self.ages.len(),
            });
        }
        if self.is_empty() {
            return Err(ModelError::EmptySequence);
        }
        if self.len() > config.max_seq {
            return Err(ModelError::SequenceTooLong {
                len: self.len(),
                max_seq: config.max_seq,
            });
        }
        for (position, &id) in self.token_ids.iter().enumerate() {
            if id >= config.vocab_size {
                return Err(ModelError::TokenOutOfRange {
                    position,
                    id,
                    vocab_size: config.vocab_size,
                });
            }
        }
        let mut prev = f64::NEG_INFINITY;
        for (position, &a) in self.ages.iter().enumerate() {
            if !a.is_finite() || a < prev {
                return Err(ModelError::InvalidAge { position });
            }
            prev = a;
        }
        Ok(())
    }
}

/// Attention rows indexed `[position][layer][head]`.
pub type AttentionTrace = Vec<Vec<Vec<Vec<f32>>>>;

/// Per-token scores from one sequence position.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitVector(pub Vec<f32>);

impl LogitVector {
    pub fn values(&self) -> &[f32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Normalized age input shared by every forward implementation.
pub fn normalized_age(age_years: f64, age_scale: f64) -> f32 {
    (age_years / age_scale) as f32
}

struct Block {
    ln1_gain: Vec<f32>,
    ln1_bias: Vec<f32>,
    wq: Vec<f32>,
    wk: Vec<f32>,
    wv: Vec<f32>,
    wo: Vec<f32>,
    ln2_gain: Vec<f32>,
    ln2_bias: Vec<f32>,
    w1: Vec<f32>,
    b1: Vec<f32>,
    w2: Vec<f32>,
    b2: Vec<f32>,
}

/// Typed, immutable view of a [`WeightsArchive`] ready for inference.
pub struct Model {
    config: ModelConfig,
    tok_emb: Vec<f32>,
    age_emb: Vec<f32>,
    blocks: Vec<Block>,
    lnf_gain: Vec<f32>,
    lnf_bias: Vec<f32>,
    head: Vec<f32>,
}

impl Model {
    pub fn new(archive: &WeightsArchive) -> Self {
        // The archive has already checked names and shapes.
        let get = |name: &str| {
            archive
                .tensor(name)
                .unwrap_or_else(|| panic!("validated archive lacks {name}"))
                .data
                .clone()
        };
        let blocks = (0..archive.config().n_layer)
            .map(|i| {
                let p = |s: &str| get(&format!("blk.{i}.{s}"));
                Block {
                    ln1_gain: p("ln1.gain"),
                    ln1_bias: p("ln1.bias"),
                    wq: p("attn.wq"),
                    wk: p("attn.wk"),
                    wv: p("attn.wv"),
                    wo: p("attn.wo"),
                    ln2_gain: p("ln2.gain"),
                    ln2_bias: p("ln2.bias"),
                    w1: p("mlp.w1"),
                    b1: p("mlp.b1"),
                    w2: p("mlp.w2"),
                    b2: p("mlp.b2"),
                }
            })
            .collect();
        Self {
            config: archive.config().clone(),
            tok_emb: get("tok_emb.weight"),
            age_emb: get("age_emb.weight"),
            blocks,
            lnf_gain: get("ln_f.gain"),
            lnf_bias: get("ln_f.bias"),
            head: get("head.weight"),
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Logits for every position of `seq`.
    pub fn forward(&self, seq: &EncodedSequence) -> Result<Vec<LogitVector>, ModelError> {
        seq.validate(&self.config)?;
        let mut state = DecodeState::new(self);
        let mut out = Vec::with_capacity(seq.len());
        for (&id, &age) in seq.token_ids.iter().zip(&seq.ages) {
            out.push(state.push_unchecked(id, age, None));
        }
        Ok(out)
    }

    /// Logits at the last position only.
    pub fn get_logits(&self, seq: &EncodedSequence) -> Result<LogitVector, ModelError> {
        seq.validate(&self.config)?;
        let mut state = DecodeState::new(self);
        let last = seq.len() - 1;
        for (&id, &age) in seq.token_ids[..last].iter().zip(&seq.ages) {
            state.advance_unchecked(id, age, None);
        }
        Ok(state.push_unchecked(seq.token_ids[last], seq.ages[last], None))
    }

    /// Like [`Model::forward`], also returning the post-softmax attention
    /// weights. Indexed as `[position][layer][head]`, each a row of length
    /// `position + 1`.
    pub fn forward_traced(
        &self,
        seq: &EncodedSequence,
    ) -> Result<(Vec<LogitVector>, AttentionTrace), ModelError> {
        seq.validate(&self.config)?;
        let mut state = DecodeState::new(self);
        let mut logits = Vec::with_capacity(seq.len());
        let mut traces = Vec::with_capacity(seq.len());
        for (&id, &age) in seq.token_ids.iter().zip(&seq.ages) {
            let mut trace = Vec::with_capacity(self.config.n_layer);
            logits.push(state.push_unchecked(id, age, Some(&mut trace)));
            traces.push(trace);
        }
        Ok((logits, traces))
    }
}

/// Key/value cache for incremental decoding of one sequence.
pub struct DecodeState<'m> {
    model: &'m Model,
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
    len: usize,
    last_age: f64,
    scratch: Scratch,
}

struct Scratch {
    x: Vec<f32>,
    normed: Vec<f32>,
    q: Vec<f32>,
    k: Vec<f32>,
    v: Vec<f32>,
    attn: Vec<f32>,
    proj: Vec<f32>,
    hidden: Vec<f32>,
    scores: Vec<f32>,
}

impl<'m> DecodeState<'m> {
    pub fn new(model: &'m Model) -> Self {
        let c = &model.config;
        let e = c.n_embd;
        Self {
            model,
            keys: vec![Vec::with_capacity(c.max_seq * e); c.n_layer],
            values: vec![Vec::with_capacity(c.max_seq * e); c.n_layer],
            len: 0,
            last_age: f64::NEG_INFINITY,
            scratch: Scratch {
                x: vec![0.0; e],
                normed: vec![0.0; e],
                q: vec![0.0; e],
                k: vec![0.0; e],
                v: vec![0.0; e],
                attn: vec![0.0; e],
                proj: vec![0.0; e],
                hidden: vec![0.0; 4 * e],
                scores: Vec::with_capacity(c.max_seq),
            },
        }
    }

    /// Number of positions consumed so far.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Appends one position and returns its logits.
    pub fn push(&mut self, id: TokenId, age_years: f64) -> Result<LogitVector, ModelError> {
        self.check(id, age_years)?;
        Ok(self.push_unchecked(id, age_years, None))
    }

    /// Appends one position without computing the output head.
    pub fn advance(&mut self, id: TokenId, age_years: f64) -> Result<(), ModelError> {
        self.check(id, age_years)?;
        self.advance_unchecked(id, age_years, None);
        Ok(())
    }

    fn check(&self, id: TokenId, age_years: f64) -> Result<(), ModelError> {
        let c = &self.model.config;
        if self.len >= c.max_seq {
            return Err(ModelError::SequenceTooLong {
                len: self.len + 1,
                max_seq: c.max_seq,
            });
        }
        if id >= c.vocab_size {
            return Err(ModelError::TokenOutOfRange {
                position: self.len,
                id,
                vocab_size: c.vocab_size,
            });
        }
        if !age_years.is_finite() || age_years < self.last_age {
            return Err(ModelError::InvalidAge { position: self.len });
        }
        Ok(())
    }

    fn push_unchecked(
        &mut self,
        id: TokenId,
        age_years: f64,
        trace: Option<&mut Vec<Vec<Vec<f32>>>>,
    ) -> LogitVector {
        self.advance_unchecked(id, age_years, trace);
        let m = self.model;
        let s = &mut self.scratch;
        layer_norm(&s.x, &m.lnf_gain, &m.lnf_bias, &mut s.normed);
        let mut logits = vec![0.0; m.config.vocab_size];
        matvec(&m.head, &s.normed, &mut logits);
        LogitVector(logits)
    }

    fn advance_unchecked(
        &mut self,
        id: TokenId,
        age_years: f64,
        mut trace: Option<&mut Vec<Vec<Vec<f32>>>>,
    ) {
        let m = self.model;
        let c = &m.config;
        let e = c.n_embd;
        let hd = c.head_dim();
        let scale = 1.0 / (hd as f32).sqrt();
        let s = &mut self.scratch;

        let a = normalized_age(age_years, c.age_scale);
        let emb = &m.tok_emb[id * e..(id + 1) * e];
        for ((x, &t), &w) in s.x.iter_mut().zip(emb).zip(&m.age_emb) {
            *x = t + a * w;
        }

        let n_pos = self.len + 1;
        for (layer, blk) in m.blocks.iter().enumerate() {
            layer_norm(&s.x, &blk.ln1_gain, &blk.ln1_bias, &mut s.normed);
            matvec(&blk.wq, &s.normed, &mut s.q);
            matvec(&blk.wk, &s.normed, &mut s.k);
            matvec(&blk.wv, &s.normed, &mut s.v);
            self.keys[layer].extend_from_slice(&s.k);
            self.values[layer].extend_from_slice(&s.v);
            let keys = &self.keys[layer];
            let values = &self.values[layer];

            let mut layer_trace = Vec::new();
            for h in 0..c.n_head {
                let q = &s.q[h * hd..(h + 1) * hd];
                s.scores.clear();
                for j in 0..n_pos {
                    let k = &keys[j * e + h * hd..j * e + (h + 1) * hd];
                    s.scores.push(dot(q, k) * scale);
                }
                softmax_in_place(&mut s.scores);
                let out = &mut s.attn[h * hd..(h + 1) * hd];
                out.fill(0.0);
                for (j, &p) in s.scores.iter().enumerate() {
                    let v = &values[j * e + h * hd..j * e + (h + 1) * hd];
                    for (o, &vv) in out.iter_mut().zip(v) {
                        *o += p * vv;
                    }
                }
                if trace.is_some() {
                    layer_trace.push(s.scores.clone());
                }
            }
            if let Some(t) = trace.as_deref_mut() {
                t.push(layer_trace);
            }
            matvec(&blk.wo, &s.attn, &mut s.proj);
            for (x, &p) in s.x.iter_mut().zip(&s.proj) {
                *x += p;
            }

            layer_norm(&s.x, &blk.ln2_gain, &blk.ln2_bias, &mut s.normed);
            matvec(&blk.w1, &s.normed, &mut s.hidden);
            for (hv, &b) in s.hidden.iter_mut().zip(&blk.b1) {
                *hv = gelu(*hv + b);
            }
            matvec(&blk.w2, &s.hidden, &mut s.proj);
            for ((x, &p), &b) in s.x.iter_mut().zip(&s.proj).zip(&blk.b2) {
                *x += p + b;
            }
        }
        self.len = n_pos;
        self.last_age = age_years;
    }
}

/// `out = W x` for row-major `W` of shape `[out.len(), x.len()]`.
fn matvec(w: &[f32], x: &[f32], out: &mut [f32]) {
    let n = x.len();
    for (o, row) in out.iter_mut().zip(w.chunks_exact(n)) {
        *o = dot(row, x);
    }
}

fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = 0.0f32;
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

fn layer_norm(x: &[f32], gain: &[f32], bias: &[f32], out: &mut [f32]) {
    let n = x.len() as f32;
    let mut sum = 0.0f32;
    for &v in x {
        sum += v;
    }
    let mean = sum / n;
    let mut var = 0.0f32;
    for &v in x {
        let d = v - mean;
        var += d * d;
    }
    let inv = 1.0 / (var / n + LAYER_NORM_EPS).sqrt();
    for (((o, &v), &g), &b) in out.iter_mut().zip(x).zip(gain).zip(bias) {
        *o = (v - mean) * inv * g + b;
    }
}

fn softmax_in_place(xs: &mut [f32]) {
    let mut max = f32::NEG_INFINITY;
    for &x in xs.iter() {
        max = max.max(x);
    }
    let mut sum = 0.0f32;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in xs.iter_mut() {
        *x /= sum;
    }
}

/// GELU, tanh approximation.
pub fn gelu(x: f32) -> f32 {
    const SQRT_2_OVER_PI: f32 = 0.797_884_6;
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + 0.044_715 * x * x * x)).tanh())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy::random_archive;

    fn seq(ids: &[usize], ages: &[f64]) -> EncodedSequence {
        EncodedSequence::new(ids.to_vec(), ages.to_vec())
    }

    #[test]
    fn zero_weights_give_zero_logits() {
        let a = WeightsArchive::zeros(ModelConfig::toy()).unwrap();
        let m = Model::new(&a);
        let out = m.forward(&seq(&[1, 5, 7], &[30.0, 41.5, 60.0])).unwrap();
        assert_eq!(out.len(), 3);
        for lv in &out {
            assert_eq!(lv.len(), 32);
            assert!(lv.values().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn shape_and_last_position() {
        let a = random_archive(ModelConfig::toy(), 3, 0.5).unwrap();
        let m = Model::new(&a);
        let s = seq(&[3, 4, 9, 9, 31], &[1.0, 2.0, 2.0, 50.0, 51.0]);
        let all = m.forward(&s).unwrap();
        assert_eq!(all.len(), 5);
        assert!(all.iter().all(|l| l.len() == 32 && l.values().iter().all(|x| x.is_finite())));
        assert_eq!(m.get_logits(&s).unwrap(), all[4]);
        let one = seq(&[3], &[1.0]);
        assert_eq!(m.get_logits(&one).unwrap(), m.forward(&one).unwrap()[0]);
    }

    #[test]
    fn rejects_invalid_sequences() {
        let m = Model::new(&WeightsArchive::zeros(ModelConfig::toy()).unwrap());
        assert_eq!(m.forward(&seq(&[], &[])), Err(ModelError::EmptySequence));
        assert!(matches!(
            m.forward(&seq(&[32], &[1.0])),
            Err(ModelError::TokenOutOfRange { id: 32, .. })
        ));
        assert!(matches!(
            m.forward(&seq(&[1, 2], &[5.0, 4.0])),
            Err(ModelError::InvalidAge { position: 1 })
        ));
        let long = seq(&[1; 49], &[1.0; 49]);
        assert_eq!(
            m.forward(&long),
            Err(ModelError::SequenceTooLong { len: 49, max_seq: 48 })
        );
        assert!(matches!(
            m.forward(&seq(&[1, 2], &[1.0])),
            Err(ModelError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let a = random_archive(ModelConfig::toy(), 11, 1.0).unwrap();
        let m = Model::new(&a);
        let s = seq(&[1, 2, 3, 4, 5, 6], &[0.0, 10.0, 20.0, 30.0, 40.0, 50.0]);
        let (_, traces) = m.forward_traced(&s).unwrap();
        for (pos, layers) in traces.iter().enumerate() {
            assert_eq!(layers.len(), 2);
            for heads in layers {
                assert_eq!(heads.len(), 2);
                for row in heads {
                    assert_eq!(row.len(), pos + 1);
                    let sum: f32 = row.iter().sum();
                    assert!((sum - 1.0).abs() < 1e-5, "row sum {sum}");
                }
            }
        }
    }

    #[test]
    fn incremental_push_matches_forward() {
        let a = random_archive(ModelConfig::toy(), 5, 0.7).unwrap();
        let m = Model::new(&a);
        let s = seq(&[2, 8, 8, 20], &[3.0, 4.0, 9.0, 9.5]);
        let full = m.forward(&s).unwrap();
        let mut st = DecodeState::new(&m);
        for (i, (&id, &age)) in s.token_ids.iter().zip(&s.ages).enumerate() {
            assert_eq!(st.push(id, age).unwrap(), full[i]);
        }
        assert!(matches!(st.push(1, 1.0), Err(ModelError::InvalidAge { position: 4 })));
    }

    #[test]
    fn repeated_calls_are_bit_identical() {
        let a = random_archive(ModelConfig::toy(), 9, 1.0).unwrap();
        let m = Model::new(&a);
        let s = seq(&[5, 6, 7], &[20.0, 21.0, 22.0]);
        let x: Vec<u32> = m.get_logits(&s).unwrap().0.iter().map(|v| v.to_bits()).collect();
        let y: Vec<u32> = m.get_logits(&s).unwrap().0.iter().map(|v| v.to_bits()).collect();
        assert_eq!(x, y);
    }

    #[test]
    fn gelu_reference_points() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(1.0) - 0.841_192).abs() < 1e-5);
        assert!((gelu(-1.0) + 0.158_808).abs() < 1e-5);
    }
}
