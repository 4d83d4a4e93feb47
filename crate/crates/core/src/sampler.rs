//! Competing-exponential next-event sampling.
//!
//! Every candidate token `i` draws a waiting time `t_i = -exp(-logit_i) * ln(u_i)`,
//! i.e. an exponential variate with rate `exp(logit_i)`, in years. The token
//! with the smallest waiting time is the next event. Because the minimum of
//! independent exponentials lands on `k` with probability `rate_k / sum(rates)`,
//! the selection law is the softmax of the logits, which
//! [`next_event_distribution`] computes analytically.

use std::collections::BTreeSet;

use thiserror::Error;

use crate::model::LogitVector;
use crate::vocabulary::TokenId;

pub const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Debug, Error, PartialEq)]
pub enum SampleError {
    #[error("every token is masked")]
    AllMasked,
    #[error("no finite waiting time to select from")]
    NoFiniteTime,
    #[error("logit for token {0} is not finite")]
    NonFiniteLogit(TokenId),
}

/// splitmix64 output finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of the `index`-th independent sample stream derived from `seed`.
///
/// Equal to the `index + 1`-th raw output of a splitmix64 generator seeded
/// with `seed`, so it depends only on `(seed, index)`.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    mix64(seed.wrapping_add(index.wrapping_add(1).wrapping_mul(GOLDEN_GAMMA)))
}

/// Portable splitmix64 stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RandomStream {
    state: u64,
}

impl RandomStream {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn state(&self) -> u64 {
        self.state
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        mix64(self.state)
    }

    /// Uniform in the open interval (0, 1); see [`uniform_from_bits`].
    pub fn next_uniform(&mut self) -> f64 {
        uniform_from_bits(self.next_u64())
    }
}

/// `((z >> 11) + 0.5) * 2^-53`, evaluated in `f64`.
///
/// For `z >> 11 == 2^53 - 1` the sum rounds up to `2^53` and the product to
/// exactly 1.0; that single input is mapped to the largest `f64` below 1 so
/// the result stays inside the open interval.
pub fn uniform_from_bits(z: u64) -> f64 {
    const SCALE: f64 = 1.0 / (1u64 << 53) as f64;
    let u = ((z >> 11) as f64 + 0.5) * SCALE;
    if u < 1.0 {
        u
    } else {
        1.0 - SCALE
    }
}

/// Waiting time in years for a token with the given logit and uniform draw.
pub fn waiting_time(logit: f64, u: f64) -> f64 {
    -(-logit).exp() * u.ln()
}

/// Token ids excluded from sampling.
pub type Mask = BTreeSet<TokenId>;

/// One waiting time per token; masked tokens get `+inf`. Uniforms are
/// consumed in ascending token-id order, one per unmasked token.
pub fn sample_waiting_times(
    logits: &LogitVector,
    rng: &mut RandomStream,
    mask: &Mask,
) -> Result<Vec<f64>, SampleError> {
    check_logits(logits, mask)?;
    Ok(logits
        .values()
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            if mask.contains(&i) {
                f64::INFINITY
            } else {
                waiting_time(l as f64, rng.next_uniform())
            }
        })
        .collect())
}

fn check_logits(logits: &LogitVector, mask: &Mask) -> Result<(), SampleError> {
    let mut any_open = false;
    for (i, l) in logits.values().iter().enumerate() {
        if mask.contains(&i) {
            continue;
        }
        if !l.is_finite() {
            return Err(SampleError::NonFiniteLogit(i));
        }
        any_open = true;
    }
    if any_open {
        Ok(())
    } else {
        Err(SampleError::AllMasked)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleOutcome {
    pub token: TokenId,
    pub wait_years: f64,
}

/// Argmin over waiting times; ties go to the lowest token id.
pub fn select_next(times: &[f64]) -> Result<SampleOutcome, SampleError> {
    let mut best: Option<SampleOutcome> = None;
    for (token, &t) in times.iter().enumerate() {
        if !t.is_finite() {
            continue;
        }
        if best.is_none_or(|b| t < b.wait_years) {
            best = Some(SampleOutcome {
                token,
                wait_years: t,
            });
        }
    }
    best.ok_or(SampleError::NoFiniteTime)
}

/// Draws the next event: waiting times for all unmasked tokens, then argmin.
pub fn sample_next(
    logits: &LogitVector,
    rng: &mut RandomStream,
    mask: &Mask,
) -> Result<SampleOutcome, SampleError> {
    let times = sample_waiting_times(logits, rng, mask)?;
    select_next(&times)
}

/// Masked softmax of the logits: the exact law of [`sample_next`]'s token.
pub fn next_event_distribution(logits: &LogitVector, mask: &Mask) -> Result<Vec<f64>, SampleError> {
    check_logits(logits, mask)?;
    let open = |i: &usize| !mask.contains(i);
    let max = logits
        .values()
        .iter()
        .enumerate()
        .filter(|(i, _)| open(i))
        .map(|(_, &l)| l as f64)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<f64> = logits
        .values()
        .iter()
        .enumerate()
        .map(|(i, &l)| if open(&i) { (l as f64 - max).exp() } else { 0.0 })
        .collect();
    let total: f64 = probs.iter().sum();
    for p in &mut probs {
        *p /= total;
    }
    Ok(probs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lv(xs: &[f32]) -> LogitVector {
        LogitVector(xs.to_vec())
    }

    #[test]
    fn splitmix64_reference_vector() {
        // Reference splitmix64 (Vigna), seed 0.
        let mut r = RandomStream::new(0);
        assert_eq!(r.next_u64(), 0xE220_A839_7B1D_CDAF);
        assert_eq!(r.next_u64(), 0x6E78_9E6A_A1B9_65F4);
        assert_eq!(r.next_u64(), 0x06C4_5D18_8009_454F);
    }

    #[test]
    fn uniforms_open_interval() {
        let mut r = RandomStream::new(0xDEAD_BEEF);
        for _ in 0..1_000_000 {
            let u = r.next_uniform();
            assert!(u > 0.0 && u < 1.0);
        }
        // extreme raw values still land inside (0, 1)
        assert_eq!(uniform_from_bits(0), 2f64.powi(-54));
        assert_eq!(uniform_from_bits(u64::MAX), 1.0 - 2f64.powi(-53));
        assert!(uniform_from_bits(u64::MAX - (1 << 11)) < 1.0);
    }

    #[test]
    fn same_seed_same_stream() {
        let mut a = RandomStream::new(12345);
        let mut b = RandomStream::new(12345);
        for _ in 0..1000 {
            assert_eq!(a.next_uniform().to_bits(), b.next_uniform().to_bits());
        }
    }

    #[test]
    fn derive_seed_matches_stream() {
        let mut r = RandomStream::new(99);
        for k in 0..5 {
            assert_eq!(derive_seed(99, k), r.next_u64());
        }
    }

    #[test]
    fn formula_spot_checks() {
        let u = (-1.0f64).exp();
        assert_eq!(waiting_time(0.0, u), 1.0);
        assert_eq!(waiting_time(2f64.ln(), u), 0.5);
    }

    #[test]
    fn masked_tokens_get_infinity_and_consume_nothing() {
        let logits = lv(&[0.0, 1.0, 2.0]);
        let mask: Mask = [1].into();
        let mut r = RandomStream::new(7);
        let t = sample_waiting_times(&logits, &mut r, &mask).unwrap();
        assert_eq!(t[1], f64::INFINITY);
        let mut r2 = RandomStream::new(7);
        assert_eq!(t[0], waiting_time(0.0, r2.next_uniform()));
        assert_eq!(t[2], waiting_time(2.0, r2.next_uniform()));
        assert_eq!(r, r2);
    }

    #[test]
    fn all_masked_is_an_error() {
        let mask: Mask = [0, 1].into();
        let mut r = RandomStream::new(1);
        assert_eq!(
            sample_waiting_times(&lv(&[0.0, 0.0]), &mut r, &mask),
            Err(SampleError::AllMasked)
        );
        assert_eq!(
            next_event_distribution(&lv(&[0.0, 0.0]), &mask),
            Err(SampleError::AllMasked)
        );
    }

    #[test]
    fn select_next_argmin_and_ties() {
        let o = select_next(&[f64::INFINITY, 0.3, 0.7]).unwrap();
        assert_eq!((o.token, o.wait_years), (1, 0.3));
        assert_eq!(select_next(&[0.5, 0.5]).unwrap().token, 0);
        assert_eq!(
            select_next(&[f64::INFINITY, f64::INFINITY]),
            Err(SampleError::NoFiniteTime)
        );
    }

    #[test]
    fn distribution_closed_forms() {
        let p = next_event_distribution(&lv(&[0.0; 4]), &Mask::new()).unwrap();
        assert_eq!(p, vec![0.25; 4]);
        let p = next_event_distribution(&lv(&[3f32.ln(), 0.0]), &Mask::new()).unwrap();
        assert!((p[0] - 0.75).abs() < 1e-7 && (p[1] - 0.25).abs() < 1e-7);
        let p = next_event_distribution(&lv(&[1.0, 2.0, 3.0]), &[2].into()).unwrap();
        assert_eq!(p[2], 0.0);
        assert!((p[0] + p[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn distribution_is_stable_for_large_logits() {
        let p = next_event_distribution(&lv(&[1000.0, 999.0]), &Mask::new()).unwrap();
        assert!(p.iter().all(|x| x.is_finite()));
        assert!((p[0] - 1.0 / (1.0 + (-1f64).exp())).abs() < 1e-12);
    }

    #[test]
    fn non_finite_logit_rejected_unless_masked() {
        let mut r = RandomStream::new(0);
        assert_eq!(
            sample_next(&lv(&[0.0, f32::NAN]), &mut r, &Mask::new()),
            Err(SampleError::NonFiniteLogit(1))
        );
        assert!(sample_next(&lv(&[0.0, f32::NAN]), &mut r, &[1].into()).is_ok());
    }
}
