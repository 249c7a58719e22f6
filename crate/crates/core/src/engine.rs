//! Sampling and exact likelihood for a denoiser paired with an unmasking rule.
//!
//! Both procedures walk the same loop: evaluate the denoiser on the current
//! state, ask the rule which positions to reveal, reveal them. Sampling draws
//! the revealed tokens; likelihood evaluation reveals the true tokens of `x`
//! and accumulates their log-probabilities. For adaptive rules the evaluation
//! trajectory therefore depends on `x`, which is exactly what makes the single
//! path the only one with non-zero probability under the induced policy.

use itertools::Itertools;
use rand::seq::index;
use rand::Rng;
use serde::{Serialize, Serializer};

use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::numeric::{ln_factorial, log_sum_exp};
use crate::rng::{stream, Purpose};
use crate::rules::{RuleState, UnmaskingRule};
use crate::seq::{
    to_one_based, CleanSequence, MaskedSequence, OrderedPartition, TokenId, TokenProbabilityMatrix,
};

/// Default cap on `L` for procedures that enumerate all `L!` orders.
pub const DEFAULT_LEN_CAP: usize = 6;

/// One realized unmasking trajectory and its log-probability terms.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub partition: OrderedPartition,
    /// `(position, ln P_ℓ[x_ℓ])` pairs, grouped by step.
    pub per_step_logprobs: Vec<Vec<(usize, f64)>>,
    pub nfe: usize,
    pub total_loglik: f64,
    /// Some evaluated row had no support and fell back to uniform.
    pub support_miss: bool,
}

impl TrajectoryRecord {
    pub fn nll(&self) -> f64 {
        -self.total_loglik
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

fn finite_or_null<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else {
        s.serialize_none()
    }
}

impl Serialize for TrajectoryRecord {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        #[derive(Serialize)]
        struct Term(usize, #[serde(serialize_with = "finite_or_null")] f64);
        #[derive(Serialize)]
        struct Out {
            partition: Vec<Vec<usize>>,
            logprobs: Vec<Vec<Term>>,
            nfe: usize,
            #[serde(serialize_with = "finite_or_null")]
            loglik: f64,
        }
        Out {
            partition: self.partition.to_one_based(),
            logprobs: self
                .per_step_logprobs
                .iter()
                .map(|step| step.iter().map(|&(p, lp)| Term(to_one_based(p), lp)).collect())
                .collect(),
            nfe: self.nfe,
            loglik: self.total_loglik,
        }
        .serialize(s)
    }
}

fn check_sequence<D: Denoiser + ?Sized>(d: &D, x: &CleanSequence) -> Result<()> {
    if x.len() != d.seq_len() {
        return Err(Error::LengthMismatch {
            expected: d.seq_len(),
            got: x.len(),
        });
    }
    CleanSequence::new(x.tokens().to_vec(), d.vocab_size()).map(|_| ())
}

/// Drives the shared evaluate → select → reveal loop. `choose` returns the
/// token to reveal at a position given the step's matrix.
fn run_trajectory<D, R, F>(d: &D, rule: &R, mut choose: F) -> Result<(MaskedSequence, TrajectoryRecord)>
where
    D: Denoiser + ?Sized,
    R: UnmaskingRule + ?Sized,
    F: FnMut(usize, usize, &TokenProbabilityMatrix) -> TokenId,
{
    let len = d.seq_len();
    let mut z = MaskedSequence::all_masked(len, d.vocab_size());
    let mut state = RuleState::default();
    let mut parts = Vec::new();
    let mut steps = Vec::new();
    let mut total = 0.0;
    let mut support_miss = false;

    while z.num_masked() > 0 {
        // a correct rule reveals at least one position per step
        if parts.len() >= len {
            return Err(Error::InvalidSelection {
                rule: rule.describe(),
                selected: Vec::new(),
                masked: z.masked_positions().into_iter().collect(),
            });
        }
        let p = d.evaluate(&z);
        support_miss |= p.support_miss();
        let (selected, next_state) = rule.select(&z, &p, &state)?;
        if selected.is_empty() || selected.iter().any(|&l| l >= len || !z.is_masked(l)) {
            return Err(Error::InvalidSelection {
                rule: rule.describe(),
                selected: selected.into_iter().collect(),
                masked: z.masked_positions().into_iter().collect(),
            });
        }
        let step = parts.len();
        let mut terms = Vec::with_capacity(selected.len());
        let mut revealed = Vec::with_capacity(selected.len());
        // every position of a step is scored against the same P before revealing
        for &pos in &selected {
            let tok = choose(step, pos, &p);
            let lp = p.log_prob(pos, tok);
            total += lp;
            terms.push((pos, lp));
            revealed.push((pos, tok));
        }
        for (pos, tok) in revealed {
            z.reveal_in_place(pos, tok)?;
        }
        steps.push(terms);
        parts.push(selected.into_iter().collect::<Vec<_>>());
        state = next_state;
    }

    let nfe = parts.len();
    Ok((
        z,
        TrajectoryRecord {
            partition: OrderedPartition::from_parts_unchecked(parts),
            per_step_logprobs: steps,
            nfe,
            total_loglik: total,
            support_miss,
        },
    ))
}

/// Exact `log p^{π^F}(x)`: follow the rule's trajectory revealing the true
/// tokens of `x` and sum the log-probabilities of each revealed token.
///
/// A zero-probability token yields `-inf` rather than an error.
pub fn duel_exact_loglik<D, R>(d: &D, rule: &R, x: &CleanSequence) -> Result<TrajectoryRecord>
where
    D: Denoiser + ?Sized,
    R: UnmaskingRule + ?Sized,
{
    check_sequence(d, x)?;
    let truth = x.tokens();
    run_trajectory(d, rule, |_, pos, _| truth[pos]).map(|(_, rec)| rec)
}

/// Inverse-CDF draw over a row in token-id order. Zero-probability tokens are
/// never returned.
pub fn sample_token<R: Rng + ?Sized>(p: &TokenProbabilityMatrix, pos: usize, rng: &mut R) -> TokenId {
    let u: f64 = rng.random();
    let mut cum = 0.0;
    let mut last_positive = 0;
    for (tok, lp) in p.log_row(pos).iter().enumerate() {
        let prob = lp.exp();
        if prob > 0.0 {
            cum += prob;
            last_positive = tok;
            if u < cum {
                return tok as TokenId;
            }
        }
    }
    last_positive as TokenId
}

/// Generates one sequence. Each step draws from the stream keyed by
/// `(seed, index, step)`, one uniform per selected position in position order.
pub fn duel_sample_indexed<D, R>(d: &D, rule: &R, seed: u64, index: u64) -> Result<(CleanSequence, TrajectoryRecord)>
where
    D: Denoiser + ?Sized,
    R: UnmaskingRule + ?Sized,
{
    let mut current: Option<(usize, crate::rng::StreamRng)> = None;
    let (z, rec) = run_trajectory(d, rule, |step, pos, p| {
        if current.as_ref().is_none_or(|(s, _)| *s != step) {
            current = Some((step, stream(Purpose::Sample, seed, index, step as u64)));
        }
        let rng = &mut current.as_mut().expect("set above").1;
        sample_token(p, pos, rng)
    })?;
    Ok((z.to_clean().expect("trajectory reveals every position"), rec))
}

pub fn duel_sample<D, R>(d: &D, rule: &R, seed: u64) -> Result<(CleanSequence, TrajectoryRecord)>
where
    D: Denoiser + ?Sized,
    R: UnmaskingRule + ?Sized,
{
    duel_sample_indexed(d, rule, seed, 0)
}

/// `ln p(x)` along a fixed one-position-per-step order.
pub fn sequential_path_loglik<D: Denoiser + ?Sized>(d: &D, x: &CleanSequence, order: &[usize]) -> f64 {
    let mut z = MaskedSequence::all_masked(x.len(), d.vocab_size());
    let mut total = 0.0;
    for &pos in order {
        let tok = x.tokens()[pos];
        total += d.evaluate(&z).log_prob(pos, tok);
        z.reveal_in_place(pos, tok).expect("order is a permutation");
    }
    total
}

fn check_len_cap(len: usize, cap: usize) -> Result<()> {
    if len > cap {
        return Err(Error::EnumerationCap {
            what: "L",
            value: len,
            cap,
        });
    }
    Ok(())
}

fn all_path_logliks<D: Denoiser + ?Sized>(d: &D, x: &CleanSequence) -> Vec<f64> {
    (0..x.len())
        .permutations(x.len())
        .map(|order| sequential_path_loglik(d, x, &order))
        .collect()
}

/// Any-order ELBO loss: the average over all `L!` orders of the sequential
/// negative log-likelihood.
pub fn aoarm_elbo_exhaustive<D: Denoiser + ?Sized>(d: &D, x: &CleanSequence) -> Result<f64> {
    aoarm_elbo_exhaustive_capped(d, x, DEFAULT_LEN_CAP)
}

pub fn aoarm_elbo_exhaustive_capped<D: Denoiser + ?Sized>(d: &D, x: &CleanSequence, cap: usize) -> Result<f64> {
    check_sequence(d, x)?;
    check_len_cap(x.len(), cap)?;
    let paths = all_path_logliks(d, x);
    Ok(-paths.iter().sum::<f64>() / paths.len() as f64)
}

/// Exact `ln p^{π^unif}(x)` for uniform sequential unmasking:
/// `ln Σ_σ (1/L!) p(x | σ)` over all permutations.
pub fn uniform_policy_exact_loglik<D: Denoiser + ?Sized>(d: &D, x: &CleanSequence) -> Result<f64> {
    uniform_policy_exact_loglik_capped(d, x, DEFAULT_LEN_CAP)
}

pub fn uniform_policy_exact_loglik_capped<D: Denoiser + ?Sized>(d: &D, x: &CleanSequence, cap: usize) -> Result<f64> {
    check_sequence(d, x)?;
    check_len_cap(x.len(), cap)?;
    Ok(log_sum_exp(&all_path_logliks(d, x)) - ln_factorial(x.len()))
}

/// Masks a uniformly random size-`n` subset of positions.
pub fn forward_mask(x: &CleanSequence, vocab: usize, n: usize, seed: u64) -> Result<MaskedSequence> {
    if n > x.len() {
        return Err(Error::InvalidConfig(format!(
            "cannot mask {n} positions of a length-{} sequence",
            x.len()
        )));
    }
    let mut z = MaskedSequence::from_clean(x, vocab);
    let mut ids = z.to_ids();
    let mut rng = stream(Purpose::ForwardMask, seed, 0, 0);
    for pos in index::sample(&mut rng, x.len(), n) {
        ids[pos] = vocab as TokenId;
    }
    z = MaskedSequence::from_ids(&ids, vocab)?;
    Ok(z)
}
