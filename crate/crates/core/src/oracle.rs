//! Brute-force counterparts of the fast paths, for small instances only.
//!
//! Everything here enumerates: ordered partitions of `[L]`, every sequence in
//! `V^L`, every permutation of a block. Caps on the enumeration sizes are
//! preconditions checked up front ([`EnumCaps`]).

use std::collections::{BTreeMap, BTreeSet};

use itertools::Itertools;
use rand::Rng;
use serde::Serialize;

use crate::denoiser::{masked_nll, Denoiser};
use crate::engine::duel_exact_loglik;
use crate::error::{Error, Result};
use crate::numeric::{binomial, log_sum_exp};
use crate::rng::{stream, Purpose};
use crate::rules::{induced_policy_probability, RuleState, UnmaskingRule};
use crate::seq::{to_one_based, CleanSequence, MaskedSequence, OrderedPartition};

/// Environment variable overriding the length cap of the verification suite.
pub const ENUM_CAP_ENV: &str = "DUEL_ENUM_CAP";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct EnumCaps {
    /// Longest sequence for partition / permutation enumeration.
    pub max_len: usize,
    /// Largest `V^L` for induced-distribution tables.
    pub max_table: usize,
    /// Largest block for per-block permutation search.
    pub max_block: usize,
    /// Longest sequence for masking-order histograms.
    pub max_order_len: usize,
}

impl Default for EnumCaps {
    fn default() -> Self {
        Self {
            max_len: 6,
            max_table: 4096,
            max_block: 5,
            max_order_len: 5,
        }
    }
}

impl EnumCaps {
    /// Defaults, with `max_len` taken from `DUEL_ENUM_CAP` when set.
    pub fn from_env() -> Result<Self> {
        let mut caps = Self::default();
        if let Ok(v) = std::env::var(ENUM_CAP_ENV) {
            caps.max_len = v
                .trim()
                .parse()
                .map_err(|_| Error::InvalidConfig(format!("{ENUM_CAP_ENV}={v:?} is not a length")))?;
        }
        Ok(caps)
    }

    fn check(what: &'static str, value: usize, cap: usize) -> Result<()> {
        if value > cap {
            return Err(Error::EnumerationCap { what, value, cap });
        }
        Ok(())
    }
}

/// Ordered Bell (Fubini) numbers by `a(n) = Σ_{k=1}^{n} C(n,k)·a(n-k)`.
pub fn ordered_bell(n: usize) -> u64 {
    let mut a = vec![1u64; n + 1];
    for m in 1..=n {
        a[m] = (1..=m).map(|k| binomial(m, k) * a[m - k]).sum();
    }
    a[n]
}

pub fn enumerate_ordered_partitions(len: usize) -> Result<Vec<OrderedPartition>> {
    enumerate_ordered_partitions_capped(len, &EnumCaps::default())
}

/// Every ordered set partition of `0..len`.
pub fn enumerate_ordered_partitions_capped(len: usize, caps: &EnumCaps) -> Result<Vec<OrderedPartition>> {
    EnumCaps::check("L", len, caps.max_len)?;
    fn rec(remaining: u32, prefix: &mut Vec<Vec<usize>>, out: &mut Vec<OrderedPartition>) {
        if remaining == 0 {
            out.push(OrderedPartition::from_parts_unchecked(prefix.clone()));
            return;
        }
        // all non-empty submasks of `remaining`
        let mut sub = remaining;
        while sub != 0 {
            let part: Vec<usize> = (0..32).filter(|b| sub & (1 << b) != 0).collect();
            prefix.push(part);
            rec(remaining & !sub, prefix, out);
            prefix.pop();
            sub = (sub - 1) & remaining;
        }
    }
    let mut out = Vec::new();
    if len > 0 {
        rec((1u32 << len) - 1, &mut Vec::new(), &mut out);
    }
    Ok(out)
}

/// Position-selection policy used in brute-force marginalization.
#[derive(Clone, Copy)]
pub enum Policy<'a> {
    /// Dirac on the rule's selection.
    Deterministic(&'a dyn UnmaskingRule),
    /// One uniformly chosen masked position per step.
    UniformSequential,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Marginal {
    /// `ln Σ_σ p(x, σ)`.
    pub log_marginal: f64,
    /// Partitions whose position-selection probability is non-zero.
    pub support_terms: usize,
    /// Partitions whose joint term `p(x, σ)` is non-zero.
    pub nonzero_terms: usize,
    pub partitions: usize,
}

/// Sums the factorized joint `Π_t π(σ_t | x^{σ<t}) · Π_{ℓ∈σ_t} P_ℓ[x_ℓ]` over
/// every ordered partition and returns its logarithm.
pub fn marginal_bruteforce<D: Denoiser + ?Sized>(
    d: &D,
    policy: Policy<'_>,
    x: &CleanSequence,
    caps: &EnumCaps,
) -> Result<Marginal> {
    if x.len() != d.seq_len() {
        return Err(Error::LengthMismatch {
            expected: d.seq_len(),
            got: x.len(),
        });
    }
    let partitions = enumerate_ordered_partitions_capped(x.len(), caps)?;
    let mut terms = Vec::new();
    let mut support_terms = 0;
    for sigma in &partitions {
        if let Some(log_term) = joint_log_term(d, policy, x, sigma)? {
            support_terms += 1;
            terms.push(log_term);
        }
    }
    Ok(Marginal {
        log_marginal: log_sum_exp(&terms),
        support_terms,
        nonzero_terms: terms.iter().filter(|t| **t > f64::NEG_INFINITY).count(),
        partitions: partitions.len(),
    })
}

/// `ln p(x, σ)`, or `None` when the policy gives `σ` zero probability.
fn joint_log_term<D: Denoiser + ?Sized>(
    d: &D,
    policy: Policy<'_>,
    x: &CleanSequence,
    sigma: &OrderedPartition,
) -> Result<Option<f64>> {
    let mut z = MaskedSequence::all_masked(x.len(), d.vocab_size());
    let mut state = RuleState::default();
    let mut log_term = 0.0;
    for part in sigma.parts() {
        let p = d.evaluate(&z);
        let log_policy = match policy {
            Policy::Deterministic(rule) => {
                let part_set: BTreeSet<usize> = part.iter().copied().collect();
                let prob = induced_policy_probability(rule, &part_set, &z, &p, &state)?;
                state = rule.select(&z, &p, &state)?.1;
                prob.ln()
            }
            Policy::UniformSequential => {
                if part.len() == 1 {
                    -(z.num_masked() as f64).ln()
                } else {
                    f64::NEG_INFINITY
                }
            }
        };
        if log_policy == f64::NEG_INFINITY {
            return Ok(None);
        }
        log_term += log_policy;
        for &pos in part {
            log_term += p.log_prob(pos, x.tokens()[pos]);
        }
        for &pos in part {
            z.reveal_in_place(pos, x.tokens()[pos])?;
        }
    }
    Ok(Some(log_term))
}

/// A probability table over `V^L` in lexicographic order.
#[derive(Debug, Clone, PartialEq)]
pub struct DistributionTable {
    pub entries: Vec<(CleanSequence, f64)>,
    pub total: f64,
}

impl DistributionTable {
    pub fn from_entries(entries: Vec<(CleanSequence, f64)>) -> Self {
        let total = entries.iter().map(|(_, p)| p).sum();
        Self { entries, total }
    }

    /// Empirical frequencies of `samples` over all of `V^L`.
    pub fn empirical(samples: &[CleanSequence], len: usize, vocab: usize) -> Self {
        let mut counts: BTreeMap<&CleanSequence, usize> = BTreeMap::new();
        for s in samples {
            *counts.entry(s).or_default() += 1;
        }
        let n = samples.len().max(1) as f64;
        Self::from_entries(
            CleanSequence::enumerate_all(len, vocab)
                .into_iter()
                .map(|x| {
                    let c = counts.get(&x).copied().unwrap_or(0) as f64;
                    (x, c / n)
                })
                .collect(),
        )
    }

    pub fn get(&self, x: &CleanSequence) -> f64 {
        self.entries
            .binary_search_by(|(s, _)| s.cmp(x))
            .map_or(0.0, |i| self.entries[i].1)
    }

    /// Total-variation distance; both tables must range over the same set.
    pub fn tv_distance(&self, other: &Self) -> f64 {
        assert_eq!(self.entries.len(), other.entries.len(), "tables over different sets");
        0.5 * self
            .entries
            .iter()
            .zip(&other.entries)
            .map(|((a, p), (b, q))| {
                debug_assert_eq!(a, b);
                (p - q).abs()
            })
            .sum::<f64>()
    }
}

/// `exp(duel_exact_loglik(x))` for every `x ∈ V^L`.
pub fn induced_distribution<D, R>(d: &D, rule: &R, caps: &EnumCaps) -> Result<DistributionTable>
where
    D: Denoiser + ?Sized,
    R: UnmaskingRule + ?Sized,
{
    let (len, vocab) = (d.seq_len(), d.vocab_size());
    let size = (vocab as f64).powi(len as i32);
    if size > caps.max_table as f64 {
        return Err(Error::EnumerationCap {
            what: "V^L",
            value: size.min(usize::MAX as f64) as usize,
            cap: caps.max_table,
        });
    }
    let entries = CleanSequence::enumerate_all(len, vocab)
        .into_iter()
        .map(|x| Ok((x.clone(), duel_exact_loglik(d, rule, &x)?.total_loglik.exp())))
        .collect::<Result<Vec<_>>>()?;
    Ok(DistributionTable::from_entries(entries))
}

/// Simulates the forward process (mask one uniformly chosen unmasked position
/// per step) and counts the reversed, i.e. unmasking, orders.
pub fn masking_order_histogram(len: usize, trials: u64, seed: u64, caps: &EnumCaps) -> Result<BTreeMap<Vec<usize>, u64>> {
    EnumCaps::check("L", len, caps.max_order_len)?;
    let mut hist = BTreeMap::new();
    for trial in 0..trials {
        let mut rng = stream(Purpose::OrderHistogram, seed, trial, 0);
        let mut unmasked: Vec<usize> = (0..len).collect();
        let mut masking = Vec::with_capacity(len);
        while !unmasked.is_empty() {
            let i = rng.random_range(0..unmasked.len());
            masking.push(unmasked.remove(i));
        }
        masking.reverse();
        *hist.entry(masking).or_insert(0) += 1;
    }
    Ok(hist)
}

/// Exact mean of the single-draw masked-diffusion loss over every
/// `(n, mask set)` pair, weighted as the sampler draws them.
pub fn elbo_mc_exhaustive_mean<D: Denoiser + ?Sized>(d: &D, x: &CleanSequence, caps: &EnumCaps) -> Result<f64> {
    let len = x.len();
    EnumCaps::check("L", len, caps.max_len)?;
    let mut mean = 0.0;
    for n in 1..=len {
        let sets = binomial(len, n) as f64;
        let sum: f64 = (0..len).combinations(n).map(|s| masked_nll(d, x, &s)).sum();
        mean += sum / (len as f64 * sets);
    }
    Ok(mean)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlockOracle {
    /// 1-based block index.
    pub index: usize,
    /// 1-based positions in unmasking order.
    pub best_perm: Vec<usize>,
    pub nll: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleSearch {
    pub nll: f64,
    pub blocks: Vec<BlockOracle>,
}

/// For each block of `block` positions (earlier blocks revealed with the true
/// tokens, later ones masked), tries every within-block order and keeps the
/// one with the lowest NLL. Ties keep the lexicographically first order.
pub fn oracle_block_search<D: Denoiser + ?Sized>(
    d: &D,
    x: &CleanSequence,
    block: usize,
    caps: &EnumCaps,
) -> Result<OracleSearch> {
    let len = x.len();
    if len != d.seq_len() {
        return Err(Error::LengthMismatch {
            expected: d.seq_len(),
            got: len,
        });
    }
    if block == 0 || !len.is_multiple_of(block) {
        return Err(Error::BlockMismatch { block, len });
    }
    EnumCaps::check("L'", block, caps.max_block)?;
    let vocab = d.vocab_size();
    let mut prefix = MaskedSequence::all_masked(len, vocab);
    let mut blocks = Vec::with_capacity(len / block);
    let mut total = 0.0;
    for b in 0..len / block {
        let positions: Vec<usize> = (b * block..(b + 1) * block).collect();
        let mut best: Option<(f64, Vec<usize>)> = None;
        for perm in positions.iter().copied().permutations(block) {
            let mut z = prefix.clone();
            let mut nll = 0.0;
            for &pos in &perm {
                nll -= d.evaluate(&z).log_prob(pos, x.tokens()[pos]);
                z.reveal_in_place(pos, x.tokens()[pos])?;
            }
            if best.as_ref().is_none_or(|(b, _)| nll < *b) {
                best = Some((nll, perm));
            }
        }
        let (nll, perm) = best.expect("at least one permutation");
        total += nll;
        blocks.push(BlockOracle {
            index: b + 1,
            best_perm: perm.into_iter().map(to_one_based).collect(),
            nll,
        });
        for &pos in &positions {
            prefix.reveal_in_place(pos, x.tokens()[pos])?;
        }
    }
    Ok(OracleSearch { nll: total, blocks })
}
