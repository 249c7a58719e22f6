//! The brute-force check suite run by `duel verify`.
//!
//! Every check compares a fast path against an enumeration on instances kept
//! within [`EnumCaps`]. Lengths are clamped to the caps, so a cap of `L = 1`
//! yields a degenerate suite that passes trivially.

use std::collections::BTreeSet;
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use crate::denoiser::{fit_tabular, Denoiser, TabularBayesDenoiser, TrainableDenoiser};
use crate::engine::{aoarm_elbo_exhaustive_capped, duel_exact_loglik, duel_sample_indexed, uniform_policy_exact_loglik_capped};
use crate::error::Result;
use crate::fixtures::{ab_ba, markov_corpus, trained_denoiser};
use crate::oracle::{
    elbo_mc_exhaustive_mean, enumerate_ordered_partitions_capped, induced_distribution, marginal_bruteforce,
    masking_order_histogram, oracle_block_search, ordered_bell, DistributionTable, EnumCaps, Policy,
};
use crate::rules::{RuleSpec, RuleState, UnmaskingRule};
use crate::seq::{validate_partition, CleanSequence, MaskedSequence, TokenProbabilityMatrix};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub max_error: f64,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifySummary {
    pub caps: EnumCaps,
    pub checks: Vec<CheckResult>,
}

impl VerifySummary {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

/// A rule that never selects anything. Used as a negative control.
#[derive(Debug, Clone, Copy, Default)]
pub struct EmptySelectionRule;

impl UnmaskingRule for EmptySelectionRule {
    fn select(
        &self,
        _z: &MaskedSequence,
        _p: &TokenProbabilityMatrix,
        state: &RuleState,
    ) -> Result<(BTreeSet<usize>, RuleState)> {
        Ok((BTreeSet::new(), state.clone()))
    }

    fn describe(&self) -> String {
        "empty".into()
    }
}

/// One representative of every rule family valid at `len`.
pub fn rule_variants(len: usize) -> Vec<RuleSpec> {
    let mut rules = vec![
        RuleSpec::LeftToRight { k: 1 },
        RuleSpec::LeftToRight { k: 2 },
        RuleSpec::GreedyConfidence { k: 1 },
        RuleSpec::GreedyConfidence { k: 2 },
        RuleSpec::ProbMargin { k: 1 },
        RuleSpec::ProbMargin { k: 2 },
        RuleSpec::ConfThreshold { mu: 0.5 },
        RuleSpec::ConfThreshold { mu: 0.9 },
        RuleSpec::Klass { mu: 0.6, nu: 0.05 },
        RuleSpec::Klass { mu: 0.9, nu: 0.5 },
        RuleSpec::FixedOrder((0..len).rev().collect()),
    ];
    if len >= 2 && len.is_multiple_of(2) {
        rules.push(RuleSpec::BlockRestrict {
            size: len / 2,
            inner: Box::new(RuleSpec::GreedyConfidence { k: 1 }),
        });
        rules.push(RuleSpec::BlockRestrict {
            size: len / 2,
            inner: Box::new(RuleSpec::ConfThreshold { mu: 0.7 }),
        });
    }
    rules
}

/// Sequential (one position per step) members of [`rule_variants`].
pub fn sequential_rule_variants(len: usize) -> Vec<RuleSpec> {
    let mut rules = vec![
        RuleSpec::LeftToRight { k: 1 },
        RuleSpec::GreedyConfidence { k: 1 },
        RuleSpec::ProbMargin { k: 1 },
        RuleSpec::FixedOrder((0..len).rev().collect()),
    ];
    if len >= 2 && len.is_multiple_of(2) {
        rules.push(RuleSpec::BlockRestrict {
            size: len / 2,
            inner: Box::new(RuleSpec::ProbMargin { k: 1 }),
        });
    }
    rules
}

/// An exact and an inexact denoiser on the same sticky Markov corpus.
pub fn denoiser_pair(len: usize, vocab: usize, seed: u64) -> Result<(TabularBayesDenoiser, TrainableDenoiser)> {
    let corpus = markov_corpus(24, len, vocab, 0.7, seed);
    let tab = fit_tabular(&corpus, vocab, 0.0)?;
    let trained = trained_denoiser(&corpus, vocab, 6, 600, seed)?;
    Ok((tab, trained))
}

/// `|a - b|`, treating two `-inf`s as equal.
pub fn log_diff(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs()
    }
}

struct Check {
    name: &'static str,
    max_error: f64,
    failures: Vec<String>,
    notes: Vec<String>,
}

impl Check {
    fn new(name: &'static str) -> Self {
        Self {
            name,
            max_error: 0.0,
            failures: Vec::new(),
            notes: Vec::new(),
        }
    }

    fn error(&mut self, err: f64, tol: f64, what: impl FnOnce() -> String) {
        if err.is_nan() || err > self.max_error {
            self.max_error = err;
        }
        if err.is_nan() || err > tol {
            self.failures.push(what());
        }
    }

    fn fail(&mut self, what: String) {
        self.failures.push(what);
    }

    fn finish(self, started: Instant) -> CheckResult {
        let elapsed = format!("{:.2}s", started.elapsed().as_secs_f64());
        let detail = if self.failures.is_empty() {
            let mut d = self.notes;
            d.push(elapsed);
            d.join("; ")
        } else {
            let shown: Vec<String> = self.failures.iter().take(5).cloned().collect();
            format!("{} failure(s): {}", self.failures.len(), shown.join("; "))
        };
        CheckResult {
            name: self.name.to_string(),
            passed: self.failures.is_empty(),
            max_error: self.max_error,
            detail,
        }
    }
}

type CheckFn = fn(&EnumCaps) -> Result<Check>;

fn partition_counts(caps: &EnumCaps) -> Result<Check> {
    let mut c = Check::new("partition-counts");
    for len in 1..=caps.max_len.min(6) {
        let parts = enumerate_ordered_partitions_capped(len, caps)?;
        let distinct: BTreeSet<_> = parts.iter().collect();
        let want = ordered_bell(len);
        c.error((parts.len() as f64 - want as f64).abs(), 0.0, || {
            format!("L={len}: {} partitions, expected {want}", parts.len())
        });
        if distinct.len() != parts.len() {
            c.fail(format!("L={len}: duplicate partitions"));
        }
        for p in &parts {
            if let Err(e) = validate_partition(p.parts(), len) {
                c.fail(format!("L={len}: invalid partition {p}: {e}"));
            }
        }
    }
    Ok(c)
}

fn collapse(caps: &EnumCaps) -> Result<Check> {
    let mut c = Check::new("collapse");
    for (len, vocab) in [(2, 2), (3, 2), (2, 3)] {
        let len = len.min(caps.max_len);
        let (tab, trained) = denoiser_pair(len, vocab, 11)?;
        let denoisers: [&dyn Denoiser; 2] = [&tab, &trained];
        for d in denoisers {
            for rule in rule_variants(len) {
                for x in CleanSequence::enumerate_all(len, vocab) {
                    let fast = duel_exact_loglik(d, &rule, &x)?.total_loglik;
                    let brute = marginal_bruteforce(d, Policy::Deterministic(&rule), &x, caps)?;
                    c.error(log_diff(fast, brute.log_marginal), 1e-9, || {
                        format!("{rule} x={:?}: fast {fast} vs brute {}", x.tokens(), brute.log_marginal)
                    });
                    if brute.support_terms != 1 {
                        c.fail(format!("{rule} x={:?}: {} partitions in support", x.tokens(), brute.support_terms));
                    }
                }
            }
        }
    }
    Ok(c)
}

fn normalization(caps: &EnumCaps) -> Result<Check> {
    let mut c = Check::new("normalization");
    for (len, vocab) in [(3, 2), (2, 3)] {
        let len = len.min(caps.max_len);
        let (tab, trained) = denoiser_pair(len, vocab, 5)?;
        let denoisers: [&dyn Denoiser; 2] = [&tab, &trained];
        for d in denoisers {
            for rule in rule_variants(len) {
                let table = induced_distribution(d, &rule, caps)?;
                c.error((table.total - 1.0).abs(), 1e-8, || {
                    format!("{rule} L={len} V={vocab}: total {}", table.total)
                });
            }
        }
    }
    Ok(c)
}

fn sampling(caps: &EnumCaps) -> Result<Check> {
    let mut c = Check::new("sampling-consistency");
    let (len, vocab, draws) = (3.min(caps.max_len), 2, 100_000u64);
    let (_, trained) = denoiser_pair(len, vocab, 3)?;
    for rule in [RuleSpec::GreedyConfidence { k: 1 }, RuleSpec::ConfThreshold { mu: 0.7 }] {
        let table = induced_distribution(&trained, &rule, caps)?;
        let samples = (0..draws)
            .into_par_iter()
            .map(|i| duel_sample_indexed(&trained, &rule, 2024, i).map(|(x, _)| x))
            .collect::<Result<Vec<_>>>()?;
        let tv = table.tv_distance(&DistributionTable::empirical(&samples, len, vocab));
        c.error(tv, 0.01, || format!("{rule}: TV {tv}"));
    }
    Ok(c)
}

fn policy_dependence(caps: &EnumCaps) -> Result<Check> {
    let mut c = Check::new("policy-dependence");
    if caps.max_len < 2 {
        c.notes.push("skipped below L=2".into());
        return Ok(c);
    }
    let d = trained_denoiser(&ab_ba(), 2, 6, 600, 1)?;
    let a = induced_distribution(&d, &RuleSpec::FixedOrder(vec![0, 1]), caps)?;
    let b = induced_distribution(&d, &RuleSpec::FixedOrder(vec![1, 0]), caps)?;
    let tv = a.tv_distance(&b);
    c.notes.push(format!("TV {tv:.3e}"));
    if tv <= 1e-4 {
        c.fail(format!("fixed orders agree: TV {tv}"));
    }
    Ok(c)
}

fn rule_invariance(caps: &EnumCaps) -> Result<Check> {
    let mut c = Check::new("rule-invariance");
    let (len, vocab) = (3.min(caps.max_len), 2);
    let d = fit_tabular(&markov_corpus(24, len, vocab, 0.7, 8), vocab, 0.0)?;
    for rule in sequential_rule_variants(len) {
        let table = induced_distribution(&d, &rule, caps)?;
        for (x, p) in &table.entries {
            let want = d.log_joint(x).exp();
            c.error((p - want).abs(), 1e-10, || format!("{rule} x={:?}: {p} vs {want}", x.tokens()));
        }
    }
    Ok(c)
}

fn jensen(caps: &EnumCaps) -> Result<Check> {
    let mut c = Check::new("jensen");
    let mut strict = 0usize;
    for (len, vocab) in [(2, 2), (3, 2), (2, 3)] {
        let len = len.min(caps.max_len);
        let (_, trained) = denoiser_pair(len, vocab, 13)?;
        for x in CleanSequence::enumerate_all(len, vocab) {
            let elbo = -aoarm_elbo_exhaustive_capped(&trained, &x, caps.max_len)?;
            let exact = uniform_policy_exact_loglik_capped(&trained, &x, caps.max_len)?;
            c.error((elbo - exact).max(0.0), 1e-12, || format!("x={:?}: ELBO {elbo} > {exact}", x.tokens()));
            if exact - elbo > 1e-12 {
                strict += 1;
            }
        }
    }
    c.notes.push(format!("{strict} strict"));
    if strict == 0 && caps.max_len >= 2 {
        c.fail("no strict inequality observed".into());
    }
    Ok(c)
}

fn elbo_unbiased(caps: &EnumCaps) -> Result<Check> {
    let mut c = Check::new("elbo-unbiased");
    for (len, vocab) in [(2, 2), (3, 2), (4, 2)] {
        let len = len.min(caps.max_len);
        let (tab, trained) = denoiser_pair(len, vocab, 17)?;
        let smoothed = fit_tabular(&markov_corpus(10, len, vocab, 0.6, 3), vocab, 0.5)?;
        let denoisers: [&dyn Denoiser; 3] = [&tab, &trained, &smoothed];
        for d in denoisers {
            for x in markov_corpus(4, len, vocab, 0.5, 21) {
                let mc = elbo_mc_exhaustive_mean(d, &x, caps)?;
                let perm = aoarm_elbo_exhaustive_capped(d, &x, caps.max_len)?;
                if mc.is_infinite() && perm.is_infinite() {
                    continue;
                }
                c.error((mc - perm).abs(), 1e-10, || format!("x={:?}: {mc} vs {perm}", x.tokens()));
            }
        }
    }
    Ok(c)
}

fn uniform_orders(caps: &EnumCaps) -> Result<Check> {
    let mut c = Check::new("uniform-orders");
    let len = 3.min(caps.max_order_len).min(caps.max_len);
    let trials = 100_000u64;
    let hist = masking_order_histogram(len, trials, 7, caps)?;
    let orders = (1..=len).product::<usize>();
    let p = 1.0 / orders as f64;
    let se = (p * (1.0 - p) / trials as f64).sqrt();
    if hist.len() != orders {
        c.fail(format!("{} of {orders} orders observed", hist.len()));
    }
    for (order, n) in &hist {
        let z = if se > 0.0 {
            (*n as f64 / trials as f64 - p).abs() / se
        } else {
            0.0
        };
        c.error(z, 3.0, || format!("order {order:?}: {n} hits, {z:.2} SE"));
    }
    Ok(c)
}

fn uniform_marginal(caps: &EnumCaps) -> Result<Check> {
    let mut c = Check::new("uniform-marginal");
    for (len, vocab) in [(2, 2), (3, 2), (2, 3)] {
        let len = len.min(caps.max_len);
        let (tab, trained) = denoiser_pair(len, vocab, 19)?;
        let denoisers: [&dyn Denoiser; 2] = [&tab, &trained];
        for d in denoisers {
            for x in CleanSequence::enumerate_all(len, vocab) {
                let brute = marginal_bruteforce(d, Policy::UniformSequential, &x, caps)?.log_marginal;
                let perm = uniform_policy_exact_loglik_capped(d, &x, caps.max_len)?;
                c.error(log_diff(brute, perm), 1e-9, || format!("x={:?}: {brute} vs {perm}", x.tokens()));
            }
        }
    }
    Ok(c)
}

fn progress_with(caps: &EnumCaps, faulty: bool) -> Result<Check> {
    let mut c = Check::new("progress");
    let (len, vocab) = (3.min(caps.max_len), 2);
    let (_, trained) = denoiser_pair(len, vocab, 23)?;
    let mut rules: Vec<(String, Box<dyn UnmaskingRule>)> = rule_variants(len)
        .into_iter()
        .map(|r| (r.to_string(), Box::new(r) as Box<dyn UnmaskingRule>))
        .collect();
    if faulty {
        rules.push(("empty".into(), Box::new(EmptySelectionRule)));
    }
    for (name, rule) in &rules {
        for x in CleanSequence::enumerate_all(len, vocab) {
            match duel_exact_loglik(&trained, rule.as_ref(), &x) {
                Ok(rec) => {
                    if rec.nfe == 0 || rec.nfe > len || validate_partition(rec.partition.parts(), len).is_err() {
                        c.fail(format!("{name}: invalid trajectory {}", rec.partition));
                    }
                }
                Err(e) => {
                    c.fail(format!("{name} x={:?}: {e}", x.tokens()));
                    break;
                }
            }
        }
    }
    Ok(c)
}

fn progress(caps: &EnumCaps) -> Result<Check> {
    progress_with(caps, false)
}

fn oracle_dominance(caps: &EnumCaps) -> Result<Check> {
    let mut c = Check::new("oracle-dominance");
    let (len, vocab) = (4.min(caps.max_len), 2);
    let block = if len % 2 == 0 { 2 } else { 1 };
    let corpus = markov_corpus(16, len, vocab, 0.7, 29);
    let trained = trained_denoiser(&corpus, vocab, 6, 600, 29)?;
    let inner = [
        RuleSpec::LeftToRight { k: 1 },
        RuleSpec::GreedyConfidence { k: 1 },
        RuleSpec::ProbMargin { k: 1 },
    ];
    for x in &corpus {
        let oracle = oracle_block_search(&trained, x, block, caps)?.nll;
        for r in &inner {
            let rule = RuleSpec::BlockRestrict {
                size: block,
                inner: Box::new(r.clone()),
            };
            let nll = duel_exact_loglik(&trained, &rule, x)?.nll();
            c.error((oracle - nll).max(0.0), 1e-12, || {
                format!("{rule} x={:?}: oracle {oracle} > {nll}", x.tokens())
            });
        }
    }
    Ok(c)
}

const CHECKS: [(&str, CheckFn); 12] = [
    ("partition_counts", partition_counts),
    ("collapse", collapse),
    ("normalization", normalization),
    ("sampling", sampling),
    ("policy_dependence", policy_dependence),
    ("rule_invariance", rule_invariance),
    ("jensen", jensen),
    ("elbo_unbiased", elbo_unbiased),
    ("uniform_orders", uniform_orders),
    ("uniform_marginal", uniform_marginal),
    ("progress", progress),
    ("oracle_dominance", oracle_dominance),
];

/// Runs every check. With `inject_faulty`, the progress check also drives
/// [`EmptySelectionRule`] and must fail.
pub fn run_verify(caps: &EnumCaps, inject_faulty: bool) -> Result<VerifySummary> {
    let mut checks = Vec::with_capacity(CHECKS.len());
    for (name, check) in CHECKS {
        let started = Instant::now();
        let c = if inject_faulty && name == "progress" {
            progress_with(caps, true)?
        } else {
            check(caps)?
        };
        checks.push(c.finish(started));
    }
    Ok(VerifySummary { caps: *caps, checks })
}
