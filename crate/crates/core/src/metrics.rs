//! Corpus-level metrics and report aggregation.
//!
//! Perplexity is always per token over the whole corpus: `exp(Σ nll / Σ L)`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::Serialize;

use crate::denoiser::{elbo_loss_mc_with, Denoiser};
use crate::engine::{aoarm_elbo_exhaustive_capped, duel_exact_loglik};
use crate::error::{Error, Result};
use crate::numeric::ln_factorial;
use crate::oracle::{oracle_block_search, EnumCaps};
use crate::rng::{stream, Purpose};
use crate::rules::RuleSpec;
use crate::seq::CleanSequence;

/// `exp(total_nll / token_count)`.
///
/// # Panics
/// If `token_count` is zero.
pub fn perplexity(total_nll: f64, token_count: usize) -> f64 {
    assert!(token_count > 0, "perplexity of zero tokens");
    (total_nll / token_count as f64).exp()
}

/// Percentage of the ELBO-to-ARM perplexity gap removed by exact evaluation.
pub fn gap_closed(ppl_elbo: f64, ppl_duel: f64, ppl_arm: f64) -> Result<f64> {
    let delta_elbo = ppl_elbo - ppl_arm;
    if delta_elbo.is_nan() || delta_elbo <= 0.0 {
        return Err(Error::IllDefined(delta_elbo));
    }
    Ok(100.0 * (delta_elbo - (ppl_duel - ppl_arm)) / delta_elbo)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GapReport {
    pub ppl_elbo: f64,
    pub ppl_duel: f64,
    pub ppl_arm: f64,
    pub delta_elbo: f64,
    pub delta_duel: f64,
    /// `None` when `delta_elbo <= 0`.
    pub gap_closed_pct: Option<f64>,
}

impl GapReport {
    pub fn new(ppl_elbo: f64, ppl_duel: f64, ppl_arm: f64) -> Self {
        Self {
            ppl_elbo,
            ppl_duel,
            ppl_arm,
            delta_elbo: ppl_elbo - ppl_arm,
            delta_duel: ppl_duel - ppl_arm,
            gap_closed_pct: gap_closed(ppl_elbo, ppl_duel, ppl_arm).ok(),
        }
    }

    pub fn is_ill_defined(&self) -> bool {
        self.gap_closed_pct.is_none()
    }
}

/// How per-sequence NLL is obtained.
#[derive(Debug, Clone, PartialEq)]
pub enum EvalMethod {
    /// Exact likelihood of the induced distribution of a rule.
    Duel(RuleSpec),
    /// Mean of `samples` single-draw ELBO losses.
    ElboMc { samples: usize, seed: u64 },
    /// Average sequential NLL over all `L!` orders.
    ElboExhaustive,
    /// Left-to-right chain rule.
    ArmExact,
    /// Per-block minimum over within-block orders.
    Oracle { block: usize },
}

impl EvalMethod {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Duel(_) => "duel",
            Self::ElboMc { .. } => "elbo-mc",
            Self::ElboExhaustive => "elbo-exhaustive",
            Self::ArmExact => "arm-exact",
            Self::Oracle { .. } => "oracle",
        }
    }

    pub fn rule(&self) -> Option<RuleSpec> {
        match self {
            Self::Duel(r) => Some(r.clone()),
            Self::ArmExact => Some(RuleSpec::LeftToRight { k: 1 }),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Self::Duel(r) => r.validate(),
            Self::ElboMc { samples: 0, .. } => Err(Error::InvalidConfig("mc-samples must be at least 1".into())),
            Self::Oracle { block: 0 } => Err(Error::InvalidConfig("block size must be at least 1".into())),
            _ => Ok(()),
        }
    }
}

/// Method names accepted on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MethodKind {
    Duel,
    ElboMc,
    ElboExhaustive,
    ArmExact,
    Oracle,
}

impl FromStr for MethodKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "duel" => Self::Duel,
            "elbo-mc" => Self::ElboMc,
            "elbo-exhaustive" => Self::ElboExhaustive,
            "arm-exact" => Self::ArmExact,
            "oracle" => Self::Oracle,
            _ => return Err(Error::InvalidConfig(format!("unknown method {s:?}"))),
        })
    }
}

impl fmt::Display for MethodKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Duel => "duel",
            Self::ElboMc => "elbo-mc",
            Self::ElboExhaustive => "elbo-exhaustive",
            Self::ArmExact => "arm-exact",
            Self::Oracle => "oracle",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SequenceRecord {
    pub index: usize,
    pub nll: f64,
    pub length: usize,
    /// Denoiser evaluations spent on this sequence.
    pub nfe: u64,
    pub support_miss: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Aggregates {
    pub total_nll: f64,
    pub token_count: usize,
    pub nll_per_token: f64,
    pub perplexity: f64,
    pub mean_nfe: f64,
}

impl Aggregates {
    pub fn from_records(records: &[SequenceRecord]) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let total_nll: f64 = records.iter().map(|r| r.nll).sum();
        let token_count: usize = records.iter().map(|r| r.length).sum();
        let mean_nfe = records.iter().map(|r| r.nfe as f64).sum::<f64>() / records.len() as f64;
        Ok(Self {
            total_nll,
            token_count,
            nll_per_token: total_nll / token_count as f64,
            perplexity: perplexity(total_nll, token_count),
            mean_nfe,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvaluationReport {
    pub method: String,
    pub rule: Option<String>,
    pub k: Option<usize>,
    pub mu: Option<f64>,
    pub nu: Option<f64>,
    pub block: Option<usize>,
    pub mc_samples: Option<usize>,
    pub seed: Option<u64>,
    /// Target NFE of the setting, when one was requested or is implied.
    pub nfe_target: Option<f64>,
    /// Resolved run configuration of the caller, embedded verbatim.
    pub config: serde_json::Value,
    pub sequences: Vec<SequenceRecord>,
    pub aggregates: Aggregates,
    /// Reserved for metrics computed by external tools.
    pub external_metrics: BTreeMap<String, f64>,
}

fn evaluate_one<D: Denoiser + ?Sized>(
    d: &D,
    method: &EvalMethod,
    caps: &EnumCaps,
    index: usize,
    x: &CleanSequence,
) -> Result<SequenceRecord> {
    let len = x.len();
    let (nll, nfe, support_miss) = match method {
        EvalMethod::Duel(rule) => {
            let rec = duel_exact_loglik(d, rule, x)?;
            (rec.nll(), rec.nfe as u64, rec.support_miss)
        }
        EvalMethod::ArmExact => {
            let rec = duel_exact_loglik(d, &RuleSpec::LeftToRight { k: 1 }, x)?;
            (rec.nll(), rec.nfe as u64, rec.support_miss)
        }
        EvalMethod::ElboMc { samples, seed } => {
            if x.len() != d.seq_len() {
                return Err(Error::LengthMismatch {
                    expected: d.seq_len(),
                    got: x.len(),
                });
            }
            let total: f64 = (0..*samples)
                .map(|j| elbo_loss_mc_with(d, x, &mut stream(Purpose::ElboDraw, *seed, index as u64, j as u64)))
                .sum();
            (total / *samples as f64, *samples as u64, false)
        }
        EvalMethod::ElboExhaustive => {
            let nll = aoarm_elbo_exhaustive_capped(d, x, caps.max_len)?;
            let orders = ln_factorial(len).exp().round() as u64;
            (nll, orders * len as u64, false)
        }
        EvalMethod::Oracle { block } => {
            let r = oracle_block_search(d, x, *block, caps)?;
            let perms = ln_factorial(*block).exp().round() as u64;
            (r.nll, (len / block) as u64 * perms * *block as u64, false)
        }
    };
    Ok(SequenceRecord {
        index,
        nll,
        length: len,
        nfe,
        support_miss,
    })
}

/// Evaluates every sequence and aggregates in index order, so the result is
/// the same with and without `parallel`.
pub fn evaluate_corpus<D: Denoiser + ?Sized>(
    d: &D,
    method: &EvalMethod,
    corpus: &[CleanSequence],
    parallel: bool,
    caps: &EnumCaps,
) -> Result<EvaluationReport> {
    method.validate()?;
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if let Some(rule) = method.rule() {
        rule.validate_for_len(d.seq_len())?;
    }
    let sequences: Vec<SequenceRecord> = if parallel {
        corpus
            .par_iter()
            .enumerate()
            .map(|(i, x)| evaluate_one(d, method, caps, i, x))
            .collect::<Result<_>>()?
    } else {
        corpus
            .iter()
            .enumerate()
            .map(|(i, x)| evaluate_one(d, method, caps, i, x))
            .collect::<Result<_>>()?
    };
    let aggregates = Aggregates::from_records(&sequences)?;
    let rule = method.rule();
    let (mc_samples, seed) = match method {
        EvalMethod::ElboMc { samples, seed } => (Some(*samples), Some(*seed)),
        _ => (None, None),
    };
    let block = match method {
        EvalMethod::Oracle { block } => Some(*block),
        _ => rule.as_ref().and_then(RuleSpec::block_size),
    };
    Ok(EvaluationReport {
        method: method.name().to_string(),
        rule: rule.as_ref().map(ToString::to_string),
        k: rule.as_ref().and_then(RuleSpec::k),
        mu: rule.as_ref().and_then(RuleSpec::mu),
        nu: rule.as_ref().and_then(RuleSpec::nu),
        block,
        mc_samples,
        seed,
        nfe_target: rule
            .as_ref()
            .and_then(|r| r.fixed_nfe(d.seq_len()))
            .map(|n| n as f64),
        config: serde_json::Value::Null,
        sequences,
        aggregates,
        external_metrics: BTreeMap::new(),
    })
}

/// `exp` of the mean per-token NLL of `samples` under the left-to-right
/// factorization of `reference`.
pub fn generative_perplexity<D: Denoiser + ?Sized>(samples: &[CleanSequence], reference: &D) -> Result<f64> {
    let report = evaluate_corpus(reference, &EvalMethod::ArmExact, samples, false, &EnumCaps::default())?;
    Ok(report.aggregates.perplexity)
}

/// Shannon entropy (nats) of the unigram token distribution of `samples`.
pub fn token_entropy(samples: &[CleanSequence]) -> Result<f64> {
    let mut counts: BTreeMap<u32, u64> = BTreeMap::new();
    for t in samples.iter().flat_map(|s| s.tokens()) {
        *counts.entry(*t).or_default() += 1;
    }
    let total: u64 = counts.values().sum();
    if total == 0 {
        return Err(Error::EmptyCorpus);
    }
    let n = total as f64;
    Ok(counts
        .values()
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum())
}

/// A rule family swept over one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct RuleFamily {
    /// One of `l2r`, `greedy`, `margin`, `thresh`, `klass`.
    pub name: String,
    /// KL bound used by `klass`.
    pub nu: f64,
    /// Optional block restriction.
    pub block: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SweepValue {
    K(usize),
    Mu(f64),
    /// Calibrate the confidence threshold to this mean NFE.
    TargetNfe(f64),
}

impl RuleFamily {
    pub fn new(name: &str, nu: f64, block: Option<usize>) -> Result<Self> {
        match name {
            "l2r" | "greedy" | "margin" | "thresh" | "klass" => Ok(Self {
                name: name.to_string(),
                nu,
                block,
            }),
            _ => Err(Error::InvalidRule(format!("unknown rule family {name:?}"))),
        }
    }

    pub fn is_adaptive(&self) -> bool {
        matches!(self.name.as_str(), "thresh" | "klass")
    }

    /// The concrete rule for one parameter value.
    pub fn rule(&self, value: f64) -> Result<RuleSpec> {
        let k = || -> Result<usize> {
            if value >= 1.0 && value.fract() == 0.0 {
                Ok(value as usize)
            } else {
                Err(Error::InvalidRule(format!("{} needs an integer k, got {value}", self.name)))
            }
        };
        let inner = match self.name.as_str() {
            "l2r" => RuleSpec::LeftToRight { k: k()? },
            "greedy" => RuleSpec::GreedyConfidence { k: k()? },
            "margin" => RuleSpec::ProbMargin { k: k()? },
            "thresh" => RuleSpec::ConfThreshold { mu: value },
            "klass" => RuleSpec::Klass { mu: value, nu: self.nu },
            other => return Err(Error::InvalidRule(format!("unknown rule family {other:?}"))),
        };
        let rule = match self.block {
            Some(size) => RuleSpec::BlockRestrict {
                size,
                inner: Box::new(inner),
            },
            None => inner,
        };
        rule.validate()?;
        Ok(rule)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepPoint {
    pub nfe_target: Option<f64>,
    pub nfe_realized: f64,
    pub report: EvaluationReport,
}

fn mean_nfe<D: Denoiser + ?Sized>(d: &D, rule: &RuleSpec, corpus: &[CleanSequence]) -> Result<f64> {
    let mut total = 0usize;
    for x in corpus {
        total += duel_exact_loglik(d, rule, x)?.nfe;
    }
    Ok(total as f64 / corpus.len() as f64)
}

/// Bisection on the threshold `mu` of an adaptive family for the setting whose
/// mean NFE on `corpus` is closest to `target`. Ties keep the smaller `mu`.
pub fn calibrate_threshold<D: Denoiser + ?Sized>(
    d: &D,
    family: &RuleFamily,
    corpus: &[CleanSequence],
    target: f64,
) -> Result<f64> {
    if !family.is_adaptive() {
        return Err(Error::InvalidRule(format!("{} has no threshold", family.name)));
    }
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    // mean NFE grows with mu: higher thresholds admit fewer positions per step
    let (mut lo, mut hi) = (1e-6, 1.0);
    let mut best = (f64::INFINITY, hi);
    for mu in [lo, hi] {
        let err = (mean_nfe(d, &family.rule(mu)?, corpus)? - target).abs();
        if err < best.0 || (err == best.0 && mu < best.1) {
            best = (err, mu);
        }
    }
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        let nfe = mean_nfe(d, &family.rule(mid)?, corpus)?;
        let err = (nfe - target).abs();
        if err < best.0 || (err == best.0 && mid < best.1) {
            best = (err, mid);
        }
        if nfe < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(best.1)
}

/// One exact-likelihood evaluation per setting of the family's parameter.
pub fn nfe_sweep<D: Denoiser + ?Sized>(
    d: &D,
    family: &RuleFamily,
    values: &[SweepValue],
    corpus: &[CleanSequence],
    parallel: bool,
) -> Result<Vec<SweepPoint>> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let caps = EnumCaps::default();
    values
        .iter()
        .map(|value| {
            let (rule, target) = match *value {
                SweepValue::K(k) => {
                    let rule = family.rule(k as f64)?;
                    let target = rule.fixed_nfe(d.seq_len()).map(|n| n as f64);
                    (rule, target)
                }
                SweepValue::Mu(mu) => (family.rule(mu)?, None),
                SweepValue::TargetNfe(t) => (family.rule(calibrate_threshold(d, family, corpus, t)?)?, Some(t)),
            };
            let mut report = evaluate_corpus(d, &EvalMethod::Duel(rule), corpus, parallel, &caps)?;
            report.nfe_target = target;
            Ok(SweepPoint {
                nfe_target: target,
                nfe_realized: report.aggregates.mean_nfe,
                report,
            })
        })
        .collect()
}

/// One row of the flat CSV table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CsvRow {
    pub method: String,
    pub rule: String,
    pub k: Option<usize>,
    pub mu: Option<f64>,
    pub nu: Option<f64>,
    pub nfe_target: Option<f64>,
    pub nfe_realized: f64,
    /// Per-token NLL.
    pub nll: f64,
    pub ppl: f64,
    pub gap_closed: Option<f64>,
}

impl CsvRow {
    pub fn from_report(report: &EvaluationReport, gap_closed: Option<f64>) -> Self {
        Self {
            method: report.method.clone(),
            rule: report.rule.clone().unwrap_or_default(),
            k: report.k,
            mu: report.mu,
            nu: report.nu,
            nfe_target: report.nfe_target,
            nfe_realized: report.aggregates.mean_nfe,
            nll: report.aggregates.nll_per_token,
            ppl: report.aggregates.perplexity,
            gap_closed,
        }
    }
}

/// Columns: method, rule, k, mu, nu, nfe_target, nfe_realized, nll, ppl, gap_closed.
pub fn rows_to_csv(rows: &[CsvRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    if rows.is_empty() {
        w.write_record([
            "method",
            "rule",
            "k",
            "mu",
            "nu",
            "nfe_target",
            "nfe_realized",
            "nll",
            "ppl",
            "gap_closed",
        ])
        .map_err(|e| Error::Serialization(e.to_string()))?;
    }
    for row in rows {
        w.serialize(row).map_err(|e| Error::Serialization(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Serialization(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Serialization(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::fit_tabular;
    use crate::TabularBayesDenoiser;

    fn seq(t: &[u32]) -> CleanSequence {
        CleanSequence::new(t.to_vec(), 2).unwrap()
    }

    fn aa_bb() -> (TabularBayesDenoiser, Vec<CleanSequence>) {
        let corpus = vec![seq(&[0, 0]), seq(&[1, 1])];
        (fit_tabular(&corpus, 2, 0.0).unwrap(), corpus)
    }

    #[test]
    fn perplexity_examples() {
        assert_eq!(perplexity(0.0, 7), 1.0);
        assert!((perplexity(5.0 * 2f64.ln(), 5) - 2.0).abs() < 1e-15);
        assert!(perplexity(3.0, 4) < perplexity(3.1, 4));
    }

    #[test]
    fn toy_corpus_perplexity_is_sqrt_two() {
        let (d, corpus) = aa_bb();
        let r = evaluate_corpus(
            &d,
            &EvalMethod::Duel(RuleSpec::GreedyConfidence { k: 1 }),
            &corpus,
            false,
            &EnumCaps::default(),
        )
        .unwrap();
        assert!((r.aggregates.perplexity - 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(r.aggregates.token_count, 4);
    }

    #[test]
    fn gap_closed_examples() {
        assert!((gap_closed(24.10, 22.58, 17.54).unwrap() - 23.17).abs() < 0.01);
        assert!((gap_closed(20.73, 19.73, 17.54).unwrap() - 31.35).abs() < 0.01);
        assert_eq!(gap_closed(30.0, 20.0, 20.0).unwrap(), 100.0);
        assert!(matches!(gap_closed(20.0, 19.0, 20.0), Err(Error::IllDefined(_))));
        assert!(GapReport::new(19.0, 19.5, 20.0).is_ill_defined());
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(token_entropy(&[seq(&[1, 1, 1])]).unwrap(), 0.0);
        assert!((token_entropy(&[seq(&[0, 1])]).unwrap() - 2f64.ln()).abs() < 1e-15);
        let e = token_entropy(&[seq(&[0, 0, 0, 1])]).unwrap();
        assert!((e - (-0.75 * 0.75f64.ln() - 0.25 * 0.25f64.ln())).abs() < 1e-15);
        assert_eq!(token_entropy(&[]), Err(Error::EmptyCorpus));
    }

    #[test]
    fn generative_perplexity_examples() {
        let (d, _) = aa_bb();
        // second token is certain given the first, first is a coin flip
        let g = generative_perplexity(&vec![seq(&[0, 0]); 5], &d).unwrap();
        assert!((g - 2f64.sqrt()).abs() < 1e-12);
        let point = fit_tabular(&[seq(&[1, 0])], 2, 0.0).unwrap();
        assert_eq!(generative_perplexity(&[seq(&[1, 0])], &point).unwrap(), 1.0);
    }

    #[test]
    fn sweep_on_length_eight() {
        let corpus: Vec<CleanSequence> = (0..6u32)
            .map(|i| CleanSequence::new((0..8).map(|j| (i + j / 3) % 2).collect(), 2).unwrap())
            .collect();
        let d = fit_tabular(&corpus, 2, 0.0).unwrap();
        let family = RuleFamily::new("greedy", 0.0, None).unwrap();
        let values: Vec<SweepValue> = [1, 2, 4, 8].map(SweepValue::K).to_vec();
        let points = nfe_sweep(&d, &family, &values, &corpus, false).unwrap();
        let nfes: Vec<f64> = points.iter().map(|p| p.nfe_realized).collect();
        assert_eq!(nfes, vec![8.0, 4.0, 2.0, 1.0]);
        assert!(points[0].report.aggregates.perplexity <= points[3].report.aggregates.perplexity);
        assert_eq!(nfe_sweep(&d, &family, &values, &[], false), Err(Error::EmptyCorpus));
    }

    #[test]
    fn parallel_matches_serial() {
        let (d, corpus) = aa_bb();
        let m = EvalMethod::ElboMc { samples: 7, seed: 3 };
        let a = evaluate_corpus(&d, &m, &corpus, false, &EnumCaps::default()).unwrap();
        let b = evaluate_corpus(&d, &m, &corpus, true, &EnumCaps::default()).unwrap();
        assert_eq!(a, b);
        assert!(evaluate_corpus(&d, &EvalMethod::ElboMc { samples: 0, seed: 3 }, &corpus, false, &EnumCaps::default()).is_err());
    }

    #[test]
    fn csv_columns_are_fixed() {
        let (d, corpus) = aa_bb();
        let r = evaluate_corpus(&d, &EvalMethod::ArmExact, &corpus, false, &EnumCaps::default()).unwrap();
        let csv = rows_to_csv(&[CsvRow::from_report(&r, None)]).unwrap();
        let header = csv.lines().next().unwrap();
        assert_eq!(header, "method,rule,k,mu,nu,nfe_target,nfe_realized,nll,ppl,gap_closed");
        assert!(csv.lines().nth(1).unwrap().starts_with("arm-exact,l2r:k=1,1,,,2.0,2.0,"));
    }
}
