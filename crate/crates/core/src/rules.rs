//! Deterministic unmasking rules.
//!
//! A rule maps the current state (and the denoiser's predictions for it) to a
//! non-empty subset of the masked positions. KLASS and block restriction carry
//! a little trajectory state ([`RuleState`]); along any realized trajectory
//! from the all-masked start that state is itself a function of the revealed
//! tokens, so the induced policy stays deterministic.
//!
//! Ties (equal scores, equal top-two probabilities) go to the lowest position.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::seq::{from_one_based, to_one_based, MaskedSequence, TokenProbabilityMatrix};

#[derive(Debug, Clone, PartialEq)]
pub enum RuleSpec {
    LeftToRight { k: usize },
    GreedyConfidence { k: usize },
    ProbMargin { k: usize },
    ConfThreshold { mu: f64 },
    Klass { mu: f64, nu: f64 },
    /// Reveals one position per step in the given (0-based) order.
    FixedOrder(Vec<usize>),
    /// Applies `inner` within consecutive blocks of `size` positions,
    /// processing blocks left to right.
    BlockRestrict { size: usize, inner: Box<RuleSpec> },
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RuleState {
    /// Predictions from the previous step (KLASS only).
    pub previous: Option<TokenProbabilityMatrix>,
    /// Index of the block currently being unmasked (block restriction only).
    pub block_cursor: usize,
}

/// Anything that can pick the next positions to reveal.
pub trait UnmaskingRule: Send + Sync {
    fn select(
        &self,
        z: &MaskedSequence,
        p: &TokenProbabilityMatrix,
        state: &RuleState,
    ) -> Result<(BTreeSet<usize>, RuleState)>;

    fn describe(&self) -> String;
}

impl RuleSpec {
    /// Parameter checks that do not depend on the sequence length.
    pub fn validate(&self) -> Result<()> {
        match self {
            RuleSpec::LeftToRight { k } | RuleSpec::GreedyConfidence { k } | RuleSpec::ProbMargin { k } => {
                if *k == 0 {
                    return Err(Error::InvalidRule("k must be at least 1".into()));
                }
            }
            RuleSpec::ConfThreshold { mu } => check_mu(*mu)?,
            RuleSpec::Klass { mu, nu } => {
                check_mu(*mu)?;
                if !(*nu >= 0.0 && nu.is_finite()) {
                    return Err(Error::InvalidRule(format!("nu must be >= 0, got {nu}")));
                }
            }
            RuleSpec::FixedOrder(order) => {
                if order.is_empty() {
                    return Err(Error::InvalidRule("empty fixed order".into()));
                }
            }
            RuleSpec::BlockRestrict { size, inner } => {
                if *size == 0 {
                    return Err(Error::InvalidRule("block size must be at least 1".into()));
                }
                if matches!(**inner, RuleSpec::BlockRestrict { .. }) {
                    return Err(Error::InvalidRule("nested block restriction".into()));
                }
                inner.validate()?;
            }
        }
        Ok(())
    }

    /// Full validation against a sequence length.
    pub fn validate_for_len(&self, len: usize) -> Result<()> {
        self.validate()?;
        match self {
            RuleSpec::FixedOrder(order) => {
                let mut sorted = order.clone();
                sorted.sort_unstable();
                if sorted != (0..len).collect::<Vec<_>>() {
                    return Err(Error::InvalidRule(format!(
                        "fixed order is not a permutation of 1..={len}"
                    )));
                }
            }
            RuleSpec::BlockRestrict { size, inner } => {
                if !len.is_multiple_of(*size) {
                    return Err(Error::BlockMismatch { block: *size, len });
                }
                inner.validate_for_len(len)?;
            }
            _ => {}
        }
        Ok(())
    }

    pub fn family(&self) -> &'static str {
        match self {
            RuleSpec::LeftToRight { .. } => "l2r",
            RuleSpec::GreedyConfidence { .. } => "greedy",
            RuleSpec::ProbMargin { .. } => "margin",
            RuleSpec::ConfThreshold { .. } => "thresh",
            RuleSpec::Klass { .. } => "klass",
            RuleSpec::FixedOrder(_) => "fixed",
            RuleSpec::BlockRestrict { .. } => "block",
        }
    }

    pub fn k(&self) -> Option<usize> {
        match self {
            RuleSpec::LeftToRight { k } | RuleSpec::GreedyConfidence { k } | RuleSpec::ProbMargin { k } => Some(*k),
            RuleSpec::FixedOrder(_) => Some(1),
            RuleSpec::BlockRestrict { inner, .. } => inner.k(),
            _ => None,
        }
    }

    pub fn mu(&self) -> Option<f64> {
        match self {
            RuleSpec::ConfThreshold { mu } | RuleSpec::Klass { mu, .. } => Some(*mu),
            RuleSpec::BlockRestrict { inner, .. } => inner.mu(),
            _ => None,
        }
    }

    pub fn nu(&self) -> Option<f64> {
        match self {
            RuleSpec::Klass { nu, .. } => Some(*nu),
            RuleSpec::BlockRestrict { inner, .. } => inner.nu(),
            _ => None,
        }
    }

    pub fn block_size(&self) -> Option<usize> {
        match self {
            RuleSpec::BlockRestrict { size, .. } => Some(*size),
            _ => None,
        }
    }

    /// Steps needed by a fixed-k rule (without adaptive parts), if known upfront.
    pub fn fixed_nfe(&self, len: usize) -> Option<usize> {
        match self {
            RuleSpec::LeftToRight { k } | RuleSpec::GreedyConfidence { k } | RuleSpec::ProbMargin { k } => {
                Some(len.div_ceil(*k))
            }
            RuleSpec::FixedOrder(_) => Some(len),
            RuleSpec::BlockRestrict { size, inner } => inner.fixed_nfe(*size).map(|per| per * (len / size)),
            _ => None,
        }
    }

    /// Chooses among `cands` (sorted ascending, non-empty).
    fn select_among(&self, cands: &[usize], p: &TokenProbabilityMatrix, state: &mut RuleState) -> BTreeSet<usize> {
        debug_assert!(!cands.is_empty());
        match self {
            RuleSpec::LeftToRight { k } => cands.iter().take(*k).copied().collect(),
            RuleSpec::GreedyConfidence { k } => top_k(cands, *k, |l| p.top_two(l).0),
            RuleSpec::ProbMargin { k } => top_k(cands, *k, |l| {
                let (p1, p2) = p.top_two(l);
                p1 - p2
            }),
            RuleSpec::ConfThreshold { mu } => {
                let chosen: BTreeSet<usize> = cands.iter().copied().filter(|&l| p.top_two(l).0 >= *mu).collect();
                if chosen.is_empty() {
                    top_k(cands, 1, |l| p.top_two(l).0)
                } else {
                    chosen
                }
            }
            RuleSpec::Klass { mu, nu } => {
                let chosen: BTreeSet<usize> = match &state.previous {
                    Some(prev) => cands
                        .iter()
                        .copied()
                        .filter(|&l| p.top_two(l).0 >= *mu && kl_divergence(prev, p, l) <= *nu)
                        .collect(),
                    None => BTreeSet::new(),
                };
                state.previous = Some(p.clone());
                if chosen.is_empty() {
                    top_k(cands, 1, |l| p.top_two(l).0)
                } else {
                    chosen
                }
            }
            RuleSpec::FixedOrder(order) => {
                let next = order
                    .iter()
                    .copied()
                    .find(|l| cands.binary_search(l).is_ok())
                    .unwrap_or(cands[0]);
                BTreeSet::from([next])
            }
            RuleSpec::BlockRestrict { .. } => unreachable!("block restriction is resolved in select"),
        }
    }
}

fn check_mu(mu: f64) -> Result<()> {
    if mu > 0.0 && mu <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidRule(format!("mu must lie in (0, 1], got {mu}")))
    }
}

/// The `k` highest-scoring candidates; equal scores go to the lower position.
fn top_k(cands: &[usize], k: usize, score: impl Fn(usize) -> f64) -> BTreeSet<usize> {
    let mut scored: Vec<(f64, usize)> = cands.iter().map(|&l| (score(l), l)).collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    scored.into_iter().take(k).map(|(_, l)| l).collect()
}

/// `KL(prev_ℓ ‖ cur_ℓ)` in nats.
pub fn kl_divergence(prev: &TokenProbabilityMatrix, cur: &TokenProbabilityMatrix, pos: usize) -> f64 {
    prev.log_row(pos)
        .iter()
        .zip(cur.log_row(pos))
        .filter(|(lp, _)| **lp > f64::NEG_INFINITY)
        .map(|(lp, lq)| lp.exp() * (lp - lq))
        .sum()
}

impl UnmaskingRule for RuleSpec {
    fn select(
        &self,
        z: &MaskedSequence,
        p: &TokenProbabilityMatrix,
        state: &RuleState,
    ) -> Result<(BTreeSet<usize>, RuleState)> {
        let masked: Vec<usize> = z.masked_positions().into_iter().collect();
        if masked.is_empty() {
            return Err(Error::NoMaskedPositions);
        }
        let mut next = state.clone();
        let chosen = match self {
            RuleSpec::BlockRestrict { size, inner } => {
                let mut cursor = state.block_cursor;
                while !masked.iter().any(|&l| l / size == cursor) {
                    cursor += 1;
                }
                next.block_cursor = cursor;
                let cands: Vec<usize> = masked.iter().copied().filter(|&l| l / size == cursor).collect();
                inner.select_among(&cands, p, &mut next)
            }
            rule => rule.select_among(&masked, p, &mut next),
        };
        Ok((chosen, next))
    }

    fn describe(&self) -> String {
        self.to_string()
    }
}

/// `π^F(σ_t | z)`: 1 when `sigma_t` is exactly the rule's selection, else 0.
pub fn induced_policy_probability<R: UnmaskingRule + ?Sized>(
    rule: &R,
    sigma_t: &BTreeSet<usize>,
    z: &MaskedSequence,
    p: &TokenProbabilityMatrix,
    state: &RuleState,
) -> Result<f64> {
    if sigma_t.is_empty() {
        return Ok(0.0);
    }
    let (chosen, _) = rule.select(z, p, state)?;
    Ok(if &chosen == sigma_t { 1.0 } else { 0.0 })
}

impl fmt::Display for RuleSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RuleSpec::LeftToRight { k } => write!(f, "l2r:k={k}"),
            RuleSpec::GreedyConfidence { k } => write!(f, "greedy:k={k}"),
            RuleSpec::ProbMargin { k } => write!(f, "margin:k={k}"),
            RuleSpec::ConfThreshold { mu } => write!(f, "thresh:mu={mu}"),
            RuleSpec::Klass { mu, nu } => write!(f, "klass:mu={mu},nu={nu}"),
            RuleSpec::FixedOrder(order) => {
                let s: Vec<String> = order.iter().map(|&p| to_one_based(p).to_string()).collect();
                write!(f, "fixed:{}", s.join(","))
            }
            RuleSpec::BlockRestrict { size, inner } => write!(f, "block:{size}:{inner}"),
        }
    }
}

fn parse_params(body: &str) -> Result<Vec<(&str, &str)>> {
    if body.is_empty() {
        return Ok(Vec::new());
    }
    body.split(',')
        .map(|kv| {
            kv.split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| Error::InvalidRule(format!("expected key=value, got {kv:?}")))
        })
        .collect()
}

fn take_param<T: FromStr>(params: &[(&str, &str)], key: &str, default: Option<T>) -> Result<T> {
    match params.iter().find(|(k, _)| *k == key) {
        Some((_, v)) => v
            .parse()
            .map_err(|_| Error::InvalidRule(format!("bad value for {key}: {v:?}"))),
        None => default.ok_or_else(|| Error::InvalidRule(format!("missing parameter {key}"))),
    }
}

fn check_keys(params: &[(&str, &str)], allowed: &[&str]) -> Result<()> {
    for (k, _) in params {
        if !allowed.contains(k) {
            return Err(Error::InvalidRule(format!("unknown parameter {k:?}")));
        }
    }
    Ok(())
}

impl FromStr for RuleSpec {
    type Err = Error;

    /// Parses `l2r:k=1`, `greedy:k=4`, `margin:k=2`, `thresh:mu=0.7`,
    /// `klass:mu=0.9,nu=0.01`, `block:4:greedy:k=1` or `fixed:3,1,2,4`.
    /// `k` defaults to 1 when omitted.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (family, body) = s.split_once(':').unwrap_or((s, ""));
        let rule = match family {
            "block" => {
                let (size, inner) = body
                    .split_once(':')
                    .ok_or_else(|| Error::InvalidRule("expected block:<size>:<rule>".into()))?;
                let size = size
                    .parse()
                    .map_err(|_| Error::InvalidRule(format!("bad block size {size:?}")))?;
                RuleSpec::BlockRestrict {
                    size,
                    inner: Box::new(inner.parse()?),
                }
            }
            "fixed" => {
                let order = body
                    .split(',')
                    .map(|p| {
                        let p: usize = p
                            .trim()
                            .parse()
                            .map_err(|_| Error::InvalidRule(format!("bad position {p:?}")))?;
                        if p == 0 {
                            return Err(Error::InvalidRule("positions are 1-based".into()));
                        }
                        from_one_based(p, usize::MAX)
                    })
                    .collect::<Result<Vec<_>>>()?;
                RuleSpec::FixedOrder(order)
            }
            "l2r" | "greedy" | "margin" => {
                let params = parse_params(body)?;
                check_keys(&params, &["k"])?;
                let k = take_param(&params, "k", Some(1))?;
                match family {
                    "l2r" => RuleSpec::LeftToRight { k },
                    "greedy" => RuleSpec::GreedyConfidence { k },
                    _ => RuleSpec::ProbMargin { k },
                }
            }
            "thresh" => {
                let params = parse_params(body)?;
                check_keys(&params, &["mu"])?;
                RuleSpec::ConfThreshold {
                    mu: take_param(&params, "mu", None)?,
                }
            }
            "klass" => {
                let params = parse_params(body)?;
                check_keys(&params, &["mu", "nu"])?;
                RuleSpec::Klass {
                    mu: take_param(&params, "mu", None)?,
                    nu: take_param(&params, "nu", None)?,
                }
            }
            other => return Err(Error::InvalidRule(format!("unknown rule family {other:?}"))),
        };
        rule.validate()?;
        Ok(rule)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seq::TokenId;

    /// Matrix over `V = 3` whose masked rows are given as probability vectors.
    fn matrix(z: &MaskedSequence, rows: &[[f64; 3]]) -> TokenProbabilityMatrix {
        let logs: Vec<f64> = rows.iter().flatten().map(|p| p.ln()).collect();
        TokenProbabilityMatrix::from_log_rows(z, logs, false)
    }

    fn masked(n: usize) -> MaskedSequence {
        MaskedSequence::all_masked(n, 3)
    }

    fn select(rule: &str, z: &MaskedSequence, p: &TokenProbabilityMatrix) -> Vec<usize> {
        let rule: RuleSpec = rule.parse().unwrap();
        let (s, _) = rule.select(z, p, &RuleState::default()).unwrap();
        s.into_iter().map(to_one_based).collect()
    }

    const U: [f64; 3] = [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0];

    #[test]
    fn left_to_right_picks_smallest_masked() {
        let z = MaskedSequence::from_ids(&[0 as TokenId, 3, 3], 3).unwrap();
        let p = matrix(&z, &[U, U, U]);
        assert_eq!(select("l2r:k=1", &z, &p), vec![2]);
        assert_eq!(select("l2r:k=5", &z, &p), vec![2, 3]);
    }

    #[test]
    fn greedy_and_margin() {
        let z = MaskedSequence::from_ids(&[0, 3, 3], 3).unwrap();
        let p = matrix(&z, &[U, [0.6, 0.35, 0.05], [0.9, 0.08, 0.02]]);
        assert_eq!(select("greedy:k=1", &z, &p), vec![3]);
        assert_eq!(select("margin:k=1", &z, &p), vec![3]);
        // margin prefers a peaked row over a confident-but-split one
        let z = masked(2);
        let p = matrix(&z, &[[0.5, 0.49, 0.01], [0.45, 0.1, 0.45]]);
        assert_eq!(select("greedy:k=1", &z, &p), vec![1]);
        let p = matrix(&z, &[[0.5, 0.49, 0.01], [0.4, 0.3, 0.3]]);
        assert_eq!(select("margin:k=1", &z, &p), vec![2]);
    }

    #[test]
    fn threshold_and_fallback() {
        let z = masked(3);
        let p = matrix(&z, &[[0.5, 0.3, 0.2], [0.9, 0.05, 0.05], [0.75, 0.2, 0.05]]);
        assert_eq!(select("thresh:mu=0.7", &z, &p), vec![2, 3]);
        let p = matrix(&z, &[[0.5, 0.3, 0.2], [0.25, 0.5, 0.25], [0.4, 0.3, 0.3]]);
        assert_eq!(select("thresh:mu=0.5", &z, &p), vec![1, 2]);
        let z = masked(2);
        let p = matrix(&z, &[[0.5, 0.3, 0.2], [0.9, 0.05, 0.05]]);
        assert_eq!(select("thresh:mu=0.99", &z, &p), vec![2]);
    }

    #[test]
    fn klass_first_step_falls_back_and_records_state() {
        let z = masked(3);
        let p = matrix(&z, &[[0.95, 0.03, 0.02], [0.97, 0.02, 0.01], U]);
        let rule: RuleSpec = "klass:mu=0.9,nu=0.01".parse().unwrap();
        let (s, st) = rule.select(&z, &p, &RuleState::default()).unwrap();
        assert_eq!(s, BTreeSet::from([1]));
        assert!(st.previous.is_some());
        // second step with identical predictions: both confident rows are stable
        let (s, _) = rule.select(&z, &p, &st).unwrap();
        assert_eq!(s, BTreeSet::from([0, 1]));
        // unstable predictions are held back
        let shifted = matrix(&z, &[[0.95, 0.03, 0.02], [0.91, 0.08, 0.01], U]);
        let (s, _) = rule.select(&z, &shifted, &st).unwrap();
        assert_eq!(s, BTreeSet::from([0]));
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let z = masked(4);
        let p = matrix(&z, &[U, U, U, U]);
        assert_eq!(select("greedy:k=2", &z, &p), vec![1, 2]);
        assert_eq!(select("margin:k=3", &z, &p), vec![1, 2, 3]);
        assert_eq!(select("thresh:mu=0.9", &z, &p), vec![1]);
    }

    #[test]
    fn block_restriction_stays_in_block() {
        let z = MaskedSequence::from_ids(&[0, 1, 3, 3, 3, 3], 3).unwrap();
        let p = matrix(&z, &[U, U, U, [0.2, 0.2, 0.6], [0.99, 0.005, 0.005], U]);
        let rule: RuleSpec = "block:3:greedy:k=1".parse().unwrap();
        let (s, st) = rule.select(&z, &p, &RuleState::default()).unwrap();
        assert_eq!(s, BTreeSet::from([2]));
        assert_eq!(st.block_cursor, 0);
        let z = z.reveal(2, 0).unwrap();
        let (s, st) = rule.select(&z, &p, &st).unwrap();
        assert_eq!(s, BTreeSet::from([4]));
        assert_eq!(st.block_cursor, 1);
    }

    #[test]
    fn fixed_order_follows_permutation() {
        let rule: RuleSpec = "fixed:3,1,2".parse().unwrap();
        rule.validate_for_len(3).unwrap();
        let mut z = masked(3);
        let mut state = RuleState::default();
        let mut visited = Vec::new();
        while z.num_masked() > 0 {
            let p = matrix(&z, &[U, U, U]);
            let (s, st) = rule.select(&z, &p, &state).unwrap();
            let pos = *s.iter().next().unwrap();
            visited.push(to_one_based(pos));
            z = z.reveal(pos, 0).unwrap();
            state = st;
        }
        assert_eq!(visited, vec![3, 1, 2]);
    }

    #[test]
    fn no_masked_positions_is_an_error() {
        let z = MaskedSequence::from_ids(&[0, 1], 3).unwrap();
        let p = matrix(&z, &[U, U]);
        let rule = RuleSpec::LeftToRight { k: 1 };
        assert_eq!(
            rule.select(&z, &p, &RuleState::default()),
            Err(Error::NoMaskedPositions)
        );
    }

    #[test]
    fn induced_policy_is_a_dirac() {
        let z = masked(3);
        let p = matrix(&z, &[[0.5, 0.3, 0.2], [0.9, 0.05, 0.05], U]);
        let rule = RuleSpec::GreedyConfidence { k: 1 };
        let st = RuleState::default();
        assert_eq!(induced_policy_probability(&rule, &BTreeSet::from([1]), &z, &p, &st), Ok(1.0));
        assert_eq!(induced_policy_probability(&rule, &BTreeSet::from([0]), &z, &p, &st), Ok(0.0));
        assert_eq!(induced_policy_probability(&rule, &BTreeSet::from([0, 1]), &z, &p, &st), Ok(0.0));
        assert_eq!(induced_policy_probability(&rule, &BTreeSet::new(), &z, &p, &st), Ok(0.0));
    }

    #[test]
    fn grammar_round_trips() {
        for s in [
            "l2r:k=1",
            "greedy:k=4",
            "margin:k=2",
            "thresh:mu=0.7",
            "klass:mu=0.9,nu=0.01",
            "block:4:greedy:k=1",
            "fixed:3,1,2,4",
        ] {
            let rule: RuleSpec = s.parse().unwrap();
            assert_eq!(rule.to_string(), s);
        }
        assert_eq!("greedy".parse::<RuleSpec>().unwrap(), RuleSpec::GreedyConfidence { k: 1 });
    }

    #[test]
    fn grammar_rejects_bad_specs() {
        for s in [
            "l2r:k=0",
            "thresh:mu=0",
            "thresh:mu=1.5",
            "thresh",
            "klass:mu=0.9,nu=-1",
            "block:0:l2r:k=1",
            "block:2:block:2:l2r",
            "fixed:0,1",
            "greedy:q=3",
            "beam:k=2",
        ] {
            assert!(s.parse::<RuleSpec>().is_err(), "{s} should fail");
        }
        let rule: RuleSpec = "block:3:l2r:k=1".parse().unwrap();
        assert_eq!(rule.validate_for_len(4), Err(Error::BlockMismatch { block: 3, len: 4 }));
        let rule: RuleSpec = "fixed:1,1,2".parse().unwrap();
        assert!(rule.validate_for_len(3).is_err());
    }

    #[test]
    fn fixed_nfe() {
        assert_eq!(RuleSpec::GreedyConfidence { k: 3 }.fixed_nfe(8), Some(3));
        let b: RuleSpec = "block:4:l2r:k=2".parse().unwrap();
        assert_eq!(b.fixed_nfe(8), Some(4));
        assert_eq!(RuleSpec::ConfThreshold { mu: 0.5 }.fixed_nfe(8), None);
    }
}
