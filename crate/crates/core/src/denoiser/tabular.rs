use std::collections::BTreeMap;

use super::Denoiser;
use crate::error::{Error, Result};
use crate::numeric::log_add_exp;
use crate::seq::{CleanSequence, MaskedSequence, TokenProbabilityMatrix};

/// Exact conditional of an (optionally smoothed) empirical joint over `V^L`.
///
/// The joint is `(count(x) + λ) / (N + λ·V^L)`. Only observed sequences are
/// stored; the smoothing mass of unobserved ones is added in closed form.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularBayesDenoiser {
    len: usize,
    vocab: usize,
    smoothing: f64,
    counts: BTreeMap<CleanSequence, u64>,
    total: u64,
}

pub fn fit_tabular(corpus: &[CleanSequence], vocab: usize, smoothing: f64) -> Result<TabularBayesDenoiser> {
    TabularBayesDenoiser::fit(corpus, vocab, smoothing)
}

impl TabularBayesDenoiser {
    pub fn fit(corpus: &[CleanSequence], vocab: usize, smoothing: f64) -> Result<Self> {
        let first = corpus.first().ok_or(Error::EmptyCorpus)?;
        let mut counts = BTreeMap::new();
        for x in corpus {
            if x.len() != first.len() {
                return Err(Error::LengthMismatch {
                    expected: first.len(),
                    got: x.len(),
                });
            }
            *counts.entry(x.clone()).or_insert(0) += 1;
        }
        Self::from_counts(first.len(), vocab, smoothing, counts)
    }

    pub fn from_counts(
        len: usize,
        vocab: usize,
        smoothing: f64,
        counts: BTreeMap<CleanSequence, u64>,
    ) -> Result<Self> {
        if !(smoothing >= 0.0 && smoothing.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "smoothing must be a non-negative real, got {smoothing}"
            )));
        }
        if len == 0 || vocab == 0 {
            return Err(Error::InvalidConfig("L and V must be positive".into()));
        }
        for x in counts.keys() {
            if x.len() != len {
                return Err(Error::LengthMismatch {
                    expected: len,
                    got: x.len(),
                });
            }
            CleanSequence::new(x.tokens().to_vec(), vocab)?;
        }
        let total: u64 = counts.values().sum();
        if total == 0 {
            return Err(Error::EmptyCorpus);
        }
        Ok(Self {
            len,
            vocab,
            smoothing,
            counts,
            total,
        })
    }

    pub fn smoothing(&self) -> f64 {
        self.smoothing
    }

    pub fn counts(&self) -> &BTreeMap<CleanSequence, u64> {
        &self.counts
    }

    fn log_norm(&self) -> f64 {
        log_add_exp(
            (self.total as f64).ln(),
            self.smoothing.ln() + self.len as f64 * (self.vocab as f64).ln(),
        )
    }

    /// `ln joint(x)`.
    pub fn log_joint(&self, x: &CleanSequence) -> f64 {
        let c = self.counts.get(x).copied().unwrap_or(0) as f64;
        log_add_exp(c.ln(), self.smoothing.ln()) - self.log_norm()
    }

    /// The sparse joint: observed sequences and their probabilities.
    pub fn support(&self) -> Vec<(CleanSequence, f64)> {
        self.counts
            .keys()
            .map(|x| (x.clone(), self.log_joint(x).exp()))
            .collect()
    }
}

impl Denoiser for TabularBayesDenoiser {
    fn seq_len(&self) -> usize {
        self.len
    }

    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn evaluate(&self, z: &MaskedSequence) -> TokenProbabilityMatrix {
        assert_eq!(z.len(), self.len, "state length does not match denoiser");
        let (l, v) = (self.len, self.vocab);
        let masked = z.num_masked();
        // counts of consistent support, split by token at every position
        let mut per_token = vec![0u64; l * v];
        let mut consistent = 0u64;
        for (x, &c) in &self.counts {
            let agrees = z
                .entries()
                .iter()
                .zip(x.tokens())
                .all(|(e, t)| e.is_none_or(|r| r == *t));
            if agrees {
                consistent += c;
                for (pos, &t) in x.tokens().iter().enumerate() {
                    per_token[pos * v + t as usize] += c;
                }
            }
        }

        let mut log_rows = vec![0.0; l * v];
        let mut support_miss = false;
        if masked > 0 {
            let ln_v = (v as f64).ln();
            let ln_lambda = self.smoothing.ln();
            let log_den = log_add_exp((consistent as f64).ln(), ln_lambda + masked as f64 * ln_v);
            let uniform = -ln_v;
            for pos in z.masked_positions() {
                let row = &mut log_rows[pos * v..(pos + 1) * v];
                if log_den == f64::NEG_INFINITY {
                    row.fill(uniform);
                    support_miss = true;
                    continue;
                }
                for (tok, slot) in row.iter_mut().enumerate() {
                    let num = log_add_exp(
                        (per_token[pos * v + tok] as f64).ln(),
                        ln_lambda + (masked - 1) as f64 * ln_v,
                    );
                    *slot = num - log_den;
                }
            }
        }
        TokenProbabilityMatrix::from_log_rows(z, log_rows, support_miss)
    }
}
