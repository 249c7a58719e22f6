//! Denoising networks: maps from a masked state to a token probability matrix.
//!
//! Two implementations are provided. [`TabularBayesDenoiser`] is the exact
//! conditional of an empirical joint and serves as ground truth in checks.
//! [`TrainableDenoiser`] is a small order-sensitive network trained with the
//! masked-diffusion objective ([`elbo_loss_mc`]).

mod tabular;
mod trainable;

pub use tabular::{fit_tabular, TabularBayesDenoiser};
pub use trainable::TrainableDenoiser;

use rand::seq::index;
use rand::Rng;

use crate::rng::{stream, Purpose};
use crate::seq::{CleanSequence, MaskedSequence, TokenProbabilityMatrix};

/// A deterministic map from masked states to token distributions.
pub trait Denoiser: Send + Sync {
    fn seq_len(&self) -> usize;
    fn vocab_size(&self) -> usize;
    fn evaluate(&self, z: &MaskedSequence) -> TokenProbabilityMatrix;
}

impl<D: Denoiser + ?Sized> Denoiser for &D {
    fn seq_len(&self) -> usize {
        (**self).seq_len()
    }
    fn vocab_size(&self) -> usize {
        (**self).vocab_size()
    }
    fn evaluate(&self, z: &MaskedSequence) -> TokenProbabilityMatrix {
        (**self).evaluate(z)
    }
}

impl<D: Denoiser + ?Sized> Denoiser for Box<D> {
    fn seq_len(&self) -> usize {
        (**self).seq_len()
    }
    fn vocab_size(&self) -> usize {
        (**self).vocab_size()
    }
    fn evaluate(&self, z: &MaskedSequence) -> TokenProbabilityMatrix {
        (**self).evaluate(z)
    }
}

/// Discrete mask-count schedule: the number of masked positions `n` is uniform
/// on `1..=L` and each masked position's loss is weighted by `L / n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NoiseSchedule {
    len: usize,
}

impl NoiseSchedule {
    pub fn discrete_linear(len: usize) -> Self {
        Self { len }
    }

    pub fn weight(&self, num_masked: usize) -> f64 {
        debug_assert!((1..=self.len).contains(&num_masked));
        self.len as f64 / num_masked as f64
    }

    /// Draws the set of positions to mask (sorted ascending).
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<usize> {
        let n = rng.random_range(1..=self.len);
        let mut positions = index::sample(rng, self.len, n).into_vec();
        positions.sort_unstable();
        positions
    }
}

pub(crate) fn mask_positions(x: &CleanSequence, vocab: usize, positions: &[usize]) -> MaskedSequence {
    let mut ids = x.tokens().to_vec();
    for &p in positions {
        ids[p] = vocab as u32;
    }
    MaskedSequence::from_ids(&ids, vocab).expect("valid ids")
}

/// Weighted masked-token NLL for one explicit mask set.
pub fn masked_nll<D: Denoiser + ?Sized>(d: &D, x: &CleanSequence, positions: &[usize]) -> f64 {
    let schedule = NoiseSchedule::discrete_linear(x.len());
    let z = mask_positions(x, d.vocab_size(), positions);
    let p = d.evaluate(&z);
    let nll: f64 = positions
        .iter()
        .map(|&l| -p.log_prob(l, x.tokens()[l]))
        .sum();
    schedule.weight(positions.len()) * nll
}

/// One Monte Carlo draw of the masked-diffusion loss, from an explicit stream.
pub fn elbo_loss_mc_with<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    d: &D,
    x: &CleanSequence,
    rng: &mut R,
) -> f64 {
    let positions = NoiseSchedule::discrete_linear(x.len()).draw(rng);
    masked_nll(d, x, &positions)
}

/// One Monte Carlo draw of the masked-diffusion loss: `n ~ U{1..L}`, a uniform
/// size-`n` mask set `S`, and `(L/n) Σ_{ℓ∈S} -log P_ℓ[x_ℓ]`.
pub fn elbo_loss_mc<D: Denoiser + ?Sized>(d: &D, x: &CleanSequence, seed: u64) -> f64 {
    elbo_loss_mc_with(d, x, &mut elbo_stream(seed))
}

pub(crate) fn elbo_stream(seed: u64) -> crate::rng::StreamRng {
    stream(Purpose::ElboDraw, seed, 0, 0)
}

/// Analytic gradient of the draw made by [`elbo_loss_mc`] with the same seed.
pub fn elbo_loss_gradient(d: &TrainableDenoiser, x: &CleanSequence, seed: u64) -> Vec<f64> {
    let positions = NoiseSchedule::discrete_linear(x.len()).draw(&mut elbo_stream(seed));
    d.loss_and_gradient(x, &positions).1
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_weights_are_positive() {
        let s = NoiseSchedule::discrete_linear(4);
        for n in 1..=4 {
            assert!(s.weight(n) > 0.0);
        }
        assert_eq!(s.weight(2), 2.0);
    }

    #[test]
    fn draws_are_nonempty_sorted_subsets() {
        let s = NoiseSchedule::discrete_linear(5);
        for seed in 0..200 {
            let d = s.draw(&mut elbo_stream(seed));
            assert!(!d.is_empty() && d.len() <= 5);
            assert!(d.windows(2).all(|w| w[0] < w[1]));
            assert!(d.iter().all(|&p| p < 5));
        }
    }
}
