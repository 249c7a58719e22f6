//! Small deterministic corpora and models for checks and demos.

use rand::Rng;

use crate::denoiser::TrainableDenoiser;
use crate::error::Result;
use crate::rng::{stream, Purpose};
use crate::seq::{CleanSequence, TokenId};

fn corpus_of(rows: &[&[TokenId]], vocab: usize) -> Vec<CleanSequence> {
    rows.iter()
        .map(|r| CleanSequence::new(r.to_vec(), vocab).expect("fixture tokens in range"))
        .collect()
}

/// `{aa, bb}` over `V = 2`.
pub fn aa_bb() -> Vec<CleanSequence> {
    corpus_of(&[&[0, 0], &[1, 1]], 2)
}

/// `{ab, ba}` over `V = 2`.
pub fn ab_ba() -> Vec<CleanSequence> {
    corpus_of(&[&[0, 1], &[1, 0]], 2)
}

/// Sequences from a sticky first-order Markov chain: each token repeats the
/// previous one with probability `stay`, otherwise is uniform over the rest.
pub fn markov_corpus(num: usize, len: usize, vocab: usize, stay: f64, seed: u64) -> Vec<CleanSequence> {
    assert!(vocab >= 2 && len >= 1);
    (0..num)
        .map(|i| {
            let mut rng = stream(Purpose::Corpus, seed, i as u64, 0);
            let mut toks: Vec<TokenId> = Vec::with_capacity(len);
            toks.push(rng.random_range(0..vocab as TokenId));
            while toks.len() < len {
                let prev = *toks.last().expect("non-empty");
                let next = if rng.random::<f64>() < stay {
                    prev
                } else {
                    let other = rng.random_range(0..vocab as TokenId - 1);
                    if other >= prev {
                        other + 1
                    } else {
                        other
                    }
                };
                toks.push(next);
            }
            CleanSequence::new(toks, vocab).expect("tokens in range")
        })
        .collect()
}

/// A small trainable denoiser fitted to `corpus` with SGD.
pub fn trained_denoiser(
    corpus: &[CleanSequence],
    vocab: usize,
    hidden: usize,
    steps: usize,
    seed: u64,
) -> Result<TrainableDenoiser> {
    let len = corpus.first().map_or(0, CleanSequence::len);
    let lr = 0.05;
    TrainableDenoiser::new(len, vocab, hidden, lr, seed)?.train(corpus, steps, lr, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn markov_corpus_is_deterministic_and_sticky() {
        let a = markov_corpus(50, 8, 3, 0.8, 4);
        assert_eq!(a, markov_corpus(50, 8, 3, 0.8, 4));
        assert!(a.iter().all(|x| x.len() == 8));
        let repeats = a
            .iter()
            .flat_map(|x| x.tokens().windows(2).map(|w| (w[0] == w[1]) as usize))
            .sum::<usize>();
        assert!(repeats as f64 / (50.0 * 7.0) > 0.6);
    }
}
