//! Masked diffusion language models with deterministic unmasking.
//!
//! A sampler is a pair of a [`denoiser::Denoiser`] and an unmasking rule
//! ([`rules::RuleSpec`]). Because the rule picks positions deterministically,
//! the distribution it induces has an exactly computable likelihood: the
//! evaluation trajectory follows the generation trajectory, revealing the true
//! tokens instead of sampled ones ([`engine::duel_exact_loglik`]).
//!
//! The [`oracle`] module contains brute-force counterparts (ordered-partition
//! marginalization, enumerated induced distributions, per-block order search)
//! used to check the fast paths on small instances.

pub mod denoiser;
pub mod engine;
pub mod error;
pub mod fixtures;
pub mod metrics;
pub mod numeric;
pub mod oracle;
pub mod persist;
pub mod rng;
pub mod rules;
pub mod seq;
pub mod verify;

pub use denoiser::{Denoiser, TabularBayesDenoiser, TrainableDenoiser};
pub use engine::{duel_exact_loglik, duel_sample, TrajectoryRecord};
pub use error::{Error, Result};
pub use rules::{RuleSpec, RuleState, UnmaskingRule};
pub use seq::{
    CleanSequence, MaskedSequence, OrderedPartition, TokenId, TokenProbabilityMatrix, Vocabulary,
};
