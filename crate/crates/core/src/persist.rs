//! JSON model files.
//!
//! Tabular: `{"kind": "tabular", "L", "V", "lambda", "joint": [[[ids], count], ...]}`.
//! Trainable: `{"kind": "trainable", "L", "V", "hidden", "lr", "params": "<base64>"}`
//! where `params` is the flat parameter array as little-endian `f64`s.

use std::collections::BTreeMap;

use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use serde::{Deserialize, Serialize};

use crate::denoiser::{Denoiser, TabularBayesDenoiser, TrainableDenoiser};
use crate::error::{Error, Result};
use crate::seq::{CleanSequence, MaskedSequence, TokenId, TokenProbabilityMatrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum ModelFile {
    Tabular {
        #[serde(rename = "L")]
        len: usize,
        #[serde(rename = "V")]
        vocab: usize,
        lambda: f64,
        joint: Vec<(Vec<TokenId>, u64)>,
    },
    Trainable {
        #[serde(rename = "L")]
        len: usize,
        #[serde(rename = "V")]
        vocab: usize,
        hidden: usize,
        lr: f64,
        params: String,
    },
}

/// Either persisted denoiser kind.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyDenoiser {
    Tabular(TabularBayesDenoiser),
    Trainable(TrainableDenoiser),
}

impl AnyDenoiser {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Tabular(_) => "tabular",
            Self::Trainable(_) => "trainable",
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let file = match self {
            Self::Tabular(d) => ModelFile::Tabular {
                len: d.seq_len(),
                vocab: d.vocab_size(),
                lambda: d.smoothing(),
                joint: d.counts().iter().map(|(x, c)| (x.tokens().to_vec(), *c)).collect(),
            },
            Self::Trainable(d) => ModelFile::Trainable {
                len: d.seq_len(),
                vocab: d.vocab_size(),
                hidden: d.hidden(),
                lr: d.learning_rate(),
                params: STANDARD.encode(d.params().iter().flat_map(|v| v.to_le_bytes()).collect::<Vec<u8>>()),
            },
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        match serde_json::from_str::<ModelFile>(s)? {
            ModelFile::Tabular {
                len,
                vocab,
                lambda,
                joint,
            } => {
                let mut counts = BTreeMap::new();
                for (ids, c) in joint {
                    let x = CleanSequence::new(ids, vocab)?;
                    if counts.insert(x.clone(), c).is_some() {
                        return Err(Error::Serialization(format!("duplicate joint entry {:?}", x.tokens())));
                    }
                }
                Ok(Self::Tabular(TabularBayesDenoiser::from_counts(len, vocab, lambda, counts)?))
            }
            ModelFile::Trainable {
                len,
                vocab,
                hidden,
                lr,
                params,
            } => {
                let bytes = STANDARD
                    .decode(params)
                    .map_err(|e| Error::Serialization(format!("params: {e}")))?;
                if bytes.len() % 8 != 0 {
                    return Err(Error::Serialization("params length is not a multiple of 8 bytes".into()));
                }
                let params = bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                    .collect();
                Ok(Self::Trainable(TrainableDenoiser::from_params(len, vocab, hidden, lr, params)?))
            }
        }
    }
}

impl From<TabularBayesDenoiser> for AnyDenoiser {
    fn from(d: TabularBayesDenoiser) -> Self {
        Self::Tabular(d)
    }
}

impl From<TrainableDenoiser> for AnyDenoiser {
    fn from(d: TrainableDenoiser) -> Self {
        Self::Trainable(d)
    }
}

impl Denoiser for AnyDenoiser {
    fn seq_len(&self) -> usize {
        match self {
            Self::Tabular(d) => d.seq_len(),
            Self::Trainable(d) => d.seq_len(),
        }
    }

    fn vocab_size(&self) -> usize {
        match self {
            Self::Tabular(d) => d.vocab_size(),
            Self::Trainable(d) => d.vocab_size(),
        }
    }

    fn evaluate(&self, z: &MaskedSequence) -> TokenProbabilityMatrix {
        match self {
            Self::Tabular(d) => d.evaluate(z),
            Self::Trainable(d) => d.evaluate(z),
        }
    }
}
