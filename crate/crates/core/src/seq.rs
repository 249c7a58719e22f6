//! Vocabulary, sequences, ordered partitions and token probability matrices.
//!
//! Positions are 0-based everywhere inside the crate. Anything that is shown
//! to a person (reports, rule strings, JSON partitions) uses 1-based positions;
//! [`to_one_based`] and [`from_one_based`] are the only conversion points.

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::{Error, Result};

pub type TokenId = u32;

/// Rendering of the mask token in human-readable dumps.
pub const MASK_SYMBOL: &str = "<mask>";

/// Tolerance on row sums of a probability matrix.
pub const ROW_SUM_TOL: f64 = 1e-9;

pub fn to_one_based(pos: usize) -> usize {
    pos + 1
}

pub fn from_one_based(pos: usize, len: usize) -> Result<usize> {
    if pos == 0 || pos > len {
        return Err(Error::PositionOutOfRange { pos, len });
    }
    Ok(pos - 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenizerMode {
    #[default]
    Char,
    Whitespace,
}

impl TokenizerMode {
    pub fn split(self, line: &str) -> Vec<String> {
        match self {
            TokenizerMode::Char => line.chars().map(String::from).collect(),
            TokenizerMode::Whitespace => line.split_whitespace().map(String::from).collect(),
        }
    }

    pub fn join(self, symbols: &[&str]) -> String {
        match self {
            TokenizerMode::Char => symbols.concat(),
            TokenizerMode::Whitespace => symbols.join(" "),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct VocabularyFile {
    symbols: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mode: Option<TokenizerMode>,
}

/// Ordered list of distinct symbols; the index of a symbol is its token id.
/// The mask id is `V`, one past the last token, and never maps to a symbol.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    symbols: Vec<String>,
    index: HashMap<String, TokenId>,
    mode: TokenizerMode,
}

impl Vocabulary {
    pub fn new(symbols: Vec<String>, mode: TokenizerMode) -> Result<Self> {
        if symbols.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut index = HashMap::with_capacity(symbols.len());
        for (i, s) in symbols.iter().enumerate() {
            if index.insert(s.clone(), i as TokenId).is_some() {
                return Err(Error::DuplicateSymbol(s.clone()));
            }
        }
        Ok(Self {
            symbols,
            index,
            mode,
        })
    }

    pub fn size(&self) -> usize {
        self.symbols.len()
    }

    pub fn mask_id(&self) -> TokenId {
        self.symbols.len() as TokenId
    }

    pub fn mode(&self) -> TokenizerMode {
        self.mode
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn symbol(&self, id: TokenId) -> Option<&str> {
        self.symbols.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, symbol: &str) -> Option<TokenId> {
        self.index.get(symbol).copied()
    }

    pub fn encode(&self, line: &str) -> Result<CleanSequence> {
        let ids = self
            .mode
            .split(line)
            .into_iter()
            .map(|s| self.id(&s).ok_or(Error::UnknownSymbol(s)))
            .collect::<Result<Vec<_>>>()?;
        CleanSequence::new(ids, self.size())
    }

    pub fn decode(&self, seq: &CleanSequence) -> String {
        let syms: Vec<&str> = seq
            .tokens()
            .iter()
            .map(|&t| self.symbol(t).unwrap_or("?"))
            .collect();
        self.mode.join(&syms)
    }

    /// Human-readable rendering of a masked state.
    pub fn render(&self, z: &MaskedSequence) -> String {
        let syms: Vec<&str> = z
            .entries()
            .iter()
            .map(|e| match e {
                Some(t) => self.symbol(*t).unwrap_or("?"),
                None => MASK_SYMBOL,
            })
            .collect();
        TokenizerMode::Whitespace.join(&syms)
    }

    pub fn to_json(&self) -> Result<String> {
        let file = VocabularyFile {
            symbols: self.symbols.clone(),
            mode: Some(self.mode),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let file: VocabularyFile = serde_json::from_str(s)?;
        Self::new(file.symbols, file.mode.unwrap_or_default())
    }
}

/// A fully revealed sequence of token ids.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CleanSequence(Vec<TokenId>);

impl CleanSequence {
    pub fn new(tokens: Vec<TokenId>, vocab_size: usize) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::LengthMismatch {
                expected: 1,
                got: 0,
            });
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= vocab_size) {
            return Err(Error::InvalidToken {
                token: bad as u64,
                vocab: vocab_size,
            });
        }
        Ok(Self(tokens))
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Every sequence in `V^len`, in lexicographic order.
    pub fn enumerate_all(len: usize, vocab_size: usize) -> Vec<CleanSequence> {
        let total = vocab_size.pow(len as u32);
        (0..total)
            .map(|mut code| {
                let mut toks = vec![0; len];
                for slot in toks.iter_mut().rev() {
                    *slot = (code % vocab_size) as TokenId;
                    code /= vocab_size;
                }
                CleanSequence(toks)
            })
            .collect()
    }
}

/// A partially revealed state. `None` marks a masked position.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MaskedSequence {
    entries: Vec<Option<TokenId>>,
    vocab_size: usize,
}

impl MaskedSequence {
    pub fn all_masked(len: usize, vocab_size: usize) -> Self {
        Self {
            entries: vec![None; len],
            vocab_size,
        }
    }

    pub fn from_clean(x: &CleanSequence, vocab_size: usize) -> Self {
        Self {
            entries: x.tokens().iter().map(|&t| Some(t)).collect(),
            vocab_size,
        }
    }

    /// Builds a state from raw ids where `mask_id == vocab_size` marks a mask.
    pub fn from_ids(ids: &[TokenId], vocab_size: usize) -> Result<Self> {
        let mask = vocab_size as TokenId;
        let entries = ids
            .iter()
            .map(|&t| match t {
                t if t == mask => Ok(None),
                t if (t as usize) < vocab_size => Ok(Some(t)),
                t => Err(Error::InvalidToken {
                    token: t as u64,
                    vocab: vocab_size,
                }),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            entries,
            vocab_size,
        })
    }

    pub fn to_ids(&self) -> Vec<TokenId> {
        let mask = self.vocab_size as TokenId;
        self.entries.iter().map(|e| e.unwrap_or(mask)).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn entries(&self) -> &[Option<TokenId>] {
        &self.entries
    }

    pub fn get(&self, pos: usize) -> Option<TokenId> {
        self.entries[pos]
    }

    pub fn is_masked(&self, pos: usize) -> bool {
        self.entries[pos].is_none()
    }

    pub fn masked_positions(&self) -> BTreeSet<usize> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.is_none())
            .map(|(i, _)| i)
            .collect()
    }

    pub fn num_masked(&self) -> usize {
        self.entries.iter().filter(|e| e.is_none()).count()
    }

    /// Returns a copy with `token` placed at the masked position `pos`.
    pub fn reveal(&self, pos: usize, token: TokenId) -> Result<Self> {
        let mut next = self.clone();
        next.reveal_in_place(pos, token)?;
        Ok(next)
    }

    pub fn reveal_in_place(&mut self, pos: usize, token: TokenId) -> Result<()> {
        if pos >= self.entries.len() {
            return Err(Error::PositionOutOfRange {
                pos,
                len: self.entries.len(),
            });
        }
        if token as usize >= self.vocab_size {
            return Err(Error::InvalidToken {
                token: token as u64,
                vocab: self.vocab_size,
            });
        }
        if self.entries[pos].is_some() {
            return Err(Error::RevealUnmasked(pos));
        }
        self.entries[pos] = Some(token);
        Ok(())
    }

    pub fn to_clean(&self) -> Option<CleanSequence> {
        self.entries
            .iter()
            .copied()
            .collect::<Option<Vec<_>>>()
            .map(CleanSequence)
    }
}

/// Free-function form of [`MaskedSequence::masked_positions`].
pub fn masked_positions(z: &MaskedSequence) -> BTreeSet<usize> {
    z.masked_positions()
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PartitionError {
    #[error("part {0} is empty")]
    EmptyPart(usize),
    #[error("position {0} appears in more than one part")]
    Overlap(usize),
    #[error("positions {0:?} are not covered")]
    Coverage(Vec<usize>),
    #[error("position {pos} out of range for length {len}")]
    OutOfRange { pos: usize, len: usize },
}

/// Checks that `parts` is an ordered set partition of `0..len`.
pub fn validate_partition(parts: &[Vec<usize>], len: usize) -> Result<(), PartitionError> {
    let mut seen = vec![false; len];
    for (i, part) in parts.iter().enumerate() {
        if part.is_empty() {
            return Err(PartitionError::EmptyPart(i));
        }
        for &p in part {
            if p >= len {
                return Err(PartitionError::OutOfRange { pos: p, len });
            }
            if seen[p] {
                return Err(PartitionError::Overlap(p));
            }
            seen[p] = true;
        }
    }
    let missing: Vec<usize> = (0..len).filter(|&p| !seen[p]).collect();
    if !missing.is_empty() {
        return Err(PartitionError::Coverage(missing));
    }
    Ok(())
}

/// The unmasking trajectory: disjoint non-empty position sets covering `0..len`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct OrderedPartition {
    parts: Vec<Vec<usize>>,
}

impl OrderedPartition {
    pub fn new(mut parts: Vec<Vec<usize>>, len: usize) -> Result<Self> {
        validate_partition(&parts, len)?;
        for p in &mut parts {
            p.sort_unstable();
        }
        Ok(Self { parts })
    }

    pub(crate) fn from_parts_unchecked(parts: Vec<Vec<usize>>) -> Self {
        Self { parts }
    }

    pub fn parts(&self) -> &[Vec<usize>] {
        &self.parts
    }

    pub fn num_steps(&self) -> usize {
        self.parts.len()
    }

    pub fn len(&self) -> usize {
        self.parts.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.parts.is_empty()
    }

    pub fn is_sequential(&self) -> bool {
        self.parts.iter().all(|p| p.len() == 1)
    }

    pub fn to_one_based(&self) -> Vec<Vec<usize>> {
        self.parts
            .iter()
            .map(|p| p.iter().map(|&i| to_one_based(i)).collect())
            .collect()
    }
}

impl fmt::Display for OrderedPartition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (i, part) in self.to_one_based().iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            let inner: Vec<String> = part.iter().map(|p| p.to_string()).collect();
            write!(f, "{{{}}}", inner.join(","))?;
        }
        write!(f, ")")
    }
}

/// Per-position token distributions produced by a denoiser for a state `z`.
///
/// Stored as natural-log probabilities. Rows at positions that were revealed in
/// `z` are one-hot on the revealed token, and the mask token never receives
/// mass (it is not even a column).
#[derive(Debug, Clone, PartialEq)]
pub struct TokenProbabilityMatrix {
    len: usize,
    vocab: usize,
    log_probs: Vec<f64>,
    origin_mask: Vec<bool>,
    support_miss: bool,
}

impl TokenProbabilityMatrix {
    /// Builds a matrix from row-major log-probabilities, overwriting the rows
    /// of revealed positions with the carried-over one-hot.
    pub fn from_log_rows(z: &MaskedSequence, mut log_probs: Vec<f64>, support_miss: bool) -> Self {
        let (len, vocab) = (z.len(), z.vocab_size());
        assert_eq!(log_probs.len(), len * vocab, "matrix shape mismatch");
        for (pos, entry) in z.entries().iter().enumerate() {
            if let Some(tok) = entry {
                let row = &mut log_probs[pos * vocab..(pos + 1) * vocab];
                row.fill(f64::NEG_INFINITY);
                row[*tok as usize] = 0.0;
            }
        }
        Self {
            len,
            vocab,
            log_probs,
            origin_mask: z.entries().iter().map(Option::is_none).collect(),
            support_miss,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab
    }

    pub fn origin_mask(&self) -> &[bool] {
        &self.origin_mask
    }

    /// True when some masked row had no support and fell back to uniform.
    pub fn support_miss(&self) -> bool {
        self.support_miss
    }

    pub fn log_row(&self, pos: usize) -> &[f64] {
        &self.log_probs[pos * self.vocab..(pos + 1) * self.vocab]
    }

    pub fn log_prob(&self, pos: usize, tok: TokenId) -> f64 {
        self.log_probs[pos * self.vocab + tok as usize]
    }

    pub fn prob(&self, pos: usize, tok: TokenId) -> f64 {
        self.log_prob(pos, tok).exp()
    }

    pub fn row(&self, pos: usize) -> Vec<f64> {
        self.log_row(pos).iter().map(|l| l.exp()).collect()
    }

    /// Highest and second-highest probabilities of a row (`P2 = 0` when `V = 1`).
    pub fn top_two(&self, pos: usize) -> (f64, f64) {
        let mut first = f64::NEG_INFINITY;
        let mut second = f64::NEG_INFINITY;
        for &l in self.log_row(pos) {
            if l > first {
                second = first;
                first = l;
            } else if l > second {
                second = l;
            }
        }
        (first.exp(), second.exp())
    }

    /// Verifies row-stochasticity, non-negativity and carry-over rows.
    pub fn check(&self) -> Result<(), String> {
        for pos in 0..self.len {
            let row = self.row(pos);
            if row.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
                return Err(format!("row {pos} has a negative or non-finite entry"));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(format!("row {pos} sums to {sum}"));
            }
            if !self.origin_mask[pos] && !row.contains(&1.0) {
                return Err(format!("row {pos} is revealed but not one-hot"));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const V: usize = 2;
    const A: TokenId = 0;
    const B: TokenId = 1;

    fn z(ids: &[Option<TokenId>]) -> MaskedSequence {
        let raw: Vec<TokenId> = ids.iter().map(|e| e.unwrap_or(V as TokenId)).collect();
        MaskedSequence::from_ids(&raw, V).unwrap()
    }

    #[test]
    fn masked_positions_examples() {
        let all: BTreeSet<usize> = [0, 1, 2].into();
        assert_eq!(masked_positions(&z(&[None, None, None])), all);
        assert_eq!(
            masked_positions(&z(&[Some(A), None, Some(B)])),
            BTreeSet::from([1])
        );
        assert!(masked_positions(&z(&[Some(A), Some(B)])).is_empty());
    }

    #[test]
    fn reveal_examples() {
        let s = z(&[None, None]).reveal(0, A).unwrap();
        assert_eq!(s, z(&[Some(A), None]));
        assert_eq!(s.reveal(0, B), Err(Error::RevealUnmasked(0)));
        assert!(matches!(
            s.reveal(1, V as TokenId),
            Err(Error::InvalidToken { .. })
        ));
        assert!(matches!(
            s.reveal(5, A),
            Err(Error::PositionOutOfRange { .. })
        ));
    }

    #[test]
    fn partition_examples() {
        // ({1,3},{2},{4}) in 1-based notation
        assert!(validate_partition(&[vec![0, 2], vec![1], vec![3]], 4).is_ok());
        assert_eq!(
            validate_partition(&[vec![0], vec![0, 1]], 2),
            Err(PartitionError::Overlap(0))
        );
        assert_eq!(
            validate_partition(&[vec![0]], 2),
            Err(PartitionError::Coverage(vec![1]))
        );
        assert_eq!(
            validate_partition(&[vec![0], vec![]], 1),
            Err(PartitionError::EmptyPart(1))
        );
    }

    #[test]
    fn partition_display_is_one_based() {
        let p = OrderedPartition::new(vec![vec![2, 0], vec![1], vec![3]], 4).unwrap();
        assert_eq!(p.to_string(), "({1,3}, {2}, {4})");
        assert_eq!(p.num_steps(), 3);
        assert!(!p.is_sequential());
    }

    #[test]
    fn vocabulary_rejects_duplicates_and_round_trips() {
        assert!(matches!(
            Vocabulary::new(vec!["a".into(), "a".into()], TokenizerMode::Char),
            Err(Error::DuplicateSymbol(_))
        ));
        let v = Vocabulary::new(vec!["a".into(), "b".into()], TokenizerMode::Char).unwrap();
        assert_eq!(v.mask_id(), 2);
        assert_eq!(v.symbol(v.mask_id()), None);
        let back = Vocabulary::from_json(&v.to_json().unwrap()).unwrap();
        assert_eq!(back, v);
        let x = v.encode("ba").unwrap();
        assert_eq!(x.tokens(), &[1, 0]);
        assert_eq!(v.decode(&x), "ba");
        let plain = Vocabulary::from_json(r#"{"symbols": ["x", "y"]}"#).unwrap();
        assert_eq!(plain.mode(), TokenizerMode::Char);
        let m = MaskedSequence::from_ids(&[0, 2], 2).unwrap();
        assert_eq!(v.render(&m), "a <mask>");
    }

    #[test]
    fn subs_carry_over() {
        let state = z(&[Some(B), None]);
        let m = TokenProbabilityMatrix::from_log_rows(&state, vec![0.5f64.ln(); 4], false);
        assert_eq!(m.row(0), vec![0.0, 1.0]);
        assert_eq!(m.top_two(1), (0.5, 0.5));
        m.check().unwrap();
    }

    #[test]
    fn enumerate_all_is_lexicographic() {
        let all = CleanSequence::enumerate_all(2, 3);
        assert_eq!(all.len(), 9);
        assert_eq!(all[0].tokens(), &[0, 0]);
        assert_eq!(all[5].tokens(), &[1, 2]);
    }
}
