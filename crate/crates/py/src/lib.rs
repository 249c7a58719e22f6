//! Python bindings. Positions in partitions and oracle permutations are 1-based,
//! token ids are 0-based and the mask id equals the vocabulary size.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use duel_core::denoiser::{elbo_loss_mc, fit_tabular};
use duel_core::engine::{aoarm_elbo_exhaustive, duel_sample_indexed, uniform_policy_exact_loglik};
use duel_core::metrics;
use duel_core::oracle::{self, EnumCaps};
use duel_core::persist::AnyDenoiser;
use duel_core::seq::TokenizerMode;
use duel_core::verify::run_verify;
use duel_core::{
    duel_exact_loglik, CleanSequence, Denoiser as _, MaskedSequence, RuleSpec, TokenId, TrainableDenoiser,
    TrajectoryRecord, Vocabulary as CoreVocabulary,
};

fn err(e: duel_core::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse_mode(mode: &str) -> PyResult<TokenizerMode> {
    match mode {
        "char" => Ok(TokenizerMode::Char),
        "whitespace" => Ok(TokenizerMode::Whitespace),
        other => Err(PyValueError::new_err(format!("unknown tokenizer mode {other:?}"))),
    }
}

fn clean(tokens: Vec<TokenId>, vocab: usize) -> PyResult<CleanSequence> {
    CleanSequence::new(tokens, vocab).map_err(err)
}

fn corpus(seqs: Vec<Vec<TokenId>>, vocab: usize) -> PyResult<Vec<CleanSequence>> {
    seqs.into_iter().map(|s| clean(s, vocab)).collect()
}

fn caps(max_len: Option<usize>) -> PyResult<EnumCaps> {
    let mut caps = EnumCaps::from_env().map_err(err)?;
    if let Some(m) = max_len {
        caps.max_len = m;
    }
    Ok(caps)
}

fn record_dict<'py>(py: Python<'py>, rec: &TrajectoryRecord) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("loglik", rec.total_loglik)?;
    d.set_item("nll", rec.nll())?;
    d.set_item("nfe", rec.nfe)?;
    d.set_item("partition", rec.partition.to_one_based())?;
    d.set_item("support_miss", rec.support_miss)?;
    Ok(d)
}

#[pyclass(frozen, module = "duel")]
struct Vocabulary {
    inner: CoreVocabulary,
}

#[pymethods]
impl Vocabulary {
    #[new]
    #[pyo3(signature = (symbols, mode = "char"))]
    fn new(symbols: Vec<String>, mode: &str) -> PyResult<Self> {
        let inner = CoreVocabulary::new(symbols, parse_mode(mode)?).map_err(err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: CoreVocabulary::from_json(text).map_err(err)?,
        })
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(err)
    }

    #[getter]
    fn size(&self) -> usize {
        self.inner.size()
    }

    #[getter]
    fn mask_id(&self) -> TokenId {
        self.inner.mask_id()
    }

    #[getter]
    fn symbols(&self) -> Vec<String> {
        self.inner.symbols().to_vec()
    }

    fn encode(&self, line: &str) -> PyResult<Vec<TokenId>> {
        Ok(self.inner.encode(line).map_err(err)?.tokens().to_vec())
    }

    fn decode(&self, tokens: Vec<TokenId>) -> PyResult<String> {
        Ok(self.inner.decode(&clean(tokens, self.inner.size())?))
    }

    fn __len__(&self) -> usize {
        self.inner.size()
    }
}

/// Tabular or trainable denoiser.
#[pyclass(frozen, module = "duel")]
struct Denoiser {
    inner: AnyDenoiser,
}

#[pymethods]
impl Denoiser {
    #[staticmethod]
    #[pyo3(signature = (corpus, vocab_size, smoothing = 0.0))]
    fn fit_tabular(corpus: Vec<Vec<TokenId>>, vocab_size: usize, smoothing: f64) -> PyResult<Self> {
        let data = self::corpus(corpus, vocab_size)?;
        let d = fit_tabular(&data, vocab_size, smoothing).map_err(err)?;
        Ok(Self { inner: d.into() })
    }

    #[staticmethod]
    #[pyo3(signature = (seq_len, vocab_size, hidden = 16, learning_rate = 0.05, seed = 0))]
    fn trainable(seq_len: usize, vocab_size: usize, hidden: usize, learning_rate: f64, seed: u64) -> PyResult<Self> {
        let d = TrainableDenoiser::new(seq_len, vocab_size, hidden, learning_rate, seed).map_err(err)?;
        Ok(Self { inner: d.into() })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: AnyDenoiser::from_json(text).map_err(err)?,
        })
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(err)
    }

    /// Returns a trained copy; only trainable denoisers support this.
    #[pyo3(signature = (corpus, steps, learning_rate = None, seed = 0))]
    fn train(&self, corpus: Vec<Vec<TokenId>>, steps: usize, learning_rate: Option<f64>, seed: u64) -> PyResult<Self> {
        let AnyDenoiser::Trainable(t) = &self.inner else {
            return Err(PyValueError::new_err("only trainable denoisers can be trained"));
        };
        let data = self::corpus(corpus, t.vocab_size())?;
        let lr = learning_rate.unwrap_or(t.learning_rate());
        Ok(Self {
            inner: t.train(&data, steps, lr, seed).map_err(err)?.into(),
        })
    }

    #[getter]
    fn kind(&self) -> &'static str {
        self.inner.kind()
    }

    #[getter]
    fn seq_len(&self) -> usize {
        self.inner.seq_len()
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.inner.vocab_size()
    }

    /// Probability rows for a masked state given as ids, with `vocab_size` as the mask.
    fn evaluate(&self, ids: Vec<TokenId>) -> PyResult<Vec<Vec<f64>>> {
        let z = MaskedSequence::from_ids(&ids, self.inner.vocab_size()).map_err(err)?;
        let p = self.inner.evaluate(&z);
        Ok((0..p.len()).map(|i| p.row(i)).collect())
    }
}

/// Unmasking rule parsed from its string form, e.g. `greedy:k=2` or `block:2:thresh:mu=0.9`.
#[pyclass(frozen, module = "duel")]
struct Rule {
    inner: RuleSpec,
}

#[pymethods]
impl Rule {
    #[new]
    fn new(spec: &str) -> PyResult<Self> {
        let inner: RuleSpec = spec.parse().map_err(err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn family(&self) -> &'static str {
        self.inner.family()
    }

    fn fixed_nfe(&self, seq_len: usize) -> Option<usize> {
        self.inner.fixed_nfe(seq_len)
    }

    fn __str__(&self) -> String {
        self.inner.to_string()
    }

    fn __repr__(&self) -> String {
        format!("Rule({:?})", self.inner.to_string())
    }
}

/// Exact log-likelihood of `tokens` under the rule's induced policy.
#[pyfunction]
fn exact_loglik<'py>(py: Python<'py>, model: &Denoiser, rule: &Rule, tokens: Vec<TokenId>) -> PyResult<Bound<'py, PyDict>> {
    let x = clean(tokens, model.inner.vocab_size())?;
    let rec = py.detach(|| duel_exact_loglik(&model.inner, &rule.inner, &x)).map_err(err)?;
    record_dict(py, &rec)
}

/// Draws one sequence; `(seed, index)` fully determines the result.
#[pyfunction]
#[pyo3(signature = (model, rule, seed = 0, index = 0))]
fn sample<'py>(
    py: Python<'py>,
    model: &Denoiser,
    rule: &Rule,
    seed: u64,
    index: u64,
) -> PyResult<(Vec<TokenId>, Bound<'py, PyDict>)> {
    let (x, rec) = duel_sample_indexed(&model.inner, &rule.inner, seed, index).map_err(err)?;
    Ok((x.tokens().to_vec(), record_dict(py, &rec)?))
}

/// Any-order ELBO loss (mean sequential NLL over all orders).
#[pyfunction]
fn elbo_exhaustive(model: &Denoiser, tokens: Vec<TokenId>) -> PyResult<f64> {
    let x = clean(tokens, model.inner.vocab_size())?;
    aoarm_elbo_exhaustive(&model.inner, &x).map_err(err)
}

/// Single-draw Monte Carlo ELBO loss (an NLL upper bound in expectation).
#[pyfunction]
#[pyo3(signature = (model, tokens, seed = 0))]
fn elbo_mc_loss(model: &Denoiser, tokens: Vec<TokenId>, seed: u64) -> PyResult<f64> {
    let x = clean(tokens, model.inner.vocab_size())?;
    Ok(elbo_loss_mc(&model.inner, &x, seed))
}

/// Exact log-marginal under uniformly random sequential unmasking.
#[pyfunction]
fn uniform_loglik(model: &Denoiser, tokens: Vec<TokenId>) -> PyResult<f64> {
    let x = clean(tokens, model.inner.vocab_size())?;
    uniform_policy_exact_loglik(&model.inner, &x).map_err(err)
}

#[pyfunction]
fn perplexity(total_nll: f64, token_count: usize) -> PyResult<f64> {
    if token_count == 0 {
        return Err(PyValueError::new_err("token_count must be positive"));
    }
    Ok(metrics::perplexity(total_nll, token_count))
}

/// Percentage of the ELBO-to-ARM gap closed; `None` when the gap is not positive.
#[pyfunction]
fn gap_closed(elbo_ppl: f64, duel_ppl: f64, arm_ppl: f64) -> Option<f64> {
    metrics::gap_closed(elbo_ppl, duel_ppl, arm_ppl).ok()
}

/// All ordered partitions of `1..=n`.
#[pyfunction]
fn enumerate_ordered_partitions(n: usize) -> PyResult<Vec<Vec<Vec<usize>>>> {
    let parts = oracle::enumerate_ordered_partitions(n).map_err(err)?;
    Ok(parts.iter().map(|p| p.to_one_based()).collect())
}

#[pyfunction]
fn ordered_bell(n: usize) -> u64 {
    oracle::ordered_bell(n)
}

/// Best within-block unmasking order for `tokens`.
#[pyfunction]
fn oracle_block_search<'py>(
    py: Python<'py>,
    model: &Denoiser,
    tokens: Vec<TokenId>,
    block: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let x = clean(tokens, model.inner.vocab_size())?;
    let caps = caps(None)?;
    let res = py
        .detach(|| oracle::oracle_block_search(&model.inner, &x, block, &caps))
        .map_err(err)?;
    let out = PyDict::new(py);
    out.set_item("nll", res.nll)?;
    let blocks = res
        .blocks
        .iter()
        .map(|b| {
            let d = PyDict::new(py);
            d.set_item("index", b.index)?;
            d.set_item("best_perm", &b.best_perm)?;
            d.set_item("nll", b.nll)?;
            Ok(d)
        })
        .collect::<PyResult<Vec<_>>>()?;
    out.set_item("blocks", blocks)?;
    Ok(out)
}

/// Runs the self-checks; returns `(name, passed, max_error, detail)` tuples.
#[pyfunction]
#[pyo3(signature = (max_len = None, inject_faulty_rule = false))]
fn verify(py: Python<'_>, max_len: Option<usize>, inject_faulty_rule: bool) -> PyResult<Vec<(String, bool, f64, String)>> {
    let caps = caps(max_len)?;
    let summary = py
        .detach(|| run_verify(&caps, inject_faulty_rule))
        .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    Ok(summary
        .checks
        .into_iter()
        .map(|c| (c.name, c.passed, c.max_error, c.detail))
        .collect())
}

#[pymodule]
fn duel(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Vocabulary>()?;
    m.add_class::<Denoiser>()?;
    m.add_class::<Rule>()?;
    m.add_function(wrap_pyfunction!(exact_loglik, m)?)?;
    m.add_function(wrap_pyfunction!(sample, m)?)?;
    m.add_function(wrap_pyfunction!(elbo_exhaustive, m)?)?;
    m.add_function(wrap_pyfunction!(elbo_mc_loss, m)?)?;
    m.add_function(wrap_pyfunction!(uniform_loglik, m)?)?;
    m.add_function(wrap_pyfunction!(perplexity, m)?)?;
    m.add_function(wrap_pyfunction!(gap_closed, m)?)?;
    m.add_function(wrap_pyfunction!(enumerate_ordered_partitions, m)?)?;
    m.add_function(wrap_pyfunction!(ordered_bell, m)?)?;
    m.add_function(wrap_pyfunction!(oracle_block_search, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    Ok(())
}
