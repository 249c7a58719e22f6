//! The `duel` command line.
//!
//! Corpus files hold one sequence per line; blank lines are skipped and every
//! other line must tokenize to the same length. Vocabulary and model files are
//! JSON. Reports go to `--out` or stdout as JSON or CSV.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use duel_core::denoiser::{fit_tabular, TrainableDenoiser};
use duel_core::engine::duel_sample_indexed;
use duel_core::metrics::{
    evaluate_corpus, gap_closed, generative_perplexity, nfe_sweep, rows_to_csv, token_entropy, CsvRow, EvalMethod,
    EvaluationReport, MethodKind, RuleFamily, SweepValue,
};
use duel_core::oracle::{oracle_block_search, EnumCaps, OracleSearch};
use duel_core::persist::AnyDenoiser;
use duel_core::seq::TokenizerMode;
use duel_core::verify::run_verify;
use duel_core::{CleanSequence, Denoiser, RuleSpec, Vocabulary};
use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("line {line}: expected {expected} tokens, got {got}")]
    NonUniformLength { line: usize, expected: usize, got: usize },
    #[error("verification failed: {0}")]
    VerifyFailed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => 1,
            Self::Data(_) | Self::NonUniformLength { .. } => 2,
            Self::VerifyFailed(_) => 3,
        }
    }
}

impl From<duel_core::Error> for CliError {
    fn from(e: duel_core::Error) -> Self {
        Self::Data(e.to_string())
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, Parser)]
#[command(name = "duel", version, about = "Masked diffusion samplers with exact likelihood")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a vocabulary file from a corpus.
    BuildVocab(BuildVocabArgs),
    /// Fit a tabular or trainable denoiser.
    Train(TrainArgs),
    /// Evaluate a model on a corpus.
    Eval(EvalArgs),
    /// Draw sequences from a model and rule.
    Sample(SampleArgs),
    /// Per-block search over unmasking orders.
    OracleSearch(OracleArgs),
    /// Sweep rule families over k, mu or target NFE.
    CompareRules(CompareArgs),
    /// Run the brute-force check suite.
    Verify(VerifyArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Char,
    Whitespace,
}

impl From<Mode> for TokenizerMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Char => TokenizerMode::Char,
            Mode::Whitespace => TokenizerMode::Whitespace,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Json,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Tabular,
    Trainable,
}

#[derive(Debug, Args)]
pub struct BuildVocabArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, value_enum, default_value = "char")]
    pub mode: Mode,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long, value_enum, default_value = "tabular")]
    pub kind: ModelKind,
    /// Additive smoothing of the tabular joint.
    #[arg(long, default_value_t = 0.0)]
    pub lambda: f64,
    #[arg(long, default_value_t = 16)]
    pub hidden: usize,
    #[arg(long, default_value_t = 0.05)]
    pub lr: f64,
    #[arg(long, default_value_t = 2000)]
    pub steps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_method(s: &str) -> Result<MethodKind, String> {
    s.parse().map_err(|e: duel_core::Error| e.to_string())
}

/// Rule selection shared by `eval` and `sample`.
#[derive(Debug, Clone, Args, Serialize)]
pub struct RuleArgs {
    /// Full rule spec (`greedy:k=2`) or a bare family combined with --k/--mu/--nu.
    #[arg(long)]
    pub rule: Option<String>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub mu: Option<f64>,
    #[arg(long)]
    pub nu: Option<f64>,
    /// Block size; wraps the rule in a block restriction.
    #[arg(long)]
    pub block: Option<usize>,
}

impl RuleArgs {
    fn has_params(&self) -> bool {
        self.k.is_some() || self.mu.is_some() || self.nu.is_some()
    }

    fn any(&self) -> bool {
        self.rule.is_some() || self.has_params() || self.block.is_some()
    }

    /// The rule spec these flags denote.
    pub fn resolve(&self) -> Result<RuleSpec> {
        let rule = self
            .rule
            .as_deref()
            .ok_or_else(|| CliError::Usage("--rule is required".into()))?;
        let spec = if rule.contains(':') {
            if self.has_params() {
                return Err(CliError::Usage(
                    "--k/--mu/--nu only combine with a bare rule family".into(),
                ));
            }
            rule.to_string()
        } else {
            let need = |v: Option<f64>, name: &str| {
                v.ok_or_else(|| CliError::Usage(format!("rule {rule} needs --{name}")))
            };
            let reject = |bad: bool, what: &str| {
                if bad {
                    Err(CliError::Usage(format!("rule {rule} does not take {what}")))
                } else {
                    Ok(())
                }
            };
            match rule {
                "l2r" | "greedy" | "margin" => {
                    reject(self.mu.is_some() || self.nu.is_some(), "--mu/--nu")?;
                    format!("{rule}:k={}", self.k.unwrap_or(1))
                }
                "thresh" => {
                    reject(self.k.is_some() || self.nu.is_some(), "--k/--nu")?;
                    format!("thresh:mu={}", need(self.mu, "mu")?)
                }
                "klass" => {
                    reject(self.k.is_some(), "--k")?;
                    format!("klass:mu={},nu={}", need(self.mu, "mu")?, need(self.nu, "nu")?)
                }
                other => return Err(CliError::Usage(format!("unknown rule family {other:?}"))),
            }
        };
        let spec = match self.block {
            Some(b) => format!("block:{b}:{spec}"),
            None => spec,
        };
        spec.parse().map_err(|e: duel_core::Error| CliError::Usage(e.to_string()))
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, value_parser = parse_method, default_value = "duel")]
    #[serde(serialize_with = "display")]
    pub method: MethodKind,
    #[command(flatten)]
    #[serde(flatten)]
    pub rule: RuleArgs,
    /// Monte Carlo samples per sequence for elbo-mc.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub mc_samples: Option<u64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "json")]
    pub format: Format,
    /// Evaluate sequences concurrently; output is unchanged.
    #[arg(long)]
    pub parallel: bool,
}

fn display<T: std::fmt::Display, S: serde::Serializer>(v: &T, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.collect_str(v)
}

impl EvalArgs {
    /// The evaluation method, rejecting flags that do not apply to it.
    pub fn resolve_method(&self) -> Result<EvalMethod> {
        let m = self.method;
        let forbid = |bad: bool, what: &str| {
            if bad {
                Err(CliError::Usage(format!("--method {m} does not take {what}")))
            } else {
                Ok(())
            }
        };
        match m {
            MethodKind::Duel => {
                forbid(self.mc_samples.is_some(), "--mc-samples")?;
                Ok(EvalMethod::Duel(self.rule.resolve()?))
            }
            MethodKind::ElboMc => {
                forbid(self.rule.any(), "rule flags")?;
                let samples = self
                    .mc_samples
                    .ok_or_else(|| CliError::Usage("--method elbo-mc needs --mc-samples".into()))?;
                Ok(EvalMethod::ElboMc {
                    samples: samples as usize,
                    seed: self.seed,
                })
            }
            MethodKind::ElboExhaustive | MethodKind::ArmExact => {
                forbid(self.rule.any(), "rule flags")?;
                forbid(self.mc_samples.is_some(), "--mc-samples")?;
                Ok(if m == MethodKind::ArmExact {
                    EvalMethod::ArmExact
                } else {
                    EvalMethod::ElboExhaustive
                })
            }
            MethodKind::Oracle => {
                forbid(self.rule.rule.is_some() || self.rule.has_params(), "rule flags")?;
                forbid(self.mc_samples.is_some(), "--mc-samples")?;
                let block = self
                    .rule
                    .block
                    .ok_or_else(|| CliError::Usage("--method oracle needs --block".into()))?;
                Ok(EvalMethod::Oracle { block })
            }
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct SampleArgs {
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    pub rule: RuleArgs,
    #[arg(long, default_value_t = 10)]
    pub num: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Model used to score samples left to right.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "json")]
    pub format: Format,
}

#[derive(Debug, Args, Serialize)]
pub struct OracleArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub block: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "json")]
    pub format: Format,
}

#[derive(Debug, Args, Serialize)]
pub struct CompareArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    /// Comma-separated rule families.
    #[arg(long, value_delimiter = ',', default_value = "l2r,greedy,margin")]
    pub families: Vec<String>,
    /// k values for fixed-k families.
    #[arg(long, value_delimiter = ',')]
    pub k: Vec<usize>,
    /// Thresholds for thresh and klass.
    #[arg(long, value_delimiter = ',')]
    pub mu: Vec<f64>,
    /// Target mean NFEs for thresh and klass; thresholds are calibrated.
    #[arg(long, value_delimiter = ',')]
    pub target_nfe: Vec<f64>,
    #[arg(long, default_value_t = 0.01)]
    pub nu: f64,
    #[arg(long)]
    pub block: Option<usize>,
    /// ELBO baseline by Monte Carlo with this many samples; exhaustive when absent.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub mc_samples: Option<u64>,
    /// Model for the left-to-right baseline; defaults to --model.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "csv")]
    pub format: Format,
    #[arg(long)]
    pub parallel: bool,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// Add a rule that selects nothing; the progress check must then fail.
    #[arg(long)]
    pub inject_faulty_rule: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn emit(out: Option<&Path>, body: &str, stdout: &mut dyn Write) -> Result<()> {
    match out {
        Some(p) => fs::write(p, body).map_err(|e| CliError::Data(format!("{}: {e}", p.display()))),
        None => stdout
            .write_all(body.as_bytes())
            .map_err(|e| CliError::Data(format!("stdout: {e}"))),
    }
}

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(v).map_err(|e| CliError::Data(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

/// Non-blank lines with their 1-based line numbers.
fn corpus_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.trim().is_empty())
}

/// Sorted symbol inventory of a fixed-length corpus.
pub fn build_vocab(text: &str, mode: TokenizerMode) -> Result<Vocabulary> {
    let mut symbols = std::collections::BTreeSet::new();
    let mut expected = None;
    for (line, l) in corpus_lines(text) {
        let toks = mode.split(l);
        match expected {
            None => expected = Some(toks.len()),
            Some(e) if e != toks.len() => {
                return Err(CliError::NonUniformLength {
                    line,
                    expected: e,
                    got: toks.len(),
                })
            }
            _ => {}
        }
        symbols.extend(toks);
    }
    Ok(Vocabulary::new(symbols.into_iter().collect(), mode)?)
}

/// Encodes every non-blank line; all must share one length.
pub fn load_corpus(text: &str, vocab: &Vocabulary) -> Result<Vec<CleanSequence>> {
    let mut out: Vec<CleanSequence> = Vec::new();
    for (line, l) in corpus_lines(text) {
        let x = vocab
            .encode(l)
            .map_err(|e| CliError::Data(format!("line {line}: {e}")))?;
        if let Some(first) = out.first() {
            if first.len() != x.len() {
                return Err(CliError::NonUniformLength {
                    line,
                    expected: first.len(),
                    got: x.len(),
                });
            }
        }
        out.push(x);
    }
    if out.is_empty() {
        return Err(duel_core::Error::EmptyCorpus.into());
    }
    Ok(out)
}

fn load_vocab(path: &Path) -> Result<Vocabulary> {
    Ok(Vocabulary::from_json(&read(path)?)?)
}

fn load_model(path: &Path, vocab: &Vocabulary) -> Result<AnyDenoiser> {
    let d = AnyDenoiser::from_json(&read(path)?)?;
    if d.vocab_size() != vocab.size() {
        return Err(duel_core::Error::VocabMismatch {
            expected: vocab.size(),
            got: d.vocab_size(),
        }
        .into());
    }
    Ok(d)
}

fn check_lengths(d: &dyn Denoiser, corpus: &[CleanSequence]) -> Result<()> {
    match corpus.first() {
        Some(x) if x.len() != d.seq_len() => Err(duel_core::Error::LengthMismatch {
            expected: d.seq_len(),
            got: x.len(),
        }
        .into()),
        _ => Ok(()),
    }
}

fn config_value<T: Serialize>(command: &str, args: &T) -> Result<serde_json::Value> {
    let mut v = serde_json::to_value(args).map_err(|e| CliError::Data(e.to_string()))?;
    if let Some(obj) = v.as_object_mut() {
        obj.insert("command".into(), command.into());
    }
    Ok(v)
}

/// Loads the inputs named by `args` and evaluates.
pub fn run_eval(args: &EvalArgs) -> Result<EvaluationReport> {
    let method = args.resolve_method()?;
    let vocab = load_vocab(&args.vocab)?;
    let model = load_model(&args.model, &vocab)?;
    let corpus = load_corpus(&read(&args.corpus)?, &vocab)?;
    check_lengths(&model, &corpus)?;
    let caps = EnumCaps::from_env()?;
    let mut report = evaluate_corpus(&model, &method, &corpus, args.parallel, &caps)?;
    report.seed = Some(args.seed);
    report.config = config_value("eval", args)?;
    Ok(report)
}

fn render_eval(report: &EvaluationReport, format: Format) -> Result<String> {
    match format {
        Format::Json => to_json(report),
        Format::Csv => Ok(rows_to_csv(&[CsvRow::from_report(report, None)])?),
    }
}

fn cmd_build_vocab(args: &BuildVocabArgs, stdout: &mut dyn Write) -> Result<()> {
    let vocab = build_vocab(&read(&args.corpus)?, args.mode.into())?;
    let mut body = vocab.to_json()?;
    body.push('\n');
    emit(args.out.as_deref(), &body, stdout)
}

fn cmd_train(args: &TrainArgs, stdout: &mut dyn Write) -> Result<()> {
    let vocab = load_vocab(&args.vocab)?;
    let corpus = load_corpus(&read(&args.corpus)?, &vocab)?;
    let model: AnyDenoiser = match args.kind {
        ModelKind::Tabular => fit_tabular(&corpus, vocab.size(), args.lambda)?.into(),
        ModelKind::Trainable => {
            let init = TrainableDenoiser::new(corpus[0].len(), vocab.size(), args.hidden, args.lr, args.seed)?;
            init.train(&corpus, args.steps, args.lr, args.seed)?.into()
        }
    };
    let mut body = model.to_json()?;
    body.push('\n');
    emit(args.out.as_deref(), &body, stdout)
}

#[derive(Serialize)]
struct SampleRecord {
    index: u64,
    text: String,
    tokens: Vec<u32>,
    loglik: Option<f64>,
    nfe: usize,
    trajectory: serde_json::Value,
}

#[derive(Serialize)]
struct SampleReport {
    config: serde_json::Value,
    rule: String,
    seed: u64,
    token_entropy: f64,
    generative_perplexity: Option<f64>,
    samples: Vec<SampleRecord>,
}

fn cmd_sample(args: &SampleArgs, stdout: &mut dyn Write) -> Result<()> {
    let rule = args.rule.resolve()?;
    let vocab = load_vocab(&args.vocab)?;
    let model = load_model(&args.model, &vocab)?;
    rule.validate_for_len(model.seq_len())?;
    let mut samples = Vec::new();
    let mut records = Vec::new();
    for i in 0..args.num {
        let (x, rec) = duel_sample_indexed(&model, &rule, args.seed, i)?;
        let loglik = duel_core::duel_exact_loglik(&model, &rule, &x)?.total_loglik;
        records.push(SampleRecord {
            index: i,
            text: vocab.decode(&x),
            tokens: x.tokens().to_vec(),
            loglik: loglik.is_finite().then_some(loglik),
            nfe: rec.nfe,
            trajectory: serde_json::to_value(&rec).map_err(|e| CliError::Data(e.to_string()))?,
        });
        samples.push(x);
    }
    let generative_perplexity = match &args.reference {
        Some(p) if !samples.is_empty() => Some(generative_perplexity(&samples, &load_model(p, &vocab)?)?),
        _ => None,
    };
    let report = SampleReport {
        config: config_value("sample", args)?,
        rule: rule.to_string(),
        seed: args.seed,
        token_entropy: if samples.is_empty() { 0.0 } else { token_entropy(&samples)? },
        generative_perplexity,
        samples: records,
    };
    let body = match args.format {
        Format::Json => to_json(&report)?,
        Format::Csv => {
            let mut w = String::from("index,text,loglik,nfe\n");
            for r in &report.samples {
                let ll = r.loglik.map(|v| v.to_string()).unwrap_or_default();
                w.push_str(&format!("{},\"{}\",{},{}\n", r.index, r.text.replace('"', "\"\""), ll, r.nfe));
            }
            w
        }
    };
    emit(args.out.as_deref(), &body, stdout)
}

#[derive(Serialize)]
struct OracleRecord {
    index: usize,
    #[serde(flatten)]
    search: OracleSearch,
}

#[derive(Serialize)]
struct OracleReport {
    config: serde_json::Value,
    block: usize,
    total_nll: f64,
    token_count: usize,
    perplexity: f64,
    sequences: Vec<OracleRecord>,
}

fn cmd_oracle(args: &OracleArgs, stdout: &mut dyn Write) -> Result<()> {
    let vocab = load_vocab(&args.vocab)?;
    let model = load_model(&args.model, &vocab)?;
    let corpus = load_corpus(&read(&args.corpus)?, &vocab)?;
    check_lengths(&model, &corpus)?;
    let caps = EnumCaps::from_env()?;
    let sequences = corpus
        .iter()
        .enumerate()
        .map(|(index, x)| Ok(OracleRecord {
            index,
            search: oracle_block_search(&model, x, args.block, &caps)?,
        }))
        .collect::<Result<Vec<_>>>()?;
    let total_nll: f64 = sequences.iter().map(|s| s.search.nll).sum();
    let token_count = corpus.len() * corpus[0].len();
    let report = OracleReport {
        config: config_value("oracle-search", args)?,
        block: args.block,
        total_nll,
        token_count,
        perplexity: duel_core::metrics::perplexity(total_nll, token_count),
        sequences,
    };
    let body = match args.format {
        Format::Json => to_json(&report)?,
        Format::Csv => {
            let mut w = String::from("index,nll,best_perms\n");
            for s in &report.sequences {
                let perms: Vec<String> = s
                    .search
                    .blocks
                    .iter()
                    .map(|b| b.best_perm.iter().map(ToString::to_string).collect::<Vec<_>>().join(" "))
                    .collect();
                w.push_str(&format!("{},{},{}\n", s.index, s.search.nll, perms.join("|")));
            }
            w
        }
    };
    emit(args.out.as_deref(), &body, stdout)
}

#[derive(Serialize)]
struct CompareReport {
    config: serde_json::Value,
    baselines: Vec<EvaluationReport>,
    sweeps: Vec<EvaluationReport>,
    rows: Vec<CsvRow>,
}

fn cmd_compare(args: &CompareArgs, stdout: &mut dyn Write) -> Result<()> {
    let vocab = load_vocab(&args.vocab)?;
    let model = load_model(&args.model, &vocab)?;
    let corpus = load_corpus(&read(&args.corpus)?, &vocab)?;
    check_lengths(&model, &corpus)?;
    let caps = EnumCaps::from_env()?;
    let reference = match &args.reference {
        Some(p) => load_model(p, &vocab)?,
        None => model.clone(),
    };
    check_lengths(&reference, &corpus)?;

    let elbo_method = match args.mc_samples {
        Some(k) => EvalMethod::ElboMc {
            samples: k as usize,
            seed: args.seed,
        },
        None => EvalMethod::ElboExhaustive,
    };
    let elbo = evaluate_corpus(&model, &elbo_method, &corpus, args.parallel, &caps)?;
    let arm = evaluate_corpus(&reference, &EvalMethod::ArmExact, &corpus, args.parallel, &caps)?;
    let (ppl_elbo, ppl_arm) = (elbo.aggregates.perplexity, arm.aggregates.perplexity);

    let mut sweeps = Vec::new();
    for name in &args.families {
        let family = RuleFamily::new(name.trim(), args.nu, args.block)?;
        let values: Vec<SweepValue> = if family.is_adaptive() {
            args.mu
                .iter()
                .map(|&m| SweepValue::Mu(m))
                .chain(args.target_nfe.iter().map(|&t| SweepValue::TargetNfe(t)))
                .collect()
        } else if args.k.is_empty() {
            vec![SweepValue::K(1)]
        } else {
            args.k.iter().map(|&k| SweepValue::K(k)).collect()
        };
        if values.is_empty() {
            return Err(CliError::Usage(format!("family {name} needs --mu or --target-nfe")));
        }
        for point in nfe_sweep(&model, &family, &values, &corpus, args.parallel)? {
            sweeps.push(point.report);
        }
    }
    let mut rows = vec![CsvRow::from_report(&elbo, None), CsvRow::from_report(&arm, None)];
    rows.extend(
        sweeps
            .iter()
            .map(|r| CsvRow::from_report(r, gap_closed(ppl_elbo, r.aggregates.perplexity, ppl_arm).ok())),
    );
    let report = CompareReport {
        config: config_value("compare-rules", args)?,
        baselines: vec![elbo, arm],
        sweeps,
        rows,
    };
    let body = match args.format {
        Format::Json => to_json(&report)?,
        Format::Csv => rows_to_csv(&report.rows)?,
    };
    emit(args.out.as_deref(), &body, stdout)
}

fn cmd_verify(args: &VerifyArgs, stdout: &mut dyn Write) -> Result<()> {
    let caps = EnumCaps::from_env().map_err(|e| CliError::Usage(e.to_string()))?;
    let summary = run_verify(&caps, args.inject_faulty_rule)?;
    let mut text = String::new();
    for c in &summary.checks {
        text.push_str(&format!(
            "{} {:<22} max_error={:.3e} {}\n",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.max_error,
            c.detail
        ));
    }
    stdout
        .write_all(text.as_bytes())
        .map_err(|e| CliError::Data(format!("stdout: {e}")))?;
    if let Some(p) = &args.out {
        emit(Some(p), &to_json(&summary)?, stdout)?;
    }
    if summary.passed() {
        Ok(())
    } else {
        let failed: Vec<&str> = summary
            .checks
            .iter()
            .filter(|c| !c.passed)
            .map(|c| c.name.as_str())
            .collect();
        Err(CliError::VerifyFailed(failed.join(", ")))
    }
}

pub fn run(cli: &Cli, stdout: &mut dyn Write) -> Result<()> {
    match &cli.command {
        Command::BuildVocab(a) => cmd_build_vocab(a, stdout),
        Command::Train(a) => cmd_train(a, stdout),
        Command::Eval(a) => {
            let report = run_eval(a)?;
            emit(a.out.as_deref(), &render_eval(&report, a.format)?, stdout)
        }
        Command::Sample(a) => cmd_sample(a, stdout),
        Command::OracleSearch(a) => cmd_oracle(a, stdout),
        Command::CompareRules(a) => cmd_compare(a, stdout),
        Command::Verify(a) => cmd_verify(a, stdout),
    }
}

/// Parses `argv`, runs, reports errors on `stderr` and returns the exit code.
pub fn main_with<I, T>(argv: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = write!(stderr, "{e}");
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(&cli, stdout) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            e.exit_code()
        }
    }
}
