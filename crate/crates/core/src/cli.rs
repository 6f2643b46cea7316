//! Command-line front end. [`run`] takes the argument list and output
//! streams so tests can drive it in-process; the binary only forwards to it.

use std::ffi::OsString;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::Checkpoint;
use crate::config::{Ablation, Config};
use crate::crf::export_transitions;
use crate::data::{read_corpus, serialize_corpus, token_counts, Corpus, LabelSet, ReadOptions, Split, TokenizerOptions};
use crate::error::{Error, Result};
use crate::gradcheck::{self, GradCheckConfig};
use crate::metrics::{evaluate, format_report, report_kv};
use crate::synthetic::{generate_text, SyntheticConfig};
use crate::train::{initial_model, train};

#[derive(Debug, Parser)]
#[command(name = "hsln", version, about = "Sequential sentence classification for scientific abstracts")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write the best-validation checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint on a labeled corpus.
    Evaluate(EvaluateArgs),
    /// Label every sentence of a corpus file.
    Predict(PredictArgs),
    /// Print the learned label transition scores.
    ExportTransitions(ExportArgs),
    /// Compare autodiff gradients with finite differences on a tiny model.
    GradCheck(GradCheckArgs),
    /// Write a grammar-generated corpus.
    MakeSynthetic(SyntheticArgs),
    /// Corpus statistics.
    Stats(StatsArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Named hyperparameter preset (tiny, pubmed-rnn, pubmed-cnn, nicta-rnn, nicta-cnn).
    #[arg(long, default_value = "tiny")]
    pub preset: String,
    /// `key = value` file applied on top of the preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Single `key=value` override; may repeat.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub val: PathBuf,
    /// Pretrained vectors in word2vec text format.
    #[arg(long)]
    pub emb: Option<PathBuf>,
    /// Checkpoint path.
    #[arg(long)]
    pub out: PathBuf,
    /// Training log path; defaults to `<out>.log`.
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Remove a component: context, seq-opt, dropout-reg, attention.
    #[arg(long)]
    pub ablate: Vec<String>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
    /// Also write the metrics as `key = value` lines.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Corpus file; label prefixes are optional.
    #[arg(long)]
    pub input: PathBuf,
    /// Output file; standard output when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradCheckArgs {
    #[arg(long, default_value_t = 11)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-3)]
    pub tolerance: f64,
}

#[derive(Debug, Args)]
pub struct SyntheticArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 500)]
    pub abstracts: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Two-sentence BACKGROUND and OBJECTIVE segments whose content is
    /// shared with this probability.
    #[arg(long)]
    pub positional: Option<f64>,
    /// Prefix of generated abstract ids.
    #[arg(long, default_value = "syn")]
    pub id_prefix: String,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(long)]
    pub input: PathBuf,
}

/// Parses `args` (program name first) and runs the command. Returns the
/// process exit status.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 {
                write!(out, "{text}")
            } else {
                write!(err, "{text}")
            };
            return code;
        }
    };
    match dispatch(cli.command, out, err) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Command, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    match cmd {
        Command::Train(a) => cmd_train(&a, out, err),
        Command::Evaluate(a) => cmd_evaluate(&a, out),
        Command::Predict(a) => cmd_predict(&a, out),
        Command::ExportTransitions(a) => cmd_export(&a, out),
        Command::GradCheck(a) => cmd_grad_check(&a, out),
        Command::MakeSynthetic(a) => cmd_synthetic(&a, out),
        Command::Stats(a) => cmd_stats(&a, out),
    }
}

fn write_out(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes())
        .map_err(|e| Error::io("<stdout>", e))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Preset, then config file, then flags.
pub fn resolve_config(a: &TrainArgs) -> Result<Config> {
    let mut cfg = Config::preset(&a.preset)?;
    if let Some(path) = &a.config {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        cfg.merge_kv(&text)?;
    }
    for kv in &a.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k, v)?;
    }
    if let Some(seed) = a.seed {
        cfg.train.seed = seed;
    }
    if let Some(epochs) = a.epochs {
        cfg.train.epochs = epochs;
    }
    for name in &a.ablate {
        cfg.apply(name.parse::<Ablation>()?);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn tokenizer(cfg: &Config) -> TokenizerOptions {
    TokenizerOptions {
        lowercase: cfg.train.lowercase,
        normalize_digits: cfg.train.normalize_digits,
    }
}

fn read_labeled(path: &Path, cfg: &Config, labels: Option<&LabelSet>, split: Split) -> Result<Corpus> {
    read_corpus(
        path,
        &ReadOptions {
            known_labels: labels,
            tokenizer: tokenizer(cfg),
            split,
            allow_unlabeled: false,
        },
    )
    .map_err(|e| match (e, labels) {
        (Error::UnknownLabel { label, path, line }, Some(known)) => Error::LabelMismatch(format!(
            "label `{label}` at {path}:{line} is not one of the model's labels ({})",
            known.names().join(", ")
        )),
        (e, _) => e,
    })
}

fn cmd_train(a: &TrainArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let cfg = resolve_config(a)?;
    let train_corpus = read_labeled(&a.train, &cfg, None, Split::Train)?;
    let val = read_labeled(&a.val, &cfg, Some(&train_corpus.label_set), Split::Validation)?;
    if train_corpus.multi_label_reduced + val.multi_label_reduced > 0 {
        let _ = writeln!(
            err,
            "warning: {} multi-label sentences reduced to their first label",
            train_corpus.multi_label_reduced + val.multi_label_reduced
        );
    }
    if a.emb.is_none() && cfg.pretrained {
        let _ = writeln!(
            err,
            "warning: preset `{}` expects pretrained embeddings; using seeded random vectors",
            a.preset
        );
    }
    let (model, coverage) = initial_model(&cfg, &train_corpus, a.emb.as_deref())?;
    let mapping: Vec<String> = model
        .labels
        .names()
        .iter()
        .enumerate()
        .map(|(i, n)| format!("{i}={n}"))
        .collect();
    let _ = writeln!(out, "labels {}", mapping.join(" "));
    if let Some(c) = coverage {
        let _ = writeln!(out, "embedding coverage {c}");
    }

    let log_path = a.log.clone().unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".log");
        PathBuf::from(p)
    });
    File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut log_file = OpenOptions::new()
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let mut io_error = None;
    let outcome = train(&cfg, model, &train_corpus, &val, &mut |line| {
        let _ = writeln!(out, "{line}");
        if let Err(e) = writeln!(log_file, "{line}") {
            io_error.get_or_insert(e);
        }
    })?;
    if let Some(e) = io_error {
        return Err(Error::io(&log_path, e));
    }
    outcome.best.save(&a.out)?;
    let _ = writeln!(out, "wrote {}", a.out.display());
    Ok(())
}

fn cmd_evaluate(a: &EvaluateArgs, out: &mut dyn Write) -> Result<()> {
    let ck = Checkpoint::load(&a.model)?;
    let m = &ck.model;
    let corpus = read_labeled(&a.test, &ck.config, Some(&m.labels), Split::Test)?;
    let mut pred = Vec::with_capacity(corpus.abstracts.len());
    let mut gold = Vec::with_capacity(corpus.abstracts.len());
    for abs in &corpus.abstracts {
        pred.push(m.predict_abstract(abs)?);
        gold.push(abs.gold().ok_or_else(|| Error::Contract("unlabeled sentence".into()))?);
    }
    let report = evaluate(&pred, &gold, &m.labels)?;
    write_out(out, &format_report(&report))?;
    if let Some(path) = &a.out {
        write_file(path, &report_kv(&report))?;
    }
    Ok(())
}

fn cmd_predict(a: &PredictArgs, out: &mut dyn Write) -> Result<()> {
    let ck = Checkpoint::load(&a.model)?;
    let m = &ck.model;
    let mut corpus = read_corpus(
        &a.input,
        &ReadOptions {
            known_labels: Some(&m.labels),
            tokenizer: tokenizer(&ck.config),
            split: Split::Test,
            allow_unlabeled: true,
        },
    )?;
    for abs in &mut corpus.abstracts {
        let path = m.predict_abstract(abs)?;
        abs.labels = path.into_iter().map(Some).collect();
    }
    let text = serialize_corpus(&corpus.abstracts, &m.labels);
    match &a.out {
        Some(path) => write_file(path, &text),
        None => write_out(out, &text),
    }
}

fn cmd_export(a: &ExportArgs, out: &mut dyn Write) -> Result<()> {
    let ck = Checkpoint::load(&a.model)?;
    let t = ck
        .model
        .transitions()
        .ok_or_else(|| Error::Config("checkpoint was trained without the CRF layer".into()))?;
    let text = export_transitions(t, &ck.model.labels);
    match &a.out {
        Some(path) => write_file(path, &text),
        None => write_out(out, &text),
    }
}

fn cmd_grad_check(a: &GradCheckArgs, out: &mut dyn Write) -> Result<()> {
    let report = gradcheck::run(&GradCheckConfig {
        seed: a.seed,
        ..GradCheckConfig::default()
    })?;
    let _ = writeln!(
        out,
        "parameters = {}\nscalars = {}\nobjective = {:e}\nmax_rel_error = {:e}\nworst = {}",
        report.parameters, report.scalars, report.objective, report.max_rel_error, report.worst
    );
    if report.passed(a.tolerance) {
        let _ = writeln!(out, "ok");
        Ok(())
    } else {
        Err(Error::NonFinite(format!(
            "gradient check failed: relative error {:e} at {} exceeds {:e}",
            report.max_rel_error, report.worst, a.tolerance
        )))
    }
}

fn cmd_synthetic(a: &SyntheticArgs, out: &mut dyn Write) -> Result<()> {
    let mut cfg = match a.positional {
        Some(p) => SyntheticConfig::positional(a.abstracts, a.seed, p),
        None => SyntheticConfig {
            abstracts: a.abstracts,
            seed: a.seed,
            ..SyntheticConfig::default()
        },
    };
    cfg.id_prefix = a.id_prefix.clone();
    write_file(&a.out, &generate_text(&cfg)?)?;
    let _ = writeln!(out, "wrote {} abstracts to {}", a.abstracts, a.out.display());
    Ok(())
}

fn cmd_stats(a: &StatsArgs, out: &mut dyn Write) -> Result<()> {
    let corpus = read_corpus(&a.input, &ReadOptions::default())?;
    let l = corpus.label_set.len();
    let mut per_label = vec![0usize; l];
    for abs in &corpus.abstracts {
        for y in abs.labels.iter().flatten() {
            per_label[*y] += 1;
        }
    }
    let mut text = format!(
        "abstracts = {}\nsentences = {}\nlabels = {}\ntokens = {}\nmulti_label_reduced = {}\n",
        corpus.abstracts.len(),
        corpus.sentence_count(),
        l,
        token_counts(&corpus).len(),
        corpus.multi_label_reduced
    );
    for (i, (name, n)) in corpus.label_set.names().iter().zip(per_label).enumerate() {
        text.push_str(&format!("label.{i} = {name} {n}\n"));
    }
    write_out(out, &text)
}
