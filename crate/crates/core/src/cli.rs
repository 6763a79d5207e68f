//! Command-line entry points: `train`, `eval`, `score` and `gradcheck`.

use crate::attention::{write_attention_dump, AttentionRecord};
use crate::config::RunConfig;
use crate::data::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::data::{build_vocab, QADataset, Split};
use crate::embedding::{pad_truncate, tokenize};
use crate::error::{Error, Result};
use crate::gradcheck::{gradcheck, toy_config, GradcheckOptions, GradcheckReport};
use crate::metrics::EvalReport;
use crate::model::Model;
use crate::par::Execution;
use crate::tensor::Tape;
use crate::trainer::{encode_dataset, evaluate, train, EpochRecord, TrainOutcome};
use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;
pub const EXIT_GRADCHECK: i32 = 5;

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Usage(_) | Error::Dimension { .. } => EXIT_CONFIG,
        Error::Data(_) | Error::Io { .. } | Error::Checkpoint(_) => EXIT_DATA,
        Error::Numerical(_) | Error::Degenerate(_) => EXIT_NUMERICAL,
    }
}

#[derive(Debug, Parser)]
#[command(name = "ammsnn", version, about = "Attentive multi-size CNN answer selection")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReportFormat {
    Text,
    Kv,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write the best checkpoint and the epoch log.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides train.seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Evaluate the dev set on one thread.
        #[arg(long)]
        sequential: bool,
    },
    /// Rank a test split with a saved model and report MAP, MRR and top-1.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Supplies data.test and output.attention; its model settings must
        /// match the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Test split in four-column TSV; overrides data.test.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Write attention matrices for the first N questions.
        #[arg(long, value_name = "N")]
        dump_attention: Option<usize>,
        /// Destination of the attention dump.
        #[arg(long)]
        attention_out: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = ReportFormat::Text)]
        format: ReportFormat,
        #[arg(long)]
        sequential: bool,
    },
    /// Rank candidate answers for one question. The first line of the input
    /// is the question, every further non-empty line a candidate.
    Score {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Input file; standard input when omitted.
        input: Option<PathBuf>,
    },
    /// Compare analytic and finite-difference gradients on random models.
    Gradcheck {
        /// Model settings to check; the small default model otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Random instances to check.
        #[arg(long, default_value_t = 4)]
        samples: usize,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Entries checked per parameter tensor (all when omitted).
        #[arg(long)]
        entries: Option<usize>,
        #[arg(long, hide = true)]
        corrupt_group: Option<String>,
    },
}

fn execution(sequential: bool) -> Execution {
    if sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    }
}

/// Result of a finished training run.
#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub outcome: TrainOutcome,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
}

fn log_line(w: &mut impl Write, path: &Path, value: &serde_json::Value) -> Result<()> {
    serde_json::to_writer(&mut *w, value)
        .map_err(std::io::Error::from)
        .and_then(|_| w.write_all(b"\n"))
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

/// Loads the splits named in `cfg`, trains, and writes the best checkpoint
/// and the JSON-lines epoch log. `progress` sees every epoch record.
pub fn cmd_train(cfg: &RunConfig, exec: Execution, mut progress: impl FnMut(&EpochRecord)) -> Result<TrainSummary> {
    cfg.validate()?;
    let (train_path, dev_path) = cfg.require_train_paths()?;
    let train_set = QADataset::load_tsv(train_path, Split::Train)?;
    let mut dev_set = QADataset::load_tsv(dev_path, Split::Dev)?;
    dev_set.retain_rankable();
    if dev_set.is_empty() {
        return Err(Error::Data(format!("{}: no question with a positive answer", dev_path.display())));
    }
    let vocab = build_vocab(&train_set, cfg.min_count)?;
    let model_cfg = cfg.model_config(vocab.len())?;
    let seed = cfg.train.seed;
    let model = Model::init(model_cfg.clone(), &mut ChaCha8Rng::seed_from_u64(seed))?;
    let train_q = encode_dataset(&train_set, &vocab, model_cfg.seq_len)?;
    let dev_q = encode_dataset(&dev_set, &vocab, model_cfg.seq_len)?;

    let file = std::fs::File::create(&cfg.log).map_err(|e| Error::io(&cfg.log, e))?;
    let mut log = std::io::BufWriter::new(file);
    let resolved: serde_json::Map<String, serde_json::Value> =
        cfg.resolved().into_iter().map(|(k, v)| (k.to_string(), json!(v))).collect();
    log_line(&mut log, &cfg.log, &json!({ "config": resolved, "seed": seed }))?;

    // a separate stream keeps sampling independent of initialisation
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let mut write_err = None;
    let outcome = train(model, &train_q, &dev_q, &cfg.train, exec, &mut rng, |rec| {
        progress(rec);
        let value = serde_json::to_value(rec).expect("epoch records serialize");
        if let Err(e) = log_line(&mut log, &cfg.log, &value) {
            write_err = Some(e);
            return ControlFlow::Break(());
        }
        ControlFlow::Continue(())
    })?;
    if let Some(e) = write_err {
        return Err(e);
    }

    let mut run = BTreeMap::new();
    for (k, v) in cfg.resolved() {
        if let Some(key) = k.strip_prefix("train.") {
            run.insert(key.to_string(), v);
        }
    }
    run.insert("best_epoch".to_string(), outcome.best_epoch.to_string());
    save_checkpoint(&cfg.checkpoint, &outcome.best, &vocab, &run)?;
    let best = &outcome.log[outcome.best_epoch.min(outcome.log.len() - 1)];
    log_line(
        &mut log,
        &cfg.log,
        &json!({
            "best_epoch": outcome.best_epoch,
            "best_dev_map": best.dev_map,
            "best_dev_mrr": best.dev_mrr,
            "best_dev_top1": best.dev_top1,
            "checkpoint": cfg.checkpoint.display().to_string(),
        }),
    )?;
    Ok(TrainSummary {
        outcome,
        checkpoint: cfg.checkpoint.clone(),
        log: cfg.log.clone(),
    })
}

/// Attention records for every candidate of the first `n` questions.
pub fn attention_records(ck: &Checkpoint, dataset: &QADataset, n: usize) -> Result<Vec<AttentionRecord>> {
    let model = &ck.model;
    if model.attention.is_none() {
        return Err(Error::Usage("the checkpoint has no attention layer to dump".into()));
    }
    let l = model.config.seq_len;
    let mut out = Vec::new();
    for q in dataset.questions.iter().take(n) {
        let qseq = pad_truncate(&ck.vocab.encode(&q.tokens), l)?;
        for c in &q.candidates {
            let aseq = pad_truncate(&ck.vocab.encode(&c.tokens), l)?;
            let mut tape = Tape::new();
            let qf = model.encode_question(&mut tape, &qseq)?;
            let af = model.encode(&mut tape, &aseq)?;
            let rep = model.represent(&mut tape, &qf, &af)?;
            let att = rep.attention.expect("model has attention");
            let qtok = &q.tokens[..qseq.len];
            let atok = &c.tokens[..aseq.len];
            out.push(AttentionRecord::from_tape(&tape, &att, &q.id, qtok, atok));
        }
    }
    Ok(out)
}

/// Evaluates a checkpoint on a test split.
pub fn cmd_eval(ck: &Checkpoint, test: &QADataset, exec: Execution) -> Result<EvalReport> {
    let mut test = test.clone();
    test.retain_rankable();
    let encoded = encode_dataset(&test, &ck.vocab, ck.model.config.seq_len)?;
    let run = evaluate(&ck.model, &encoded, exec)?;
    EvalReport::from_run(&run)
}

/// Candidates best first as `(position in input, score)`.
pub fn cmd_score(ck: &Checkpoint, question: &str, candidates: &[String]) -> Result<Vec<(usize, f64)>> {
    let l = ck.model.config.seq_len;
    let prep = |text: &str| -> Result<_> {
        let toks = tokenize(text);
        if toks.is_empty() {
            return Err(Error::Data(format!("{text:?} has no tokens")));
        }
        pad_truncate(&ck.vocab.encode(&toks), l)
    };
    if candidates.is_empty() {
        return Err(Error::Data("no candidate answers to score".into()));
    }
    let q = prep(question)?;
    let seqs = candidates.iter().map(|c| prep(c)).collect::<Result<Vec<_>>>()?;
    let ranked = ck.model.rank(&q, &seqs, &vec![0; seqs.len()])?;
    Ok(ranked.into_iter().map(|c| (c.id, c.score)).collect())
}

pub fn cmd_gradcheck(config: Option<&RunConfig>, opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let model_cfg = match config {
        Some(c) => c.model_config(24)?,
        None => toy_config(24),
    };
    gradcheck(&model_cfg, opts)
}

fn read_score_input(input: Option<&Path>) -> Result<(String, Vec<String>)> {
    let lines: Vec<String> = match input {
        Some(p) => {
            let f = std::fs::File::open(p).map_err(|e| Error::io(p, e))?;
            std::io::BufReader::new(f)
                .lines()
                .collect::<std::io::Result<_>>()
                .map_err(|e| Error::io(p, e))?
        }
        None => std::io::stdin()
            .lock()
            .lines()
            .collect::<std::io::Result<_>>()
            .map_err(|e| Error::io("<stdin>", e))?,
    };
    let mut it = lines.into_iter().filter(|l| !l.trim().is_empty());
    let question = it.next().ok_or_else(|| Error::Data("empty input: expected a question line".into()))?;
    Ok((question, it.collect()))
}

fn run_command(cmd: Command) -> Result<i32> {
    match cmd {
        Command::Train { config, seed, sequential } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            let summary = cmd_train(&cfg, execution(sequential), |r| {
                eprintln!(
                    "epoch {:>4}  loss {:.4}  dev MAP {:.4}  MRR {:.4}  top1 {:.4}  ({:.1}s)",
                    r.epoch, r.mean_loss, r.dev_map, r.dev_mrr, r.dev_top1, r.wall_time_s
                );
            })?;
            let best = &summary.outcome.log[summary.outcome.best_epoch];
            println!(
                "best epoch {} dev MAP {:.4}; checkpoint {}; log {}",
                summary.outcome.best_epoch,
                best.dev_map,
                summary.checkpoint.display(),
                summary.log.display()
            );
            Ok(EXIT_OK)
        }
        Command::Eval {
            checkpoint,
            config,
            data,
            dump_attention,
            attention_out,
            format,
            sequential,
        } => {
            let cfg = config.as_deref().map(RunConfig::load).transpose()?;
            let ck = load_checkpoint(&checkpoint)?;
            if let Some(cfg) = &cfg {
                if !cfg.matches_model(&ck.model.config) {
                    return Err(Error::Config(format!(
                        "model settings in the config do not match checkpoint {}",
                        checkpoint.display()
                    )));
                }
            }
            let test_path = data
                .or_else(|| cfg.as_ref().and_then(|c| c.test_path.clone()))
                .ok_or_else(|| Error::Config("no test split: pass --data or set data.test".into()))?;
            let test = QADataset::load_tsv(&test_path, Split::Test)?;
            let report = cmd_eval(&ck, &test, execution(sequential))?;
            match format {
                ReportFormat::Text => print!("{}", report.to_text()),
                ReportFormat::Kv => print!("{}", report.to_key_values()),
            }
            if let Some(n) = dump_attention {
                let mut rankable = test.clone();
                rankable.retain_rankable();
                let records = attention_records(&ck, &rankable, n)?;
                let out = attention_out
                    .or_else(|| cfg.as_ref().map(|c| c.attention_dump.clone()))
                    .unwrap_or_else(|| PathBuf::from("attention.jsonl"));
                let f = std::fs::File::create(&out).map_err(|e| Error::io(&out, e))?;
                write_attention_dump(std::io::BufWriter::new(f), &records).map_err(|e| Error::io(&out, e))?;
                eprintln!("wrote {} attention records to {}", records.len(), out.display());
            }
            Ok(EXIT_OK)
        }
        Command::Score { checkpoint, input } => {
            let ck = load_checkpoint(&checkpoint)?;
            let (question, candidates) = read_score_input(input.as_deref())?;
            let ranked = cmd_score(&ck, &question, &candidates)?;
            for (rank, (i, score)) in ranked.iter().enumerate() {
                println!("{}\t{score:.4}\t{}", rank + 1, candidates[*i]);
            }
            Ok(EXIT_OK)
        }
        Command::Gradcheck {
            config,
            samples,
            tolerance,
            seed,
            entries,
            corrupt_group,
        } => {
            let cfg = config.as_deref().map(RunConfig::load).transpose()?;
            let opts = GradcheckOptions {
                tolerance,
                instances: samples,
                seed,
                entries_per_group: entries,
                margin: cfg.as_ref().map_or(crate::scoring::DEFAULT_MARGIN, |c| c.train.margin),
                corrupt: corrupt_group.map(|g| (g, 1.5)),
                ..Default::default()
            };
            let report = cmd_gradcheck(cfg.as_ref(), &opts)?;
            print!("{}", report.to_text());
            if report.passed() {
                Ok(EXIT_OK)
            } else {
                eprintln!("error: gradient check failed for {}", report.failing_groups().join(", "));
                Ok(EXIT_GRADCHECK)
            }
        }
    }
}

/// Runs the parsed command line and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    match run_command(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
