//! `lftlab`: corpus generation, pre-training, training, re-ranking,
//! evaluation, parameter counts, gradient checks, LoRA merging and
//! significance tests.
//!
//! Exit status: 0 on success, 1 for user errors (bad arguments, configs,
//! inputs), 2 for violated internal invariants.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lft_core::eval::{self, group_run, Metric};
use lft_core::tensor::{GradCheckOptions, Scalar};
use lft_lab::checkpoint;
use lft_lab::config::{ExperimentConfig, KEYS};
use lft_lab::error::{LabError, Result};
use lft_lab::formats;
use lft_lab::pipeline::{self as pl, Loaded};

#[derive(Parser, Debug)]
#[command(name = "lftlab", version, about = "Lightweight fine-tuning lab for miniature neural rankers")]
struct Cli {
    /// key = value experiment configuration
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one setting, `key=value` (repeatable)
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file or directory (command-specific)
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_parser = ["f32", "f64"])]
    precision: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic corpus directory
    GenCorpus,
    /// Masked-token pre-training of the encoder on the corpus documents
    Pretrain,
    /// Train on one fold rotation; writes model.lftr, epochs.tsv and test.run
    Train,
    /// Re-rank the candidates of `eval.split` with a trained model
    Rerank,
    /// P@k and nDCG@k of a run
    Eval {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        qrels: PathBuf,
        #[arg(long, default_value_t = 10)]
        k: usize,
    },
    /// Trainable parameter count of the configured method
    CountParams,
    /// Finite-difference check of the configured model's gradients
    Gradcheck {
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Fold shared LoRA adapters into the base weights
    MergeLora,
    /// One-tailed pooled t-test that run A beats run B on P@k
    Stats {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long)]
        qrels: PathBuf,
        #[arg(long, default_value_t = 10)]
        k: usize,
    },
    /// List configuration keys
    Keys,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Lab(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
        Err(Failure::Check(msg)) => {
            eprintln!("{msg}");
            ExitCode::from(1)
        }
    }
}

enum Failure {
    Lab(LabError),
    /// A check that ran but did not pass.
    Check(String),
}

impl<E: Into<LabError>> From<E> for Failure {
    fn from(e: E) -> Self {
        Self::Lab(e.into())
    }
}

fn config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    for s in &cli.set {
        cfg.set(s)?;
    }
    if let Some(seed) = cli.seed {
        cfg.set(&format!("seed={seed}"))?;
    }
    if let Some(p) = &cli.precision {
        cfg.set(&format!("precision={p}"))?;
    }
    Ok(cfg)
}

fn out<'a>(cli: &'a Cli, what: &str) -> Result<&'a Path> {
    cli.out
        .as_deref()
        .ok_or_else(|| LabError::Config(format!("--out is required ({what})")))
}

fn run(cli: Cli) -> std::result::Result<(), Failure> {
    let cfg = config(&cli)?;
    let f64_mode = cfg.choice("precision", &["f32", "f64"], Some("f32"))? == "f64";
    match &cli.command {
        Command::GenCorpus => {
            let dir = out(&cli, "corpus directory")?;
            let ds = pl::Dataset::generate(&cfg)?;
            ds.save(dir)?;
            println!(
                "wrote {} documents, {} queries, {} triplets to {}",
                ds.documents.len(),
                ds.queries.len(),
                ds.triplets.len(),
                dir.display()
            );
        }
        Command::Pretrain => {
            let path = out(&cli, "encoder checkpoint")?;
            let data = Loaded::from_config(&cfg)?;
            if f64_mode {
                pretrain::<f64>(&data, &cfg, path)?
            } else {
                pretrain::<f32>(&data, &cfg, path)?
            }
        }
        Command::Train => {
            let dir = out(&cli, "output directory")?;
            let data = Loaded::from_config(&cfg)?;
            if f64_mode {
                train::<f64>(&data, &cfg, dir)?
            } else {
                train::<f32>(&data, &cfg, dir)?
            }
        }
        Command::Rerank => {
            let path = out(&cli, "run file")?;
            let data = Loaded::from_config(&cfg)?;
            if f64_mode {
                rerank::<f64>(&data, &cfg, path)?
            } else {
                rerank::<f32>(&data, &cfg, path)?
            }
        }
        Command::Eval { run, qrels, k } => {
            let records = formats::read_run(run)?;
            let qrels = formats::read_qrels(qrels)?;
            let report = eval::evaluate(&group_run(records), &qrels, &[Metric::Precision(*k), Metric::Ndcg(*k)])?;
            for (m, per) in &report.metrics {
                println!("{}\t{:.4}", m.label(), per.mean());
            }
            println!("queries\t{}", report.query_count);
            if !report.skipped().is_empty() {
                eprintln!("warning: {} judged queries have no run entries", report.skipped().len());
            }
        }
        Command::CountParams => {
            let (n, label) = pl::count_params(&cfg)?;
            println!("{n} ({label})");
        }
        Command::Gradcheck { tolerance } => {
            let opts = GradCheckOptions {
                tolerance: *tolerance,
                seed: pl::seed(&cfg)?,
                ..GradCheckOptions::default()
            };
            let r = pl::gradcheck(&cfg, opts, pl::GradCheckPoint::default())?;
            println!(
                "max relative error {:.3e} at {} (analytic {:.6e}, numeric {:.6e})",
                r.max_rel_err, r.worst_param, r.worst_values.0, r.worst_values.1
            );
            println!(
                "{} coordinates, {} below resolution (max abs error {:.2e}, noise bound {:.2e})",
                r.coords_checked, r.coords_unresolved, r.max_abs_err_unresolved, r.noise
            );
            if !r.passed {
                return Err(Failure::Check(format!("gradient check failed at tolerance {tolerance:e}")));
            }
        }
        Command::MergeLora => {
            let path = out(&cli, "merged checkpoint")?;
            cfg.require(&["paths.data", "paths.model"])?;
            let data = Loaded::from_config(&cfg)?;
            let mut model = pl::load_model::<f32>(&cfg, data.vocab.len(), Path::new(cfg.str_or("paths.model", "")))?;
            let n = model.merge_lora()?;
            checkpoint::save(&model.store, path)?;
            println!("merged {n} adapter pairs into {}", path.display());
        }
        Command::Stats { a, b, qrels, k } => {
            let qrels = formats::read_qrels(qrels)?;
            let pa = eval::precision_at_k(&group_run(formats::read_run(a)?), &qrels, *k)?;
            let pb = eval::precision_at_k(&group_run(formats::read_run(b)?), &qrels, *k)?;
            let va: Vec<f64> = pa.values.values().copied().collect();
            let vb: Vec<f64> = pb.values.values().copied().collect();
            let t = eval::t_test_one_tailed(&va, &vb)?;
            println!("P@{k}\tA {:.4}\tB {:.4}", pa.mean(), pb.mean());
            println!("t {:.4}\tdf {}\tp {:.4}", t.t, t.df, t.p);
            match eval::improvement_pct(pa.mean(), pb.mean()) {
                Ok(pct) => println!("improvement {pct:.2}%"),
                Err(_) => println!("improvement undefined (B scores zero)"),
            }
        }
        Command::Keys => {
            // A closed pipe (`lftlab keys | head`) is not an error.
            let mut stdout = std::io::stdout().lock();
            for (k, d) in KEYS {
                if writeln!(stdout, "{k:<28} {d}").is_err() {
                    break;
                }
            }
        }
    }
    Ok(())
}

fn pretrain<T: Scalar>(data: &Loaded, cfg: &ExperimentConfig, path: &Path) -> Result<()> {
    let (_, p) = pl::pretrain::<T>(data, cfg)?;
    checkpoint::save(&p.encoder, path)?;
    let first = p.losses.first().copied().unwrap_or(f64::NAN);
    let last = p.losses.last().copied().unwrap_or(f64::NAN);
    println!("masked-token loss {first:.4} -> {last:.4}; wrote {}", path.display());
    Ok(())
}

fn base_encoder<T: Scalar>(data: &Loaded, cfg: &ExperimentConfig) -> Result<lft_core::tensor::ParamStore<T>> {
    cfg.require(&["paths.encoder"])?;
    let enc = pl::encoder_config(cfg, Some(data.vocab.len()))?;
    checkpoint::load_encoder(Path::new(cfg.str_or("paths.encoder", "")), &enc)
}

fn train<T: Scalar>(data: &Loaded, cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    let base = base_encoder::<T>(data, cfg)?;
    let t = pl::train_model(data, cfg, &base)?;
    for e in &t.outcome.log {
        println!("epoch {:>3} [{}] loss {:.4} val {:.4}", e.epoch, e.stage, e.train_loss, e.val_metric);
    }
    checkpoint::save(&t.model.store, &dir.join("model.lftr"))?;
    formats::write_epoch_log(&dir.join("epochs.tsv"), &t.outcome.log)?;
    let run = pl::rerank(&t.model, data, &t.split.test, cfg.str_or("tag", "lftlab"))?;
    formats::write_run(&dir.join("test.run"), &run)?;
    let k = cfg.parsed_or("eval.k", 10)?;
    let p = eval::precision_at_k(&group_run(run), &data.dataset.qrels, k)?;
    match t.outcome.best_epoch {
        Some(b) => println!("best epoch {b}; test P@{k} {:.4}", p.mean()),
        None => println!("no epochs run; test P@{k} {:.4}", p.mean()),
    }
    Ok(())
}

fn rerank<T: Scalar>(data: &Loaded, cfg: &ExperimentConfig, path: &Path) -> Result<()> {
    cfg.require(&["paths.model"])?;
    let model = pl::load_model::<T>(cfg, data.vocab.len(), Path::new(cfg.str_or("paths.model", "")))?;
    let qids = pl::split_qids(data, cfg)?;
    let run = pl::rerank(&model, data, &qids, cfg.str_or("tag", "lftlab"))?;
    formats::write_run(path, &run)?;
    println!("wrote {} lines for {} queries to {}", run.len(), qids.len(), path.display());
    Ok(())
}
