mod config;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tpe_core::attention::write_router_csv;
use tpe_core::model::{load_checkpoint, Precision};
use tpe_core::numerics::Scalar;
use tpe_core::tasks::{generate_split, read_jsonl, write_jsonl, TaskKind};
use tpe_core::train::{
    evaluate, gradcheck_mode, prepare, router_dump, train, write_predictions, GradcheckConfig, TrainConfig,
};
use tpe_core::{AttentionMode, TpeError, Vocab};

use config::{load_run_config, parse_override, RunConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] TpeError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "tpe2d", version, about = "Table positional encoding experiments on Counting-Stars and Locating-Values")]
struct Cli {
    /// JSON config file (flat keys)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file or directory
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Config override, `key=value` (repeatable)
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write train/val/test JSONL splits
    Gen {
        #[arg(long, value_parser = parse_task)]
        task: TaskKind,
        #[arg(long, default_value_t = 6)]
        rows: usize,
        #[arg(long, default_value_t = 6)]
        cols: usize,
        #[arg(long, default_value_t = 10_000)]
        n_train: usize,
        #[arg(long, default_value_t = 1000)]
        n_val: usize,
        #[arg(long, default_value_t = 1000)]
        n_test: usize,
    },
    /// Train from a run config; writes best.ckpt and metrics.csv under the output directory
    Train,
    /// Greedy-decode a dataset and score it
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Expected attention mode of the checkpoint
        #[arg(long, value_parser = parse_mode)]
        mode: Option<AttentionMode>,
    },
    /// Finite-difference gradient check of a tiny f64 model in every attention mode
    Gradcheck {
        /// Corrupts one analytic gradient element (negative control)
        #[arg(long)]
        inject_bug: bool,
        /// Restricts the check to these modes (comma-separated)
        #[arg(long, value_delimiter = ',', value_parser = parse_mode)]
        modes: Vec<AttentionMode>,
    },
    /// Router weights of one example as CSV
    RouterDump {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
    /// One training run per lambda; tabulates validation accuracy
    SweepLambda {
        /// Comma-separated lambda values
        #[arg(long, value_delimiter = ',', required = true)]
        lambdas: Vec<f64>,
    },
}

fn parse_task(s: &str) -> std::result::Result<TaskKind, String> {
    s.parse().map_err(|e: TpeError| e.to_string())
}

fn parse_mode(s: &str) -> std::result::Result<AttentionMode, String> {
    s.parse().map_err(|e: TpeError| e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run_config(cli: &Cli) -> Result<RunConfig> {
    let mut overrides = cli.set.iter().map(|s| parse_override(s)).collect::<Result<Vec<_>>>()?;
    if let Some(seed) = cli.seed {
        overrides.push(("seed".into(), seed.into()));
    }
    if let Some(out) = &cli.out {
        overrides.push(("out_dir".into(), out.display().to_string().into()));
    }
    load_run_config(cli.config.as_deref(), &overrides)
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Gen { task, rows, cols, n_train, n_val, n_test } => {
            let seed = cli.seed.unwrap_or(0);
            let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("data"));
            for (split, n) in [("train", *n_train), ("val", *n_val), ("test", *n_test)] {
                let examples = generate_split(*task, *rows, *cols, n, seed, split)?;
                write_jsonl(&dir.join(format!("{split}.jsonl")), &examples)?;
            }
            println!("wrote {n_train}/{n_val}/{n_test} {task} examples to {}", dir.display());
            Ok(())
        }
        Command::Train => {
            let cfg = run_config(&cli)?;
            let acc = match cfg.model.precision {
                Precision::F32 => train_run::<f32>(&cfg)?,
                Precision::F64 => train_run::<f64>(&cfg)?,
            };
            match acc {
                Some(a) => println!("best validation accuracy {:.2}", 100.0 * a),
                None => println!("trained without validation data"),
            }
            Ok(())
        }
        Command::Eval { checkpoint, data, mode } => {
            let precision = if cli.config.is_some() { run_config(&cli)?.model.precision } else { Precision::F32 };
            match precision {
                Precision::F32 => eval_run::<f32>(checkpoint, data, *mode, cli.out.as_deref()),
                Precision::F64 => eval_run::<f64>(checkpoint, data, *mode, cli.out.as_deref()),
            }
        }
        Command::Gradcheck { inject_bug, modes } => {
            let mut gc = match &cli.config {
                Some(p) => {
                    let text = fs::read_to_string(p)?;
                    serde_json::from_str::<GradcheckConfig>(&text).map_err(|e| CliError::Usage(e.to_string()))?
                }
                None => GradcheckConfig::default(),
            };
            if let Some(s) = cli.seed {
                gc.seed = s;
            }
            let mut ok = true;
            let modes = if modes.is_empty() { AttentionMode::ALL.to_vec() } else { modes.clone() };
            for mode in modes {
                for lambda in [0.0, 1.0] {
                    let rep = gradcheck_mode(&gc, mode, lambda, *inject_bug)?;
                    let (name, err) = rep.worst().map_or(("-", 0.0), |w| (w.name.as_str(), w.max_rel_error));
                    println!(
                        "{:<16} lambda={lambda:<3} {} worst {name} rel err {err:.3e}",
                        mode.as_str(),
                        if rep.passed() { "PASS" } else { "FAIL" }
                    );
                    ok &= rep.passed();
                }
            }
            if ok {
                Ok(())
            } else {
                Err(CliError::Core(TpeError::Config(format!("gradient check failed at tolerance {:e}", gc.tolerance))))
            }
        }
        Command::RouterDump { checkpoint, data, index } => dump_run(checkpoint, data, *index, cli.out.as_deref()),
        Command::SweepLambda { lambdas } => {
            let base = run_config(&cli)?;
            let mut rows = Vec::new();
            for &lambda in lambdas {
                let mut cfg = base.clone();
                cfg.model.lambda = lambda;
                cfg.out_dir = base.out_dir.join(format!("lambda_{lambda}"));
                let acc = match cfg.model.precision {
                    Precision::F32 => train_run::<f32>(&cfg)?,
                    Precision::F64 => train_run::<f64>(&cfg)?,
                };
                rows.push((lambda, acc.unwrap_or(0.0)));
                println!("lambda {lambda}: validation accuracy {:.2}", 100.0 * acc.unwrap_or(0.0));
            }
            fs::create_dir_all(&base.out_dir)?;
            let mut f = fs::File::create(base.out_dir.join("sweep.csv"))?;
            writeln!(f, "lambda,val_acc")?;
            for (l, a) in rows {
                writeln!(f, "{l},{a}")?;
            }
            Ok(())
        }
    }
}

fn require(p: &Option<PathBuf>, key: &str) -> Result<PathBuf> {
    let p = p.clone().ok_or_else(|| CliError::Usage(format!("config key {key} is required")))?;
    if !p.exists() {
        return Err(CliError::Usage(format!("{key} {} does not exist", p.display())));
    }
    Ok(p)
}

fn train_run<T: Scalar>(cfg: &RunConfig) -> Result<Option<f64>> {
    let train_set = read_jsonl(&require(&cfg.train_data, "train_data")?)?;
    let val_set = match &cfg.val_data {
        Some(_) => read_jsonl(&require(&cfg.val_data, "val_data")?)?,
        None => Vec::new(),
    };
    let vocab = Vocab::build();
    if cfg.model.vocab_size != vocab.len() {
        return Err(CliError::Usage(format!("vocab_size must be {}", vocab.len())));
    }
    let tcfg = TrainConfig {
        checkpoint: Some(cfg.train.checkpoint.clone().unwrap_or_else(|| cfg.out_dir.join("best.ckpt"))),
        metrics: Some(cfg.train.metrics.clone().unwrap_or_else(|| cfg.out_dir.join("metrics.csv"))),
        ..cfg.train.clone()
    };
    fs::create_dir_all(&cfg.out_dir)?;
    fs::write(cfg.out_dir.join("config.json"), serde_json::to_string_pretty(cfg).map_err(TpeError::from)?)?;
    let out = train::<T>(&cfg.model, &tcfg, &train_set, &val_set, &vocab)?;
    Ok(out.best_acc)
}

fn eval_run<T: Scalar>(checkpoint: &Path, data: &Path, mode: Option<AttentionMode>, out: Option<&Path>) -> Result<()> {
    let ck = load_checkpoint::<T>(checkpoint)?;
    if let Some(m) = mode {
        if m != ck.model.config.mode {
            return Err(TpeError::Config(format!("checkpoint was trained with {}, not {m}", ck.model.config.mode)).into());
        }
    }
    let vocab = Vocab::build();
    if ck.model.config.vocab_size != vocab.len() {
        return Err(TpeError::Config("checkpoint vocabulary does not match".into()).into());
    }
    let examples = read_jsonl(data)?;
    let report = evaluate(&ck.model, &ck.store, &examples, &vocab)?;
    let preds = out.map(Path::to_path_buf).unwrap_or_else(|| data.with_extension("predictions.jsonl"));
    write_predictions(&preds, &report.predictions)?;
    println!("{:.2}", 100.0 * report.accuracy);
    Ok(())
}

fn dump_run(checkpoint: &Path, data: &Path, index: usize, out: Option<&Path>) -> Result<()> {
    let ck = load_checkpoint::<f64>(checkpoint)?;
    let examples = read_jsonl(data)?;
    let ex = examples
        .get(index)
        .ok_or_else(|| CliError::Usage(format!("index {index} out of range for {} examples", examples.len())))?;
    let vocab = Vocab::build();
    let prepared = prepare(std::slice::from_ref(ex), &vocab, &ck.model.config)?;
    let rows = router_dump(&ck.model, &ck.store, &prepared[0], &vocab)?;
    match out {
        Some(p) => write_router_csv(fs::File::create(p)?, &rows)?,
        None => write_router_csv(std::io::stdout().lock(), &rows)?,
    }
    Ok(())
}
