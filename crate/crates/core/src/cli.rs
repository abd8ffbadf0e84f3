//! `textheads` command line.
//!
//! Exit codes: 0 success, 1 usage, 2 data or format error, 3 numeric
//! failure (including a failed gradient check).

use std::fs;
use std::io::Write;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::{ConfigFile, TrainConfig};
use crate::error::Error;
use crate::heads::HeadKind;
use crate::selfcheck::{self, CheckOutcome};
use crate::synth::gen_synth;
use crate::text::{load_dataset, split_dataset, write_dataset, SplitSpec};
use crate::train::{self, bench, evaluate_dataset};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "textheads", version, about = "Binary text classification with pluggable heads")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Seeded 64/16/20 split into train.tsv, val.tsv and test.tsv.
    Split {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Train one model and write a checkpoint.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        val: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
        /// Leave wall time out of the report so reruns are byte-identical.
        #[arg(long)]
        no_time: bool,
    },
    /// Accuracy and mean loss of a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print `<label>\t<probability>` for one sentence.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        text: String,
    },
    /// Train every architecture at every batch size and tabulate.
    Bench {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Whole corpus, split 64/16/20 with the run seed.
        #[arg(long, conflicts_with_all = ["train", "val"])]
        data: Option<PathBuf>,
        #[arg(long, requires = "val")]
        train: Option<PathBuf>,
        #[arg(long, requires = "train")]
        val: Option<PathBuf>,
        /// Comma-separated heads; defaults to all five.
        #[arg(long, value_delimiter = ',')]
        heads: Vec<String>,
        #[arg(long, value_delimiter = ',', default_values_t = vec![64, 16])]
        batches: Vec<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference verification of the autograd.
    Gradcheck {
        scope: Scope,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Add an operation with a deliberately wrong backward rule.
        #[arg(long)]
        canary: bool,
    },
    /// Write a synthetic labeled corpus.
    GenSynth {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Scope {
    Ops,
    Model,
}

#[derive(Args, Debug)]
struct ConfigArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Any config key, e.g. `--set hidden=32`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    head: Option<String>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    max_len: Option<usize>,
}

impl ConfigArgs {
    /// defaults < config file < `--set` < dedicated flags
    fn resolve(&self) -> Result<TrainConfig, Error> {
        let mut cf = match &self.config {
            Some(p) => ConfigFile::load(p)?,
            None => ConfigFile::default(),
        };
        let mut flags = ConfigFile::default();
        for kv in &self.overrides {
            let (k, v) =
                kv.split_once('=').ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
            flags.set(k.trim(), v.trim())?;
        }
        let named: [(&str, Option<String>); 6] = [
            ("head", self.head.clone()),
            ("batch_size", self.batch_size.map(|v| v.to_string())),
            ("epochs", self.epochs.map(|v| v.to_string())),
            ("seed", self.seed.map(|v| v.to_string())),
            ("learning_rate", self.learning_rate.map(|v| format!("{v:?}"))),
            ("max_len", self.max_len.map(|v| v.to_string())),
        ];
        for (k, v) in named {
            if let Some(v) = v {
                flags.set(k, &v)?;
            }
        }
        cf.merge(&flags);
        cf.apply(&TrainConfig::default())
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Numeric(_) => EXIT_NUMERIC,
        _ => EXIT_DATA,
    }
}

fn emit(out: Option<&Path>, text: &str, stdout: &mut dyn Write) -> Result<(), Error> {
    match out {
        Some(p) => fs::write(p, text)?,
        None => stdout.write_all(text.as_bytes())?,
    }
    Ok(())
}

fn one_line(msg: &str) -> String {
    msg.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Runs the CLI on `args` (including the program name) and returns the
/// process exit code.
pub fn run<I, S>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = write!(stdout, "{e}");
            return EXIT_OK;
        }
        Err(e) => {
            let rendered = e.to_string();
            let first = rendered.lines().next().unwrap_or("usage error");
            let msg = first.strip_prefix("error: ").unwrap_or(first);
            let _ = writeln!(stderr, "error: {}", one_line(msg));
            return EXIT_USAGE;
        }
    };
    match execute(cli.command, stdout, stderr) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(stderr, "error: {}", one_line(&e.to_string()));
            exit_code(&e)
        }
    }
}

fn report_checks(outcomes: &[CheckOutcome], stdout: &mut dyn Write) -> Result<bool, Error> {
    let mut ok = true;
    for o in outcomes {
        let status = if o.passed() { "ok" } else { "FAIL" };
        ok &= o.passed();
        let (a, n) = o.report.worst_values;
        let worst = o
            .report
            .worst
            .map(|(p, c)| format!("param {p} coord {c} analytic={a:.6e} numeric={n:.6e}"))
            .unwrap_or_default();
        writeln!(
            stdout,
            "{status}\t{}\tmax_rel_err={:.3e}\tcoords={}\t{worst}",
            o.name, o.report.max_rel_error, o.report.coordinates
        )?;
    }
    Ok(ok)
}

fn execute(cmd: Command, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<i32, Error> {
    match cmd {
        Command::Split { data, seed, out_dir } => {
            let ds = load_dataset(&data)?;
            let (tr, va, te) = split_dataset(&ds, &SplitSpec::new(seed))?;
            fs::create_dir_all(&out_dir)?;
            write_dataset(out_dir.join("train.tsv"), &tr)?;
            write_dataset(out_dir.join("val.tsv"), &va)?;
            write_dataset(out_dir.join("test.tsv"), &te)?;
            writeln!(stdout, "train\t{}\nval\t{}\ntest\t{}", tr.len(), va.len(), te.len())?;
        }
        Command::Train { cfg, train, val, out, report, no_time } => {
            let config = cfg.resolve()?;
            let tr = load_dataset(&train)?;
            let va = load_dataset(&val)?;
            let (model, run) = train::train_with(&tr, &va, &config, |r| {
                let _ = writeln!(
                    stderr,
                    "epoch {}\ttrain_loss={:.4}\ttrain_acc={:.4}\tval_acc={:.4}",
                    r.epoch, r.train.loss, r.train.accuracy, r.val.accuracy
                );
                ControlFlow::Continue(())
            })?;
            save_checkpoint(&model, &out)?;
            let text = run.render(!no_time);
            match report {
                Some(p) => fs::write(p, text)?,
                None => stdout.write_all(text.as_bytes())?,
            }
        }
        Command::Eval { model, data, out } => {
            let m = load_checkpoint(&model)?;
            let metrics = evaluate_dataset(&m, &load_dataset(&data)?)?;
            let text = format!(
                "accuracy\t{:.6}\nloss\t{:.6}\ncorrect\t{}\ntotal\t{}\n",
                metrics.accuracy, metrics.loss, metrics.correct, metrics.total
            );
            emit(out.as_deref(), &text, stdout)?;
        }
        Command::Predict { model, text } => {
            let m = load_checkpoint(&model)?;
            let (label, prob) = m.predict(&text)?;
            writeln!(stdout, "{label}\t{prob:.6}")?;
        }
        Command::Bench { cfg, data, train, val, heads, batches, out } => {
            let config = cfg.resolve()?;
            let (tr, va) = match (data, train, val) {
                (Some(d), _, _) => {
                    let (tr, va, _) = split_dataset(&load_dataset(d)?, &SplitSpec::new(config.seed))?;
                    (tr, va)
                }
                (None, Some(t), Some(v)) => (load_dataset(t)?, load_dataset(v)?),
                _ => return Err(Error::Config("bench needs --data or --train and --val".into())),
            };
            let kinds = if heads.is_empty() {
                HeadKind::ALL.to_vec()
            } else {
                heads.iter().map(|h| h.parse()).collect::<Result<Vec<HeadKind>, Error>>()?
            };
            let table = bench(&kinds, &batches, &tr, &va, &config, |r| {
                let _ = writeln!(
                    stderr,
                    "{}\tbatch {}\t{}\t{}",
                    r.head.table_name(),
                    r.batch_size,
                    train::format_hms(r.wall_time),
                    train::format_percent(r.val_accuracy)
                );
            })?;
            emit(out.as_deref(), &table.render(), stdout)?;
        }
        Command::Gradcheck { scope, seed, canary } => {
            let mut outcomes = match scope {
                Scope::Ops => selfcheck::ops_suite(seed)?,
                Scope::Model => selfcheck::model_suite(seed)?,
            };
            if canary {
                outcomes.push(selfcheck::canary(seed)?);
            }
            if !report_checks(&outcomes, stdout)? {
                let failed: Vec<&str> = outcomes.iter().filter(|o| !o.passed()).map(|o| o.name.as_str()).collect();
                return Err(Error::Numeric(format!(
                    "gradient check failed for {} (tolerance {:e})",
                    failed.join(", "),
                    selfcheck::TOLERANCE
                )));
            }
        }
        Command::GenSynth { n, seed, out } => {
            let ds = gen_synth(n, seed, &out)?;
            let [neg, pos] = ds.label_counts();
            writeln!(stdout, "wrote {} examples ({pos} label 1, {neg} label 0)", ds.len())?;
        }
    }
    Ok(EXIT_OK)
}
