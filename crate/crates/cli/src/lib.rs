//! `sdci` command line: generate datasets, train, evaluate and tabulate.
//!
//! Exit codes: 0 on success, 2 for usage or configuration errors, 1 for
//! failures while running.

use std::ffi::OsString;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Parser, Subcommand};
use sdci::config::ExperimentConfig;
use sdci::evaluation::{evaluate, render_table, EvalOptions, MetricReport};
use sdci::io::{read_checkpoint, write_checkpoint, Dataset};
use sdci::model::Model;
use sdci::sim::{generate_dataset, WorldSpec};
use sdci::training::{fit, EpochRecord, Observer, TrainSchedule, TrainState};

/// Name of the config snapshot written into every run directory.
pub const CONFIG_SNAPSHOT: &str = "config.json";
pub const METRICS_LOG: &str = "metrics.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";

#[derive(Debug, Parser)]
#[command(
    name = "sdci",
    version,
    about = "State-dependent causal discovery on simulated time-series"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate the train, valid and test splits of a config.
    Gen {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on a generated dataset.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score the validation-selected model of a checkpoint on one split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: PathBuf,
        /// Row label in reports; defaults to the checkpoint's directory name.
        #[arg(long)]
        label: Option<String>,
    },
    /// Print metric files as a table.
    Report {
        #[arg(long = "in", num_args = 1.., required = true)]
        inputs: Vec<PathBuf>,
    },
}

/// Failure classes that map to exit codes.
#[derive(Debug)]
enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<sdci::Error> for Failure {
    fn from(e: sdci::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

fn usage_text() -> String {
    use clap::CommandFactory;
    Cli::command().render_usage().to_string()
}

fn load_config(path: &Path) -> Result<ExperimentConfig, Failure> {
    match ExperimentConfig::load(path) {
        Ok(cfg) => Ok(cfg),
        Err(e @ sdci::Error::Io { .. }) => Err(Failure::Runtime(e.into())),
        Err(e) => Err(Failure::Usage(format!("{}: {e}", path.display()))),
    }
}

/// Runs the CLI on `args` (program name first) and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}\n\n{}", usage_text());
            2
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn dispatch(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Gen { config, out } => {
            let cfg = load_config(&config)?;
            generate(&cfg, &out)?;
        }
        Command::Train {
            config,
            data,
            out,
            resume,
        } => {
            let cfg = load_config(&config)?;
            train(&cfg, &data, &out, resume.as_deref())?;
        }
        Command::Eval {
            ckpt,
            data,
            split,
            out,
            label,
        } => {
            if !["train", "valid", "test"].contains(&split.as_str()) {
                return Err(Failure::Usage(format!("unknown split `{split}`")));
            }
            let label = label.unwrap_or_else(|| default_label(&ckpt));
            let report = eval(&ckpt, &data, &split, &label)?;
            write_report(&out, &report)?;
            println!("{}", render_table(std::slice::from_ref(&report)));
        }
        Command::Report { inputs } => {
            let mut reports = Vec::new();
            for path in &inputs {
                reports.extend(read_reports(path)?);
            }
            print!("{}", render_table(&reports));
        }
    }
    Ok(())
}

fn default_label(ckpt: &Path) -> String {
    ckpt.parent()
        .and_then(|p| p.file_name())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "model".into())
}

fn write_report(path: &Path, value: &MetricReport) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let text = serde_json::to_string_pretty(value)? + "\n";
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// A metrics file holds one report, an array of them, or one per line.
fn read_reports(path: &Path) -> anyhow::Result<Vec<MetricReport>> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    if let Ok(one) = serde_json::from_str::<MetricReport>(&text) {
        return Ok(vec![one]);
    }
    if let Ok(many) = serde_json::from_str::<Vec<MetricReport>>(&text) {
        return Ok(many);
    }
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l)
                .with_context(|| format!("{} is not a metrics file", path.display()))
        })
        .collect()
}

pub fn generate(cfg: &ExperimentConfig, out: &Path) -> anyhow::Result<()> {
    let ds = generate_dataset(&cfg.data, cfg.seed)?;
    ds.write(out)?;
    let m = &ds.manifest;
    println!(
        "wrote {} / {} / {} samples to {} ({} diverged)",
        ds.train.len(),
        ds.valid.len(),
        ds.test.len(),
        out.display(),
        m.diverged
    );
    Ok(())
}

struct RunLog {
    metrics: BufWriter<File>,
    dir: PathBuf,
    schedule: TrainSchedule,
    seed: u64,
}

impl Observer<f32> for RunLog {
    fn record(&mut self, rec: &EpochRecord) -> sdci::Result<()> {
        let path = self.dir.join(METRICS_LOG);
        let io = |e| sdci::Error::Io {
            path: path.clone(),
            source: e,
        };
        serde_json::to_writer(&mut self.metrics, rec)?;
        self.metrics.write_all(b"\n").map_err(io)?;
        self.metrics.flush().map_err(io)?;
        if rec.split == "valid" {
            if let Some(acc) = rec.edge_acc {
                eprintln!("epoch {:>4}  valid edge acc {acc:6.2}%", rec.epoch);
            }
        }
        Ok(())
    }

    fn epoch_end(&mut self, state: &TrainState<f32>) -> sdci::Result<()> {
        let every = self.schedule.checkpoint_every;
        if every > 0 && state.epoch.is_multiple_of(every) {
            let numbered = self.dir.join(format!("epoch_{:04}.ckpt", state.epoch));
            write_checkpoint(&numbered, state, &self.schedule, self.seed)?;
            std::fs::copy(&numbered, self.dir.join(LAST_CHECKPOINT)).map_err(|e| {
                sdci::Error::Io {
                    path: numbered,
                    source: e,
                }
            })?;
        }
        Ok(())
    }
}

fn train(
    cfg: &ExperimentConfig,
    data: &Path,
    out: &Path,
    resume: Option<&Path>,
) -> Result<(), Failure> {
    let ds = Dataset::read(data)?;
    if ds.manifest.config != cfg.data {
        return Err(Failure::Usage(format!(
            "{} was generated from a different data config than this experiment",
            data.display()
        )));
    }
    let mut state = match resume {
        Some(path) => {
            let ck = read_checkpoint::<f32>(path)?;
            if ck.state.model.config != cfg.model_config()? {
                return Err(Failure::Usage(format!(
                    "{} holds a different model architecture",
                    path.display()
                )));
            }
            if ck.schedule != cfg.train || ck.seed != cfg.seed {
                return Err(Failure::Usage(format!(
                    "{} was trained with a different schedule or seed",
                    path.display()
                )));
            }
            ck.state
        }
        None => {
            let model = Model::<f32>::new(cfg.model_config()?, cfg.seed)?;
            TrainState::new(model, &cfg.train, cfg.seed)
        }
    };
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    std::fs::write(out.join(CONFIG_SNAPSHOT), cfg.to_json()).context("writing config snapshot")?;
    let log_path = out.join(METRICS_LOG);
    let log = OpenOptions::new()
        .create(true)
        .append(resume.is_some())
        .write(true)
        .truncate(resume.is_none())
        .open(&log_path)
        .with_context(|| format!("opening {}", log_path.display()))?;
    let mut observer = RunLog {
        metrics: BufWriter::new(log),
        dir: out.to_path_buf(),
        schedule: cfg.train.clone(),
        seed: cfg.seed,
    };
    fit(
        &mut state,
        &cfg.train,
        &ds.train,
        Some(&ds.valid),
        &mut observer,
    )?;
    write_checkpoint(&out.join(FINAL_CHECKPOINT), &state, &cfg.train, cfg.seed)?;
    if let Some(b) = &state.best {
        eprintln!(
            "selected epoch {} (valid edge acc {:.2}%)",
            b.epoch, b.edge_accuracy
        );
    }
    Ok(())
}

pub fn eval(ckpt: &Path, data: &Path, split: &str, label: &str) -> anyhow::Result<MetricReport> {
    let ck = read_checkpoint::<f32>(ckpt)?;
    let ds = Dataset::read(data)?;
    let model = ck.state.selected_model()?;
    let world = match &ds.manifest.config.world {
        WorldSpec::Linear(w) => Some(w.clone()),
        WorldSpec::Springs(_) => None,
    };
    let opts = EvalOptions {
        label: label.to_string(),
        split: split.to_string(),
        teacher_forcing: ck.schedule.teacher_forcing,
        batch_size: ck.schedule.batch_size.max(64),
        world,
    };
    Ok(evaluate(&model, ds.split(split)?, &opts)?)
}
