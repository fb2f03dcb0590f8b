//! The `wuneng` command line: config files, training runs, evaluation,
//! gradient checks, parameter accounting and mode ablations.
//!
//! Human-readable output goes to stderr and machine-readable records to
//! stdout. Exit codes: 0 success, 1 usage or config error, 2 numeric abort
//! (divergence or a failed gradient check).

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::fusion::{FusionConfig, MiddleMode};
use crate::gradcheck::{self, ModeReport};
use crate::harness::{evaluate, evaluate_with, train, EvalResult, Task, TrainConfig};
use crate::layer::Arch;
use crate::model::{count_params, match_ffn_width, Model, ModelConfig};

/// Every config key with a one-line description, in snapshot order.
pub const KEYS: &[(&str, &str)] = &[
    ("vocab_size", "token vocabulary size"),
    ("d_model", "residual width"),
    ("n_heads", "heads per layer (attention, state and middle alike)"),
    ("n_layers", "number of hybrid layers"),
    ("d_ffn", "feed-forward hidden width"),
    ("combine_mode", "concat_project | sum"),
    ("middle_mode", "off | concat | additive | gated"),
    ("arch", "wuneng | pure_attention"),
    ("task", "copy | assoc_recall | perm_compose"),
    ("steps", "Adam steps"),
    ("batch", "sequences per step"),
    ("seq_len", "tokens per sequence"),
    ("lr", "Adam learning rate"),
    (
        "pin_scalars",
        "hold alpha, beta, gamma_mid and lambda fixed (true | false)",
    ),
    ("seed", "seeds both initialization and the data stream"),
    ("eval_n", "held-out samples scored after training"),
    ("eval_seed", "seed of the held-out samples"),
    ("log_every", "progress line interval on stderr (0 = silent)"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval_n: usize,
    pub eval_seed: u64,
    pub log_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval_n: 256,
            eval_seed: 12345,
            log_every: 100,
        }
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value `{value}` for `{key}`")))
}

impl RunConfig {
    /// Parses `key = value` lines over the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got `{line}`", i + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "vocab_size" => self.model.vocab_size = parse_value(key, value)?,
            "d_model" => self.model.d_model = parse_value(key, value)?,
            "n_heads" => self.model.n_heads = parse_value(key, value)?,
            "n_layers" => self.model.n_layers = parse_value(key, value)?,
            "d_ffn" => self.model.d_ffn = parse_value(key, value)?,
            "combine_mode" => self.model.fusion.combine_mode = value.parse()?,
            "middle_mode" => self.model.fusion.middle_mode = value.parse()?,
            "arch" => self.train.arch = value.parse()?,
            "task" => self.train.task = value.parse()?,
            "steps" => self.train.steps = parse_value(key, value)?,
            "batch" => self.train.batch = parse_value(key, value)?,
            "seq_len" => self.train.seq_len = parse_value(key, value)?,
            "lr" => self.train.lr = parse_value(key, value)?,
            "pin_scalars" => self.train.pin_scalars = parse_value(key, value)?,
            "seed" => {
                let s: u64 = parse_value(key, value)?;
                self.model.seed = s;
                self.train.seed = s;
            }
            "eval_n" => self.eval_n = parse_value(key, value)?,
            "eval_seed" => self.eval_seed = parse_value(key, value)?,
            "log_every" => self.log_every = parse_value(key, value)?,
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Applies `key=value` overrides in order.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        let need = self.train.task.min_vocab();
        if self.model.vocab_size < need {
            return Err(Error::Config(format!(
                "task {} needs vocab_size >= {need}, got {}",
                self.train.task, self.model.vocab_size
            )));
        }
        Ok(())
    }

    /// The resolved config, one `key=value` line per entry of [`KEYS`].
    pub fn to_kv(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let values = [
            m.vocab_size.to_string(),
            m.d_model.to_string(),
            m.n_heads.to_string(),
            m.n_layers.to_string(),
            m.d_ffn.to_string(),
            m.fusion.combine_mode.to_string(),
            m.fusion.middle_mode.to_string(),
            t.arch.to_string(),
            t.task.to_string(),
            t.steps.to_string(),
            t.batch.to_string(),
            t.seq_len.to_string(),
            format!("{:?}", t.lr),
            t.pin_scalars.to_string(),
            t.seed.to_string(),
            self.eval_n.to_string(),
            self.eval_seed.to_string(),
            self.log_every.to_string(),
        ];
        KEYS.iter()
            .zip(values)
            .map(|((k, _), v)| format!("{k}={v}\n"))
            .collect()
    }
}

#[derive(Parser, Debug)]
#[command(name = "wuneng", version, about = "Hybrid attention/state-head model toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug)]
struct ConfigArgs {
    /// key = value config file; missing keys take their defaults
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override one key (repeatable), e.g. --set lr=1e-3
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        cfg.apply_overrides(&self.overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train and write metrics, timing, a checkpoint and the resolved config
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on fresh seeded samples
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        task: Task,
        #[arg(long, default_value_t = 256)]
        n: usize,
        #[arg(long, default_value_t = 32)]
        seq_len: usize,
        #[arg(long, default_value_t = 12345)]
        seed: u64,
        /// Require the checkpoint to match this config's model layout
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Analytic vs finite-difference gradients for every fusion mode
    Gradcheck {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Tokens per sequence in the checked batch
        #[arg(long, default_value_t = 5)]
        n: usize,
        /// Also write the JSON report here
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Parameter breakdown and the hybrid-additions ratio
    Params {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train matched-seed models per middle mode and compare accuracies
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Comma-separated: off, concat, additive, gated, baseline
        #[arg(long, default_value = "off,concat,additive,gated", value_delimiter = ',')]
        modes: Vec<String>,
        /// Number of seeds, counting up from the config seed
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        /// Widen d_ffn of smaller variants toward the largest parameter count
        #[arg(long)]
        match_params: bool,
    },
}

/// Exit code for an error: 2 for numeric aborts, 1 otherwise.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Diverged { .. } | Error::NumericOverflow { .. } | Error::NonFiniteGradient(_) => 2,
        Error::Layer { source, .. } => exit_code(source),
        _ => 1,
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(cmd: Command) -> Result<i32> {
    match cmd {
        Command::Train { cfg, out } => cmd_train(&cfg.resolve()?, &out).map(|_| 0),
        Command::Eval {
            checkpoint,
            task,
            n,
            seq_len,
            seed,
            config,
        } => {
            let expected = config.map(|p| RunConfig::load(&p)).transpose()?;
            let r = cmd_eval(&checkpoint, task, n, seq_len, seed, expected.as_ref().map(|c| &c.model))?;
            emit(&r)?;
            Ok(0)
        }
        Command::Gradcheck { cfg, n, report } => cmd_gradcheck(&cfg.resolve()?, n, report.as_deref()),
        Command::Params { cfg } => {
            let cfg = cfg.resolve()?;
            let b = count_params(&cfg.model);
            eprintln!(
                "base {}  additions {}  total {}  ratio {:.4}",
                b.base(),
                b.additions(),
                b.total(),
                b.ratio()
            );
            emit(&ParamsRecord {
                breakdown: b,
                base: b.base(),
                additions: b.additions(),
                total: b.total(),
                ratio: b.ratio(),
            })?;
            Ok(0)
        }
        Command::Ablate {
            cfg,
            modes,
            seeds,
            match_params,
        } => {
            let modes = modes.iter().map(|m| AblateMode::parse(m)).collect::<Result<Vec<_>>>()?;
            let rows = cmd_ablate(&cfg.resolve()?, &modes, seeds, match_params)?;
            eprint!("{}", ablation_table(&rows));
            emit(&rows)?;
            Ok(0)
        }
    }
}

fn emit<T: Serialize>(record: &T) -> Result<()> {
    let line = serde_json::to_string(record).map_err(|e| Error::Config(e.to_string()))?;
    println!("{line}");
    Ok(())
}

#[derive(Serialize)]
struct ParamsRecord {
    breakdown: crate::model::ParamBreakdown,
    base: usize,
    additions: usize,
    total: usize,
    ratio: f64,
}

#[derive(Serialize)]
struct MetricLine {
    step: usize,
    loss: f64,
    acc: f64,
}

#[derive(Serialize)]
struct TimingLine {
    step: usize,
    ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainSummary {
    pub steps: usize,
    pub final_loss: f64,
    pub final_acc: f64,
    pub eval: EvalResult,
    pub checkpoint: String,
}

/// Artifact names inside a training output directory.
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const TIMING_FILE: &str = "timing.jsonl";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const CONFIG_FILE: &str = "config.txt";

/// Trains per `cfg`, streaming `metrics.jsonl` (step, loss, acc) and
/// `timing.jsonl` (step, ms) into `out`, then writes the checkpoint and the
/// resolved config. Metrics are deterministic; timings are not.
pub fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<TrainSummary> {
    fs::create_dir_all(out)?;
    fs::write(out.join(CONFIG_FILE), cfg.to_kv())?;
    let mut metrics = BufWriter::new(File::create(out.join(METRICS_FILE))?);
    let mut timing = BufWriter::new(File::create(out.join(TIMING_FILE))?);
    let mut model = Model::init(cfg.model)?;
    let mut io_err = None;
    let every = cfg.log_every;
    let result = train(&mut model, &cfg.train, |m| {
        if every > 0 && m.step % every == 0 {
            eprintln!(
                "step {:6}  loss {:.4}  acc {:.3}  {:.0} ms",
                m.step, m.loss, m.acc, m.ms
            );
        }
        if io_err.is_some() {
            return;
        }
        let mut write = || -> Result<()> {
            let line = serde_json::to_string(&MetricLine {
                step: m.step,
                loss: m.loss,
                acc: m.acc,
            })
            .map_err(|e| Error::Config(e.to_string()))?;
            writeln!(metrics, "{line}")?;
            let line = serde_json::to_string(&TimingLine { step: m.step, ms: m.ms })
                .map_err(|e| Error::Config(e.to_string()))?;
            writeln!(timing, "{line}")?;
            Ok(())
        };
        if let Err(e) = write() {
            io_err = Some(e);
        }
    });
    metrics.flush()?;
    timing.flush()?;
    if let Some(e) = io_err {
        return Err(e);
    }
    let history = result?;
    let ckpt = out.join(CHECKPOINT_FILE);
    checkpoint::save(&ckpt, &model)?;
    let eval = evaluate_with(
        &model,
        cfg.train.arch,
        cfg.train.task,
        cfg.eval_n,
        cfg.train.seq_len,
        cfg.eval_seed,
    )?;
    eprintln!(
        "held-out {}: loss {:.4} acc {:.4} over {} samples",
        eval.task, eval.loss, eval.acc, eval.n
    );
    let last = history.last();
    let summary = TrainSummary {
        steps: history.len(),
        final_loss: last.map_or(f64::NAN, |m| m.loss),
        final_acc: last.map_or(f64::NAN, |m| m.acc),
        eval,
        checkpoint: ckpt.display().to_string(),
    };
    emit(&summary)?;
    Ok(summary)
}

pub fn cmd_eval(
    path: &Path,
    task: Task,
    n: usize,
    seq_len: usize,
    seed: u64,
    expected: Option<&ModelConfig>,
) -> Result<EvalResult> {
    let model = match expected {
        Some(cfg) => checkpoint::load_as(path, cfg)?,
        None => checkpoint::load(path)?,
    };
    let r = evaluate(&model, task, n, seq_len, seed)?;
    eprintln!("{}: loss {:.4} acc {:.4} over {} samples", r.task, r.loss, r.acc, r.n);
    Ok(r)
}

/// Runs the gradient suite on `cfg.model`'s shape; returns the exit code.
pub fn cmd_gradcheck(cfg: &RunConfig, n: usize, report: Option<&Path>) -> Result<i32> {
    let reports = gradcheck::suite_for(&cfg.model, n)?;
    for m in &reports {
        eprintln!("== combine {} / middle {}", m.combine_mode, m.middle_mode);
        eprint!("{}", m.report.table());
    }
    if let Some(path) = report {
        let json = serde_json::to_string_pretty(&reports).map_err(|e| Error::Config(e.to_string()))?;
        fs::write(path, json)?;
    }
    emit(&GradSummary::from(&reports[..]))?;
    Ok(if reports.iter().all(|m| m.report.pass) { 0 } else { 2 })
}

#[derive(Serialize)]
struct GradSummary {
    pass: bool,
    modes: Vec<GradModeLine>,
}

#[derive(Serialize)]
struct GradModeLine {
    combine_mode: String,
    middle_mode: String,
    pass: bool,
    max_rel: f64,
    max_abs: f64,
}

impl From<&[ModeReport]> for GradSummary {
    fn from(reports: &[ModeReport]) -> Self {
        let modes: Vec<GradModeLine> = reports
            .iter()
            .map(|m| GradModeLine {
                combine_mode: m.combine_mode.clone(),
                middle_mode: m.middle_mode.clone(),
                pass: m.report.pass,
                max_rel: m.report.tensors.iter().map(|t| t.max_rel).fold(0.0, f64::max),
                max_abs: m.report.tensors.iter().map(|t| t.max_abs).fold(0.0, f64::max),
            })
            .collect();
        Self {
            pass: modes.iter().all(|m| m.pass),
            modes,
        }
    }
}

/// One ablation variant: a middle mode of the hybrid, or the plain
/// attention baseline.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblateMode {
    Middle(MiddleMode),
    Baseline,
}

impl AblateMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "baseline" => Ok(AblateMode::Baseline),
            other => Ok(AblateMode::Middle(other.parse()?)),
        }
    }

    fn label(self) -> String {
        match self {
            AblateMode::Middle(m) => m.to_string(),
            AblateMode::Baseline => "baseline".into(),
        }
    }

    fn apply(self, cfg: &RunConfig) -> RunConfig {
        let mut c = cfg.clone();
        match self {
            AblateMode::Middle(m) => {
                c.model.fusion = FusionConfig {
                    middle_mode: m,
                    ..cfg.model.fusion
                };
                c.train.arch = Arch::WuNeng;
            }
            AblateMode::Baseline => {
                c.model.fusion.middle_mode = MiddleMode::Off;
                c.train.arch = Arch::PureAttention;
            }
        }
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub mode: String,
    pub seed: u64,
    pub d_ffn: usize,
    pub params: usize,
    pub final_loss: f64,
    pub final_acc: f64,
    pub eval_loss: f64,
    pub eval_acc: f64,
    /// Per-step `(loss, acc)` on the training batches.
    #[serde(skip)]
    pub history: Vec<(f64, f64)>,
}

/// Trains one model per (mode, seed) with identical data streams.
pub fn cmd_ablate(cfg: &RunConfig, modes: &[AblateMode], seeds: u64, match_params: bool) -> Result<Vec<AblationRow>> {
    let variants: Vec<RunConfig> = modes.iter().map(|m| m.apply(cfg)).collect();
    let largest = variants
        .iter()
        .map(|v| v.model)
        .max_by_key(|m| count_params(m).total())
        .ok_or_else(|| Error::Config("no ablation modes given".into()))?;
    let mut rows = Vec::new();
    for (mode, variant) in modes.iter().zip(variants) {
        for s in 0..seeds {
            let mut c = variant.clone();
            if match_params {
                c.model = match_ffn_width(c.model, &largest);
            }
            c.model.seed = cfg.model.seed + s;
            c.train.seed = cfg.train.seed + s;
            c.validate()?;
            let mut model = Model::init(c.model)?;
            let history = train(&mut model, &c.train, |m| {
                if c.log_every > 0 && m.step % c.log_every == 0 {
                    eprintln!(
                        "[{} seed {}] step {:6}  loss {:.4}  acc {:.3}",
                        mode.label(),
                        c.train.seed,
                        m.step,
                        m.loss,
                        m.acc
                    );
                }
            })?;
            let eval = evaluate_with(
                &model,
                c.train.arch,
                c.train.task,
                c.eval_n,
                c.train.seq_len,
                c.eval_seed,
            )?;
            let last = history.last();
            rows.push(AblationRow {
                mode: mode.label(),
                seed: c.train.seed,
                d_ffn: c.model.d_ffn,
                params: count_params(&c.model).total(),
                final_loss: last.map_or(f64::NAN, |m| m.loss),
                final_acc: last.map_or(f64::NAN, |m| m.acc),
                eval_loss: eval.loss,
                eval_acc: eval.acc,
                history: history.iter().map(|m| (m.loss, m.acc)).collect(),
            });
        }
    }
    Ok(rows)
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut out = format!(
        "{:<10} {:>6} {:>6} {:>8} {:>10} {:>9} {:>9}\n",
        "mode", "seed", "d_ffn", "params", "train_loss", "train_acc", "eval_acc"
    );
    for r in rows {
        out.push_str(&format!(
            "{:<10} {:>6} {:>6} {:>8} {:>10.4} {:>9.3} {:>9.3}\n",
            r.mode, r.seed, r.d_ffn, r.params, r.final_loss, r.final_acc, r.eval_acc
        ));
    }
    out
}
