//! The `hif` command line.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::gradsuite;
use crate::harness::sweep::{sweep_hindsight, sweep_lambda, sweep_position, synergy, SweepReport, LAMBDA_VALUES};
use crate::harness::train::{thread_pool, train, worker_threads, LogRecord};
use crate::harness::{evaluate, ExecutionMode, TaskKind};
use crate::model::EmbeddingMode;
use crate::motion::{estimate_motion_field, stack_fields, Frame, SearchMethod, SearchParams};
use crate::tensor::gradcheck::GradCheckConfig;
use crate::tensor::io as tensor_io;

#[derive(Parser, Debug)]
#[command(name = "hif", version, about = "Motion-history policy toolkit: extract, train, evaluate, sweep")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Block-matching motion fields for a directory of PGM/PPM frames.
    ExtractMv(ExtractArgs),
    /// Train a policy and write a checkpoint.
    Train(TrainArgs),
    /// Closed-loop evaluation of a checkpoint.
    Eval(EvalArgs),
    /// Efficiency and ablation sweeps.
    Sweep(SweepArgs),
    /// Finite-difference gradient suites.
    Gradcheck(GradcheckArgs),
}

/// Flags shared by the training-related subcommands.
#[derive(Args, Debug, Default)]
pub struct Overrides {
    /// JSON run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Single worker thread; results are then bit-reproducible.
    #[arg(long)]
    pub deterministic: bool,
    /// Hindsight length; a comma-separated list for `sweep hindsight`.
    #[arg(long, value_delimiter = ',')]
    pub h: Vec<usize>,
    /// Motion-loss weight; a comma-separated list for `sweep lambda`.
    #[arg(long, value_delimiter = ',')]
    pub lambda: Vec<f64>,
    #[arg(long)]
    pub mode: Option<EmbeddingMode>,
    #[arg(long)]
    pub task: Option<TaskKind>,
    #[arg(long)]
    pub trials: Option<usize>,
    /// Training steps.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Output path (checkpoint for train, JSON report otherwise).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ExtractArgs {
    /// Directory of frames, read in file-name order.
    pub frames_dir: PathBuf,
    /// Output HIFT tensor; a JSON sidecar is written next to it.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = crate::motion::DEFAULT_SEARCH_RANGE)]
    pub search_range: i32,
    #[arg(long, value_enum, default_value_t = Method::Exhaustive)]
    pub method: Method,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Method {
    Exhaustive,
    Diamond,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Overrides,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Checkpoint to evaluate (defaults to the config's checkpoint path).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub execution: Option<Execution>,
    #[command(flatten)]
    pub common: Overrides,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Execution {
    Chunk,
    SingleStep,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[arg(value_enum)]
    pub kind: SweepKind,
    #[command(flatten)]
    pub common: Overrides,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SweepKind {
    /// Success, latency and token counts per hindsight length.
    Hindsight,
    /// Expert conditioning vs. injecting history into the backbone.
    Position,
    /// Motion-loss weight.
    Lambda,
    /// Motion loss with and without the action objective.
    Synergy,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// `all`, or one of tensor, hindsight, backbone, expert, model.
    #[arg(default_value = "all")]
    pub scope: String,
    #[arg(long, default_value_t = 1e-5)]
    pub tol: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::ExtractMv(a) => extract_mv(&a),
        Command::Train(a) => cmd_train(&a.common),
        Command::Eval(a) => cmd_eval(&a),
        Command::Sweep(a) => cmd_sweep(&a),
        Command::Gradcheck(a) => cmd_gradcheck(&a),
    }
}

fn single<T: Copy + std::fmt::Debug>(flag: &str, values: &[T]) -> Result<Option<T>> {
    match values {
        [] => Ok(None),
        [v] => Ok(Some(*v)),
        _ => Err(Error::Config(format!("--{flag} takes a single value here, got {values:?}"))),
    }
}

/// Loads the config file (if any) and applies the flag overrides that
/// make sense for every command.
fn resolve(o: &Overrides, lists: bool) -> Result<RunConfig> {
    let mut c = match &o.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = o.seed {
        c.train.seed = s;
        c.eval.seed = s;
    }
    if o.deterministic {
        c.deterministic = true;
    }
    if !lists {
        if let Some(h) = single("h", &o.h)? {
            c.train.model.h = h;
        }
        if let Some(l) = single("lambda", &o.lambda)? {
            c.train.lambda = l;
        }
    }
    if let Some(m) = o.mode {
        c.train.model.mode = m;
    }
    if let Some(t) = o.task {
        c.train.tasks = vec![t];
    }
    if let Some(n) = o.trials {
        c.eval.trials = n;
    }
    if let Some(n) = o.steps {
        c.train.steps = n;
    }
    c.validate()?;
    Ok(c)
}

fn threads(c: &RunConfig) -> usize {
    worker_threads(c.deterministic)
}

/// Writes `value` as pretty JSON to `path`, or stdout.
fn emit_json<T: Serialize>(value: &T, path: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match path {
        Some(p) => std::fs::write(p, text + "\n")?,
        None => {
            let mut out = io::stdout().lock();
            writeln!(out, "{text}")?;
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct Sidecar<'a> {
    frames: Vec<String>,
    dims: &'a [usize],
    search_range: i32,
    method: &'static str,
    cost: &'static str,
    tie_break: &'static str,
    sign: &'static str,
    normalization: String,
}

pub fn sidecar_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn extract_mv(a: &ExtractArgs) -> Result<()> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(&a.frames_dir)
        .map_err(|e| Error::Frame(format!("cannot read {}: {e}", a.frames_dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|x| x.to_str()).map(str::to_ascii_lowercase).as_deref(),
                Some("pgm" | "ppm" | "pnm")
            )
        })
        .collect();
    paths.sort();
    if paths.len() < 2 {
        return Err(Error::Frame(format!(
            "need at least two PGM/PPM frames in {}, found {}",
            a.frames_dir.display(),
            paths.len()
        )));
    }
    let frames = paths
        .iter()
        .map(|p| Frame::read_pnm(p).map_err(|e| Error::Frame(format!("{}: {e}", p.display()))))
        .collect::<Result<Vec<_>>>()?;
    if let Some(i) = frames.iter().position(|f| !f.same_geometry(&frames[0])) {
        return Err(Error::Frame(format!(
            "{} is {}x{}x{}, expected {}x{}x{}",
            paths[i].display(),
            frames[i].width(),
            frames[i].height(),
            frames[i].channels(),
            frames[0].width(),
            frames[0].height(),
            frames[0].channels()
        )));
    }
    let params = SearchParams {
        search_range: a.search_range,
        method: match a.method {
            Method::Exhaustive => SearchMethod::Exhaustive,
            Method::Diamond => SearchMethod::Diamond,
        },
    };
    let fields = frames
        .windows(2)
        .map(|w| estimate_motion_field(&w[0], &w[1], &params))
        .collect::<Result<Vec<_>>>()?;
    let (rows, cols) = frames[0].grid();
    let tensor = stack_fields::<f32>(&fields, rows, cols, a.search_range)?;
    tensor_io::save(&a.out, &tensor)?;
    let sidecar = Sidecar {
        frames: paths
            .iter()
            .map(|p| p.file_name().unwrap_or_default().to_string_lossy().into_owned())
            .collect(),
        dims: tensor.dims(),
        search_range: a.search_range,
        method: match a.method {
            Method::Exhaustive => "exhaustive",
            Method::Diamond => "diamond",
        },
        cost: "sum of absolute luma differences over 16x16 macroblocks",
        tie_break: "lowest cost, then smallest dx^2+dy^2, then smallest dy, then smallest dx",
        sign: "cur(x, y) = prev(x - dx, y - dy)",
        normalization: format!("(dx, dy) / {}", a.search_range.max(1)),
    };
    emit_json(&sidecar, Some(&sidecar_path(&a.out)))
}

fn cmd_train(o: &Overrides) -> Result<()> {
    let c = resolve(o, false)?;
    let out = o
        .out
        .clone()
        .or_else(|| c.paths.checkpoint.clone())
        .unwrap_or_else(|| PathBuf::from("hif.ckpt"));
    let mut log: Box<dyn Write> = match &c.paths.log {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout())),
    };
    writeln!(log, "{}", LogRecord::HEADER)?;
    let mut write_err = None;
    let outcome = train(&c.train, threads(&c), |r| {
        if let Err(e) = writeln!(log, "{r}") {
            write_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(e.into());
    }
    log.flush()?;
    checkpoint::save(&out, &outcome.model, c.train.steps as u64, c.train.lambda)?;
    eprintln!("wrote {}", out.display());
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let mut c = resolve(&a.common, false)?;
    if let Some(e) = a.execution {
        c.eval.execution = match e {
            Execution::Chunk => ExecutionMode::Chunk,
            Execution::SingleStep => ExecutionMode::SingleStep,
        };
    }
    let path = a
        .checkpoint
        .clone()
        .or_else(|| c.paths.checkpoint.clone())
        .ok_or_else(|| Error::Config("eval needs --checkpoint or paths.checkpoint".into()))?;
    let ckpt = checkpoint::load::<f32>(&path)?;
    let stored = &ckpt.model.config;
    if let Some(m) = a.common.mode {
        if m != stored.mode {
            return Err(Error::Config(format!("--mode {m} but the checkpoint was trained as {}", stored.mode)));
        }
    }
    if let Some(h) = single("h", &a.common.h)? {
        if h != stored.h {
            return Err(Error::Config(format!("--h {h} but the checkpoint was trained with h = {}", stored.h)));
        }
    }
    let pool = thread_pool(threads(&c))?;
    let report = pool.install(|| evaluate(&ckpt.model, &c.train.tasks, &c.eval, ckpt.lambda))?;
    let out = a.common.out.clone().or_else(|| c.paths.report.clone());
    emit_json(&report, out.as_deref())
}

fn cmd_sweep(a: &SweepArgs) -> Result<()> {
    let c = resolve(&a.common, true)?;
    let t = threads(&c);
    let pool = thread_pool(t)?;
    let train_cfg = &c.train;
    let report = pool.install(|| -> Result<SweepReport> {
        Ok(match a.kind {
            SweepKind::Hindsight => {
                let hs = if a.common.h.is_empty() { vec![1, 2, 4, 8, 16] } else { a.common.h.clone() };
                SweepReport::Hindsight(sweep_hindsight(train_cfg, &c.eval, &hs, t)?)
            }
            SweepKind::Position => SweepReport::Position(sweep_position(train_cfg, &c.eval, t)?),
            SweepKind::Lambda => {
                let ls = if a.common.lambda.is_empty() { LAMBDA_VALUES.to_vec() } else { a.common.lambda.clone() };
                SweepReport::Lambda(sweep_lambda(train_cfg, &c.eval, &ls, t)?)
            }
            SweepKind::Synergy => SweepReport::Synergy(synergy(train_cfg, t)?),
        })
    })?;
    let out = a.common.out.clone().or_else(|| c.paths.report.clone());
    emit_json(&report, out.as_deref())
}

fn cmd_gradcheck(a: &GradcheckArgs) -> Result<()> {
    let modules = gradsuite::parse_scope(&a.scope)?;
    let cfg = GradCheckConfig::default().with_tol(a.tol);
    let results = gradsuite::run(&modules, cfg, |r| {
        eprintln!(
            "{} {}/{}: max rel error {:.3e} over {} elements ({:.0} ms)",
            if r.passed { "PASS" } else { "FAIL" },
            r.module.name(),
            r.name,
            r.max_rel_error,
            r.elements,
            r.millis
        );
    })?;
    if let Some(p) = &a.out {
        emit_json(&results, Some(p))?;
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        return Err(Error::GradCheckFailed {
            failed,
            total: results.len(),
        });
    }
    Ok(())
}
