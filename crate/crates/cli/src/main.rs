use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};

use framegate::ablate::{named_sweep, ordering_checks, run_ablation, to_csv, SweepEntry};
use framegate::autodiff::Fault;
use framegate::checks::{gradient_suite, shift_only_gradient, SHIFT_ONLY};
use framegate::eval::{evaluate, EvalOptions};
use framegate::synth::{BlindMode, DiskSplit, EpisodeSource, SynthSplit, World, TEST, TRAIN};
use framegate::train::{load_model, Trainer};
use framegate::{Error, Model, RunConfig, Tensor};

/// Language-gated sparse frame sampling for video QA on synthetic episodes.
///
/// Any run-config field can be set with `--<field> <value>` (e.g. `--frames 90
/// --sampler uniform`); these override `--config`.
#[derive(Parser, Debug)]
#[command(name = "framegate", version)]
struct Cli {
    /// Run config JSON; unset fields keep the synthetic-task defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Write JSON-lines (or CSV for `ablate`) here instead of stdout.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Finite-difference check of every block and loss.
    Gradcheck {
        /// Only this epsilon instead of the {1e-4, 1e-5, 1e-6} sweep.
        #[arg(long)]
        epsilon: Option<f64>,
        /// Corrupt matmul backward by this factor (the check must then fail).
        #[arg(long)]
        sabotage: Option<f64>,
    },
    /// Write train/test episode dumps.
    GenData {
        #[arg(long)]
        dir: PathBuf,
    },
    /// Train; metrics go out as JSON lines.
    Train {
        #[command(flatten)]
        data: DataArgs,
        /// Checkpoint directory, written at the end of training.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Continue from the checkpoint already in `--checkpoint`.
        #[arg(long)]
        resume: bool,
        /// Also write `<checkpoint>/step-NNNNNN` every this many steps.
        #[arg(long)]
        save_every: Option<usize>,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Blind modes to report (static, gaussian); default both.
        #[arg(long)]
        blind: Vec<String>,
        /// Skip matching and multiple choice.
        #[arg(long)]
        qa_only: bool,
        #[arg(long, default_value_t = 0)]
        limit: usize,
    },
    /// Selected indices and soft scores per test episode.
    SampleFrames {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        limit: usize,
    },
    /// Train and evaluate a sweep of variants; emits CSV.
    Ablate {
        /// modules | frames | select | losses | all, or a JSON file of entries.
        #[arg(long, default_value = "modules")]
        sweep: String,
        #[arg(long)]
        qa_only: bool,
    },
    /// Print a tensor dump as JSON.
    DumpTensor {
        path: PathBuf,
        /// Print every value instead of a summary.
        #[arg(long)]
        full: bool,
    },
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Dataset directory from `gen-data`; generated on the fly when absent.
    #[arg(long)]
    data: Option<PathBuf>,
}

/// Usage problems exit with 1, numeric failures with 2.
#[derive(Debug)]
struct Numeric(String);

impl std::fmt::Display for Numeric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Numeric {}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<Numeric>().is_some() {
        return 2;
    }
    match err.downcast_ref::<Error>() {
        Some(Error::NanLoss { .. } | Error::NonFiniteLogits | Error::NonFiniteTerm(_)) => 2,
        _ => 1,
    }
}

/// Splits `--<config field> value` pairs from the arguments clap should see.
fn split_overrides(args: Vec<String>) -> anyhow::Result<(Vec<String>, Vec<(String, String)>)> {
    let Value::Object(fields) = serde_json::to_value(RunConfig::default())? else {
        unreachable!()
    };
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        let key = a
            .strip_prefix("--")
            .map(|k| k.split_once('=').map_or((k, None), |(k, v)| (k, Some(v))));
        match key {
            Some((k, inline)) if fields.contains_key(&k.replace('-', "_")) => {
                let value = match inline {
                    Some(v) => v.to_string(),
                    None => it.next().with_context(|| format!("--{k} needs a value"))?,
                };
                overrides.push((k.to_string(), value));
            }
            _ => rest.push(a),
        }
    }
    Ok((rest, overrides))
}

fn load_config(path: Option<&Path>, overrides: &[(String, String)]) -> anyhow::Result<RunConfig> {
    let base = match path {
        Some(p) => RunConfig::from_json(
            &fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
        )?,
        None => RunConfig::synthetic(),
    };
    Ok(base.with_overrides(overrides.iter().map(|(k, v)| (k.as_str(), v.as_str())))?)
}

struct Sink(Box<dyn Write>);

impl Sink {
    fn open(path: Option<&Path>) -> anyhow::Result<Self> {
        Ok(Self(match path {
            Some(p) => Box::new(io::BufWriter::new(
                fs::File::create(p).with_context(|| format!("creating {}", p.display()))?,
            )),
            None => Box::new(io::stdout().lock()),
        }))
    }

    fn line<T: Serialize>(&mut self, x: &T) -> anyhow::Result<()> {
        writeln!(self.0, "{}", serde_json::to_string(x)?)?;
        Ok(())
    }
}

fn splits(run: &RunConfig) -> (SynthSplit, SynthSplit) {
    let m = &run.model;
    (
        SynthSplit::new(
            run.data_seed,
            TRAIN,
            m.dim,
            run.train_episodes,
            m.frames,
            m.patches(),
        ),
        SynthSplit::new(
            run.data_seed,
            TEST,
            m.dim,
            run.test_episodes,
            m.frames,
            m.patches(),
        ),
    )
}

/// The named split of `--data`, or the generated one.
fn open_split(
    data: &DataArgs,
    name: &str,
    run: &RunConfig,
) -> anyhow::Result<Box<dyn EpisodeSource>> {
    match &data.data {
        Some(dir) => {
            let split = DiskSplit::open(&dir.join(name))
                .with_context(|| format!("opening {}", dir.display()))?;
            let m = &split.meta;
            if (m.frames, m.patches, m.dim)
                != (run.model.frames, run.model.patches(), run.model.dim)
            {
                return Err(Error::ConfigMismatch(format!(
                    "dataset has {} frames × {} patches × {}, config wants {} × {} × {}",
                    m.frames,
                    m.patches,
                    m.dim,
                    run.model.frames,
                    run.model.patches(),
                    run.model.dim
                ))
                .into());
            }
            Ok(Box::new(split))
        }
        None => {
            let (train, test) = splits(run);
            Ok(Box::new(if name == "train" { train } else { test }))
        }
    }
}

fn data_world(data: &DataArgs, run: &RunConfig) -> anyhow::Result<World> {
    Ok(match &data.data {
        Some(dir) => DiskSplit::open(&dir.join("train"))?.world(),
        None => World::new(run.data_seed, run.model.dim),
    })
}

/// Checkpoint model; an explicit config must agree with it.
fn checkpoint_model(
    cli: &Cli,
    ckpt: &Path,
    overrides: &[(String, String)],
) -> anyhow::Result<(RunConfig, Model)> {
    let (mut run, model) =
        load_model(ckpt).with_context(|| format!("loading checkpoint {}", ckpt.display()))?;
    if cli.config.is_some() || !overrides.is_empty() {
        let asked = load_config(cli.config.as_deref(), overrides)?;
        if asked.model != run.model {
            return Err(Error::ConfigMismatch(
                "model section differs from the checkpoint's config".into(),
            )
            .into());
        }
        run = RunConfig {
            model: run.model,
            ..asked
        };
    }
    Ok((run, model))
}

fn main() -> ExitCode {
    let (args, overrides) = match split_overrides(std::env::args().collect()) {
        Ok(x) => x,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(1);
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(&cli, &overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: &Cli, overrides: &[(String, String)]) -> anyhow::Result<()> {
    let mut out = Sink::open(cli.out.as_deref())?;
    match &cli.cmd {
        Command::Gradcheck { epsilon, sabotage } => {
            let eps: Vec<f64> = epsilon.map_or(vec![1e-4, 1e-5, 1e-6], |e| vec![e]);
            let fault = sabotage.map(Fault::MatMulLhsScale);
            let mut failed = Vec::new();
            for &e in &eps {
                for c in gradient_suite(e, fault)? {
                    out.line(&json!({
                        "check": c.check,
                        "epsilon": e,
                        "max_rel_err": c.report.max_rel_err(),
                        "max_abs_err": c.report.max_abs_err(),
                        "pass": c.report.pass,
                    }))?;
                    // the acceptance epsilon decides the exit status
                    if !c.report.pass && (eps.len() == 1 || e == 1e-5) {
                        failed.push(format!("{}@{e:e}", c.check));
                    }
                }
            }
            let zero = shift_only_gradient()?;
            out.line(&json!({ "check": format!("{SHIFT_ONLY} gradient is zero"), "max_abs_grad": zero, "pass": zero < 1e-15 }))?;
            if zero >= 1e-15 {
                failed.push(SHIFT_ONLY.into());
            }
            if !failed.is_empty() {
                bail!(Numeric(format!(
                    "gradient check failed: {}",
                    failed.join(", ")
                )));
            }
        }
        Command::GenData { dir } => {
            let run = load_config(cli.config.as_deref(), overrides)?;
            let (train, test) = splits(&run);
            for (name, split) in [("train", &train), ("test", &test)] {
                let d = DiskSplit::write(&dir.join(name), split)?;
                out.line(&json!({ "split": name, "dir": d.dir, "episodes": d.len() }))?;
            }
        }
        Command::Train {
            data,
            checkpoint,
            resume,
            save_every,
        } => {
            let mut trainer = if *resume {
                let t = Trainer::load(checkpoint)?;
                if cli.config.is_some() || !overrides.is_empty() {
                    let asked = load_config(cli.config.as_deref(), overrides)?;
                    if asked != t.run {
                        return Err(Error::ConfigMismatch(
                            "resume config differs from the checkpoint's".into(),
                        )
                        .into());
                    }
                }
                t
            } else {
                let run = load_config(cli.config.as_deref(), overrides)?;
                Trainer::new(run.clone(), data_world(data, &run)?)?
            };
            let train = open_split(data, "train", &trainer.run)?;
            let total = trainer.run.total_steps();
            while !trainer.is_done() {
                let until = save_every.map_or(total, |n| (trainer.step / n + 1) * n);
                trainer.train(train.as_ref(), until, |m| {
                    out.line(m).map_err(|e| Error::Format(e.to_string()))
                })?;
                if save_every.is_some() {
                    trainer.save(&checkpoint.join(format!("step-{:06}", trainer.step)))?;
                }
            }
            trainer.save(checkpoint)?;
        }
        Command::Eval {
            data,
            checkpoint,
            blind,
            qa_only,
            limit,
        } => {
            let (run, model) = checkpoint_model(cli, checkpoint, overrides)?;
            let blind = if blind.is_empty() {
                vec![BlindMode::Static, BlindMode::Gaussian]
            } else {
                blind
                    .iter()
                    .map(|b| BlindMode::parse(b))
                    .collect::<Result<_, _>>()?
            };
            let test = open_split(data, "test", &run)?;
            let opts = EvalOptions {
                blind,
                matching: !qa_only,
                limit: *limit,
                ..EvalOptions::default()
            };
            out.line(&evaluate(&model, test.as_ref(), &opts)?)?;
        }
        Command::SampleFrames {
            data,
            checkpoint,
            limit,
        } => {
            let (run, model) = checkpoint_model(cli, checkpoint, overrides)?;
            let test = open_split(data, "test", &run)?;
            let n = if *limit == 0 {
                test.len()
            } else {
                (*limit).min(test.len())
            };
            for i in 0..n {
                let ep = test.episode(i)?;
                let p = model.predict(&ep.frames, &ep.question)?;
                out.line(&json!({
                    "episode_id": ep.id,
                    "event_frame": ep.event_frame,
                    "indices": p.indices,
                    "soft": p.soft,
                }))?;
            }
        }
        Command::Ablate { sweep, qa_only } => {
            let base = load_config(cli.config.as_deref(), overrides)?;
            let entries: Vec<SweepEntry> = if Path::new(sweep).is_file() {
                serde_json::from_str(&fs::read_to_string(sweep)?)?
            } else {
                named_sweep(sweep, &base)?
            };
            let opts = EvalOptions {
                matching: !qa_only,
                ..EvalOptions::default()
            };
            let rows = run_ablation(&base, &entries, &opts, |r| {
                eprintln!(
                    "{} {}: qa {:.3} hit {:.3}",
                    r.group, r.label, r.qa_accuracy, r.hit_rate
                );
                Ok(())
            })?;
            write!(out.0, "{}", to_csv(&rows)?)?;
            for c in ordering_checks(&rows) {
                eprintln!(
                    "{} {}: {}",
                    if c.holds { "holds" } else { "FAILS" },
                    c.claim,
                    c.detail
                );
            }
        }
        Command::DumpTensor { path, full } => {
            let t = Tensor::load(path)?;
            let d = t.data();
            let (min, max) = d
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| {
                    (a.min(x), b.max(x))
                });
            let mean = d.iter().sum::<f64>() / d.len().max(1) as f64;
            let mut v = json!({ "shape": t.shape(), "numel": d.len(), "min": min, "max": max, "mean": mean });
            if *full {
                v["data"] = json!(d);
            } else {
                v["head"] = json!(&d[..d.len().min(8)]);
            }
            out.line(&v)?;
        }
    }
    out.0.flush()?;
    Ok(())
}
