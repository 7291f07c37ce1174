//! `onlineaug`: train, evaluate, check gradients, compare meta-gradients
//! against the exact oracle, and render augmentation panels.

mod run_dir;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use onlineaug_core::augmenters::AugKind;
use onlineaug_core::checkpoint::{self, Layout};
use onlineaug_core::config::RunConfig;
use onlineaug_core::data::TaskKind;
use onlineaug_core::gradcheck::{self, Component};
use onlineaug_core::trainer::{Evaluation, TrainData, Trainer};
use onlineaug_core::{oracle, viz, Error, Result};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "onlineaug", version, about = "Online learned data augmentation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Device {
    Cpu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Split {
    Train,
    Test,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a target network, optionally with augmenters.
    Train {
        /// TOML run configuration; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// none, comb, or a comma list of astn, dvae, pvae.
        #[arg(long)]
        augmenters: Option<String>,
        #[arg(long)]
        max_steps: Option<usize>,
        #[arg(long, value_enum, default_value = "cpu")]
        device: Device,
        /// Accepted for compatibility; every run is single-threaded and
        /// deterministic.
        #[arg(long)]
        deterministic: bool,
        /// Continue from a checkpoint (its embedded config is the default).
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint through the main normalization bank.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
        /// Expected run configuration; its fingerprint must match.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Finite-difference checks of every geometry and augmenter operation.
    Gradcheck {
        /// all, geometry, augmenters or corrupted (a deliberately wrong
        /// gradient that must be reported).
        #[arg(long, default_value = "all")]
        component: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = gradcheck::INSTANCES)]
        instances: usize,
    },
    /// Finite-difference versus exact meta-gradients on toy problems.
    OracleMeta {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// PNG rows of each sample and its augmented views.
    Viz {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 8)]
        n: usize,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Failure with its process exit code.
struct Failure {
    code: u8,
    msg: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) | Error::InvalidArgument(_) => 2,
            Error::Aborted(_) => 3,
            Error::NotFound(_) => 4,
            Error::Fingerprint { .. } | Error::FormatVersion { .. } | Error::CorruptCheckpoint(_) => 5,
            _ => 1,
        };
        Failure { code, msg: e.to_string() }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e).into()
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Error::Json(e).into()
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let out = match cli.cmd {
        Cmd::Train {
            config,
            seed,
            out_dir,
            augmenters,
            max_steps,
            device: Device::Cpu,
            deterministic: _,
            resume,
        } => train(config.as_deref(), seed, out_dir, augmenters.as_deref(), max_steps, resume.as_deref()),
        Cmd::Eval { checkpoint, split, config } => eval(&checkpoint, split, config.as_deref()),
        Cmd::Gradcheck {
            component,
            seed,
            instances,
        } => gradcheck_cmd(&component, seed, instances),
        Cmd::OracleMeta { seed } => oracle_meta(seed),
        Cmd::Viz {
            checkpoint,
            n,
            out_dir,
            split,
            seed,
        } => viz_cmd(&checkpoint, n, &out_dir, split, seed),
    };
    match out {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}

fn layout(run: &RunConfig) -> Result<Layout> {
    let s = run.splits()?;
    Ok(Layout {
        task: s.train.task,
        channels: s.train.channels,
        size: s.train.height,
        classes: s.train.classes,
    })
}

#[derive(Serialize)]
struct Summary<'a> {
    mode: &'a str,
    augmenters: Vec<AugKind>,
    status: &'a str,
    seed: u64,
    steps: usize,
    resumed_from: Option<usize>,
    config_fingerprint: String,
    metric_kind: &'a str,
    eval: Option<Evaluation>,
    checkpoint: Option<String>,
}

fn train(
    config: Option<&Path>,
    seed: Option<u64>,
    out_dir: Option<PathBuf>,
    augmenters: Option<&str>,
    max_steps: Option<usize>,
    resume: Option<&Path>,
) -> Result<(), Failure> {
    let mut run = match (config, resume) {
        (Some(p), _) => RunConfig::load(p)?,
        (None, Some(ck)) => checkpoint::load(ck, layout, None)?.run,
        (None, None) => RunConfig::default(),
    };
    if let Some(s) = seed {
        run.set_seed(s);
    }
    if let Some(d) = out_dir {
        run.out_dir = d;
    }
    if let Some(a) = augmenters {
        run.trainer.augmenters = AugKind::parse_set(a)?;
    }
    if let Some(m) = max_steps {
        run.trainer.max_steps = m;
    }
    run.validate()?;
    let splits = run.splits()?;
    let mut trainer = match resume {
        Some(ck) => {
            let stored = checkpoint::stored_config_fingerprint(ck)?;
            if stored != run.fingerprint() {
                return Err(Error::Fingerprint {
                    kind: "run config",
                    expected: stored,
                    found: run.fingerprint(),
                }
                .into());
            }
            checkpoint::load(ck, layout, Some(&run))?.trainer
        }
        None => Trainer::for_dataset(run.trainer.clone(), &splits.train)?,
    };
    let resumed_from = resume.map(|_| trainer.step);
    let mode = if run.trainer.augmenters.is_empty() { "baseline" } else { "augmented" };
    let dir = run_dir::create(&run.out_dir, &run_dir::name(&run))?;
    std::fs::write(dir.join("config-resolved.txt"), run.to_toml())?;
    let mut metrics = BufWriter::new(File::create(dir.join("metrics.jsonl"))?);
    let data = TrainData {
        train: &splits.train,
        val: None,
        eval: Some(&splits.test),
    };
    let every = run.checkpoint_every;
    let ck_dir = dir.join("checkpoints");
    let result = trainer.run(&data, |t, r| {
        serde_json::to_writer(&mut metrics, r)?;
        metrics.write_all(b"\n")?;
        if every > 0 && t.step % every == 0 && t.step < t.cfg.max_steps {
            checkpoint::save(&ck_dir.join(format!("step-{:06}.ckpt", t.step)), &run, t)?;
        }
        Ok(())
    });
    metrics.flush()?;
    let metric_kind = match splits.test.task {
        TaskKind::Classification => "top1",
        TaskKind::Segmentation => "mean_foreground_dice",
    };
    let mut summary = Summary {
        mode,
        augmenters: run.trainer.augmenters.clone(),
        status: "completed",
        seed: run.seed,
        steps: trainer.step,
        resumed_from,
        config_fingerprint: run.fingerprint(),
        metric_kind,
        eval: None,
        checkpoint: None,
    };
    let write_summary = |s: &Summary| -> Result<(), Failure> {
        let mut f = File::create(dir.join("summary.json"))?;
        serde_json::to_writer_pretty(&mut f, s)?;
        f.write_all(b"\n")?;
        Ok(())
    };
    if let Err(e) = result {
        summary.status = if matches!(e, Error::Aborted(_)) { "aborted" } else { "failed" };
        summary.steps = trainer.step;
        write_summary(&summary)?;
        return Err(e.into());
    }
    let ck = dir.join("checkpoint.ckpt");
    checkpoint::save(&ck, &run, &trainer)?;
    summary.eval = Some(trainer.evaluate_detailed(&splits.test)?);
    summary.checkpoint = Some("checkpoint.ckpt".into());
    write_summary(&summary)?;
    println!("{}", dir.display());
    Ok(())
}

fn eval(ck: &Path, split: Split, config: Option<&Path>) -> Result<(), Failure> {
    let expected = config.map(RunConfig::load).transpose()?;
    if let Some(run) = &expected {
        let stored = checkpoint::stored_config_fingerprint(ck)?;
        if stored != run.fingerprint() {
            return Err(Error::Fingerprint {
                kind: "run config",
                expected: run.fingerprint(),
                found: stored,
            }
            .into());
        }
    }
    let loaded = checkpoint::load(ck, layout, expected.as_ref())?;
    let splits = loaded.run.splits()?;
    let d = match split {
        Split::Train => &splits.train,
        Split::Test => &splits.test,
    };
    let e = loaded.trainer.evaluate_detailed(d)?;
    println!("{}", serde_json::to_string(&e)?);
    Ok(())
}

fn gradcheck_cmd(component: &str, seed: u64, instances: usize) -> Result<(), Failure> {
    let c: Component = component.parse()?;
    if instances == 0 {
        return Err(Error::Config("instances must be positive".into()).into());
    }
    let report = gradcheck::run(c, seed, instances)?;
    println!("{report}");
    if report.passed() {
        Ok(())
    } else {
        Err(Failure {
            code: 6,
            msg: "gradient check failed".into(),
        })
    }
}

fn oracle_meta(seed: u64) -> Result<(), Failure> {
    let cases = oracle::standard_cases(seed)?;
    println!("{:<42} {:>6} {:>10} {:>11}", "case", "params", "cosine", "rel L2");
    for c in &cases {
        println!("{:<42} {:>6} {:>10.6} {:>11.3e}", c.case, c.exact.len(), c.cosine, c.rel_l2);
    }
    Ok(())
}

fn viz_cmd(ck: &Path, n: usize, out_dir: &Path, split: Split, seed: u64) -> Result<(), Failure> {
    let loaded = checkpoint::load(ck, layout, None)?;
    let splits = loaded.run.splits()?;
    let d = match split {
        Split::Train => &splits.train,
        Split::Test => &splits.test,
    };
    let augs: Vec<_> = loaded.trainer.slots.iter().map(|s| s.aug.clone()).collect();
    let files = viz::write_panels(&augs, d, n, out_dir, seed)?;
    println!("columns: {}", viz::columns(&augs).join(" | "));
    for f in files {
        println!("{}", f.display());
    }
    Ok(())
}
