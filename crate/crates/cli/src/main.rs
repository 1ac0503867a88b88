use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use slicesr::checkpoint::{load_checkpoint, save_checkpoint};
use slicesr::config::RunConfig;
use slicesr::evaluation::{error_map, evaluate_with, interpolation_baseline, Interpolation, ModelMethod, Reconstructor};
use slicesr::gradcheck::gradient_check;
use slicesr::training::Trainer;
use slicesr::volume::{load_volume, normalize, save_volume, simulate_lr};
use slicesr::Volume;

#[derive(Parser, Debug)]
#[command(version, about = "Arbitrary-ratio slice interpolation for 3D volumes")]
struct Cli {
    /// Worker threads (0 = one per core). Overrides the config file.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Keep every k-th slice of an SRV1 volume.
    SimulateLr {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        k: usize,
    },
    /// Train a model on every .srv1 volume in a directory.
    Train(TrainArgs),
    /// Reconstruct a volume with `(D-1)·k + 1` slices.
    Infer {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        k: usize,
        /// Use trilinear interpolation instead of a model.
        #[arg(long)]
        baseline: bool,
    },
    /// Score the interpolation baseline, and optionally a model, on a
    /// directory of ground-truth volumes.
    Eval(EvalArgs),
    /// Finite-difference check of every parameter gradient.
    GradCheck {
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    out_checkpoint: Option<PathBuf>,
    /// Continue from a checkpoint; its model and training settings win over the config.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Line-delimited JSON step log.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    gt_dir: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_values_t = [2, 3, 4])]
    k_list: Vec<usize>,
    /// Aligned text table; records go next to it with a `.jsonl` extension.
    #[arg(long)]
    report_out: Option<PathBuf>,
    /// Write one SRV1 error map per (method, volume, k).
    #[arg(long)]
    error_maps: Option<PathBuf>,
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p).with_context(|| format!("reading config {}", p.display())),
        None => Ok(RunConfig::default()),
    }
}

fn config_path(cmd: &Command) -> Option<&Path> {
    match cmd {
        Command::Train(a) => a.config.as_deref(),
        Command::Eval(a) => a.config.as_deref(),
        Command::GradCheck { config } => config.as_deref(),
        _ => None,
    }
}

fn read_volume(path: &Path) -> Result<Volume> {
    load_volume(path).with_context(|| format!("reading volume {}", path.display()))
}

fn write_volume(vol: &Volume, path: &Path) -> Result<()> {
    save_volume(vol, path).with_context(|| format!("writing volume {}", path.display()))
}

/// Every `*.srv1` file in `dir`, sorted by file name.
fn load_dir(dir: &Path) -> Result<Vec<(String, Volume)>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    paths.retain(|p| p.extension().is_some_and(|e| e == "srv1"));
    paths.sort();
    if paths.is_empty() {
        bail!("no .srv1 volumes in {}", dir.display());
    }
    paths
        .iter()
        .map(|p| {
            let name = p.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            Ok((name, read_volume(p)?))
        })
        .collect()
}

fn cmd_simulate_lr(input: &Path, out: &Path, k: usize) -> Result<()> {
    let vol = read_volume(input)?;
    let lr = simulate_lr(&vol, k)?;
    write_volume(&lr, out)?;
    println!("{:?} -> {:?} (k={k})", vol.dims(), lr.dims());
    Ok(())
}

fn cmd_train(args: &TrainArgs, mut cfg: RunConfig) -> Result<()> {
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let data_dir = args
        .data_dir
        .clone()
        .or(cfg.paths.data_dir.clone())
        .context("no data directory: pass --data-dir or set paths.data_dir")?;
    let out = args
        .out_checkpoint
        .clone()
        .or(cfg.paths.checkpoint.clone())
        .context("no checkpoint path: pass --out-checkpoint or set paths.checkpoint")?;
    let log_path = args.log.clone().or(cfg.paths.log.clone());

    let dataset = load_dir(&data_dir)?
        .into_iter()
        .map(|(name, v)| normalize(&v).with_context(|| format!("normalizing {name}")))
        .collect::<Result<Vec<_>>>()?;

    let mut trainer = match &args.resume {
        Some(p) => load_checkpoint(p).with_context(|| format!("loading checkpoint {}", p.display()))?,
        None => Trainer::new(cfg.model, cfg.train.clone(), cfg.seed)?,
    };
    if let Some(epochs) = args.epochs {
        trainer.config.epochs = epochs;
    }
    let target = trainer.config.epochs;
    let remaining = target.saturating_sub(trainer.epoch);
    println!(
        "training {} parameters on {} volumes, epochs {}..{target}",
        trainer.model.parameter_count(),
        dataset.len(),
        trainer.epoch
    );

    let mut log = match &log_path {
        Some(p) => {
            let file = if args.resume.is_some() {
                fs::OpenOptions::new().create(true).append(true).open(p)
            } else {
                File::create(p)
            };
            Some(BufWriter::new(file.with_context(|| format!("opening log {}", p.display()))?))
        }
        None => None,
    };
    for _ in 0..remaining {
        let mut io_err = None;
        let summary = trainer.run_epochs(&dataset, 1, |rec| {
            if let Some(w) = log.as_mut() {
                let line = serde_json::to_string(rec).expect("step records serialize");
                if let Err(e) = writeln!(w, "{line}") {
                    io_err.get_or_insert(e);
                }
            }
        })?;
        if let Some(e) = io_err {
            return Err(e).context("writing training log");
        }
        if let Some(w) = log.as_mut() {
            w.flush()?;
        }
        let s = summary[0];
        println!("epoch {:>4}  loss {:.6}", s.epoch + 1, s.mean_loss);
        save_checkpoint(&trainer, &out).with_context(|| format!("writing checkpoint {}", out.display()))?;
    }
    if remaining == 0 {
        save_checkpoint(&trainer, &out).with_context(|| format!("writing checkpoint {}", out.display()))?;
    }
    println!("checkpoint {}", out.display());
    Ok(())
}

fn cmd_infer(checkpoint: Option<&Path>, input: &Path, out: &Path, k: usize, baseline: bool) -> Result<()> {
    let lr = read_volume(input)?;
    let sr = if baseline {
        interpolation_baseline(&lr, k)?
    } else {
        let path = checkpoint.context("--checkpoint is required unless --baseline is given")?;
        let trainer = load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
        trainer.model.super_resolve(&lr, k)?
    };
    write_volume(&sr, out)?;
    println!("{:?} -> {:?} (k={k})", lr.dims(), sr.dims());
    Ok(())
}

fn cmd_eval(args: &EvalArgs, cfg: &RunConfig) -> Result<()> {
    let gt_dir = args
        .gt_dir
        .clone()
        .or(cfg.paths.gt_dir.clone())
        .context("no ground-truth directory: pass --gt-dir or set paths.gt_dir")?;
    if args.k_list.is_empty() || args.k_list.contains(&0) {
        bail!("--k-list needs ratios >= 1");
    }
    let volumes = load_dir(&gt_dir)?;
    let trainer = match &args.checkpoint {
        Some(p) => Some(load_checkpoint(p).with_context(|| format!("loading checkpoint {}", p.display()))?),
        None => None,
    };
    let model = trainer.as_ref().map(|t| ModelMethod {
        name: "model".into(),
        model: &t.model,
    });
    let mut methods: Vec<&dyn Reconstructor> = vec![&Interpolation];
    if let Some(m) = &model {
        methods.push(m);
    }
    if let Some(dir) = &args.error_maps {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut map_err = None;
    let report = evaluate_with(&methods, &volumes, &args.k_list, |r| {
        if let Some(dir) = &args.error_maps {
            let path = dir.join(format!("{}_{}_x{}.srv1", r.volume, r.method, r.k));
            if let Err(e) = error_map(r.prediction, r.ground_truth).and_then(|m| save_volume(&m, &path)) {
                map_err.get_or_insert((path, e));
            }
        }
        Ok(())
    })?;
    if let Some((path, e)) = map_err {
        return Err(e).with_context(|| format!("writing error map {}", path.display()));
    }

    let table = report.to_table();
    print!("{table}");
    if let Some(out) = args.report_out.clone().or(cfg.paths.report.clone()) {
        fs::write(&out, &table).with_context(|| format!("writing report {}", out.display()))?;
        let records = out.with_extension("jsonl");
        fs::write(&records, report.to_records()).with_context(|| format!("writing records {}", records.display()))?;
        println!("report {} and {}", out.display(), records.display());
    }
    Ok(())
}

fn cmd_grad_check(cfg: &RunConfig) -> Result<bool> {
    let report = gradient_check(&cfg.model, &cfg.grad_check, cfg.seed)?;
    for t in &report.tensors {
        println!(
            "{:<32} {:>7}  rel {:.3e}  abs {:.3e}  retries {:>3}  {}",
            t.name,
            t.len,
            t.max_rel_error,
            t.max_abs_error,
            t.refined,
            if t.passed { "ok" } else { "FAIL" }
        );
    }
    let failed = report.failures().count();
    println!(
        "{} of {} tensors within relative error {:.0e}",
        report.tensors.len() - failed,
        report.tensors.len(),
        report.tolerance
    );
    Ok(failed == 0)
}

fn run(cli: Cli) -> Result<bool> {
    let cfg = load_config(config_path(&cli.command))?;
    let threads = cli.threads.unwrap_or(cfg.threads);
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .context("starting worker pool")?;
    match &cli.command {
        Command::SimulateLr { input, out, k } => cmd_simulate_lr(input, out, *k)?,
        Command::Train(args) => cmd_train(args, cfg)?,
        Command::Infer {
            checkpoint,
            input,
            out,
            k,
            baseline,
        } => cmd_infer(checkpoint.as_deref(), input, out, *k, *baseline)?,
        Command::Eval(args) => cmd_eval(args, &cfg)?,
        Command::GradCheck { .. } => return cmd_grad_check(&cfg),
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: gradient check failed");
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
