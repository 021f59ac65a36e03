//! Command-line front end; `run` returns the process exit code.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use dmfseg::checks::{self, CheckTarget};
use dmfseg::config::RunConfig;
use dmfseg::cost::efficiency_report;
use dmfseg::decoder::{DecoderConfig, Upsample};
use dmfseg::synth::{gen_dataset, CameraKind, Dataset, Split};
use dmfseg::train::{self, Ablation, Axis};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "dmfseg", about = "Scan/deformable fusion decoder: data, training, evaluation and cost tools")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Master seed; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a synthetic wide-FoV dataset.
    GenData {
        #[arg(long)]
        samples: Option<usize>,
        /// pinhole, fisheye or equirect
        #[arg(long)]
        camera: Option<CameraKind>,
    },
    /// Train on a generated dataset.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Score a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "val")]
        split: Split,
    },
    /// Analytic decoder parameter and FLOP count against published figures.
    Count {
        #[arg(long, value_delimiter = ',', default_values_t = [96, 192, 384, 768])]
        channels: Vec<usize>,
        /// Square input resolution.
        #[arg(long, default_value_t = 512)]
        res: usize,
        #[arg(long, default_value_t = 13)]
        classes: usize,
        #[arg(long)]
        no_deformable: bool,
        #[arg(long)]
        upsample: Option<Upsample>,
    },
    /// Finite-difference check of a layer's backward pass.
    Gradcheck {
        /// conv2d, linear, ss2d, dcn, pixel_shuffle, dmf, model or all
        #[arg(long, default_value = "dmf")]
        module: ModuleArg,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
    },
    /// Train variants along one axis over several seeds.
    Ablate {
        /// scan, deformable or upsample
        #[arg(long)]
        axis: Axis,
        #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2])]
        seeds: Vec<u64>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        iters: Option<usize>,
    },
}

#[derive(Debug, Clone, Copy)]
enum ModuleArg {
    All,
    One(CheckTarget),
}

impl std::str::FromStr for ModuleArg {
    type Err = dmfseg::Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "all" {
            Ok(ModuleArg::All)
        } else {
            s.parse().map(ModuleArg::One)
        }
    }
}

/// Parses `argv` (program name first) and runs the command.
pub fn run<I, S>(argv: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let argv: Vec<std::ffi::OsString> = argv.into_iter().map(Into::into).collect();
    if argv.len() <= 1 {
        let _ = writeln!(stderr, "{}", usage());
        return EXIT_USAGE;
    }
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(stdout, "{text}");
                    EXIT_OK
                }
                _ => {
                    let _ = write!(stderr, "{text}");
                    EXIT_USAGE
                }
            };
        }
    };
    match dispatch(cli, stdout) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e:#}");
            EXIT_RUNTIME
        }
    }
}

pub fn usage() -> String {
    use clap::CommandFactory;
    Cli::command().render_help().to_string()
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.out = o.clone();
    }
    Ok(cfg)
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn dispatch(cli: Cli, out: &mut dyn Write) -> Result<i32> {
    let mut cfg = load_config(&cli.common)?;
    match cli.command {
        Command::GenData { samples, camera } => {
            if let Some(n) = samples {
                cfg.samples = n;
            }
            if let Some(c) = camera {
                cfg.data.camera = c;
            }
            // gen-data writes the dataset itself to --out.
            let dir = cli.common.out.clone().unwrap_or_else(|| cfg.data_dir.clone());
            cfg.validate()?;
            let m = gen_dataset(cfg.samples, &dir, cfg.seed, &cfg.data)?;
            let train = m.samples.iter().filter(|s| s.split == Split::Train).count();
            writeln!(
                out,
                "wrote {} samples ({train} train, {} val) of {}x{} {} to {}",
                m.samples.len(),
                m.samples.len() - train,
                m.height,
                m.width,
                m.camera.name(),
                dir.display()
            )?;
        }
        Command::Train { data, iters, lr } => {
            if let Some(n) = iters {
                cfg.train.iters = n;
                cfg.train.warmup = cfg.train.warmup.min(n);
            }
            if let Some(v) = lr {
                cfg.train.lr = v;
            }
            cfg.validate()?;
            let ds = Dataset::open(data.as_ref().unwrap_or(&cfg.data_dir))?;
            let outcome = train::train(&cfg.model, &ds, &cfg.train_config(), Some(&cfg.out))?;
            write_file(&cfg.out.join("config.toml"), &cfg.to_toml()?)?;
            let first = outcome.log.first().map_or(f64::NAN, |r| r.loss);
            let last = outcome.log.last().map_or(f64::NAN, |r| r.loss);
            writeln!(out, "trained {} iterations: loss {first:.4} -> {last:.4}", outcome.log.len())?;
            writeln!(out, "checkpoint {}", cfg.out.join(train::CHECKPOINT).display())?;
        }
        Command::Eval { checkpoint, data, split } => {
            let ds = Dataset::open(data.as_ref().unwrap_or(&cfg.data_dir))?;
            let m = train::evaluate_checkpoint(&cfg.model, &checkpoint, &ds, split)?;
            write!(out, "{}", m.to_text(&ds.manifest.classes))?;
            if cli.common.out.is_some() {
                write_file(&cfg.out.join("metrics.txt"), &m.to_kv())?;
            }
        }
        Command::Count { channels, res, classes, no_deformable, upsample } => {
            let mut dc = DecoderConfig { channels, num_classes: classes, deformable: !no_deformable, ..Default::default() };
            if let Some(u) = upsample {
                dc.upsample = u;
            }
            dc.validate()?;
            let report = efficiency_report(&dc, res, res)?;
            write!(out, "{}", report.to_text())?;
            if cli.common.out.is_some() {
                write_file(&cfg.out.join("cost.txt"), &report.to_kv())?;
            }
        }
        Command::Gradcheck { module, eps } => {
            let targets = match module {
                ModuleArg::All => CheckTarget::ALL.to_vec(),
                ModuleArg::One(t) => vec![t],
            };
            let mut ok = true;
            for t in targets {
                let err = checks::check(t, eps, cfg.seed)?;
                let pass = err < checks::TOLERANCE;
                ok &= pass;
                writeln!(
                    out,
                    "{:<14} max relative error {err:.3e}  {}",
                    t.name(),
                    if pass { "PASS" } else { "FAIL" }
                )?;
            }
            if !ok {
                bail!("gradient check above {:.0e}", checks::TOLERANCE);
            }
        }
        Command::Ablate { axis, seeds, data, iters } => {
            if let Some(n) = iters {
                cfg.train.iters = n;
                cfg.train.warmup = cfg.train.warmup.min(n);
            }
            cfg.validate()?;
            let ds = Dataset::open(data.as_ref().unwrap_or(&cfg.data_dir))?;
            let mut runner = Ablation::new(&ds, cfg.train.clone())?;
            let table = runner.run(axis, &cfg.model, &seeds)?;
            write!(out, "{}", table.to_text())?;
            if cli.common.out.is_some() {
                write_file(&cfg.out.join(format!("ablation_{}.txt", axis_name(axis))), &table.to_text())?;
            }
        }
    }
    Ok(EXIT_OK)
}

fn axis_name(a: Axis) -> &'static str {
    match a {
        Axis::Scan => "scan",
        Axis::Deformable => "deformable",
        Axis::Upsample => "upsample",
    }
}
