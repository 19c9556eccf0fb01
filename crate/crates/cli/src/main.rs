//! `bait`: generate data, train on source, adapt to target, evaluate and
//! export, each step recorded in a manifest inside its output directory.

mod error;
mod manifest;
mod plan;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bait::eval::GridBounds;
use bait::experiment::MoonsSetup;
use bait::{AdaptMode, Head, TauSchedule, TrainConfig};
use clap::{Args, Parser, Subcommand, ValueEnum};

use error::{exit, CliError, CliResult};
use manifest::RunManifest;
use plan::Plan;

#[derive(Parser, Debug)]
#[command(name = "bait", version = manifest::VERSION, about = "Source-free domain adaptation with anchor and bait classifiers")]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write source and rotated target moons as CSV.
    GenMoons {
        #[command(flatten)]
        moons: MoonsArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Supervised training on labelled source data.
    TrainSource {
        /// CSV of features with the label in the last column.
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
        /// Overrides `epochs_source`.
        #[arg(long)]
        epochs: Option<usize>,
        /// Overrides `lr_source`.
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Adapt a source checkpoint to unlabelled target data.
    Adapt {
        #[arg(long)]
        ckpt: PathBuf,
        /// Target CSV. An extra trailing column is read as evaluation labels,
        /// used only for reporting.
        #[arg(long)]
        target: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        adapt: AdaptArgs,
        /// Overrides `epochs_adapt`.
        #[arg(long)]
        epochs: Option<usize>,
        /// Overrides `lr_adapt`.
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Confusion matrix of one head on labelled data.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = HeadArg::Anchor)]
        head: HeadArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predictions of both heads over a grid covering the input plane.
    ExportBoundary {
        #[arg(long)]
        ckpt: PathBuf,
        /// Points whose padded bounding box the grid covers.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Explicit grid extent instead of `--data`.
        #[arg(long, num_args = 4, value_names = ["X_MIN", "X_MAX", "Y_MIN", "Y_MAX"], allow_negative_numbers = true)]
        bounds: Option<Vec<f64>>,
        #[arg(long, default_value_t = 100)]
        resolution: usize,
        /// Fraction of the data extent added on every side.
        #[arg(long, default_value_t = 0.2)]
        pad: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Convert metrics logs into a training-curve CSV.
    ExportCurves {
        #[arg(long, required = true, num_args = 1..)]
        metrics: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Full moons experiment in one directory: data, source model,
    /// adaptation, evaluation and exports.
    Run {
        #[command(flatten)]
        moons: MoonsArgs,
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        adapt: AdaptArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// The full experiment over several seeds and modes.
    Sweep {
        #[command(flatten)]
        moons: MoonsArgs,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        seeds: Vec<u64>,
        #[arg(long, value_enum, value_delimiter = ',', default_value = "bait,bait_no_split,bait_no_cb,single_cb")]
        modes: Vec<ModeArg>,
        #[arg(long, value_enum)]
        tau_schedule: Option<TauArg>,
        /// Seeds run in parallel.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Repeat a command from its manifest into a new directory.
    Rerun {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Debug)]
struct MoonsArgs {
    #[arg(long, default_value_t = 300)]
    n_per_class: usize,
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    #[arg(long, default_value_t = 30.0, allow_negative_numbers = true)]
    rotation_deg: f64,
    /// Source data seed; the target uses the next one. `run` and `sweep`
    /// also use it as the training seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl MoonsArgs {
    fn setup(&self, default_seed: u64) -> MoonsSetup {
        MoonsSetup {
            n_per_class: self.n_per_class,
            noise_std: self.noise,
            rotation_deg: self.rotation_deg,
            seed: self.seed.unwrap_or(default_seed),
        }
    }
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// TOML file of training settings; unknown keys are rejected.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Args, Debug)]
struct AdaptArgs {
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long, value_enum)]
    tau_schedule: Option<TauArg>,
    #[arg(long)]
    cb_weight: Option<f64>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    #[value(name = "bait")]
    Bait,
    #[value(name = "bait_no_split")]
    BaitNoSplit,
    #[value(name = "bait_no_cb")]
    BaitNoCb,
    #[value(name = "single_cb")]
    SingleCb,
}

impl From<ModeArg> for AdaptMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Bait => AdaptMode::Bait,
            ModeArg::BaitNoSplit => AdaptMode::BaitNoSplit,
            ModeArg::BaitNoCb => AdaptMode::BaitNoCb,
            ModeArg::SingleCb => AdaptMode::SingleClassifierCb,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum TauArg {
    Constant,
    Decay,
}

impl From<TauArg> for TauSchedule {
    fn from(t: TauArg) -> Self {
        match t {
            TauArg::Constant => TauSchedule::Constant,
            TauArg::Decay => TauSchedule::LinearDecayToZero,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum HeadArg {
    Anchor,
    Bait,
}

impl From<HeadArg> for Head {
    fn from(h: HeadArg) -> Self {
        match h {
            HeadArg::Anchor => Head::Anchor,
            HeadArg::Bait => Head::Bait,
        }
    }
}

fn load_config(args: &ConfigArgs, seed: Option<u64>) -> CliResult<TrainConfig> {
    let mut cfg = match &args.config {
        Some(path) => TrainConfig::load(path).map_err(|e| match e {
            bait::Error::Config(msg) => CliError::Usage(format!("{}: {msg}", path.display())),
            e => e.into(),
        })?,
        None => TrainConfig::default(),
    };
    if let Some(b) = args.batch_size {
        cfg.batch_size = b;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn apply_adapt(cfg: &mut TrainConfig, a: &AdaptArgs) {
    if let Some(m) = a.mode {
        cfg.mode = m.into();
    }
    if let Some(t) = a.tau_schedule {
        cfg.tau_schedule = t.into();
    }
    if let Some(w) = a.cb_weight {
        cfg.cb_weight = w;
    }
}

fn validated(cfg: TrainConfig) -> CliResult<TrainConfig> {
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(cfg)
}

/// Absolute path of an existing input file.
fn input(path: &Path) -> CliResult<PathBuf> {
    std::fs::canonicalize(path).map_err(error::at(path))
}

fn plan_for(command: Command) -> CliResult<(Plan, PathBuf)> {
    let plan = match command {
        Command::GenMoons { moons, out } => (Plan::GenMoons { setup: moons.setup(0) }, out),
        Command::TrainSource {
            data,
            config,
            epochs,
            lr,
            seed,
            out,
        } => {
            let mut cfg = load_config(&config, seed)?;
            if let Some(e) = epochs {
                cfg.epochs_source = e;
            }
            if let Some(l) = lr {
                cfg.lr_source = l;
            }
            let plan = Plan::TrainSource {
                data: input(&data)?,
                config: validated(cfg)?,
            };
            (plan, out)
        }
        Command::Adapt {
            ckpt,
            target,
            config,
            adapt,
            epochs,
            lr,
            seed,
            out,
        } => {
            let mut cfg = load_config(&config, seed)?;
            apply_adapt(&mut cfg, &adapt);
            if let Some(e) = epochs {
                cfg.epochs_adapt = e;
            }
            if let Some(l) = lr {
                cfg.lr_adapt = l;
            }
            let plan = Plan::Adapt {
                ckpt: input(&ckpt)?,
                target: input(&target)?,
                config: validated(cfg)?,
            };
            (plan, out)
        }
        Command::Eval { ckpt, data, head, out } => {
            let plan = Plan::Eval {
                ckpt: input(&ckpt)?,
                data: input(&data)?,
                head: head.into(),
            };
            (plan, out)
        }
        Command::ExportBoundary {
            ckpt,
            data,
            bounds,
            resolution,
            pad,
            out,
        } => {
            let bounds = bounds.map(|b| GridBounds {
                x_min: b[0],
                x_max: b[1],
                y_min: b[2],
                y_max: b[3],
            });
            let plan = Plan::ExportBoundary {
                ckpt: input(&ckpt)?,
                data: data.as_deref().map(input).transpose()?,
                bounds,
                resolution,
                pad,
            };
            (plan, out)
        }
        Command::ExportCurves { metrics, out } => {
            let metrics = metrics.iter().map(|m| input(m)).collect::<CliResult<_>>()?;
            (Plan::ExportCurves { metrics }, out)
        }
        Command::Run {
            moons,
            config,
            adapt,
            out,
        } => {
            let mut cfg = load_config(&config, moons.seed)?;
            apply_adapt(&mut cfg, &adapt);
            let plan = Plan::Run {
                setup: moons.setup(cfg.seed),
                config: validated(cfg)?,
            };
            (plan, out)
        }
        Command::Sweep {
            moons,
            config,
            seeds,
            modes,
            tau_schedule,
            jobs,
            out,
        } => {
            let mut cfg = load_config(&config, None)?;
            if let Some(t) = tau_schedule {
                cfg.tau_schedule = t.into();
            }
            let mut resolved: Vec<AdaptMode> = Vec::new();
            for m in modes {
                let m = AdaptMode::from(m);
                if !resolved.contains(&m) {
                    resolved.push(m);
                }
            }
            if seeds.is_empty() {
                return Err(CliError::Usage("sweep needs at least one seed".into()));
            }
            let plan = Plan::Sweep {
                setup: moons.setup(0),
                config: validated(cfg)?,
                seeds,
                modes: resolved,
                jobs: jobs.max(1),
            };
            (plan, out)
        }
        Command::Rerun { manifest, out } => {
            let m = RunManifest::read(&manifest)?;
            if m.version != manifest::VERSION {
                log::warn!("manifest was written by version {}, this is {}", m.version, manifest::VERSION);
            }
            m.verify_inputs()?;
            (m.plan, out)
        }
    };
    Ok(plan)
}

fn run(cli: Cli, argv: Vec<String>) -> CliResult<()> {
    let (plan, out) = plan_for(cli.command)?;
    std::fs::create_dir_all(&out).map_err(error::at(&out))?;
    let manifest = RunManifest::new(plan, argv)?;
    manifest.write(&out)?;
    manifest.plan.execute(&out)
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { exit::USAGE } else { exit::OK } as u8);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    match run(cli, argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
