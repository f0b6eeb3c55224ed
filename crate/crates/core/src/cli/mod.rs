//! Command-line surface: argument parsing, config layering, exit codes.
//!
//! Precedence is defaults, then the `--config` file, then environment
//! overrides, then flags.

pub mod checkpoint;
pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use checkpoint::Checkpoint;
pub use commands::Outputs;
pub use config::RunConfig;

use crate::error::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "pocketpo", version, about = "Pocket-conditioned diffusion with denoising policy optimization")]
pub struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed override.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (defaults to `out_dir` of the config).
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    /// Print a SHA-256 digest of all outputs.
    #[arg(long, global = true)]
    pub hash: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct WorldArg {
    /// World directory written by gen-world.
    #[arg(long)]
    pub world: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic world of pocket/ligand complexes.
    GenWorld {
        #[arg(long)]
        n_pockets: Option<usize>,
        #[arg(long)]
        pocket_radius: Option<f64>,
    },
    /// Pretrain the denoiser by noise matching.
    Pretrain {
        #[command(flatten)]
        world: WorldArg,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        layers: Option<usize>,
        #[arg(long)]
        hidden: Option<usize>,
    },
    /// Fine-tune a checkpoint on one pocket.
    Finetune {
        #[command(flatten)]
        world: WorldArg,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        pocket_index: Option<usize>,
        #[arg(long)]
        stride: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        updates: Option<usize>,
        #[arg(long)]
        clip: Option<f64>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        wd: Option<f64>,
    },
    /// Sample ligands for one pocket and score them.
    Sample {
        #[command(flatten)]
        world: WorldArg,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        pocket_index: Option<usize>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        stride: Option<usize>,
    },
    /// Select the best ligands of a fine-tuning pool.
    Topn {
        #[arg(long)]
        pool: PathBuf,
        #[arg(long, default_value_t = 10)]
        n: usize,
    },
    /// Write reverse-transition standard deviations per stride.
    VarianceProfile {
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        precision: Option<f64>,
        #[arg(long, value_delimiter = ',', default_values_t = [1usize, 5, 10, 20])]
        strides: Vec<usize>,
    },
    /// Score a directory of ligand files against a world pocket.
    Eval {
        #[command(flatten)]
        world: WorldArg,
        #[arg(long)]
        ligands: PathBuf,
        #[arg(long)]
        pocket_index: Option<usize>,
    },
}

/// Failure of a run, classified for the exit code.
#[derive(Debug)]
pub enum RunError {
    Config(Error),
    Runtime(Error),
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => EXIT_CONFIG,
            RunError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

impl std::fmt::Display for RunError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RunError::Config(e) => write!(f, "configuration error: {e}"),
            RunError::Runtime(e) => write!(f, "error: {e}"),
        }
    }
}

impl From<Error> for RunError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Parse { .. } => RunError::Config(e),
            other => RunError::Runtime(other),
        }
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

/// Resolves the configuration for `cli` without running anything.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig, RunError> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let env_seed = std::env::var_os(config::SEED_ENV).is_some();
    cfg.apply_env()?;
    set(&mut cfg.seed, cli.seed);
    set(&mut cfg.out_dir, cli.out_dir.clone());
    match &cli.command {
        Command::GenWorld { n_pockets, pocket_radius } => {
            set(&mut cfg.world.n_pockets, *n_pockets);
            set(&mut cfg.world.pocket_radius, *pocket_radius);
            // the world has its own seed; an explicit run seed replaces it
            if cli.seed.is_some() || env_seed {
                cfg.world.seed = cfg.seed;
            }
        }
        Command::Pretrain { steps, batch, lr, layers, hidden, .. } => {
            set(&mut cfg.pretrain.steps, *steps);
            set(&mut cfg.pretrain.batch_size, *batch);
            set(&mut cfg.pretrain.optimizer.lr, *lr);
            set(&mut cfg.denoiser.layers, *layers);
            set(&mut cfg.denoiser.hidden, *hidden);
        }
        Command::Finetune { pocket_index, stride, batch, updates, clip, lr, wd, .. } => {
            set(&mut cfg.pocket_index, *pocket_index);
            set(&mut cfg.ppo.stride, *stride);
            set(&mut cfg.ppo.batch_size, *batch);
            set(&mut cfg.ppo.n_updates, *updates);
            set(&mut cfg.ppo.clip_eps, *clip);
            set(&mut cfg.ppo.learning_rate, *lr);
            set(&mut cfg.ppo.weight_decay, *wd);
        }
        Command::Sample { pocket_index, n, stride, .. } => {
            set(&mut cfg.pocket_index, *pocket_index);
            set(&mut cfg.sample.n, *n);
            set(&mut cfg.sample.stride, *stride);
        }
        Command::VarianceProfile { steps, precision, .. } => {
            set(&mut cfg.schedule.steps, *steps);
            set(&mut cfg.schedule.precision, *precision);
        }
        Command::Eval { pocket_index, .. } => set(&mut cfg.pocket_index, *pocket_index),
        Command::Topn { .. } => {}
    }
    cfg.validate().map_err(RunError::Config)?;
    Ok(cfg)
}

/// Runs one subcommand in its output directory under a lock.
pub fn run(cli: &Cli) -> Result<Outputs, RunError> {
    let cfg = resolve_config(cli)?;
    let out = cfg.out_dir.clone();
    let _lock = commands::DirLock::acquire(&out)?;
    let outputs = match &cli.command {
        Command::GenWorld { .. } => commands::gen_world(&cfg, &out),
        Command::Pretrain { world, .. } => commands::pretrain_cmd(&cfg, &world.world, &out),
        Command::Finetune { world, checkpoint, .. } => commands::finetune_cmd(&cfg, &world.world, checkpoint, &out),
        Command::Sample { world, checkpoint, .. } => commands::sample_cmd(&cfg, &world.world, checkpoint, &out),
        Command::Topn { pool, n } => commands::topn_cmd(pool, *n, &out),
        Command::VarianceProfile { strides, .. } => commands::variance_profile_cmd(&cfg.schedule, strides, &out),
        Command::Eval { world, ligands, .. } => commands::eval_cmd(&cfg, &world.world, ligands, &out),
    }?;
    Ok(outputs)
}

/// Process entry point: configures logging and threads, runs, and returns
/// the exit code.
pub fn main_with_args(args: impl IntoIterator<Item = std::ffi::OsString>) -> i32 {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    let workers = match config::workers_from_env() {
        Ok(w) => w,
        Err(e) => {
            eprintln!("{}", RunError::Config(e));
            return EXIT_CONFIG;
        }
    };
    let result = match workers {
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(|| run(&cli)),
            Err(e) => Err(RunError::Runtime(Error::InvalidArgument(e.to_string()))),
        },
        None => run(&cli),
    };
    match result {
        Ok(outputs) => {
            if cli.hash {
                match outputs.digest() {
                    Ok(d) => println!("sha256 {d}"),
                    Err(e) => {
                        eprintln!("{}", RunError::Runtime(e));
                        return EXIT_RUNTIME;
                    }
                }
            }
            for f in &outputs.files {
                log::debug!("wrote {}", outputs.dir.join(f).display());
            }
            EXIT_OK
        }
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}
