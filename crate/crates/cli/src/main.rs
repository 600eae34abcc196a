mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use oxygan::tensor::NormKind;

use crate::config::RunConfig;
use crate::error::CliError;

/// Conditional GAN translation of RGB tissue images into StO₂ maps.
#[derive(Parser, Debug)]
#[command(name = "oxygan", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset and its manifest.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        n_cases: Option<usize>,
        /// Fraction of cases assigned to the train split.
        #[arg(long)]
        train_ratio: Option<f64>,
        #[arg(long)]
        height: Option<usize>,
        #[arg(long)]
        width: Option<usize>,
    },
    /// Expand a dataset into sample pairs and report the split sizes.
    Augment {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        /// Also write every pair as stacked OXT1 tensors, one file per case.
        #[arg(long)]
        write_pairs: bool,
    },
    /// Train a generator and discriminator.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Score a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        /// Checkpoint manifest (`ckpt_*.json`).
        #[arg(long)]
        checkpoint: PathBuf,
        /// Evaluate even if the checkpoint's network differs from the config.
        #[arg(long)]
        allow_mismatch: bool,
        #[arg(long)]
        infer_batch: Option<usize>,
        /// Keep dropout active while predicting.
        #[arg(long)]
        test_noise: bool,
        /// Number of test cases rendered as comparison PNGs.
        #[arg(long, default_value_t = 3)]
        qualitative: usize,
    },
    /// Train and evaluate one model per λ or batch size.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long, value_delimiter = ',')]
        lambdas: Option<Vec<f32>>,
        #[arg(long, value_delimiter = ',')]
        batch_sizes: Option<Vec<usize>>,
        /// Skip the λ = 0 control run.
        #[arg(long)]
        no_control: bool,
    },
    /// Predict the StO₂ map of one RGB image (OXT1 3×H×W in [0, 1], or PNG).
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
    },
    /// Check every differentiable op against finite differences.
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Args, Debug)]
struct Common {
    /// JSON run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory. Every artifact path is relative to it.
    #[arg(long)]
    out: PathBuf,
    /// Write into a non-empty output directory.
    #[arg(long)]
    force: bool,
    /// Single-threaded, with wall-clock fields omitted, so reruns produce
    /// identical bytes.
    #[arg(long)]
    deterministic: bool,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Dataset manifest; without one, data is synthesized from the config.
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum NormArg {
    Batch,
    Instance,
}

#[derive(Args, Debug, Default)]
struct TrainArgs {
    #[arg(long)]
    lambda: Option<f32>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_iterations: Option<usize>,
    #[arg(long)]
    log_every: Option<usize>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long)]
    base_filters: Option<usize>,
    #[arg(long, value_enum)]
    norm: Option<NormArg>,
    /// Disable dropout noise during training.
    #[arg(long)]
    no_noise: bool,
}

impl TrainArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        let t = &mut cfg.train;
        if let Some(v) = self.lambda {
            t.lambda_l1 = v;
        }
        if let Some(v) = self.batch_size {
            t.batch_size = v;
        }
        if let Some(v) = self.max_iterations {
            t.max_iterations = v;
        }
        if let Some(v) = self.log_every {
            t.log_every = v;
        }
        if let Some(v) = self.checkpoint_every {
            t.checkpoint_every = Some(v);
        }
        if let Some(v) = self.image_size {
            t.network.image_size = v;
            cfg.augment.net_size = v;
        }
        if let Some(v) = self.base_filters {
            t.network.base_filters = v;
        }
        if let Some(v) = self.norm {
            t.network.norm_kind = match v {
                NormArg::Batch => NormKind::Batch,
                NormArg::Instance => NormKind::Instance,
            };
        }
        if self.no_noise {
            t.noise_on = false;
        }
    }
}

fn load_config(common: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
        cfg.synth.source.seed = seed;
        cfg.eval.seed = seed;
    }
    Ok(cfg)
}

fn init_threads(deterministic: bool) -> Result<(), CliError> {
    let available = std::thread::available_parallelism().map_or(1, |n| n.get());
    let cap = match std::env::var("OXYGAN_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| CliError::invalid("OXYGAN_THREADS", format!("expected a positive integer, got {v:?}")))?,
        Err(_) => available,
    };
    let threads = if deterministic { 1 } else { cap.min(available) };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| CliError::Usage(format!("thread pool: {e}")))
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth {
            common,
            n_cases,
            train_ratio,
            height,
            width,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(v) = n_cases {
                cfg.synth.n_cases = v;
            }
            if let Some(v) = train_ratio {
                cfg.synth.train_ratio = v;
            }
            if let Some(v) = height {
                cfg.synth.source.height = v;
            }
            if let Some(v) = width {
                cfg.synth.source.width = v;
            }
            let ctx = commands::Context::new(&common, cfg)?;
            commands::synth(&ctx)
        }
        Command::Augment { common, data, write_pairs } => {
            let ctx = commands::Context::new(&common, load_config(&common)?)?;
            commands::augment(&ctx, data.manifest.as_deref(), write_pairs)
        }
        Command::Train { common, data, train } => {
            let mut cfg = load_config(&common)?;
            train.apply(&mut cfg);
            let ctx = commands::Context::new(&common, cfg)?;
            commands::train(&ctx, data.manifest.as_deref())
        }
        Command::Eval {
            common,
            data,
            checkpoint,
            allow_mismatch,
            infer_batch,
            test_noise,
            qualitative,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(v) = infer_batch {
                cfg.eval.infer_batch = v;
            }
            if test_noise {
                cfg.eval.test_noise = true;
            }
            let explicit = common.config.is_some();
            commands::eval(
                &common,
                cfg,
                explicit,
                &checkpoint,
                data.manifest.as_deref(),
                allow_mismatch,
                qualitative,
            )
        }
        Command::Sweep {
            common,
            data,
            train,
            lambdas,
            batch_sizes,
            no_control,
        } => {
            let mut cfg = load_config(&common)?;
            train.apply(&mut cfg);
            let lambdas_given = lambdas.as_ref().map(|_| ());
            if let Some(v) = lambdas {
                cfg.sweep.lambdas = v;
            }
            if let Some(v) = batch_sizes {
                cfg.sweep.batch_sizes = v;
                if lambdas_given.is_none() {
                    cfg.sweep.lambdas.clear();
                }
            }
            if no_control {
                cfg.sweep.control = false;
            }
            let ctx = commands::Context::new(&common, cfg)?;
            commands::sweep(&ctx, data.manifest.as_deref())
        }
        Command::Infer { common, checkpoint, input } => commands::infer(&common, load_config(&common)?, &checkpoint, &input),
        Command::Gradcheck { common } => {
            let ctx = commands::Context::new(&common, load_config(&common)?)?;
            commands::gradcheck(&ctx)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let deterministic = match &cli.command {
        Command::Synth { common, .. }
        | Command::Augment { common, .. }
        | Command::Train { common, .. }
        | Command::Eval { common, .. }
        | Command::Sweep { common, .. }
        | Command::Infer { common, .. }
        | Command::Gradcheck { common } => common.deterministic,
    };
    let result = init_threads(deterministic).and_then(|()| run(cli));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
