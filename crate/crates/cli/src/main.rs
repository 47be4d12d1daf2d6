//! `lensless`: simulate datasets, reconstruct measurements, train and evaluate unrolled networks.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use lensless_core::io::RunConfig;
use lensless_core::Variant;

/// Exit status for a malformed or inconsistent configuration.
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_RUNTIME: u8 = 3;
pub const EXIT_VERIFICATION: u8 = 4;

/// A configuration problem; maps to exit status 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "config error: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

/// A failed verification such as a gradient check; maps to exit status 4.
#[derive(Debug)]
pub struct VerificationFailed(pub String);

impl std::fmt::Display for VerificationFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "verification failed: {}", self.0)
    }
}

impl std::error::Error for VerificationFailed {}

#[derive(Parser, Debug)]
#[command(name = "lensless", version, about = "Lensless camera reconstruction with classic and unrolled ADMM")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    #[command(flatten)]
    overrides: Overrides,

    /// Worker threads for parallel loops.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
}

/// Flags that override keys of the JSON config.
#[derive(Args, Debug, Default)]
struct Overrides {
    /// JSON run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    #[arg(long, global = true)]
    psf: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    count: Option<usize>,
    #[arg(long, global = true)]
    split: Option<f64>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    lr: Option<f64>,
    #[arg(long, global = true)]
    layers: Option<usize>,
    #[arg(long, global = true, value_parser = parse_variant)]
    variant: Option<Variant>,
    /// Sensor size as ROWSxCOLS.
    #[arg(long, global = true, value_parser = parse_dims)]
    sensor: Option<lensless_core::Dims>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic dataset: measurements, ground truths and a manifest.
    Simulate,
    /// Reconstruct one measurement file.
    Reconstruct {
        #[arg(long, value_enum)]
        method: Method,
        /// LTG1 measurement of shape 3×R×C.
        #[arg(long)]
        input: PathBuf,
    },
    /// Train an unrolled network and write its best checkpoint and history.
    Train,
    /// Compare ADMM baselines and the configured network on the test split.
    Eval,
    /// Check analytic gradients against finite differences on a built-in 16×16 instance.
    Gradcheck,
    /// Median wall time of the unrolled network against full ADMM.
    Benchmark,
    /// Test error as a function of training-set size.
    Sweep {
        /// Training-set sizes, overriding `train_sizes`.
        #[arg(long, value_delimiter = ',')]
        sizes: Option<Vec<usize>>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Method {
    Admm,
    Admm5,
    Leadmm,
    LeadmmStar,
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    Variant::parse(s).map_err(|e| e.to_string())
}

fn parse_dims(s: &str) -> Result<lensless_core::Dims, String> {
    let (r, c) = s.split_once('x').ok_or_else(|| format!("expected ROWSxCOLS, got {s}"))?;
    let num = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v}: {e}"));
    lensless_core::Dims::new(num(r)?, num(c)?).map_err(|e| e.to_string())
}

impl Overrides {
    fn apply(&self, cfg: &mut RunConfig) {
        let cwd = std::env::current_dir().unwrap_or_default();
        let abs = |p: &PathBuf| if p.is_relative() { cwd.join(p) } else { p.clone() };
        if let Some(p) = &self.output {
            cfg.output = abs(p);
        }
        if let Some(p) = &self.dataset {
            cfg.dataset = Some(abs(p));
        }
        if let Some(p) = &self.checkpoint {
            cfg.checkpoint = Some(abs(p));
        }
        if let Some(p) = &self.psf {
            cfg.psf = Some(abs(p));
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.count {
            cfg.count = v;
        }
        if let Some(v) = self.split {
            cfg.split = v;
        }
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.lr {
            cfg.lr = Some(v);
        }
        if let Some(v) = self.layers {
            cfg.layers = v;
        }
        if let Some(v) = self.variant {
            cfg.variant = v;
        }
        if let Some(v) = self.sensor {
            cfg.sensor = v;
        }
    }
}

fn load_config(overrides: &Overrides) -> anyhow::Result<RunConfig> {
    let mut cfg = match &overrides.config {
        Some(path) => RunConfig::load(path).map_err(|e| ConfigError(e.to_string()))?,
        None => {
            let mut cfg = RunConfig::default();
            cfg.resolve_paths(&std::env::current_dir().context("reading the working directory")?);
            cfg
        }
    };
    overrides.apply(&mut cfg);
    cfg.validate().map_err(|e| ConfigError(e.to_string()))?;
    Ok(cfg)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if cli.threads == 0 {
        return Err(ConfigError("threads: must be at least 1".into()).into());
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build_global()
        .context("starting the worker pool")?;
    let cfg = load_config(&cli.overrides)?;
    match cli.command {
        Command::Simulate => commands::simulate(&cfg),
        Command::Reconstruct { method, input } => commands::reconstruct(&cfg, method, &input),
        Command::Train => commands::train(&cfg),
        Command::Eval => commands::eval(&cfg),
        Command::Gradcheck => commands::gradcheck(&cfg),
        Command::Benchmark => commands::benchmark(&cfg),
        Command::Sweep { sizes } => commands::sweep(&cfg, sizes),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<ConfigError>() || matches!(cause.downcast_ref(), Some(lensless_core::Error::Config(_))) {
            return EXIT_CONFIG;
        }
        if cause.is::<VerificationFailed>() {
            return EXIT_VERIFICATION;
        }
    }
    EXIT_RUNTIME
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
