//! `mlod` command-line front end.
//!
//! Exit status is 0 on success, 1 on runtime failures and 2 on usage or
//! configuration errors. Errors go to stderr tagged with the module and
//! error kind, e.g. `error[featurepack::MissingFile]`.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mlod::CombineMethod;

#[derive(Debug, Parser)]
#[command(name = "mlod", version, about = "Multi-layer out-of-distribution detection")]
struct Cli {
    /// Worker threads; defaults to the available cores.
    #[arg(long, global = true, env = "MLOD_THREADS")]
    threads: Option<usize>,
    /// Suppress human-readable output on stdout.
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic feature pack.
    Synth(SynthArgs),
    /// Evaluate combination methods on every OOD split of a pack.
    Eval(RunArgs),
    /// Score one sample and print every method's verdict as JSON.
    Detect(DetectArgs),
    /// Fit calibration tables and write them to a directory.
    Calibrate(RunArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Preset scenario name.
    #[arg(long, conflicts_with = "spec", required_unless_present = "spec")]
    scenario: Option<String>,
    /// JSON file with a full generator spec.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Output pack directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct RunArgs {
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Feature pack directory, overriding the config.
    #[arg(long)]
    pack: Option<PathBuf>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Combination method; repeat for several.
    #[arg(long = "method", value_parser = parse_method)]
    methods: Vec<CombineMethod>,
    /// Neighbour rank for k-NN scorers.
    #[arg(long)]
    k: Option<usize>,
    /// Temperature for energy and ODIN scorers.
    #[arg(long)]
    temperature: Option<f64>,
    /// Report path for `eval`, table directory for `calibrate`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// CSV summary path for `eval`.
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct DetectArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Row of `--split` to score.
    #[arg(long, conflicts_with = "vectors", required_unless_present = "vectors")]
    sample: Option<usize>,
    #[arg(long, default_value = "test_id")]
    split: String,
    /// One raw f32le file per layer, in layer order.
    #[arg(long, num_args = 1..)]
    vectors: Vec<PathBuf>,
    /// Directory of tables written by `calibrate`; fitted on the fly otherwise.
    #[arg(long)]
    tables: Option<PathBuf>,
}

fn parse_method(s: &str) -> Result<CombineMethod, String> {
    s.parse()
}

impl RunArgs {
    fn overrides(&self) -> config::Overrides {
        config::Overrides {
            pack: self.pack.clone(),
            alpha: self.alpha,
            methods: self.methods.clone(),
            k: self.k,
            temperature: self.temperature,
            output: self.out.clone(),
            csv: self.csv.clone(),
            seed: self.seed,
        }
    }
}

/// Error carrying its exit status and tag.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Lib(mlod::Error),
}

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config(msg.into())
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Lib(e) => match e.kind() {
                "IoFailure" | "TooFewSamples" | "NonFinite" | "CorruptTable" | "ZeroVector" | "TooFewPoints"
                | "DegenerateLogits" | "EmptyPVector" | "InvalidPValue" | "UnsupportedMethod" | "OddDf"
                | "OutOfDomain" | "EmptyInput" => 1,
                _ => 2,
            },
        }
    }

    fn tag(&self) -> String {
        match self {
            CliError::Config(_) => "cli::ConfigError".into(),
            CliError::Lib(e) => format!("{}::{}", e.module(), e.kind()),
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(msg) => f.write_str(msg),
            CliError::Lib(e) => write!(f, "{e}"),
        }
    }
}

impl<E: Into<mlod::Error>> From<E> for CliError {
    fn from(e: E) -> Self {
        CliError::Lib(e.into())
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads.filter(|&n| n > 0) {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::config(format!("cannot start {n} threads: {e}")))?;
    }
    let quiet = cli.quiet;
    match cli.command {
        Command::Synth(a) => commands::synth(a.scenario.as_deref(), a.spec.as_deref(), &a.out, a.seed, quiet),
        Command::Eval(a) => commands::eval(a.config.as_deref(), &a.overrides(), quiet),
        Command::Calibrate(a) => commands::calibrate(a.config.as_deref(), &a.overrides(), quiet),
        Command::Detect(a) => {
            let target = match a.sample {
                Some(index) => commands::Target::Row { split: a.split, index },
                None => commands::Target::Files(a.vectors),
            };
            commands::detect(a.run.config.as_deref(), &a.run.overrides(), target, a.tables.as_deref())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { "error" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.tag());
            ExitCode::from(e.exit_code())
        }
    }
}
