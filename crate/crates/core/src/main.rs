use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use texter::error::Error;
use texter::explain::Mode;
use texter::pipeline::{Pipeline, RunConfig, Stage};

#[derive(Parser, Debug)]
#[command(name = "texter", version, about = "Textual explanations of classifier decisions on synthetic scenes")]
#[command(after_long_help = help_footer())]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// JSON run config; missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the run seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Overrides paths.out.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Explain this class instead of the predicted one.
    #[arg(long, global = true)]
    class: Option<usize>,

    /// texter, ttc or random.
    #[arg(long, global = true)]
    method: Option<String>,

    /// Caps the worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Generate train/test scenes and the description bank.
    GenData,
    /// Train the image classifier.
    TrainClassifier,
    /// Train the joint image/text embedder.
    TrainEmbedder,
    /// Train the TopK sparse autoencoder on classifier features.
    TrainSae,
    /// Fit the feature-to-text-space aligner.
    TrainAligner,
    /// Explain the configured test images.
    Explain,
    /// Concept-image validity and caption scores.
    Evaluate,
    /// Compare TEXTER, text-to-concept and random on the test set.
    BenchFaithfulness,
    /// Run every stage in order.
    All,
}

fn help_footer() -> String {
    format!(
        "{}\nExit codes: 0 ok, 1 other failure, 2 config, 3 I/O, 4 numeric divergence, 5 missing prerequisite.",
        RunConfig::describe_defaults()
    )
}

fn exit_code(e: &Error) -> u8 {
    if e.is_numeric_divergence() {
        return 4;
    }
    match e.root() {
        Error::Config(_) => 2,
        Error::Io(_) | Error::Parse { .. } | Error::Checkpoint(_) | Error::Json(_) => 3,
        Error::MissingArtifact { .. } => 5,
        _ => 1,
    }
}

fn build_config(cli: &Cli) -> Result<RunConfig, Error> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(out) = &cli.out {
        config.paths.out = out.clone();
    }
    if cli.class.is_some() {
        config.class = cli.class;
    }
    if let Some(m) = &cli.method {
        config.method = m.parse::<Mode>()?;
    }
    Ok(config)
}

fn run(cli: &Cli) -> Result<(), Error> {
    let pipeline = Pipeline::new(build_config(cli)?)?;
    let stage = match cli.command {
        Command::All => return pipeline.run_all(),
        Command::GenData => Stage::GenData,
        Command::TrainClassifier => Stage::TrainClassifier,
        Command::TrainEmbedder => Stage::TrainEmbedder,
        Command::TrainSae => Stage::TrainSae,
        Command::TrainAligner => Stage::TrainAligner,
        Command::Explain => Stage::Explain,
        Command::Evaluate => Stage::Evaluate,
        Command::BenchFaithfulness => Stage::BenchFaithfulness,
    };
    pipeline.run(stage)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match texter::par::with_threads(cli.threads, || run(&cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
