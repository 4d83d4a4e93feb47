//! Command-line front end: batch generation, risk tables, the HTTP service
//! and toy fixture creation.

use std::fs::File;
use std::io::{self, BufWriter, Read, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};

use dtraj_core::document::{parse_input, to_document, trajectory_from_records};
use dtraj_core::{toy, derive_seed, Engine, GenerateError, ModelConfig, TokenId, Trajectory};

use crate::api::{router, AppState};
use crate::config::{
    load_engine, ServiceConfig, DEFAULT_BIND, DEFAULT_MAX_BODY_BYTES, DEFAULT_MAX_SAMPLES,
};

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_LOAD: u8 = 3;
pub const EXIT_INPUT: u8 = 4;

#[derive(Debug, Parser)]
#[command(name = "dtraj", version, about = "Disease-trajectory inference engine")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample future trajectories, one JSON document per output line.
    Generate(GenerateArgs),
    /// Estimate the probability of target events by a horizon age.
    Risk(RiskArgs),
    /// Run the local HTTP service.
    Serve(ServeArgs),
    /// Write the toy vocabulary and a seeded random weights archive.
    MakeToy(MakeToyArgs),
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Weights archive.
    #[arg(long, env = "DTRAJ_MODEL")]
    pub model: PathBuf,
    /// Vocabulary file.
    #[arg(long, env = "DTRAJ_VOCAB")]
    pub vocab: PathBuf,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Input trajectory document, or `-` for stdin.
    #[arg(long)]
    pub input: String,
    /// Random when omitted; the value used is reported on stderr.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = dtraj_core::generator::DEFAULT_MAX_AGE)]
    pub max_age: f64,
    #[arg(long, default_value_t = dtraj_core::generator::DEFAULT_MAX_STEPS)]
    pub max_steps: usize,
    /// Worker threads (defaults to the number of CPUs).
    #[arg(long)]
    pub workers: Option<usize>,
    /// Output file (default stdout).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    pub samples: u64,
}

#[derive(Debug, Args)]
pub struct RiskArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long, default_value_t = 1000, value_parser = clap::value_parser!(u64).range(1..))]
    pub samples: u64,
    /// Comma-separated target codes.
    #[arg(long, value_delimiter = ',', required = true)]
    pub targets: Vec<String>,
    /// Horizon age in years.
    #[arg(long)]
    pub horizon: f64,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, env = "DTRAJ_BIND", default_value = DEFAULT_BIND)]
    pub bind: SocketAddr,
    /// Permit binding a non-loopback address.
    #[arg(long)]
    pub allow_remote: bool,
    #[arg(long, default_value_t = DEFAULT_MAX_SAMPLES)]
    pub max_samples: usize,
    #[arg(long, default_value_t = DEFAULT_MAX_BODY_BYTES)]
    pub max_body_bytes: usize,
    /// Monte Carlo worker threads shared by all requests.
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Debug, Args)]
pub struct MakeToyArgs {
    #[arg(long)]
    pub model_out: PathBuf,
    #[arg(long)]
    pub vocab_out: PathBuf,
    #[arg(long, default_value_t = 2024)]
    pub seed: u64,
    /// Half-width of the uniform weight distribution.
    #[arg(long, default_value_t = 0.5)]
    pub scale: f32,
}

/// A failure carrying its process exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    fn new(code: u8, message: impl std::fmt::Display) -> Self {
        Self {
            code,
            message: message.to_string(),
        }
    }
}

type CliResult<T = ()> = Result<T, Failure>;

pub fn run(cli: Cli) -> ExitCode {
    let result = match cli.command {
        Command::Generate(args) => cmd_generate(args),
        Command::Risk(args) => cmd_risk(args),
        Command::Serve(args) => cmd_serve(args),
        Command::MakeToy(args) => cmd_make_toy(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            tracing::error!(exit_code = f.code, "{}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn read_input(source: &str) -> CliResult<String> {
    let mut text = String::new();
    let res = if source == "-" {
        io::stdin().read_to_string(&mut text)
    } else {
        File::open(source).and_then(|mut f| f.read_to_string(&mut text))
    };
    res.map_err(|e| Failure::new(EXIT_INPUT, format!("reading input {source}: {e}")))?;
    Ok(text)
}

fn open_output(path: Option<&Path>) -> CliResult<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).map_err(|e| {
            Failure::new(1, format!("creating output {}: {e}", p.display()))
        })?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn input_error(e: impl std::fmt::Display) -> Failure {
    Failure::new(EXIT_INPUT, format!("invalid input: {e}"))
}

fn generate_error(e: GenerateError) -> Failure {
    match e {
        GenerateError::Model(_) | GenerateError::Sample(_) => Failure::new(1, e),
        other => input_error(other),
    }
}

struct Prepared {
    engine: Engine,
    input: Trajectory,
    params: dtraj_core::GenerationParams,
    pool: rayon::ThreadPool,
}

fn prepare(run: &RunArgs) -> CliResult<Prepared> {
    let engine = load_engine(&run.model.model, &run.model.vocab)
        .map_err(|e| Failure::new(EXIT_LOAD, format!("{e:#}")))?;
    let text = read_input(&run.input)?;
    let doc = parse_input(&text).map_err(input_error)?;
    let input = trajectory_from_records(doc.events(), engine.vocab()).map_err(input_error)?;
    let seed = run.seed.unwrap_or_else(rand::random);
    tracing::info!(seed, "sampling");
    let mut params = engine.default_params(seed);
    params.max_age_years = run.max_age;
    params.max_steps = run.max_steps;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(w) = run.workers {
        pool = pool.num_threads(w);
    }
    let pool = pool.build().map_err(|e| Failure::new(1, e))?;
    Ok(Prepared {
        engine,
        input,
        params,
        pool,
    })
}

fn cmd_generate(args: GenerateArgs) -> CliResult {
    let p = prepare(&args.run)?;
    let n = args.samples as usize;
    let samples = p
        .pool
        .install(|| p.engine.generate_samples(&p.input, &p.params, n))
        .map_err(generate_error)?;
    let mut out = open_output(args.run.out.as_deref())?;
    let write_err = |e: io::Error| Failure::new(1, format!("writing output: {e}"));
    for (k, t) in samples.iter().enumerate() {
        let doc = to_document(
            t,
            p.input.len(),
            derive_seed(p.params.seed, k as u64),
            p.engine.vocab(),
        );
        serde_json::to_writer(&mut out, &doc).map_err(|e| write_err(e.into()))?;
        out.write_all(b"\n").map_err(write_err)?;
    }
    out.flush().map_err(write_err)
}

fn cmd_risk(args: RiskArgs) -> CliResult {
    let p = prepare(&args.run)?;
    let targets: Vec<TokenId> = args
        .targets
        .iter()
        .map(|c| p.engine.vocab().encode(c))
        .collect::<Result<_, _>>()
        .map_err(input_error)?;
    let n = args.samples as usize;
    let estimates = p
        .pool
        .install(|| {
            p.engine
                .estimate_risk(&p.input, &targets, args.horizon, &p.params, n)
        })
        .map_err(generate_error)?;
    let mut out = open_output(args.run.out.as_deref())?;
    let write_err = |e: io::Error| Failure::new(1, format!("writing output: {e}"));
    writeln!(out, "target\tprobability\tstd_error\tn").map_err(write_err)?;
    for r in estimates {
        let code = &p.engine.vocab().decode(r.target).expect("encoded target").code;
        writeln!(out, "{code}\t{}\t{}\t{}", r.probability, r.std_error, r.n_samples)
            .map_err(write_err)?;
    }
    out.flush().map_err(write_err)
}

fn cmd_serve(args: ServeArgs) -> CliResult {
    let config = ServiceConfig {
        model_path: args.model.model,
        vocab_path: args.model.vocab,
        bind_address: args.bind,
        allow_remote: args.allow_remote,
        max_samples_per_request: args.max_samples,
        max_body_bytes: args.max_body_bytes,
        workers: args
            .workers
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get())),
    };
    config.validate().map_err(|e| Failure::new(EXIT_USAGE, e))?;
    let engine = load_engine(&config.model_path, &config.vocab_path)
        .map_err(|e| Failure::new(EXIT_LOAD, format!("{e:#}")))?;
    let runtime = tokio::runtime::Runtime::new().map_err(|e| Failure::new(1, e))?;
    runtime.block_on(serve(config, engine))
}

/// Binds, logs the listening address and serves until interrupted.
pub async fn serve(config: ServiceConfig, engine: Engine) -> CliResult {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .thread_name(|i| format!("mc-worker-{i}"))
        .build()
        .map_err(|e| Failure::new(1, e))?;
    let state = AppState {
        engine: Arc::new(engine),
        pool: Arc::new(pool),
        max_samples_per_request: config.max_samples_per_request,
    };
    let listener = tokio::net::TcpListener::bind(config.bind_address)
        .await
        .map_err(|e| Failure::new(1, format!("binding {}: {e}", config.bind_address)))?;
    let addr = listener.local_addr().map_err(|e| Failure::new(1, e))?;
    tracing::info!(%addr, workers = config.workers, "listening");
    axum::serve(listener, router(state, config.max_body_bytes))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| Failure::new(1, e))
}

fn cmd_make_toy(args: MakeToyArgs) -> CliResult {
    let archive = toy::random_archive(ModelConfig::toy(), args.seed, args.scale)
        .map_err(|e| Failure::new(1, e))?;
    let write = |path: &Path, bytes: &[u8]| {
        std::fs::write(path, bytes)
            .map_err(|e| Failure::new(1, format!("writing {}: {e}", path.display())))
    };
    write(&args.model_out, &archive.to_bytes())?;
    write(&args.vocab_out, toy::TOY_VOCAB_TSV.as_bytes())
}
