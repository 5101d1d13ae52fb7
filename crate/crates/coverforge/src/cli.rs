//! Command-line entry points. Exit codes: 0 success, 1 job or runtime
//! failure, 2 usage or validation error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use coverforge_core::orchestrator::{CoverJob, JobOptions, JobState, Orchestrator, OrchestratorError};
use coverforge_core::vision::toyfit::{toy_lora_fit_with, ToyFitConfig};
use coverforge_core::GenerationParams;

use crate::api::{self, job_view, AppState};
use crate::config::{BackendMode, ServiceConfig};
use crate::intake::{self, parse_params, CoverInput, QrInput, RawFile};
use crate::mock::{self, MockConfig};

#[derive(Debug, Parser)]
#[command(name = "coverforge", version, about = "Album covers and stylized QR codes from audio, an image and a style prompt")]
pub struct Cli {
    /// Flat TOML config file (defaults to $COVERFORGE_CONFIG when set).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the cover pipeline once and write its artifacts.
    Generate(GenerateArgs),
    /// Stylize a QR code over an image.
    Qr(QrArgs),
    /// Serve the HTTP API (and the built UI under /ui).
    Serve(ServeArgs),
    /// Serve the mock GPU runtime backed by the stubs.
    ServeMock(MockArgs),
    /// Print a stored job in the API's JSON shape.
    Status(StatusArgs),
    /// Fit a LoRA adapter and a dense update on a synthetic low-rank problem.
    Toyfit(ToyfitArgs),
}

#[derive(Debug, Args)]
pub struct BackendArgs {
    #[arg(long, value_enum)]
    pub backend: Option<BackendMode>,
    #[arg(long)]
    pub backend_url: Option<String>,
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ParamArgs {
    /// JSON object merged over the default parameters.
    #[arg(long)]
    pub params: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, allow_negative_numbers = true)]
    pub guidance_scale: Option<f64>,
    /// Structural conditioning weight, 0 to 5.
    #[arg(long, allow_negative_numbers = true)]
    pub conditioning_scale: Option<f64>,
    /// Overlay strength, 0 to 1.
    #[arg(long, allow_negative_numbers = true)]
    pub strength: Option<f64>,
    #[arg(long)]
    pub steps: Option<u32>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub audio: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub style: String,
    #[arg(long)]
    pub qr_payload: Option<String>,
    #[arg(long)]
    pub auto_tune: bool,
    /// Add a segmentation map as a second conditioning channel.
    #[arg(long)]
    pub segmentation: bool,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    #[command(flatten)]
    pub params: ParamArgs,
    #[command(flatten)]
    pub backend: BackendArgs,
}

#[derive(Debug, Args)]
pub struct QrArgs {
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub payload: String,
    #[arg(long, default_value = "")]
    pub style: String,
    #[arg(long)]
    pub auto_tune: bool,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    #[command(flatten)]
    pub params: ParamArgs,
    #[command(flatten)]
    pub backend: BackendArgs,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub port: Option<u16>,
    #[arg(long)]
    pub workers: Option<usize>,
    #[command(flatten)]
    pub backend: BackendArgs,
}

#[derive(Debug, Args)]
pub struct MockArgs {
    #[arg(long, default_value_t = 8000)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub bind: String,
    #[arg(long, default_value_t = 1)]
    pub max_concurrency: usize,
    /// Added latency per generate call.
    #[arg(long, default_value_t = 0)]
    pub delay_ms: u64,
    /// Require this bearer token.
    #[arg(long)]
    pub token: Option<String>,
}

#[derive(Debug, Args)]
pub struct StatusArgs {
    #[arg(long)]
    pub job: String,
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ToyfitArgs {
    #[arg(long)]
    pub d: usize,
    #[arg(long)]
    pub k: usize,
    #[arg(long)]
    pub r_true: usize,
    #[arg(long)]
    pub r_adapter: usize,
    #[arg(long, default_value_t = 500)]
    pub epochs: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
}

/// Failure classes that pick the exit code.
#[derive(Debug)]
enum Exit {
    Usage(String),
    Failed(anyhow::Error),
}

impl From<anyhow::Error> for Exit {
    fn from(e: anyhow::Error) -> Self {
        Self::Failed(e)
    }
}

impl From<OrchestratorError> for Exit {
    fn from(e: OrchestratorError) -> Self {
        match e {
            OrchestratorError::Validation(errors) => Self::Usage(
                errors
                    .iter()
                    .map(|e| format!("invalid {}: {}", e.field, e.message))
                    .collect::<Vec<_>>()
                    .join("\n"),
            ),
            other => Self::Failed(other.into()),
        }
    }
}

pub fn main() -> ExitCode {
    let cli = Cli::parse();
    let default_level = match cli.command {
        Command::Serve(_) | Command::ServeMock(_) => "info",
        _ => "warn",
    };
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(default_level)),
        )
        .init();
    match run(cli) {
        Ok(code) => code,
        Err(Exit::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Exit::Failed(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode, Exit> {
    let config = || ServiceConfig::load(cli.config.as_deref()).map_err(|e| Exit::Usage(format!("{e:#}")));
    match cli.command {
        Command::Generate(args) => generate(config()?, args),
        Command::Qr(args) => qr(config()?, args),
        Command::Serve(args) => serve(config()?, args),
        Command::ServeMock(args) => serve_mock(args),
        Command::Status(args) => status(config()?, args),
        Command::Toyfit(args) => toyfit(args),
    }
}

fn apply_backend(mut cfg: ServiceConfig, args: &BackendArgs) -> Result<ServiceConfig, Exit> {
    if let Some(mode) = args.backend {
        cfg.backend_mode = mode;
    }
    if let Some(url) = &args.backend_url {
        cfg.backend_url = Some(url.clone());
    }
    if let Some(dir) = &args.data_dir {
        cfg.data_dir = dir.clone();
    }
    cfg.validate().map_err(|e| Exit::Usage(format!("{e:#}")))?;
    Ok(cfg)
}

fn resolve_params(args: &ParamArgs) -> Result<(GenerationParams, Option<u64>), Exit> {
    let (mut params, mut seed) =
        parse_params(args.params.as_deref()).map_err(|e| Exit::Usage(format!("invalid {}: {}", e.field, e.message)))?;
    if let Some(v) = args.guidance_scale {
        params.guidance_scale = v;
    }
    if let Some(v) = args.conditioning_scale {
        params.conditioning_scale = v;
    }
    if let Some(v) = args.strength {
        params.strength = v;
    }
    if let Some(v) = args.steps {
        params.steps = v;
    }
    if let Some(s) = args.seed {
        seed = Some(s);
        params.seed = s;
    }
    Ok((params, seed))
}

fn read_input(flag: &str, path: &Path) -> Result<RawFile, Exit> {
    let bytes = std::fs::read(path).map_err(|e| Exit::Usage(format!("cannot read --{flag} {}: {e}", path.display())))?;
    Ok(RawFile::new(bytes, path.file_name().map(|n| n.to_string_lossy().into_owned())))
}

fn open(cfg: &ServiceConfig) -> Result<Orchestrator, Exit> {
    std::fs::create_dir_all(&cfg.data_dir)
        .with_context(|| format!("creating {}", cfg.data_dir.display()))?;
    Ok(Orchestrator::open(&cfg.data_dir, cfg.backends()?, cfg.orchestrator_config())?)
}

/// Runs the job here, writes what it produced and reports the outcome.
fn finish(cfg: &ServiceConfig, orch: &Orchestrator, job: CoverJob, out: &Path) -> Result<ExitCode, Exit> {
    let job = orch.run_job(&job.id)?;
    if job.state == JobState::Succeeded {
        std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        for name in job.artifacts.keys() {
            let (bytes, _) = orch.artifact(&job.id, name)?;
            std::fs::write(out.join(name), bytes).with_context(|| format!("writing {name}"))?;
        }
    }
    println!("{}", serde_json::to_string_pretty(&job_view(cfg, &job)).expect("json"));
    for warning in &job.warnings {
        eprintln!("warning: {warning}");
    }
    match &job.error {
        None if job.state == JobState::Succeeded => Ok(ExitCode::SUCCESS),
        Some(e) => {
            eprintln!("error: job failed at {} ({}): {}", e.stage, e.code, e.message);
            Ok(ExitCode::from(1))
        }
        None => {
            eprintln!("error: job ended {}", job.state);
            Ok(ExitCode::from(1))
        }
    }
}

fn generate(cfg: ServiceConfig, args: GenerateArgs) -> Result<ExitCode, Exit> {
    let cfg = apply_backend(cfg, &args.backend)?;
    let (params, seed) = resolve_params(&args.params)?;
    let input = CoverInput {
        audio: Some(read_input("audio", &args.audio)?),
        image: Some(read_input("image", &args.image)?),
        style: args.style,
        params,
        seed,
        options: JobOptions {
            make_qr: args.qr_payload.is_some(),
            qr_payload: args.qr_payload,
            auto_tune: args.auto_tune,
            segmentation: args.segmentation,
        },
    };
    let orch = open(&cfg)?;
    let job = intake::submit_cover(&orch, input)?;
    finish(&cfg, &orch, job, &args.out)
}

fn qr(cfg: ServiceConfig, args: QrArgs) -> Result<ExitCode, Exit> {
    let cfg = apply_backend(cfg, &args.backend)?;
    let (params, seed) = resolve_params(&args.params)?;
    let input = QrInput {
        image: Some(read_input("image", &args.image)?),
        payload: Some(args.payload),
        style: args.style,
        params,
        seed,
        auto_tune: args.auto_tune,
    };
    let orch = open(&cfg)?;
    let job = intake::submit_qr(&orch, input)?;
    finish(&cfg, &orch, job, &args.out)
}

fn status(cfg: ServiceConfig, args: StatusArgs) -> Result<ExitCode, Exit> {
    let mut cfg = cfg;
    if let Some(dir) = args.data_dir {
        cfg.data_dir = dir;
    }
    let orch = open(&cfg)?;
    match orch.get_job(&args.job) {
        Ok(job) => {
            println!("{}", serde_json::to_string_pretty(&job_view(&cfg, &job)).expect("json"));
            Ok(ExitCode::SUCCESS)
        }
        Err(OrchestratorError::NotFound(id)) => Err(Exit::Usage(format!("no job {id}"))),
        Err(e) => Err(e.into()),
    }
}

fn runtime() -> Result<tokio::runtime::Runtime, Exit> {
    Ok(tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .context("starting async runtime")?)
}

async fn shutdown_signal() {
    let _ = tokio::signal::ctrl_c().await;
    tracing::info!("shutting down");
}

fn serve(cfg: ServiceConfig, args: ServeArgs) -> Result<ExitCode, Exit> {
    let mut cfg = apply_backend(cfg, &args.backend)?;
    if let Some(port) = args.port {
        cfg.listen_port = port;
    }
    if let Some(workers) = args.workers {
        cfg.worker_count = workers;
    }
    cfg.validate().map_err(|e| Exit::Usage(format!("{e:#}")))?;
    let addr = format!("{}:{}", cfg.listen_addr, cfg.listen_port);
    let state = AppState::open(cfg)?;
    if !state.orch.recovered().is_empty() {
        tracing::warn!(count = state.orch.recovered().len(), "resuming interrupted jobs");
    }
    let router = api::router(state);
    runtime()?.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&addr)
            .await
            .with_context(|| format!("binding {addr}"))?;
        tracing::info!("listening on http://{}", listener.local_addr()?);
        axum::serve(listener, router)
            .with_graceful_shutdown(shutdown_signal())
            .await
            .context("serving")
    })?;
    Ok(ExitCode::SUCCESS)
}

fn serve_mock(args: MockArgs) -> Result<ExitCode, Exit> {
    if args.max_concurrency == 0 {
        return Err(Exit::Usage("--max-concurrency must be at least 1".into()));
    }
    let cfg = MockConfig {
        max_concurrency: args.max_concurrency,
        generate_delay: Duration::from_millis(args.delay_ms),
        token: args.token,
    };
    let addr = format!("{}:{}", args.bind, args.port);
    runtime()?.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&addr)
            .await
            .with_context(|| format!("binding {addr}"))?;
        tracing::info!("mock runtime on http://{}", listener.local_addr()?);
        axum::serve(listener, mock::router(cfg))
            .with_graceful_shutdown(shutdown_signal())
            .await
            .context("serving")
    })?;
    Ok(ExitCode::SUCCESS)
}

fn toyfit(args: ToyfitArgs) -> Result<ExitCode, Exit> {
    let cfg = ToyFitConfig::new(args.d, args.k, args.r_true, args.r_adapter, args.epochs, args.seed);
    let report = toy_lora_fit_with(&cfg).map_err(|e| Exit::Usage(e.to_string()))?;
    println!("{}", serde_json::to_string_pretty(&report).expect("json"));
    Ok(ExitCode::SUCCESS)
}

