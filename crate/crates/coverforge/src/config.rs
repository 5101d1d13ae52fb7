//! Service configuration: defaults, then an optional flat TOML file, then
//! environment overrides, then command-line flags.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use coverforge_core::caption::stub::StubCaptioner;
use coverforge_core::generation::stub::StubGenerator;
use coverforge_core::orchestrator::{Backends, OrchestratorConfig, DATA_DIR_ENV};
use coverforge_core::remote::{RemoteCaptioner, RemoteEndpoint, RemoteGenerator, BACKEND_URL_ENV};
use coverforge_core::vision::segment::StubSegmenter;
use serde::{Deserialize, Serialize};

pub const PORT_ENV: &str = "COVERFORGE_PORT";
pub const CONFIG_ENV: &str = "COVERFORGE_CONFIG";

const MB: usize = 1024 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum BackendMode {
    Stub,
    Remote,
}

impl BackendMode {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Stub => "stub",
            Self::Remote => "remote",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub listen_addr: String,
    pub listen_port: u16,
    pub data_dir: PathBuf,
    pub backend_mode: BackendMode,
    pub backend_url: Option<String>,
    pub backend_token: Option<String>,
    pub backend_max_concurrency: usize,
    pub backend_timeout_s: u64,
    /// Prefix for links handed to clients (the tunnel address in a hosted
    /// deployment). Links are relative when unset.
    pub public_base_url: Option<String>,
    pub worker_count: usize,
    pub queue_bound: usize,
    pub max_audio_bytes: usize,
    pub max_image_bytes: usize,
    /// `*` allows any origin.
    pub cors_origins: Vec<String>,
    pub ui_dir: PathBuf,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            listen_addr: "127.0.0.1".into(),
            listen_port: 8080,
            data_dir: PathBuf::from("data"),
            backend_mode: BackendMode::Stub,
            backend_url: None,
            backend_token: None,
            backend_max_concurrency: 1,
            backend_timeout_s: 300,
            public_base_url: None,
            worker_count: 2,
            queue_bound: coverforge_core::orchestrator::DEFAULT_QUEUE_BOUND,
            max_audio_bytes: 30 * MB,
            max_image_bytes: 10 * MB,
            cors_origins: vec!["http://localhost:5173".into()],
            ui_dir: PathBuf::from("webui/dist"),
        }
    }
}

impl ServiceConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    /// Reads `path`, or the file named by `COVERFORGE_CONFIG`, or falls back to
    /// defaults; then applies environment overrides.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let from_env = std::env::var_os(CONFIG_ENV).map(PathBuf::from);
        let mut cfg = match path.map(Path::to_path_buf).or(from_env) {
            Some(p) => {
                let text = std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
                Self::from_toml(&text).with_context(|| format!("parsing {}", p.display()))?
            }
            None => Self::default(),
        };
        cfg.apply_env(|k| std::env::var(k).ok())?;
        Ok(cfg)
    }

    pub fn apply_env(&mut self, var: impl Fn(&str) -> Option<String>) -> Result<()> {
        if let Some(url) = var(BACKEND_URL_ENV) {
            self.backend_url = Some(url);
        }
        if let Some(dir) = var(DATA_DIR_ENV) {
            self.data_dir = dir.into();
        }
        if let Some(port) = var(PORT_ENV) {
            self.listen_port = port.parse().with_context(|| format!("{PORT_ENV}={port:?} is not a port"))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.backend_mode == BackendMode::Remote && self.backend_url.is_none() {
            bail!("backend_mode = \"remote\" needs backend_url (or {BACKEND_URL_ENV})");
        }
        if self.worker_count == 0 {
            bail!("worker_count must be at least 1");
        }
        if self.queue_bound == 0 {
            bail!("queue_bound must be at least 1");
        }
        if self.backend_max_concurrency == 0 {
            bail!("backend_max_concurrency must be at least 1");
        }
        if let Some(url) = &self.backend_url {
            RemoteEndpoint::new(url)?;
        }
        Ok(())
    }

    pub fn orchestrator_config(&self) -> OrchestratorConfig {
        OrchestratorConfig {
            queue_bound: self.queue_bound,
            ..OrchestratorConfig::default()
        }
    }

    pub fn endpoint(&self) -> Result<RemoteEndpoint> {
        let url = self.backend_url.as_deref().context("no backend_url configured")?;
        let mut endpoint = RemoteEndpoint::new(url)?
            .with_max_concurrency(self.backend_max_concurrency)?
            .with_timeout(Duration::from_secs(self.backend_timeout_s));
        if let Some(token) = &self.backend_token {
            endpoint = endpoint.with_token(token.clone());
        }
        Ok(endpoint)
    }

    /// Segmentation has no remote task, so the local stub serves both modes.
    pub fn backends(&self) -> Result<Backends> {
        let segmenter = Some(Arc::new(StubSegmenter::default()) as _);
        Ok(match self.backend_mode {
            BackendMode::Stub => Backends {
                captioner: Arc::new(StubCaptioner::new()),
                generator: Arc::new(StubGenerator),
                segmenter,
            },
            BackendMode::Remote => {
                let endpoint = self.endpoint()?;
                Backends {
                    captioner: Arc::new(RemoteCaptioner::new(endpoint.clone())),
                    generator: Arc::new(RemoteGenerator::new(endpoint)),
                    segmenter,
                }
            }
        })
    }

    /// Absolute or relative link to a path under the API.
    pub fn link(&self, path: &str) -> String {
        match &self.public_base_url {
            Some(base) => format!("{}{path}", base.trim_end_matches('/')),
            None => path.to_string(),
        }
    }
}
