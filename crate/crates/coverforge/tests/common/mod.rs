#![allow(dead_code)]

use std::path::PathBuf;
use std::time::{Duration, Instant};

use coverforge::api::{self, AppState};
use coverforge::config::{BackendMode, ServiceConfig};
use coverforge::mock::{self, MockConfig};
use coverforge::Background;
use reqwest::blocking::multipart::{Form, Part};
use reqwest::blocking::Client;
use serde_json::Value;
use tempfile::TempDir;

pub fn asset(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../test-assets").join(name)
}

pub fn read_asset(name: &str) -> Vec<u8> {
    std::fs::read(asset(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

pub struct Api {
    pub server: Background,
    pub dir: TempDir,
    pub client: Client,
}

pub fn stub_config(dir: &TempDir) -> ServiceConfig {
    ServiceConfig {
        data_dir: dir.path().join("data"),
        ui_dir: dir.path().join("ui"),
        ..Default::default()
    }
}

impl Api {
    pub fn start(edit: impl FnOnce(&mut ServiceConfig)) -> Self {
        let dir = TempDir::new().unwrap();
        let mut cfg = stub_config(&dir);
        edit(&mut cfg);
        let server = Background::spawn(api::router(AppState::open(cfg).unwrap())).unwrap();
        Self {
            server,
            dir,
            client: Client::builder().timeout(Duration::from_secs(120)).build().unwrap(),
        }
    }

    pub fn stub() -> Self {
        Self::start(|_| {})
    }

    pub fn url(&self, path: &str) -> String {
        format!("{}{path}", self.server.url())
    }

    pub fn get(&self, path: &str) -> reqwest::blocking::Response {
        self.client.get(self.url(path)).send().unwrap()
    }

    pub fn post_form(&self, path: &str, form: Form) -> reqwest::blocking::Response {
        self.client.post(self.url(path)).multipart(form).send().unwrap()
    }

    pub fn json(&self, path: &str) -> Value {
        let resp = self.get(path);
        assert!(resp.status().is_success(), "GET {path}: {}", resp.status());
        resp.json().unwrap()
    }

    pub fn wait_state(&self, id: &str, pred: impl Fn(&str) -> bool) -> Value {
        let start = Instant::now();
        loop {
            let job = self.json(&format!("/api/jobs/{id}"));
            if pred(job["state"].as_str().unwrap()) {
                return job;
            }
            assert!(start.elapsed() < Duration::from_secs(120), "job {id} stuck: {job}");
            std::thread::sleep(Duration::from_millis(20));
        }
    }

    pub fn wait_terminal(&self, id: &str) -> Value {
        self.wait_state(id, |s| matches!(s, "succeeded" | "failed" | "canceled"))
    }
}

pub fn file_part(bytes: Vec<u8>, name: &str) -> Part {
    Part::bytes(bytes).file_name(name.to_string())
}

/// The fixture trio as a cover-job form.
pub fn cover_form(style: &str, params: Option<&str>) -> Form {
    let mut form = Form::new()
        .part("audio", file_part(read_asset("song_60s.wav"), "song_60s.wav"))
        .part("image", file_part(read_asset("fruit_bowl.png"), "fruit_bowl.png"))
        .text("style", style.to_string());
    if let Some(p) = params {
        form = form.text("params", p.to_string());
    }
    form
}

pub fn qr_form(payload: Option<&str>, params: Option<&str>) -> Form {
    let mut form = Form::new()
        .part("image", file_part(read_asset("fruit_bowl.png"), "fruit_bowl.png"))
        .text("style", "ink wash");
    if let Some(p) = payload {
        form = form.text("payload", p.to_string());
    }
    if let Some(p) = params {
        form = form.text("params", p.to_string());
    }
    form
}

pub fn mock_server(cfg: MockConfig) -> Background {
    Background::spawn(mock::router(cfg)).unwrap()
}

pub fn remote(cfg: &mut ServiceConfig, mock: &Background) {
    cfg.backend_mode = BackendMode::Remote;
    cfg.backend_url = Some(mock.url());
}
