#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use mitigraph_service::config::{ProviderConfig, ServiceConfig};
use mitigraph_service::{api, Runtime};

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

pub fn read(path: impl AsRef<Path>) -> String {
    std::fs::read_to_string(fixtures().join(path)).unwrap()
}

/// Config for `fixture_dir` (mock.json and plugins.json) with data in `data_dir`.
pub fn config(fixture_dir: &str, data_dir: &Path) -> ServiceConfig {
    let dir = fixtures().join(fixture_dir);
    ServiceConfig {
        data_dir: data_dir.to_path_buf(),
        provider: ProviderConfig::Mock {
            script: Some(dir.join("mock.json")),
        },
        plugins: vec![dir.join("plugins.json")],
        ..Default::default()
    }
}

pub struct TestServer {
    pub base: String,
    pub client: reqwest::Client,
    task: tokio::task::JoinHandle<()>,
}

impl TestServer {
    pub async fn start(config: ServiceConfig) -> Self {
        let runtime = Arc::new(Runtime::open(config).await.unwrap());
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
        let base = format!("http://{}", listener.local_addr().unwrap());
        let task = tokio::spawn(async move {
            axum::serve(listener, api::router(runtime)).await.unwrap();
        });
        Self {
            base,
            client: reqwest::Client::new(),
            task,
        }
    }

    pub fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    pub async fn get(&self, path: &str) -> (u16, serde_json::Value) {
        let r = self.client.get(self.url(path)).send().await.unwrap();
        (r.status().as_u16(), r.json().await.unwrap())
    }

    pub async fn post(
        &self,
        path: &str,
        body: impl Into<reqwest::Body>,
    ) -> (u16, serde_json::Value) {
        let r = self
            .client
            .post(self.url(path))
            .body(body)
            .send()
            .await
            .unwrap();
        (r.status().as_u16(), r.json().await.unwrap())
    }

    pub async fn post_json(&self, path: &str, body: serde_json::Value) -> (u16, serde_json::Value) {
        self.post(path, body.to_string()).await
    }

    pub fn stop(self) {
        self.task.abort();
    }
}

/// Every file under `dir` with its bytes.
pub fn snapshot_files(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                files.insert(path.clone(), std::fs::read(&path).unwrap());
            }
        }
    }
    files
}
