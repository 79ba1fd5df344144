//! Review service: inference on uploaded images, a crystal-likelihood
//! queue, and a durable annotation log.

pub mod http;
pub mod store;

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Deserialize;

use crate::checkpoint::Checkpoint;
use crate::config;
use crate::error::{Error, Result};

pub use http::{router, AppState};
pub use store::{
    Action, AnnotationEvent, AnnotationRequest, QueuePage, Status, StatusFilter, Store, TriageItem,
};

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceConfig {
    #[serde(default = "default_listen")]
    pub listen: String,
    pub data_dir: PathBuf,
    pub checkpoint: PathBuf,
    /// Bearer token; authentication is off when unset.
    #[serde(default)]
    pub token: Option<String>,
    #[serde(default = "default_max_upload")]
    pub max_upload_bytes: usize,
}

fn default_listen() -> String {
    "127.0.0.1:8080".into()
}

fn default_max_upload() -> usize {
    64 << 20
}

impl ServiceConfig {
    pub const KEYS: &'static [&'static str] = &["listen", "data_dir", "checkpoint", "token", "max_upload_bytes"];

    pub fn load(path: Option<&Path>, env: impl IntoIterator<Item = (String, String)>) -> Result<Self> {
        config::load(path, Self::KEYS, env)
    }
}

/// Opens the store and model named by `cfg`.
pub fn open_state(cfg: &ServiceConfig) -> Result<AppState> {
    let bytes = std::fs::read(&cfg.checkpoint).map_err(|e| Error::io(&cfg.checkpoint, e))?;
    let model = Checkpoint::from_bytes(&bytes)?.into_model()?;
    if cfg.token.is_none() {
        tracing::warn!("no auth token configured; the API is open");
    }
    Ok(AppState {
        store: Store::open(&cfg.data_dir)?,
        checkpoint_digest: store::sha256_hex(&bytes),
        model,
        token: cfg.token.clone(),
    })
}

/// Binds, reports the bound address through `on_bound`, then serves until
/// ctrl-c.
pub async fn serve(cfg: ServiceConfig, on_bound: impl FnOnce(SocketAddr)) -> Result<()> {
    let state = Arc::new(open_state(&cfg)?);
    let listener = tokio::net::TcpListener::bind(&cfg.listen)
        .await
        .map_err(|e| Error::Config(format!("cannot bind {}: {e}", cfg.listen)))?;
    let addr = listener
        .local_addr()
        .map_err(|e| Error::Config(format!("cannot read bound address: {e}")))?;
    tracing::info!(%addr, "triage service listening");
    on_bound(addr);
    axum::serve(listener, router(state, cfg.max_upload_bytes))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| Error::Config(format!("server error: {e}")))
}
