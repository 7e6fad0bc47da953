//! Pose-controlled frame server.
//!
//! Sessions hold one source view. Oracle sessions warp a procedural scene
//! with its true depth; learned sessions run a trained model. Frames are
//! served as PNG over HTTP, or streamed over a WebSocket where a newer pose
//! replaces any pose still waiting to render.

pub mod http;
pub mod protocol;
pub mod session;

use std::sync::Arc;

pub use http::router;
pub use protocol::{FrameKind, PoseMessage};
pub use session::{CreateRequest, CreateResponse, Mode, SceneKind, SessionStore};

/// Environment variable naming the bind address.
pub const BIND_ENV: &str = "NVS_BIND";
pub const DEFAULT_BIND: &str = "127.0.0.1:8080";

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error(transparent)]
    Core(#[from] nvs_core::Error),
    #[error("internal error: {0}")]
    Internal(String),
}

/// Flag beats environment beats default.
pub fn bind_address(flag: Option<&str>) -> String {
    flag.map(str::to_string)
        .or_else(|| std::env::var(BIND_ENV).ok().filter(|s| !s.is_empty()))
        .unwrap_or_else(|| DEFAULT_BIND.to_string())
}

pub async fn serve(listener: tokio::net::TcpListener, store: Arc<SessionStore>) -> std::io::Result<()> {
    axum::serve(listener, router(store)).await
}
