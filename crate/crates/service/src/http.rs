//! Axum routes: JSON session management, one-shot PNG frames and the
//! latest-wins WebSocket stream.

use std::collections::HashMap;
use std::sync::Arc;

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::{SinkExt, StreamExt};
use tokio::sync::{mpsc, watch};

use nvs_core::RigidTransform;

use crate::protocol::{decode_pose_message, encode_frame, parse_pose_param, peek_seq, FrameKind};
use crate::session::{CreateRequest, Session, SessionStore};
use crate::ServiceError;

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let status = match &self {
            ServiceError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ServiceError::NotFound(_) => StatusCode::NOT_FOUND,
            ServiceError::Core(_) | ServiceError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        (status, Json(serde_json::json!({ "error": self.to_string() }))).into_response()
    }
}

pub fn router(store: Arc<SessionStore>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/session", post(create_session))
        .route("/session/{id}", axum::routing::delete(delete_session))
        .route("/session/{id}/frame", get(frame))
        .route("/session/{id}/stream", get(stream))
        .with_state(store)
}

async fn health(State(store): State<Arc<SessionStore>>) -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok", "sessions": store.len() }))
}

async fn create_session(
    State(store): State<Arc<SessionStore>>,
    body: axum::body::Bytes,
) -> Result<Response, ServiceError> {
    let req: CreateRequest = if body.is_empty() {
        return Err(ServiceError::BadRequest("empty request body".into()));
    } else {
        serde_json::from_slice(&body).map_err(|e| ServiceError::BadRequest(format!("malformed request: {e}")))?
    };
    let resp = blocking(move || store.create(&req)).await?;
    Ok((StatusCode::CREATED, Json(resp)).into_response())
}

async fn delete_session(
    State(store): State<Arc<SessionStore>>,
    Path(id): Path<String>,
) -> Result<StatusCode, ServiceError> {
    store.remove(&id)?;
    Ok(StatusCode::NO_CONTENT)
}

fn parse_kind(q: &HashMap<String, String>) -> Result<FrameKind, ServiceError> {
    match q.get("kind").map(String::as_str) {
        None | Some("color") => Ok(FrameKind::Color),
        Some("depth") => Ok(FrameKind::Depth),
        Some(other) => Err(ServiceError::BadRequest(format!(
            "unknown kind {other:?}; use color or depth"
        ))),
    }
}

async fn frame(
    State(store): State<Arc<SessionStore>>,
    Path(id): Path<String>,
    Query(q): Query<HashMap<String, String>>,
) -> Result<Response, ServiceError> {
    let session = store.get(&id)?;
    let pose = match q.get("pose") {
        Some(p) => parse_pose_param(p)?,
        None => RigidTransform::identity(),
    };
    let kind = parse_kind(&q)?;
    let frame = blocking(move || session.render(&pose, kind)).await?;
    Ok(([(header::CONTENT_TYPE, "image/png")], frame.png).into_response())
}

async fn stream(
    State(store): State<Arc<SessionStore>>,
    Path(id): Path<String>,
    ws: WebSocketUpgrade,
) -> Result<Response, ServiceError> {
    let session = store.get(&id)?;
    Ok(ws.on_upgrade(move |socket| run_stream(socket, session)))
}

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, ServiceError> + Send + 'static,
) -> Result<T, ServiceError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ServiceError::Internal(format!("render task failed: {e}")))?
}

/// Pending work for the render loop. Only the newest item survives.
#[derive(Debug, Clone)]
enum Pending {
    Pose(crate::protocol::PoseMessage),
    Error { seq: u32, msg: String },
}

async fn run_stream(socket: WebSocket, session: Arc<Session>) {
    let (mut sink, mut incoming) = socket.split();
    let (out_tx, mut out_rx) = mpsc::channel::<Vec<u8>>(4);
    let writer = tokio::spawn(async move {
        while let Some(bytes) = out_rx.recv().await {
            if sink.send(Message::Binary(bytes.into())).await.is_err() {
                break;
            }
        }
    });
    let (pending_tx, mut pending_rx) = watch::channel::<Option<Pending>>(None);
    let worker = tokio::spawn(async move {
        while pending_rx.changed().await.is_ok() {
            let Some(item) = pending_rx.borrow_and_update().clone() else {
                continue;
            };
            let bytes = match item {
                Pending::Pose(msg) => {
                    let s = session.clone();
                    match blocking(move || s.render(&msg.pose, msg.kind)).await {
                        Ok(f) => encode_frame(msg.seq, f.kind, &f.png),
                        Err(e) => encode_frame(msg.seq, FrameKind::Error, e.to_string().as_bytes()),
                    }
                }
                Pending::Error { seq, msg } => encode_frame(seq, FrameKind::Error, msg.as_bytes()),
            };
            if out_tx.send(bytes).await.is_err() {
                break;
            }
        }
    });
    while let Some(Ok(msg)) = incoming.next().await {
        let item = match msg {
            Message::Binary(b) => match decode_pose_message(&b) {
                Ok(m) => Pending::Pose(m),
                Err(e) => Pending::Error {
                    seq: peek_seq(&b),
                    msg: e.to_string(),
                },
            },
            Message::Text(_) => Pending::Error {
                seq: 0,
                msg: "pose messages must be binary".into(),
            },
            Message::Close(_) => break,
            _ => continue,
        };
        pending_tx.send_replace(Some(item));
    }
    drop(pending_tx);
    let _ = worker.await;
    let _ = writer.await;
}
