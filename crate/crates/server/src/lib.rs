//! HTTP and WebSocket front end for a [`Hub`], plus the glue that runs a
//! trainer on its own thread next to the server.
//!
//! Routes:
//! - `POST /command` submits an envelope and answers `{uuid, status}` or `{error, code, field?}`.
//! - `GET /commands`, `/state`, `/branches` and `/metrics?branch_id=` return JSON views.
//! - `GET /ws` streams events, starting with a `snapshot` event.

use std::future::Future;
use std::net::SocketAddr;
use std::sync::{mpsc, Arc};
use std::thread::JoinHandle;

use axum::body::Bytes;
use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use itrain_core::hub::{Hub, SubmitError};
use itrain_core::protocol::{encode_event_string, format_time, fresh_uuid, now_unix};
use itrain_core::trainer::{BoundaryHook, HubSource, RunConfig, RunOutcome, Trainer, TrainerError, TrainerOptions};
use serde::Deserialize;
use serde_json::{json, Value};
use tokio::net::TcpListener;
use tracing::{debug, info, warn};

pub fn router(hub: Arc<Hub>) -> Router {
    Router::new()
        .route("/command", post(submit_command))
        .route("/commands", get(list_commands))
        .route("/state", get(state))
        .route("/branches", get(branches))
        .route("/metrics", get(metrics))
        .route("/ws", get(ws_upgrade))
        .with_state(hub)
}

fn error_response(status: StatusCode, code: &str, message: String, field: Option<String>) -> Response {
    let mut body = json!({"error": message, "code": code});
    if let Some(f) = field {
        body["field"] = Value::from(f);
    }
    (status, Json(body)).into_response()
}

/// Fills in a missing `uuid` or `time` so hand-written envelopes, such as the
/// documented examples with placeholder values, can be posted directly.
#[allow(clippy::result_large_err)]
fn complete_envelope(body: &[u8]) -> Result<Vec<u8>, Response> {
    let mut value: Value = serde_json::from_slice(body).map_err(|e| {
        error_response(StatusCode::BAD_REQUEST, "malformed", format!("malformed JSON: {e}"), None)
    })?;
    let Some(obj) = value.as_object_mut() else {
        return Err(error_response(
            StatusCode::BAD_REQUEST,
            "malformed",
            "expected a JSON object".into(),
            None,
        ));
    };
    let mut changed = false;
    if !obj.contains_key("uuid") {
        obj.insert("uuid".into(), Value::from(fresh_uuid()));
        changed = true;
    }
    if !obj.contains_key("time") {
        let raw = serde_json::from_str(&format_time(now_unix())).expect("formatted time is a number");
        obj.insert("time".into(), raw);
        changed = true;
    }
    Ok(if changed {
        serde_json::to_vec(&value).expect("value serializes")
    } else {
        body.to_vec()
    })
}

async fn submit_command(State(hub): State<Arc<Hub>>, body: Bytes) -> Response {
    let raw = match complete_envelope(&body) {
        Ok(raw) => raw,
        Err(resp) => return resp,
    };
    match hub.submit(&raw) {
        Ok((uuid, status)) => (StatusCode::OK, Json(json!({"uuid": uuid, "status": status}))).into_response(),
        Err(e) => {
            let status = match e {
                SubmitError::DuplicateUuid(_) => StatusCode::CONFLICT,
                _ => StatusCode::BAD_REQUEST,
            };
            debug!(error = %e, "command rejected");
            error_response(status, e.code(), e.to_string(), e.field())
        }
    }
}

async fn list_commands(State(hub): State<Arc<Hub>>) -> Response {
    Json(hub.history()).into_response()
}

async fn state(State(hub): State<Arc<Hub>>) -> Response {
    Json(hub.snapshot()).into_response()
}

async fn branches(State(hub): State<Arc<Hub>>) -> Response {
    Json(hub.branches()).into_response()
}

#[derive(Deserialize)]
struct MetricsQuery {
    branch_id: Option<String>,
}

async fn metrics(State(hub): State<Arc<Hub>>, Query(q): Query<MetricsQuery>) -> Response {
    let branch = q.branch_id.unwrap_or_else(|| hub.snapshot().branch_id);
    if !hub.branches().iter().any(|b| b.branch_id == branch) {
        return error_response(
            StatusCode::NOT_FOUND,
            "unknown_branch",
            format!("unknown branch `{branch}`"),
            Some("branch_id".into()),
        );
    }
    Json(hub.metrics(&branch)).into_response()
}

async fn ws_upgrade(State(hub): State<Arc<Hub>>, ws: WebSocketUpgrade) -> Response {
    ws.on_upgrade(move |socket| stream_events(socket, hub))
}

async fn stream_events(mut socket: WebSocket, hub: Arc<Hub>) {
    let (sub, snapshot) = hub.subscribe_with_snapshot();
    let first = encode_event_string(&snapshot.to_event());
    if socket.send(Message::Text(first.into())).await.is_ok() {
        loop {
            tokio::select! {
                frame = sub.recv() => match frame {
                    Some(f) => {
                        if socket.send(Message::Text(f.text.to_string().into())).await.is_err() {
                            break;
                        }
                    }
                    None => {
                        let _ = socket.send(Message::Close(None)).await;
                        break;
                    }
                },
                msg = socket.recv() => match msg {
                    Some(Ok(Message::Close(_))) | Some(Err(_)) | None => break,
                    Some(Ok(_)) => {}
                },
            }
        }
    }
    if sub.dropped() > 0 {
        warn!(subscriber = sub.id(), dropped = sub.dropped(), "event stream lost frames to backpressure");
    }
    hub.unsubscribe(&sub);
}

/// Serves `hub` on `listener` until `shutdown` resolves. Open event streams
/// are closed when shutdown begins.
pub async fn serve(
    listener: TcpListener,
    hub: Arc<Hub>,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    let closer = Arc::clone(&hub);
    let app = router(hub);
    axum::serve(listener, app)
        .with_graceful_shutdown(async move {
            shutdown.await;
            closer.close_subscribers();
        })
        .await
}

/// Binds the listener, reporting the real address for port 0.
pub async fn bind(host: &str, port: u16) -> std::io::Result<(TcpListener, SocketAddr)> {
    let listener = TcpListener::bind((host, port)).await?;
    let addr = listener.local_addr()?;
    Ok((listener, addr))
}

/// A trainer running on a dedicated thread.
pub struct TrainingRun {
    thread: JoinHandle<Result<RunOutcome, TrainerError>>,
}

pub type HookFactory = Box<dyn FnOnce(&Hub) -> Vec<Box<dyn BoundaryHook + '_>> + Send>;

impl TrainingRun {
    /// Builds the trainer on its own thread and starts it. Construction
    /// errors (bad config, run directory in use) are returned here.
    pub fn start(
        hub: Arc<Hub>,
        config: RunConfig,
        options: TrainerOptions,
        hooks: HookFactory,
    ) -> Result<Self, TrainerError> {
        let (ready_tx, ready_rx) = mpsc::channel();
        let thread = std::thread::Builder::new()
            .name("trainer".into())
            .spawn(move || {
                let mut trainer = match Trainer::new(config, &hub, options) {
                    Ok(t) => {
                        let _ = ready_tx.send(None);
                        t
                    }
                    Err(e) => {
                        let msg = e.to_string();
                        let _ = ready_tx.send(Some(msg.clone()));
                        return Err(e);
                    }
                };
                for hook in hooks(&hub) {
                    trainer.add_hook(hook);
                }
                info!("training started");
                trainer.run(&mut HubSource::default())
            })
            .expect("spawn trainer thread");
        match ready_rx.recv() {
            Ok(None) => Ok(Self { thread }),
            _ => Err(thread
                .join()
                .expect("trainer thread panicked")
                .err()
                .unwrap_or_else(|| TrainerError::Config("trainer failed to start".into()))),
        }
    }

    pub fn is_finished(&self) -> bool {
        self.thread.is_finished()
    }

    /// Waits for the run to end without blocking the async runtime.
    pub async fn finish(self) -> Result<RunOutcome, TrainerError> {
        tokio::task::spawn_blocking(move || self.thread.join().expect("trainer thread panicked"))
            .await
            .expect("join task")
    }
}
