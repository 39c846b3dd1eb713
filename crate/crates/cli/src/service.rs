//! JSON-over-HTTP front end.
//!
//! - `GET /v1/health`
//! - `GET /v1/config/defaults`
//! - `POST /v1/transfer` with base64 PNGs; answers with a base64 PNG.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};
use serde_json::json;
use texture_reformer::WeightStore32;

use crate::transfer::{transfer_png, ConfigOverrides, PngInputs, RunError};

/// Request bodies above this size are refused with 413.
pub const MAX_BODY_BYTES: usize = 16 * 1024 * 1024;

#[derive(Clone)]
pub struct AppState {
    weights: Arc<WeightStore32>,
    timeout: Duration,
}

impl AppState {
    pub fn new(weights: WeightStore32, timeout: Duration) -> Self {
        Self {
            weights: Arc::new(weights),
            timeout,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransferRequest {
    pub source_style: String,
    pub source_sem: String,
    pub target_sem: String,
    #[serde(default)]
    pub config: ConfigOverrides,
    #[serde(default)]
    pub trace: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransferResponse {
    pub image: String,
    /// Seconds per executed stage ("I", "II", "III") plus "total".
    pub timings: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<BTreeMap<String, String>>,
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/v1/health", get(health))
        .route("/v1/config/defaults", get(defaults))
        .route("/v1/transfer", post(transfer))
        .layer(DefaultBodyLimit::max(MAX_BODY_BYTES))
        .with_state(state)
}

/// Serves until ctrl-c.
pub async fn serve(addr: SocketAddr, state: AppState) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

async fn health(State(state): State<AppState>) -> Json<serde_json::Value> {
    Json(json!({ "status": "ok", "weights_version": state.weights.version() }))
}

async fn defaults() -> Json<ConfigOverrides> {
    Json(ConfigOverrides::defaults())
}

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(json!({ "error": message.into() }))).into_response()
}

fn decode_field(name: &str, value: &str) -> Result<Vec<u8>, String> {
    BASE64.decode(value).map_err(|e| format!("{name}: invalid base64: {e}"))
}

async fn transfer(State(state): State<AppState>, body: Bytes) -> Response {
    let request: TransferRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return error(StatusCode::BAD_REQUEST, format!("malformed request: {e}")),
    };
    let decoded = (|| {
        Ok::<_, String>([
            decode_field("source_style", &request.source_style)?,
            decode_field("source_sem", &request.source_sem)?,
            decode_field("target_sem", &request.target_sem)?,
        ])
    })();
    let [style, s_sem, t_sem] = match decoded {
        Ok(d) => d,
        Err(message) => return error(StatusCode::BAD_REQUEST, message),
    };

    let weights = Arc::clone(&state.weights);
    let (config, trace) = (request.config, request.trace);
    let job = tokio::task::spawn_blocking(move || {
        let inputs = PngInputs {
            source_style: &style,
            source_sem: &s_sem,
            target_sem: &t_sem,
        };
        transfer_png(inputs, &config, &weights, trace)
    });
    let result = match tokio::time::timeout(state.timeout, job).await {
        Err(_) => return error(StatusCode::GATEWAY_TIMEOUT, "transfer timed out"),
        Ok(Err(e)) => return error(StatusCode::INTERNAL_SERVER_ERROR, format!("worker failed: {e}")),
        Ok(Ok(r)) => r,
    };
    match result {
        Ok(out) => {
            let mut timings: BTreeMap<String, f64> = out.timings.iter().map(|(s, t)| (s.label().to_string(), *t)).collect();
            timings.insert("total".into(), out.total_seconds());
            let trace = trace.then(|| out.trace.iter().map(|(n, png)| (n.to_string(), BASE64.encode(png))).collect());
            Json(TransferResponse {
                image: BASE64.encode(&out.image),
                timings,
                trace,
            })
            .into_response()
        }
        Err(e @ (RunError::Input(_) | RunError::Config(_))) => error(StatusCode::BAD_REQUEST, e.to_string()),
        Err(RunError::Engine { stage, message }) => (
            StatusCode::UNPROCESSABLE_ENTITY,
            Json(json!({ "error": message, "stage": stage.map(|s| s.label()) })),
        )
            .into_response(),
    }
}
