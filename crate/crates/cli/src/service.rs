//! HTTP prediction service: `POST /v1/predict`, `GET /v1/health`, `GET /v1/config`.

use std::sync::Arc;
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::rejection::BytesRejection;
use axum::extract::{DefaultBodyLimit, Request, State};
use axum::http::{HeaderValue, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Extension, Json, Router};
use serde::{Deserialize, Serialize};
use sheetcoder_core::a1::{parse_a1, A1Ref, CellAddr};
use sheetcoder_core::formula::FormulaIR;
use sheetcoder_core::grid::parse_grid;
use sheetcoder_model::predict::predict;
use sheetcoder_model::{Model, ModelError};
use tokio::sync::Semaphore;

pub const REQUEST_ID_HEADER: &str = "x-request-id";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ServiceConfig {
    pub bind: String,
    pub beam: usize,
    /// Used when a request does not name `top_k`.
    pub top_k: usize,
    pub max_body_bytes: usize,
    pub max_in_flight: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self { bind: "127.0.0.1:8080".into(), beam: 64, top_k: 5, max_body_bytes: 1 << 20, max_in_flight: 4 }
    }
}

impl ServiceConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.beam == 0 || self.top_k == 0 || self.top_k > self.beam {
            return Err(format!("top_k ({}) must be between 1 and the beam size ({})", self.top_k, self.beam));
        }
        if self.max_in_flight == 0 || self.max_body_bytes == 0 {
            return Err("max_in_flight and max_body_bytes must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone)]
pub struct AppState {
    model: Arc<Model>,
    config: Arc<ServiceConfig>,
    slots: Arc<Semaphore>,
}

impl AppState {
    pub fn new(model: Model, config: ServiceConfig) -> Result<Self, String> {
        config.validate()?;
        let slots = Arc::new(Semaphore::new(config.max_in_flight));
        Ok(Self { model: Arc::new(model), config: Arc::new(config), slots })
    }

    /// In-flight request permits; exposed so saturation can be exercised.
    pub fn slots(&self) -> Arc<Semaphore> {
        self.slots.clone()
    }
}

#[derive(Clone, Debug)]
struct RequestId(String);

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictRequest {
    /// A grid document, as an object or as its JSON text.
    pub grid: serde_json::Value,
    /// Defaults to the first sheet.
    #[serde(default)]
    pub sheet: Option<String>,
    pub target: String,
    #[serde(default)]
    pub top_k: Option<usize>,
}

#[derive(Debug, PartialEq, Serialize, Deserialize)]
pub struct Suggestion {
    pub rank: usize,
    pub formula: String,
    pub log_prob: f64,
    pub sketch: Vec<String>,
    /// One token group per `RANGE` in the sketch.
    pub ranges: Vec<Vec<String>>,
    pub stream: String,
}

#[derive(Debug, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub sheet: String,
    pub target: String,
    pub beam: usize,
    pub dropped_off_sheet: usize,
    pub latency_ms: f64,
}

#[derive(Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictResponse {
    pub request_id: String,
    pub suggestions: Vec<Suggestion>,
    pub diagnostics: Diagnostics,
}

#[derive(Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub request_id: String,
    pub error: String,
}

fn error(status: StatusCode, id: &str, message: impl Into<String>) -> Response {
    (status, Json(ErrorBody { request_id: id.to_string(), error: message.into() })).into_response()
}

/// Logs the detail server-side; the client only sees the request id.
fn internal(id: &str, detail: &str) -> Response {
    eprintln!("request {id}: internal error: {detail}");
    error(StatusCode::INTERNAL_SERVER_ERROR, id, "internal error")
}

enum Failure {
    BadRequest(String),
    Internal(String),
}

fn run_predict(model: &Model, config: &ServiceConfig, req: PredictRequest) -> Result<(Vec<Suggestion>, Diagnostics), Failure> {
    let bad = Failure::BadRequest;
    let text = match &req.grid {
        serde_json::Value::String(s) => s.clone(),
        v => v.to_string(),
    };
    let sheets = parse_grid(&text).map_err(|e| bad(format!("malformed grid: {e}")))?;
    let sheet = match &req.sheet {
        Some(name) => sheets.iter().find(|s| &s.name == name).ok_or_else(|| bad(format!("no sheet named `{name}`")))?,
        None => sheets.first().ok_or_else(|| bad("grid has no sheets".into()))?,
    };
    let target: CellAddr = match parse_a1(&req.target) {
        Ok(A1Ref::Single(a)) => a,
        _ => return Err(bad(format!("target `{}` is not a single relative A1 cell", req.target))),
    };
    if !sheet.contains(target) {
        let (rows, cols) = sheet.bounds();
        return Err(bad(format!("target {} is outside sheet `{}` ({rows} rows x {cols} columns)", req.target, sheet.name)));
    }
    let top_k = req.top_k.unwrap_or(config.top_k);
    if top_k == 0 || top_k > config.beam {
        return Err(bad(format!("top_k must be between 1 and {}, got {top_k}", config.beam)));
    }
    let out = predict(model, sheet, target, top_k, config.beam).map_err(|e| match e {
        ModelError::Data(m) | ModelError::Config(m) => bad(m),
        other => Failure::Internal(other.to_string()),
    })?;
    let suggestions = out
        .predictions
        .into_iter()
        .map(|p| {
            let ir = FormulaIR::parse_stream(&p.stream).map_err(|e| Failure::Internal(e.to_string()))?;
            Ok(Suggestion {
                rank: p.rank,
                formula: p.formula,
                log_prob: p.logprob,
                sketch: ir.sketch_tokens(),
                ranges: ir.ranges().iter().map(|r| r.tokens()).collect(),
                stream: p.stream,
            })
        })
        .collect::<Result<Vec<_>, Failure>>()?;
    let diagnostics = Diagnostics {
        sheet: sheet.name.clone(),
        target: req.target,
        beam: config.beam,
        dropped_off_sheet: out.dropped_off_sheet,
        latency_ms: 0.0,
    };
    Ok((suggestions, diagnostics))
}

async fn predict_handler(State(state): State<AppState>, Extension(RequestId(id)): Extension<RequestId>, body: Result<Bytes, BytesRejection>) -> Response {
    let start = Instant::now();
    let body = match body {
        Ok(b) => b,
        Err(rej) if rej.status() == StatusCode::PAYLOAD_TOO_LARGE => {
            return error(StatusCode::PAYLOAD_TOO_LARGE, &id, format!("request body exceeds {} bytes", state.config.max_body_bytes))
        }
        Err(rej) => return error(StatusCode::BAD_REQUEST, &id, rej.body_text()),
    };
    let req: PredictRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return error(StatusCode::BAD_REQUEST, &id, format!("malformed request: {e}")),
    };
    let Ok(permit) = state.slots.clone().try_acquire_owned() else {
        return error(StatusCode::SERVICE_UNAVAILABLE, &id, "too many requests in flight");
    };
    let (model, config) = (state.model.clone(), state.config.clone());
    let joined = tokio::task::spawn_blocking(move || {
        let _permit = permit;
        run_predict(&model, &config, req)
    })
    .await;
    match joined {
        Ok(Ok((suggestions, mut diagnostics))) => {
            diagnostics.latency_ms = start.elapsed().as_secs_f64() * 1e3;
            Json(PredictResponse { request_id: id, suggestions, diagnostics }).into_response()
        }
        Ok(Err(Failure::BadRequest(m))) => error(StatusCode::BAD_REQUEST, &id, m),
        Ok(Err(Failure::Internal(m))) => internal(&id, &m),
        Err(e) => internal(&id, &e.to_string()),
    }
}

async fn health(Extension(RequestId(id)): Extension<RequestId>) -> Json<serde_json::Value> {
    Json(serde_json::json!({ "request_id": id, "status": "ok" }))
}

async fn config(State(state): State<AppState>, Extension(RequestId(id)): Extension<RequestId>) -> Json<serde_json::Value> {
    let m = &state.model.config;
    let c = &state.config;
    Json(serde_json::json!({
        "request_id": id,
        "radius": m.radius,
        "per_bundle": m.per_bundle,
        "seq_len": m.seq_len,
        "decoding": m.decoding,
        "beam_size": c.beam,
        "default_top_k": c.top_k,
        "max_top_k": c.beam,
        "max_body_bytes": c.max_body_bytes,
        "max_in_flight": c.max_in_flight,
    }))
}

/// Tags every request with a fresh id, visible to handlers and echoed in a response header.
async fn request_id(mut req: Request, next: Next) -> Response {
    let id = uuid::Uuid::new_v4().to_string();
    req.extensions_mut().insert(RequestId(id.clone()));
    let mut resp = next.run(req).await;
    resp.headers_mut().insert(REQUEST_ID_HEADER, HeaderValue::from_str(&id).expect("uuid is a valid header"));
    resp
}

pub fn router(state: AppState) -> Router {
    let limit = state.config.max_body_bytes;
    Router::new()
        .route("/v1/predict", post(predict_handler))
        .route("/v1/health", get(health))
        .route("/v1/config", get(config))
        .layer(DefaultBodyLimit::max(limit))
        .layer(middleware::from_fn(request_id))
        .with_state(state)
}

/// Serves until Ctrl-C.
pub async fn serve(listener: tokio::net::TcpListener, state: AppState) -> std::io::Result<()> {
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
