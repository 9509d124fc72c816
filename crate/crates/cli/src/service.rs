//! HTTP inference service.
//!
//! `GET /health` reports the model fingerprint; `POST /predict` accepts the
//! three input maps either as a JSON object of nested arrays or as a
//! multipart form with one `.npy` part per map.

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{FromRequest, Multipart, Request, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Serialize;
use serde_json::Value;
use tower_http::cors::CorsLayer;

use irdrop_core::analysis::DEFAULT_HOTSPOT_THRESHOLD;
use irdrop_core::dataset::InputMaps;
use irdrop_core::npy::read_npy;
use irdrop_core::Grid2D;

use crate::inference::{predict, Model, PredictResponse};

pub const MAP_FIELDS: [&str; 3] = ["power_grid", "cell_density", "switching"];

/// Largest accepted request body.
const BODY_LIMIT: usize = 16 << 20;

#[derive(Debug, Clone)]
pub struct AppState {
    pub model: Arc<Model>,
    pub default_threshold: f64,
}

impl AppState {
    pub fn new(model: Model) -> Self {
        Self {
            model: Arc::new(model),
            default_threshold: DEFAULT_HOTSPOT_THRESHOLD,
        }
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/predict", post(predict_handler))
        .layer(CorsLayer::permissive())
        .with_state(state)
}

#[derive(Debug, Serialize)]
struct Health<'a> {
    status: &'static str,
    model_version: &'a str,
}

async fn health(State(state): State<AppState>) -> Response {
    Json(Health {
        status: "ok",
        model_version: &state.model.version,
    })
    .into_response()
}

/// Error body: `{"error": ..., "field": ...}`.
#[derive(Debug, Clone, PartialEq)]
pub struct ApiError {
    pub status: StatusCode,
    pub field: Option<String>,
    pub message: String,
}

impl ApiError {
    fn bad(field: Option<&str>, message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::BAD_REQUEST,
            field: field.map(str::to_string),
            message: message.into(),
        }
    }

    fn shape(field: &str, message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::UNPROCESSABLE_ENTITY,
            field: Some(field.to_string()),
            message: message.into(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = serde_json::json!({ "error": self.message, "field": self.field });
        (self.status, Json(body)).into_response()
    }
}

/// A parsed, shape-checked request.
#[derive(Debug, Clone)]
pub struct PredictRequest {
    pub maps: InputMaps,
    pub threshold: Option<f64>,
}

async fn predict_handler(State(state): State<AppState>, req: Request) -> Response {
    match handle_predict(&state, req).await {
        Ok(resp) => Json(resp).into_response(),
        Err(e) => e.into_response(),
    }
}

async fn handle_predict(state: &AppState, req: Request) -> Result<PredictResponse, ApiError> {
    let content_type = req
        .headers()
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .unwrap_or("")
        .to_ascii_lowercase();
    let raw = if content_type.starts_with("multipart/form-data") {
        let form = Multipart::from_request(req, &())
            .await
            .map_err(|e| ApiError::bad(None, format!("invalid multipart body: {}", e.body_text())))?;
        read_multipart(form).await?
    } else {
        let bytes = axum::body::to_bytes(req.into_body(), BODY_LIMIT)
            .await
            .map_err(|e| ApiError::bad(None, format!("unreadable body: {e}")))?;
        parse_json_body(&bytes)?
    };
    let request = raw.validate(state.model.input_shape)?;
    let threshold = request.threshold.unwrap_or(state.default_threshold);

    let model = Arc::clone(&state.model);
    let outcome = tokio::task::spawn_blocking(move || predict(&model.params, &request.maps, threshold))
        .await
        .map_err(|e| internal(format!("inference task failed: {e}")))?;
    let prediction = outcome.map_err(|e| internal(format!("inference failed: {e}")))?;
    Ok(PredictResponse::new(prediction, &state.model.version))
}

fn internal(message: String) -> ApiError {
    ApiError {
        status: StatusCode::INTERNAL_SERVER_ERROR,
        field: None,
        message,
    }
}

/// Maps as received, before shape validation.
#[derive(Debug, Default)]
struct RawRequest {
    maps: [Option<Grid2D>; 3],
    threshold: Option<f64>,
}

impl RawRequest {
    fn set(&mut self, field: &str, grid: Grid2D) -> Result<(), ApiError> {
        let slot = MAP_FIELDS.iter().position(|f| *f == field).expect("known field");
        if self.maps[slot].replace(grid).is_some() {
            return Err(ApiError::bad(Some(field), "given more than once"));
        }
        Ok(())
    }

    fn validate(self, (h, w): (usize, usize)) -> Result<PredictRequest, ApiError> {
        let [power_grid, cell_density, switching] = self.maps;
        let mut grids = Vec::with_capacity(3);
        for (field, grid) in MAP_FIELDS.iter().zip([power_grid, cell_density, switching]) {
            let grid = grid.ok_or_else(|| ApiError::bad(Some(field), "missing"))?;
            if (grid.height(), grid.width()) != (h, w) {
                return Err(ApiError::shape(
                    field,
                    format!("expected a {h}x{w} map, got {}x{}", grid.height(), grid.width()),
                ));
            }
            grids.push(grid);
        }
        let mut grids = grids.into_iter();
        let mut next = || grids.next().expect("three maps");
        Ok(PredictRequest {
            maps: InputMaps {
                power_grid: next(),
                cell_density: next(),
                switching: next(),
            },
            threshold: self.threshold,
        })
    }
}

fn parse_threshold(v: &Value) -> Result<Option<f64>, ApiError> {
    match v {
        Value::Null => Ok(None),
        Value::Number(n) => match n.as_f64() {
            Some(t) if t.is_finite() => Ok(Some(t)),
            _ => Err(ApiError::bad(Some("threshold"), "must be a finite number")),
        },
        _ => Err(ApiError::bad(Some("threshold"), "must be a number")),
    }
}

fn parse_json_body(bytes: &[u8]) -> Result<RawRequest, ApiError> {
    let body: Value =
        serde_json::from_slice(bytes).map_err(|e| ApiError::bad(None, format!("invalid JSON: {e}")))?;
    let Value::Object(obj) = body else {
        return Err(ApiError::bad(None, "expected a JSON object"));
    };
    let mut raw = RawRequest::default();
    for field in MAP_FIELDS {
        if let Some(v) = obj.get(field) {
            raw.set(field, json_grid(field, v)?)?;
        }
    }
    if let Some(v) = obj.get("threshold") {
        raw.threshold = parse_threshold(v)?;
    }
    Ok(raw)
}

/// A rectangular nested array of numbers.
fn json_grid(field: &str, v: &Value) -> Result<Grid2D, ApiError> {
    let bad = |msg: String| ApiError::bad(Some(field), msg);
    let rows = v.as_array().ok_or_else(|| bad("expected a nested array of numbers".into()))?;
    if rows.is_empty() {
        return Err(bad("empty array".into()));
    }
    let mut parsed = Vec::with_capacity(rows.len());
    for (r, row) in rows.iter().enumerate() {
        let row = row.as_array().ok_or_else(|| bad(format!("row {r} is not an array")))?;
        let values = row
            .iter()
            .enumerate()
            .map(|(c, x)| x.as_f64().ok_or_else(|| bad(format!("element [{r}][{c}] is not a number"))))
            .collect::<Result<Vec<f64>, _>>()?;
        parsed.push(values);
    }
    Grid2D::from_rows(&parsed).map_err(|e| bad(e.to_string()))
}

async fn read_multipart(mut form: Multipart) -> Result<RawRequest, ApiError> {
    let mut raw = RawRequest::default();
    while let Some(part) = form
        .next_field()
        .await
        .map_err(|e| ApiError::bad(None, format!("invalid multipart body: {}", e.body_text())))?
    {
        let name = part.name().unwrap_or_default().to_string();
        let bytes: Bytes = part
            .bytes()
            .await
            .map_err(|e| ApiError::bad(Some(&name), format!("unreadable part: {}", e.body_text())))?;
        if let Some(field) = MAP_FIELDS.iter().find(|f| **f == name) {
            raw.set(field, npy_grid(field, &bytes)?)?;
        } else if name == "threshold" {
            let text = std::str::from_utf8(&bytes)
                .map_err(|_| ApiError::bad(Some("threshold"), "must be UTF-8 text"))?;
            let t: f64 = text
                .trim()
                .parse()
                .map_err(|_| ApiError::bad(Some("threshold"), format!("not a number: {text:?}")))?;
            raw.threshold = parse_threshold(&serde_json::json!(t))?;
        } else {
            return Err(ApiError::bad(Some(&name), "unknown form field"));
        }
    }
    Ok(raw)
}

/// A `.npy` part holding an `(H, W)` or `(1, H, W)` array.
fn npy_grid(field: &str, bytes: &[u8]) -> Result<Grid2D, ApiError> {
    let rec = read_npy(bytes).map_err(|e| ApiError::bad(Some(field), e.to_string()))?;
    if rec.data.iter().any(|v| !v.is_finite()) {
        return Err(ApiError::bad(Some(field), "values must be finite"));
    }
    match rec.shape() {
        &[h, w] | &[1, h, w] if h > 0 && w > 0 => {
            Grid2D::new(h, w, rec.data).map_err(|e| ApiError::bad(Some(field), e.to_string()))
        }
        other => Err(ApiError::shape(field, format!("expected a 2-D array, got shape {other:?}"))),
    }
}
