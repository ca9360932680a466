//! Read-only HTTP view over exported summaries and the BIM registry.
//!
//! Summary files are re-read on every request, so the answers track whatever
//! the last `export` wrote. Nothing here mutates pipeline state.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tower_http::cors::CorsLayer;
use tower_http::services::ServeDir;

use crate::batch_analytics::{Granularity, Metric};
use crate::export_map::{
    build_3d, map_frame, points_file_name, read_point_order, select_time, summary_file_name, BimElement, BimRegistry,
    ExportError, SummaryCsv,
};

pub const REGISTRY_FILE: &str = "registry.json";
pub const SPATIAL_FILE: &str = "spatial.csv";

#[derive(Debug, Clone)]
pub struct ApiState {
    pub data_dir: PathBuf,
    pub registry: Arc<BimRegistry>,
    pub sentinel: f64,
}

impl ApiState {
    /// Reads `registry.json` and, if present, `spatial.csv` from `data_dir`.
    /// A directory without a registry serves an empty one.
    pub fn load(data_dir: impl Into<PathBuf>, sentinel: f64) -> Result<Self, ExportError> {
        let data_dir = data_dir.into();
        let seed = data_dir.join(REGISTRY_FILE);
        let mut registry = if seed.exists() {
            BimRegistry::load_seed(&seed)?
        } else {
            BimRegistry::new()
        };
        let spatial = data_dir.join(SPATIAL_FILE);
        if spatial.exists() {
            registry.apply_spatial_table(std::fs::File::open(spatial)?)?;
        }
        Ok(Self {
            data_dir,
            registry: Arc::new(registry),
            sentinel,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameEntry {
    pub element_id: i64,
    pub bas_id: String,
    pub room_id: Option<String>,
    pub point_id: String,
    pub value: f64,
    pub is_sentinel: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FramePayload {
    pub metric: Metric,
    pub granularity: Granularity,
    /// Periods ago; 0 is the newest row.
    pub offset: usize,
    pub period_start: String,
    pub entries: Vec<FrameEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CatalogEntry {
    pub metric: Metric,
    pub granularity: Granularity,
    pub rows: usize,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }

    pub fn status(&self) -> StatusCode {
        self.status
    }
}

impl From<ExportError> for ApiError {
    fn from(e: ExportError) -> Self {
        let status = match e {
            ExportError::IndexOutOfRange { .. } => StatusCode::RANGE_NOT_SATISFIABLE,
            ExportError::Io(ref io) if io.kind() == std::io::ErrorKind::NotFound => StatusCode::NOT_FOUND,
            ExportError::MissingColumn { .. }
            | ExportError::BadCell { .. }
            | ExportError::Ragged { .. }
            | ExportError::Unordered(_)
            | ExportError::ShapeMismatch { .. }
            | ExportError::Csv(_) => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

#[derive(Debug, Deserialize)]
pub struct FrameQuery {
    pub metric: String,
    pub granularity: String,
    #[serde(default)]
    pub offset: usize,
}

/// Builds the frame `offset` periods back, exactly as `map_frame` would
/// write it into a copy of the registry.
pub fn load_frame(
    data_dir: &Path,
    registry: &BimRegistry,
    metric: Metric,
    granularity: Granularity,
    offset: usize,
    sentinel: f64,
) -> Result<FramePayload, ApiError> {
    let csv_path = data_dir.join(summary_file_name(metric, granularity));
    if !csv_path.exists() {
        return Err(ApiError::new(
            StatusCode::NOT_FOUND,
            format!("no summary for {metric}/{granularity}"),
        ));
    }
    let csv = SummaryCsv::load(&csv_path)?;
    let point_order = read_point_order(data_dir.join(points_file_name(metric, granularity)))?;
    let nested = build_3d(&csv, &registry.order())?;
    let frame = select_time(&nested, offset)?;
    let mut mapped = registry.clone();
    map_frame(&frame, &point_order, &mut mapped, sentinel)?;
    let entries = mapped
        .elements()
        .iter()
        .flat_map(|e: &BimElement| {
            point_order.iter().filter_map(move |p| {
                e.parameters.get(p).map(|&value| FrameEntry {
                    element_id: e.element_id,
                    bas_id: e.bas_id.clone(),
                    room_id: e.spatial_ref.clone(),
                    point_id: p.clone(),
                    value,
                    is_sentinel: value == sentinel,
                })
            })
        })
        .collect();
    Ok(FramePayload {
        metric,
        granularity,
        offset,
        period_start: nested.timestamps[offset].clone(),
        entries,
    })
}

/// Every summary CSV present in `data_dir` with its data-row count.
pub fn catalog(data_dir: &Path) -> Result<Vec<CatalogEntry>, ExportError> {
    let mut out = Vec::new();
    for metric in Metric::ALL {
        for granularity in Granularity::ALL {
            let path = data_dir.join(summary_file_name(metric, granularity));
            if path.exists() {
                out.push(CatalogEntry {
                    metric,
                    granularity,
                    rows: SummaryCsv::load(&path)?.rows.len(),
                });
            }
        }
    }
    Ok(out)
}

async fn frame(State(state): State<ApiState>, Query(q): Query<FrameQuery>) -> Result<Json<FramePayload>, ApiError> {
    let metric: Metric = q
        .metric
        .parse()
        .map_err(|_| ApiError::new(StatusCode::NOT_FOUND, format!("unknown metric {:?}", q.metric)))?;
    let granularity: Granularity = q.granularity.parse().map_err(|_| {
        ApiError::new(
            StatusCode::NOT_FOUND,
            format!("unknown granularity {:?}", q.granularity),
        )
    })?;
    tokio::task::spawn_blocking(move || {
        load_frame(
            &state.data_dir,
            &state.registry,
            metric,
            granularity,
            q.offset,
            state.sentinel,
        )
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
    .map(Json)
}

async fn elements(State(state): State<ApiState>) -> Json<Vec<BimElement>> {
    Json(state.registry.elements().to_vec())
}

async fn summaries(State(state): State<ApiState>) -> Result<Json<Vec<CatalogEntry>>, ApiError> {
    tokio::task::spawn_blocking(move || catalog(&state.data_dir))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
        .map(Json)
        .map_err(ApiError::from)
}

async fn health() -> &'static str {
    "ok"
}

/// API routes with permissive CORS; anything else falls through to
/// `static_dir` when given.
pub fn router(state: ApiState, static_dir: Option<&Path>) -> Router {
    let api = Router::new()
        .route("/frame", get(frame))
        .route("/elements", get(elements))
        .route("/summaries", get(summaries))
        .route("/health", get(health))
        .with_state(state)
        .layer(CorsLayer::permissive());
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

pub async fn serve_api(addr: SocketAddr, router: Router) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, "api listening");
    axum::serve(listener, router).await
}
