//! JSON endpoints over a [`RegistryHandle`].

use std::future::Future;
use std::net::SocketAddr;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::net::TcpListener;

use crate::error::ControlError;
use crate::registry::{DeployRequest, NodeRegistration, ServiceState};
use crate::service::RegistryHandle;

/// Error body returned by every failing endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
    pub details: Value,
}

pub struct ApiError(ControlError);

impl From<ControlError> for ApiError {
    fn from(e: ControlError) -> Self {
        Self(e)
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        Self(ControlError::Invalid(e.body_text()))
    }
}

pub fn status_for(e: &ControlError) -> StatusCode {
    match e {
        ControlError::ServiceExists(_) | ControlError::NodeExists(_) | ControlError::NodeHosting { .. } => {
            StatusCode::CONFLICT
        }
        ControlError::ServiceNotFound(_) | ControlError::NodeNotFound(_) => StatusCode::NOT_FOUND,
        ControlError::UnknownModel { .. } | ControlError::Invalid(_) => StatusCode::BAD_REQUEST,
        ControlError::Placement(_) | ControlError::MissingLink { .. } => StatusCode::UNPROCESSABLE_ENTITY,
        ControlError::Engine(_) | ControlError::Journal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        ControlError::Unavailable => StatusCode::SERVICE_UNAVAILABLE,
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            code: self.0.code().to_string(),
            message: self.0.to_string(),
            details: self.0.details(),
        };
        (status_for(&self.0), Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeployResponse {
    pub service_name: String,
    pub state: ServiceState,
    pub head: String,
    pub nodes: Vec<String>,
    pub layer_counts: Vec<u32>,
}

#[derive(Debug, Deserialize)]
struct ExitQuery {
    #[serde(default)]
    cascade: bool,
}

async fn deploy(
    State(h): State<RegistryHandle>,
    body: Result<Json<DeployRequest>, JsonRejection>,
) -> ApiResult<(StatusCode, Json<DeployResponse>)> {
    let Json(req) = body?;
    let rec = h.deploy(req).await?;
    Ok((
        StatusCode::CREATED,
        Json(DeployResponse {
            service_name: rec.service_name,
            state: rec.state,
            head: rec.plan.head.clone(),
            nodes: rec.plan.nodes().map(str::to_string).collect(),
            layer_counts: rec.plan.layer_counts(),
        }),
    ))
}

async fn api_key(State(h): State<RegistryHandle>, Path(name): Path<String>) -> ApiResult<Json<Value>> {
    let key = h.get_api_key(&name)?;
    Ok(Json(json!({ "service_name": name, "api_key": key })))
}

async fn service_status(State(h): State<RegistryHandle>, Path(name): Path<String>) -> ApiResult<Response> {
    Ok(Json(h.check_service_status(&name)?).into_response())
}

async fn delete_service(State(h): State<RegistryHandle>, Path(name): Path<String>) -> ApiResult<StatusCode> {
    h.delete(&name).await?;
    Ok(StatusCode::NO_CONTENT)
}

async fn register_node(
    State(h): State<RegistryHandle>,
    body: Result<Json<NodeRegistration>, JsonRejection>,
) -> ApiResult<(StatusCode, Response)> {
    let Json(reg) = body?;
    let name = reg.node.name.clone();
    h.node_access(reg).await?;
    Ok((StatusCode::CREATED, Json(h.check_node_status(&name)?).into_response()))
}

async fn node_status(State(h): State<RegistryHandle>, Path(name): Path<String>) -> ApiResult<Response> {
    Ok(Json(h.check_node_status(&name)?).into_response())
}

async fn node_exit(
    State(h): State<RegistryHandle>,
    Path(name): Path<String>,
    Query(q): Query<ExitQuery>,
) -> ApiResult<Json<Value>> {
    let stopped = h.node_exit(&name, q.cascade).await?;
    Ok(Json(json!({ "node": name, "stopped_services": stopped })))
}

pub fn router(handle: RegistryHandle) -> Router {
    Router::new()
        .route("/services", post(deploy))
        .route("/services/{name}", get(service_status).delete(delete_service))
        .route("/services/{name}/key", get(api_key))
        .route("/nodes", post(register_node))
        .route("/nodes/{name}", get(node_status).delete(node_exit))
        .with_state(handle)
}

/// Bind `addr`. Fails if the port is taken.
pub async fn bind(addr: SocketAddr) -> std::io::Result<TcpListener> {
    TcpListener::bind(addr).await
}

/// Serve until `shutdown` resolves, then finish in-flight requests.
pub async fn serve(
    listener: TcpListener,
    handle: RegistryHandle,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    if let Ok(addr) = listener.local_addr() {
        tracing::info!(%addr, "control api listening");
    }
    axum::serve(listener, router(handle))
        .with_graceful_shutdown(shutdown)
        .await
}
