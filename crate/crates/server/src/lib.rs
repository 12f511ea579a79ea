//! HTTP/JSON front end for the triple store.
//!
//! Every compute endpoint is stateless: files travel in the request body and
//! results come back in the response. Query sessions are the exception; a
//! store opened with `POST /v1/stores` stays in memory until deleted.

pub mod ops;

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::{Arc, RwLock};

use axum::extract::rejection::JsonRejection;
use axum::extract::{DefaultBodyLimit, Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use tokio::net::TcpListener;
use tokio::task::JoinHandle;
use uuid::Uuid;

use nets_api as api;
use nets_api::{ErrorBody, ErrorKind};
use nets_core::store::Store;
use ops::OpError;

/// Request bodies carry whole knowledge bases and weight files.
pub const BODY_LIMIT: usize = 1 << 30;

#[derive(Default)]
pub struct AppState {
    stores: RwLock<HashMap<Uuid, Arc<Store>>>,
}

impl AppState {
    pub fn open_stores(&self) -> usize {
        self.stores.read().expect("store map poisoned").len()
    }

    fn get(&self, id: Uuid) -> Result<Arc<Store>, OpError> {
        self.stores.read().expect("store map poisoned").get(&id).cloned().ok_or(OpError::NoSuchStore(id))
    }
}

pub struct ApiError(OpError);

impl From<OpError> for ApiError {
    fn from(e: OpError) -> Self {
        ApiError(e)
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        ApiError(OpError::User(format!("bad request body: {}", e.body_text())))
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = match (&self.0, self.0.kind()) {
            (OpError::NoSuchStore(_), _) => StatusCode::NOT_FOUND,
            (_, ErrorKind::User) => StatusCode::BAD_REQUEST,
            (_, ErrorKind::Internal) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        if status.is_server_error() {
            tracing::error!(error = %self.0, "request failed");
        }
        (status, Json(ErrorBody { error: self.0.to_string(), kind: self.0.kind() })).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, OpError> + Send + 'static) -> Result<T, ApiError> {
    match tokio::task::spawn_blocking(f).await {
        Ok(r) => r.map_err(ApiError),
        Err(e) => Err(ApiError(OpError::Internal(format!("worker failed: {e}")))),
    }
}

async fn health() -> Json<api::Health> {
    Json(api::Health { status: "ok".into(), version: env!("CARGO_PKG_VERSION").into() })
}

async fn generate(body: Result<Json<api::GenerateRequest>, JsonRejection>) -> ApiResult<api::GenerateResponse> {
    let Json(req) = body?;
    Ok(Json(blocking(move || ops::generate(&req)).await?))
}

async fn reason(body: Result<Json<api::ReasonRequest>, JsonRejection>) -> ApiResult<api::ReasonResponse> {
    let Json(req) = body?;
    Ok(Json(blocking(move || ops::reason(&req)).await?))
}

async fn split(body: Result<Json<api::SplitRequest>, JsonRejection>) -> ApiResult<api::SplitResponse> {
    let Json(req) = body?;
    Ok(Json(blocking(move || ops::split(&req)).await?))
}

async fn train(body: Result<Json<api::TrainRequest>, JsonRejection>) -> ApiResult<api::TrainResponse> {
    let Json(req) = body?;
    Ok(Json(blocking(move || ops::train_model(&req)).await?))
}

async fn materialize(body: Result<Json<api::MaterializeRequest>, JsonRejection>) -> ApiResult<api::MaterializeResponse> {
    let Json(req) = body?;
    Ok(Json(blocking(move || ops::materialize_kb(&req)).await?))
}

async fn eval(body: Result<Json<api::EvalRequest>, JsonRejection>) -> ApiResult<api::EvalResponse> {
    let Json(req) = body?;
    Ok(Json(blocking(move || ops::eval(&req)).await?))
}

async fn open_store(
    State(state): State<Arc<AppState>>,
    body: Result<Json<api::OpenStoreRequest>, JsonRejection>,
) -> Result<(StatusCode, Json<api::OpenStoreResponse>), ApiError> {
    let Json(req) = body?;
    let (store, timings) = blocking(move || ops::open_store(&req)).await?;
    let id = Uuid::new_v4();
    let schema = store.graph().schema();
    let resp = api::OpenStoreResponse {
        id,
        individuals: store.graph().n_individuals(),
        classes: schema.classes().to_vec(),
        relations: schema.relations().to_vec(),
        timings,
    };
    state.stores.write().expect("store map poisoned").insert(id, Arc::new(store));
    Ok((StatusCode::CREATED, Json(resp)))
}

async fn query_store(
    State(state): State<Arc<AppState>>,
    Path(id): Path<Uuid>,
    body: Result<Json<api::QueryRequest>, JsonRejection>,
) -> ApiResult<api::QueryResponse> {
    let Json(req) = body?;
    let store = state.get(id)?;
    Ok(Json(blocking(move || ops::query(&store, &req)).await?))
}

async fn close_store(State(state): State<Arc<AppState>>, Path(id): Path<Uuid>) -> Result<StatusCode, ApiError> {
    match state.stores.write().expect("store map poisoned").remove(&id) {
        Some(_) => Ok(StatusCode::NO_CONTENT),
        None => Err(ApiError(OpError::NoSuchStore(id))),
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route(api::HEALTH, get(health))
        .route(api::GENERATE, post(generate))
        .route(api::REASON, post(reason))
        .route(api::SPLIT, post(split))
        .route(api::TRAIN, post(train))
        .route(api::MATERIALIZE, post(materialize))
        .route(api::EVAL, post(eval))
        .route(api::STORES, post(open_store))
        .route("/v1/stores/{id}", axum::routing::delete(close_store))
        .route("/v1/stores/{id}/query", post(query_store))
        .layer(DefaultBodyLimit::max(BODY_LIMIT))
        .with_state(state)
}

pub async fn serve(listener: TcpListener, state: Arc<AppState>) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}

/// Binds an ephemeral loopback port and serves on it in the background.
pub async fn spawn_local() -> std::io::Result<(SocketAddr, JoinHandle<std::io::Result<()>>)> {
    let listener = TcpListener::bind(("127.0.0.1", 0)).await?;
    let addr = listener.local_addr()?;
    let handle = tokio::spawn(serve(listener, Arc::new(AppState::default())));
    Ok((addr, handle))
}
