//! Async client for the triple-store HTTP API.

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;
use uuid::Uuid;

use nets_api as api;
use nets_api::{ErrorBody, ErrorKind};

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("cannot reach server: {0}")]
    Transport(#[from] reqwest::Error),
    /// The server answered with an error body.
    #[error("{}", .body.error)]
    Api { status: u16, body: ErrorBody },
    #[error("unexpected response ({status}): {text}")]
    Unexpected { status: u16, text: String },
}

impl ClientError {
    /// True when the request itself was at fault (bad input, unknown store).
    pub fn is_user_error(&self) -> bool {
        matches!(self, ClientError::Api { body, .. } if body.kind == ErrorKind::User)
    }
}

#[derive(Debug, Clone)]
pub struct Client {
    base: String,
    http: reqwest::Client,
}

impl Client {
    /// `base` is the server root, e.g. `http://127.0.0.1:7878`.
    pub fn new(base: impl Into<String>) -> Self {
        Client { base: base.into().trim_end_matches('/').to_string(), http: reqwest::Client::new() }
    }

    pub fn base_url(&self) -> &str {
        &self.base
    }

    async fn decode<T: DeserializeOwned>(resp: reqwest::Response) -> Result<T, ClientError> {
        let status = resp.status();
        let bytes = resp.bytes().await?;
        if status.is_success() {
            return serde_json::from_slice(&bytes).map_err(|e| ClientError::Unexpected {
                status: status.as_u16(),
                text: format!("{e}: {}", String::from_utf8_lossy(&bytes)),
            });
        }
        match serde_json::from_slice::<ErrorBody>(&bytes) {
            Ok(body) => Err(ClientError::Api { status: status.as_u16(), body }),
            Err(_) => Err(ClientError::Unexpected { status: status.as_u16(), text: String::from_utf8_lossy(&bytes).into() }),
        }
    }

    async fn post<B: Serialize, T: DeserializeOwned>(&self, path: &str, body: &B) -> Result<T, ClientError> {
        let resp = self.http.post(format!("{}{path}", self.base)).json(body).send().await?;
        Self::decode(resp).await
    }

    pub async fn health(&self) -> Result<api::Health, ClientError> {
        let resp = self.http.get(format!("{}{}", self.base, api::HEALTH)).send().await?;
        Self::decode(resp).await
    }

    pub async fn generate(&self, req: &api::GenerateRequest) -> Result<api::GenerateResponse, ClientError> {
        self.post(api::GENERATE, req).await
    }

    pub async fn reason(&self, req: &api::ReasonRequest) -> Result<api::ReasonResponse, ClientError> {
        self.post(api::REASON, req).await
    }

    pub async fn split(&self, req: &api::SplitRequest) -> Result<api::SplitResponse, ClientError> {
        self.post(api::SPLIT, req).await
    }

    pub async fn train(&self, req: &api::TrainRequest) -> Result<api::TrainResponse, ClientError> {
        self.post(api::TRAIN, req).await
    }

    pub async fn materialize(&self, req: &api::MaterializeRequest) -> Result<api::MaterializeResponse, ClientError> {
        self.post(api::MATERIALIZE, req).await
    }

    pub async fn eval(&self, req: &api::EvalRequest) -> Result<api::EvalResponse, ClientError> {
        self.post(api::EVAL, req).await
    }

    pub async fn open_store(&self, req: &api::OpenStoreRequest) -> Result<api::OpenStoreResponse, ClientError> {
        self.post(api::STORES, req).await
    }

    pub async fn query(&self, id: Uuid, req: &api::QueryRequest) -> Result<api::QueryResponse, ClientError> {
        self.post(&api::store_query_path(id), req).await
    }

    pub async fn close_store(&self, id: Uuid) -> Result<(), ClientError> {
        let resp = self.http.delete(format!("{}{}", self.base, api::store_path(id))).send().await?;
        let status = resp.status();
        if status.is_success() {
            return Ok(());
        }
        let text = resp.text().await?;
        match serde_json::from_str::<ErrorBody>(&text) {
            Ok(body) => Err(ClientError::Api { status: status.as_u16(), body }),
            Err(_) => Err(ClientError::Unexpected { status: status.as_u16(), text }),
        }
    }
}
