//! Thin async client for the iguide HTTP service.

use serde::de::DeserializeOwned;
use serde::Serialize;

use iguide_core::api::{
    ErrorBody, EstimateRequest, EvalRequest, Health, NormalizeRequest, ObservationRequest, ObservationResponse,
    OverlayRequest, OverlayResponse, RunRequest, SynthRequest,
};
use iguide_core::eval::EvalMetrics;
use iguide_core::fusion::{CorrespondenceUncertainty, NormalizedFrame, TrackState};
use iguide_core::pipeline::{FixtureSummary, RunOutput};

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    /// The service answered with an error status.
    #[error("{message}")]
    Service { status: u16, kind: String, message: String },
    #[error("request failed: {0}")]
    Transport(#[from] reqwest::Error),
}

pub type Result<T> = std::result::Result<T, ClientError>;

#[derive(Debug, Clone)]
pub struct Client {
    base: String,
    http: reqwest::Client,
}

impl Client {
    /// `base_url` like `http://127.0.0.1:7878`.
    pub fn new(base_url: impl Into<String>) -> Self {
        let base = base_url.into().trim_end_matches('/').to_string();
        Client {
            base,
            http: reqwest::Client::new(),
        }
    }

    pub fn base_url(&self) -> &str {
        &self.base
    }

    async fn decode<T: DeserializeOwned>(resp: reqwest::Response) -> Result<T> {
        let status = resp.status();
        if status.is_success() {
            return Ok(resp.json().await?);
        }
        let text = resp.text().await?;
        let (kind, message) = match serde_json::from_str::<ErrorBody>(&text) {
            Ok(body) => (body.kind, body.message),
            Err(_) => ("http".to_string(), text),
        };
        Err(ClientError::Service {
            status: status.as_u16(),
            kind,
            message,
        })
    }

    async fn get<T: DeserializeOwned>(&self, path: &str) -> Result<T> {
        let resp = self.http.get(format!("{}{path}", self.base)).send().await?;
        Self::decode(resp).await
    }

    async fn post<B: Serialize, T: DeserializeOwned>(&self, path: &str, body: &B) -> Result<T> {
        let resp = self.http.post(format!("{}{path}", self.base)).json(body).send().await?;
        Self::decode(resp).await
    }

    pub async fn health(&self) -> Result<Health> {
        self.get("/health").await
    }

    pub async fn estimate(&self, req: &EstimateRequest) -> Result<CorrespondenceUncertainty> {
        self.post("/v1/estimate", req).await
    }

    pub async fn run(&self, req: &RunRequest) -> Result<RunOutput> {
        self.post("/v1/runs", req).await
    }

    pub async fn synth(&self, req: &SynthRequest) -> Result<FixtureSummary> {
        self.post("/v1/synth", req).await
    }

    pub async fn eval(&self, req: &EvalRequest) -> Result<EvalMetrics> {
        self.post("/v1/eval", req).await
    }

    pub async fn overlay(&self, req: &OverlayRequest) -> Result<String> {
        let resp: OverlayResponse = self.post("/v1/overlay", req).await?;
        Ok(resp.svg)
    }

    pub async fn normalize(&self, req: &NormalizeRequest) -> Result<NormalizedFrame> {
        self.post("/v1/normalize", req).await
    }

    pub async fn tracks(&self) -> Result<Vec<TrackState>> {
        self.get("/v1/tracks").await
    }

    pub async fn track(&self, id: u64) -> Result<TrackState> {
        self.get(&format!("/v1/tracks/{id}")).await
    }

    pub async fn observe(&self, id: u64, req: &ObservationRequest) -> Result<ObservationResponse> {
        self.post(&format!("/v1/tracks/{id}/observations"), req).await
    }

    pub async fn delete_track(&self, id: u64) -> Result<()> {
        let resp = self.http.delete(format!("{}/v1/tracks/{id}", self.base)).send().await?;
        if resp.status().is_success() {
            return Ok(());
        }
        Self::decode::<serde_json::Value>(resp).await.map(|_| ())
    }
}
