//! Thin async client for the rating service's JSON API.

use ae_lab::eval::{MosReport, NextItem, RatingSubmission, SessionCreated, SessionRequest};
use reqwest::{Response, StatusCode};
use serde::de::DeserializeOwned;
use serde::Deserialize;

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("request failed: {0}")]
    Http(#[from] reqwest::Error),

    #[error("server returned {status}: {message}")]
    Api { status: StatusCode, message: String },
}

pub type Result<T> = std::result::Result<T, ClientError>;

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
pub struct Accepted {
    pub item_id: String,
    pub rating: u8,
}

#[derive(Deserialize)]
struct ErrorBody {
    error: String,
}

#[derive(Debug, Clone)]
pub struct RatingClient {
    http: reqwest::Client,
    base: String,
}

impl RatingClient {
    pub fn new(base_url: impl Into<String>) -> Self {
        Self::with_client(reqwest::Client::new(), base_url)
    }

    pub fn with_client(http: reqwest::Client, base_url: impl Into<String>) -> Self {
        Self {
            http,
            base: base_url.into().trim_end_matches('/').to_string(),
        }
    }

    pub fn base_url(&self) -> &str {
        &self.base
    }

    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    async fn check(response: Response) -> Result<Response> {
        let status = response.status();
        if status.is_success() {
            return Ok(response);
        }
        let text = response.text().await.unwrap_or_default();
        let message = serde_json::from_str::<ErrorBody>(&text).map(|b| b.error).unwrap_or(text);
        Err(ClientError::Api { status, message })
    }

    async fn json<T: DeserializeOwned>(response: Response) -> Result<T> {
        Ok(Self::check(response).await?.json().await?)
    }

    pub async fn create_session(&self, request: &SessionRequest) -> Result<SessionCreated> {
        Self::json(self.http.post(self.url("/api/session")).json(request).send().await?).await
    }

    pub async fn next_item(&self, session_id: &str) -> Result<NextItem> {
        let request = self.http.get(self.url("/api/next")).query(&[("session", session_id)]);
        Self::json(request.send().await?).await
    }

    pub async fn submit(&self, session_id: &str, item_id: &str, rating: i64) -> Result<Accepted> {
        let body = RatingSubmission {
            session_id: session_id.to_string(),
            item_id: item_id.to_string(),
            rating,
        };
        Self::json(self.http.post(self.url("/api/rating")).json(&body).send().await?).await
    }

    pub async fn report(&self) -> Result<MosReport> {
        Self::json(self.http.get(self.url("/api/report")).send().await?).await
    }

    /// Fetches a path returned by the service, such as an `image_url`.
    pub async fn fetch(&self, path: &str) -> Result<Vec<u8>> {
        let response = Self::check(self.http.get(self.url(path)).send().await?).await?;
        Ok(response.bytes().await?.to_vec())
    }
}
