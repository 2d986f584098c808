//! Blocking JSON-over-HTTP transport shared by the hosted-model ports.

use std::time::Duration;

use serde_json::Value;

use crate::error::PortError;

/// Environment variable holding the bearer token sent to every endpoint.
pub const TOKEN_ENV: &str = "EXREC_API_TOKEN";

#[derive(Debug, Clone)]
pub struct HttpEndpoint {
    url: String,
    token: Option<String>,
    client: reqwest::blocking::Client,
}

impl HttpEndpoint {
    pub fn new(url: impl Into<String>, timeout: Duration) -> Result<Self, PortError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| PortError::Transport(e.to_string()))?;
        Ok(Self {
            url: url.into(),
            token: std::env::var(TOKEN_ENV).ok().filter(|t| !t.is_empty()),
            client,
        })
    }

    pub fn url(&self) -> &str {
        &self.url
    }

    /// POSTs `body` and parses the JSON answer. Connection failures, 429 and
    /// 5xx are transport errors (retryable); anything else that is not a
    /// JSON success is an invalid response.
    pub fn post(&self, body: &Value) -> Result<Value, PortError> {
        let mut req = self.client.post(&self.url).json(body);
        if let Some(t) = &self.token {
            req = req.bearer_auth(t);
        }
        let resp = req.send().map_err(|e| PortError::Transport(e.to_string()))?;
        let status = resp.status();
        if status.is_server_error() || status.as_u16() == 429 {
            return Err(PortError::Transport(format!("{} returned {status}", self.url)));
        }
        if !status.is_success() {
            return Err(PortError::InvalidResponse(format!("{} returned {status}", self.url)));
        }
        resp.json::<Value>()
            .map_err(|e| PortError::InvalidResponse(format!("body is not JSON: {e}")))
    }
}

pub(crate) fn field<'a>(v: &'a Value, name: &str) -> Result<&'a Value, PortError> {
    v.get(name)
        .ok_or_else(|| PortError::InvalidResponse(format!("missing \"{name}\" in response")))
}

pub(crate) fn string_field(v: &Value, name: &str) -> Result<String, PortError> {
    field(v, name)?
        .as_str()
        .map(str::to_string)
        .ok_or_else(|| PortError::InvalidResponse(format!("\"{name}\" is not a string")))
}
