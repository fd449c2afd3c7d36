//! Minimal blocking JSON-over-HTTP transport shared by the remote backends.

use serde::de::DeserializeOwned;
use serde::Serialize;
use std::time::Duration;

#[derive(Debug, Clone)]
pub(crate) struct HttpFailure {
    pub retryable: bool,
    pub message: String,
}

/// A POST endpoint with an optional bearer token.
#[derive(Debug, Clone)]
pub(crate) struct JsonEndpoint {
    agent: ureq::Agent,
    url: String,
    token: Option<String>,
}

impl JsonEndpoint {
    pub fn new(url: impl Into<String>, token: Option<String>, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .into();
        Self {
            agent,
            url: url.into(),
            token,
        }
    }

    pub fn post<B: Serialize, T: DeserializeOwned>(&self, body: &B) -> Result<T, HttpFailure> {
        let mut req = self.agent.post(&self.url);
        if let Some(token) = &self.token {
            req = req.header("Authorization", format!("Bearer {token}"));
        }
        let resp = req.send_json(body).map_err(classify)?;
        resp.into_body().read_json::<T>().map_err(|e| HttpFailure {
            retryable: false,
            message: format!("undecodable response body: {e}"),
        })
    }
}

fn classify(e: ureq::Error) -> HttpFailure {
    let retryable = match &e {
        ureq::Error::StatusCode(code) => *code == 429 || *code >= 500,
        _ => true,
    };
    HttpFailure {
        retryable,
        message: e.to_string(),
    }
}

/// Read a bearer token from the environment variable named in config.
pub(crate) fn token_from_env(var: Option<&str>) -> Result<Option<String>, String> {
    match var {
        None => Ok(None),
        Some(name) => std::env::var(name)
            .map(Some)
            .map_err(|_| format!("environment variable {name} is not set")),
    }
}
