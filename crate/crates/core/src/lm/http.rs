//! Client for an external scorer speaking the `/v1/score` protocol.
//!
//! Request: `POST /v1/score` with `{"prompt": str, "continuations": [str]}`.
//! Response: `{"token_logprobs": [[number]]}`, one list per continuation.
//! Any non-200 status is a transport error.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{ScoringBackend, TokenLogProbs, Vocabulary};
use crate::error::{Error, Result};

pub const ENV_URL: &str = "AUTFEW_BACKEND_URL";
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Serialize)]
pub struct ScoreRequest<'a> {
    pub prompt: &'a str,
    pub continuations: &'a [&'a str],
}

#[derive(Debug, Deserialize, Serialize)]
pub struct ScoreResponse {
    pub token_logprobs: Vec<Vec<f64>>,
}

pub struct HttpBackend {
    endpoint: String,
    agent: ureq::Agent,
    retries: u32,
    vocab: Option<Vocabulary>,
}

impl HttpBackend {
    /// `base_url` is the server root, e.g. `http://127.0.0.1:8080`.
    pub fn new(base_url: &str, timeout: Duration) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        HttpBackend {
            endpoint: format!("{}/v1/score", base_url.trim_end_matches('/')),
            agent,
            retries: 2,
            vocab: None,
        }
    }

    /// Build from `AUTFEW_BACKEND_URL`.
    pub fn from_env() -> Result<Self> {
        let url = std::env::var(ENV_URL)
            .map_err(|_| Error::Validation(format!("{ENV_URL} is not set")))?;
        Ok(Self::new(&url, DEFAULT_TIMEOUT))
    }

    pub fn with_retries(mut self, retries: u32) -> Self {
        self.retries = retries;
        self
    }

    /// Vocabulary used for next-token search (template-tailored choices).
    pub fn with_vocabulary(mut self, vocab: Vocabulary) -> Self {
        self.vocab = Some(vocab);
        self
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    fn post_once(&self, req: &ScoreRequest<'_>) -> std::result::Result<ScoreResponse, (bool, String)> {
        let mut resp = self
            .agent
            .post(&self.endpoint)
            .send_json(req)
            .map_err(|e| (true, e.to_string()))?;
        let status = resp.status();
        if status != 200 {
            // Server errors may be transient; client errors are not.
            return Err((status.is_server_error(), format!("HTTP status {status}")));
        }
        resp.body_mut()
            .read_json::<ScoreResponse>()
            .map_err(|e| (false, format!("bad response body: {e}")))
    }
}

impl ScoringBackend for HttpBackend {
    fn score_batch(&self, prompt: &str, continuations: &[&str]) -> Result<Vec<TokenLogProbs>> {
        if let Some(c) = continuations.iter().find(|c| c.trim().is_empty()) {
            return Err(Error::contract(format!("continuation {c:?} has no tokens")));
        }
        let req = ScoreRequest {
            prompt,
            continuations,
        };
        let mut attempt = 0;
        let resp = loop {
            match self.post_once(&req) {
                Ok(r) => break r,
                Err((retryable, message)) => {
                    if !retryable || attempt >= self.retries {
                        return Err(Error::Transport {
                            retries: attempt,
                            message,
                        });
                    }
                    attempt += 1;
                    log::warn!("scoring request failed ({message}); retry {attempt}/{}", self.retries);
                }
            }
        };
        if resp.token_logprobs.len() != continuations.len() {
            return Err(Error::Transport {
                retries: attempt,
                message: format!(
                    "expected {} score lists, got {}",
                    continuations.len(),
                    resp.token_logprobs.len()
                ),
            });
        }
        resp.token_logprobs
            .into_iter()
            .map(|lps| {
                if lps.is_empty() || lps.iter().any(|&x| !(x <= 0.0)) {
                    Err(Error::Transport {
                        retries: attempt,
                        message: format!("invalid token log-probabilities {lps:?}"),
                    })
                } else {
                    Ok(TokenLogProbs(lps))
                }
            })
            .collect()
    }

    fn vocabulary(&self) -> Option<&Vocabulary> {
        self.vocab.as_ref()
    }
}
