use std::thread;
use std::time::Duration;

use super::wire::{error_message, parse_response, LogitsRequest, LOGITS_PATH};
use super::{BackendError, OracleBackend, OracleRequest, TokenLogits};

/// Retry schedule for transport failures and 5xx responses.
#[derive(Debug, Clone, PartialEq)]
pub struct RetryPolicy {
    /// Retries after the first attempt.
    pub retries: u32,
    /// Wait before the first retry; doubled for each later retry.
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            retries: 3,
            base_delay: Duration::from_millis(500),
        }
    }
}

impl RetryPolicy {
    pub fn none() -> Self {
        Self {
            retries: 0,
            base_delay: Duration::ZERO,
        }
    }

    /// Delay before retry number `n` (0-based).
    pub fn delay(&self, n: u32) -> Duration {
        self.base_delay.saturating_mul(1u32 << n.min(16))
    }
}

/// Client for a logits server speaking the `/v1/logits` JSON protocol.
pub struct HttpBackend {
    url: String,
    id: String,
    agent: ureq::Agent,
    retry: RetryPolicy,
}

impl HttpBackend {
    /// `endpoint` is the server base URL, e.g. `http://127.0.0.1:8000`.
    /// `model_id` names the served model and becomes part of the backend id.
    pub fn new(endpoint: &str, model_id: &str) -> Result<Self, BackendError> {
        let base = endpoint.trim_end_matches('/');
        if !(base.starts_with("http://") || base.starts_with("https://")) {
            return Err(BackendError::Transport(format!(
                "endpoint must be an http(s) URL, got `{endpoint}`"
            )));
        }
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(300)))
            .build()
            .into();
        Ok(Self {
            url: format!("{base}{LOGITS_PATH}"),
            id: format!("http:{base}#{model_id}"),
            agent,
            retry: RetryPolicy::default(),
        })
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn url(&self) -> &str {
        &self.url
    }

    fn attempt(&self, body: &str) -> Result<TokenLogits, BackendError> {
        let mut resp = self
            .agent
            .post(&self.url)
            .header("Content-Type", "application/json; charset=utf-8")
            .send(body)
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| BackendError::Transport(format!("reading response body: {e}")))?;
        if (200..300).contains(&status) {
            parse_response(&text)
        } else {
            Err(BackendError::Remote {
                status,
                message: error_message(&text),
            })
        }
    }
}

fn retryable(err: &BackendError) -> bool {
    match err {
        BackendError::Transport(_) => true,
        BackendError::Remote { status, .. } => *status >= 500,
        _ => false,
    }
}

impl OracleBackend for HttpBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn query(&self, req: &OracleRequest<'_>) -> Result<TokenLogits, BackendError> {
        let body = serde_json::to_string(&LogitsRequest::from_request(req))
            .map_err(|e| BackendError::Protocol(e.to_string()))?;
        let mut n = 0;
        loop {
            match self.attempt(&body) {
                Err(e) if retryable(&e) && n < self.retry.retries => {
                    let wait = self.retry.delay(n);
                    log::warn!("{} failed ({e}); retrying in {wait:?}", self.url);
                    thread::sleep(wait);
                    n += 1;
                }
                other => return other,
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_schedule() {
        let p = RetryPolicy::default();
        assert_eq!(p.retries, 3);
        let waits: Vec<_> = (0..3).map(|n| p.delay(n).as_millis()).collect();
        assert_eq!(waits, vec![500, 1000, 2000]);
    }

    #[test]
    fn endpoint_validation() {
        assert!(HttpBackend::new("localhost:80", "m").is_err());
        let b = HttpBackend::new("http://127.0.0.1:9/", "m").unwrap();
        assert_eq!(b.url(), "http://127.0.0.1:9/v1/logits");
        assert_eq!(b.id(), "http:http://127.0.0.1:9#m");
    }

    #[test]
    fn retry_classes() {
        assert!(retryable(&BackendError::Transport("x".into())));
        assert!(retryable(&BackendError::Remote {
            status: 503,
            message: String::new()
        }));
        assert!(!retryable(&BackendError::Remote {
            status: 422,
            message: String::new()
        }));
        assert!(!retryable(&BackendError::Protocol("x".into())));
    }
}
