//! JSON bodies of the `/v1/logits` HTTP protocol.

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::{BackendError, OracleRequest, PromptKind, TokenLogits};

const PNG_SIGNATURE: &[u8] = b"\x89PNG\r\n\x1a\n";

pub const LOGITS_PATH: &str = "/v1/logits";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitsRequest {
    pub prompt_kind: String,
    pub prompt: String,
    /// Base64 (standard alphabet, padded) PNG bytes, in prompt order.
    pub images: Vec<String>,
    pub candidate_tokens: [String; 2],
}

impl LogitsRequest {
    pub fn from_request(req: &OracleRequest<'_>) -> Self {
        let [a, b] = req.candidate_tokens();
        Self {
            prompt_kind: req.kind().as_str().to_owned(),
            prompt: req.prompt().to_owned(),
            images: req.images().iter().map(|i| STANDARD.encode(i.png())).collect(),
            candidate_tokens: [a.to_owned(), b.to_owned()],
        }
    }

    /// Decoded PNG bytes of every image.
    pub fn decode_images(&self) -> Result<Vec<Vec<u8>>, base64::DecodeError> {
        self.images.iter().map(|s| STANDARD.decode(s)).collect()
    }

    /// Server-side conformance check. The kind must be an exact wire name
    /// and the prompt, image count and tokens must match it.
    pub fn validate(&self) -> Result<PromptKind, String> {
        let kind = PromptKind::ALL
            .into_iter()
            .find(|k| k.as_str() == self.prompt_kind)
            .ok_or_else(|| format!("unknown prompt_kind `{}`", self.prompt_kind))?;
        if self.prompt != kind.template() {
            return Err(format!("prompt does not match the `{kind}` template"));
        }
        if self.images.len() != kind.image_count() {
            return Err(format!(
                "`{kind}` takes {} image(s), got {}",
                kind.image_count(),
                self.images.len()
            ));
        }
        if self.candidate_tokens != kind.candidate_tokens() {
            return Err(format!(
                "candidate_tokens must be {:?} for `{kind}`",
                kind.candidate_tokens()
            ));
        }
        for (i, bytes) in self.decode_images().map_err(|e| format!("invalid base64: {e}"))?.iter().enumerate() {
            if !bytes.starts_with(PNG_SIGNATURE) {
                return Err(format!("image {i} is not a PNG"));
            }
        }
        Ok(kind)
    }
}

/// Why a request body was rejected, with the HTTP status a server should use.
#[derive(Debug, Clone, PartialEq)]
pub struct Rejection {
    pub status: u16,
    pub message: String,
}

/// Parses and validates a request body. Syntax and shape errors map to 400,
/// well-formed bodies that violate the protocol to 422.
pub fn parse_request(body: &str) -> Result<(PromptKind, LogitsRequest), Rejection> {
    let req: LogitsRequest = serde_json::from_str(body).map_err(|e| Rejection {
        status: 400,
        message: format!("malformed request body: {e}"),
    })?;
    let kind = req.validate().map_err(|message| Rejection { status: 422, message })?;
    Ok((kind, req))
}

/// Success body. `logits` is kept as a list so arity can be checked.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitsResponse {
    pub logits: Vec<f64>,
    #[serde(default)]
    pub model_id: String,
}

impl LogitsResponse {
    pub fn to_logits(&self) -> Result<TokenLogits, BackendError> {
        match self.logits.as_slice() {
            [a, b] => TokenLogits::new(*a, *b),
            other => Err(BackendError::Protocol(format!(
                "expected 2 logits, got {}",
                other.len()
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorResponse {
    pub error: String,
}

/// Parses a success body.
pub fn parse_response(body: &str) -> Result<TokenLogits, BackendError> {
    let resp: LogitsResponse = serde_json::from_str(body)
        .map_err(|e| BackendError::Protocol(format!("malformed response body: {e}")))?;
    resp.to_logits()
}

/// Extracts the message of an error body, falling back to the raw text.
pub fn error_message(body: &str) -> String {
    serde_json::from_str::<ErrorResponse>(body)
        .map(|e| e.error)
        .unwrap_or_else(|_| body.trim().to_owned())
}
