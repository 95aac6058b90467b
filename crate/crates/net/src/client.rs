//! Blocking HTTP client for a remote model.

use std::time::Duration;

use nero_core::actions::{InputSample, ModelOutput};
use nero_core::modelproto::wire::{decode_response, encode_request, ErrorEnvelope, InferResponse, REQUEST_ID_HEADER};
use nero_core::modelproto::{Model, ModelDescriptor, ModelError, RetryPolicy, PROTOCOL_VERSION};
use reqwest::blocking::{Client, Response};
use reqwest::StatusCode;

/// A model behind `GET /v1/describe` and `POST /v1/infer`. The descriptor is
/// fetched once at connect time; a protocol version mismatch fails there.
pub struct HttpModel {
    base: String,
    client: Client,
    policy: RetryPolicy,
    descriptor: ModelDescriptor,
}

fn transport(e: reqwest::Error) -> ModelError {
    if e.is_timeout() {
        ModelError::Timeout
    } else {
        ModelError::Transport(e.to_string())
    }
}

/// Turns a non-2xx reply into a model error, preferring the error envelope.
fn failure(resp: Response) -> ModelError {
    let status = resp.status();
    let body = resp.text().unwrap_or_default();
    match serde_json::from_str::<ErrorEnvelope>(&body) {
        Ok(env) => env.into_model_error(),
        Err(_) if status.is_server_error() => ModelError::Transport(format!("HTTP {status}")),
        Err(_) => ModelError::Malformed(format!("HTTP {status} without an error envelope")),
    }
}

fn parse<T: serde::de::DeserializeOwned>(resp: Response) -> Result<T, ModelError> {
    let body = resp.bytes().map_err(transport)?;
    serde_json::from_slice(&body).map_err(|e| ModelError::Malformed(e.to_string()))
}

impl HttpModel {
    pub fn connect(url: &str, policy: RetryPolicy) -> Result<HttpModel, ModelError> {
        let client = Client::builder()
            .timeout(Duration::from_millis(policy.timeout_ms))
            .build()
            .map_err(transport)?;
        let base = url.trim_end_matches('/').to_string();
        let descriptor: ModelDescriptor = policy.run(|| {
            let resp = client.get(format!("{base}/v1/describe")).send().map_err(transport)?;
            if !resp.status().is_success() {
                return Err(failure(resp));
            }
            parse(resp)
        })?;
        if descriptor.protocol_version != PROTOCOL_VERSION {
            return Err(ModelError::Handshake {
                expected: PROTOCOL_VERSION.into(),
                got: descriptor.protocol_version,
            });
        }
        descriptor.validate()?;
        Ok(HttpModel {
            base,
            client,
            policy,
            descriptor,
        })
    }

    pub fn url(&self) -> &str {
        &self.base
    }

    fn infer_once(&self, request_id: &str, body: &[u8], n: usize) -> Result<Vec<ModelOutput>, ModelError> {
        let resp = self
            .client
            .post(format!("{}/v1/infer", self.base))
            .header(REQUEST_ID_HEADER, request_id)
            .header(reqwest::header::CONTENT_TYPE, "application/json")
            .body(body.to_vec())
            .send()
            .map_err(transport)?;
        if resp.status() != StatusCode::OK {
            return Err(failure(resp));
        }
        let reply: InferResponse = parse(resp)?;
        if reply.request_id != request_id {
            return Err(ModelError::Malformed(format!(
                "response for request {:?}, expected {request_id:?}",
                reply.request_id
            )));
        }
        decode_response(&reply, n)
    }
}

impl Model for HttpModel {
    fn describe(&self) -> Result<ModelDescriptor, ModelError> {
        Ok(self.descriptor.clone())
    }

    fn infer(&self, inputs: &[InputSample]) -> Result<Vec<ModelOutput>, ModelError> {
        if inputs.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        if inputs.len() > self.descriptor.max_batch {
            return Err(ModelError::BatchTooLarge {
                got: inputs.len(),
                max: self.descriptor.max_batch,
            });
        }
        // Same id on every retry: the request is idempotent.
        let request_id = uuid::Uuid::new_v4().to_string();
        let body = serde_json::to_vec(&encode_request(&request_id, inputs)).expect("request serializes");
        self.policy.run(|| self.infer_once(&request_id, &body, inputs.len()))
    }
}
