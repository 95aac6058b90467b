//! The engine/model boundary.
//!
//! Any model is reached through the [`Model`] trait. The HTTP client in
//! `nero-net` implements it over the `/v1/describe` + `/v1/infer` wire
//! protocol defined in [`wire`]; the synthetic reference models in
//! [`synthetic`] implement it in-process and can be served over the same
//! protocol.

pub mod synthetic;
pub mod wire;

use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::actions::{InputSample, Modality, ModelOutput};

pub use synthetic::{SyntheticKind, SyntheticModel, SyntheticModelSpec};
pub use wire::{input_hash, PROTOCOL_VERSION};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("request timed out")]
    Timeout,
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("protocol version mismatch: client speaks {expected}, server speaks {got}")]
    Handshake { expected: String, got: String },
    #[error("model serves {got}, expected {expected}")]
    ModalityMismatch { expected: Modality, got: Modality },
    #[error("batch of {got} exceeds max batch {max}")]
    BatchTooLarge { got: usize, max: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("server error {code}: {message}")]
    Server { code: String, message: String },
    #[error("model failed: {0}")]
    Inference(String),
}

impl ModelError {
    /// Whether retrying the same request could succeed.
    pub fn is_transient(&self) -> bool {
        match self {
            ModelError::Transport(_) | ModelError::Timeout => true,
            ModelError::Server { code, .. } => code == "unavailable",
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDescriptor {
    pub name: String,
    pub modality: Modality,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_classes: Option<u32>,
    pub max_batch: usize,
    pub protocol_version: String,
}

impl ModelDescriptor {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.max_batch == 0 {
            return Err(ModelError::Malformed("max_batch must be at least 1".into()));
        }
        if self.protocol_version != PROTOCOL_VERSION {
            return Err(ModelError::Handshake {
                expected: PROTOCOL_VERSION.into(),
                got: self.protocol_version.clone(),
            });
        }
        Ok(())
    }
}

/// A model hypothesis `h`. Implementations must tolerate concurrent calls.
pub trait Model: Send + Sync {
    fn describe(&self) -> Result<ModelDescriptor, ModelError>;

    /// One output per input, in input order.
    fn infer(&self, batch: &[InputSample]) -> Result<Vec<ModelOutput>, ModelError>;
}

impl<M: Model + ?Sized> Model for std::sync::Arc<M> {
    fn describe(&self) -> Result<ModelDescriptor, ModelError> {
        (**self).describe()
    }

    fn infer(&self, batch: &[InputSample]) -> Result<Vec<ModelOutput>, ModelError> {
        (**self).infer(batch)
    }
}

/// Bounded retry with exponential backoff for transient failures.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub retries: u32,
    pub base_delay_ms: u64,
    pub timeout_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            retries: 2,
            base_delay_ms: 100,
            timeout_ms: 30_000,
        }
    }
}

impl RetryPolicy {
    pub fn delay(&self, attempt: u32) -> Duration {
        Duration::from_millis(self.base_delay_ms.saturating_mul(1u64 << attempt.min(16)))
    }

    pub fn run<T>(&self, mut call: impl FnMut() -> Result<T, ModelError>) -> Result<T, ModelError> {
        let mut attempt = 0;
        loop {
            match call() {
                Err(e) if e.is_transient() && attempt < self.retries => {
                    thread::sleep(self.delay(attempt));
                    attempt += 1;
                }
                other => return other,
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::Cell;

    #[test]
    fn retry_stops_on_success_and_on_permanent_errors() {
        let policy = RetryPolicy {
            retries: 3,
            base_delay_ms: 0,
            timeout_ms: 10,
        };
        let calls = Cell::new(0);
        let out = policy.run(|| {
            calls.set(calls.get() + 1);
            if calls.get() < 3 {
                Err(ModelError::Timeout)
            } else {
                Ok(7)
            }
        });
        assert_eq!(out, Ok(7));
        assert_eq!(calls.get(), 3);

        calls.set(0);
        let out: Result<(), _> = policy.run(|| {
            calls.set(calls.get() + 1);
            Err(ModelError::Malformed("x".into()))
        });
        assert!(out.is_err());
        assert_eq!(calls.get(), 1);

        calls.set(0);
        let out: Result<(), _> = policy.run(|| {
            calls.set(calls.get() + 1);
            Err(ModelError::Transport("down".into()))
        });
        assert!(out.is_err());
        assert_eq!(calls.get(), 4);
    }

    #[test]
    fn backoff_doubles() {
        let p = RetryPolicy {
            retries: 3,
            base_delay_ms: 10,
            timeout_ms: 0,
        };
        assert_eq!(p.delay(0), Duration::from_millis(10));
        assert_eq!(p.delay(2), Duration::from_millis(40));
    }

    #[test]
    fn descriptor_validation() {
        let mut d = ModelDescriptor {
            name: "m".into(),
            modality: Modality::ImageClassification,
            num_classes: Some(10),
            max_batch: 4,
            protocol_version: PROTOCOL_VERSION.into(),
        };
        assert!(d.validate().is_ok());
        d.protocol_version = "0".into();
        assert!(matches!(d.validate(), Err(ModelError::Handshake { .. })));
        d.protocol_version = PROTOCOL_VERSION.into();
        d.max_batch = 0;
        assert!(d.validate().is_err());
    }
}
