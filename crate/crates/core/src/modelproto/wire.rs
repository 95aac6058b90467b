//! JSON wire schema for the model protocol.
//!
//! ```text
//! GET  /v1/describe  -> ModelDescriptor
//! POST /v1/infer     InferRequest -> InferResponse | ErrorEnvelope
//! ```
//!
//! Inputs and flow fields travel as `f32` tensors (see [`crate::tensor`]):
//! images `[H, W, C]`, image pairs `[2, H, W, C]`, point clouds `[N, 3]`,
//! flow fields `[H, W, 2]`. Probabilities, boxes and confidences are plain
//! JSON numbers.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::actions::{BBox, Detection, FlowField, Image, InputData, InputSample, ModelOutput, PointCloud};
use crate::tensor::Tensor;

use super::{ModelDescriptor, ModelError};

pub const PROTOCOL_VERSION: &str = "1";
pub const REQUEST_ID_HEADER: &str = "x-request-id";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireInput {
    pub id: String,
    /// `image`, `image_pair` or `point_cloud`.
    pub kind: String,
    pub tensor: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferRequest {
    pub protocol_version: String,
    pub request_id: String,
    pub inputs: Vec<WireInput>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireDetection {
    /// `[xmin, ymin, xmax, ymax]` in pixels.
    pub bbox: [f64; 4],
    pub confidence: f64,
    #[serde(default)]
    pub class_index: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WireOutput {
    ClassProbs { probs: Vec<f64> },
    Detections { detections: Vec<WireDetection> },
    FlowField { tensor: Tensor },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferResponse {
    pub protocol_version: String,
    pub request_id: String,
    pub outputs: Vec<WireOutput>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorEnvelope {
    pub error: ErrorBody,
}

impl ErrorEnvelope {
    pub fn new(code: &str, message: impl Into<String>) -> ErrorEnvelope {
        ErrorEnvelope {
            error: ErrorBody {
                code: code.to_string(),
                message: message.into(),
            },
        }
    }

    /// Wire error for a model-side failure.
    pub fn from_model_error(e: &ModelError) -> ErrorEnvelope {
        let code = match e {
            ModelError::BatchTooLarge { .. } => "batch_too_large",
            ModelError::EmptyBatch => "empty_batch",
            ModelError::Handshake { .. } => "unsupported_version",
            ModelError::ModalityMismatch { .. } => "modality_mismatch",
            ModelError::Malformed(_) => "bad_request",
            ModelError::Server { code, .. } => code.as_str(),
            ModelError::Transport(_) | ModelError::Timeout => "unavailable",
            ModelError::Inference(_) => "model_error",
        };
        ErrorEnvelope::new(code, e.to_string())
    }

    pub fn into_model_error(self) -> ModelError {
        ModelError::Server {
            code: self.error.code,
            message: self.error.message,
        }
    }
}

fn image_tensor(images: &[&Image]) -> Tensor {
    let im = images[0];
    let mut shape = im.tensor_shape();
    let mut flat = Vec::with_capacity(im.data.len() * images.len());
    for i in images {
        flat.extend_from_slice(&i.data);
    }
    if images.len() > 1 {
        shape.insert(0, images.len());
    }
    Tensor::f32(shape, &flat)
}

pub fn encode_input(x: &InputSample) -> WireInput {
    let tensor = match &x.data {
        InputData::Image { image } => image_tensor(&[image]),
        InputData::ImagePair { first, second } => image_tensor(&[first, second]),
        InputData::PointCloud { points } => Tensor::f32(vec![points.0.len(), 3], &points.flat()),
    };
    WireInput {
        id: x.id.clone(),
        kind: x.kind_name().to_string(),
        tensor,
    }
}

pub fn decode_input(w: &WireInput) -> Result<InputSample, ModelError> {
    let bad = |m: String| ModelError::Malformed(format!("input {}: {m}", w.id));
    let data = match w.kind.as_str() {
        "image" => InputData::Image {
            image: Image::from_tensor(&w.tensor).map_err(bad)?,
        },
        "image_pair" => {
            w.tensor
                .expect_shape(&[Some(2), None, None, None])
                .map_err(|e| bad(e.to_string()))?;
            let flat = w.tensor.decode().map_err(|e| bad(e.to_string()))?;
            let (h, wd, c) = (w.tensor.shape[1], w.tensor.shape[2], w.tensor.shape[3]);
            if h == 0 || wd == 0 || c == 0 {
                return Err(bad("image dimensions must be positive".into()));
            }
            let half = h * wd * c;
            InputData::ImagePair {
                first: Image::new(wd, h, c, flat[..half].to_vec()),
                second: Image::new(wd, h, c, flat[half..].to_vec()),
            }
        }
        "point_cloud" => InputData::PointCloud {
            points: PointCloud::from_tensor(&w.tensor).map_err(bad)?,
        },
        other => return Err(bad(format!("unknown input kind {other:?}"))),
    };
    let x = InputSample {
        id: w.id.clone(),
        data,
    };
    x.validate().map_err(ModelError::Malformed)?;
    Ok(x)
}

pub fn encode_output(y: &ModelOutput) -> WireOutput {
    match y {
        ModelOutput::ClassProbs { probs } => WireOutput::ClassProbs { probs: probs.clone() },
        ModelOutput::Detections { detections } => WireOutput::Detections {
            detections: detections
                .iter()
                .map(|d| WireDetection {
                    bbox: [d.bbox.xmin, d.bbox.ymin, d.bbox.xmax, d.bbox.ymax],
                    confidence: d.confidence,
                    class_index: d.bbox.class_index,
                })
                .collect(),
        },
        ModelOutput::FlowField { flow } => WireOutput::FlowField {
            tensor: Tensor::f32(vec![flow.height, flow.width, 2], &flow.flat()),
        },
    }
}

pub fn decode_output(w: &WireOutput) -> Result<ModelOutput, ModelError> {
    let y = match w {
        WireOutput::ClassProbs { probs } => ModelOutput::ClassProbs { probs: probs.clone() },
        WireOutput::Detections { detections } => ModelOutput::Detections {
            detections: detections
                .iter()
                .map(|d| Detection {
                    bbox: BBox::new(d.bbox[0], d.bbox[1], d.bbox[2], d.bbox[3]).with_class(d.class_index),
                    confidence: d.confidence,
                })
                .collect(),
        },
        WireOutput::FlowField { tensor } => ModelOutput::FlowField {
            flow: FlowField::from_tensor(tensor).map_err(ModelError::Malformed)?,
        },
    };
    y.validate().map_err(ModelError::Malformed)?;
    Ok(y)
}

pub fn encode_request(request_id: &str, batch: &[InputSample]) -> InferRequest {
    InferRequest {
        protocol_version: PROTOCOL_VERSION.into(),
        request_id: request_id.to_string(),
        inputs: batch.iter().map(encode_input).collect(),
    }
}

/// Decodes a response and checks it answers `batch_len` inputs.
pub fn decode_response(resp: &InferResponse, batch_len: usize) -> Result<Vec<ModelOutput>, ModelError> {
    if resp.protocol_version != PROTOCOL_VERSION {
        return Err(ModelError::Handshake {
            expected: PROTOCOL_VERSION.into(),
            got: resp.protocol_version.clone(),
        });
    }
    if resp.outputs.len() != batch_len {
        return Err(ModelError::Malformed(format!(
            "{} outputs for {batch_len} inputs",
            resp.outputs.len()
        )));
    }
    resp.outputs.iter().map(decode_output).collect()
}

/// Server-side request handling shared by every transport: validates the
/// request against the descriptor, runs the model, encodes the outputs.
pub fn serve_request(
    model: &dyn super::Model,
    descriptor: &ModelDescriptor,
    req: &InferRequest,
) -> Result<InferResponse, ErrorEnvelope> {
    if req.protocol_version != PROTOCOL_VERSION {
        return Err(ErrorEnvelope::new(
            "unsupported_version",
            format!(
                "server speaks protocol {PROTOCOL_VERSION}, request uses {}",
                req.protocol_version
            ),
        ));
    }
    if req.inputs.is_empty() {
        return Err(ErrorEnvelope::from_model_error(&ModelError::EmptyBatch));
    }
    if req.inputs.len() > descriptor.max_batch {
        return Err(ErrorEnvelope::from_model_error(&ModelError::BatchTooLarge {
            got: req.inputs.len(),
            max: descriptor.max_batch,
        }));
    }
    let batch = req
        .inputs
        .iter()
        .map(decode_input)
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| ErrorEnvelope::from_model_error(&e))?;
    if let Some(x) = batch.iter().find(|x| !descriptor.modality.accepts_input(x)) {
        return Err(ErrorEnvelope::new(
            "modality_mismatch",
            format!("{} model cannot take a {} input", descriptor.modality, x.kind_name()),
        ));
    }
    let outputs = model
        .infer(&batch)
        .map_err(|e| ErrorEnvelope::from_model_error(&e))?;
    Ok(InferResponse {
        protocol_version: PROTOCOL_VERSION.into(),
        request_id: req.request_id.clone(),
        outputs: outputs.iter().map(encode_output).collect(),
    })
}

/// Content hash of an input as it appears on the wire (kind, shape and the
/// `f32` payload). Inputs that encode identically hash identically, so an
/// in-process input and its HTTP-decoded copy share a hash.
pub fn input_hash(x: &InputSample) -> String {
    let w = encode_input(x);
    let mut h = Sha256::new();
    h.update(w.kind.as_bytes());
    for d in &w.tensor.shape {
        h.update((*d as u64).to_le_bytes());
    }
    h.update(w.tensor.data.as_bytes());
    hex::encode(&h.finalize()[..16])
}

fn json<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("fixture serializes")
}

/// Canonical request/response pairs for protocol conformance tests.
pub fn golden_fixtures() -> Vec<(&'static str, serde_json::Value)> {
    let image = Image::new(2, 2, 1, vec![0.0, 0.25, 0.5, 1.0]);
    let flow = FlowField::new(2, 1, vec![[1.0, 0.0], [0.0, -0.5]]);
    let descriptor = ModelDescriptor {
        name: "golden".into(),
        modality: crate::actions::Modality::ImageClassification,
        num_classes: Some(3),
        max_batch: 8,
        protocol_version: PROTOCOL_VERSION.into(),
    };
    let req = encode_request(
        "golden-0001",
        &[
            InputSample::image("img-0", image.clone()),
            InputSample::pair("pair-0", image.clone(), image),
            InputSample::cloud("cloud-0", vec![[0.0, 0.0, 0.0], [1.0, -1.0, 0.5]]),
        ],
    );
    let resp = InferResponse {
        protocol_version: PROTOCOL_VERSION.into(),
        request_id: "golden-0001".into(),
        outputs: vec![
            encode_output(&ModelOutput::ClassProbs {
                probs: vec![0.5, 0.25, 0.25],
            }),
            encode_output(&ModelOutput::Detections {
                detections: vec![Detection {
                    bbox: BBox::new(1.0, 2.0, 11.0, 12.0).with_class(4),
                    confidence: 0.75,
                }],
            }),
            encode_output(&ModelOutput::FlowField { flow }),
        ],
    };
    vec![
        ("describe_response", json(&descriptor)),
        ("infer_request", json(&req)),
        ("infer_response", json(&resp)),
        (
            "error_batch_too_large",
            json(&ErrorEnvelope::from_model_error(&ModelError::BatchTooLarge { got: 9, max: 8 })),
        ),
        (
            "error_unsupported_version",
            json(&ErrorEnvelope::new("unsupported_version", "server speaks protocol 1, request uses 0")),
        ),
    ]
}
