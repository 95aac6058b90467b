//! Gap metrics between a model output `h(x')` and a reference `y'`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::actions::{BBox, FlowField, GroundTruth, ModelOutput};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("metric {metric} cannot compare {output} with {truth}")]
    Incompatible {
        metric: MetricName,
        output: &'static str,
        truth: &'static str,
    },
    #[error("flow shapes differ: {0}x{1} vs {2}x{3}")]
    ShapeMismatch(usize, usize, usize, usize),
    #[error("label {label} out of range for {len} probabilities")]
    LabelOutOfRange { label: u32, len: usize },
    #[error("unknown metric {0:?}; expected confidence, correct, detection_iou or rmse")]
    Unknown(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    HigherIsBetter,
    LowerIsBetter,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricName {
    Confidence,
    Correct,
    DetectionIou,
    Rmse,
}

impl MetricName {
    pub fn polarity(self) -> Polarity {
        match self {
            MetricName::Rmse => Polarity::LowerIsBetter,
            _ => Polarity::HigherIsBetter,
        }
    }

    /// Value attained by a perfectly equivariant model.
    pub fn perfect(self) -> f64 {
        match self {
            MetricName::Rmse => 0.0,
            _ => 1.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            MetricName::Confidence => "confidence",
            MetricName::Correct => "correct",
            MetricName::DetectionIou => "detection_iou",
            MetricName::Rmse => "rmse",
        }
    }
}

impl fmt::Display for MetricName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MetricName {
    type Err = MetricError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "confidence" => MetricName::Confidence,
            "correct" => MetricName::Correct,
            "detection_iou" => MetricName::DetectionIou,
            "rmse" => MetricName::Rmse,
            other => return Err(MetricError::Unknown(other.to_string())),
        })
    }
}

/// A row-major per-location grid of reals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocationMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricValue {
    /// NaN when undefined (e.g. inference failed).
    pub value: f64,
    pub map: Option<LocationMap>,
    pub polarity: Polarity,
}

impl MetricValue {
    pub fn scalar(value: f64, polarity: Polarity) -> MetricValue {
        MetricValue {
            value,
            map: None,
            polarity,
        }
    }

    pub fn missing(polarity: Polarity) -> MetricValue {
        Self::scalar(f64::NAN, polarity)
    }
}

fn check_label(p: &[f64], y: u32) -> Result<usize, MetricError> {
    let i = y as usize;
    if i >= p.len() {
        return Err(MetricError::LabelOutOfRange {
            label: y,
            len: p.len(),
        });
    }
    Ok(i)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in p.iter().enumerate() {
        if *v > p[best] {
            best = i;
        }
    }
    best
}

/// Probability assigned to the true class.
pub fn confidence(p: &[f64], y: u32) -> Result<MetricValue, MetricError> {
    let i = check_label(p, y)?;
    Ok(MetricValue::scalar(p[i], Polarity::HigherIsBetter))
}

/// 1 when the arg-max class is the true class, else 0.
pub fn correct(p: &[f64], y: u32) -> Result<MetricValue, MetricError> {
    let i = check_label(p, y)?;
    let v = if argmax(p) == i { 1.0 } else { 0.0 };
    Ok(MetricValue::scalar(v, Polarity::HigherIsBetter))
}

/// Intersection over union in continuous coordinates.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.xmax.min(b.xmax) - a.xmin.max(b.xmin)).max(0.0);
    let ih = (a.ymax.min(b.ymax) - a.ymin.max(b.ymin)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// IOU of the single most-confident detection against `y`; 0 with no detections.
pub fn detection_iou(output: &ModelOutput, y: &BBox) -> MetricValue {
    let v = output.top_detection().map_or(0.0, |d| iou(&d.bbox, y));
    MetricValue::scalar(v, Polarity::HigherIsBetter)
}

/// Root-mean-square vector error. The map holds per-pixel error magnitudes,
/// so the scalar equals `sqrt(mean(map²))`.
pub fn rmse(pred: &FlowField, gt: &FlowField) -> Result<MetricValue, MetricError> {
    if !pred.same_shape(gt) {
        return Err(MetricError::ShapeMismatch(
            pred.width, pred.height, gt.width, gt.height,
        ));
    }
    let map: Vec<f64> = pred
        .data
        .iter()
        .zip(&gt.data)
        .map(|(p, g)| ((p[0] - g[0]).powi(2) + (p[1] - g[1]).powi(2)).sqrt())
        .collect();
    let mean_sq = map.iter().map(|e| e * e).sum::<f64>() / map.len() as f64;
    Ok(MetricValue {
        value: mean_sq.sqrt(),
        map: Some(LocationMap {
            width: pred.width,
            height: pred.height,
            data: map,
        }),
        polarity: Polarity::LowerIsBetter,
    })
}

/// Evaluates `metric` on a model output against a (transformed) reference.
pub fn evaluate(
    metric: MetricName,
    output: &ModelOutput,
    truth: &GroundTruth,
) -> Result<MetricValue, MetricError> {
    match (metric, output, truth) {
        (MetricName::Confidence, ModelOutput::ClassProbs { probs }, GroundTruth::ClassLabel { index, .. }) => {
            confidence(probs, *index)
        }
        (MetricName::Correct, ModelOutput::ClassProbs { probs }, GroundTruth::ClassLabel { index, .. }) => {
            correct(probs, *index)
        }
        (MetricName::DetectionIou, ModelOutput::Detections { .. }, GroundTruth::BBox { bbox }) => {
            Ok(detection_iou(output, bbox))
        }
        (MetricName::Rmse, ModelOutput::FlowField { flow }, GroundTruth::FlowField { flow: gt }) => {
            rmse(flow, gt)
        }
        _ => Err(MetricError::Incompatible {
            metric,
            output: output.kind_name(),
            truth: match truth {
                GroundTruth::ClassLabel { .. } => "class_label",
                GroundTruth::BBox { .. } => "bbox",
                GroundTruth::FlowField { .. } => "flow_field",
            },
        }),
    }
}
