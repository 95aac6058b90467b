//! Per-(sample, orbit element) detail payloads for the viewer.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::actions::{act_output, BBox, GroundTruth, InputSample, ModelOutput};
use crate::engine::NeroResult;
use crate::groups::GroupElement;
use crate::metrics::{argmax, evaluate, iou, LocationMap};
use crate::tensor::nullable_f64;

#[derive(Debug, Error, PartialEq)]
pub enum DetailError {
    #[error("unknown sample {0:?}")]
    UnknownSample(String),
    #[error("orbit index {index} out of range (orbit has {len} elements)")]
    UnknownIndex { index: usize, len: usize },
    #[error("{0}")]
    Action(String),
}

/// Where the output in a detail payload came from.
#[derive(Debug, Clone, PartialEq)]
pub enum LiveOutput {
    /// No endpoint configured; serve the output stored with the run.
    Cached,
    Live(ModelOutput),
    /// The endpoint was configured but the call failed.
    Unavailable(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    pub bbox: BBox,
    pub confidence: f64,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DetailBody {
    Classification {
        probs: Vec<f64>,
        predicted: usize,
        true_label: u32,
    },
    Detection {
        boxes: Vec<ScoredBox>,
        /// Index of the most confident box, the one the metric scores.
        top: Option<usize>,
        truth: BBox,
    },
    Flow {
        error_map: LocationMap,
        #[serde(with = "nullable_f64")]
        rmse: f64,
    },
    /// No output for this element (inference failed and nothing live).
    Missing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetailView {
    pub run_id: String,
    pub sample_id: String,
    pub orbit_index: usize,
    pub element: GroupElement,
    pub label: String,
    /// Stored metric value at this element.
    #[serde(with = "nullable_f64")]
    pub value: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Reference moved by the element, as scored.
    pub truth: GroundTruth,
    pub output: Option<ModelOutput>,
    pub live: bool,
    /// A live recomputation was requested but failed; cached data shown.
    pub stale: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub live_error: Option<String>,
    pub body: DetailBody,
    /// The transformed input, when the dataset is available.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input: Option<InputSample>,
}

fn body(output: Option<&ModelOutput>, truth: &GroundTruth) -> DetailBody {
    match (output, truth) {
        (Some(ModelOutput::ClassProbs { probs }), GroundTruth::ClassLabel { index, .. }) => {
            DetailBody::Classification {
                probs: probs.clone(),
                predicted: argmax(probs),
                true_label: *index,
            }
        }
        (Some(ModelOutput::Detections { detections }), GroundTruth::BBox { bbox }) => {
            let confidences: Vec<f64> = detections.iter().map(|d| d.confidence).collect();
            DetailBody::Detection {
                boxes: detections
                    .iter()
                    .map(|d| ScoredBox {
                        bbox: d.bbox,
                        confidence: d.confidence,
                        iou: iou(&d.bbox, bbox),
                    })
                    .collect(),
                top: (!detections.is_empty()).then(|| argmax(&confidences)),
                truth: *bbox,
            }
        }
        (Some(out @ ModelOutput::FlowField { .. }), GroundTruth::FlowField { .. }) => {
            match evaluate(crate::metrics::MetricName::Rmse, out, truth) {
                Ok(v) => DetailBody::Flow {
                    error_map: v.map.expect("rmse has a map"),
                    rmse: v.value,
                },
                Err(_) => DetailBody::Missing,
            }
        }
        _ => DetailBody::Missing,
    }
}

pub fn detail_view(
    result: &NeroResult,
    sample_id: &str,
    orbit_index: usize,
    live: LiveOutput,
) -> Result<DetailView, DetailError> {
    let record = result
        .record(sample_id)
        .ok_or_else(|| DetailError::UnknownSample(sample_id.to_string()))?;
    let g = result
        .orbit
        .elements
        .get(orbit_index)
        .ok_or(DetailError::UnknownIndex {
            index: orbit_index,
            len: result.orbit.len(),
        })?;
    let truth = act_output(g, &record.truth).map_err(|e| DetailError::Action(e.to_string()))?;
    let cached = record.outputs.get(orbit_index).cloned().flatten();
    let (output, is_live, stale, live_error) = match live {
        LiveOutput::Cached => (cached, false, false, None),
        LiveOutput::Live(o) => (Some(o), true, false, None),
        LiveOutput::Unavailable(msg) => (cached, false, true, Some(msg)),
    };
    let error = record
        .errors
        .iter()
        .find(|e| e.index.is_none_or(|i| i == orbit_index))
        .map(|e| e.message.clone());
    Ok(DetailView {
        run_id: result.run_id.clone(),
        sample_id: sample_id.to_string(),
        orbit_index,
        element: *g,
        label: g.label(),
        value: record.values[orbit_index],
        error,
        body: body(output.as_ref(), &truth),
        truth,
        output,
        live: is_live,
        stale,
        live_error,
        input: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::actions::Detection;
    use crate::persist::results::tests::sample_result;

    #[test]
    fn classification_from_cache() {
        let r = sample_result();
        let d = detail_view(&r, "a", 2, LiveOutput::Cached).unwrap();
        assert!(!d.live && !d.stale);
        assert_eq!(d.label, r.orbit.elements[2].label());
        match d.body {
            DetailBody::Classification { predicted, true_label, ref probs } => {
                assert_eq!((predicted, true_label), (6, 6));
                assert_eq!(probs.len(), 10);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn failed_element_is_missing_and_reports_error() {
        let r = sample_result();
        let d = detail_view(&r, "b", 1, LiveOutput::Cached).unwrap();
        assert_eq!(d.body, DetailBody::Missing);
        assert_eq!(d.error.as_deref(), Some("boom"));
        assert!(d.value.is_nan());
        let ok = detail_view(&r, "b", 0, LiveOutput::Cached).unwrap();
        assert_eq!(ok.error, None);
    }

    #[test]
    fn live_and_stale_flags() {
        let r = sample_result();
        let mut probs = vec![0.0; 10];
        probs[3] = 1.0;
        let live = detail_view(&r, "a", 0, LiveOutput::Live(ModelOutput::ClassProbs { probs })).unwrap();
        assert!(live.live && !live.stale);
        assert!(matches!(live.body, DetailBody::Classification { predicted: 3, .. }));
        let stale = detail_view(&r, "a", 0, LiveOutput::Unavailable("refused".into())).unwrap();
        assert!(!stale.live && stale.stale);
        assert_eq!(stale.output, r.records[0].outputs[0]);
    }

    #[test]
    fn unknown_ids() {
        let r = sample_result();
        assert_eq!(
            detail_view(&r, "zzz", 0, LiveOutput::Cached).unwrap_err(),
            DetailError::UnknownSample("zzz".into())
        );
        assert!(matches!(
            detail_view(&r, "a", 4, LiveOutput::Cached),
            Err(DetailError::UnknownIndex { index: 4, len: 4 })
        ));
    }

    #[test]
    fn detection_boxes_scored_against_moved_truth() {
        let truth = BBox::new(0.0, 0.0, 10.0, 10.0);
        let out = ModelOutput::Detections {
            detections: vec![
                Detection { bbox: BBox::new(0.0, 0.0, 10.0, 5.0), confidence: 0.4 },
                Detection { bbox: BBox::new(0.0, 0.0, 10.0, 10.0), confidence: 0.9 },
                Detection { bbox: BBox::new(20.0, 20.0, 30.0, 30.0), confidence: 0.9 },
            ],
        };
        match body(Some(&out), &GroundTruth::BBox { bbox: truth }) {
            DetailBody::Detection { boxes, top, .. } => {
                assert_eq!(top, Some(1));
                let ious: Vec<f64> = boxes.iter().map(|b| b.iou).collect();
                assert_eq!(ious, vec![0.5, 1.0, 0.0]);
            }
            other => panic!("{other:?}"),
        }
    }
}
