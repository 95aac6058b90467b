//! In-process reference models with known equivariance behavior.
//!
//! A synthetic model is built against a dataset and an orbit: at setup it
//! applies every orbit element to every sample and records, keyed by the
//! input hash, which `(g, y)` produced that input. Ground truth therefore
//! reaches the model out of band, never through the inputs, and the same
//! model answers identically in-process and behind the HTTP protocol.
//!
//! Kinds:
//! - `oracle`: exactly `φ̃(g, y)` (one-hot probabilities, a single box at
//!   confidence 1, the transformed flow).
//! - `decay`: the oracle degraded by the falloff `f = max(floor, 1 - r / radius)`
//!   of the element's layout radius `r`. Boxes shrink about their center to
//!   IOU `f`; probabilities put `f` on the true class and spread the rest;
//!   flows gain a constant `(1 - f, 0)` error so that RMSE is `1 - f`.
//! - `constant`: ignores the transform. Probabilities are fixed (uniform by
//!   default); boxes and flows are the untransformed ground truth.
//! - `confuser`: a classifier that is right near the identity but, for each
//!   configured label pair, favors the partner label once the rotation
//!   magnitude reaches `threshold` degrees.

use std::collections::HashMap;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{input_hash, Model, ModelDescriptor, ModelError, PROTOCOL_VERSION};
use crate::actions::{act_input, act_output, Detection, GroundTruth, InputSample, Modality, ModelOutput};
use crate::dataprep::Dataset;
use crate::groups::{GroupElement, Orbit};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticKind {
    Oracle,
    Decay,
    Constant,
    Confuser,
}

fn default_floor() -> f64 {
    0.2
}

fn default_pairs() -> Vec<[u32; 2]> {
    vec![[6, 9]]
}

fn default_threshold() -> f64 {
    135.0
}

fn default_confusion() -> f64 {
    0.7
}

fn default_max_batch() -> usize {
    64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticModelSpec {
    pub kind: SyntheticKind,
    /// Decay: lowest falloff value, in `[0, 1]`.
    #[serde(default = "default_floor")]
    pub floor: f64,
    /// Decay: layout radius at which the falloff reaches `floor`
    /// (default: the orbit's largest radius).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub radius: Option<f64>,
    /// Confuser: label pairs swapped beyond the threshold.
    #[serde(default = "default_pairs")]
    pub pairs: Vec<[u32; 2]>,
    /// Confuser: rotation magnitude in degrees where confusion starts.
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    /// Confuser: probability placed on the partner label.
    #[serde(default = "default_confusion")]
    pub confusion: f64,
    /// Constant: fixed class probabilities (default uniform).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probs: Option<Vec<f64>>,
    #[serde(default = "default_max_batch")]
    pub max_batch: usize,
    /// Artificial per-call latency.
    #[serde(default)]
    pub latency_ms: u64,
}

impl SyntheticModelSpec {
    pub fn new(kind: SyntheticKind) -> SyntheticModelSpec {
        SyntheticModelSpec {
            kind,
            floor: default_floor(),
            radius: None,
            pairs: default_pairs(),
            threshold: default_threshold(),
            confusion: default_confusion(),
            probs: None,
            max_batch: default_max_batch(),
            latency_ms: 0,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.floor) {
            return Err(format!("floor {} outside [0, 1]", self.floor));
        }
        if let Some(r) = self.radius {
            if !(r > 0.0) {
                return Err(format!("radius {r} must be positive"));
            }
        }
        if !(0.0..=1.0).contains(&self.confusion) {
            return Err(format!("confusion {} outside [0, 1]", self.confusion));
        }
        if self.max_batch == 0 {
            return Err("max_batch must be at least 1".into());
        }
        if let Some(p) = &self.probs {
            ModelOutput::ClassProbs { probs: p.clone() }.validate()?;
        }
        Ok(())
    }

    pub fn name(&self) -> String {
        format!(
            "synthetic-{}",
            match self.kind {
                SyntheticKind::Oracle => "oracle",
                SyntheticKind::Decay => "decay",
                SyntheticKind::Constant => "constant",
                SyntheticKind::Confuser => "confuser",
            }
        )
    }
}

#[derive(Debug, Clone)]
struct Entry {
    g: GroupElement,
    /// Layout radius of `g`.
    radius: f64,
    /// Rotation magnitude of `g` in degrees (0 for non-rotations).
    magnitude: f64,
    truth: GroundTruth,
}

#[derive(Debug, Clone)]
pub struct SyntheticModel {
    spec: SyntheticModelSpec,
    descriptor: ModelDescriptor,
    radius: f64,
    table: HashMap<String, Entry>,
}

fn magnitude(g: &GroupElement) -> f64 {
    match g {
        GroupElement::Rotation2d { angle } => angle.min(360.0 - angle),
        GroupElement::AxisAngle3d(r) => r.angle,
        _ => 0.0,
    }
}

/// Probabilities with `p` on `label` and the remainder spread evenly.
fn peaked(n: usize, label: usize, p: f64) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    let rest = (1.0 - p) / (n - 1) as f64;
    (0..n).map(|i| if i == label { p } else { rest }).collect()
}

impl SyntheticModel {
    /// Builds the fixture table for `dataset` over `orbit`. When two
    /// transformed inputs are bit-identical, the first one enumerated wins.
    pub fn new(spec: SyntheticModelSpec, dataset: &Dataset, orbit: &Orbit) -> Result<SyntheticModel, ModelError> {
        spec.validate().map_err(ModelError::Inference)?;
        if dataset.modality.group_kind() != orbit.kind {
            return Err(ModelError::Inference(format!(
                "{} data cannot be swept over a {} orbit",
                dataset.modality, orbit.kind
            )));
        }
        if spec.kind == SyntheticKind::Confuser && !matches!(
            dataset.modality,
            Modality::ImageClassification | Modality::PointcloudClassification
        ) {
            return Err(ModelError::Inference("the confuser is a classifier".into()));
        }
        let mut num_classes = None;
        let mut table = HashMap::new();
        for s in &dataset.samples {
            if let GroundTruth::ClassLabel { num_classes: n, .. } = s.truth {
                num_classes = Some(num_classes.map_or(n, |m: u32| m.max(n)));
            }
            for (i, g) in orbit.elements.iter().enumerate() {
                let x = act_input(g, &s.input, s.context.as_ref())
                    .map_err(|e| ModelError::Inference(format!("fixture {}: {e}", s.input.id)))?;
                table.entry(input_hash(&x)).or_insert_with(|| Entry {
                    g: *g,
                    radius: orbit.radius(i),
                    magnitude: magnitude(g),
                    truth: s.truth.clone(),
                });
            }
        }
        if let (Some(p), Some(n)) = (&spec.probs, num_classes) {
            if p.len() != n as usize {
                return Err(ModelError::Inference(format!(
                    "constant probabilities have {} entries for {n} classes",
                    p.len()
                )));
            }
        }
        let radius = spec.radius.unwrap_or_else(|| orbit.max_radius()).max(f64::MIN_POSITIVE);
        Ok(SyntheticModel {
            descriptor: ModelDescriptor {
                name: spec.name(),
                modality: dataset.modality,
                num_classes,
                max_batch: spec.max_batch,
                protocol_version: PROTOCOL_VERSION.into(),
            },
            spec,
            radius,
            table,
        })
    }

    pub fn spec(&self) -> &SyntheticModelSpec {
        &self.spec
    }

    /// The decay falloff at layout radius `r`.
    pub fn falloff(&self, r: f64) -> f64 {
        self.spec.floor.max(1.0 - r / self.radius)
    }

    fn respond(&self, e: &Entry) -> Result<ModelOutput, ModelError> {
        let fail = |err: crate::actions::ActionError| ModelError::Inference(err.to_string());
        let moved = act_output(&e.g, &e.truth).map_err(fail)?;
        let f = self.falloff(e.radius);
        Ok(match (self.spec.kind, &moved) {
            (SyntheticKind::Oracle, _) => perfect(&moved),
            (SyntheticKind::Decay, GroundTruth::ClassLabel { index, num_classes }) => ModelOutput::ClassProbs {
                probs: peaked(*num_classes as usize, *index as usize, f),
            },
            (SyntheticKind::Decay, GroundTruth::BBox { bbox }) => ModelOutput::Detections {
                detections: vec![Detection {
                    bbox: bbox.scaled(f.sqrt()),
                    confidence: 1.0,
                }],
            },
            (SyntheticKind::Decay, GroundTruth::FlowField { flow }) => {
                let mut flow = flow.clone();
                // Rounded to f32 so that the output survives the wire unchanged.
                for v in &mut flow.data {
                    v[0] = f64::from((v[0] + 1.0 - f) as f32);
                }
                ModelOutput::FlowField { flow }
            }
            (SyntheticKind::Constant, GroundTruth::ClassLabel { num_classes, .. }) => ModelOutput::ClassProbs {
                probs: self
                    .spec
                    .probs
                    .clone()
                    .unwrap_or_else(|| vec![1.0 / f64::from(*num_classes); *num_classes as usize]),
            },
            (SyntheticKind::Constant, _) => perfect(&e.truth),
            (SyntheticKind::Confuser, GroundTruth::ClassLabel { index, num_classes }) => {
                let n = *num_classes as usize;
                let partner = self.spec.pairs.iter().find_map(|[a, b]| match *index {
                    i if i == *a => Some(*b),
                    i if i == *b => Some(*a),
                    _ => None,
                });
                match partner {
                    Some(p) if e.magnitude >= self.spec.threshold && (p as usize) < n => {
                        let c = self.spec.confusion;
                        let mut probs = peaked(n, p as usize, c);
                        if n > 2 {
                            // Of the remaining mass, two thirds go to the true label.
                            let rest = 1.0 - c;
                            let others = (n - 2) as f64;
                            for (i, v) in probs.iter_mut().enumerate() {
                                if i == *index as usize {
                                    *v = rest * 2.0 / 3.0;
                                } else if i != p as usize {
                                    *v = rest / 3.0 / others;
                                }
                            }
                        }
                        ModelOutput::ClassProbs { probs }
                    }
                    _ => ModelOutput::ClassProbs {
                        probs: peaked(n, *index as usize, 0.9),
                    },
                }
            }
            (SyntheticKind::Confuser, _) => unreachable!("checked at construction"),
        })
    }
}

/// The output a perfect model gives for reference `y`.
pub fn perfect(y: &GroundTruth) -> ModelOutput {
    match y {
        GroundTruth::ClassLabel { index, num_classes } => ModelOutput::ClassProbs {
            probs: peaked(*num_classes as usize, *index as usize, 1.0),
        },
        GroundTruth::BBox { bbox } => ModelOutput::Detections {
            detections: vec![Detection {
                bbox: *bbox,
                confidence: 1.0,
            }],
        },
        GroundTruth::FlowField { flow } => ModelOutput::FlowField { flow: flow.clone() },
    }
}

impl Model for SyntheticModel {
    fn describe(&self) -> Result<ModelDescriptor, ModelError> {
        Ok(self.descriptor.clone())
    }

    fn infer(&self, batch: &[InputSample]) -> Result<Vec<ModelOutput>, ModelError> {
        if batch.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        if batch.len() > self.descriptor.max_batch {
            return Err(ModelError::BatchTooLarge {
                got: batch.len(),
                max: self.descriptor.max_batch,
            });
        }
        if self.spec.latency_ms > 0 {
            thread::sleep(Duration::from_millis(self.spec.latency_ms));
        }
        batch
            .iter()
            .map(|x| {
                let e = self
                    .table
                    .get(&input_hash(x))
                    .ok_or_else(|| ModelError::Inference(format!("input {} is not in the fixture table", x.id)))?;
                self.respond(e)
            })
            .collect()
    }
}
