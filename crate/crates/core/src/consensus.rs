//! Consensus: a ground-truth proxy built from the model's own outputs.
//!
//! `consensus(x) = ⟨ φ̃(g⁻¹, h(φ(g, x))) ⟩_{g ∈ G}`: every orbit output is
//! pulled back to the untransformed frame and the results are averaged.
//! Boxes average their corners (using each output's most-confident
//! detection), probability vectors average entrywise and are renormalized,
//! and flow fields average pointwise.
//!
//! Averages sum values in sorted order, which makes the result exactly
//! independent of input order, and a component whose values all agree is
//! returned as-is.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::actions::{act_output, act_output_inverse, ActionError, BBox, FlowField, GroundTruth, ModelOutput};
use crate::groups::GroupElement;
use crate::metrics::{argmax, evaluate, MetricError, MetricName, MetricValue};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConsensusError {
    #[error("consensus needs at least one orbit output")]
    Empty,
    #[error("orbit outputs mix {0} and {1}")]
    MixedVariants(&'static str, &'static str),
    #[error("orbit elements mix group kinds")]
    MixedGroups,
    #[error("no orbit element produced a detection")]
    NoDetections,
    #[error("probability vectors have different lengths")]
    LengthMismatch,
    #[error("flow fields differ in shape")]
    ShapeMismatch,
    #[error(transparent)]
    Action(#[from] ActionError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ConsensusValue {
    ClassProbs { probs: Vec<f64> },
    #[serde(rename = "bbox")]
    BBox { bbox: BBox },
    FlowField { flow: FlowField },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsensusOutput {
    pub value: ConsensusValue,
    /// Orbit elements that contributed (detections skip empty outputs).
    pub contributing: usize,
}

impl ConsensusOutput {
    /// The consensus as a reference for metric evaluation. Probability
    /// consensus becomes the label of its largest entry.
    pub fn to_truth(&self) -> GroundTruth {
        match &self.value {
            ConsensusValue::ClassProbs { probs } => GroundTruth::ClassLabel {
                index: argmax(probs) as u32,
                num_classes: probs.len() as u32,
            },
            ConsensusValue::BBox { bbox } => GroundTruth::BBox { bbox: *bbox },
            ConsensusValue::FlowField { flow } => GroundTruth::FlowField { flow: flow.clone() },
        }
    }
}

/// Order-independent mean.
fn stable_mean(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let (lo, hi) = (values[0], values[values.len() - 1]);
    if lo == hi {
        return lo;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

fn check_inputs(outputs: &[(GroupElement, ModelOutput)]) -> Result<(), ConsensusError> {
    let Some((g0, y0)) = outputs.first() else {
        return Err(ConsensusError::Empty);
    };
    for (g, y) in outputs {
        if g.kind() != g0.kind() {
            return Err(ConsensusError::MixedGroups);
        }
        if y.kind_name() != y0.kind_name() {
            return Err(ConsensusError::MixedVariants(y0.kind_name(), y.kind_name()));
        }
    }
    Ok(())
}

/// Computes the consensus of `(g, h(φ(g, x)))` pairs over an orbit.
pub fn consensus(outputs: &[(GroupElement, ModelOutput)]) -> Result<ConsensusOutput, ConsensusError> {
    check_inputs(outputs)?;
    match &outputs[0].1 {
        ModelOutput::ClassProbs { probs } => {
            let n = probs.len();
            let mut columns = vec![Vec::with_capacity(outputs.len()); n];
            for (g, y) in outputs {
                let ModelOutput::ClassProbs { probs } = act_output_inverse(g, y)? else {
                    unreachable!("variant checked")
                };
                if probs.len() != n {
                    return Err(ConsensusError::LengthMismatch);
                }
                for (col, p) in columns.iter_mut().zip(probs) {
                    col.push(p);
                }
            }
            let mut mean: Vec<f64> = columns.iter_mut().map(|c| stable_mean(c)).collect();
            let total: f64 = mean.iter().sum();
            if total > 0.0 && total != 1.0 {
                mean.iter_mut().for_each(|p| *p /= total);
            }
            Ok(ConsensusOutput {
                value: ConsensusValue::ClassProbs { probs: mean },
                contributing: outputs.len(),
            })
        }
        ModelOutput::Detections { .. } => {
            let mut corners: [Vec<f64>; 4] = Default::default();
            let mut class_index = None;
            for (g, y) in outputs {
                let Some(top) = y.top_detection() else {
                    continue;
                };
                let b = act_output_inverse(g, &top.bbox)?;
                class_index.get_or_insert(b.class_index);
                for (c, v) in corners.iter_mut().zip([b.xmin, b.ymin, b.xmax, b.ymax]) {
                    c.push(v);
                }
            }
            let contributing = corners[0].len();
            if contributing == 0 {
                return Err(ConsensusError::NoDetections);
            }
            let [x0, y0, x1, y1] = corners.map(|mut c| stable_mean(&mut c));
            Ok(ConsensusOutput {
                value: ConsensusValue::BBox {
                    bbox: BBox::new(x0, y0, x1, y1).with_class(class_index.unwrap_or(0)),
                },
                contributing,
            })
        }
        ModelOutput::FlowField { flow } => {
            let (w, h) = (flow.width, flow.height);
            let pulled: Vec<FlowField> = outputs
                .iter()
                .map(|(g, y)| match y {
                    ModelOutput::FlowField { flow } => act_output_inverse(g, flow),
                    _ => unreachable!("variant checked"),
                })
                .collect::<Result<_, _>>()?;
            if pulled.iter().any(|f| f.width != w || f.height != h) {
                return Err(ConsensusError::ShapeMismatch);
            }
            let mut buf = vec![0.0; pulled.len()];
            let data = (0..w * h)
                .map(|i| {
                    let mut v = [0.0; 2];
                    for (k, out) in v.iter_mut().enumerate() {
                        for (slot, f) in buf.iter_mut().zip(&pulled) {
                            *slot = f.data[i][k];
                        }
                        *out = stable_mean(&mut buf);
                    }
                    v
                })
                .collect();
            Ok(ConsensusOutput {
                value: ConsensusValue::FlowField {
                    flow: FlowField::new(w, h, data),
                },
                contributing: outputs.len(),
            })
        }
    }
}

/// Evaluates `metric` at every orbit element against the transformed
/// consensus `φ̃(g, consensus)`.
pub fn consensus_metric(
    outputs: &[(GroupElement, ModelOutput)],
    metric: MetricName,
) -> Result<(ConsensusOutput, Vec<MetricValue>), ConsensusError> {
    let c = consensus(outputs)?;
    let truth = c.to_truth();
    let values = outputs
        .iter()
        .map(|(g, y)| Ok(evaluate(metric, y, &act_output(g, &truth)?)?))
        .collect::<Result<Vec<_>, ConsensusError>>()?;
    Ok((c, values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::actions::Detection;
    use crate::groups::{enumerate_orbit, GroupKind, OrbitSpec};
    use crate::metrics::iou;
    use proptest::prelude::*;

    fn det(b: BBox, c: f64) -> ModelOutput {
        ModelOutput::Detections {
            detections: vec![Detection { bbox: b, confidence: c }],
        }
    }

    fn orbit9() -> Vec<GroupElement> {
        enumerate_orbit(&OrbitSpec {
            shift_extent: 8,
            shift_stride: 8,
            ..OrbitSpec::new(GroupKind::Translation2d)
        })
        .unwrap()
        .elements
    }

    #[test]
    fn identical_pullbacks_give_that_box() {
        let y = BBox::new(3.0, 4.0, 13.0, 17.0);
        let outs: Vec<_> = orbit9()
            .into_iter()
            .map(|g| (g, det(act_output(&g, &y).unwrap(), 0.7)))
            .collect();
        let c = consensus(&outs).unwrap();
        assert_eq!(c.value, ConsensusValue::BBox { bbox: y });
        assert_eq!(c.contributing, 9);
    }

    #[test]
    fn arithmetic_mean_of_corners() {
        let e = GroupElement::translation(0, 0);
        let outs = vec![
            (e, det(BBox::new(0.0, 0.0, 10.0, 10.0), 0.9)),
            (e, det(BBox::new(2.0, 2.0, 12.0, 12.0), 0.9)),
        ];
        let c = consensus(&outs).unwrap();
        assert_eq!(c.value, ConsensusValue::BBox { bbox: BBox::new(1.0, 1.0, 11.0, 11.0) });
    }

    #[test]
    fn oracle_outputs_recover_truth_and_flat_metric() {
        let y = BBox::new(40.0, 50.0, 70.0, 90.0);
        let outs: Vec<_> = orbit9()
            .into_iter()
            .map(|g| (g, det(act_output(&g, &y).unwrap(), 1.0)))
            .collect();
        let (c, values) = consensus_metric(&outs, MetricName::DetectionIou).unwrap();
        assert_eq!(c.to_truth(), GroundTruth::BBox { bbox: y });
        assert!(values.iter().all(|v| v.value == 1.0));
    }

    #[test]
    fn constant_detector_matches_ground_truth_pattern() {
        // A detector that ignores the shift: h(φ(g, x)) = y for every g.
        let y = BBox::new(40.0, 40.0, 60.0, 60.0);
        let orbit = orbit9();
        let outs: Vec<_> = orbit.iter().map(|g| (*g, det(y, 1.0))).collect();
        let (c, values) = consensus_metric(&outs, MetricName::DetectionIou).unwrap();
        let ConsensusValue::BBox { bbox: cb } = c.value else {
            unreachable!()
        };
        // The pullbacks y - t average to y since the shifts are symmetric.
        assert_eq!(cb, y);
        for (g, v) in orbit.iter().zip(&values) {
            let gt_based = iou(&y, &act_output(g, &y).unwrap());
            assert!((v.value - gt_based).abs() < 1e-12);
        }
    }

    #[test]
    fn single_element_orbit() {
        let g = GroupElement::translation(5, -3);
        let b = BBox::new(1.0, 1.0, 4.0, 6.0);
        let (_, values) = consensus_metric(&[(g, det(b, 0.4))], MetricName::DetectionIou).unwrap();
        assert_eq!(values[0].value, 1.0);
    }

    #[test]
    fn skipped_empty_detections_and_errors() {
        let e = GroupElement::translation(0, 0);
        let empty = ModelOutput::Detections { detections: vec![] };
        let b = BBox::new(0.0, 0.0, 2.0, 2.0);
        let c = consensus(&[(e, empty.clone()), (e, det(b, 0.5))]).unwrap();
        assert_eq!(c.contributing, 1);
        assert_eq!(consensus(&[(e, empty)]), Err(ConsensusError::NoDetections));
        assert_eq!(consensus(&[]), Err(ConsensusError::Empty));
        let probs = ModelOutput::ClassProbs { probs: vec![1.0] };
        assert!(matches!(
            consensus(&[(e, det(b, 0.5)), (e, probs)]),
            Err(ConsensusError::MixedVariants(..))
        ));
        assert_eq!(
            consensus(&[(e, det(b, 0.5)), (GroupElement::rotation(0.0), det(b, 0.5))]),
            Err(ConsensusError::MixedGroups)
        );
    }

    #[test]
    fn flow_fixed_point() {
        let base = FlowField::new(
            3,
            3,
            (0..9).map(|i| [f64::from(i) * 0.25, 1.0 - f64::from(i) * 0.5]).collect(),
        );
        let orbit = enumerate_orbit(&OrbitSpec::new(GroupKind::SquareSym)).unwrap();
        let outs: Vec<_> = orbit
            .elements
            .iter()
            .map(|g| (*g, ModelOutput::FlowField { flow: act_output(g, &base).unwrap() }))
            .collect();
        let c = consensus(&outs).unwrap();
        let ConsensusValue::FlowField { flow } = c.value else {
            unreachable!()
        };
        for (a, b) in flow.data.iter().zip(&base.data) {
            assert!((a[0] - b[0]).abs() < 1e-9 && (a[1] - b[1]).abs() < 1e-9);
        }
    }

    proptest! {
        #[test]
        fn probability_consensus_on_simplex_and_order_free(
            raw in prop::collection::vec(prop::collection::vec(0.01f64..1.0, 4), 1..10),
            seed in any::<u64>(),
        ) {
            let outs: Vec<_> = raw
                .iter()
                .enumerate()
                .map(|(i, r)| {
                    let s: f64 = r.iter().sum();
                    (GroupElement::rotation(i as f64 * 10.0), ModelOutput::ClassProbs { probs: r.iter().map(|v| v / s).collect() })
                })
                .collect();
            let c = consensus(&outs).unwrap();
            let ConsensusValue::ClassProbs { probs } = &c.value else { unreachable!() };
            prop_assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(probs.iter().all(|p| *p >= 0.0));

            let mut shuffled = outs.clone();
            let n = shuffled.len();
            shuffled.rotate_left((seed as usize) % n);
            shuffled.reverse();
            prop_assert_eq!(consensus(&shuffled).unwrap(), c);
        }

        #[test]
        fn box_fixed_point_exact(x in 0i32..50, y in 0i32..50, w in 1i32..30, h in 1i32..30) {
            let b = BBox::new(f64::from(x), f64::from(y), f64::from(x + w), f64::from(y + h));
            let outs: Vec<_> = orbit9().into_iter().map(|g| (g, det(act_output(&g, &b).unwrap(), 0.9))).collect();
            prop_assert_eq!(consensus(&outs).unwrap().value, ConsensusValue::BBox { bbox: b });
        }
    }
}
