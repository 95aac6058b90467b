//! Orbit sweeps: individual and aggregate NERO vectors, run orchestration.
//!
//! For every sample `x` and orbit element `g` the engine sends
//! `x' = φ(g, x)` to the model and scores `h(x')` against `y' = φ̃(g, y)`
//! (or against the transformed consensus). Inference is batched and spread
//! over a bounded pool of worker threads; a single collector owns the
//! results, keyed by `(sample, orbit index)`, so completion order never
//! affects the outcome.

use std::collections::HashSet;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;
use std::thread;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::actions::{act_input, act_output, GroundTruth, InputSample, Modality, ModelOutput};
use crate::consensus::consensus;
use crate::dataprep::{Dataset, Sample};
use crate::groups::{enumerate_orbit, GroupError, GroupKind, Orbit, OrbitSpec};
use crate::metrics::{evaluate, LocationMap, MetricName, MetricValue, Polarity};
use crate::modelproto::{input_hash, Model, ModelDescriptor, ModelError};
use crate::projection::{pca_project, DrLayout, ExternalProjection, ProjectionError};
use crate::tensor::{f64_vec, nullable_f64};

pub const RESULT_FORMAT: &str = "nero-result/1";

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Group(#[from] GroupError),
    #[error(transparent)]
    Projection(#[from] ProjectionError),
    #[error("model serves {model}, dataset is {dataset}")]
    ModalityMismatch { model: Modality, dataset: Modality },
    #[error("incompatible run: {0}")]
    Incompatible(String),
    #[error("no records to aggregate")]
    Empty,
    #[error("record {id} has {got} values, expected {want}")]
    LengthMismatch { id: String, got: usize, want: usize },
    #[error("subset selects no samples")]
    EmptySubset,
    #[error("every orbit element failed for sample {id}: {message}")]
    RecordFailed { id: String, message: String },
    #[error("every inference request failed: {0}")]
    AllFailed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TruthMode {
    #[default]
    GroundTruth,
    Consensus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "by", rename_all = "snake_case")]
pub enum SubsetPredicate {
    ClassLabel { labels: Vec<u32> },
    Ids { ids: Vec<String> },
}

impl SubsetPredicate {
    pub fn matches(&self, id: &str, class_label: Option<u32>) -> bool {
        match self {
            SubsetPredicate::ClassLabel { labels } => class_label.is_some_and(|l| labels.contains(&l)),
            SubsetPredicate::Ids { ids } => ids.iter().any(|i| i == id),
        }
    }
}

/// A failure attached to one orbit element, or to the whole record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElementError {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub index: Option<usize>,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeroRecord {
    pub sample_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_label: Option<u32>,
    /// Metric value per orbit position; NaN where undefined.
    #[serde(with = "f64_vec")]
    pub values: Vec<f64>,
    /// Per-location maps per orbit position, for metrics that produce them.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub maps: Option<Vec<Option<LocationMap>>>,
    #[serde(with = "nullable_f64")]
    pub mean: f64,
    /// Population variance.
    #[serde(with = "nullable_f64")]
    pub variance: f64,
    pub nan_count: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub errors: Vec<ElementError>,
    /// The reference scored against before transformation: ground truth, or
    /// the consensus in consensus mode.
    pub truth: GroundTruth,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub consensus_contributing: Option<usize>,
    /// Raw model outputs per orbit position, cached for detail views.
    pub outputs: Vec<Option<ModelOutput>>,
    pub input_hashes: Vec<String>,
}

/// Mean, population variance and NaN count, NaN entries excluded.
pub fn vector_stats(values: &[f64]) -> (f64, f64, usize) {
    let valid: Vec<f64> = values.iter().copied().filter(|v| !v.is_nan()).collect();
    let nan = values.len() - valid.len();
    if valid.is_empty() {
        return (f64::NAN, f64::NAN, nan);
    }
    let n = valid.len() as f64;
    let mean = valid.iter().sum::<f64>() / n;
    let var = valid.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var, nan)
}

impl NeroRecord {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn failed(&self) -> bool {
        self.nan_count == self.values.len()
    }

    pub fn metric_value(&self, index: usize, polarity: Polarity) -> MetricValue {
        MetricValue {
            value: self.values[index],
            map: self
                .maps
                .as_ref()
                .and_then(|m| m[index].clone()),
            polarity,
        }
    }
}

/// Per-orbit-position aggregate with the number of records that contributed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    #[serde(with = "f64_vec")]
    pub values: Vec<f64>,
    pub coverage: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub maps: Option<Vec<Option<LocationMap>>>,
}

/// Positionwise NaN-excluding mean over `records`.
pub fn aggregate_nero(records: &[NeroRecord]) -> Result<Aggregate, EngineError> {
    let first = records.first().ok_or(EngineError::Empty)?;
    let n = first.len();
    for r in records {
        if r.len() != n {
            return Err(EngineError::LengthMismatch {
                id: r.sample_id.clone(),
                got: r.len(),
                want: n,
            });
        }
    }
    let mut values = vec![0.0; n];
    let mut coverage = vec![0; n];
    for r in records {
        for (k, v) in r.values.iter().enumerate() {
            if !v.is_nan() {
                values[k] += v;
                coverage[k] += 1;
            }
        }
    }
    for (v, c) in values.iter_mut().zip(&coverage) {
        *v = if *c == 0 { f64::NAN } else { *v / *c as f64 };
    }
    let maps = records.iter().any(|r| r.maps.is_some()).then(|| {
        (0..n)
            .map(|k| {
                let present: Vec<&LocationMap> = records
                    .iter()
                    .filter_map(|r| r.maps.as_ref()?.get(k)?.as_ref())
                    .collect();
                let m0 = present.first()?;
                let same: Vec<&&LocationMap> = present
                    .iter()
                    .filter(|m| m.width == m0.width && m.height == m0.height)
                    .collect();
                let mut data = vec![0.0; m0.data.len()];
                for m in &same {
                    for (d, v) in data.iter_mut().zip(&m.data) {
                        *d += v;
                    }
                }
                let c = same.len() as f64;
                Some(LocationMap {
                    width: m0.width,
                    height: m0.height,
                    data: data.into_iter().map(|d| d / c).collect(),
                })
            })
            .collect()
    });
    Ok(Aggregate { values, coverage, maps })
}

/// Records matching `predicate`, in their original order.
pub fn subset_filter(records: &[NeroRecord], predicate: &SubsetPredicate) -> Vec<NeroRecord> {
    records
        .iter()
        .filter(|r| predicate.matches(&r.sample_id, r.class_label))
        .cloned()
        .collect()
}

fn metric_fits(metric: MetricName, modality: Modality) -> bool {
    matches!(
        (metric, modality),
        (
            MetricName::Confidence | MetricName::Correct,
            Modality::ImageClassification | Modality::PointcloudClassification
        ) | (MetricName::DetectionIou, Modality::ImageDetection)
            | (MetricName::Rmse, Modality::ImagePairFlow)
    )
}

/// Checks that a modality, orbit and metric belong together.
pub fn check_compatible(modality: Modality, orbit: &Orbit, metric: MetricName) -> Result<(), EngineError> {
    if modality.group_kind() != orbit.kind {
        return Err(EngineError::Incompatible(format!(
            "{modality} is evaluated over {}, not {}",
            modality.group_kind(),
            orbit.kind
        )));
    }
    if !metric_fits(metric, modality) {
        return Err(EngineError::Incompatible(format!("metric {metric} does not apply to {modality}")));
    }
    Ok(())
}

/// Scores a sample's orbit outputs. `outputs[i]` is the model's answer for
/// orbit element `i`, or the reason there is none.
pub fn evaluate_record(
    sample: &Sample,
    orbit: &Orbit,
    metric: MetricName,
    mode: TruthMode,
    modality: Modality,
    outputs: Vec<Result<ModelOutput, String>>,
    input_hashes: Vec<String>,
) -> NeroRecord {
    let n = orbit.len();
    let mut errors = Vec::new();
    let mut cached: Vec<Option<ModelOutput>> = vec![None; n];
    for (i, out) in outputs.into_iter().enumerate() {
        match out.and_then(|y| {
            if !modality.accepts_output(&y) {
                return Err(format!("model returned {} for {modality}", y.kind_name()));
            }
            y.validate().map(|_| y).map_err(|e| format!("malformed output: {e}"))
        }) {
            Ok(y) => cached[i] = Some(y),
            Err(message) => errors.push(ElementError {
                index: Some(i),
                message,
            }),
        }
    }

    let mut truth = sample.truth.clone();
    let mut contributing = None;
    let mut usable = true;
    if mode == TruthMode::Consensus {
        let pairs: Vec<_> = orbit
            .elements
            .iter()
            .zip(&cached)
            .filter_map(|(g, y)| Some((*g, y.clone()?)))
            .collect();
        match consensus(&pairs) {
            Ok(c) => {
                truth = c.to_truth();
                contributing = Some(c.contributing);
            }
            Err(e) => {
                usable = false;
                errors.push(ElementError {
                    index: None,
                    message: format!("consensus: {e}"),
                });
            }
        }
    }

    let mut values = vec![f64::NAN; n];
    let mut maps: Vec<Option<LocationMap>> = vec![None; n];
    if usable {
        for (i, (g, y)) in orbit.elements.iter().zip(&cached).enumerate() {
            let Some(y) = y else { continue };
            let scored = act_output(g, &truth)
                .map_err(|e| e.to_string())
                .and_then(|t| evaluate(metric, y, &t).map_err(|e| e.to_string()));
            match scored {
                Ok(v) => {
                    values[i] = v.value;
                    maps[i] = v.map;
                }
                Err(message) => errors.push(ElementError {
                    index: Some(i),
                    message,
                }),
            }
        }
    }
    errors.sort_by_key(|e| e.index.unwrap_or(usize::MAX));
    let (mean, variance, nan_count) = vector_stats(&values);
    NeroRecord {
        sample_id: sample.input.id.clone(),
        class_label: sample.class_label,
        values,
        maps: maps.iter().any(Option::is_some).then_some(maps),
        mean,
        variance,
        nan_count,
        errors,
        truth,
        consensus_contributing: contributing,
        outputs: cached,
        input_hashes,
    }
}

/// Transformed inputs for one sample, or per-element failures.
fn orbit_inputs(sample: &Sample, orbit: &Orbit, indices: &[usize]) -> Vec<Result<InputSample, String>> {
    indices
        .iter()
        .map(|&i| act_input(&orbit.elements[i], &sample.input, sample.context.as_ref()).map_err(|e| e.to_string()))
        .collect()
}

/// Runs one batch; failures of the call become per-element failures.
fn infer_batch(model: &dyn Model, inputs: Vec<Result<InputSample, String>>) -> Vec<(Result<ModelOutput, String>, String)> {
    let ok: Vec<InputSample> = inputs.iter().filter_map(|x| x.as_ref().ok().cloned()).collect();
    let hashes: Vec<String> = ok.iter().map(input_hash).collect();
    let mut answers = if ok.is_empty() {
        Vec::new().into_iter()
    } else {
        match model.infer(&ok) {
            Ok(outs) if outs.len() == ok.len() => outs.into_iter().map(Ok).collect::<Vec<_>>().into_iter(),
            Ok(outs) => {
                let msg = format!("model answered {} of {} inputs", outs.len(), ok.len());
                vec![Err(msg); ok.len()].into_iter()
            }
            Err(e) => vec![Err(e.to_string()); ok.len()].into_iter(),
        }
    };
    let mut hashes = hashes.into_iter();
    inputs
        .into_iter()
        .map(|x| match x {
            Ok(_) => (
                answers.next().expect("one answer per input"),
                hashes.next().expect("one hash per input"),
            ),
            Err(e) => (Err(e), String::new()),
        })
        .collect()
}

/// The NERO vector of one sample, with sequential batched inference.
pub fn individual_nero(
    sample: &Sample,
    orbit: &Orbit,
    model: &dyn Model,
    metric: MetricName,
    mode: TruthMode,
    batch_size: usize,
) -> Result<NeroRecord, EngineError> {
    let modality = model.describe()?.modality;
    let all: Vec<usize> = (0..orbit.len()).collect();
    let mut outputs = Vec::with_capacity(orbit.len());
    let mut hashes = Vec::with_capacity(orbit.len());
    for chunk in all.chunks(batch_size.max(1)) {
        for (y, h) in infer_batch(model, orbit_inputs(sample, orbit, chunk)) {
            outputs.push(y);
            hashes.push(h);
        }
    }
    let record = evaluate_record(sample, orbit, metric, mode, modality, outputs, hashes);
    if record.failed() {
        return Err(EngineError::RecordFailed {
            id: record.sample_id,
            message: record
                .errors
                .first()
                .map(|e| e.message.clone())
                .unwrap_or_default(),
        });
    }
    Ok(record)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSpec {
    pub run_id: String,
    pub orbit: OrbitSpec,
    pub metric: MetricName,
    pub truth: TruthMode,
    pub batch_size: usize,
    pub concurrency: usize,
    /// Shuffles batch dispatch order; results do not depend on it.
    pub shuffle_seed: Option<u64>,
    pub subset: Option<SubsetPredicate>,
    pub projection: Option<ExternalProjection>,
}

impl RunSpec {
    pub fn new(run_id: impl Into<String>, orbit: OrbitSpec, metric: MetricName) -> RunSpec {
        RunSpec {
            run_id: run_id.into(),
            orbit,
            metric,
            truth: TruthMode::GroundTruth,
            batch_size: 32,
            concurrency: 4,
            shuffle_seed: None,
            subset: None,
            projection: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub modality: Modality,
    pub provenance: String,
    pub sample_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subset: Option<SubsetPredicate>,
    /// Manifest path, when known, so viewers can rebuild transformed inputs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeroResult {
    pub format: String,
    pub run_id: String,
    pub started_at: String,
    pub finished_at: String,
    pub orbit_spec: OrbitSpec,
    pub orbit: Orbit,
    pub metric: MetricName,
    pub polarity: Polarity,
    pub truth_mode: TruthMode,
    pub model: ModelDescriptor,
    pub dataset: DatasetSummary,
    pub records: Vec<NeroRecord>,
    pub aggregate: Aggregate,
    pub dr: DrLayout,
}

impl NeroResult {
    pub fn record(&self, sample_id: &str) -> Option<&NeroRecord> {
        self.records.iter().find(|r| r.sample_id == sample_id)
    }
}

/// PCA of the record vectors. Orbit positions that are NaN in every record
/// carry no information and are left out.
pub fn dr_layout(records: &[NeroRecord]) -> Result<DrLayout, EngineError> {
    let n = records.first().map_or(0, NeroRecord::len);
    let keep: Vec<usize> = (0..n)
        .filter(|&k| records.iter().any(|r| !r.values[k].is_nan()))
        .collect();
    if keep.is_empty() {
        return Ok(DrLayout {
            method: "pca".into(),
            coords: vec![[0.0, 0.0]; records.len()],
            explained_variance: [0.0, 0.0],
            coloring: Default::default(),
        });
    }
    let matrix: Vec<Vec<f64>> = records
        .iter()
        .map(|r| keep.iter().map(|&k| r.values[k]).collect())
        .collect();
    Ok(pca_project(&matrix)?)
}

/// Translations crop from the source; every shift must stay inside it.
fn check_windows(samples: &[&Sample], orbit: &Orbit) -> Result<(), EngineError> {
    if orbit.kind != GroupKind::Translation2d {
        return Ok(());
    }
    for s in samples {
        let ctx = s.context.as_ref().ok_or_else(|| {
            EngineError::Incompatible(format!("sample {} has no source to translate within", s.input.id))
        })?;
        for g in &orbit.elements {
            if let crate::groups::GroupElement::Translation2d { tx, ty } = g {
                let (x, y) = ctx.shifted_origin(*tx, *ty);
                let fits = x >= 0
                    && y >= 0
                    && x as usize + ctx.window.0 <= ctx.source.width
                    && y as usize + ctx.window.1 <= ctx.source.height;
                if !fits {
                    return Err(EngineError::Incompatible(format!(
                        "sample {}: shift ({tx}, {ty}) moves the window outside the source",
                        s.input.id
                    )));
                }
            }
        }
    }
    Ok(())
}

type BatchResult = (usize, Vec<(Result<ModelOutput, String>, String)>);

/// Sweeps every selected sample over the orbit.
pub fn run(spec: &RunSpec, dataset: &Dataset, model: &dyn Model) -> Result<NeroResult, EngineError> {
    let started_at = chrono::Utc::now().to_rfc3339();
    let descriptor = model.describe()?;
    descriptor.validate()?;
    if descriptor.modality != dataset.modality {
        return Err(EngineError::ModalityMismatch {
            model: descriptor.modality,
            dataset: dataset.modality,
        });
    }
    let orbit = enumerate_orbit(&spec.orbit)?;
    check_compatible(dataset.modality, &orbit, spec.metric)?;

    let samples: Vec<&Sample> = dataset
        .samples
        .iter()
        .filter(|s| {
            spec.subset
                .as_ref()
                .is_none_or(|p| p.matches(&s.input.id, s.class_label))
        })
        .collect();
    if samples.is_empty() {
        return Err(EngineError::EmptySubset);
    }
    check_windows(&samples, &orbit)?;

    // Batches never straddle samples.
    let batch = spec.batch_size.clamp(1, descriptor.max_batch);
    let mut batches: Vec<(usize, Vec<usize>)> = Vec::new();
    for s in 0..samples.len() {
        let all: Vec<usize> = (0..orbit.len()).collect();
        for chunk in all.chunks(batch) {
            batches.push((s, chunk.to_vec()));
        }
    }
    let mut order: Vec<usize> = (0..batches.len()).collect();
    if let Some(seed) = spec.shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }

    let mut slots: Vec<Vec<Option<(Result<ModelOutput, String>, String)>>> =
        vec![vec![None; orbit.len()]; samples.len()];
    let cursor = AtomicUsize::new(0);
    let workers = spec.concurrency.clamp(1, batches.len().max(1));
    thread::scope(|scope| {
        let (tx, rx) = mpsc::channel::<BatchResult>();
        for _ in 0..workers {
            let tx = tx.clone();
            let (cursor, order, batches, samples, orbit) = (&cursor, &order, &batches, &samples, &orbit);
            scope.spawn(move || loop {
                let k = cursor.fetch_add(1, Ordering::Relaxed);
                let Some(&b) = order.get(k) else { break };
                let (s, idx) = &batches[b];
                let answers = infer_batch(model, orbit_inputs(samples[*s], orbit, idx));
                if tx.send((b, answers)).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        for (b, answers) in rx {
            let (s, idx) = &batches[b];
            for (i, a) in idx.iter().zip(answers) {
                slots[*s][*i] = Some(a);
            }
        }
    });

    let records: Vec<NeroRecord> = samples
        .iter()
        .zip(slots)
        .map(|(s, row)| {
            let (outputs, hashes): (Vec<_>, Vec<_>) = row
                .into_iter()
                .map(|a| a.expect("every orbit element dispatched"))
                .unzip();
            evaluate_record(s, &orbit, spec.metric, spec.truth, dataset.modality, outputs, hashes)
        })
        .collect();
    if records.iter().all(NeroRecord::failed) {
        let message = records
            .iter()
            .flat_map(|r| r.errors.first())
            .map(|e| e.message.clone())
            .next()
            .unwrap_or_default();
        return Err(EngineError::AllFailed(message));
    }

    let aggregate = aggregate_nero(&records)?;
    let dr = match &spec.projection {
        Some(p) => {
            let ids: Vec<&str> = records.iter().map(|r| r.sample_id.as_str()).collect();
            p.layout_for(&ids)?
        }
        None => dr_layout(&records)?,
    };
    let ids: HashSet<&str> = records.iter().map(|r| r.sample_id.as_str()).collect();
    debug_assert_eq!(ids.len(), records.len());
    Ok(NeroResult {
        format: RESULT_FORMAT.into(),
        run_id: spec.run_id.clone(),
        started_at,
        finished_at: chrono::Utc::now().to_rfc3339(),
        orbit_spec: spec.orbit.clone(),
        metric: spec.metric,
        polarity: spec.metric.polarity(),
        truth_mode: spec.truth,
        model: descriptor,
        dataset: DatasetSummary {
            modality: dataset.modality,
            provenance: dataset.provenance.clone(),
            sample_count: records.len(),
            subset: spec.subset.clone(),
            manifest: None,
        },
        orbit,
        records,
        aggregate,
        dr,
    })
}

/// Headline numbers printed after a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub samples: usize,
    pub failed_elements: usize,
    /// `(orbit index, value)` of the worst and best aggregate positions.
    pub aggregate_worst: Option<(usize, f64)>,
    pub aggregate_best: Option<(usize, f64)>,
    /// Highest-variance samples, most variable first.
    pub worst_variance: Vec<(String, f64)>,
}

pub fn summarize(result: &NeroResult, top: usize) -> RunSummary {
    let finite: Vec<(usize, f64)> = result
        .aggregate
        .values
        .iter()
        .copied()
        .enumerate()
        .filter(|(_, v)| !v.is_nan())
        .collect();
    let lower_better = result.polarity == Polarity::LowerIsBetter;
    let pick = |want_best: bool| {
        finite.iter().copied().reduce(|a, b| {
            let b_better = if lower_better { b.1 < a.1 } else { b.1 > a.1 };
            let b_worse = if lower_better { b.1 > a.1 } else { b.1 < a.1 };
            if (want_best && b_better) || (!want_best && b_worse) {
                b
            } else {
                a
            }
        })
    };
    let mut by_var: Vec<(String, f64)> = result
        .records
        .iter()
        .filter(|r| !r.variance.is_nan())
        .map(|r| (r.sample_id.clone(), r.variance))
        .collect();
    by_var.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    by_var.truncate(top);
    RunSummary {
        samples: result.records.len(),
        failed_elements: result.records.iter().map(|r| r.nan_count).sum(),
        aggregate_worst: pick(false),
        aggregate_best: pick(true),
        worst_variance: by_var,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::actions::{BBox, Image};
    use crate::dataprep::crop_window;
    use crate::groups::GroupElement;
    use crate::metrics::iou;
    use crate::modelproto::{SyntheticKind, SyntheticModel, SyntheticModelSpec, PROTOCOL_VERSION};
    use proptest::prelude::*;
    use std::sync::Mutex;

    fn record(id: &str, label: u32, values: Vec<f64>) -> NeroRecord {
        let (mean, variance, nan_count) = vector_stats(&values);
        NeroRecord {
            sample_id: id.into(),
            class_label: Some(label),
            outputs: vec![None; values.len()],
            input_hashes: vec![String::new(); values.len()],
            values,
            maps: None,
            mean,
            variance,
            nan_count,
            errors: vec![],
            truth: GroundTruth::ClassLabel { index: label, num_classes: 10 },
            consensus_contributing: None,
        }
    }

    #[test]
    fn aggregate_examples() {
        let one = record("a", 0, vec![0.2, 0.4, f64::NAN]);
        let agg = aggregate_nero(std::slice::from_ref(&one)).unwrap();
        assert_eq!(agg.values[..2], one.values[..2]);
        assert!(agg.values[2].is_nan());
        assert_eq!(agg.coverage, vec![1, 1, 0]);

        let two = record("b", 1, vec![0.8, 0.4, 0.5]);
        let agg = aggregate_nero(&[one, two]).unwrap();
        assert_eq!(agg.values, vec![0.5, 0.4, 0.5]);
        assert_eq!(agg.coverage, vec![2, 2, 1]);
        assert!(matches!(aggregate_nero(&[]), Err(EngineError::Empty)));
    }

    #[test]
    fn stats_exclude_nan() {
        let (m, v, n) = vector_stats(&[1.0, f64::NAN, 3.0]);
        assert_eq!((m, v, n), (2.0, 1.0, 1));
        let (m, v, n) = vector_stats(&[f64::NAN]);
        assert!(m.is_nan() && v.is_nan() && n == 1);
    }

    #[test]
    fn subset_by_label_and_id() {
        let rs = vec![record("a", 1, vec![0.0]), record("b", 2, vec![0.0]), record("c", 1, vec![0.0])];
        let ones = subset_filter(&rs, &SubsetPredicate::ClassLabel { labels: vec![1] });
        let ids: Vec<_> = ones.iter().map(|r| r.sample_id.as_str()).collect();
        assert_eq!(ids, vec!["a", "c"]);
        let all = subset_filter(&rs, &SubsetPredicate::ClassLabel { labels: vec![1, 2] });
        assert_eq!(all, rs);
        let none = subset_filter(&rs, &SubsetPredicate::Ids { ids: vec!["zz".into()] });
        assert!(none.is_empty());
        assert!(aggregate_nero(&none).is_err());
    }

    /// A model answering fixed probabilities regardless of input.
    struct Stub(Vec<f64>);
    impl Model for Stub {
        fn describe(&self) -> Result<ModelDescriptor, ModelError> {
            Ok(ModelDescriptor {
                name: "stub".into(),
                modality: Modality::ImageClassification,
                num_classes: Some(self.0.len() as u32),
                max_batch: 3,
                protocol_version: PROTOCOL_VERSION.into(),
            })
        }
        fn infer(&self, batch: &[InputSample]) -> Result<Vec<ModelOutput>, ModelError> {
            Ok(batch.iter().map(|_| ModelOutput::ClassProbs { probs: self.0.clone() }).collect())
        }
    }

    fn class_sample(label: u32) -> Sample {
        Sample {
            input: InputSample::image("s", Image::new(2, 2, 1, vec![0.0, 1.0, 0.5, 0.25])),
            truth: GroundTruth::ClassLabel { index: label, num_classes: 3 },
            class_label: Some(label),
            context: None,
        }
    }

    #[test]
    fn two_element_stub_orbit() {
        let orbit = enumerate_orbit(&OrbitSpec {
            rotation_step: 180.0,
            ..OrbitSpec::new(GroupKind::Rotation2d)
        })
        .unwrap();
        assert_eq!(orbit.len(), 2);
        let stub = Stub(vec![0.2, 0.5, 0.3]);
        let s = class_sample(2);
        let r = individual_nero(&s, &orbit, &stub, MetricName::Confidence, TruthMode::GroundTruth, 1).unwrap();
        // Both calls score p[2] = 0.3 against the unchanged label.
        assert_eq!(r.values, vec![0.3, 0.3]);
        let r = individual_nero(&s, &orbit, &stub, MetricName::Correct, TruthMode::GroundTruth, 2).unwrap();
        assert_eq!(r.values, vec![0.0, 0.0]);
        let s1 = class_sample(1);
        let r = individual_nero(&s1, &orbit, &stub, MetricName::Correct, TruthMode::GroundTruth, 2).unwrap();
        assert_eq!((r.values.clone(), r.mean, r.variance), (vec![1.0, 1.0], 1.0, 0.0));
    }

    fn detection_dataset() -> Dataset {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let source = Image::new(40, 40, 1, (0..1600).map(|_| rng.random_range(0.0..1.0)).collect());
        let mk = |id: &str, b: BBox, c: [f64; 2]| crop_window(id, source.clone(), &b, c, (16, 16), Some(0)).unwrap();
        Dataset {
            modality: Modality::ImageDetection,
            provenance: "test".into(),
            // Distinct window origins keep the two samples' crops distinct.
            samples: vec![
                mk("d0", BBox::new(15.0, 16.0, 22.0, 21.0), [20.0, 20.0]),
                mk("d1", BBox::new(17.0, 14.0, 25.0, 26.0), [19.0, 21.0]),
            ],
        }
    }

    fn small_translation() -> OrbitSpec {
        OrbitSpec {
            shift_extent: 8,
            shift_stride: 4,
            ..OrbitSpec::new(GroupKind::Translation2d)
        }
    }

    #[test]
    fn constant_detector_matches_closed_form() {
        let ds = detection_dataset();
        let orbit = enumerate_orbit(&small_translation()).unwrap();
        let m = SyntheticModel::new(SyntheticModelSpec::new(SyntheticKind::Constant), &ds, &orbit).unwrap();
        let r = individual_nero(&ds.samples[0], &orbit, &m, MetricName::DetectionIou, TruthMode::GroundTruth, 8)
            .unwrap();
        let GroundTruth::BBox { bbox: y } = ds.samples[0].truth else { panic!() };
        let (w, h) = (y.xmax - y.xmin, y.ymax - y.ymin);
        for (g, v) in orbit.elements.iter().zip(&r.values) {
            let GroupElement::Translation2d { tx, ty } = *g else { panic!() };
            // Overlap of two w×h rectangles offset by (tx, ty).
            let ix = (w - f64::from(tx.abs())).max(0.0);
            let iy = (h - f64::from(ty.abs())).max(0.0);
            let want = ix * iy / (2.0 * w * h - ix * iy);
            assert!((v - want).abs() < 1e-12, "{g:?}: {v} vs {want}");
            assert!((v - iou(&y, &y.translated(f64::from(tx), f64::from(ty)))).abs() < 1e-12);
        }
        assert_eq!(r.values[orbit.identity_index], 1.0);
    }

    #[test]
    fn oracle_run_is_flat_and_consensus_agrees() {
        let ds = detection_dataset();
        let spec = RunSpec::new("t", small_translation(), MetricName::DetectionIou);
        let orbit = enumerate_orbit(&spec.orbit).unwrap();
        let m = SyntheticModel::new(SyntheticModelSpec::new(SyntheticKind::Oracle), &ds, &orbit).unwrap();
        let res = run(&spec, &ds, &m).unwrap();
        for r in &res.records {
            assert!(r.values.iter().all(|v| *v == 1.0), "{:?}", r.values);
        }
        assert!(res.aggregate.values.iter().all(|v| *v == 1.0));
        let cons = run(&RunSpec { truth: TruthMode::Consensus, ..spec }, &ds, &m).unwrap();
        for (a, b) in res.records.iter().zip(&cons.records) {
            assert_eq!(a.truth, b.truth);
            assert_eq!(a.values, b.values);
        }
    }

    /// Fails every call whose batch contains a given orbit-0 input.
    struct Flaky {
        inner: SyntheticModel,
        poison: String,
        calls: Mutex<usize>,
    }
    impl Model for Flaky {
        fn describe(&self) -> Result<ModelDescriptor, ModelError> {
            self.inner.describe()
        }
        fn infer(&self, batch: &[InputSample]) -> Result<Vec<ModelOutput>, ModelError> {
            *self.calls.lock().unwrap() += 1;
            if batch.iter().any(|x| input_hash(x) == self.poison) {
                return Err(ModelError::Transport("connection reset".into()));
            }
            self.inner.infer(batch)
        }
    }

    #[test]
    fn failed_batch_becomes_nan_with_note() {
        let ds = detection_dataset();
        let mut spec = RunSpec::new("t", small_translation(), MetricName::DetectionIou);
        spec.batch_size = 5;
        let orbit = enumerate_orbit(&spec.orbit).unwrap();
        let inner = SyntheticModel::new(SyntheticModelSpec::new(SyntheticKind::Oracle), &ds, &orbit).unwrap();
        let s = &ds.samples[1];
        let poison = input_hash(&act_input(&orbit.elements[7], &s.input, s.context.as_ref()).unwrap());
        let m = Flaky { inner, poison, calls: Mutex::new(0) };
        let res = run(&spec, &ds, &m).unwrap();
        let r = &res.records[1];
        // Elements 5..10 shared the failing batch.
        for (i, v) in r.values.iter().enumerate() {
            assert_eq!(v.is_nan(), (5..10).contains(&i), "element {i}");
        }
        assert_eq!(r.nan_count, 5);
        assert_eq!(r.errors.len(), 5);
        assert!(r.errors[0].message.contains("connection reset"));
        assert!(res.records[0].values.iter().all(|v| *v == 1.0));
        assert_eq!(res.aggregate.coverage[6], 1);
    }

    #[test]
    fn modality_and_metric_checked() {
        let ds = detection_dataset();
        let stub = Stub(vec![1.0]);
        let spec = RunSpec::new("t", small_translation(), MetricName::DetectionIou);
        assert!(matches!(run(&spec, &ds, &stub), Err(EngineError::ModalityMismatch { .. })));
        let orbit = enumerate_orbit(&spec.orbit).unwrap();
        let m = SyntheticModel::new(SyntheticModelSpec::new(SyntheticKind::Oracle), &ds, &orbit).unwrap();
        let bad = RunSpec::new("t", small_translation(), MetricName::Rmse);
        assert!(matches!(run(&bad, &ds, &m), Err(EngineError::Incompatible(_))));
        let wide = RunSpec::new(
            "t",
            OrbitSpec {
                shift_extent: 16,
                shift_stride: 4,
                ..OrbitSpec::new(GroupKind::Translation2d)
            },
            MetricName::DetectionIou,
        );
        assert!(matches!(run(&wide, &ds, &m), Err(EngineError::Incompatible(_))));
        let none = RunSpec {
            subset: Some(SubsetPredicate::Ids { ids: vec![] }),
            ..spec
        };
        assert!(matches!(run(&none, &ds, &m), Err(EngineError::EmptySubset)));
    }

    #[test]
    fn shuffled_concurrent_runs_agree() {
        let ds = detection_dataset();
        let mut spec = RunSpec::new("t", small_translation(), MetricName::DetectionIou);
        let orbit = enumerate_orbit(&spec.orbit).unwrap();
        let mut ms = SyntheticModelSpec::new(SyntheticKind::Decay);
        ms.floor = 0.1;
        let m = SyntheticModel::new(ms, &ds, &orbit).unwrap();
        spec.batch_size = 4;
        spec.concurrency = 1;
        let a = run(&spec, &ds, &m).unwrap();
        spec.concurrency = 6;
        spec.shuffle_seed = Some(99);
        let b = run(&spec, &ds, &m).unwrap();
        assert_eq!(a.records, b.records);
        assert_eq!(a.aggregate, b.aggregate);
        assert_eq!(a.dr, b.dr);
        let k = a.orbit.identity_index;
        assert!(a.aggregate.values.iter().all(|v| *v <= a.aggregate.values[k]));
    }

    #[test]
    fn summary_respects_polarity() {
        let mut res_records = vec![record("a", 0, vec![0.1, 0.9, 0.5]), record("b", 0, vec![0.1, 0.1, 0.1])];
        res_records[1].variance = 0.0;
        let agg = aggregate_nero(&res_records).unwrap();
        let orbit = enumerate_orbit(&OrbitSpec {
            rotation_step: 120.0,
            ..OrbitSpec::new(GroupKind::Rotation2d)
        })
        .unwrap();
        let mut res = NeroResult {
            format: RESULT_FORMAT.into(),
            run_id: "r".into(),
            started_at: String::new(),
            finished_at: String::new(),
            orbit_spec: OrbitSpec::new(GroupKind::Rotation2d),
            orbit,
            metric: MetricName::Confidence,
            polarity: Polarity::HigherIsBetter,
            truth_mode: TruthMode::GroundTruth,
            model: Stub(vec![1.0]).describe().unwrap(),
            dataset: DatasetSummary {
                modality: Modality::ImageClassification,
                provenance: String::new(),
                sample_count: 2,
                subset: None,
                manifest: None,
            },
            dr: dr_layout(&res_records).unwrap(),
            records: res_records,
            aggregate: agg,
        };
        let s = summarize(&res, 1);
        assert_eq!(s.aggregate_best.unwrap().0, 1);
        assert_eq!(s.aggregate_worst.unwrap().0, 0);
        assert_eq!(s.worst_variance[0].0, "a");
        res.polarity = Polarity::LowerIsBetter;
        assert_eq!(summarize(&res, 1).aggregate_best.unwrap().0, 0);
    }

    fn brute_mean(records: &[NeroRecord], k: usize) -> f64 {
        let mut sum = 0.0;
        let mut n = 0;
        for r in records {
            if !r.values[k].is_nan() {
                sum += r.values[k];
                n += 1;
            }
        }
        sum / n as f64
    }

    proptest! {
        #[test]
        fn aggregate_of_one_is_identity(values in prop::collection::vec(-10.0f64..10.0, 1..40)) {
            let r = record("a", 0, values.clone());
            prop_assert_eq!(aggregate_nero(&[r]).unwrap().values, values);
        }

        #[test]
        fn aggregate_matches_brute_force(
            rows in prop::collection::vec(prop::collection::vec(prop::option::weighted(0.9, 0.0f64..1.0), 12), 1..30)
        ) {
            let records: Vec<NeroRecord> = rows
                .iter()
                .enumerate()
                .map(|(i, r)| record(&i.to_string(), 0, r.iter().map(|v| v.unwrap_or(f64::NAN)).collect()))
                .collect();
            let agg = aggregate_nero(&records).unwrap();
            for k in 0..12 {
                let want = brute_mean(&records, k);
                prop_assert!(want.is_nan() && agg.values[k].is_nan() || (agg.values[k] - want).abs() < 1e-12);
            }
        }
    }
}
