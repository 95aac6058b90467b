//! Read-only results API under `/api/v1`.
//!
//! | route | body |
//! |---|---|
//! | `GET /api/v1/runs` | `{"runs": [RunListing]}` |
//! | `GET /api/v1/runs/{run}` | run metadata |
//! | `GET /api/v1/runs/{run}/aggregate` | aggregate vector, coverage, orbit layout |
//! | `GET /api/v1/runs/{run}/dr?color=mean\|variance` | 2-D layout with per-sample colors |
//! | `GET /api/v1/runs/{run}/records/{sample}` | one `NeroRecord` |
//! | `GET /api/v1/runs/{run}/detail/{sample}/{orbit_index}?live=false` | detail payload |
//!
//! Errors use the same `{"error": {"code", "message"}}` envelope as the
//! model protocol; unknown ids give 404.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::SystemTime;

use axum::extract::{Path as UrlPath, Query, State};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use nero_core::actions::{act_input, InputSample, ModelOutput};
use nero_core::dataprep::Dataset;
use nero_core::detail::{detail_view, DetailError, LiveOutput};
use nero_core::engine::{Aggregate, NeroResult};
use nero_core::groups::Orbit;
use nero_core::metrics::{MetricName, Polarity};
use nero_core::modelproto::wire::ErrorEnvelope;
use nero_core::modelproto::{Model, RetryPolicy};
use nero_core::persist::{list_results, read_result, RunListing};
use nero_core::projection::{color_values, ColorMode, DrLayout};
use nero_core::tensor::f64_vec;
use serde::{Deserialize, Serialize};

use crate::client::HttpModel;
use crate::model_server::error_response;

/// Where live detail outputs come from.
pub enum LiveSource {
    Model(Arc<dyn Model>),
    /// Connected lazily and reconnected after failures, so the endpoint may
    /// come and go while the results server runs.
    Url {
        url: String,
        policy: RetryPolicy,
        connected: Mutex<Option<Arc<HttpModel>>>,
    },
}

impl LiveSource {
    pub fn url(url: impl Into<String>, policy: RetryPolicy) -> LiveSource {
        LiveSource::Url {
            url: url.into(),
            policy,
            connected: Mutex::new(None),
        }
    }

    fn infer(&self, x: &InputSample) -> Result<ModelOutput, String> {
        let one = |m: &dyn Model| {
            m.infer(std::slice::from_ref(x))
                .map_err(|e| e.to_string())?
                .pop()
                .ok_or_else(|| "model returned no output".to_string())
        };
        match self {
            LiveSource::Model(m) => one(m.as_ref()),
            LiveSource::Url { url, policy, connected } => {
                let cached = connected.lock().unwrap().clone();
                let model = match cached {
                    Some(m) => m,
                    None => {
                        let m = Arc::new(HttpModel::connect(url, *policy).map_err(|e| e.to_string())?);
                        *connected.lock().unwrap() = Some(m.clone());
                        m
                    }
                };
                let out = one(model.as_ref());
                if out.is_err() {
                    *connected.lock().unwrap() = None;
                }
                out
            }
        }
    }
}

struct Cached<T> {
    stamp: Option<SystemTime>,
    value: Arc<T>,
}

pub struct ApiState {
    dir: PathBuf,
    live: Option<LiveSource>,
    results: Mutex<HashMap<PathBuf, Cached<NeroResult>>>,
    datasets: Mutex<HashMap<PathBuf, Arc<Dataset>>>,
}

fn not_found(what: impl Into<String>) -> Response {
    error_response(ErrorEnvelope::new("not_found", what))
}

fn bad_request(what: impl Into<String>) -> Response {
    error_response(ErrorEnvelope::new("bad_request", what))
}

fn internal(what: impl Into<String>) -> Response {
    error_response(ErrorEnvelope::new("internal", what))
}

fn mtime(path: &Path) -> Option<SystemTime> {
    std::fs::metadata(path).and_then(|m| m.modified()).ok()
}

impl ApiState {
    pub fn new(dir: impl Into<PathBuf>, live: Option<LiveSource>) -> ApiState {
        ApiState {
            dir: dir.into(),
            live,
            results: Mutex::new(HashMap::new()),
            datasets: Mutex::new(HashMap::new()),
        }
    }

    fn load(&self, path: &Path) -> Result<Arc<NeroResult>, Response> {
        let stamp = mtime(path);
        if let Some(c) = self.results.lock().unwrap().get(path) {
            if c.stamp == stamp && stamp.is_some() {
                return Ok(c.value.clone());
            }
        }
        let value = Arc::new(read_result(path).map_err(|e| internal(e.to_string()))?);
        self.results.lock().unwrap().insert(
            path.to_path_buf(),
            Cached {
                stamp,
                value: value.clone(),
            },
        );
        Ok(value)
    }

    /// Looks for `{run}.json` first, then for any result whose id matches.
    fn run(&self, run_id: &str) -> Result<Arc<NeroResult>, Response> {
        if !run_id.contains(['/', '\\']) && !run_id.starts_with('.') {
            let direct = self.dir.join(format!("{run_id}.json"));
            if direct.is_file() {
                if let Ok(r) = self.load(&direct) {
                    if r.run_id == run_id {
                        return Ok(r);
                    }
                }
            }
        }
        let (runs, _) = list_results(&self.dir).map_err(|e| internal(e.to_string()))?;
        let (listing, _) = runs
            .into_iter()
            .find(|(l, _)| l.run_id == run_id)
            .ok_or_else(|| not_found(format!("unknown run {run_id:?}")))?;
        self.load(&listing.path)
    }

    fn dataset(&self, manifest: &str) -> Option<Arc<Dataset>> {
        let key = PathBuf::from(manifest);
        if let Some(d) = self.datasets.lock().unwrap().get(&key) {
            return Some(d.clone());
        }
        let d = Arc::new(Dataset::from_manifest_path(&key).ok()?);
        self.datasets.lock().unwrap().insert(key, d.clone());
        Some(d)
    }
}

type Shared = State<Arc<ApiState>>;

#[derive(Serialize)]
struct RunsBody {
    runs: Vec<RunListing>,
}

async fn runs(State(s): Shared) -> Response {
    match tokio::task::spawn_blocking(move || list_results(&s.dir)).await {
        Ok(Ok((runs, _))) => Json(RunsBody {
            runs: runs.into_iter().map(|(l, _)| l).collect(),
        })
        .into_response(),
        Ok(Err(e)) => internal(e.to_string()),
        Err(e) => internal(e.to_string()),
    }
}

#[derive(Serialize)]
struct RunBody<'a> {
    run_id: &'a str,
    started_at: &'a str,
    finished_at: &'a str,
    metric: MetricName,
    polarity: Polarity,
    truth_mode: nero_core::engine::TruthMode,
    orbit_spec: &'a nero_core::groups::OrbitSpec,
    model: &'a nero_core::modelproto::ModelDescriptor,
    dataset: &'a nero_core::engine::DatasetSummary,
    sample_ids: Vec<&'a str>,
}

async fn run_meta(State(s): Shared, UrlPath(run_id): UrlPath<String>) -> Response {
    let r = match s.run(&run_id) {
        Ok(r) => r,
        Err(e) => return e,
    };
    Json(RunBody {
        run_id: &r.run_id,
        started_at: &r.started_at,
        finished_at: &r.finished_at,
        metric: r.metric,
        polarity: r.polarity,
        truth_mode: r.truth_mode,
        orbit_spec: &r.orbit_spec,
        model: &r.model,
        dataset: &r.dataset,
        sample_ids: r.records.iter().map(|x| x.sample_id.as_str()).collect(),
    })
    .into_response()
}

#[derive(Serialize)]
struct AggregateBody<'a> {
    run_id: &'a str,
    metric: MetricName,
    polarity: Polarity,
    orbit: &'a Orbit,
    #[serde(flatten)]
    aggregate: &'a Aggregate,
}

async fn aggregate(State(s): Shared, UrlPath(run_id): UrlPath<String>) -> Response {
    match s.run(&run_id) {
        Ok(r) => Json(AggregateBody {
            run_id: &r.run_id,
            metric: r.metric,
            polarity: r.polarity,
            orbit: &r.orbit,
            aggregate: &r.aggregate,
        })
        .into_response(),
        Err(e) => e,
    }
}

#[derive(Deserialize)]
struct DrQuery {
    color: Option<String>,
}

#[derive(Serialize)]
struct DrBody<'a> {
    run_id: &'a str,
    method: &'a str,
    coords: &'a [[f64; 2]],
    explained_variance: [f64; 2],
    coloring: ColorMode,
    sample_ids: Vec<&'a str>,
    class_labels: Vec<Option<u32>>,
    /// Per-sample color value; NaN for records with no valid entry.
    #[serde(with = "f64_vec")]
    colors: Vec<f64>,
    polarity: Polarity,
}

async fn dr(State(s): Shared, UrlPath(run_id): UrlPath<String>, Query(q): Query<DrQuery>) -> Response {
    let mode: ColorMode = match q.color.as_deref().map(str::parse).transpose() {
        Ok(m) => m.unwrap_or_default(),
        Err(e) => return bad_request(e),
    };
    let r = match s.run(&run_id) {
        Ok(r) => r,
        Err(e) => return e,
    };
    let DrLayout {
        method,
        coords,
        explained_variance,
        ..
    } = &r.dr;
    Json(DrBody {
        run_id: &r.run_id,
        method,
        coords,
        explained_variance: *explained_variance,
        coloring: mode,
        sample_ids: r.records.iter().map(|x| x.sample_id.as_str()).collect(),
        class_labels: r.records.iter().map(|x| x.class_label).collect(),
        colors: color_values(&r.records, mode),
        polarity: r.polarity,
    })
    .into_response()
}

async fn record(State(s): Shared, UrlPath((run_id, sample)): UrlPath<(String, String)>) -> Response {
    let r = match s.run(&run_id) {
        Ok(r) => r,
        Err(e) => return e,
    };
    match r.record(&sample) {
        Some(rec) => Json(rec).into_response(),
        None => not_found(format!("unknown sample {sample:?} in run {run_id:?}")),
    }
}

#[derive(Deserialize)]
struct DetailQuery {
    live: Option<bool>,
}

fn detail_blocking(s: &ApiState, run_id: &str, sample: &str, index: usize, want_live: bool) -> Response {
    let r = match s.run(run_id) {
        Ok(r) => r,
        Err(e) => return e,
    };
    // Validate ids before touching the dataset or the model.
    if let Err(e) = detail_view(&r, sample, index, LiveOutput::Cached) {
        return match e {
            DetailError::UnknownSample(_) | DetailError::UnknownIndex { .. } => not_found(e.to_string()),
            DetailError::Action(m) => internal(m),
        };
    }
    let g = r.orbit.elements[index];
    let input = r
        .dataset
        .manifest
        .as_deref()
        .and_then(|m| s.dataset(m))
        .and_then(|d| {
            let x = d.samples.iter().find(|x| x.input.id == sample)?;
            act_input(&g, &x.input, x.context.as_ref()).ok()
        });
    let live = match (&s.live, want_live) {
        (Some(src), true) => match &input {
            Some(x) => match src.infer(x) {
                Ok(out) => LiveOutput::Live(out),
                Err(e) => LiveOutput::Unavailable(e),
            },
            None => LiveOutput::Unavailable("dataset for this run is not available".into()),
        },
        _ => LiveOutput::Cached,
    };
    match detail_view(&r, sample, index, live) {
        Ok(mut view) => {
            view.input = input;
            Json(view).into_response()
        }
        Err(e) => internal(e.to_string()),
    }
}

async fn detail(
    State(s): Shared,
    UrlPath((run_id, sample, index)): UrlPath<(String, String, usize)>,
    Query(q): Query<DetailQuery>,
) -> Response {
    let want_live = q.live.unwrap_or(true);
    tokio::task::spawn_blocking(move || detail_blocking(&s, &run_id, &sample, index, want_live))
        .await
        .unwrap_or_else(|e| internal(e.to_string()))
}

async fn fallback() -> Response {
    not_found("no such endpoint")
}

pub fn results_router(state: ApiState) -> Router {
    Router::new()
        .route("/api/v1/runs", get(runs))
        .route("/api/v1/runs/{run}", get(run_meta))
        .route("/api/v1/runs/{run}/aggregate", get(aggregate))
        .route("/api/v1/runs/{run}/dr", get(dr))
        .route("/api/v1/runs/{run}/records/{sample}", get(record))
        .route("/api/v1/runs/{run}/detail/{sample}/{index}", get(detail))
        .fallback(fallback)
        .with_state(Arc::new(state))
}
