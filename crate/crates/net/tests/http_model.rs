use std::sync::Arc;

use axum::routing::get;
use axum::{Json, Router};
use nero_core::dataprep::fixtures;
use nero_core::dataprep::Dataset;
use nero_core::engine::{run, RunSpec};
use nero_core::groups::{enumerate_orbit, GroupKind, OrbitSpec};
use nero_core::metrics::MetricName;
use nero_core::modelproto::{
    Model, ModelDescriptor, ModelError, RetryPolicy, SyntheticKind, SyntheticModel, SyntheticModelSpec,
};
use nero_net::{model_router, BackgroundServer, HttpModel};

fn quick() -> RetryPolicy {
    RetryPolicy {
        retries: 1,
        base_delay_ms: 1,
        timeout_ms: 10_000,
    }
}

fn orbit_for(group: GroupKind) -> OrbitSpec {
    let mut spec = OrbitSpec::new(group);
    match group {
        GroupKind::Rotation2d => spec.rotation_step = 30.0,
        GroupKind::Translation2d => spec.shift_stride = 32,
        GroupKind::AxisAngle3d => {
            spec.axis_step = 90.0;
            spec.rot_angle_step = 90.0;
        }
        GroupKind::SquareSym => {}
    }
    spec
}

fn dataset(set: fixtures::FixtureSet) -> (tempfile::TempDir, Dataset) {
    let dir = tempfile::tempdir().unwrap();
    let manifest = set.write(dir.path()).unwrap();
    let ds = Dataset::from_manifest_path(&manifest).unwrap();
    (dir, ds)
}

/// The same synthetic model scored in-process and over HTTP must give
/// bit-identical NERO vectors.
fn agree(set: fixtures::FixtureSet, metric: MetricName, kind: SyntheticKind) {
    let (_dir, ds) = dataset(set);
    let orbit_spec = orbit_for(ds.modality.group_kind());
    let orbit = enumerate_orbit(&orbit_spec).unwrap();
    let mut mspec = SyntheticModelSpec::new(kind);
    mspec.max_batch = 16;
    let model = Arc::new(SyntheticModel::new(mspec, &ds, &orbit).unwrap());
    let server = BackgroundServer::start(model_router(model.clone()).unwrap(), "127.0.0.1:0").unwrap();
    let remote = HttpModel::connect(&server.url(), quick()).unwrap();
    assert_eq!(remote.describe().unwrap(), model.describe().unwrap());

    let spec = RunSpec::new("agree", orbit_spec, metric);
    let local = run(&spec, &ds, model.as_ref()).unwrap();
    let http = run(&spec, &ds, &remote).unwrap();
    assert_eq!(local.records.len(), http.records.len());
    for (a, b) in local.records.iter().zip(&http.records) {
        assert_eq!(a.sample_id, b.sample_id);
        assert_eq!(a.input_hashes, b.input_hashes);
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.values), bits(&b.values), "sample {}", a.sample_id);
        assert_eq!(a.nan_count, 0);
    }
}

#[test]
fn http_and_in_process_agree_for_digits() {
    agree(fixtures::digits(1, 3), MetricName::Confidence, SyntheticKind::Decay);
}

#[test]
fn http_and_in_process_agree_for_detection() {
    agree(fixtures::detection_scenes(3, 5, false), MetricName::DetectionIou, SyntheticKind::Decay);
}

#[test]
fn http_and_in_process_agree_for_flow() {
    agree(fixtures::piv_pairs(2, 7, 16), MetricName::Rmse, SyntheticKind::Decay);
}

#[test]
fn http_and_in_process_agree_for_point_clouds() {
    agree(fixtures::point_clouds(1, 11, 64), MetricName::Confidence, SyntheticKind::Oracle);
}

#[test]
fn protocol_version_mismatch_fails_handshake() {
    let future = ModelDescriptor {
        name: "future".into(),
        modality: nero_core::actions::Modality::ImageClassification,
        num_classes: Some(10),
        max_batch: 4,
        protocol_version: "2".into(),
    };
    let router = Router::new().route("/v1/describe", get(move || async move { Json(future.clone()) }));
    let server = BackgroundServer::start(router, "127.0.0.1:0").unwrap();
    match HttpModel::connect(&server.url(), quick()) {
        Err(ModelError::Handshake { expected, got }) => assert_eq!((expected.as_str(), got.as_str()), ("1", "2")),
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("handshake should fail"),
    }
}

#[test]
fn unreachable_endpoint_is_a_transport_error() {
    let addr = {
        let l = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        l.local_addr().unwrap()
    };
    let err = HttpModel::connect(&format!("http://{addr}"), quick()).err().unwrap();
    assert!(err.is_transient(), "{err}");
}

#[test]
fn server_errors_come_back_as_model_errors() {
    let (_dir, ds) = dataset(fixtures::digits(1, 1));
    let orbit = enumerate_orbit(&orbit_for(GroupKind::Rotation2d)).unwrap();
    let model = Arc::new(SyntheticModel::new(SyntheticModelSpec::new(SyntheticKind::Oracle), &ds, &orbit).unwrap());
    let server = BackgroundServer::start(model_router(model).unwrap(), "127.0.0.1:0").unwrap();
    let remote = HttpModel::connect(&server.url(), quick()).unwrap();
    // An input the oracle has never seen: it answers with an inference error.
    let mut odd = ds.samples[0].input.clone();
    if let nero_core::actions::InputData::Image { image } = &mut odd.data {
        image.data[0] = 0.123;
    }
    match remote.infer(&[odd]) {
        Err(ModelError::Server { code, .. }) => assert_eq!(code, "model_error"),
        other => panic!("{other:?}"),
    }
    assert!(matches!(remote.infer(&[]), Err(ModelError::EmptyBatch)));
}
