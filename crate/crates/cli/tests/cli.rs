use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nero_core::dataprep::{Dataset, DatasetManifest};
use nero_core::persist::{import_aggregate, import_records, read_result};

fn nero(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nero")).args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn digits(dir: &Path) -> PathBuf {
    let out = dir.join("digits");
    let o = nero(&["fixtures", "digits", "-o", out.to_str().unwrap(), "-n", "1", "--seed", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    out.join("manifest.json")
}

fn config(dir: &Path, dataset: &Path, model: &str) -> PathBuf {
    let path = dir.join("run.toml");
    let text = format!(
        r#"name = "cli"
dataset = "{}"
metric = "confidence"
output_dir = "results"
retries = 1
backoff_ms = 1
timeout_ms = 2000

[orbit]
group = "rotation2d"
rotation_step = 45

{model}
"#,
        dataset.display()
    );
    std::fs::write(&path, text).unwrap();
    path
}

fn result_files(dir: &Path) -> Vec<PathBuf> {
    match std::fs::read_dir(dir) {
        Ok(rd) => rd.map(|e| e.unwrap().path()).collect(),
        Err(_) => Vec::new(),
    }
}

#[test]
fn synthetic_run_writes_result_and_exports() {
    let dir = tempfile::tempdir().unwrap();
    let ds = digits(dir.path());
    let cfg = config(dir.path(), &ds, "[model.synthetic]\nkind = \"decay\"");
    let o = nero(&["run", "-c", cfg.to_str().unwrap(), "--top", "2"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("highest variance samples"), "{stdout}");

    let files = result_files(&dir.path().join("results"));
    assert_eq!(files.len(), 1);
    let result = read_result(&files[0]).unwrap();
    assert_eq!(result.records.len(), 10);
    assert_eq!(result.orbit.len(), 8);
    assert!(result.run_id.starts_with("cli-"));

    let csv = dir.path().join("csv");
    let o = nero(&["export", "-r", files[0].to_str().unwrap(), "--csv", csv.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let records = import_records(&csv.join("records.csv")).unwrap();
    assert_eq!(records.len(), 10);
    for (id, values) in &records {
        let rec = result.records.iter().find(|r| &r.sample_id == id).unwrap();
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(values), bits(&rec.values));
    }
    let aggregate = import_aggregate(&csv.join("aggregate.csv")).unwrap();
    assert_eq!(aggregate.len(), 8);
    let values: Vec<f64> = aggregate.iter().map(|a| a.0).collect();
    assert_eq!(values, result.aggregate.values);
}

#[test]
fn unreachable_model_exits_3_without_result() {
    let dir = tempfile::tempdir().unwrap();
    let ds = digits(dir.path());
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let cfg = config(dir.path(), &ds, &format!("[model]\nurl = \"http://127.0.0.1:{port}\""));
    let o = nero(&["run", "-c", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(result_files(&dir.path().join("results")).is_empty());
}

#[test]
fn invalid_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let ds = digits(dir.path());

    let cfg = config(dir.path(), &ds, "[model.synthetic]\nkind = \"decay\"\nbogus = 1");
    let o = nero(&["run", "-c", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));

    let cfg = config(dir.path(), &ds, "[model]\nurl = \"https://example.com\"");
    let o = nero(&["run", "-c", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));

    let o = nero(&["run", "-c", dir.path().join("missing.toml").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
}

#[test]
fn filter_drops_ineligible_detection_samples() {
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("scenes");
    let o = nero(&["fixtures", "detection", "-o", raw.to_str().unwrap(), "-n", "8"]);
    assert!(o.status.success(), "{}", stderr(&o));

    let out = dir.path().join("elsewhere/filtered.json");
    std::fs::create_dir_all(out.parent().unwrap()).unwrap();
    let o = nero(&[
        "filter",
        "-m",
        raw.join("manifest.json").to_str().unwrap(),
        "-o",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let total = DatasetManifest::load(&raw.join("manifest.json")).unwrap().samples.len();
    let kept = DatasetManifest::load(&out).unwrap().samples.len();
    assert_eq!(total, 8);
    assert_eq!(kept, 6);
    // Payloads resolve from the new location.
    let ds = Dataset::from_manifest_path(&out).unwrap();
    assert_eq!(ds.samples.len(), 6);
}

#[test]
fn golden_command_writes_fixtures() {
    let dir = tempfile::tempdir().unwrap();
    let o = nero(&["golden", "-o", dir.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let mut names: Vec<String> = result_files(dir.path())
        .iter()
        .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
        .collect();
    names.sort();
    assert_eq!(
        names,
        [
            "describe_response.json",
            "error_batch_too_large.json",
            "error_unsupported_version.json",
            "infer_request.json",
            "infer_response.json"
        ]
    );
}
