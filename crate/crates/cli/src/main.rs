use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};
use nero_core::dataprep::{fixtures, filter_detection_samples, DataError, Dataset, DatasetManifest, TruthRef};
use nero_core::engine::{self, summarize, EngineError, NeroResult};
use nero_core::groups::enumerate_orbit;
use nero_core::modelproto::wire::golden_fixtures;
use nero_core::modelproto::{Model, ModelError, RetryPolicy, SyntheticModel};
use nero_core::persist::{export_csv, read_result, write_result, ConfigError, ModelSource, RunConfig, ResultError};
use nero_net::{model_router, results_router, serve_forever, ApiState, HttpModel, LiveSource};

const EXIT_OTHER: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_MODEL: u8 = 3;
const EXIT_IO: u8 = 4;

#[derive(Parser)]
#[command(name = "nero", version, about = "Orbit-sweep equivariance evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Evaluate a model over an orbit and write a result file.
    Run {
        #[arg(short, long)]
        config: PathBuf,
        /// Number of high-variance samples listed in the summary.
        #[arg(long, default_value_t = 5)]
        top: usize,
    },
    /// Serve result files over the read-only /api/v1 results API.
    Serve {
        #[arg(short, long)]
        results: PathBuf,
        #[arg(short, long, default_value = "127.0.0.1:8080")]
        addr: String,
        /// Model endpoint for live detail recomputation.
        #[arg(long)]
        model_url: Option<String>,
    },
    /// Export a result as records.csv and aggregate.csv.
    Export {
        #[arg(short, long)]
        result: PathBuf,
        #[arg(long)]
        csv: PathBuf,
    },
    /// Serve the synthetic model from a run config over the model protocol.
    ServeModel {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(short, long, default_value = "127.0.0.1:9000")]
        addr: String,
    },
    /// Keep only detection samples usable under a translation sweep.
    Filter {
        #[arg(short, long)]
        manifest: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = fixtures::DETECTION_CLASSES)]
        classes: Vec<u32>,
        #[arg(long, default_value_t = fixtures::DETECTION_WINDOW)]
        window: usize,
        #[arg(long, default_value_t = fixtures::DETECTION_EXTENT)]
        extent: i32,
    },
    /// Write a synthetic dataset.
    Fixtures {
        #[arg(value_enum)]
        kind: FixtureKind,
        #[arg(short, long)]
        out: PathBuf,
        /// Samples per class (digits, clouds) or total samples (detection, piv).
        #[arg(short, long, default_value_t = 4)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write the protocol conformance fixtures.
    Golden {
        #[arg(short, long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum FixtureKind {
    Digits,
    Detection,
    Piv,
    Clouds,
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, message: impl std::fmt::Display) -> Failure {
        Failure {
            code,
            message: message.to_string(),
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        let code = match e {
            ConfigError::Io { .. } => EXIT_IO,
            _ => EXIT_CONFIG,
        };
        Failure::new(code, e)
    }
}

impl From<DataError> for Failure {
    fn from(e: DataError) -> Self {
        let code = match e {
            DataError::Io { .. } => EXIT_IO,
            _ => EXIT_CONFIG,
        };
        Failure::new(code, e)
    }
}

impl From<ModelError> for Failure {
    fn from(e: ModelError) -> Self {
        Failure::new(EXIT_MODEL, e)
    }
}

impl From<ResultError> for Failure {
    fn from(e: ResultError) -> Self {
        let code = match e {
            ResultError::Io { .. } => EXIT_IO,
            _ => EXIT_CONFIG,
        };
        Failure::new(code, e)
    }
}

impl From<EngineError> for Failure {
    fn from(e: EngineError) -> Self {
        let code = match e {
            EngineError::Model(_) | EngineError::AllFailed(_) => EXIT_MODEL,
            EngineError::Empty | EngineError::LengthMismatch { .. } | EngineError::RecordFailed { .. } => EXIT_OTHER,
            _ => EXIT_CONFIG,
        };
        Failure::new(code, e)
    }
}

fn io_failure(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure::new(EXIT_IO, format!("{}: {e}", path.display()))
}

fn load_model(cfg: &RunConfig, ds: &Dataset) -> Result<Box<dyn Model>, Failure> {
    Ok(match cfg.model_source() {
        ModelSource::Url(url) => Box::new(HttpModel::connect(&url, cfg.retry_policy())?),
        ModelSource::Synthetic(spec) => {
            let orbit = enumerate_orbit(&cfg.orbit).map_err(|e| Failure::new(EXIT_CONFIG, e))?;
            Box::new(SyntheticModel::new(spec, ds, &orbit)?)
        }
    })
}

fn print_summary(result: &NeroResult, path: &Path, top: usize) {
    let s = summarize(result, top);
    let label = |i: usize| result.orbit.elements[i].label();
    println!("run {} ({} samples, {} orbit elements, metric {})", result.run_id, s.samples, result.orbit.len(), result.metric.as_str());
    if s.failed_elements > 0 {
        println!("failed elements: {}", s.failed_elements);
    }
    if let Some((i, v)) = s.aggregate_best {
        println!("aggregate best:  {v:.6} at {}", label(i));
    }
    if let Some((i, v)) = s.aggregate_worst {
        println!("aggregate worst: {v:.6} at {}", label(i));
    }
    if !s.worst_variance.is_empty() {
        println!("highest variance samples:");
        for (id, var) in &s.worst_variance {
            println!("  {id}\t{var:.6}");
        }
    }
    println!("wrote {}", path.display());
}

fn cmd_run(config: &Path, top: usize) -> Result<(), Failure> {
    let cfg = RunConfig::load(config)?;
    let ds = Dataset::from_manifest_path(&cfg.dataset)?;
    let model = load_model(&cfg, &ds)?;
    let spec = cfg.run_spec()?;
    let mut result = engine::run(&spec, &ds, model.as_ref())?;
    let manifest = std::fs::canonicalize(&cfg.dataset).unwrap_or_else(|_| cfg.dataset.clone());
    result.dataset.manifest = Some(manifest.to_string_lossy().into_owned());
    let path = cfg.result_path();
    write_result(&result, &path)?;
    print_summary(&result, &path, top);
    Ok(())
}

fn cmd_serve(results: &Path, addr: &str, model_url: Option<String>) -> Result<(), Failure> {
    if !results.is_dir() {
        return Err(io_failure(results, "not a directory"));
    }
    let live = model_url.map(|u| LiveSource::url(u, RetryPolicy::default()));
    eprintln!("serving {} on http://{addr}/api/v1/runs", results.display());
    serve_forever(results_router(ApiState::new(results, live)), addr).map_err(|e| Failure::new(EXIT_IO, e))
}

fn cmd_export(result: &Path, out: &Path) -> Result<(), Failure> {
    let r = read_result(result)?;
    let paths = export_csv(&r, out).map_err(|e| Failure::new(EXIT_IO, e))?;
    for p in paths {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn cmd_serve_model(config: &Path, addr: &str) -> Result<(), Failure> {
    let mut cfg = RunConfig::load(config)?;
    let Some(spec) = cfg.model.synthetic.take() else {
        return Err(Failure::new(EXIT_CONFIG, "serve-model needs a [model.synthetic] table"));
    };
    let ds = Dataset::from_manifest_path(&cfg.dataset)?;
    let orbit = enumerate_orbit(&cfg.orbit).map_err(|e| Failure::new(EXIT_CONFIG, e))?;
    let model: Arc<dyn Model> = Arc::new(SyntheticModel::new(spec, &ds, &orbit)?);
    let router = model_router(model)?;
    eprintln!("serving model on http://{addr}/v1/describe");
    serve_forever(router, addr).map_err(|e| Failure::new(EXIT_IO, e))
}

fn absolute(base: &Path, rel: &str) -> String {
    let p = Path::new(rel);
    if p.is_absolute() {
        rel.to_string()
    } else {
        base.join(p).to_string_lossy().into_owned()
    }
}

fn cmd_filter(manifest: &Path, out: &Path, classes: &[u32], window: usize, extent: i32) -> Result<(), Failure> {
    let m = DatasetManifest::load(manifest)?;
    let mut kept = filter_detection_samples(&m, classes, (window, window), extent);
    // Payload paths stay valid wherever the filtered manifest is written.
    let base = std::fs::canonicalize(&m.base_dir).unwrap_or(m.base_dir.clone());
    for s in &mut kept.samples {
        s.payload = absolute(&base, &s.payload);
        if let TruthRef::Path(p) = &mut s.truth {
            *p = absolute(&base, p);
        }
    }
    kept.save(out)?;
    println!("kept {} of {} samples, wrote {}", kept.samples.len(), m.samples.len(), out.display());
    Ok(())
}

fn cmd_fixtures(kind: FixtureKind, out: &Path, n: usize, seed: u64) -> Result<(), Failure> {
    let set = match kind {
        FixtureKind::Digits => fixtures::digits(n, seed),
        FixtureKind::Detection => fixtures::detection_scenes(n, seed, true),
        FixtureKind::Piv => fixtures::piv_pairs(n, seed, 32),
        FixtureKind::Clouds => fixtures::point_clouds(n, seed, 256),
    };
    let path = set.write(out)?;
    println!("wrote {} samples, manifest {}", set.manifest.samples.len(), path.display());
    Ok(())
}

fn cmd_golden(out: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(out).map_err(|e| io_failure(out, e))?;
    for (name, value) in golden_fixtures() {
        let path = out.join(format!("{name}.json"));
        let text = serde_json::to_string_pretty(&value).expect("fixture serializes") + "\n";
        std::fs::write(&path, text).map_err(|e| io_failure(&path, e))?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run { config, top } => cmd_run(&config, top),
        Command::Serve { results, addr, model_url } => cmd_serve(&results, &addr, model_url),
        Command::Export { result, csv } => cmd_export(&result, &csv),
        Command::ServeModel { config, addr } => cmd_serve_model(&config, &addr),
        Command::Filter {
            manifest,
            out,
            classes,
            window,
            extent,
        } => cmd_filter(&manifest, &out, &classes, window, extent),
        Command::Fixtures { kind, out, n, seed } => cmd_fixtures(kind, &out, n, seed),
        Command::Golden { out } => cmd_golden(&out),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
