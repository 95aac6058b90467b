//! Run configuration, result files and CSV export.

pub mod config;
pub mod export;
pub mod results;

pub use config::{ConfigError, ModelSource, RunConfig, MODEL_URL_ENV};
pub use export::{export_csv, import_aggregate, import_records, ExportError};
pub use results::{list_results, read_result, write_result, ResultError, RunListing};
