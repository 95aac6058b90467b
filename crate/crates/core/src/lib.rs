pub mod actions;
pub mod consensus;
pub mod dataprep;
pub mod groups;
pub mod metrics;
pub mod modelproto;
pub mod tensor;
pub mod engine;
pub mod projection;
pub mod persist;
pub mod detail;
