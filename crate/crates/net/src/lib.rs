//! HTTP transports: a client for remote models, a server for in-process
//! models, and the read-only results API.

pub mod client;
pub mod model_server;
pub mod results_api;
pub mod server;

pub use client::HttpModel;
pub use model_server::model_router;
pub use results_api::{results_router, ApiState, LiveSource};
pub use server::{serve_forever, BackgroundServer};
