//! Operational surface: configuration, artifact persistence, the routing
//! service and the command implementations behind the `fleetroute` binary.

pub mod commands;
pub mod config;
pub mod error;
pub mod runtime;
pub mod service;

pub use config::{load_config, GatewayConfig, LoadedConfig};
pub use error::GatewayError;
pub use runtime::Runtime;
pub use service::{ResponseFilter, RouteRequest, RouteResponse, Service};
