//! The ecometer service: configuration, the HTTP API, the embedded
//! observing proxy and the event-sourced state behind them.

pub mod clock;
pub mod config;
pub mod http;
pub mod proxy;
pub mod service;

pub use clock::{Clock, ManualClock, SystemClock};
pub use config::ServiceConfig;
pub use service::{Service, ServiceError, TransactionReport};
