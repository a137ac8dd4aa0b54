//! A workflow node on real sockets: configuration, peer transport, the
//! node event loop, the client API and the HTTP monitor.

pub mod api;
pub mod config;
pub mod frame;
pub mod monitor;
pub mod runtime;
pub mod transport;

pub use api::ApiClient;
pub use config::NodeConfig;
pub use runtime::{Handle, Runtime};
