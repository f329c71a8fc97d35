//! Node logic shared by the simulator and the daemons, plus configuration
//! and operator tooling.

pub mod admin;
pub mod config;
mod daemon;
mod node;

pub use daemon::*;
pub use node::*;
