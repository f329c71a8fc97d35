pub mod broker;
pub mod client;
pub mod codec;
pub mod fl;
pub mod payload;
pub mod runtime;
pub mod sim;
pub mod store;
pub mod topic;
