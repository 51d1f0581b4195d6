//! HTTP service running participant sessions against the trading testbed.

pub mod config;
pub mod data;
pub mod http;
pub mod session;
