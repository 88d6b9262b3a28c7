//! Command line and HTTP front ends sharing one pipeline implementation.

pub mod commands;
pub mod render;
pub mod service;
pub mod store;
