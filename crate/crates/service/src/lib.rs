//! HTTP service and command-line front end for `medrag-core`.

pub mod api;
pub mod cli;
