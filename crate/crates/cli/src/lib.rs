//! Pipeline configuration and stages behind the `clusterplan` binary.

pub mod config;
pub mod pipeline;
pub mod stages;
