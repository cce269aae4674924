//! Helpers shared by the integration tests: random pipeline and schedule
//! generators and independent reference implementations.

#![allow(dead_code)]

pub mod exhaustive;
pub mod formula;
pub mod gen;
pub mod naive;

use std::path::PathBuf;

use gpusched::pipeline::{parse_pipeline, PipelineGraph};

pub fn bundled(name: &str) -> PipelineGraph {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("pipelines").join(name);
    let text = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    parse_pipeline(&text).unwrap()
}
