//! Automatic scheduling of array pipelines for GPUs.
//!
//! A pipeline ([`pipeline::PipelineGraph`]) is scheduled by a beam search
//! ([`search`]) over placements and tilings ([`loopnest`], [`enumerate`]).
//! Candidate schedules are featurized ([`featurize`]) and ranked by a learned
//! cost model ([`costmodel`]). The [`driver`] ties these together into the
//! one-shot, top-k and autotuning modes, using the runtime oracle in
//! [`machine`] in place of real hardware.

pub mod costmodel;
pub mod driver;
pub mod enumerate;
pub mod featurize;
pub mod loopnest;
pub mod machine;
pub mod pipeline;
pub mod sampling;
pub mod search;
