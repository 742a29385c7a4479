pub mod exec;
pub mod geometry;
pub mod inference;
pub mod losses;
pub mod fusion;
pub mod metrics;
pub mod stats;
pub mod synth;
pub mod study;
pub mod records;
pub mod pipeline;
