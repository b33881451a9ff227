//! Expert-selection trace analytics and MoE decode serving simulation on
//! mesh-connected multi-chiplet accelerators.

pub mod allocator;
pub mod engine;
pub mod fabric;
pub mod placement;
pub mod predictor;
pub mod profiler;
pub mod trace;
