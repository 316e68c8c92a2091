//! Layer FLOPs counting, the alpha-corrected FLOPs execution-time model, its
//! calibration, and a single-threaded CPU benchmark harness.

pub mod alpha;
pub mod bench;
pub mod calibration;
pub mod layer;
pub mod report;
pub mod sweep;
