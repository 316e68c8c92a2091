//! Timing datasets and parameter calibration.

mod dataset;
mod fit;
mod import;
pub mod nelder_mead;
mod synth;

pub use dataset::{
    load_dataset, read_dataset, save_dataset, write_dataset, DatasetError, TimingRecord, COLUMNS,
};
pub use fit::{
    evaluate, fit, fit_with_template, relative_error, FitConfig, FitError, FitResult, FixedParams,
};
pub use import::ColumnMapping;
pub use synth::{synthesize_dataset, synthetic_layouts, SYNTHETIC_DEVICE};
