//! Grids, formulas, context windows, datasets and metrics for neural formula suggestion.

pub mod a1;
pub mod context;
pub mod dataset;
pub mod formula;
pub mod grid;
pub mod metrics;
pub mod toy;
pub mod vocab;
