//! `sheetcoder` command line and the prediction service behind `sheetcoder serve`.

pub mod cli;
pub mod service;
