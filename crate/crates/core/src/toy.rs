//! Small synthetic corpora where the formula is a function of headers and data layout.
//!
//! Each sheet holds a table with a frozen header row, a label column, a few numeric
//! columns, and one formula column whose header names the aggregate, e.g. `Total`
//! gives `=SUM(B3:D3)` over the numeric cells to its left.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::a1::CellAddr;
use crate::dataset::{mine_sheets, ExampleRecord};
use crate::grid::{save_grid_file, CellValue, GridError, Sheet, GRID_EXTENSION};

pub const AGGREGATES: [(&str, &str); 4] = [("Total", "SUM"), ("Average", "AVERAGE"), ("Max", "MAX"), ("Min", "MIN")];

const COLUMN_NAMES: [&str; 8] = ["jan", "feb", "mar", "apr", "q1", "q2", "score", "units"];
const ROW_NAMES: [&str; 8] = ["alice", "bob", "carol", "dave", "north", "south", "east", "west"];

#[derive(Clone, Debug)]
pub struct ToySpec {
    /// (header text, function name) pairs to draw from.
    pub aggregates: Vec<(String, String)>,
    pub min_cols: u32,
    pub max_cols: u32,
    /// Data rows below the header.
    pub rows: u32,
    /// Leading data rows that never hold the formula. Setting this to at least the
    /// context radius keeps the header row out of the data part of the window.
    pub lead_rows: u32,
}

impl ToySpec {
    pub fn new(aggregates: &[(&str, &str)], min_cols: u32, max_cols: u32, rows: u32) -> Self {
        assert!(min_cols >= 1 && min_cols <= max_cols && rows >= 1);
        Self {
            aggregates: aggregates.iter().map(|(h, f)| (h.to_string(), f.to_string())).collect(),
            min_cols,
            max_cols,
            rows,
            lead_rows: 0,
        }
    }

    pub fn with_lead_rows(mut self, lead_rows: u32) -> Self {
        assert!(lead_rows < self.rows);
        self.lead_rows = lead_rows;
        self
    }
}

impl Default for ToySpec {
    fn default() -> Self {
        Self::new(&AGGREGATES, 2, 4, 4)
    }
}

/// One sheet with a single formula cell. Returns the sheet and the formula's address.
pub fn toy_sheet(name: &str, spec: &ToySpec, rng: &mut impl Rng) -> (Sheet, CellAddr) {
    let (header, func) = spec.aggregates.choose(rng).expect("at least one aggregate");
    let ncols = rng.gen_range(spec.min_cols..=spec.max_cols);
    let mut sheet = Sheet::new(name);
    sheet.set_frozen_rows(1);
    sheet.set(CellAddr::new(1, 1), CellValue::text("name"));
    for c in 0..ncols {
        let h = COLUMN_NAMES.choose(rng).expect("non-empty");
        sheet.set(CellAddr::new(1, 2 + c), CellValue::text(*h));
    }
    let out_col = 2 + ncols;
    sheet.set(CellAddr::new(1, out_col), CellValue::text(header.as_str()));
    for r in 0..spec.rows {
        let row = 2 + r;
        sheet.set(CellAddr::new(row, 1), CellValue::text(*ROW_NAMES.choose(rng).expect("non-empty")));
        for c in 0..ncols {
            sheet.set(CellAddr::new(row, 2 + c), CellValue::number(rng.gen_range(1..100).to_string()));
        }
    }
    let target = CellAddr::new(2 + rng.gen_range(spec.lead_rows..spec.rows), out_col);
    let first = CellAddr::new(target.row, 2);
    let last = CellAddr::new(target.row, out_col - 1);
    let source = format!("={func}({first}:{last})");
    sheet.set(target, CellValue::formula(source, "0").expect("starts with ="));
    (sheet, target)
}

/// `n` mined examples from freshly generated sheets.
pub fn toy_examples(n: usize, spec: &ToySpec, radius: u32, seed: u64) -> Vec<ExampleRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    let mut i = 0;
    while out.len() < n {
        let (sheet, _) = toy_sheet(&format!("t{i}"), spec, &mut rng);
        let (records, _) = mine_sheets(&format!("toy{i}{GRID_EXTENSION}"), &[sheet], radius);
        out.extend(records);
        i += 1;
    }
    out.truncate(n);
    out
}

/// Writes `files` grid files, each with `sheets_per_file` toy sheets.
pub fn write_toy_corpus(dir: &Path, files: usize, sheets_per_file: usize, spec: &ToySpec, seed: u64) -> Result<(), GridError> {
    std::fs::create_dir_all(dir).map_err(|source| GridError::Io { path: dir.display().to_string(), source })?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for f in 0..files {
        let sheets: Vec<Sheet> = (0..sheets_per_file).map(|s| toy_sheet(&format!("sheet{s}"), spec, &mut rng).0).collect();
        save_grid_file(dir.join(format!("toy{f:04}{GRID_EXTENSION}")), &sheets)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_decides_function() {
        let ex = toy_examples(40, &ToySpec::default(), 4, 1);
        assert_eq!(ex.len(), 40);
        for e in &ex {
            let header = e.window.header(0)[1..].join(" ");
            let func = AGGREGATES.iter().find(|(h, _)| h.to_lowercase() == header).expect("known header").1;
            assert!(e.gold.starts_with(func), "{header} {}", e.gold);
            assert_eq!(e.sketch_len, 2);
        }
    }

    #[test]
    fn lead_rows_push_the_header_out_of_the_data_window() {
        let spec = ToySpec::new(&AGGREGATES, 1, 2, 8).with_lead_rows(3);
        for e in toy_examples(30, &spec, 3, 4) {
            let row = e.target_addr().unwrap().row;
            assert!(row >= 5, "{row}");
            assert!(e.window.has_header());
        }
    }

    #[test]
    fn deterministic() {
        assert_eq!(toy_examples(5, &ToySpec::default(), 4, 9), toy_examples(5, &ToySpec::default(), 4, 9));
    }
}
