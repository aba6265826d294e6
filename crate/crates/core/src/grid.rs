//! In-memory sheets and the canonical `.grid.json` document format.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use crate::a1::CellAddr;

pub const GRID_EXTENSION: &str = ".grid.json";

#[derive(Debug, Error)]
pub enum GridError {
    #[error("malformed grid document at line {line}, column {column}: {message}")]
    Malformed { line: usize, column: usize, message: String },
    #[error("unknown cell kind `{0}`")]
    UnknownKind(String),
    #[error("invalid cell at row {row}, col {col}: {reason}")]
    InvalidCell { row: u32, col: u32, reason: String },
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CellKind {
    Number,
    Text,
    Formula,
    Empty,
}

impl CellKind {
    /// The kind name used both in grid files and as the leading cell token.
    pub fn tag(self) -> &'static str {
        match self {
            CellKind::Number => "num",
            CellKind::Text => "str",
            CellKind::Formula => "formula",
            CellKind::Empty => "empty",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        Some(match tag {
            "num" => CellKind::Number,
            "str" => CellKind::Text,
            "formula" => CellKind::Formula,
            "empty" => CellKind::Empty,
            _ => return None,
        })
    }
}

/// A cell's display value. Formula cells also carry their source text.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CellValue {
    kind: CellKind,
    literal: String,
    formula_source: Option<String>,
}

static EMPTY_CELL: CellValue = CellValue::empty();

impl CellValue {
    pub const fn empty() -> Self {
        Self { kind: CellKind::Empty, literal: String::new(), formula_source: None }
    }

    pub fn number(literal: impl Into<String>) -> Self {
        Self { kind: CellKind::Number, literal: literal.into(), formula_source: None }
    }

    pub fn text(literal: impl Into<String>) -> Self {
        Self { kind: CellKind::Text, literal: literal.into(), formula_source: None }
    }

    /// `source` must start with `=`; `display` is the last computed value.
    pub fn formula(source: impl Into<String>, display: impl Into<String>) -> Result<Self, String> {
        let source = source.into();
        if source.len() < 2 || !source.starts_with('=') {
            return Err(format!("formula source must start with `=`: {source:?}"));
        }
        Ok(Self { kind: CellKind::Formula, literal: display.into(), formula_source: Some(source) })
    }

    pub fn kind(&self) -> CellKind {
        self.kind
    }

    pub fn literal(&self) -> &str {
        &self.literal
    }

    pub fn formula_source(&self) -> Option<&str> {
        self.formula_source.as_deref()
    }

    pub fn is_empty(&self) -> bool {
        self.kind == CellKind::Empty
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sheet {
    pub name: String,
    cells: BTreeMap<CellAddr, CellValue>,
    frozen_rows: u32,
    max_row: u32,
    max_col: u32,
}

impl Sheet {
    pub fn new(name: impl Into<String>) -> Self {
        Self { name: name.into(), cells: BTreeMap::new(), frozen_rows: 0, max_row: 0, max_col: 0 }
    }

    /// Stores `value`, growing the bounds to include `addr`.
    pub fn set(&mut self, addr: CellAddr, value: CellValue) {
        self.max_row = self.max_row.max(addr.row);
        self.max_col = self.max_col.max(addr.col);
        self.cells.insert(addr, value);
    }

    pub fn set_frozen_rows(&mut self, n: u32) {
        self.frozen_rows = n;
        self.max_row = self.max_row.max(n);
    }

    pub fn frozen_rows(&self) -> u32 {
        self.frozen_rows
    }

    /// (max_row, max_col); (0, 0) for a sheet with no cells.
    pub fn bounds(&self) -> (u32, u32) {
        (self.max_row, self.max_col)
    }

    pub fn contains(&self, addr: CellAddr) -> bool {
        addr.row <= self.max_row && addr.col <= self.max_col
    }

    /// Total: absent and out-of-bounds coordinates read as an empty cell.
    pub fn cell_at(&self, addr: CellAddr) -> &CellValue {
        self.cells.get(&addr).unwrap_or(&EMPTY_CELL)
    }

    /// Stored cells in row-major order.
    pub fn cells(&self) -> impl Iterator<Item = (CellAddr, &CellValue)> {
        self.cells.iter().map(|(a, v)| (*a, v))
    }

    pub fn formula_cells(&self) -> impl Iterator<Item = (CellAddr, &CellValue)> {
        self.cells().filter(|(_, v)| v.kind == CellKind::Formula)
    }
}

// Field order of these records is alphabetical so that serialization is canonical.

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GridDoc {
    sheets: Vec<SheetDoc>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SheetDoc {
    cells: Vec<CellDoc>,
    frozen_rows: u32,
    name: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CellDoc {
    col: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    formula: Option<String>,
    kind: String,
    row: u32,
    #[serde(default)]
    value: String,
}

fn sheet_from_doc(doc: SheetDoc) -> Result<Sheet, GridError> {
    let mut sheet = Sheet::new(doc.name);
    sheet.set_frozen_rows(doc.frozen_rows);
    for cell in doc.cells {
        let invalid = |reason: &str| GridError::InvalidCell {
            row: cell.row,
            col: cell.col,
            reason: reason.to_string(),
        };
        if cell.row == 0 || cell.col == 0 {
            return Err(invalid("coordinates are 1-based"));
        }
        let kind = CellKind::from_tag(&cell.kind).ok_or_else(|| GridError::UnknownKind(cell.kind.clone()))?;
        let value = match kind {
            CellKind::Formula => {
                let source = cell.formula.clone().ok_or_else(|| invalid("formula cell without `formula`"))?;
                CellValue::formula(source, cell.value.clone()).map_err(|e| invalid(&e))?
            }
            _ if cell.formula.is_some() => return Err(invalid("`formula` present on a non-formula cell")),
            CellKind::Empty if !cell.value.is_empty() => return Err(invalid("empty cell with a value")),
            CellKind::Empty => CellValue::empty(),
            CellKind::Number => CellValue::number(cell.value.clone()),
            CellKind::Text => CellValue::text(cell.value.clone()),
        };
        sheet.set(CellAddr::new(cell.row, cell.col), value);
    }
    Ok(sheet)
}

fn sheet_to_doc(sheet: &Sheet) -> SheetDoc {
    SheetDoc {
        name: sheet.name.clone(),
        frozen_rows: sheet.frozen_rows,
        cells: sheet
            .cells()
            .map(|(addr, v)| CellDoc {
                row: addr.row,
                col: addr.col,
                kind: v.kind.tag().to_string(),
                value: v.literal.clone(),
                formula: v.formula_source.clone(),
            })
            .collect(),
    }
}

pub fn parse_grid(text: &str) -> Result<Vec<Sheet>, GridError> {
    let doc: GridDoc = serde_json::from_str(text).map_err(|e| GridError::Malformed {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    doc.sheets.into_iter().map(sheet_from_doc).collect()
}

/// Canonical text: alphabetical keys, cells in row-major order, trailing newline.
pub fn render_grid(sheets: &[Sheet]) -> String {
    let doc = GridDoc { sheets: sheets.iter().map(sheet_to_doc).collect() };
    let mut out = serde_json::to_string_pretty(&doc).expect("grid documents always serialize");
    out.push('\n');
    out
}

pub fn load_grid_file(path: impl AsRef<Path>) -> Result<Vec<Sheet>, GridError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| GridError::Io { path: path.display().to_string(), source })?;
    parse_grid(&text)
}

pub fn save_grid_file(path: impl AsRef<Path>, sheets: &[Sheet]) -> Result<(), GridError> {
    let path = path.as_ref();
    fs::write(path, render_grid(sheets)).map_err(|source| GridError::Io { path: path.display().to_string(), source })
}
