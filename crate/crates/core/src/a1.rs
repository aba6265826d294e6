//! A1-notation addressing: `B5`, `C2:C6`, `$A$1`.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Longest column label accepted; `XFD` is the widest sheet in common use.
const MAX_COL_LETTERS: usize = 4;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum A1Error {
    #[error("malformed cell reference `{0}`")]
    Malformed(String),
}

/// A 1-based (row, column) cell coordinate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellAddr {
    pub row: u32,
    pub col: u32,
}

impl CellAddr {
    /// Panics if either coordinate is zero.
    pub fn new(row: u32, col: u32) -> Self {
        assert!(row >= 1 && col >= 1, "cell coordinates are 1-based, got ({row}, {col})");
        Self { row, col }
    }

    /// The cell `dr` rows and `dc` columns away, or `None` if that falls off the sheet.
    pub fn offset(self, dr: i32, dc: i32) -> Option<CellAddr> {
        let row = i64::from(self.row) + i64::from(dr);
        let col = i64::from(self.col) + i64::from(dc);
        if row < 1 || col < 1 || row > i64::from(u32::MAX) || col > i64::from(u32::MAX) {
            return None;
        }
        Some(CellAddr { row: row as u32, col: col as u32 })
    }

    /// Signed (row, col) distance from `origin` to `self`.
    pub fn relative_to(self, origin: CellAddr) -> (i64, i64) {
        (
            i64::from(self.row) - i64::from(origin.row),
            i64::from(self.col) - i64::from(origin.col),
        )
    }
}

impl fmt::Display for CellAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", col_to_letters(self.col), self.row)
    }
}

/// Result of parsing a bare A1 reference.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum A1Ref {
    Single(CellAddr),
    /// Normalized so that `start` is the top-left corner.
    Range(CellAddr, CellAddr),
    /// The reference used `$`; absolute references are outside the relative grammar.
    AbsoluteFlagged,
}

/// One endpoint of a reference together with its `$` markers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct MarkedAddr {
    pub addr: CellAddr,
    pub abs_col: bool,
    pub abs_row: bool,
}

impl MarkedAddr {
    pub fn is_absolute(&self) -> bool {
        self.abs_col || self.abs_row
    }
}

impl fmt::Display for MarkedAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let dollar = |b: bool| if b { "$" } else { "" };
        write!(
            f,
            "{}{}{}{}",
            dollar(self.abs_col),
            col_to_letters(self.addr.col),
            dollar(self.abs_row),
            self.addr.row
        )
    }
}

/// Bijective base-26 column label: 1 → `A`, 26 → `Z`, 27 → `AA`.
pub fn col_to_letters(mut col: u32) -> String {
    debug_assert!(col >= 1);
    let mut out = Vec::new();
    while col > 0 {
        let rem = (col - 1) % 26;
        out.push(b'A' + rem as u8);
        col = (col - 1) / 26;
    }
    out.reverse();
    String::from_utf8(out).expect("ascii")
}

/// Inverse of [`col_to_letters`]; case-insensitive.
pub fn letters_to_col(letters: &str) -> Option<u32> {
    if letters.is_empty() || letters.len() > MAX_COL_LETTERS {
        return None;
    }
    letters.bytes().try_fold(0u32, |acc, b| {
        if !b.is_ascii_alphabetic() {
            return None;
        }
        Some(acc * 26 + u32::from(b.to_ascii_uppercase() - b'A' + 1))
    })
}

/// Parses one `[$]COL[$]ROW` endpoint.
pub fn parse_marked(text: &str) -> Result<MarkedAddr, A1Error> {
    let err = || A1Error::Malformed(text.to_string());
    let bytes = text.as_bytes();
    let mut i = 0;
    let abs_col = bytes.first() == Some(&b'$');
    if abs_col {
        i += 1;
    }
    let letters_start = i;
    while i < bytes.len() && bytes[i].is_ascii_alphabetic() {
        i += 1;
    }
    let letters = &text[letters_start..i];
    let abs_row = bytes.get(i) == Some(&b'$');
    if abs_row {
        i += 1;
    }
    let digits = &text[i..];
    if letters.is_empty() || digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return Err(err());
    }
    let col = letters_to_col(letters).ok_or_else(err)?;
    let row: u32 = digits.parse().map_err(|_| err())?;
    if row == 0 {
        return Err(err());
    }
    Ok(MarkedAddr { addr: CellAddr { row, col }, abs_col, abs_row })
}

/// Orders two endpoints componentwise into (top-left, bottom-right), carrying each
/// component's `$` marker along with it.
pub fn normalize_pair(a: MarkedAddr, b: MarkedAddr) -> (MarkedAddr, MarkedAddr) {
    let (top, bottom) = if a.addr.row <= b.addr.row { (a, b) } else { (b, a) };
    let (left, right) = if a.addr.col <= b.addr.col { (a, b) } else { (b, a) };
    (
        MarkedAddr {
            addr: CellAddr { row: top.addr.row, col: left.addr.col },
            abs_row: top.abs_row,
            abs_col: left.abs_col,
        },
        MarkedAddr {
            addr: CellAddr { row: bottom.addr.row, col: right.addr.col },
            abs_row: bottom.abs_row,
            abs_col: right.abs_col,
        },
    )
}

pub fn parse_a1(text: &str) -> Result<A1Ref, A1Error> {
    if text.is_empty() || !text.is_ascii() {
        return Err(A1Error::Malformed(text.to_string()));
    }
    let mut parts = text.split(':');
    let first = parts.next().unwrap_or_default();
    let second = parts.next();
    if parts.next().is_some() {
        return Err(A1Error::Malformed(text.to_string()));
    }
    let start = parse_marked(first).map_err(|_| A1Error::Malformed(text.to_string()))?;
    let end = second
        .map(|s| parse_marked(s).map_err(|_| A1Error::Malformed(text.to_string())))
        .transpose()?;
    if text.contains('$') {
        return Ok(A1Ref::AbsoluteFlagged);
    }
    Ok(match end {
        None => A1Ref::Single(start.addr),
        Some(end) => {
            let (a, b) = normalize_pair(start, end);
            A1Ref::Range(a.addr, b.addr)
        }
    })
}

/// Canonical upper-case rendering. `AbsoluteFlagged` has no canonical form.
pub fn render_a1(r: &A1Ref) -> Option<String> {
    match r {
        A1Ref::Single(a) => Some(a.to_string()),
        A1Ref::Range(a, b) => Some(format!("{a}:{b}")),
        A1Ref::AbsoluteFlagged => None,
    }
}
