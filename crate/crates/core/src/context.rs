//! Tabular context around a target cell: window extraction, cell tokenization,
//! per-row/per-column token sequences, and bundle tiling.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::a1::CellAddr;
use crate::grid::{CellKind, CellValue, Sheet};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const SEP: &str = "[SEP]";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TilingError {
    #[error("{rows} data rows cannot be tiled by bundles of {per_bundle} (need an odd divisor)")]
    Indivisible { rows: u32, per_bundle: u32 },
    #[error("bundle tiling does not partition -{radius}..={radius}: {detail}")]
    NotAPartition { radius: u32, detail: String },
}

/// `[kind] ++ value tokens`; empty cells produce nothing.
///
/// Numbers keep their literal verbatim. Text is lower-cased, split on whitespace,
/// with each ASCII punctuation character as its own token.
pub fn tokenize_cell(cell: &CellValue) -> Vec<String> {
    let kind = cell.kind();
    if kind == CellKind::Empty {
        return Vec::new();
    }
    let mut out = vec![kind.tag().to_string()];
    let literal = cell.literal().trim();
    let numeric = !literal.is_empty() && literal.parse::<f64>().is_ok_and(f64::is_finite);
    if kind == CellKind::Number || (kind == CellKind::Formula && numeric) {
        if !literal.is_empty() {
            out.push(literal.to_string());
        }
        return out;
    }
    out.extend(split_words(literal));
    out
}

fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        if ch.is_whitespace() || ch.is_ascii_punctuation() {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            if ch.is_ascii_punctuation() {
                out.push(ch.to_string());
            }
        } else {
            cur.extend(ch.to_lowercase());
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// The (2D+2) x (2D+1) neighbourhood of a target cell. Row 0 is the header row;
/// rows 1..=2D+1 are data offsets -D..=D. Columns are offsets -D..=D.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextWindow {
    pub radius: u32,
    /// `cells[row][col]`, token lists.
    pub cells: Vec<Vec<Vec<String>>>,
    /// False when outside the sheet, or masked out.
    pub valid: Vec<Vec<bool>>,
}

impl ContextWindow {
    pub fn width(&self) -> usize {
        2 * self.radius as usize + 1
    }

    fn data_row_index(&self, dr: i32) -> usize {
        (dr + self.radius as i32) as usize + 1
    }

    fn col_index(&self, dc: i32) -> usize {
        (dc + self.radius as i32) as usize
    }

    pub fn header(&self, dc: i32) -> &[String] {
        &self.cells[0][self.col_index(dc)]
    }

    pub fn data(&self, dr: i32, dc: i32) -> &[String] {
        &self.cells[self.data_row_index(dr)][self.col_index(dc)]
    }

    pub fn data_valid(&self, dr: i32, dc: i32) -> bool {
        self.valid[self.data_row_index(dr)][self.col_index(dc)]
    }

    pub fn header_valid(&self, dc: i32) -> bool {
        self.valid[0][self.col_index(dc)]
    }

    pub fn has_header(&self) -> bool {
        self.valid[0].iter().any(|v| *v)
    }

    /// The same window with the header row emptied, as for a sheet without a frozen row.
    pub fn without_header(&self) -> Self {
        let mut w = self.clone();
        w.cells[0].iter_mut().for_each(Vec::clear);
        w.valid[0].iter_mut().for_each(|v| *v = false);
        w
    }

    fn offsets(&self) -> std::ops::RangeInclusive<i32> {
        let d = self.radius as i32;
        -d..=d
    }
}

pub fn extract_window(sheet: &Sheet, target: CellAddr, radius: u32) -> ContextWindow {
    let d = radius as i32;
    let width = 2 * radius as usize + 1;
    let mut cells = vec![vec![Vec::new(); width]; width + 1];
    let mut valid = vec![vec![false; width]; width + 1];
    let in_sheet = |a: Option<CellAddr>| a.filter(|a| sheet.contains(*a));
    for (j, dc) in (-d..=d).enumerate() {
        if sheet.frozen_rows() >= 1 {
            let col = target.offset(0, dc).map(|a| a.col);
            if let Some(addr) = in_sheet(col.map(|c| CellAddr::new(1, c))) {
                cells[0][j] = tokenize_cell(sheet.cell_at(addr));
                valid[0][j] = true;
            }
        }
        for (i, dr) in (-d..=d).enumerate() {
            if let Some(addr) = in_sheet(target.offset(dr, dc)) {
                valid[i + 1][j] = true;
                if (dr, dc) != (0, 0) {
                    cells[i + 1][j] = tokenize_cell(sheet.cell_at(addr));
                }
            }
        }
    }
    ContextWindow { radius, cells, valid }
}

/// Invalidates every data row whose offset is not in `visible`.
pub fn apply_row_mask(window: &ContextWindow, visible: &BTreeSet<i32>) -> ContextWindow {
    let mut w = window.clone();
    for dr in window.offsets() {
        if !visible.contains(&dr) {
            let i = w.data_row_index(dr);
            w.cells[i].iter_mut().for_each(Vec::clear);
            w.valid[i].iter_mut().for_each(|v| *v = false);
        }
    }
    w
}

/// Fixed-length token sequence; `mask[i]` is false exactly on padding.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSeq {
    pub tokens: Vec<String>,
    pub mask: Vec<bool>,
}

impl TokenSeq {
    pub fn empty(len: usize) -> Self {
        Self { tokens: vec![PAD.to_string(); len], mask: vec![false; len] }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Joins non-empty cells with `[SEP]`, dropping whole cells farthest from `center`
/// (ties: the lower index first) until the result fits in `len`, then pads.
/// `[SEP]` counts against the budget.
fn join_cells(cells: &[(i32, &[String])], len: usize) -> TokenSeq {
    let mut kept: Vec<(i32, &[String])> = cells.iter().filter(|(_, t)| !t.is_empty()).copied().collect();
    let cost = |kept: &[(i32, &[String])]| -> usize {
        kept.iter().map(|(_, t)| t.len()).sum::<usize>() + kept.len().saturating_sub(1)
    };
    while cost(&kept) > len {
        // Farthest offset; on a tie, the negative (left/upper) side goes first.
        let (drop, _) = kept
            .iter()
            .enumerate()
            .max_by_key(|(_, (off, _))| (off.abs(), -off.signum()))
            .expect("non-empty while over budget");
        kept.remove(drop);
    }
    let mut seq = TokenSeq::empty(len);
    let mut at = 0;
    for (k, (_, toks)) in kept.iter().enumerate() {
        if k > 0 {
            seq.tokens[at] = SEP.to_string();
            seq.mask[at] = true;
            at += 1;
        }
        for t in toks.iter() {
            seq.tokens[at] = t.clone();
            seq.mask[at] = true;
            at += 1;
        }
    }
    seq
}

/// Which row of the window to serialize.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RowSel {
    Header,
    Data(i32),
}

/// One row as a length-`len` sequence; trimming favours cells near the target column.
pub fn assemble_row_seq(window: &ContextWindow, row: RowSel, len: usize) -> TokenSeq {
    let cells: Vec<(i32, &[String])> = window
        .offsets()
        .map(|dc| {
            let toks = match row {
                RowSel::Header => window.header(dc),
                RowSel::Data(dr) => window.data(dr, dc),
            };
            (dc, toks)
        })
        .collect();
    join_cells(&cells, len)
}

/// One data column, top to bottom; trimming favours cells near the target row.
pub fn assemble_col_seq(window: &ContextWindow, dc: i32, len: usize) -> TokenSeq {
    let cells: Vec<(i32, &[String])> = window.offsets().map(|dr| (dr, window.data(dr, dc))).collect();
    join_cells(&cells, len)
}

/// Data offsets covered by bundle `b` when each bundle holds `per_bundle` rows.
pub fn bundle_members(b: i32, per_bundle: u32) -> std::ops::RangeInclusive<i32> {
    let n = per_bundle as i32;
    let half = (n - 1) / 2;
    n * b - half..=n * b + half
}

/// Bundle indices with their members; checks that they partition `-radius..=radius`.
pub fn tiling(radius: u32, per_bundle: u32) -> Result<Vec<(i32, Vec<i32>)>, TilingError> {
    let rows = 2 * radius + 1;
    if per_bundle == 0 || per_bundle % 2 == 0 || rows % per_bundle != 0 {
        return Err(TilingError::Indivisible { rows, per_bundle });
    }
    let k = (rows / per_bundle) as i32;
    let half = (k - 1) / 2;
    let bundles: Vec<(i32, Vec<i32>)> = (-half..=half).map(|b| (b, bundle_members(b, per_bundle).collect())).collect();
    check_partition(radius, &bundles)?;
    Ok(bundles)
}

/// Every offset in `-radius..=radius` appears in exactly one bundle.
pub fn check_partition(radius: u32, bundles: &[(i32, Vec<i32>)]) -> Result<(), TilingError> {
    let d = radius as i32;
    let mut seen = vec![0u32; (2 * d + 1) as usize];
    for (b, members) in bundles {
        for &m in members {
            if !(-d..=d).contains(&m) {
                return Err(TilingError::NotAPartition { radius, detail: format!("bundle {b} holds {m}") });
            }
            seen[(m + d) as usize] += 1;
        }
    }
    if let Some(i) = seen.iter().position(|c| *c != 1) {
        return Err(TilingError::NotAPartition {
            radius,
            detail: format!("offset {} covered {} times", i as i32 - d, seen[i]),
        });
    }
    Ok(())
}

/// A header sequence followed by `per_bundle` member sequences.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Bundle {
    pub index: i32,
    pub header: TokenSeq,
    pub members: Vec<(i32, TokenSeq)>,
}

impl Bundle {
    pub fn tokens(&self) -> impl Iterator<Item = &str> {
        self.header.tokens.iter().chain(self.members.iter().flat_map(|(_, s)| s.tokens.iter())).map(String::as_str)
    }

    pub fn mask(&self) -> impl Iterator<Item = bool> + '_ {
        self.header.mask.iter().chain(self.members.iter().flat_map(|(_, s)| s.mask.iter())).copied()
    }

    /// 0 on header positions, 1 on member positions.
    pub fn segment_ids(&self) -> impl Iterator<Item = u8> + '_ {
        let h = self.header.len();
        let m: usize = self.members.iter().map(|(_, s)| s.len()).sum();
        std::iter::repeat_n(0, h).chain(std::iter::repeat_n(1, m))
    }

    pub fn len(&self) -> usize {
        self.header.len() + self.members.iter().map(|(_, s)| s.len()).sum::<usize>()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BundleSet {
    /// `[H_r, R_{m..}]` per bundle, in bundle order.
    pub row_bundles: Vec<Bundle>,
    /// `[C_0, C_{m..}]` per bundle; `C_0` plays the header role in every one.
    pub col_bundles: Vec<Bundle>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BundleLayout {
    pub radius: u32,
    pub per_bundle: u32,
    pub seq_len: usize,
}

pub fn build_bundles(window: &ContextWindow, layout: BundleLayout) -> Result<BundleSet, TilingError> {
    assert_eq!(window.radius, layout.radius, "window radius does not match the bundle layout");
    let tiles = tiling(layout.radius, layout.per_bundle)?;
    let header = assemble_row_seq(window, RowSel::Header, layout.seq_len);
    let center_col = assemble_col_seq(window, 0, layout.seq_len);
    let mut row_bundles = Vec::with_capacity(tiles.len());
    let mut col_bundles = Vec::with_capacity(tiles.len());
    for (b, members) in &tiles {
        row_bundles.push(Bundle {
            index: *b,
            header: header.clone(),
            members: members.iter().map(|&m| (m, assemble_row_seq(window, RowSel::Data(m), layout.seq_len))).collect(),
        });
        col_bundles.push(Bundle {
            index: *b,
            header: center_col.clone(),
            members: members.iter().map(|&m| (m, assemble_col_seq(window, m, layout.seq_len))).collect(),
        });
    }
    Ok(BundleSet { row_bundles, col_bundles })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn strs(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn tokenize_examples() {
        assert_eq!(tokenize_cell(&CellValue::number("0")), strs(&["num", "0"]));
        assert!(tokenize_cell(&CellValue::empty()).is_empty());
        assert_eq!(tokenize_cell(&CellValue::text("Total price")), strs(&["str", "total", "price"]));
        assert_eq!(tokenize_cell(&CellValue::text("N/A, maybe")), strs(&["str", "n", "/", "a", ",", "maybe"]));
        assert_eq!(tokenize_cell(&CellValue::number("3.25")), strs(&["num", "3.25"]));
        assert_eq!(tokenize_cell(&CellValue::formula("=A1", "3.5").unwrap()), strs(&["formula", "3.5"]));
        assert_eq!(tokenize_cell(&CellValue::formula("=A1", "Hi there").unwrap()), strs(&["formula", "hi", "there"]));
    }

    fn sheet_with(rows: u32, cols: u32, frozen: u32) -> Sheet {
        let mut s = Sheet::new("s");
        for r in 1..=rows {
            for c in 1..=cols {
                s.set(CellAddr::new(r, c), CellValue::number(format!("{}", r * 100 + c)));
            }
        }
        s.set_frozen_rows(frozen);
        s
    }

    #[test]
    fn window_dimensions_and_blanked_target() {
        let s = sheet_with(30, 30, 1);
        let w = extract_window(&s, CellAddr::new(15, 15), 10);
        assert_eq!(w.cells.len(), 22);
        assert!(w.cells.iter().all(|r| r.len() == 21));
        assert!(w.data(0, 0).is_empty());
        assert!(w.data_valid(0, 0));
        assert_eq!(w.data(-1, 0), strs(&["num", "1415"]).as_slice());
        assert_eq!(w.header(0), strs(&["num", "115"]).as_slice());
    }

    #[test]
    fn header_follows_frozen_rows() {
        let s = sheet_with(7, 4, 1);
        let w = extract_window(&s, CellAddr::new(4, 4), 10);
        assert!(w.has_header());
        assert_eq!(w.header(-3), strs(&["num", "101"]).as_slice());
        assert!(!w.header_valid(1));
        // Rows above row 1 and below row 7 are outside the sheet.
        assert!(!w.data_valid(-4, 0));
        assert!(w.data_valid(-3, 0));
        assert!(w.data_valid(3, 0));
        assert!(!w.data_valid(4, 0));

        let unfrozen = sheet_with(7, 4, 0);
        let w = extract_window(&unfrozen, CellAddr::new(4, 4), 10);
        assert!(!w.has_header());
        assert!(w.cells[0].iter().all(Vec::is_empty));
    }

    #[test]
    fn single_cell_sheet() {
        let s = sheet_with(1, 1, 0);
        let w = extract_window(&s, CellAddr::new(1, 1), 10);
        let valid: usize = w.valid.iter().flatten().filter(|v| **v).count();
        assert_eq!(valid, 1);
        assert!(w.data_valid(0, 0));
        assert!(w.data(0, 0).is_empty());
    }

    fn window_from_row(cells: &[(i32, Vec<String>)], radius: u32) -> ContextWindow {
        let width = 2 * radius as usize + 1;
        let mut w = ContextWindow { radius, cells: vec![vec![Vec::new(); width]; width + 1], valid: vec![vec![true; width]; width + 1] };
        for (dc, toks) in cells {
            let j = (dc + radius as i32) as usize;
            w.cells[1 + radius as usize][j] = toks.clone();
        }
        w
    }

    #[test]
    fn row_concatenation_with_separators() {
        let w = window_from_row(&[(-1, strs(&["a"])), (1, strs(&["b"])), (2, strs(&["c"]))], 3);
        let seq = assemble_row_seq(&w, RowSel::Data(0), 8);
        assert_eq!(seq.tokens, strs(&["a", SEP, "b", SEP, "c", PAD, PAD, PAD]));
        assert_eq!(seq.mask, vec![true, true, true, true, true, false, false, false]);
    }

    #[test]
    fn empty_row_is_all_padding() {
        let w = window_from_row(&[], 3);
        let seq = assemble_row_seq(&w, RowSel::Data(2), 5);
        assert_eq!(seq, TokenSeq::empty(5));
    }

    /// Brute force: among all subsets of cells that fit, the kept set is the one that
    /// keeps every cell nearer than any dropped cell (ties prefer the right side).
    fn brute_force_keep(cells: &[(i32, Vec<String>)], len: usize) -> Vec<i32> {
        let mut order: Vec<&(i32, Vec<String>)> = cells.iter().collect();
        // Drop order: farthest first, left before right.
        order.sort_by_key(|(off, _)| (std::cmp::Reverse(off.abs()), off.signum()));
        let mut kept: Vec<i32> = cells.iter().map(|(o, _)| *o).collect();
        let cost = |kept: &[i32]| -> usize {
            let toks: usize = cells.iter().filter(|(o, _)| kept.contains(o)).map(|(_, t)| t.len()).sum();
            toks + kept.len().saturating_sub(1)
        };
        for (off, _) in order {
            if cost(&kept) <= len {
                break;
            }
            kept.retain(|o| o != off);
        }
        kept.sort();
        kept
    }

    #[test]
    fn trimming_drops_farthest_cells() {
        let cells: Vec<(i32, Vec<String>)> = (-4..=4)
            .filter(|d| *d != 0)
            .map(|d| (d, strs(&["str", &format!("w{d}")])))
            .collect();
        for len in [1usize, 2, 5, 8, 11, 14, 17, 20, 23, 40] {
            let w = window_from_row(&cells, 4);
            let seq = assemble_row_seq(&w, RowSel::Data(0), len);
            let kept: Vec<i32> = seq
                .tokens
                .iter()
                .filter_map(|t| t.strip_prefix('w').map(|n| n.parse().unwrap()))
                .collect();
            assert_eq!(kept, brute_force_keep(&cells, len), "len={len}");
            assert_eq!(seq.len(), len);
        }
        // Equidistant: the left one goes first.
        let w = window_from_row(&[(-1, strs(&["l"])), (1, strs(&["r"]))], 2);
        assert_eq!(assemble_row_seq(&w, RowSel::Data(0), 1).tokens, strs(&["r"]));
    }

    #[test]
    fn default_tiling_partitions_the_window() {
        let tiles = tiling(10, 3).unwrap();
        assert_eq!(tiles.len(), 7);
        assert_eq!(tiles[0], (-3, vec![-10, -9, -8]));
        assert_eq!(tiles[3], (0, vec![-1, 0, 1]));
        assert_eq!(tiles[6], (3, vec![8, 9, 10]));
        check_partition(10, &tiles).unwrap();
    }

    #[test]
    fn tiling_rejects_bad_layouts() {
        assert!(tiling(10, 2).is_err());
        assert!(tiling(10, 4).is_err());
        assert!(tiling(2, 3).is_err());
        assert_eq!(tiling(2, 5).unwrap().len(), 1);
        assert_eq!(tiling(2, 1).unwrap().len(), 5);
        let overlapping = vec![(0, vec![-1, 0]), (1, vec![0, 1])];
        assert!(check_partition(1, &overlapping).is_err());
    }

    #[test]
    fn bundles_cover_rows_and_columns_once() {
        let s = sheet_with(30, 30, 1);
        let w = extract_window(&s, CellAddr::new(15, 15), 10);
        let set = build_bundles(&w, BundleLayout { radius: 10, per_bundle: 3, seq_len: 128 }).unwrap();
        for side in [&set.row_bundles, &set.col_bundles] {
            assert_eq!(side.len(), 7);
            let mut members: Vec<i32> = side.iter().flat_map(|b| b.members.iter().map(|(m, _)| *m)).collect();
            members.sort();
            assert_eq!(members, (-10..=10).collect::<Vec<_>>());
            for b in side.iter() {
                assert_eq!(b.len(), 512);
                let segs: Vec<u8> = b.segment_ids().collect();
                assert!(segs[..128].iter().all(|s| *s == 0) && segs[128..].iter().all(|s| *s == 1));
            }
        }
        // C_0 is the header of every column bundle and also a member of bundle 0.
        let c0 = assemble_col_seq(&w, 0, 128);
        assert!(set.col_bundles.iter().all(|b| b.header == c0));
        assert_eq!(set.col_bundles[3].members[1], (0, c0));
    }

    #[test]
    fn row_masks() {
        let s = sheet_with(30, 30, 1);
        let w = extract_window(&s, CellAddr::new(15, 15), 10);
        let only_target = apply_row_mask(&w, &BTreeSet::from([0]));
        for dr in -10..=10 {
            assert_eq!(only_target.data_valid(dr, 3), dr == 0);
        }
        let upward = apply_row_mask(&w, &(-10..=0).collect());
        assert!(upward.data_valid(-10, 0) && !upward.data_valid(1, 0));
        assert!(upward.data(5, 2).is_empty());
        assert!(upward.has_header());
        assert_eq!(apply_row_mask(&w, &(-10..=10).collect()), w);
    }

    #[test]
    fn determinism() {
        let s = sheet_with(12, 12, 1);
        let layout = BundleLayout { radius: 10, per_bundle: 3, seq_len: 32 };
        let a = build_bundles(&extract_window(&s, CellAddr::new(6, 6), 10), layout).unwrap();
        let b = build_bundles(&extract_window(&s, CellAddr::new(6, 6), 10), layout).unwrap();
        assert_eq!(a, b);
    }
}
