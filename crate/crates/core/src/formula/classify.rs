use std::fmt;

use serde::{Deserialize, Serialize};

use super::ast::FormulaAst;
use super::functions;
use crate::a1::CellAddr;

/// Why a formula was excluded. Checks run in declaration order and the first hit wins.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FilterReason {
    HyperlinkLiteralUrl,
    CrossSheetRef,
    OutOfWindow,
    AbsoluteRef,
    UnsupportedToken,
}

impl FilterReason {
    pub const ALL: [FilterReason; 5] = [
        FilterReason::HyperlinkLiteralUrl,
        FilterReason::CrossSheetRef,
        FilterReason::OutOfWindow,
        FilterReason::AbsoluteRef,
        FilterReason::UnsupportedToken,
    ];
}

impl fmt::Display for FilterReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Eligibility {
    Eligible,
    Filtered(FilterReason),
}

fn is_hyperlink_literal(node: &FormulaAst) -> bool {
    matches!(node, FormulaAst::Call { name, args } if name == "HYPERLINK" && matches!(args.first(), Some(FormulaAst::Str(_))))
}

fn out_of_window(node: &FormulaAst, target: CellAddr, radius: i64) -> bool {
    let far = |a: CellAddr| {
        let (dr, dc) = a.relative_to(target);
        dr.abs() > radius || dc.abs() > radius
    };
    match node {
        FormulaAst::Cell(m) => far(m.addr),
        FormulaAst::Range(a, b) => far(a.addr) || far(b.addr),
        _ => false,
    }
}

fn is_absolute(node: &FormulaAst) -> bool {
    match node {
        FormulaAst::Cell(m) => m.is_absolute(),
        FormulaAst::Range(a, b) => a.is_absolute() || b.is_absolute(),
        _ => false,
    }
}

fn is_unsupported(node: &FormulaAst) -> bool {
    match node {
        FormulaAst::Call { name, args } => !functions::lookup(name).is_some_and(|f| f.accepts(args.len())),
        FormulaAst::Str(s) => s.contains(['\n', '\r', '\t']),
        _ => false,
    }
}

pub fn classify_formula(ast: &FormulaAst, target: CellAddr, radius: u32) -> Eligibility {
    let radius = i64::from(radius);
    let checks: [(FilterReason, &dyn Fn(&FormulaAst) -> bool); 5] = [
        (FilterReason::HyperlinkLiteralUrl, &is_hyperlink_literal),
        (FilterReason::CrossSheetRef, &|n| matches!(n, FormulaAst::SheetQualified { .. })),
        (FilterReason::OutOfWindow, &|n| out_of_window(n, target, radius)),
        (FilterReason::AbsoluteRef, &is_absolute),
        (FilterReason::UnsupportedToken, &is_unsupported),
    ];
    for (reason, check) in checks {
        if ast.any(check) {
            return Eligibility::Filtered(reason);
        }
    }
    Eligibility::Eligible
}
