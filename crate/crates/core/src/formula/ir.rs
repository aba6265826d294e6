//! Sketch + relative-range representation of formulas.
//!
//! A formula becomes its pre-order sketch (every reference replaced by `RANGE`)
//! followed by one relative range group per `RANGE`, e.g.
//! `SUM RANGE $ENDSKETCH$ $R$ R[-5] C[0] $SEP$ R[-1] C[0] $ENDR$ EOF`.

use std::fmt;

use thiserror::Error;

use super::ast::{quote_string, BinaryOp, FormulaAst, UnaryOp};
use super::classify::{classify_formula, Eligibility};
use super::functions;
use crate::a1::{CellAddr, MarkedAddr};

pub const RANGE: &str = "RANGE";
pub const END_SKETCH: &str = "$ENDSKETCH$";
pub const RANGE_START: &str = "$R$";
pub const RANGE_SEP: &str = "$SEP$";
pub const RANGE_END: &str = "$ENDR$";
pub const EOF: &str = "EOF";

pub const DEFAULT_RADIUS: u32 = 10;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum IrError {
    #[error("formula is not eligible for the relative representation: {0}")]
    Ineligible(String),
    #[error("sketch has {ranges_in_sketch} RANGE tokens but {ranges} ranges were given")]
    RangeArity { ranges_in_sketch: usize, ranges: usize },
    #[error("malformed sketch: {0}")]
    MalformedSketch(String),
    #[error("malformed range: {0}")]
    MalformedRange(String),
    #[error("reference R[{dr}]C[{dc}] from {target} falls outside the sheet")]
    OffSheet { target: CellAddr, dr: i32, dc: i32 },
    #[error("bad token stream: {0}")]
    BadStream(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SketchToken {
    Function { name: String, argc: usize },
    Binary(BinaryOp),
    Unary(UnaryOp),
    Number(String),
    /// Unescaped contents; rendered quoted.
    Str(String),
    Range,
    EndSketch,
}

impl SketchToken {
    /// Number of sub-expressions that follow this token in prefix order.
    pub fn arity(&self) -> usize {
        match self {
            SketchToken::Function { argc, .. } => *argc,
            SketchToken::Binary(_) => 2,
            SketchToken::Unary(_) => 1,
            SketchToken::Number(_) | SketchToken::Str(_) | SketchToken::Range | SketchToken::EndSketch => 0,
        }
    }

    pub fn text(&self) -> String {
        match self {
            SketchToken::Function { name, argc } => match functions::lookup(name) {
                Some(spec) if spec.default_args == *argc => name.clone(),
                _ => format!("{name}:{argc}"),
            },
            SketchToken::Binary(op) => op.symbol().to_string(),
            SketchToken::Unary(op) => op.token().to_string(),
            SketchToken::Number(n) => n.clone(),
            SketchToken::Str(s) => quote_string(s),
            SketchToken::Range => RANGE.to_string(),
            SketchToken::EndSketch => END_SKETCH.to_string(),
        }
    }

    /// Inverse of [`SketchToken::text`].
    pub fn parse(text: &str) -> Result<Self, IrError> {
        let bad = || IrError::BadStream(format!("unrecognized sketch token `{text}`"));
        if text == RANGE {
            return Ok(SketchToken::Range);
        }
        if text == END_SKETCH {
            return Ok(SketchToken::EndSketch);
        }
        if text == "UPLUS" {
            return Ok(SketchToken::Unary(UnaryOp::Plus));
        }
        if text == "UMINUS" {
            return Ok(SketchToken::Unary(UnaryOp::Minus));
        }
        if let Some(op) = BinaryOp::from_symbol(text) {
            return Ok(SketchToken::Binary(op));
        }
        if let Some(inner) = text.strip_prefix('"') {
            let inner = inner.strip_suffix('"').ok_or_else(bad)?;
            if inner.replace("\"\"", "").contains('"') {
                return Err(bad());
            }
            return Ok(SketchToken::Str(inner.replace("\"\"", "\"")));
        }
        let first = text.bytes().next().ok_or_else(bad)?;
        if first.is_ascii_digit() || first == b'.' {
            let ok = text.bytes().all(|b| b.is_ascii_digit() || matches!(b, b'.' | b'e' | b'E' | b'+' | b'-'));
            return if ok { Ok(SketchToken::Number(text.to_string())) } else { Err(bad()) };
        }
        let (name, argc) = match text.split_once(':') {
            Some((name, n)) => (name, Some(n.parse::<usize>().map_err(|_| bad())?)),
            None => (text, None),
        };
        let spec = functions::lookup(name).ok_or_else(bad)?;
        let argc = argc.unwrap_or(spec.default_args);
        if !spec.accepts(argc) {
            return Err(bad());
        }
        Ok(SketchToken::Function { name: name.to_string(), argc })
    }
}

impl fmt::Display for SketchToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text())
    }
}

/// Offset of a referenced cell from the target cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RelRef {
    pub dr: i32,
    pub dc: i32,
}

impl RelRef {
    pub fn new(dr: i32, dc: i32) -> Self {
        Self { dr, dc }
    }

    fn of(addr: CellAddr, target: CellAddr) -> Self {
        let (dr, dc) = addr.relative_to(target);
        Self { dr: dr as i32, dc: dc as i32 }
    }

    fn resolve(self, target: CellAddr) -> Result<CellAddr, IrError> {
        target.offset(self.dr, self.dc).ok_or(IrError::OffSheet { target, dr: self.dr, dc: self.dc })
    }
}

/// A single cell (`end == None`) or a rectangle, relative to the target cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RelRange {
    pub start: RelRef,
    pub end: Option<RelRef>,
}

impl RelRange {
    pub fn cell(dr: i32, dc: i32) -> Self {
        Self { start: RelRef::new(dr, dc), end: None }
    }

    pub fn rect(start: (i32, i32), end: (i32, i32)) -> Self {
        Self { start: RelRef::new(start.0, start.1), end: Some(RelRef::new(end.0, end.1)) }
    }

    pub fn max_abs_offset(&self) -> i32 {
        let mut m = self.start.dr.abs().max(self.start.dc.abs());
        if let Some(e) = self.end {
            m = m.max(e.dr.abs()).max(e.dc.abs());
        }
        m
    }

    pub fn tokens(&self) -> Vec<String> {
        let mut out = vec![RANGE_START.to_string(), row_token(self.start.dr), col_token(self.start.dc)];
        if let Some(e) = self.end {
            out.extend([RANGE_SEP.to_string(), row_token(e.dr), col_token(e.dc)]);
        }
        out.push(RANGE_END.to_string());
        out
    }

    fn validate(&self) -> Result<(), IrError> {
        if let Some(e) = self.end {
            if e.dr < self.start.dr || e.dc < self.start.dc {
                return Err(IrError::MalformedRange(format!("end {e:?} precedes start {:?}", self.start)));
            }
        }
        Ok(())
    }
}

pub fn row_token(k: i32) -> String {
    format!("R[{k}]")
}

pub fn col_token(k: i32) -> String {
    format!("C[{k}]")
}

fn parse_offset(text: &str, prefix: &str) -> Option<i32> {
    text.strip_prefix(prefix)?.strip_prefix('[')?.strip_suffix(']')?.parse().ok()
}

pub fn parse_row_token(text: &str) -> Option<i32> {
    parse_offset(text, "R")
}

pub fn parse_col_token(text: &str) -> Option<i32> {
    parse_offset(text, "C")
}

/// A formula as sketch plus relative ranges.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FormulaIR {
    sketch: Vec<SketchToken>,
    ranges: Vec<RelRange>,
}

impl FormulaIR {
    /// Validates: one trailing `$ENDSKETCH$`, a complete prefix expression,
    /// RANGE count equal to `ranges.len()`, and ordered rectangle endpoints.
    pub fn new(sketch: Vec<SketchToken>, ranges: Vec<RelRange>) -> Result<Self, IrError> {
        let Some((SketchToken::EndSketch, body)) = sketch.split_last() else {
            return Err(IrError::MalformedSketch("sketch must end with $ENDSKETCH$".into()));
        };
        let mut open = 1usize;
        for (i, t) in body.iter().enumerate() {
            if *t == SketchToken::EndSketch {
                return Err(IrError::MalformedSketch("$ENDSKETCH$ before the end".into()));
            }
            if open == 0 {
                return Err(IrError::MalformedSketch(format!("extra token `{t}` at position {i}")));
            }
            open = open - 1 + t.arity();
        }
        if open != 0 {
            return Err(IrError::MalformedSketch(format!("{open} missing operand(s)")));
        }
        let ranges_in_sketch = body.iter().filter(|t| **t == SketchToken::Range).count();
        if ranges_in_sketch != ranges.len() {
            return Err(IrError::RangeArity { ranges_in_sketch, ranges: ranges.len() });
        }
        for r in &ranges {
            r.validate()?;
        }
        Ok(Self { sketch, ranges })
    }

    pub fn sketch(&self) -> &[SketchToken] {
        &self.sketch
    }

    pub fn ranges(&self) -> &[RelRange] {
        &self.ranges
    }

    /// Sketch tokens excluding `$ENDSKETCH$`.
    pub fn sketch_length(&self) -> usize {
        self.sketch.len() - 1
    }

    pub fn sketch_tokens(&self) -> Vec<String> {
        self.sketch.iter().map(SketchToken::text).collect()
    }

    pub fn range_tokens(&self) -> Vec<String> {
        let mut out: Vec<String> = self.ranges.iter().flat_map(RelRange::tokens).collect();
        out.push(EOF.to_string());
        out
    }

    /// Full stream: sketch, range groups, then `EOF`.
    pub fn tokens(&self) -> Vec<String> {
        let mut out = self.sketch_tokens();
        out.extend(self.range_tokens());
        out
    }

    /// Parses the space-separated stream form. String literals may contain spaces.
    pub fn parse_stream(text: &str) -> Result<Self, IrError> {
        let toks = split_stream(text)?;
        Self::from_tokens(&toks)
    }

    pub fn from_tokens<S: AsRef<str>>(toks: &[S]) -> Result<Self, IrError> {
        let end = toks
            .iter()
            .position(|t| t.as_ref() == END_SKETCH)
            .ok_or_else(|| IrError::BadStream("missing $ENDSKETCH$".into()))?;
        let sketch = toks[..=end].iter().map(|t| SketchToken::parse(t.as_ref())).collect::<Result<Vec<_>, _>>()?;
        let rest: Vec<&str> = toks[end + 1..].iter().map(|t| t.as_ref()).collect();
        let Some((&last, groups)) = rest.split_last() else {
            return Err(IrError::BadStream("missing EOF".into()));
        };
        if last != EOF {
            return Err(IrError::BadStream(format!("stream must end with EOF, found `{last}`")));
        }
        let mut ranges = Vec::new();
        let mut i = 0;
        let bad = |msg: &str| IrError::BadStream(msg.to_string());
        while i < groups.len() {
            if groups[i] != RANGE_START {
                return Err(bad("range group must start with $R$"));
            }
            let dr = groups.get(i + 1).and_then(|t| parse_row_token(t)).ok_or_else(|| bad("expected R[k]"))?;
            let dc = groups.get(i + 2).and_then(|t| parse_col_token(t)).ok_or_else(|| bad("expected C[k]"))?;
            match groups.get(i + 3).copied() {
                Some(RANGE_END) => {
                    ranges.push(RelRange::cell(dr, dc));
                    i += 4;
                }
                Some(RANGE_SEP) => {
                    let er = groups.get(i + 4).and_then(|t| parse_row_token(t)).ok_or_else(|| bad("expected R[k]"))?;
                    let ec = groups.get(i + 5).and_then(|t| parse_col_token(t)).ok_or_else(|| bad("expected C[k]"))?;
                    if groups.get(i + 6).copied() != Some(RANGE_END) {
                        return Err(bad("expected $ENDR$"));
                    }
                    ranges.push(RelRange::rect((dr, dc), (er, ec)));
                    i += 7;
                }
                _ => return Err(bad("expected $SEP$ or $ENDR$")),
            }
        }
        Self::new(sketch, ranges)
    }
}

impl fmt::Display for FormulaIR {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.tokens().join(" "))
    }
}

/// Splits on spaces, keeping `"..."` literals (with `""` escapes) intact.
pub fn split_stream(text: &str) -> Result<Vec<String>, IrError> {
    let mut out = Vec::new();
    let mut chars = text.chars().peekable();
    loop {
        while chars.peek() == Some(&' ') {
            chars.next();
        }
        let Some(&c) = chars.peek() else { break };
        let mut tok = String::new();
        if c == '"' {
            tok.push(chars.next().expect("peeked"));
            loop {
                match chars.next() {
                    None => return Err(IrError::BadStream("unterminated string literal".into())),
                    Some('"') if chars.peek() == Some(&'"') => {
                        chars.next();
                        tok.push_str("\"\"");
                    }
                    Some('"') => {
                        tok.push('"');
                        break;
                    }
                    Some(ch) => tok.push(ch),
                }
            }
            if chars.peek().is_some_and(|c| *c != ' ') {
                return Err(IrError::BadStream("string literal must be followed by a space".into()));
            }
        } else {
            while let Some(&ch) = chars.peek() {
                if ch == ' ' {
                    break;
                }
                tok.push(ch);
                chars.next();
            }
        }
        out.push(tok);
    }
    Ok(out)
}

fn emit(ast: &FormulaAst, target: CellAddr, sketch: &mut Vec<SketchToken>, ranges: &mut Vec<RelRange>) -> Result<(), IrError> {
    match ast {
        FormulaAst::Call { name, args } => {
            sketch.push(SketchToken::Function { name: name.clone(), argc: args.len() });
            for a in args {
                emit(a, target, sketch, ranges)?;
            }
        }
        FormulaAst::Binary { op, lhs, rhs } => {
            sketch.push(SketchToken::Binary(*op));
            emit(lhs, target, sketch, ranges)?;
            emit(rhs, target, sketch, ranges)?;
        }
        FormulaAst::Unary { op, operand } => {
            sketch.push(SketchToken::Unary(*op));
            emit(operand, target, sketch, ranges)?;
        }
        FormulaAst::Number(n) => sketch.push(SketchToken::Number(n.clone())),
        FormulaAst::Str(s) => sketch.push(SketchToken::Str(s.clone())),
        FormulaAst::Cell(m) => {
            sketch.push(SketchToken::Range);
            let r = RelRef::of(m.addr, target);
            ranges.push(RelRange { start: r, end: None });
        }
        FormulaAst::Range(a, b) => {
            sketch.push(SketchToken::Range);
            ranges.push(RelRange { start: RelRef::of(a.addr, target), end: Some(RelRef::of(b.addr, target)) });
        }
        FormulaAst::SheetQualified { .. } => {
            return Err(IrError::Ineligible("sheet-qualified reference".into()));
        }
    }
    Ok(())
}

/// Converts an eligible AST to its sketch + relative-range form.
///
/// A `Range` node keeps an explicit end even when both corners coincide, so that
/// `A1:A1` and `A1` stay distinguishable.
pub fn to_ir(ast: &FormulaAst, target: CellAddr, radius: u32) -> Result<FormulaIR, IrError> {
    if let Eligibility::Filtered(reason) = classify_formula(ast, target, radius) {
        return Err(IrError::Ineligible(reason.to_string()));
    }
    let mut sketch = Vec::new();
    let mut ranges = Vec::new();
    emit(ast, target, &mut sketch, &mut ranges)?;
    sketch.push(SketchToken::EndSketch);
    FormulaIR::new(sketch, ranges)
}

fn rebuild(
    sketch: &mut std::slice::Iter<'_, SketchToken>,
    ranges: &mut std::slice::Iter<'_, RelRange>,
    target: CellAddr,
) -> Result<FormulaAst, IrError> {
    let tok = sketch.next().ok_or_else(|| IrError::MalformedSketch("ran out of tokens".into()))?;
    let relative = |addr| MarkedAddr { addr, abs_col: false, abs_row: false };
    Ok(match tok {
        SketchToken::Function { name, argc } => {
            let args = (0..*argc).map(|_| rebuild(sketch, ranges, target)).collect::<Result<_, _>>()?;
            FormulaAst::Call { name: name.clone(), args }
        }
        SketchToken::Binary(op) => {
            let lhs = rebuild(sketch, ranges, target)?;
            let rhs = rebuild(sketch, ranges, target)?;
            FormulaAst::binary(*op, lhs, rhs)
        }
        SketchToken::Unary(op) => FormulaAst::unary(*op, rebuild(sketch, ranges, target)?),
        SketchToken::Number(n) => FormulaAst::Number(n.clone()),
        SketchToken::Str(s) => FormulaAst::Str(s.clone()),
        SketchToken::Range => {
            let r = ranges.next().ok_or(IrError::RangeArity { ranges_in_sketch: usize::MAX, ranges: 0 })?;
            let start = relative(r.start.resolve(target)?);
            match r.end {
                None => FormulaAst::Cell(start),
                Some(e) => FormulaAst::Range(start, relative(e.resolve(target)?)),
            }
        }
        SketchToken::EndSketch => return Err(IrError::MalformedSketch("unexpected $ENDSKETCH$".into())),
    })
}

/// Resolves the IR against `target` back into an AST.
pub fn ir_to_ast(ir: &FormulaIR, target: CellAddr) -> Result<FormulaAst, IrError> {
    let body = &ir.sketch[..ir.sketch.len() - 1];
    let n_range = body.iter().filter(|t| **t == SketchToken::Range).count();
    if n_range != ir.ranges.len() {
        return Err(IrError::RangeArity { ranges_in_sketch: n_range, ranges: ir.ranges.len() });
    }
    let mut s = body.iter();
    let mut r = ir.ranges.iter();
    let ast = rebuild(&mut s, &mut r, target)?;
    if s.next().is_some() {
        return Err(IrError::MalformedSketch("trailing tokens".into()));
    }
    Ok(ast)
}

/// Concrete A1 formula text (with leading `=`) for `ir` placed at `target`.
pub fn render_formula(ir: &FormulaIR, target: CellAddr) -> Result<String, IrError> {
    Ok(format!("={}", ir_to_ast(ir, target)?))
}
