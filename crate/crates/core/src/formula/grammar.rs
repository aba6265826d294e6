//! Token-level automaton for the two-stage stream: a complete prefix-order sketch,
//! `$ENDSKETCH$`, then one range group per `RANGE`
//! (`$R$ <R> <C> $ENDR$` or `$R$ <R> <C> $SEP$ <R> <C> $ENDR$`), then `EOF`.
//!
//! Decoders consult it to mask continuations so every finished stream converts
//! to a well-formed [`FormulaIR`](super::FormulaIR).

use thiserror::Error;

use super::ir::{parse_col_token, parse_row_token, SketchToken, EOF, RANGE_END, RANGE_SEP, RANGE_START};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("token `{token}` not allowed here: {reason}")]
pub struct GrammarError {
    pub token: String,
    pub reason: &'static str,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RangeToken {
    Start,
    Row(i32),
    Col(i32),
    Sep,
    End,
    Eof,
}

impl RangeToken {
    pub fn parse(text: &str) -> Option<Self> {
        Some(match text {
            RANGE_START => RangeToken::Start,
            RANGE_SEP => RangeToken::Sep,
            RANGE_END => RangeToken::End,
            EOF => RangeToken::Eof,
            _ => {
                if let Some(k) = parse_row_token(text) {
                    RangeToken::Row(k)
                } else {
                    RangeToken::Col(parse_col_token(text)?)
                }
            }
        })
    }

    pub fn text(&self) -> String {
        match self {
            RangeToken::Start => RANGE_START.into(),
            RangeToken::Row(k) => super::ir::row_token(*k),
            RangeToken::Col(k) => super::ir::col_token(*k),
            RangeToken::Sep => RANGE_SEP.into(),
            RangeToken::End => RANGE_END.into(),
            RangeToken::Eof => EOF.into(),
        }
    }

    /// The closed range vocabulary for radius `d`: 4 specials plus R[-d..d] and C[-d..d].
    pub fn vocabulary(radius: u32) -> Vec<RangeToken> {
        let d = radius as i32;
        let mut out = vec![RangeToken::Start, RangeToken::Sep, RangeToken::End, RangeToken::Eof];
        out.extend((-d..=d).map(RangeToken::Row));
        out.extend((-d..=d).map(RangeToken::Col));
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stage {
    Sketch,
    Ranges,
    Finished,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
enum RangePos {
    Expect,
    AfterStart,
    AfterRow1(i32),
    AfterCol1(i32, i32),
    AfterSep(i32, i32),
    AfterRow2(i32, i32, i32),
    AfterCol2,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct StreamLimits {
    /// Sketch tokens excluding `$ENDSKETCH$`.
    pub max_sketch_len: usize,
    pub max_ranges: usize,
    pub radius: u32,
}

impl Default for StreamLimits {
    fn default() -> Self {
        Self { max_sketch_len: 64, max_ranges: 8, radius: super::ir::DEFAULT_RADIUS }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct StreamAutomaton {
    limits: StreamLimits,
    stage: Stage,
    /// Operand slots still to be filled in the sketch.
    open: usize,
    sketch_len: usize,
    ranges_in_sketch: usize,
    pending_ranges: usize,
    pos: RangePos,
}

impl StreamAutomaton {
    pub fn new(limits: StreamLimits) -> Self {
        Self {
            limits,
            stage: Stage::Sketch,
            open: 1,
            sketch_len: 0,
            ranges_in_sketch: 0,
            pending_ranges: 0,
            pos: RangePos::Expect,
        }
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    pub fn pending_ranges(&self) -> usize {
        self.pending_ranges
    }

    pub fn is_finished(&self) -> bool {
        self.stage == Stage::Finished
    }

    fn sketch_check(&self, tok: &SketchToken) -> Result<(), &'static str> {
        if self.stage != Stage::Sketch {
            return Err("sketch token outside the sketch stage");
        }
        if *tok == SketchToken::EndSketch {
            return if self.open == 0 { Ok(()) } else { Err("sketch is incomplete") };
        }
        if self.open == 0 {
            return Err("sketch is already complete");
        }
        let open_after = self.open - 1 + tok.arity();
        // Each open slot needs at least one more token.
        if self.sketch_len + 1 + open_after > self.limits.max_sketch_len {
            return Err("sketch would exceed its length limit");
        }
        if *tok == SketchToken::Range && self.ranges_in_sketch >= self.limits.max_ranges {
            return Err("too many RANGE tokens");
        }
        Ok(())
    }

    pub fn allows_sketch(&self, tok: &SketchToken) -> bool {
        self.sketch_check(tok).is_ok()
    }

    pub fn push_sketch(&mut self, tok: &SketchToken) -> Result<(), GrammarError> {
        self.sketch_check(tok).map_err(|reason| GrammarError { token: tok.text(), reason })?;
        if *tok == SketchToken::EndSketch {
            self.stage = Stage::Ranges;
            self.pending_ranges = self.ranges_in_sketch;
            return Ok(());
        }
        self.open = self.open - 1 + tok.arity();
        self.sketch_len += 1;
        if *tok == SketchToken::Range {
            self.ranges_in_sketch += 1;
        }
        Ok(())
    }

    fn in_radius(&self, k: i32) -> bool {
        k.unsigned_abs() <= self.limits.radius
    }

    fn range_next(&self, tok: RangeToken) -> Result<(RangePos, usize, bool), &'static str> {
        if self.stage != Stage::Ranges {
            return Err("range token outside the range stage");
        }
        use RangePos::*;
        use RangeToken as T;
        let pending = self.pending_ranges;
        Ok(match (self.pos, tok) {
            (Expect, T::Start) if pending > 0 => (AfterStart, pending, false),
            (Expect, T::Eof) if pending == 0 => (Expect, 0, true),
            (AfterStart, T::Row(r)) if self.in_radius(r) => (AfterRow1(r), pending, false),
            (AfterRow1(r), T::Col(c)) if self.in_radius(c) => (AfterCol1(r, c), pending, false),
            (AfterCol1(r, c), T::Sep) => (AfterSep(r, c), pending, false),
            (AfterCol1(..), T::End) | (AfterCol2, T::End) => (Expect, pending - 1, false),
            (AfterSep(r0, c0), T::Row(r)) if self.in_radius(r) && r >= r0 => (AfterRow2(r0, c0, r), pending, false),
            (AfterRow2(_, c0, _), T::Col(c)) if self.in_radius(c) && c >= c0 => (AfterCol2, pending, false),
            _ => return Err("violates the range grammar"),
        })
    }

    pub fn allows_range(&self, tok: RangeToken) -> bool {
        self.range_next(tok).is_ok()
    }

    pub fn push_range(&mut self, tok: RangeToken) -> Result<(), GrammarError> {
        let (pos, pending, done) = self.range_next(tok).map_err(|reason| GrammarError { token: tok.text(), reason })?;
        self.pos = pos;
        self.pending_ranges = pending;
        if done {
            self.stage = Stage::Finished;
        }
        Ok(())
    }

    /// Feeds a textual token, dispatching on the current stage.
    pub fn push_text(&mut self, text: &str) -> Result<(), GrammarError> {
        match self.stage {
            Stage::Sketch => {
                let tok = SketchToken::parse(text)
                    .map_err(|_| GrammarError { token: text.to_string(), reason: "not a sketch token" })?;
                self.push_sketch(&tok)
            }
            Stage::Ranges => {
                let tok = RangeToken::parse(text)
                    .ok_or_else(|| GrammarError { token: text.to_string(), reason: "not a range token" })?;
                self.push_range(tok)
            }
            Stage::Finished => Err(GrammarError { token: text.to_string(), reason: "stream already finished" }),
        }
    }
}

/// Checks a complete textual stream against the automaton.
pub fn accepts_stream<S: AsRef<str>>(tokens: &[S], limits: StreamLimits) -> Result<(), GrammarError> {
    let mut a = StreamAutomaton::new(limits);
    for t in tokens {
        a.push_text(t.as_ref())?;
    }
    if a.is_finished() {
        Ok(())
    } else {
        Err(GrammarError { token: String::new(), reason: "stream ended early" })
    }
}
