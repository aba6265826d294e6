//! Formula parsing, eligibility filtering, and the sketch + relative-range IR.

mod ast;
mod classify;
pub mod functions;
pub mod grammar;
mod ir;
mod parser;
pub mod random;

pub use ast::{quote_string, BinaryOp, FormulaAst, UnaryOp};
pub use classify::{classify_formula, Eligibility, FilterReason};
pub use grammar::{accepts_stream, RangeToken, Stage, StreamAutomaton, StreamLimits};
pub use ir::{
    ir_to_ast, render_formula, split_stream, to_ir, FormulaIR, IrError, RelRange, RelRef, SketchToken,
    DEFAULT_RADIUS, END_SKETCH, EOF, RANGE, RANGE_END, RANGE_SEP, RANGE_START,
};
pub use parser::{parse_formula, ParseError};
