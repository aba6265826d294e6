use std::fmt;

use crate::a1::{normalize_pair, MarkedAddr};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
    Concat,
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

impl BinaryOp {
    pub const ALL: [BinaryOp; 11] = [
        BinaryOp::Add,
        BinaryOp::Sub,
        BinaryOp::Mul,
        BinaryOp::Div,
        BinaryOp::Concat,
        BinaryOp::Eq,
        BinaryOp::Ne,
        BinaryOp::Lt,
        BinaryOp::Le,
        BinaryOp::Gt,
        BinaryOp::Ge,
    ];

    pub fn symbol(self) -> &'static str {
        match self {
            BinaryOp::Add => "+",
            BinaryOp::Sub => "-",
            BinaryOp::Mul => "*",
            BinaryOp::Div => "/",
            BinaryOp::Concat => "&",
            BinaryOp::Eq => "=",
            BinaryOp::Ne => "<>",
            BinaryOp::Lt => "<",
            BinaryOp::Le => "<=",
            BinaryOp::Gt => ">",
            BinaryOp::Ge => ">=",
        }
    }

    pub fn from_symbol(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|op| op.symbol() == s)
    }

    /// Binding strength; higher binds tighter.
    pub fn precedence(self) -> u8 {
        match self {
            BinaryOp::Eq | BinaryOp::Ne | BinaryOp::Lt | BinaryOp::Le | BinaryOp::Gt | BinaryOp::Ge => 1,
            BinaryOp::Concat => 2,
            BinaryOp::Add | BinaryOp::Sub => 3,
            BinaryOp::Mul | BinaryOp::Div => 4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum UnaryOp {
    Plus,
    Minus,
}

impl UnaryOp {
    pub fn symbol(self) -> &'static str {
        match self {
            UnaryOp::Plus => "+",
            UnaryOp::Minus => "-",
        }
    }

    /// Sketch token name.
    pub fn token(self) -> &'static str {
        match self {
            UnaryOp::Plus => "UPLUS",
            UnaryOp::Minus => "UMINUS",
        }
    }
}

pub(crate) const UNARY_PRECEDENCE: u8 = 5;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum FormulaAst {
    Call { name: String, args: Vec<FormulaAst> },
    Binary { op: BinaryOp, lhs: Box<FormulaAst>, rhs: Box<FormulaAst> },
    Unary { op: UnaryOp, operand: Box<FormulaAst> },
    /// Decimal text exactly as written.
    Number(String),
    /// Unescaped string contents.
    Str(String),
    Cell(MarkedAddr),
    /// Endpoints are normalized top-left / bottom-right.
    Range(MarkedAddr, MarkedAddr),
    SheetQualified { sheet: String, inner: Box<FormulaAst> },
}

impl FormulaAst {
    pub fn range(a: MarkedAddr, b: MarkedAddr) -> Self {
        let (a, b) = normalize_pair(a, b);
        FormulaAst::Range(a, b)
    }

    pub fn binary(op: BinaryOp, lhs: FormulaAst, rhs: FormulaAst) -> Self {
        FormulaAst::Binary { op, lhs: Box::new(lhs), rhs: Box::new(rhs) }
    }

    pub fn unary(op: UnaryOp, operand: FormulaAst) -> Self {
        FormulaAst::Unary { op, operand: Box::new(operand) }
    }

    pub fn call(name: impl Into<String>, args: Vec<FormulaAst>) -> Self {
        FormulaAst::Call { name: name.into(), args }
    }

    /// Pre-order traversal.
    pub fn walk<'a>(&'a self, visit: &mut impl FnMut(&'a FormulaAst)) {
        visit(self);
        match self {
            FormulaAst::Call { args, .. } => args.iter().for_each(|a| a.walk(visit)),
            FormulaAst::Binary { lhs, rhs, .. } => {
                lhs.walk(visit);
                rhs.walk(visit);
            }
            FormulaAst::Unary { operand, .. } => operand.walk(visit),
            FormulaAst::SheetQualified { inner, .. } => inner.walk(visit),
            FormulaAst::Number(_) | FormulaAst::Str(_) | FormulaAst::Cell(_) | FormulaAst::Range(..) => {}
        }
    }

    pub fn any(&self, mut pred: impl FnMut(&FormulaAst) -> bool) -> bool {
        let mut found = false;
        self.walk(&mut |n| found = found || pred(n));
        found
    }

    pub fn depth(&self) -> usize {
        match self {
            FormulaAst::Call { args, .. } => 1 + args.iter().map(|a| a.depth()).max().unwrap_or(0),
            FormulaAst::Binary { lhs, rhs, .. } => 1 + lhs.depth().max(rhs.depth()),
            FormulaAst::Unary { operand, .. } => 1 + operand.depth(),
            FormulaAst::SheetQualified { inner, .. } => 1 + inner.depth(),
            _ => 1,
        }
    }

    fn precedence(&self) -> u8 {
        match self {
            FormulaAst::Binary { op, .. } => op.precedence(),
            FormulaAst::Unary { .. } => UNARY_PRECEDENCE,
            _ => u8::MAX,
        }
    }
}

pub fn quote_string(s: &str) -> String {
    format!("\"{}\"", s.replace('"', "\"\""))
}

fn quote_sheet(name: &str) -> String {
    if !name.is_empty() && name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
        name.to_string()
    } else {
        format!("'{}'", name.replace('\'', "''"))
    }
}

/// Formula text without the leading `=`, with the minimal parentheses needed to
/// re-parse to the same tree under left-associative precedence.
impl fmt::Display for FormulaAst {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FormulaAst::Call { name, args } => {
                write!(f, "{name}(")?;
                for (i, a) in args.iter().enumerate() {
                    if i > 0 {
                        f.write_str(",")?;
                    }
                    write!(f, "{a}")?;
                }
                f.write_str(")")
            }
            FormulaAst::Binary { op, lhs, rhs } => {
                let p = op.precedence();
                if lhs.precedence() < p {
                    write!(f, "({lhs})")?;
                } else {
                    write!(f, "{lhs}")?;
                }
                f.write_str(op.symbol())?;
                if rhs.precedence() <= p {
                    write!(f, "({rhs})")
                } else {
                    write!(f, "{rhs}")
                }
            }
            FormulaAst::Unary { op, operand } => {
                f.write_str(op.symbol())?;
                if operand.precedence() < UNARY_PRECEDENCE {
                    write!(f, "({operand})")
                } else {
                    write!(f, "{operand}")
                }
            }
            FormulaAst::Number(n) => f.write_str(n),
            FormulaAst::Str(s) => f.write_str(&quote_string(s)),
            FormulaAst::Cell(a) => write!(f, "{a}"),
            FormulaAst::Range(a, b) => write!(f, "{a}:{b}"),
            FormulaAst::SheetQualified { sheet, inner } => write!(f, "{}!{inner}", quote_sheet(sheet)),
        }
    }
}
