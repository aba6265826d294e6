//! Recursive-descent parser for the supported formula subset.
//!
//! Precedence, loosest first: comparison, `&`, `+ -`, `* /`, unary `+ -`.
//! All binary levels are left-associative.

use thiserror::Error;

use super::ast::{BinaryOp, FormulaAst, UnaryOp};
use crate::a1::{parse_marked, MarkedAddr};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ParseError {
    #[error("formula must start with `=`")]
    MissingEquals,
    #[error("syntax error at byte {pos}: {message}")]
    Syntax { pos: usize, message: String },
    #[error("unterminated string starting at byte {pos}")]
    UnterminatedString { pos: usize },
    #[error("unbalanced parentheses at byte {pos}")]
    UnbalancedParens { pos: usize },
}

#[derive(Clone, Debug, PartialEq)]
enum Tok {
    Number(String),
    Str(String),
    /// Identifier-like run: function name, cell reference, or sheet name.
    Word(String),
    QuotedSheet(String),
    Op(&'static str),
    LParen,
    RParen,
    Comma,
    Colon,
    Bang,
    End,
}

struct Lexed {
    tok: Tok,
    pos: usize,
}

fn lex(src: &str, offset: usize) -> Result<Vec<Lexed>, ParseError> {
    let b = src.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    let mut depth = 0i32;
    while i < b.len() {
        let c = b[i];
        let pos = offset + i;
        if c.is_ascii_whitespace() {
            i += 1;
            continue;
        }
        let tok = match c {
            b'(' => {
                depth += 1;
                i += 1;
                Tok::LParen
            }
            b')' => {
                depth -= 1;
                if depth < 0 {
                    return Err(ParseError::UnbalancedParens { pos });
                }
                i += 1;
                Tok::RParen
            }
            b',' => {
                i += 1;
                Tok::Comma
            }
            b':' => {
                i += 1;
                Tok::Colon
            }
            b'!' => {
                i += 1;
                Tok::Bang
            }
            b'"' => {
                let mut s = String::new();
                let mut j = i + 1;
                loop {
                    match b.get(j) {
                        None => return Err(ParseError::UnterminatedString { pos }),
                        Some(b'"') if b.get(j + 1) == Some(&b'"') => {
                            s.push('"');
                            j += 2;
                        }
                        Some(b'"') => break,
                        Some(_) => {
                            let ch = src[j..].chars().next().expect("in bounds");
                            s.push(ch);
                            j += ch.len_utf8();
                        }
                    }
                }
                i = j + 1;
                Tok::Str(s)
            }
            b'\'' => {
                let mut s = String::new();
                let mut j = i + 1;
                loop {
                    match b.get(j) {
                        None => return Err(ParseError::UnterminatedString { pos }),
                        Some(b'\'') if b.get(j + 1) == Some(&b'\'') => {
                            s.push('\'');
                            j += 2;
                        }
                        Some(b'\'') => break,
                        Some(_) => {
                            let ch = src[j..].chars().next().expect("in bounds");
                            s.push(ch);
                            j += ch.len_utf8();
                        }
                    }
                }
                i = j + 1;
                Tok::QuotedSheet(s)
            }
            b'0'..=b'9' | b'.' => {
                let start = i;
                while i < b.len() && b[i].is_ascii_digit() {
                    i += 1;
                }
                if i < b.len() && b[i] == b'.' {
                    i += 1;
                    while i < b.len() && b[i].is_ascii_digit() {
                        i += 1;
                    }
                }
                let mantissa = &src[start..i];
                if mantissa == "." {
                    return Err(ParseError::Syntax { pos, message: "lone `.`".into() });
                }
                if i < b.len() && (b[i] == b'e' || b[i] == b'E') {
                    let mut j = i + 1;
                    if j < b.len() && (b[j] == b'+' || b[j] == b'-') {
                        j += 1;
                    }
                    let digits = j;
                    while j < b.len() && b[j].is_ascii_digit() {
                        j += 1;
                    }
                    if j == digits {
                        return Err(ParseError::Syntax { pos, message: "malformed exponent".into() });
                    }
                    i = j;
                }
                if i < b.len() && (b[i].is_ascii_alphabetic() || b[i] == b'$') {
                    return Err(ParseError::Syntax {
                        pos: offset + i,
                        message: format!("unexpected `{}` after number", b[i] as char),
                    });
                }
                Tok::Number(src[start..i].to_string())
            }
            b'$' | b'A'..=b'Z' | b'a'..=b'z' | b'_' => {
                let start = i;
                while i < b.len() && (b[i].is_ascii_alphanumeric() || matches!(b[i], b'_' | b'.' | b'$')) {
                    i += 1;
                }
                Tok::Word(src[start..i].to_string())
            }
            b'<' => {
                let (op, len) = match b.get(i + 1) {
                    Some(b'=') => ("<=", 2),
                    Some(b'>') => ("<>", 2),
                    _ => ("<", 1),
                };
                i += len;
                Tok::Op(op)
            }
            b'>' => {
                let (op, len) = if b.get(i + 1) == Some(&b'=') { (">=", 2) } else { (">", 1) };
                i += len;
                Tok::Op(op)
            }
            b'+' | b'-' | b'*' | b'/' | b'&' | b'=' => {
                i += 1;
                Tok::Op(match c {
                    b'+' => "+",
                    b'-' => "-",
                    b'*' => "*",
                    b'/' => "/",
                    b'&' => "&",
                    _ => "=",
                })
            }
            _ => {
                let ch = src[i..].chars().next().expect("in bounds");
                return Err(ParseError::Syntax { pos, message: format!("unexpected character `{ch}`") });
            }
        };
        out.push(Lexed { tok, pos });
    }
    if depth != 0 {
        return Err(ParseError::UnbalancedParens { pos: offset + b.len() });
    }
    out.push(Lexed { tok: Tok::End, pos: offset + b.len() });
    Ok(out)
}

struct Parser {
    toks: Vec<Lexed>,
    at: usize,
}

impl Parser {
    fn peek(&self) -> &Tok {
        &self.toks[self.at].tok
    }

    fn pos(&self) -> usize {
        self.toks[self.at].pos
    }

    fn bump(&mut self) -> Tok {
        let t = self.toks[self.at].tok.clone();
        if self.at + 1 < self.toks.len() {
            self.at += 1;
        }
        t
    }

    fn err<T>(&self, message: impl Into<String>) -> Result<T, ParseError> {
        Err(ParseError::Syntax { pos: self.pos(), message: message.into() })
    }

    fn expect(&mut self, want: Tok, what: &str) -> Result<(), ParseError> {
        if *self.peek() == want {
            self.bump();
            Ok(())
        } else {
            self.err(format!("expected {what}, found {:?}", self.peek()))
        }
    }

    fn binary_level(
        &mut self,
        ops: &[&str],
        next: fn(&mut Self) -> Result<FormulaAst, ParseError>,
    ) -> Result<FormulaAst, ParseError> {
        let mut lhs = next(self)?;
        while let Tok::Op(op) = *self.peek() {
            if !ops.contains(&op) {
                break;
            }
            self.bump();
            let rhs = next(self)?;
            lhs = FormulaAst::binary(BinaryOp::from_symbol(op).expect("known operator"), lhs, rhs);
        }
        Ok(lhs)
    }

    fn comparison(&mut self) -> Result<FormulaAst, ParseError> {
        self.binary_level(&["=", "<>", "<", "<=", ">", ">="], Self::concat)
    }

    fn concat(&mut self) -> Result<FormulaAst, ParseError> {
        self.binary_level(&["&"], Self::additive)
    }

    fn additive(&mut self) -> Result<FormulaAst, ParseError> {
        self.binary_level(&["+", "-"], Self::multiplicative)
    }

    fn multiplicative(&mut self) -> Result<FormulaAst, ParseError> {
        self.binary_level(&["*", "/"], Self::unary)
    }

    fn unary(&mut self) -> Result<FormulaAst, ParseError> {
        match *self.peek() {
            Tok::Op("+") => {
                self.bump();
                Ok(FormulaAst::unary(UnaryOp::Plus, self.unary()?))
            }
            Tok::Op("-") => {
                self.bump();
                Ok(FormulaAst::unary(UnaryOp::Minus, self.unary()?))
            }
            _ => self.primary(),
        }
    }

    fn primary(&mut self) -> Result<FormulaAst, ParseError> {
        let pos = self.pos();
        match self.bump() {
            Tok::Number(n) => Ok(FormulaAst::Number(n)),
            Tok::Str(s) => Ok(FormulaAst::Str(s)),
            Tok::LParen => {
                let inner = self.comparison()?;
                self.expect(Tok::RParen, "`)`")?;
                Ok(inner)
            }
            Tok::QuotedSheet(sheet) => {
                self.expect(Tok::Bang, "`!` after sheet name")?;
                let inner = self.reference()?;
                Ok(FormulaAst::SheetQualified { sheet, inner: Box::new(inner) })
            }
            Tok::Word(w) => match self.peek() {
                Tok::LParen => {
                    self.bump();
                    let args = self.arguments()?;
                    Ok(FormulaAst::call(w.to_ascii_uppercase(), args))
                }
                Tok::Bang => {
                    self.bump();
                    let inner = self.reference()?;
                    Ok(FormulaAst::SheetQualified { sheet: w, inner: Box::new(inner) })
                }
                _ => self.finish_reference(&w, pos),
            },
            other => Err(ParseError::Syntax { pos, message: format!("unexpected {other:?}") }),
        }
    }

    fn arguments(&mut self) -> Result<Vec<FormulaAst>, ParseError> {
        let mut args = Vec::new();
        if *self.peek() == Tok::RParen {
            self.bump();
            return Ok(args);
        }
        loop {
            args.push(self.comparison()?);
            match self.bump() {
                Tok::Comma => continue,
                Tok::RParen => return Ok(args),
                other => {
                    return Err(ParseError::Syntax {
                        pos: self.toks[self.at.saturating_sub(1)].pos,
                        message: format!("expected `,` or `)`, found {other:?}"),
                    })
                }
            }
        }
    }

    fn reference(&mut self) -> Result<FormulaAst, ParseError> {
        let pos = self.pos();
        match self.bump() {
            Tok::Word(w) => self.finish_reference(&w, pos),
            other => Err(ParseError::Syntax { pos, message: format!("expected a cell reference, found {other:?}") }),
        }
    }

    fn marked(&self, word: &str, pos: usize) -> Result<MarkedAddr, ParseError> {
        parse_marked(word).map_err(|_| ParseError::Syntax { pos, message: format!("`{word}` is not a cell reference") })
    }

    fn finish_reference(&mut self, word: &str, pos: usize) -> Result<FormulaAst, ParseError> {
        let start = self.marked(word, pos)?;
        if *self.peek() != Tok::Colon {
            return Ok(FormulaAst::Cell(start));
        }
        self.bump();
        let end_pos = self.pos();
        match self.bump() {
            Tok::Word(w) => Ok(FormulaAst::range(start, self.marked(&w, end_pos)?)),
            other => Err(ParseError::Syntax { pos: end_pos, message: format!("expected range end, found {other:?}") }),
        }
    }
}

/// Parses formula text starting with `=`.
pub fn parse_formula(source: &str) -> Result<FormulaAst, ParseError> {
    let body = source.strip_prefix('=').ok_or(ParseError::MissingEquals)?;
    let toks = lex(body, 1)?;
    let mut p = Parser { toks, at: 0 };
    if *p.peek() == Tok::End {
        return p.err("empty formula");
    }
    let ast = p.comparison()?;
    if *p.peek() != Tok::End {
        return p.err(format!("trailing input {:?}", p.peek()));
    }
    Ok(ast)
}
