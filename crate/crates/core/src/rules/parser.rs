//! Tokenizer and recursive-descent parser for rule expressions.
//!
//! ```text
//! rule    = special | expr
//! special = "accept" | "deny" | "unprotect" | "skip"      (any case)
//! expr    = and { "or" and }
//! and     = unary { "and" unary }
//! unary   = "not" unary | cmp
//! cmp     = term [ ("==" | "!=" | "<" | "<=" | ">" | ">=" | "in") term
//!                | ("=~" | "!~") string ]
//! term    = string | int | "true" | "false" | "$" ident | "cfg." ident
//!         | "[" [ term { "," term } ] "]" | ident "(" [ term { "," term } ] ")"
//!         | "(" expr ")"
//! ```

use regex::Regex;
use thiserror::Error;

use super::ast::{CmpOp, Expr, Func, Pattern};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("parse error at {position}: {message}")]
pub struct ParseError {
    /// Byte offset into the rule text.
    pub position: usize,
    pub message: String,
}

impl ParseError {
    fn new(position: usize, message: impl Into<String>) -> Self {
        Self {
            position,
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Str(String),
    Int(i64),
    Var(String),
    Ident(String),
    Op(&'static str),
    LParen,
    RParen,
    LBracket,
    RBracket,
    Comma,
    Dot,
    End,
}

fn is_ident_start(c: char) -> bool {
    c.is_ascii_alphabetic() || c == '_'
}

fn is_ident_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || c == '_'
}

fn tokenize(text: &str) -> Result<Vec<(usize, Tok)>, ParseError> {
    let mut out = Vec::new();
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut i = 0;
    while i < chars.len() {
        let (pos, c) = chars[i];
        if c.is_whitespace() {
            i += 1;
            continue;
        }
        let two: String = chars[i..chars.len().min(i + 2)].iter().map(|(_, c)| c).collect();
        let op2 = match two.as_str() {
            "==" => Some("=="),
            "!=" => Some("!="),
            "=~" => Some("=~"),
            "!~" => Some("!~"),
            "<=" => Some("<="),
            ">=" => Some(">="),
            _ => None,
        };
        if let Some(op) = op2 {
            out.push((pos, Tok::Op(op)));
            i += 2;
            continue;
        }
        match c {
            '<' => out.push((pos, Tok::Op("<"))),
            '>' => out.push((pos, Tok::Op(">"))),
            '(' => out.push((pos, Tok::LParen)),
            ')' => out.push((pos, Tok::RParen)),
            '[' => out.push((pos, Tok::LBracket)),
            ']' => out.push((pos, Tok::RBracket)),
            ',' => out.push((pos, Tok::Comma)),
            '.' => out.push((pos, Tok::Dot)),
            '"' | '\'' => {
                let quote = c;
                let mut s = String::new();
                i += 1;
                loop {
                    let Some(&(_, c)) = chars.get(i) else {
                        return Err(ParseError::new(pos, "unterminated string"));
                    };
                    if c == quote {
                        break;
                    }
                    if c == '\\' {
                        i += 1;
                        let Some(&(epos, e)) = chars.get(i) else {
                            return Err(ParseError::new(pos, "unterminated string"));
                        };
                        s.push(match e {
                            'n' => '\n',
                            'r' => '\r',
                            't' => '\t',
                            '\\' | '"' | '\'' => e,
                            _ => return Err(ParseError::new(epos, format!("unknown escape \\{e}"))),
                        });
                    } else {
                        s.push(c);
                    }
                    i += 1;
                }
                out.push((pos, Tok::Str(s)));
            }
            '$' => {
                let start = i + 1;
                let mut j = start;
                while j < chars.len() && is_ident_char(chars[j].1) {
                    j += 1;
                }
                if j == start || !is_ident_start(chars[start].1) {
                    return Err(ParseError::new(pos, "expected variable name after '$'"));
                }
                let name: String = chars[start..j].iter().map(|(_, c)| c).collect();
                out.push((pos, Tok::Var(name)));
                i = j;
                continue;
            }
            c if c.is_ascii_digit() || (c == '-' && chars.get(i + 1).is_some_and(|(_, d)| d.is_ascii_digit())) => {
                let mut j = i + 1;
                while j < chars.len() && chars[j].1.is_ascii_digit() {
                    j += 1;
                }
                let lit: String = chars[i..j].iter().map(|(_, c)| c).collect();
                let n = lit
                    .parse::<i64>()
                    .map_err(|_| ParseError::new(pos, "integer out of range"))?;
                out.push((pos, Tok::Int(n)));
                i = j;
                continue;
            }
            c if is_ident_start(c) => {
                let mut j = i;
                while j < chars.len() && is_ident_char(chars[j].1) {
                    j += 1;
                }
                let word: String = chars[i..j].iter().map(|(_, c)| c).collect();
                out.push((pos, Tok::Ident(word)));
                i = j;
                continue;
            }
            other => return Err(ParseError::new(pos, format!("unexpected character {other:?}"))),
        }
        i += 1;
    }
    out.push((text.len(), Tok::End));
    Ok(out)
}

struct Parser {
    toks: Vec<(usize, Tok)>,
    at: usize,
}

impl Parser {
    fn peek(&self) -> &Tok {
        &self.toks[self.at].1
    }

    fn pos(&self) -> usize {
        self.toks[self.at].0
    }

    fn bump(&mut self) -> Tok {
        let t = self.toks[self.at].1.clone();
        if self.at + 1 < self.toks.len() {
            self.at += 1;
        }
        t
    }

    fn keyword(&self, kw: &str) -> bool {
        matches!(self.peek(), Tok::Ident(w) if w == kw)
    }

    fn expect(&mut self, tok: Tok, what: &str) -> Result<(), ParseError> {
        if *self.peek() == tok {
            self.bump();
            Ok(())
        } else {
            Err(ParseError::new(self.pos(), format!("expected {what}")))
        }
    }

    fn or(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.and()?;
        while self.keyword("or") {
            self.bump();
            let rhs = self.and()?;
            lhs = Expr::Or(Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn and(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.unary()?;
        while self.keyword("and") {
            self.bump();
            let rhs = self.unary()?;
            lhs = Expr::And(Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Expr, ParseError> {
        if self.keyword("not") {
            self.bump();
            return Ok(Expr::Not(Box::new(self.unary()?)));
        }
        self.cmp()
    }

    fn cmp(&mut self) -> Result<Expr, ParseError> {
        let lhs = self.term()?;
        let op = match self.peek() {
            Tok::Op(op) => *op,
            Tok::Ident(w) if w == "in" => "in",
            _ => return Ok(lhs),
        };
        self.bump();
        let lhs = Box::new(lhs);
        match op {
            "=~" | "!~" => {
                let pos = self.pos();
                let Tok::Str(source) = self.bump() else {
                    return Err(ParseError::new(pos, "regex operand must be a string literal"));
                };
                let regex = Regex::new(&source)
                    .map_err(|e| ParseError::new(pos, format!("invalid regex: {e}")))?;
                Ok(Expr::Match {
                    negated: op == "!~",
                    subject: lhs,
                    pattern: Pattern { source, regex },
                })
            }
            "in" => Ok(Expr::In(lhs, Box::new(self.term()?))),
            _ => {
                let op = match op {
                    "==" => CmpOp::Eq,
                    "!=" => CmpOp::Ne,
                    "<" => CmpOp::Lt,
                    "<=" => CmpOp::Le,
                    ">" => CmpOp::Gt,
                    _ => CmpOp::Ge,
                };
                Ok(Expr::Cmp(op, lhs, Box::new(self.term()?)))
            }
        }
    }

    fn args(&mut self, close: Tok, what: &str) -> Result<Vec<Expr>, ParseError> {
        let mut items = Vec::new();
        if *self.peek() == close {
            self.bump();
            return Ok(items);
        }
        loop {
            items.push(self.term()?);
            match self.peek() {
                Tok::Comma => {
                    self.bump();
                }
                t if *t == close => {
                    self.bump();
                    return Ok(items);
                }
                _ => return Err(ParseError::new(self.pos(), format!("expected ',' or {what}"))),
            }
        }
    }

    fn term(&mut self) -> Result<Expr, ParseError> {
        let pos = self.pos();
        match self.bump() {
            Tok::Str(s) => Ok(Expr::Str(s)),
            Tok::Int(i) => Ok(Expr::Int(i)),
            Tok::Var(v) => Ok(Expr::Var(v)),
            Tok::LParen => {
                let e = self.or()?;
                self.expect(Tok::RParen, "')'")?;
                Ok(e)
            }
            Tok::LBracket => Ok(Expr::List(self.args(Tok::RBracket, "']'")?)),
            Tok::Ident(w) => match w.as_str() {
                "true" => Ok(Expr::Bool(true)),
                "false" => Ok(Expr::Bool(false)),
                "cfg" => {
                    self.expect(Tok::Dot, "'.' after cfg")?;
                    let npos = self.pos();
                    match self.bump() {
                        Tok::Ident(name) => Ok(Expr::Cfg(name)),
                        _ => Err(ParseError::new(npos, "expected configuration key")),
                    }
                }
                "and" | "or" | "not" | "in" => {
                    Err(ParseError::new(pos, format!("unexpected keyword '{w}'")))
                }
                name => {
                    let func = Func::from_name(name)
                        .ok_or_else(|| ParseError::new(pos, format!("unknown function '{name}'")))?;
                    self.expect(Tok::LParen, "'(' after function name")?;
                    let args = self.args(Tok::RParen, "')'")?;
                    check_call(func, &args, pos)?;
                    Ok(Expr::Call(func, args))
                }
            },
            Tok::End => Err(ParseError::new(pos, "unexpected end of rule")),
            other => Err(ParseError::new(pos, format!("unexpected token {other:?}"))),
        }
    }
}

fn check_call(func: Func, args: &[Expr], pos: usize) -> Result<(), ParseError> {
    if args.len() != 1 {
        return Err(ParseError::new(
            pos,
            format!("{}() takes exactly one argument", func.name()),
        ));
    }
    if let (Func::IpInRange, Expr::Str(cidr)) = (func, &args[0]) {
        super::eval::parse_cidr(cidr)
            .ok_or_else(|| ParseError::new(pos, format!("invalid CIDR block {cidr:?}")))?;
    }
    Ok(())
}

pub fn parse_expr(text: &str) -> Result<Expr, ParseError> {
    let toks = tokenize(text)?;
    let mut p = Parser { toks, at: 0 };
    let e = p.or()?;
    if *p.peek() != Tok::End {
        return Err(ParseError::new(p.pos(), "unexpected trailing input"));
    }
    Ok(e)
}
