//! Parser and interpreter for the small C subset the program templates use.
//!
//! Supported: `int` scalars and fixed-size arrays, `int`/`void` functions,
//! `if`/`else`, `while`, `for`, `switch`, `break`, `continue`, `return`,
//! `scanf("%d ...")`, `printf` with `%d`/`%i`/`%c`/`%%` and widths. Integer
//! arithmetic wraps at 32 bits like the usual two's-complement targets.
//!
//! While parsing, the parser records every edit site a bug could be injected
//! at, classified by [`SiteKind`].

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::SiteKind;
use crate::encode::{lex_spans, Token, TokenKind};

/// Value read from a scalar that was declared without an initializer.
pub const UNINIT_VALUE: i32 = 21845;
pub const DEFAULT_STEP_LIMIT: u64 = 50_000;
const OUTPUT_LIMIT: usize = 4096;

#[derive(Debug, Error, PartialEq, Eq)]
#[error("parse error at byte {offset}: {message}")]
pub struct ParseError {
    pub offset: usize,
    pub message: String,
}

/// A place in the source where one bug of `kind` can be injected.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditSite {
    pub id: String,
    pub kind: SiteKind,
    pub start: usize,
    pub end: usize,
    /// Inside an `if`/`while`/`for` condition.
    pub in_condition: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Rem,
    Lt,
    Le,
    Gt,
    Ge,
    Eq,
    Ne,
    And,
    Or,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum AssignOp {
    Set,
    Add,
    Sub,
    Mul,
    Div,
    Rem,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum UnOp {
    Neg,
    Not,
}

#[derive(Debug, Clone)]
enum Expr {
    Int(i32),
    Str(String),
    Var(String),
    Index(String, Box<Expr>),
    Call(String, Vec<Expr>),
    AddrOf(Box<Expr>),
    Unary(UnOp, Box<Expr>),
    Binary(BinOp, Box<Expr>, Box<Expr>),
    Assign(AssignOp, Box<Expr>, Box<Expr>),
    Step { target: Box<Expr>, delta: i32, prefix: bool },
}

#[derive(Debug, Clone)]
struct Declarator {
    name: String,
    array_len: Option<Expr>,
    init: Option<Expr>,
    init_list: Option<Vec<Expr>>,
}

#[derive(Debug, Clone)]
enum Stmt {
    Decl(Vec<Declarator>),
    Expr(Expr),
    If(Expr, Box<Stmt>, Option<Box<Stmt>>),
    While(Expr, Box<Stmt>),
    For(Option<Box<Stmt>>, Option<Expr>, Option<Expr>, Box<Stmt>),
    Switch {
        scrutinee: Expr,
        body: Vec<Stmt>,
        /// `None` marks `default`; the index is the first body statement.
        labels: Vec<(Option<i32>, usize)>,
    },
    Return(Option<Expr>),
    Break,
    Continue,
    Block(Vec<Stmt>),
    Empty,
}

#[derive(Debug, Clone)]
struct Function {
    params: Vec<(String, bool)>,
    body: Vec<Stmt>,
}

/// A parsed program plus the edit sites found in it.
#[derive(Debug, Clone)]
pub struct Program {
    functions: HashMap<String, Function>,
    pub sites: Vec<EditSite>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum CondCtx {
    None,
    Branch,
    Loop,
}

struct Parser<'a> {
    src: &'a str,
    toks: Vec<Token<'a>>,
    pos: usize,
    sites: Vec<EditSite>,
    cond: CondCtx,
    suppress_constants: bool,
    in_main: bool,
}

pub fn parse(src: &str) -> Result<Program, ParseError> {
    let toks = lex_spans(src)
        .into_iter()
        .filter(|t| t.kind != TokenKind::Preproc)
        .collect();
    let mut p = Parser {
        src,
        toks,
        pos: 0,
        sites: Vec::new(),
        cond: CondCtx::None,
        suppress_constants: false,
        in_main: false,
    };
    let mut functions = HashMap::new();
    while p.pos < p.toks.len() {
        let (name, func) = p.function()?;
        functions.insert(name, func);
    }
    if !functions.contains_key("main") {
        return Err(ParseError {
            offset: src.len(),
            message: "no main function".into(),
        });
    }
    let mut sites = p.sites;
    sites.sort_by_key(|s| (s.start, s.end));
    sites.dedup_by(|a, b| a.start == b.start && a.end == b.end && a.kind == b.kind);
    for site in &mut sites {
        site.id = format!("{}@{}", site.kind.short(), site.start);
    }
    Ok(Program { functions, sites })
}

impl<'a> Parser<'a> {
    fn peek(&self) -> Option<&str> {
        self.toks.get(self.pos).map(|t| t.text)
    }

    fn peek_at(&self, n: usize) -> Option<&str> {
        self.toks.get(self.pos + n).map(|t| t.text)
    }

    fn offset(&self) -> usize {
        self.toks.get(self.pos).map_or(self.src.len(), |t| t.start)
    }

    fn err<T>(&self, message: impl Into<String>) -> Result<T, ParseError> {
        Err(ParseError {
            offset: self.offset(),
            message: message.into(),
        })
    }

    fn eat(&mut self, text: &str) -> bool {
        if self.peek() == Some(text) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect(&mut self, text: &str) -> Result<(), ParseError> {
        if self.eat(text) {
            Ok(())
        } else {
            let found = self.peek().unwrap_or("end of input").to_string();
            self.err(format!("expected `{text}`, found `{found}`"))
        }
    }

    fn ident(&mut self) -> Result<String, ParseError> {
        match self.toks.get(self.pos) {
            Some(t) if t.kind == TokenKind::Ident && !is_keyword(t.text) => {
                self.pos += 1;
                Ok(t.text.to_string())
            }
            _ => self.err("expected identifier"),
        }
    }

    fn site(&mut self, kind: SiteKind, start: usize, end: usize) {
        self.sites.push(EditSite {
            id: String::new(),
            kind,
            start,
            end,
            in_condition: self.cond != CondCtx::None,
        });
    }

    /// Span from token `first` to the token before the cursor.
    fn span_from(&self, first: usize) -> (usize, usize) {
        (self.toks[first].start, self.toks[self.pos - 1].end)
    }

    fn function(&mut self) -> Result<(String, Function), ParseError> {
        if !(self.eat("int") || self.eat("void")) {
            return self.err("expected function return type");
        }
        let name = self.ident()?;
        self.expect("(")?;
        let mut params = Vec::new();
        if !self.eat(")") {
            if self.peek() == Some("void") && self.peek_at(1) == Some(")") {
                self.pos += 2;
            } else {
                loop {
                    self.expect("int")?;
                    let pname = self.ident()?;
                    let is_array = if self.eat("[") {
                        self.expect("]")?;
                        true
                    } else {
                        false
                    };
                    params.push((pname, is_array));
                    if self.eat(")") {
                        break;
                    }
                    self.expect(",")?;
                }
            }
        }
        self.in_main = name == "main";
        let body = self.block()?;
        Ok((name, Function { params, body }))
    }

    fn block(&mut self) -> Result<Vec<Stmt>, ParseError> {
        self.expect("{")?;
        let mut stmts = Vec::new();
        while !self.eat("}") {
            if self.pos >= self.toks.len() {
                return self.err("unterminated block");
            }
            stmts.push(self.statement()?);
        }
        Ok(stmts)
    }

    fn with_cond<T>(
        &mut self,
        cond: CondCtx,
        f: impl FnOnce(&mut Self) -> Result<T, ParseError>,
    ) -> Result<T, ParseError> {
        let saved = std::mem::replace(&mut self.cond, cond);
        let out = f(self);
        self.cond = saved;
        out
    }

    fn without_constants<T>(
        &mut self,
        f: impl FnOnce(&mut Self) -> Result<T, ParseError>,
    ) -> Result<T, ParseError> {
        let saved = std::mem::replace(&mut self.suppress_constants, true);
        let out = f(self);
        self.suppress_constants = saved;
        out
    }

    fn statement(&mut self) -> Result<Stmt, ParseError> {
        match self.peek() {
            Some("int") => self.declaration(),
            Some("{") => Ok(Stmt::Block(self.block()?)),
            Some(";") => {
                self.pos += 1;
                Ok(Stmt::Empty)
            }
            Some("if") => {
                self.pos += 1;
                self.expect("(")?;
                let cond = self.with_cond(CondCtx::Branch, Self::expr)?;
                self.expect(")")?;
                let then = Box::new(self.statement()?);
                let other = if self.eat("else") {
                    Some(Box::new(self.statement()?))
                } else {
                    None
                };
                Ok(Stmt::If(cond, then, other))
            }
            Some("while") => {
                self.pos += 1;
                self.expect("(")?;
                let cond = self.with_cond(CondCtx::Branch, Self::expr)?;
                self.expect(")")?;
                Ok(Stmt::While(cond, Box::new(self.statement()?)))
            }
            Some("for") => {
                self.pos += 1;
                self.expect("(")?;
                let init = if self.eat(";") {
                    None
                } else if self.peek() == Some("int") {
                    Some(Box::new(self.declaration()?))
                } else {
                    let e = self.expr()?;
                    self.expect(";")?;
                    Some(Box::new(Stmt::Expr(e)))
                };
                let cond = if self.peek() == Some(";") {
                    None
                } else {
                    Some(self.with_cond(CondCtx::Loop, Self::expr)?)
                };
                self.expect(";")?;
                let step = if self.peek() == Some(")") {
                    None
                } else {
                    Some(self.expr()?)
                };
                self.expect(")")?;
                Ok(Stmt::For(init, cond, step, Box::new(self.statement()?)))
            }
            Some("switch") => self.switch(),
            Some("return") => {
                self.pos += 1;
                if self.eat(";") {
                    return Ok(Stmt::Return(None));
                }
                let first = self.pos;
                let e = if self.in_main {
                    self.without_constants(Self::expr)?
                } else {
                    self.expr()?
                };
                if !self.in_main {
                    let (start, end) = self.span_from(first);
                    self.site(SiteKind::ReturnExpr, start, end);
                }
                self.expect(";")?;
                Ok(Stmt::Return(Some(e)))
            }
            Some("break") => {
                self.pos += 1;
                self.expect(";")?;
                Ok(Stmt::Break)
            }
            Some("continue") => {
                self.pos += 1;
                self.expect(";")?;
                Ok(Stmt::Continue)
            }
            Some(_) => {
                let e = self.expr()?;
                self.expect(";")?;
                Ok(Stmt::Expr(e))
            }
            None => self.err("unexpected end of input"),
        }
    }

    fn declaration(&mut self) -> Result<Stmt, ParseError> {
        self.expect("int")?;
        let mut decls = Vec::new();
        loop {
            let name_tok = self.pos;
            let name = self.ident()?;
            let mut d = Declarator {
                name,
                array_len: None,
                init: None,
                init_list: None,
            };
            if self.eat("[") {
                d.array_len = Some(self.without_constants(Self::expr)?);
                self.expect("]")?;
            }
            if self.eat("=") {
                if d.array_len.is_some() {
                    self.expect("{")?;
                    let mut items = Vec::new();
                    if !self.eat("}") {
                        loop {
                            items.push(self.assignment()?);
                            if self.eat("}") {
                                break;
                            }
                            self.expect(",")?;
                        }
                    }
                    d.init_list = Some(items);
                } else {
                    d.init = Some(self.assignment()?);
                    let start = self.toks[name_tok].end;
                    let end = self.toks[self.pos - 1].end;
                    self.site(SiteKind::Initialization, start, end);
                }
            }
            decls.push(d);
            if self.eat(";") {
                break;
            }
            self.expect(",")?;
        }
        Ok(Stmt::Decl(decls))
    }

    fn switch(&mut self) -> Result<Stmt, ParseError> {
        self.expect("switch")?;
        self.expect("(")?;
        let scrutinee = self.expr()?;
        self.expect(")")?;
        self.expect("{")?;
        let mut body = Vec::new();
        let mut labels = Vec::new();
        loop {
            match self.peek() {
                Some("}") => {
                    self.pos += 1;
                    break;
                }
                Some("case") => {
                    let case_tok = self.pos;
                    self.pos += 1;
                    let label = self.without_constants(Self::expr)?;
                    let value = const_eval(&label).ok_or_else(|| ParseError {
                        offset: self.toks[case_tok].start,
                        message: "case label must be constant".into(),
                    })?;
                    self.expect(":")?;
                    labels.push((Some(value), body.len()));
                    while !matches!(self.peek(), Some("case" | "default" | "}") | None) {
                        body.push(self.statement()?);
                    }
                    self.case_line_site(case_tok);
                }
                Some("default") => {
                    self.pos += 1;
                    self.expect(":")?;
                    labels.push((None, body.len()));
                }
                Some(_) => body.push(self.statement()?),
                None => return self.err("unterminated switch"),
            }
        }
        Ok(Stmt::Switch {
            scrutinee,
            body,
            labels,
        })
    }

    /// Records a switch-case site when the whole case arm sits alone on one line.
    fn case_line_site(&mut self, case_tok: usize) {
        let first = &self.toks[case_tok];
        let last = &self.toks[self.pos - 1];
        let line_start = self.src[..first.start].rfind('\n').map_or(0, |i| i + 1);
        if !self.src[line_start..first.start].trim().is_empty() {
            return;
        }
        let line_end = self.src[last.end..]
            .find('\n')
            .map_or(self.src.len(), |i| last.end + i + 1);
        if self.src[first.start..last.end].contains('\n')
            || !self.src[last.end..line_end].trim().is_empty()
        {
            return;
        }
        let saved = std::mem::replace(&mut self.cond, CondCtx::None);
        self.site(SiteKind::SwitchCase, line_start, line_end);
        self.cond = saved;
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        self.assignment()
    }

    fn assignment(&mut self) -> Result<Expr, ParseError> {
        let lhs = self.logical_or()?;
        let op = match self.peek() {
            Some("=") => AssignOp::Set,
            Some("+=") => AssignOp::Add,
            Some("-=") => AssignOp::Sub,
            Some("*=") => AssignOp::Mul,
            Some("/=") => AssignOp::Div,
            Some("%=") => AssignOp::Rem,
            _ => return Ok(lhs),
        };
        if !matches!(lhs, Expr::Var(_) | Expr::Index(..)) {
            return self.err("assignment to non-lvalue");
        }
        let tok = &self.toks[self.pos];
        if op != AssignOp::Set {
            let (start, end) = (tok.start, tok.end);
            self.site(SiteKind::BinaryOperator, start, end);
        }
        self.pos += 1;
        let rhs = self.assignment()?;
        Ok(Expr::Assign(op, Box::new(lhs), Box::new(rhs)))
    }

    fn binary_level(
        &mut self,
        ops: &[(&str, BinOp)],
        next: fn(&mut Self) -> Result<Expr, ParseError>,
        site: Option<SiteKind>,
    ) -> Result<Expr, ParseError> {
        let mut lhs = next(self)?;
        loop {
            let Some(&(_, op)) = ops.iter().find(|(t, _)| self.peek() == Some(*t)) else {
                return Ok(lhs);
            };
            let tok = &self.toks[self.pos];
            let (start, end) = (tok.start, tok.end);
            let kind = match site {
                Some(SiteKind::Comparison) => match self.cond {
                    CondCtx::Branch => Some(SiteKind::Comparison),
                    CondCtx::Loop => Some(SiteKind::LoopBound),
                    CondCtx::None => None,
                },
                other => other,
            };
            if let Some(kind) = kind {
                self.site(kind, start, end);
            }
            self.pos += 1;
            let rhs = next(self)?;
            lhs = Expr::Binary(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn logical_or(&mut self) -> Result<Expr, ParseError> {
        self.binary_level(&[("||", BinOp::Or)], Self::logical_and, None)
    }

    fn logical_and(&mut self) -> Result<Expr, ParseError> {
        self.binary_level(&[("&&", BinOp::And)], Self::equality, None)
    }

    fn equality(&mut self) -> Result<Expr, ParseError> {
        self.binary_level(
            &[("==", BinOp::Eq), ("!=", BinOp::Ne)],
            Self::relational,
            Some(SiteKind::Comparison),
        )
    }

    fn relational(&mut self) -> Result<Expr, ParseError> {
        self.binary_level(
            &[
                ("<=", BinOp::Le),
                (">=", BinOp::Ge),
                ("<", BinOp::Lt),
                (">", BinOp::Gt),
            ],
            Self::additive,
            Some(SiteKind::Comparison),
        )
    }

    fn additive(&mut self) -> Result<Expr, ParseError> {
        self.binary_level(
            &[("+", BinOp::Add), ("-", BinOp::Sub)],
            Self::multiplicative,
            Some(SiteKind::BinaryOperator),
        )
    }

    fn multiplicative(&mut self) -> Result<Expr, ParseError> {
        self.binary_level(
            &[("*", BinOp::Mul), ("/", BinOp::Div), ("%", BinOp::Rem)],
            Self::unary,
            Some(SiteKind::BinaryOperator),
        )
    }

    fn unary(&mut self) -> Result<Expr, ParseError> {
        match self.peek() {
            Some("-") => {
                self.pos += 1;
                Ok(Expr::Unary(UnOp::Neg, Box::new(self.unary()?)))
            }
            Some("+") => {
                self.pos += 1;
                self.unary()
            }
            Some("!") => {
                self.pos += 1;
                Ok(Expr::Unary(UnOp::Not, Box::new(self.unary()?)))
            }
            Some("&") => {
                self.pos += 1;
                Ok(Expr::AddrOf(Box::new(self.unary()?)))
            }
            Some(op @ ("++" | "--")) => {
                let delta = if op == "++" { 1 } else { -1 };
                self.pos += 1;
                let target = self.unary()?;
                Ok(Expr::Step {
                    target: Box::new(target),
                    delta,
                    prefix: true,
                })
            }
            _ => self.postfix(),
        }
    }

    fn postfix(&mut self) -> Result<Expr, ParseError> {
        let mut e = self.primary()?;
        loop {
            match self.peek() {
                Some(op @ ("++" | "--")) => {
                    let delta = if op == "++" { 1 } else { -1 };
                    self.pos += 1;
                    e = Expr::Step {
                        target: Box::new(e),
                        delta,
                        prefix: false,
                    };
                }
                _ => return Ok(e),
            }
        }
    }

    fn primary(&mut self) -> Result<Expr, ParseError> {
        let Some(tok) = self.toks.get(self.pos).cloned() else {
            return self.err("unexpected end of input");
        };
        match tok.kind {
            TokenKind::Number => {
                self.pos += 1;
                let value: i32 = tok.text.parse().map_err(|_| ParseError {
                    offset: tok.start,
                    message: format!("unsupported number `{}`", tok.text),
                })?;
                if !self.suppress_constants {
                    self.site(SiteKind::Constant, tok.start, tok.end);
                }
                Ok(Expr::Int(value))
            }
            TokenKind::Char => {
                self.pos += 1;
                let decoded = unescape(&tok.text[1..tok.text.len() - 1]);
                let c = decoded.chars().next().ok_or_else(|| ParseError {
                    offset: tok.start,
                    message: "empty char literal".into(),
                })?;
                Ok(Expr::Int(c as i32))
            }
            TokenKind::Str => {
                self.pos += 1;
                Ok(Expr::Str(unescape(&tok.text[1..tok.text.len() - 1])))
            }
            TokenKind::Ident if !is_keyword(tok.text) => {
                self.pos += 1;
                let name = tok.text.to_string();
                if self.eat("(") {
                    let mut args = Vec::new();
                    if !self.eat(")") {
                        loop {
                            let arg_tok = self.toks.get(self.pos).cloned();
                            let arg = self.assignment()?;
                            if name == "printf" && args.is_empty() {
                                if let (Some(t), Expr::Str(_)) = (arg_tok, &arg) {
                                    if t.kind == TokenKind::Str {
                                        let saved = std::mem::replace(&mut self.cond, CondCtx::None);
                                        self.site(SiteKind::IoFormat, t.start, t.end);
                                        self.cond = saved;
                                    }
                                }
                            }
                            args.push(arg);
                            if self.eat(")") {
                                break;
                            }
                            self.expect(",")?;
                        }
                    }
                    return Ok(Expr::Call(name, args));
                }
                if self.eat("[") {
                    let first = self.pos;
                    let saved = std::mem::replace(&mut self.cond, CondCtx::None);
                    let index = self.expr();
                    self.cond = saved;
                    let index = index?;
                    let (start, end) = self.span_from(first);
                    self.site(SiteKind::ArrayIndex, start, end);
                    self.expect("]")?;
                    return Ok(Expr::Index(name, Box::new(index)));
                }
                Ok(Expr::Var(name))
            }
            _ if tok.text == "(" => {
                self.pos += 1;
                let e = self.expr()?;
                self.expect(")")?;
                Ok(e)
            }
            _ => self.err(format!("unexpected token `{}`", tok.text)),
        }
    }
}

fn is_keyword(s: &str) -> bool {
    matches!(
        s,
        "int" | "void" | "if" | "else" | "while" | "for" | "switch" | "case" | "default"
            | "return" | "break" | "continue"
    )
}

fn const_eval(e: &Expr) -> Option<i32> {
    match e {
        Expr::Int(v) => Some(*v),
        Expr::Unary(UnOp::Neg, inner) => const_eval(inner).map(i32::wrapping_neg),
        _ => None,
    }
}

/// Decodes the C escape sequences used in string and char literals.
pub fn unescape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('n') => out.push('\n'),
            Some('t') => out.push('\t'),
            Some('0') => out.push('\0'),
            Some(other) => out.push(other),
            None => out.push('\\'),
        }
    }
    out
}

/// Why a run stopped before `main` returned.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Fault {
    IndexOutOfBounds,
    DivisionByZero,
    StepLimit,
    Undefined(String),
    BadCall(String),
}

impl fmt::Display for Fault {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Fault::IndexOutOfBounds => write!(f, "array index out of bounds"),
            Fault::DivisionByZero => write!(f, "division by zero"),
            Fault::StepLimit => write!(f, "step limit exceeded"),
            Fault::Undefined(name) => write!(f, "undefined name {name}"),
            Fault::BadCall(name) => write!(f, "bad call to {name}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunOutcome {
    pub output: String,
    pub fault: Option<Fault>,
    /// Reads of scalars or array cells that were never assigned.
    pub uninit_reads: u64,
}

#[derive(Debug, Clone, Copy)]
enum Slot {
    /// Value and whether it has been assigned.
    Scalar(i32, bool),
    Array(usize),
}

#[derive(Debug, Clone, Copy)]
enum Value {
    Int(i32),
    Array(usize),
}

enum Flow {
    Normal,
    Break,
    Continue,
    Return(i32),
}

struct Machine<'p> {
    program: &'p Program,
    arrays: Vec<Vec<i32>>,
    assigned: Vec<Vec<bool>>,
    uninit_reads: u64,
    frames: Vec<Vec<HashMap<String, Slot>>>,
    input: Vec<String>,
    input_pos: usize,
    output: String,
    steps: u64,
    step_limit: u64,
}

impl Program {
    /// Runs `main` on whitespace-separated integer input.
    pub fn run(&self, input: &str, step_limit: u64) -> RunOutcome {
        let mut m = Machine {
            program: self,
            arrays: Vec::new(),
            assigned: Vec::new(),
            uninit_reads: 0,
            frames: Vec::new(),
            input: input.split_whitespace().map(str::to_string).collect(),
            input_pos: 0,
            output: String::new(),
            steps: 0,
            step_limit,
        };
        let fault = m.call("main", Vec::new()).err();
        RunOutcome {
            output: m.output,
            fault,
            uninit_reads: m.uninit_reads,
        }
    }
}

impl Machine<'_> {
    fn tick(&mut self) -> Result<(), Fault> {
        self.steps += 1;
        if self.steps > self.step_limit {
            Err(Fault::StepLimit)
        } else {
            Ok(())
        }
    }

    fn call(&mut self, name: &str, args: Vec<Value>) -> Result<i32, Fault> {
        let func = self
            .program
            .functions
            .get(name)
            .ok_or_else(|| Fault::Undefined(name.to_string()))?;
        if func.params.len() != args.len() {
            return Err(Fault::BadCall(name.to_string()));
        }
        let mut scope = HashMap::new();
        for ((pname, is_array), arg) in func.params.iter().zip(args) {
            let slot = match (is_array, arg) {
                (true, Value::Array(h)) => Slot::Array(h),
                (false, Value::Int(v)) => Slot::Scalar(v, true),
                _ => return Err(Fault::BadCall(name.to_string())),
            };
            scope.insert(pname.clone(), slot);
        }
        if self.frames.len() > 64 {
            return Err(Fault::StepLimit);
        }
        self.frames.push(vec![scope]);
        let result = self.exec_block(&func.body);
        self.frames.pop();
        match result? {
            Flow::Return(v) => Ok(v),
            _ => Ok(0),
        }
    }

    fn scopes(&mut self) -> &mut Vec<HashMap<String, Slot>> {
        self.frames.last_mut().expect("active frame")
    }

    fn lookup(&self, name: &str) -> Result<Slot, Fault> {
        let frame = self.frames.last().expect("active frame");
        frame
            .iter()
            .rev()
            .find_map(|s| s.get(name).copied())
            .ok_or_else(|| Fault::Undefined(name.to_string()))
    }

    fn store(&mut self, name: &str, value: i32) -> Result<(), Fault> {
        let frame = self.frames.last_mut().expect("active frame");
        for scope in frame.iter_mut().rev() {
            if let Some(slot) = scope.get_mut(name) {
                return match slot {
                    Slot::Scalar(v, assigned) => {
                        *v = value;
                        *assigned = true;
                        Ok(())
                    }
                    Slot::Array(_) => Err(Fault::BadCall(format!("assign to array {name}"))),
                };
            }
        }
        Err(Fault::Undefined(name.to_string()))
    }

    fn exec_block(&mut self, stmts: &[Stmt]) -> Result<Flow, Fault> {
        self.scopes().push(HashMap::new());
        let mut flow = Ok(Flow::Normal);
        for s in stmts {
            match self.exec(s) {
                Ok(Flow::Normal) => {}
                other => {
                    flow = other;
                    break;
                }
            }
        }
        self.scopes().pop();
        flow
    }

    fn exec(&mut self, stmt: &Stmt) -> Result<Flow, Fault> {
        self.tick()?;
        match stmt {
            Stmt::Empty => Ok(Flow::Normal),
            Stmt::Decl(decls) => {
                for d in decls {
                    let slot = if let Some(len) = &d.array_len {
                        let n = self.eval_int(len)?;
                        if !(0..=100_000).contains(&n) {
                            return Err(Fault::IndexOutOfBounds);
                        }
                        let mut data = vec![UNINIT_VALUE; n as usize];
                        let assigned = d.init_list.is_some();
                        if let Some(items) = &d.init_list {
                            if items.len() > data.len() {
                                return Err(Fault::IndexOutOfBounds);
                            }
                            data.iter_mut().for_each(|x| *x = 0);
                            for (i, item) in items.iter().enumerate() {
                                data[i] = self.eval_int(item)?;
                            }
                        }
                        self.assigned.push(vec![assigned; data.len()]);
                        self.arrays.push(data);
                        Slot::Array(self.arrays.len() - 1)
                    } else {
                        match &d.init {
                            Some(e) => Slot::Scalar(self.eval_int(e)?, true),
                            None => Slot::Scalar(UNINIT_VALUE, false),
                        }
                    };
                    self.scopes()
                        .last_mut()
                        .expect("block scope")
                        .insert(d.name.clone(), slot);
                }
                Ok(Flow::Normal)
            }
            Stmt::Expr(e) => {
                self.eval(e)?;
                Ok(Flow::Normal)
            }
            Stmt::If(cond, then, other) => {
                if self.eval_int(cond)? != 0 {
                    self.exec_scoped(then)
                } else if let Some(other) = other {
                    self.exec_scoped(other)
                } else {
                    Ok(Flow::Normal)
                }
            }
            Stmt::While(cond, body) => {
                while self.eval_int(cond)? != 0 {
                    self.tick()?;
                    match self.exec_scoped(body)? {
                        Flow::Break => break,
                        Flow::Return(v) => return Ok(Flow::Return(v)),
                        Flow::Normal | Flow::Continue => {}
                    }
                }
                Ok(Flow::Normal)
            }
            Stmt::For(init, cond, step, body) => {
                self.scopes().push(HashMap::new());
                let out = self.exec_for(init.as_deref(), cond.as_ref(), step.as_ref(), body);
                self.scopes().pop();
                out
            }
            Stmt::Switch {
                scrutinee,
                body,
                labels,
            } => {
                let v = self.eval_int(scrutinee)?;
                let start = labels
                    .iter()
                    .find(|(l, _)| *l == Some(v))
                    .or_else(|| labels.iter().find(|(l, _)| l.is_none()))
                    .map(|(_, i)| *i);
                let Some(start) = start else {
                    return Ok(Flow::Normal);
                };
                self.scopes().push(HashMap::new());
                let mut flow = Ok(Flow::Normal);
                for s in &body[start..] {
                    match self.exec(s) {
                        Ok(Flow::Normal) => {}
                        Ok(Flow::Break) => break,
                        other => {
                            flow = other;
                            break;
                        }
                    }
                }
                self.scopes().pop();
                flow
            }
            Stmt::Return(e) => {
                let v = match e {
                    Some(e) => self.eval_int(e)?,
                    None => 0,
                };
                Ok(Flow::Return(v))
            }
            Stmt::Break => Ok(Flow::Break),
            Stmt::Continue => Ok(Flow::Continue),
            Stmt::Block(stmts) => self.exec_block(stmts),
        }
    }

    fn exec_scoped(&mut self, stmt: &Stmt) -> Result<Flow, Fault> {
        match stmt {
            Stmt::Block(stmts) => self.exec_block(stmts),
            other => self.exec(other),
        }
    }

    fn exec_for(
        &mut self,
        init: Option<&Stmt>,
        cond: Option<&Expr>,
        step: Option<&Expr>,
        body: &Stmt,
    ) -> Result<Flow, Fault> {
        if let Some(init) = init {
            self.exec(init)?;
        }
        loop {
            if let Some(cond) = cond {
                if self.eval_int(cond)? == 0 {
                    break;
                }
            }
            self.tick()?;
            match self.exec_scoped(body)? {
                Flow::Break => break,
                Flow::Return(v) => return Ok(Flow::Return(v)),
                Flow::Normal | Flow::Continue => {}
            }
            if let Some(step) = step {
                self.eval(step)?;
            }
        }
        Ok(Flow::Normal)
    }

    fn eval_int(&mut self, e: &Expr) -> Result<i32, Fault> {
        match self.eval(e)? {
            Value::Int(v) => Ok(v),
            Value::Array(_) => Err(Fault::BadCall("array used as integer".into())),
        }
    }

    fn element(&mut self, name: &str, index: &Expr) -> Result<(usize, usize), Fault> {
        let i = self.eval_int(index)?;
        match self.lookup(name)? {
            Slot::Array(h) => {
                if i < 0 || i as usize >= self.arrays[h].len() {
                    Err(Fault::IndexOutOfBounds)
                } else {
                    Ok((h, i as usize))
                }
            }
            Slot::Scalar(..) => Err(Fault::BadCall(format!("index into scalar {name}"))),
        }
    }

    fn note_read(&mut self, assigned: bool) {
        if !assigned {
            self.uninit_reads += 1;
        }
    }

    fn read_lvalue(&mut self, target: &Expr) -> Result<i32, Fault> {
        match target {
            Expr::Var(name) => match self.lookup(name)? {
                Slot::Scalar(v, assigned) => {
                    self.note_read(assigned);
                    Ok(v)
                }
                Slot::Array(_) => Err(Fault::BadCall(format!("array {name} as scalar"))),
            },
            Expr::Index(name, index) => {
                let (h, i) = self.element(name, index)?;
                self.note_read(self.assigned[h][i]);
                Ok(self.arrays[h][i])
            }
            _ => Err(Fault::BadCall("not an lvalue".into())),
        }
    }

    fn write_lvalue(&mut self, target: &Expr, value: i32) -> Result<(), Fault> {
        match target {
            Expr::Var(name) => self.store(name, value),
            Expr::Index(name, index) => {
                let (h, i) = self.element(name, index)?;
                self.arrays[h][i] = value;
                self.assigned[h][i] = true;
                Ok(())
            }
            _ => Err(Fault::BadCall("not an lvalue".into())),
        }
    }

    fn eval(&mut self, e: &Expr) -> Result<Value, Fault> {
        Ok(match e {
            Expr::Int(v) => Value::Int(*v),
            Expr::Str(_) => return Err(Fault::BadCall("string outside printf/scanf".into())),
            Expr::Var(name) => match self.lookup(name)? {
                Slot::Scalar(v, assigned) => {
                    self.note_read(assigned);
                    Value::Int(v)
                }
                Slot::Array(h) => Value::Array(h),
            },
            Expr::Index(..) => Value::Int(self.read_lvalue(e)?),
            Expr::AddrOf(_) => return Err(Fault::BadCall("address outside scanf".into())),
            Expr::Unary(op, inner) => {
                let v = self.eval_int(inner)?;
                Value::Int(match op {
                    UnOp::Neg => v.wrapping_neg(),
                    UnOp::Not => i32::from(v == 0),
                })
            }
            Expr::Binary(BinOp::And, l, r) => {
                Value::Int(i32::from(self.eval_int(l)? != 0 && self.eval_int(r)? != 0))
            }
            Expr::Binary(BinOp::Or, l, r) => {
                Value::Int(i32::from(self.eval_int(l)? != 0 || self.eval_int(r)? != 0))
            }
            Expr::Binary(op, l, r) => {
                let a = self.eval_int(l)?;
                let b = self.eval_int(r)?;
                Value::Int(arith(*op, a, b)?)
            }
            Expr::Assign(op, target, rhs) => {
                let r = self.eval_int(rhs)?;
                let v = match op {
                    AssignOp::Set => r,
                    AssignOp::Add => arith(BinOp::Add, self.read_lvalue(target)?, r)?,
                    AssignOp::Sub => arith(BinOp::Sub, self.read_lvalue(target)?, r)?,
                    AssignOp::Mul => arith(BinOp::Mul, self.read_lvalue(target)?, r)?,
                    AssignOp::Div => arith(BinOp::Div, self.read_lvalue(target)?, r)?,
                    AssignOp::Rem => arith(BinOp::Rem, self.read_lvalue(target)?, r)?,
                };
                self.write_lvalue(target, v)?;
                Value::Int(v)
            }
            Expr::Step {
                target,
                delta,
                prefix,
            } => {
                let old = self.read_lvalue(target)?;
                let new = old.wrapping_add(*delta);
                self.write_lvalue(target, new)?;
                Value::Int(if *prefix { new } else { old })
            }
            Expr::Call(name, args) => match name.as_str() {
                "printf" => Value::Int(self.printf(args)?),
                "scanf" => Value::Int(self.scanf(args)?),
                _ => {
                    let mut values = Vec::with_capacity(args.len());
                    for a in args {
                        values.push(self.eval(a)?);
                    }
                    Value::Int(self.call(name, values)?)
                }
            },
        })
    }

    fn printf(&mut self, args: &[Expr]) -> Result<i32, Fault> {
        let Some(Expr::Str(fmt)) = args.first() else {
            return Err(Fault::BadCall("printf".into()));
        };
        let mut rest = args[1..].iter();
        let mut out = String::new();
        let mut chars = fmt.chars().peekable();
        while let Some(c) = chars.next() {
            if c != '%' {
                out.push(c);
                continue;
            }
            let mut left = false;
            let mut width = 0usize;
            if chars.peek() == Some(&'-') {
                left = true;
                chars.next();
            }
            while let Some(d) = chars.peek().and_then(|c| c.to_digit(10)) {
                width = width * 10 + d as usize;
                chars.next();
            }
            let text = match chars.next() {
                Some('%') => "%".to_string(),
                Some('d' | 'i') => {
                    let e = rest.next().ok_or_else(|| Fault::BadCall("printf".into()))?;
                    self.eval_int(e)?.to_string()
                }
                Some('c') => {
                    let e = rest.next().ok_or_else(|| Fault::BadCall("printf".into()))?;
                    let v = self.eval_int(e)?;
                    char::from_u32(v as u32).unwrap_or('?').to_string()
                }
                _ => return Err(Fault::BadCall("printf".into())),
            };
            if text.len() < width {
                let pad = " ".repeat(width - text.len());
                if left {
                    out.push_str(&text);
                    out.push_str(&pad);
                } else {
                    out.push_str(&pad);
                    out.push_str(&text);
                }
            } else {
                out.push_str(&text);
            }
        }
        if self.output.len() + out.len() > OUTPUT_LIMIT {
            return Err(Fault::StepLimit);
        }
        self.output.push_str(&out);
        Ok(out.len() as i32)
    }

    fn scanf(&mut self, args: &[Expr]) -> Result<i32, Fault> {
        let Some(Expr::Str(fmt)) = args.first() else {
            return Err(Fault::BadCall("scanf".into()));
        };
        let wanted = fmt.matches("%d").count();
        if wanted != args.len() - 1 {
            return Err(Fault::BadCall("scanf".into()));
        }
        let mut read = 0;
        for target in &args[1..] {
            let Expr::AddrOf(lvalue) = target else {
                return Err(Fault::BadCall("scanf".into()));
            };
            let next = self.input.get(self.input_pos);
            let Some(value) = next.and_then(|s| s.parse::<i32>().ok()) else {
                return Ok(if read == 0 { -1 } else { read });
            };
            self.input_pos += 1;
            self.write_lvalue(lvalue, value)?;
            read += 1;
        }
        Ok(read)
    }
}

fn arith(op: BinOp, a: i32, b: i32) -> Result<i32, Fault> {
    Ok(match op {
        BinOp::Add => a.wrapping_add(b),
        BinOp::Sub => a.wrapping_sub(b),
        BinOp::Mul => a.wrapping_mul(b),
        BinOp::Div | BinOp::Rem if b == 0 => return Err(Fault::DivisionByZero),
        BinOp::Div => a.wrapping_div(b),
        BinOp::Rem => a.wrapping_rem(b),
        BinOp::Lt => i32::from(a < b),
        BinOp::Le => i32::from(a <= b),
        BinOp::Gt => i32::from(a > b),
        BinOp::Ge => i32::from(a >= b),
        BinOp::Eq => i32::from(a == b),
        BinOp::Ne => i32::from(a != b),
        BinOp::And | BinOp::Or => unreachable!("short-circuit ops handled by caller"),
    })
}
