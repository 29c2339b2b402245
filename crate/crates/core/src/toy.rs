//! A small command language with real state, failures, delays and
//! printing. Each command is a transaction split into a state-independent
//! `read`, a state-transforming `eval`, and a state-preserving `print`.
//!
//! ```text
//! theory N [imports A B ...] begin
//! def n = e                     bind n to the value of e
//! thm n : e1 = e2 [sorry | by slow k]
//! slow k                        interruptible delay of k ms
//! print e                       render the value of e in the print phase
//! fail m                        program error m
//! keyword k                     declare k as a command keyword
//! raw "text"                    write text to the raw stdout channel
//! remote f "arg"                call a front-end function
//! shell "cmd"                   run an external command
//! end
//! ```
//!
//! Expressions are integer literals, names, `+`, `*` and parentheses.

use crate::eval::{self, checkpoint, interruptible_sleep, Failure, RemoteRegistry, Res};
use crate::message::Message;
use crate::syntax::{self, CommandSpan, KeywordTable, Token, TokenKind};
use std::collections::hash_map::DefaultHasher;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::hash::{Hash, Hasher};
use std::io::Write;
use std::sync::Arc;
use std::time::Duration;

pub const COMMANDS: &[&str] = &[
    "theory", "end", "def", "thm", "slow", "print", "fail", "keyword", "raw", "remote", "shell",
];

const MINOR: &[&str] = &["imports", "begin", "sorry", "by", "=", "+", "*", ":", "(", ")"];

/// The keyword table of the base language.
pub fn keywords() -> KeywordTable {
    let table = COMMANDS
        .iter()
        .fold(KeywordTable::new(), |t, k| t.with_command(*k));
    MINOR.iter().fold(table, |t, k| t.with_minor(*k))
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Expr {
    Num(i64),
    Var(String),
    Add(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
}

impl Expr {
    pub fn eval(&self, st: &ToplevelState) -> Res<i64> {
        match self {
            Expr::Num(n) => Ok(*n),
            Expr::Var(v) => st
                .definitions
                .get(v)
                .copied()
                .ok_or_else(|| Failure::error(format!("unbound name {v}"))),
            Expr::Add(a, b) => a
                .eval(st)?
                .checked_add(b.eval(st)?)
                .ok_or_else(|| Failure::error("arithmetic overflow")),
            Expr::Mul(a, b) => a
                .eval(st)?
                .checked_mul(b.eval(st)?)
                .ok_or_else(|| Failure::error("arithmetic overflow")),
        }
    }

    fn fmt_prec(&self, f: &mut fmt::Formatter<'_>, prec: u8) -> fmt::Result {
        match self {
            Expr::Num(n) => write!(f, "{n}"),
            Expr::Var(v) => f.write_str(v),
            Expr::Add(a, b) => {
                if prec > 0 {
                    f.write_str("(")?;
                }
                a.fmt_prec(f, 0)?;
                f.write_str(" + ")?;
                b.fmt_prec(f, 1)?;
                if prec > 0 {
                    f.write_str(")")?;
                }
                Ok(())
            }
            Expr::Mul(a, b) => {
                a.fmt_prec(f, 1)?;
                f.write_str(" * ")?;
                b.fmt_prec(f, 2)
            }
        }
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.fmt_prec(f, 0)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Proof {
    /// Both sides are evaluated during eval.
    Check,
    /// Unproven placeholder.
    Sorry,
    /// Checked during eval, plus a forked proof task of the given cost.
    Slow(u64),
}

/// Internal form of a command, as produced by [`read`].
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Command {
    NoOp,
    Theory { name: String, imports: Vec<String> },
    End,
    Def { name: String, expr: Expr },
    Thm { name: String, lhs: Expr, rhs: Expr, proof: Proof },
    Slow(u64),
    Print(Expr),
    Fail(String),
    Keyword(String),
    Raw(String),
    Remote { function: String, argument: String },
    Shell(String),
    /// A command introduced by `keyword`; resolved against the state.
    Custom { keyword: String, arguments: String },
    /// Malformed source. Raises the recorded error when evaluated.
    Diagnosed { message: String, position: usize },
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Theorem {
    pub statement: String,
    pub proven: bool,
}

/// The per-position prover state consumed and produced by commands.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct ToplevelState {
    pub theory: Option<String>,
    pub open: bool,
    pub definitions: BTreeMap<String, i64>,
    pub theorems: BTreeMap<String, Theorem>,
    pub keywords: BTreeSet<String>,
}

impl ToplevelState {
    /// Stable content hash.
    pub fn digest(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.hash(&mut h);
        h.finish()
    }

    /// Union of import states; later imports win on clashes.
    pub fn merge<'a>(imports: impl IntoIterator<Item = &'a ToplevelState>) -> ToplevelState {
        let mut out = ToplevelState::default();
        for st in imports {
            out.definitions
                .extend(st.definitions.iter().map(|(k, v)| (k.clone(), *v)));
            out.theorems
                .extend(st.theorems.iter().map(|(k, v)| (k.clone(), v.clone())));
            out.keywords.extend(st.keywords.iter().cloned());
        }
        out
    }
}

/// What eval hands to print.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Output {
    None,
    Defined { name: String, value: i64 },
    Theorem { name: String, statement: String, proven: bool },
    Value(String),
    Text(String),
}

/// Work split off from eval that later commands do not depend on.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ProofTask {
    pub theorem: String,
    pub cost: Duration,
}

impl ProofTask {
    pub fn run(&self) -> Res<Vec<Message>> {
        interruptible_sleep(self.cost)?;
        Ok(Vec::new())
    }
}

/// Services available to evaluation.
#[derive(Clone, Default)]
pub struct Context {
    pub remote: Option<Arc<RemoteRegistry>>,
}

/// Result of a command transaction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Transition {
    pub state: Arc<ToplevelState>,
    pub output: Output,
    pub messages: Vec<Message>,
    pub failed: bool,
    pub proofs: Vec<ProofTask>,
}

struct Parser<'a> {
    tokens: Vec<&'a Token>,
    pos: usize,
    end: usize,
}

type ParseResult<T> = Result<T, (String, usize)>;

impl<'a> Parser<'a> {
    fn new(tokens: &'a [Token]) -> Self {
        let end = tokens.last().map_or(0, |t| t.range.end);
        Parser {
            tokens: tokens.iter().filter(|t| t.is_proper()).collect(),
            pos: 0,
            end,
        }
    }

    fn peek(&self) -> Option<&'a Token> {
        self.tokens.get(self.pos).copied()
    }

    fn here(&self) -> usize {
        self.peek().map_or(self.end, |t| t.range.start)
    }

    fn fail<T>(&self, what: &str) -> ParseResult<T> {
        let found = self
            .peek()
            .map_or_else(|| "end of command".to_string(), |t| format!("{:?}", t.text));
        Err((format!("expected {what}, found {found}"), self.here()))
    }

    fn next(&mut self) -> Option<&'a Token> {
        let t = self.peek();
        self.pos += 1;
        t
    }

    fn is_keyword(&self, kw: &str) -> bool {
        self.peek()
            .is_some_and(|t| t.kind == TokenKind::Keyword && t.text == kw)
    }

    fn keyword(&mut self, kw: &str) -> ParseResult<()> {
        if self.is_keyword(kw) {
            self.pos += 1;
            Ok(())
        } else {
            self.fail(&format!("{kw:?}"))
        }
    }

    fn ident(&mut self) -> ParseResult<String> {
        match self.peek() {
            Some(t) if t.kind == TokenKind::Ident => {
                self.pos += 1;
                Ok(t.text.clone())
            }
            _ => self.fail("identifier"),
        }
    }

    fn number(&mut self) -> ParseResult<u64> {
        match self.peek() {
            Some(t) if t.kind == TokenKind::Number => match t.text.parse() {
                Ok(n) => {
                    self.pos += 1;
                    Ok(n)
                }
                Err(_) => Err(("number too large".to_string(), t.range.start)),
            },
            _ => self.fail("number"),
        }
    }

    fn string(&mut self) -> ParseResult<String> {
        match self.peek().and_then(Token::unquoted) {
            Some(s) => {
                self.pos += 1;
                Ok(s)
            }
            None => self.fail("quoted string"),
        }
    }

    fn expr(&mut self) -> ParseResult<Expr> {
        let mut e = self.term()?;
        while self.is_keyword("+") {
            self.pos += 1;
            e = Expr::Add(Box::new(e), Box::new(self.term()?));
        }
        Ok(e)
    }

    fn term(&mut self) -> ParseResult<Expr> {
        let mut e = self.atom()?;
        while self.is_keyword("*") {
            self.pos += 1;
            e = Expr::Mul(Box::new(e), Box::new(self.atom()?));
        }
        Ok(e)
    }

    fn atom(&mut self) -> ParseResult<Expr> {
        match self.peek() {
            Some(t) if t.kind == TokenKind::Number => {
                let start = t.range.start;
                let n = self.number()?;
                i64::try_from(n)
                    .map(Expr::Num)
                    .map_err(|_| ("number too large".to_string(), start))
            }
            Some(t) if t.kind == TokenKind::Ident => Ok(Expr::Var(self.ident()?)),
            _ if self.is_keyword("(") => {
                self.pos += 1;
                let e = self.expr()?;
                self.keyword(")")?;
                Ok(e)
            }
            _ => self.fail("expression"),
        }
    }

    fn finish(&self) -> ParseResult<()> {
        if self.pos < self.tokens.len() {
            self.fail("end of command")
        } else {
            Ok(())
        }
    }

    fn rest_text(&self) -> String {
        self.tokens[self.pos.min(self.tokens.len())..]
            .iter()
            .map(|t| t.text.as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }

    fn command(&mut self, base: &KeywordTable) -> ParseResult<Command> {
        let Some(head) = self.next() else {
            return Ok(Command::NoOp);
        };
        let cmd = match head.text.as_str() {
            "theory" => {
                let name = self.ident()?;
                let mut imports = Vec::new();
                if self.is_keyword("imports") {
                    self.pos += 1;
                    imports.push(self.ident()?);
                    while matches!(self.peek(), Some(t) if t.kind == TokenKind::Ident) {
                        imports.push(self.ident()?);
                    }
                }
                self.keyword("begin")?;
                Command::Theory { name, imports }
            }
            "end" => Command::End,
            "def" => {
                let name = self.ident()?;
                self.keyword("=")?;
                Command::Def {
                    name,
                    expr: self.expr()?,
                }
            }
            "thm" => {
                let name = self.ident()?;
                self.keyword(":")?;
                let lhs = self.expr()?;
                self.keyword("=")?;
                let rhs = self.expr()?;
                let proof = if self.is_keyword("sorry") {
                    self.pos += 1;
                    Proof::Sorry
                } else if self.is_keyword("by") {
                    self.pos += 1;
                    match self.next() {
                        Some(t) if t.text == "slow" => Proof::Slow(self.number()?),
                        _ => {
                            self.pos -= 1;
                            return self.fail("\"slow\"");
                        }
                    }
                } else {
                    Proof::Check
                };
                Command::Thm {
                    name,
                    lhs,
                    rhs,
                    proof,
                }
            }
            "slow" => Command::Slow(self.number()?),
            "print" => Command::Print(self.expr()?),
            "fail" => match self.peek() {
                Some(t) if t.kind == TokenKind::String => Command::Fail(self.string()?),
                Some(t) if matches!(t.kind, TokenKind::Ident | TokenKind::Number) => {
                    self.pos += 1;
                    Command::Fail(t.text.clone())
                }
                _ => return self.fail("failure message"),
            },
            "keyword" => {
                let name = self.ident()?;
                if base.kind(&name).is_some() {
                    return Err((format!("{name} is already a keyword"), head.range.start));
                }
                Command::Keyword(name)
            }
            "raw" => Command::Raw(self.string()?),
            "remote" => Command::Remote {
                function: self.ident()?,
                argument: self.string()?,
            },
            "shell" => Command::Shell(self.string()?),
            other if base.is_command(other) => {
                return Err((format!("unsupported command {other}"), head.range.start))
            }
            other if head.kind == TokenKind::Ident => {
                return Ok(Command::Custom {
                    keyword: other.to_string(),
                    arguments: self.rest_text(),
                })
            }
            _ => return Err(("unexpected text before first command".to_string(), head.range.start)),
        };
        self.finish()?;
        Ok(cmd)
    }
}

/// Total READ of one command span: never fails, malformed input becomes a
/// diagnosed command that raises when evaluated.
pub fn read(table: &KeywordTable, src: &str) -> Command {
    let tokens = syntax::tokenize(table, &syntax::scan_symbols(src));
    read_tokens(table, &tokens)
}

pub fn read_tokens(table: &KeywordTable, tokens: &[Token]) -> Command {
    if let Some(t) = tokens.iter().find(|t| t.kind == TokenKind::Error) {
        return Command::Diagnosed {
            message: t.error.clone().unwrap_or_else(|| "bad input".to_string()),
            position: t.range.start,
        };
    }
    match Parser::new(tokens).command(table) {
        Ok(cmd) => cmd,
        Err((message, position)) => Command::Diagnosed { message, position },
    }
}

/// The eval part of a command: state in, output and new state out.
pub fn eval(cmd: &Command, st: &ToplevelState, ctx: &Context) -> Res<(Output, ToplevelState, Vec<ProofTask>)> {
    checkpoint()?;
    let mut next = st.clone();
    let mut proofs = Vec::new();
    let output = match cmd {
        Command::NoOp => Output::None,
        Command::Theory { name, .. } => {
            if st.open {
                return Err(Failure::error("theory already open"));
            }
            next.theory = Some(name.clone());
            next.open = true;
            Output::None
        }
        Command::End => {
            if !st.open {
                return Err(Failure::error("no open theory"));
            }
            next.open = false;
            Output::None
        }
        Command::Def { name, expr } => {
            if st.definitions.contains_key(name) {
                return Err(Failure::error(format!("duplicate definition {name}")));
            }
            let value = expr.eval(st)?;
            next.definitions.insert(name.clone(), value);
            Output::Defined {
                name: name.clone(),
                value,
            }
        }
        Command::Thm {
            name,
            lhs,
            rhs,
            proof,
        } => {
            if st.theorems.contains_key(name) {
                return Err(Failure::error(format!("duplicate theorem {name}")));
            }
            let statement = format!("{lhs} = {rhs}");
            let proven = *proof != Proof::Sorry;
            if proven {
                let (l, r) = (lhs.eval(st)?, rhs.eval(st)?);
                if l != r {
                    return Err(Failure::error(format!("{l} ≠ {r}")));
                }
            }
            if let Proof::Slow(ms) = proof {
                proofs.push(ProofTask {
                    theorem: name.clone(),
                    cost: Duration::from_millis(*ms),
                });
            }
            next.theorems.insert(
                name.clone(),
                Theorem {
                    statement: statement.clone(),
                    proven,
                },
            );
            Output::Theorem {
                name: name.clone(),
                statement,
                proven,
            }
        }
        Command::Slow(ms) => {
            interruptible_sleep(Duration::from_millis(*ms))?;
            Output::None
        }
        Command::Print(expr) => Output::Value(expr.eval(st)?.to_string()),
        Command::Fail(message) => return Err(Failure::error(message.clone())),
        Command::Keyword(name) => {
            next.keywords.insert(name.clone());
            Output::None
        }
        Command::Raw(text) => {
            let mut out = std::io::stdout().lock();
            let _ = out.write_all(text.as_bytes());
            let _ = out.flush();
            Output::None
        }
        Command::Remote { function, argument } => match &ctx.remote {
            Some(registry) => Output::Text(eval::remote_eval(registry, function, argument)?),
            None => return Err(Failure::error("remote evaluation is not available")),
        },
        Command::Shell(command_line) => Output::Text(eval::external_eval(command_line, "", None)?),
        Command::Custom { keyword, arguments } => {
            if !st.keywords.contains(keyword) {
                return Err(Failure::error(format!("unknown command {keyword}")));
            }
            Output::Text(if arguments.is_empty() {
                keyword.clone()
            } else {
                format!("{keyword} {arguments}")
            })
        }
        Command::Diagnosed { message, .. } => return Err(Failure::error(message.clone())),
    };
    Ok((output, next, proofs))
}

/// Runs eval as an atomic transaction: a program error leaves the state
/// unchanged and becomes an error message. Interrupts propagate.
pub fn transaction(cmd: &Command, st: &Arc<ToplevelState>, ctx: &Context) -> Res<Transition> {
    match eval::catch(|| eval(cmd, st, ctx)) {
        Ok((output, next, proofs)) => Ok(Transition {
            state: Arc::new(next),
            output,
            messages: Vec::new(),
            failed: false,
            proofs,
        }),
        Err(Failure::Program(e)) => {
            let position = match cmd {
                Command::Diagnosed { position, .. } => *position,
                _ => 0,
            };
            Ok(Transition {
                state: st.clone(),
                output: Output::None,
                messages: vec![Message::error(&e).at(position)],
                failed: true,
                proofs: Vec::new(),
            })
        }
        Err(Failure::Interrupt) => Err(Failure::Interrupt),
    }
}

fn plural(n: usize, word: &str) -> String {
    if n == 1 {
        format!("{n} {word}")
    } else {
        format!("{n} {word}s")
    }
}

/// The print part: renders the output against the post-state. Total.
pub fn print(st: &ToplevelState, output: &Output) -> Vec<Message> {
    match output {
        Output::None => Vec::new(),
        Output::Defined { name, value } => vec![Message::writeln(format!(
            "{name} = {value}; {}",
            plural(st.definitions.len(), "definition")
        ))],
        Output::Theorem {
            name,
            statement,
            proven: true,
        } => vec![Message::writeln(format!(
            "theorem {name}: {statement}; {}",
            plural(st.theorems.len(), "theorem")
        ))],
        Output::Theorem {
            name,
            proven: false,
            ..
        } => vec![Message::warning(format!("theorem {name}: unproven"))],
        Output::Value(v) | Output::Text(v) => vec![Message::writeln(v.clone())],
    }
}

/// Splits theory text into command spans, honoring `keyword` declarations
/// for the text that follows them.
pub fn parse_theory(text: &str) -> Vec<CommandSpan> {
    let mut table = keywords();
    let mut spans = Vec::new();
    let mut offset = 0;
    'outer: while offset < text.len() {
        for span in syntax::read_spans(&table, &text[offset..]) {
            if let Some((span, name)) = cut_declaration(&span) {
                offset += span.source.len();
                push_span(&mut spans, span);
                table = table.with_command(name);
                continue 'outer;
            }
            offset += span.source.len();
            push_span(&mut spans, span);
        }
    }
    spans
}

/// Appends a span, except that a span following `by` is its proof method
/// (`by slow k`) and joins the preceding span.
fn push_span(spans: &mut Vec<CommandSpan>, span: CommandSpan) {
    let after_by = spans.last().is_some_and(|last| {
        last.tokens
            .iter()
            .rev()
            .find(|t| t.is_proper())
            .is_some_and(|t| t.kind == TokenKind::Keyword && t.text == "by")
    });
    match spans.last_mut() {
        Some(last) if after_by => {
            last.source.push_str(&span.source);
            last.tokens.extend(span.tokens);
        }
        _ => spans.push(span),
    }
}

/// A `keyword k` span cut after `k` and its trailing whitespace, so the
/// rest of the text can be re-read with `k` as a command.
fn cut_declaration(span: &CommandSpan) -> Option<(CommandSpan, String)> {
    if span.name != "keyword" {
        return None;
    }
    let proper: Vec<usize> = (0..span.tokens.len())
        .filter(|&i| span.tokens[i].is_proper())
        .collect();
    let &name_at = proper.get(1)?;
    if span.tokens[name_at].kind != TokenKind::Ident {
        return None;
    }
    let end = proper.get(2).copied().unwrap_or(span.tokens.len());
    let tokens = span.tokens[..end].to_vec();
    let cut = CommandSpan {
        name: span.name.clone(),
        source: tokens.iter().map(|t| t.text.as_str()).collect(),
        tokens,
    };
    match read_tokens(&keywords(), &cut.tokens) {
        Command::Keyword(name) => Some((cut, name)),
        _ => None,
    }
}

/// Name and imports of a leading `theory` header, if present.
pub fn theory_header(spans: &[CommandSpan]) -> Option<(String, Vec<String>)> {
    let first = spans.iter().find(|s| !s.is_ignored() || s.proper_tokens().next().is_some())?;
    match read_tokens(&keywords(), &first.tokens) {
        Command::Theory { name, imports } => Some((name, imports)),
        _ => None,
    }
}

/// Highlighting ranges reported back to the front-end: token kind and
/// symbol range, for keywords, strings, comments and errors.
pub fn markup(tokens: &[Token]) -> Vec<(TokenKind, usize, usize)> {
    tokens
        .iter()
        .filter(|t| {
            matches!(
                t.kind,
                TokenKind::Command | TokenKind::Keyword | TokenKind::String | TokenKind::Comment | TokenKind::Error
            )
        })
        .map(|t| (t.kind, t.range.start, t.range.end))
        .collect()
}
