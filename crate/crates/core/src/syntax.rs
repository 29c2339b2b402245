//! Outer syntax: the total READ phase.
//!
//! Source text is scanned into symbols, symbols into tokens against a
//! keyword table, and tokens into command spans. None of these steps can
//! fail: malformed input shows up as error tokens, which the evaluation
//! phase turns into runtime errors.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::Range;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Symbol {
    Char(char),
    /// A named symbol `\<name>`.
    Named(String),
}

impl Symbol {
    fn is_letter(&self) -> bool {
        match self {
            Symbol::Char(c) => c.is_alphabetic(),
            Symbol::Named(_) => true,
        }
    }

    fn is_digit(&self) -> bool {
        matches!(self, Symbol::Char(c) if c.is_ascii_digit())
    }

    fn is_quasi_letter(&self) -> bool {
        self.is_letter() || self.is_digit() || *self == Symbol::Char('_')
    }

    fn is_space(&self) -> bool {
        matches!(self, Symbol::Char(c) if c.is_whitespace())
    }

    fn is_char(&self, ch: char) -> bool {
        matches!(self, Symbol::Char(c) if *c == ch)
    }

    fn push_to(&self, out: &mut String) {
        match self {
            Symbol::Char(c) => out.push(*c),
            Symbol::Named(name) => {
                out.push_str("\\<");
                out.push_str(name);
                out.push('>');
            }
        }
    }
}

impl fmt::Display for Symbol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = String::new();
        self.push_to(&mut s);
        f.write_str(&s)
    }
}

/// Splits text into symbols. `\<name>` with a non-empty alphanumeric name
/// is one symbol; anything else that starts with `\<` falls back to plain
/// characters.
pub fn scan_symbols(text: &str) -> Vec<Symbol> {
    let mut out = Vec::with_capacity(text.len());
    let mut rest = text;
    while let Some(c) = rest.chars().next() {
        if let Some(name) = named_symbol(rest) {
            out.push(Symbol::Named(name.to_string()));
            rest = &rest[name.len() + 3..];
        } else {
            out.push(Symbol::Char(c));
            rest = &rest[c.len_utf8()..];
        }
    }
    out
}

fn named_symbol(text: &str) -> Option<&str> {
    let body = text.strip_prefix("\\<")?;
    let end = body.find(|c: char| !c.is_ascii_alphanumeric())?;
    (end > 0 && body[end..].starts_with('>')).then(|| &body[..end])
}

pub fn symbols_to_string(symbols: &[Symbol]) -> String {
    let mut out = String::new();
    for s in symbols {
        s.push_to(&mut out);
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum KeywordKind {
    Command,
    Minor,
}

/// Outer syntax keywords. Tables are values: extension returns a new table.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KeywordTable {
    keywords: BTreeMap<String, KeywordKind>,
}

impl KeywordTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds or re-declares a keyword. A name has exactly one kind, so
    /// command and minor keywords stay disjoint.
    pub fn with(mut self, name: impl Into<String>, kind: KeywordKind) -> Self {
        self.keywords.insert(name.into(), kind);
        self
    }

    pub fn with_command(self, name: impl Into<String>) -> Self {
        self.with(name, KeywordKind::Command)
    }

    pub fn with_minor(self, name: impl Into<String>) -> Self {
        self.with(name, KeywordKind::Minor)
    }

    pub fn kind(&self, name: &str) -> Option<KeywordKind> {
        self.keywords.get(name).copied()
    }

    pub fn is_command(&self, name: &str) -> bool {
        self.kind(name) == Some(KeywordKind::Command)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, KeywordKind)> {
        self.keywords.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Longest symbolic (non-identifier) keyword that prefixes `symbols`,
    /// measured in symbols.
    fn match_symbolic(&self, symbols: &[Symbol]) -> Option<(usize, KeywordKind)> {
        let mut best = None;
        let mut text = String::new();
        for (i, sym) in symbols.iter().enumerate().take(8) {
            if sym.is_quasi_letter() || sym.is_space() {
                break;
            }
            sym.push_to(&mut text);
            if let Some(kind) = self.kind(&text) {
                best = Some((i + 1, kind));
            }
        }
        best
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TokenKind {
    Command,
    Keyword,
    Ident,
    Number,
    String,
    Comment,
    Space,
    Error,
}

impl TokenKind {
    pub fn is_proper(self) -> bool {
        !matches!(self, TokenKind::Space | TokenKind::Comment)
    }

    pub fn name(self) -> &'static str {
        match self {
            TokenKind::Command => "command",
            TokenKind::Keyword => "keyword",
            TokenKind::Ident => "ident",
            TokenKind::Number => "number",
            TokenKind::String => "string",
            TokenKind::Comment => "comment",
            TokenKind::Space => "space",
            TokenKind::Error => "error",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Token {
    pub kind: TokenKind,
    pub text: String,
    /// Range in symbols within the tokenized input.
    pub range: Range<usize>,
    /// Set for error tokens only.
    pub error: Option<String>,
}

impl Token {
    pub fn is_proper(&self) -> bool {
        self.kind.is_proper()
    }

    /// Contents of a quoted string token with escapes resolved.
    pub fn unquoted(&self) -> Option<String> {
        if self.kind != TokenKind::String {
            return None;
        }
        let inner = self.text.strip_prefix('"')?.strip_suffix('"')?;
        let mut out = String::with_capacity(inner.len());
        let mut chars = inner.chars();
        while let Some(c) = chars.next() {
            if c == '\\' {
                match chars.next() {
                    Some('n') => out.push('\n'),
                    Some('t') => out.push('\t'),
                    Some(other) => out.push(other),
                    None => {}
                }
            } else {
                out.push(c);
            }
        }
        Some(out)
    }
}

/// Tokenizes symbols. Total and lossless: token texts concatenate to the
/// input, and unterminated strings or comments become error tokens that
/// extend to the end of input.
pub fn tokenize(table: &KeywordTable, symbols: &[Symbol]) -> Vec<Token> {
    let mut tokens = Vec::new();
    let mut pos = 0;
    let n = symbols.len();
    while pos < n {
        let start = pos;
        let sym = &symbols[pos];
        let mut error = None;
        let kind = if sym.is_space() {
            pos = scan_while(symbols, pos, Symbol::is_space);
            TokenKind::Space
        } else if sym.is_char('(') && symbols.get(pos + 1).is_some_and(|s| s.is_char('*')) {
            match (pos + 2..n.saturating_sub(1))
                .find(|&i| symbols[i].is_char('*') && symbols[i + 1].is_char(')'))
            {
                Some(i) => {
                    pos = i + 2;
                    TokenKind::Comment
                }
                None => {
                    pos = n;
                    error = Some("unterminated comment".to_string());
                    TokenKind::Error
                }
            }
        } else if sym.is_char('"') {
            let mut i = pos + 1;
            let mut closed = false;
            while i < n {
                if symbols[i].is_char('\\') {
                    i += 2;
                } else if symbols[i].is_char('"') {
                    i += 1;
                    closed = true;
                    break;
                } else {
                    i += 1;
                }
            }
            if closed {
                pos = i;
                TokenKind::String
            } else {
                pos = n;
                error = Some("unterminated quoted string".to_string());
                TokenKind::Error
            }
        } else if sym.is_letter() {
            pos = scan_while(symbols, pos + 1, Symbol::is_quasi_letter);
            let text = symbols_to_string(&symbols[start..pos]);
            match table.kind(&text) {
                Some(KeywordKind::Command) => TokenKind::Command,
                Some(KeywordKind::Minor) => TokenKind::Keyword,
                None => TokenKind::Ident,
            }
        } else if sym.is_digit() {
            pos = scan_while(symbols, pos, Symbol::is_digit);
            TokenKind::Number
        } else if let Some((len, kind)) = table.match_symbolic(&symbols[pos..]) {
            pos += len;
            match kind {
                KeywordKind::Command => TokenKind::Command,
                KeywordKind::Minor => TokenKind::Keyword,
            }
        } else {
            pos += 1;
            error = Some(format!("bad input {:?}", sym.to_string()));
            TokenKind::Error
        };
        tokens.push(Token {
            kind,
            text: symbols_to_string(&symbols[start..pos]),
            range: start..pos,
            error,
        });
    }
    tokens
}

fn scan_while(symbols: &[Symbol], from: usize, pred: impl Fn(&Symbol) -> bool) -> usize {
    symbols[from..]
        .iter()
        .position(|s| !pred(s))
        .map_or(symbols.len(), |i| from + i)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CommandSpan {
    /// Leading command keyword, or empty for material before the first one.
    pub name: String,
    pub tokens: Vec<Token>,
    pub source: String,
}

impl CommandSpan {
    pub fn is_ignored(&self) -> bool {
        self.name.is_empty()
    }

    pub fn proper_tokens(&self) -> impl Iterator<Item = &Token> {
        self.tokens.iter().filter(|t| t.is_proper())
    }
}

/// Partitions tokens into command spans: every command keyword starts a
/// new span, and anything before the first one forms an unnamed span.
pub fn parse_spans(tokens: &[Token]) -> Vec<CommandSpan> {
    let mut spans: Vec<CommandSpan> = Vec::new();
    for token in tokens {
        let starts = token.kind == TokenKind::Command || spans.is_empty();
        if starts {
            spans.push(CommandSpan {
                name: if token.kind == TokenKind::Command {
                    token.text.clone()
                } else {
                    String::new()
                },
                tokens: Vec::new(),
                source: String::new(),
            });
        }
        let span = spans.last_mut().unwrap();
        span.source.push_str(&token.text);
        span.tokens.push(token.clone());
    }
    spans
}

/// Convenience composition of the three READ steps.
pub fn read_spans(table: &KeywordTable, text: &str) -> Vec<CommandSpan> {
    parse_spans(&tokenize(table, &scan_symbols(text)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn table() -> KeywordTable {
        KeywordTable::new()
            .with_command("def")
            .with_command("print")
            .with_minor("=")
            .with_minor("+")
    }

    fn kinds(tokens: &[Token]) -> Vec<(TokenKind, &str)> {
        tokens.iter().map(|t| (t.kind, t.text.as_str())).collect()
    }

    #[test]
    fn plain_symbols() {
        assert_eq!(scan_symbols("ab"), vec![Symbol::Char('a'), Symbol::Char('b')]);
    }

    #[test]
    fn named_symbol_is_atomic() {
        assert_eq!(
            scan_symbols("a\\<forall>b"),
            vec![
                Symbol::Char('a'),
                Symbol::Named("forall".into()),
                Symbol::Char('b')
            ]
        );
    }

    #[test]
    fn unterminated_named_symbol_falls_back() {
        let syms: Vec<String> = scan_symbols("a\\<for").iter().map(|s| s.to_string()).collect();
        assert_eq!(syms, ["a", "\\", "<", "f", "o", "r"]);
        assert_eq!(scan_symbols("\\<>").len(), 3);
    }

    #[test]
    fn tokenize_empty() {
        assert!(tokenize(&table(), &[]).is_empty());
    }

    #[test]
    fn tokenize_def() {
        let toks = tokenize(&table(), &scan_symbols("def x = 1"));
        assert_eq!(
            kinds(&toks),
            vec![
                (TokenKind::Command, "def"),
                (TokenKind::Space, " "),
                (TokenKind::Ident, "x"),
                (TokenKind::Space, " "),
                (TokenKind::Keyword, "="),
                (TokenKind::Space, " "),
                (TokenKind::Number, "1"),
            ]
        );
        assert_eq!(toks[6].range, 8..9);
    }

    #[test]
    fn unterminated_string_is_one_error_token() {
        let toks = tokenize(&table(), &scan_symbols("\"unterminated"));
        assert_eq!(toks.len(), 1);
        assert_eq!(toks[0].kind, TokenKind::Error);
        assert_eq!(toks[0].error.as_deref(), Some("unterminated quoted string"));
        assert_eq!(toks[0].range, 0..13);
    }

    #[test]
    fn unterminated_comment() {
        let toks = tokenize(&table(), &scan_symbols("def (* open"));
        assert_eq!(toks.last().unwrap().error.as_deref(), Some("unterminated comment"));
    }

    #[test]
    fn strings_and_comments() {
        let toks = tokenize(&table(), &scan_symbols(r#"(* c *)"a\"b""#));
        assert_eq!(
            kinds(&toks),
            vec![(TokenKind::Comment, "(* c *)"), (TokenKind::String, r#""a\"b""#)]
        );
        assert_eq!(toks[1].unquoted().unwrap(), "a\"b");
    }

    #[test]
    fn spans_split_on_commands() {
        assert!(parse_spans(&[]).is_empty());
        let spans = read_spans(&table(), "def x = 1 def y = 2");
        assert_eq!(spans.len(), 2);
        assert!(spans.iter().all(|s| s.name == "def"));
        assert_eq!(spans[0].source, "def x = 1 ");
    }

    #[test]
    fn leading_junk_forms_unnamed_span() {
        let spans = read_spans(&table(), "junk def x = 1");
        assert_eq!(spans.len(), 2);
        assert_eq!(spans[0].name, "");
        assert_eq!(spans[0].source, "junk ");
        assert_eq!(spans[1].name, "def");
    }

    #[test]
    fn longest_symbolic_keyword_wins() {
        let t = table().with_minor("==");
        let toks = tokenize(&t, &scan_symbols("a==b=c"));
        assert_eq!(toks[1].text, "==");
        assert_eq!(toks[3].text, "=");
        let bad = tokenize(&t, &scan_symbols("#"));
        assert_eq!(bad[0].kind, TokenKind::Error);
    }

    #[test]
    fn large_input_is_fast() {
        let text = "def x = 1 + 2 (* note *) print \"s\" ".repeat(3000);
        assert!(text.len() > 100_000);
        let start = std::time::Instant::now();
        let spans = read_spans(&table(), &text);
        assert_eq!(spans.len(), 6000);
        assert!(start.elapsed() < std::time::Duration::from_millis(500));
    }

    fn source_text() -> impl Strategy<Value = String> {
        proptest::collection::vec(
            prop_oneof![
                Just("def".to_string()),
                Just("print".to_string()),
                Just(" ".to_string()),
                Just("=".to_string()),
                Just("\"".to_string()),
                Just("(*".to_string()),
                Just("*)".to_string()),
                Just("\\<alpha>".to_string()),
                Just("\\<".to_string()),
                Just("x".to_string()),
                Just("7".to_string()),
                Just("#".to_string()),
                Just("ü".to_string()),
                Just("\n".to_string()),
            ],
            0..40,
        )
        .prop_map(|parts| parts.concat())
    }

    fn boundaries(spans: &[CommandSpan]) -> Vec<usize> {
        let mut acc = 0;
        spans
            .iter()
            .map(|s| {
                acc += s.source.len();
                acc
            })
            .collect()
    }

    proptest! {
        #[test]
        fn read_is_lossless(text in source_text()) {
            let symbols = scan_symbols(&text);
            prop_assert_eq!(symbols_to_string(&symbols), text.clone());
            let tokens = tokenize(&table(), &symbols);
            let joined: String = tokens.iter().map(|t| t.text.as_str()).collect();
            prop_assert_eq!(&joined, &text);
            let spans = parse_spans(&tokens);
            let joined: String = spans.iter().map(|s| s.source.as_str()).collect();
            prop_assert_eq!(joined, text);
        }

        #[test]
        fn minor_keywords_keep_boundaries(text in source_text()) {
            let before = boundaries(&read_spans(&table(), &text));
            let after = boundaries(&read_spans(&table().with_minor("x"), &text));
            prop_assert_eq!(before, after);
        }

        #[test]
        fn command_keywords_only_split(text in source_text()) {
            let before = boundaries(&read_spans(&table(), &text));
            let after = boundaries(&read_spans(&table().with_command("x"), &text));
            for b in &before {
                prop_assert!(after.contains(b));
            }
        }
    }
}
