//! Java 8 lexical analysis and the token normalization applied to every
//! method before it enters the search corpus or the language model.
//!
//! The lexer produces a flat token stream with whitespace and comments
//! removed. [`normalize`] then replaces numeric constants with `<num_val>`
//! and string/char constants with `<str_val>`, and [`mark_clone`] wraps a
//! method body in `<soc>` / `<eoc>`.
//!
//! Meta-tokens are lexed atomically, so a normalized stream written out with
//! single spaces lexes back to the same token texts.

use std::fmt;
use std::ops::Deref;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const START_OF_CLONE: &str = "<soc>";
pub const END_OF_CLONE: &str = "<eoc>";
pub const NUM_VAL: &str = "<num_val>";
pub const STR_VAL: &str = "<str_val>";
pub const UNKNOWN: &str = "<unk>";

/// Every meta-token the pipeline knows about.
pub const META_TOKENS: [&str; 5] = [START_OF_CLONE, END_OF_CLONE, NUM_VAL, STR_VAL, UNKNOWN];

/// Java 8 reserved keywords plus the `true`, `false` and `null` literals,
/// which are kept verbatim rather than replaced.
const KEYWORDS: [&str; 53] = [
    "abstract",
    "assert",
    "boolean",
    "break",
    "byte",
    "case",
    "catch",
    "char",
    "class",
    "const",
    "continue",
    "default",
    "do",
    "double",
    "else",
    "enum",
    "extends",
    "final",
    "finally",
    "float",
    "for",
    "goto",
    "if",
    "implements",
    "import",
    "instanceof",
    "int",
    "interface",
    "long",
    "native",
    "new",
    "package",
    "private",
    "protected",
    "public",
    "return",
    "short",
    "static",
    "strictfp",
    "super",
    "switch",
    "synchronized",
    "this",
    "throw",
    "throws",
    "transient",
    "try",
    "void",
    "volatile",
    "while",
    "true",
    "false",
    "null",
];

// Longest first so a greedy scan picks the longest operator.
const OPERATORS: [&str; 41] = [
    ">>>=", "<<=", ">>=", ">>>", "...", "->", "::", "++", "--", "&&", "||", "==", "!=", "<=", ">=",
    "+=", "-=", "*=", "/=", "&=", "|=", "^=", "%=", "<<", ">>", "=", ">", "<", "!", "~", "?", ":",
    "+", "-", "*", "/", "&", "|", "^", "%", "@",
];

const SEPARATORS: [char; 9] = ['(', ')', '{', '}', '[', ']', ';', ',', '.'];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TokenKind {
    Identifier,
    Keyword,
    Operator,
    Separator,
    NumericLiteral,
    StringLiteral,
    CharLiteral,
    Meta,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Token {
    pub kind: TokenKind,
    pub text: String,
}

impl Token {
    pub fn new(kind: TokenKind, text: impl Into<String>) -> Self {
        Self {
            kind,
            text: text.into(),
        }
    }

    pub fn meta(text: &str) -> Self {
        debug_assert!(META_TOKENS.contains(&text));
        Self::new(TokenKind::Meta, text)
    }

    /// Rebuilds a token from its stored text, e.g. when loading a corpus file
    /// or ingesting externally generated output.
    ///
    /// Text that does not lex to exactly one token is kept as an identifier.
    pub fn from_text(text: &str) -> Self {
        match lex(text) {
            Ok(seq) if seq.len() == 1 => seq.0.into_iter().next().unwrap(),
            _ => Self::new(TokenKind::Identifier, text),
        }
    }

    pub fn is(&self, text: &str) -> bool {
        self.text == text
    }
}

impl AsRef<str> for Token {
    fn as_ref(&self) -> &str {
        &self.text
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text)
    }
}

/// An ordered run of tokens with no whitespace or comments.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSequence(pub Vec<Token>);

impl TokenSequence {
    pub fn new() -> Self {
        Self(Vec::new())
    }

    /// Builds a sequence from token texts, classifying each one.
    pub fn from_texts<S: AsRef<str>>(texts: impl IntoIterator<Item = S>) -> Self {
        texts
            .into_iter()
            .map(|t| Token::from_text(t.as_ref()))
            .collect()
    }

    pub fn texts(&self) -> Vec<&str> {
        self.0.iter().map(|t| t.text.as_str()).collect()
    }

    pub fn into_texts(self) -> Vec<String> {
        self.0.into_iter().map(|t| t.text).collect()
    }

    pub fn push(&mut self, token: Token) {
        self.0.push(token);
    }

    pub fn into_inner(self) -> Vec<Token> {
        self.0
    }

    /// True when the sequence is a marked clone: `<soc>` first, `<eoc>`
    /// last, and neither marker anywhere else.
    pub fn is_marked_clone(&self) -> bool {
        let n = self.0.len();
        n >= 2
            && self.0[0].is(START_OF_CLONE)
            && self.0[n - 1].is(END_OF_CLONE)
            && self.0[1..n - 1]
                .iter()
                .all(|t| !t.is(START_OF_CLONE) && !t.is(END_OF_CLONE))
    }
}

impl Deref for TokenSequence {
    type Target = [Token];

    fn deref(&self) -> &[Token] {
        &self.0
    }
}

impl FromIterator<Token> for TokenSequence {
    fn from_iter<I: IntoIterator<Item = Token>>(iter: I) -> Self {
        Self(iter.into_iter().collect())
    }
}

impl IntoIterator for TokenSequence {
    type Item = Token;
    type IntoIter = std::vec::IntoIter<Token>;

    fn into_iter(self) -> Self::IntoIter {
        self.0.into_iter()
    }
}

impl<'a> IntoIterator for &'a TokenSequence {
    type Item = &'a Token;
    type IntoIter = std::slice::Iter<'a, Token>;

    fn into_iter(self) -> Self::IntoIter {
        self.0.iter()
    }
}

impl From<Vec<Token>> for TokenSequence {
    fn from(tokens: Vec<Token>) -> Self {
        Self(tokens)
    }
}

/// Space-separated token texts; the on-disk and display form of a sequence.
impl fmt::Display for TokenSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, tok) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            f.write_str(&tok.text)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LexError {
    #[error("unterminated string or char literal at byte {offset} (line {line})")]
    UnterminatedString { offset: usize, line: usize },
    #[error("unterminated block comment at byte {offset} (line {line})")]
    UnterminatedComment { offset: usize, line: usize },
    #[error("unknown character {ch:?} at byte {offset} (line {line})")]
    UnknownCharacter {
        ch: char,
        offset: usize,
        line: usize,
    },
}

impl LexError {
    pub fn kind_name(&self) -> &'static str {
        match self {
            LexError::UnterminatedString { .. } => "UnterminatedString",
            LexError::UnterminatedComment { .. } => "UnterminatedComment",
            LexError::UnknownCharacter { .. } => "UnknownCharacter",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MarkError {
    #[error("sequence already contains a <soc> or <eoc> marker")]
    AlreadyMarked,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TokenizeError {
    #[error(transparent)]
    Lex(#[from] LexError),
    #[error(transparent)]
    Mark(#[from] MarkError),
}

impl TokenizeError {
    pub fn kind_name(&self) -> &'static str {
        match self {
            TokenizeError::Lex(e) => e.kind_name(),
            TokenizeError::Mark(_) => "AlreadyMarked",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LexOptions {
    /// Map unknown characters to `<unk>` instead of failing.
    pub lenient: bool,
}

impl LexOptions {
    pub fn lenient() -> Self {
        Self { lenient: true }
    }
}

/// Lexes `source` with the strict default options.
pub fn lex(source: &str) -> Result<TokenSequence, LexError> {
    lex_with(source, LexOptions::default())
}

pub fn lex_with(source: &str, options: LexOptions) -> Result<TokenSequence, LexError> {
    Lexer::new(source, options).run()
}

/// Replaces literal values with their meta-tokens; length is preserved.
///
/// The replaced tokens become `meta` tokens, which is also what the lexer
/// yields when it reads `<num_val>` / `<str_val>` back from a corpus file.
pub fn normalize(tokens: TokenSequence) -> TokenSequence {
    tokens
        .into_iter()
        .map(|tok| match tok.kind {
            TokenKind::NumericLiteral => Token::meta(NUM_VAL),
            TokenKind::StringLiteral | TokenKind::CharLiteral => Token::meta(STR_VAL),
            _ => tok,
        })
        .collect()
}

/// Wraps a method body in `<soc>` ... `<eoc>`.
pub fn mark_clone(tokens: TokenSequence) -> Result<TokenSequence, MarkError> {
    if tokens
        .iter()
        .any(|t| t.is(START_OF_CLONE) || t.is(END_OF_CLONE))
    {
        return Err(MarkError::AlreadyMarked);
    }
    let mut out = Vec::with_capacity(tokens.len() + 2);
    out.push(Token::meta(START_OF_CLONE));
    out.extend(tokens);
    out.push(Token::meta(END_OF_CLONE));
    Ok(TokenSequence(out))
}

/// Lex, normalize and mark one method's source text.
pub fn tokenize_method(source: &str, options: LexOptions) -> Result<TokenSequence, TokenizeError> {
    let tokens = lex_with(source, options)?;
    Ok(mark_clone(normalize(tokens))?)
}

/// Lex and normalize a free-form stream (e.g. a held-out token stream that
/// already carries `<soc>` / `<eoc>` markers).
pub fn tokenize_stream(source: &str, options: LexOptions) -> Result<TokenSequence, LexError> {
    Ok(normalize(lex_with(source, options)?))
}

pub fn is_keyword(text: &str) -> bool {
    KEYWORDS.contains(&text)
}

struct Lexer<'a> {
    src: &'a str,
    bytes: &'a [u8],
    pos: usize,
    line: usize,
    options: LexOptions,
    out: Vec<Token>,
}

impl<'a> Lexer<'a> {
    fn new(src: &'a str, options: LexOptions) -> Self {
        Self {
            src,
            bytes: src.as_bytes(),
            pos: 0,
            line: 1,
            options,
            out: Vec::new(),
        }
    }

    fn run(mut self) -> Result<TokenSequence, LexError> {
        while let Some(c) = self.peek_char() {
            let start = self.pos;
            match c {
                '\n' => {
                    self.line += 1;
                    self.pos += 1;
                }
                c if c.is_whitespace() => self.pos += c.len_utf8(),
                '/' if self.at("//") => self.skip_line_comment(),
                '/' if self.at("/*") => self.skip_block_comment()?,
                '"' => self.quoted('"', TokenKind::StringLiteral)?,
                '\'' => self.quoted('\'', TokenKind::CharLiteral)?,
                '<' if self.meta_token().is_some() => {
                    let meta = self.meta_token().unwrap();
                    self.pos += meta.len();
                    self.out.push(Token::meta(meta));
                }
                c if c.is_ascii_digit() => self.number(),
                '.' if self
                    .byte_at(self.pos + 1)
                    .is_some_and(|b| b.is_ascii_digit()) =>
                {
                    self.number()
                }
                c if is_ident_start(c) => self.identifier(),
                _ => {
                    if let Some(op) = OPERATORS.iter().find(|op| self.at(op)) {
                        self.pos += op.len();
                        self.push(TokenKind::Operator, start);
                    } else if SEPARATORS.contains(&c) {
                        self.pos += 1;
                        self.push(TokenKind::Separator, start);
                    } else if self.options.lenient {
                        self.pos += c.len_utf8();
                        self.out.push(Token::meta(UNKNOWN));
                    } else {
                        return Err(LexError::UnknownCharacter {
                            ch: c,
                            offset: start,
                            line: self.line,
                        });
                    }
                }
            }
        }
        Ok(TokenSequence(self.out))
    }

    fn peek_char(&self) -> Option<char> {
        self.src[self.pos..].chars().next()
    }

    fn byte_at(&self, i: usize) -> Option<u8> {
        self.bytes.get(i).copied()
    }

    fn at(&self, s: &str) -> bool {
        self.src[self.pos..].starts_with(s)
    }

    fn meta_token(&self) -> Option<&'static str> {
        META_TOKENS.iter().copied().find(|m| self.at(m))
    }

    fn push(&mut self, kind: TokenKind, start: usize) {
        self.out.push(Token::new(kind, &self.src[start..self.pos]));
    }

    fn skip_line_comment(&mut self) {
        match self.src[self.pos..].find('\n') {
            Some(i) => self.pos += i,
            None => self.pos = self.src.len(),
        }
    }

    fn skip_block_comment(&mut self) -> Result<(), LexError> {
        let (offset, line) = (self.pos, self.line);
        match self.src[self.pos + 2..].find("*/") {
            Some(i) => {
                let end = self.pos + 2 + i + 2;
                self.line += self.src[self.pos..end].matches('\n').count();
                self.pos = end;
                Ok(())
            }
            None => Err(LexError::UnterminatedComment { offset, line }),
        }
    }

    fn quoted(&mut self, quote: char, kind: TokenKind) -> Result<(), LexError> {
        let start = self.pos;
        let err = LexError::UnterminatedString {
            offset: start,
            line: self.line,
        };
        let mut chars = self.src[start + 1..].char_indices();
        while let Some((i, c)) = chars.next() {
            match c {
                '\\' => {
                    if chars.next().is_none() {
                        return Err(err);
                    }
                }
                '\n' | '\r' => return Err(err),
                c if c == quote => {
                    self.pos = start + 1 + i + 1;
                    self.push(kind, start);
                    return Ok(());
                }
                _ => {}
            }
        }
        Err(err)
    }

    fn identifier(&mut self) {
        let start = self.pos;
        let len: usize = self.src[start..]
            .chars()
            .take_while(|&c| is_ident_part(c))
            .map(char::len_utf8)
            .sum();
        self.pos += len;
        let text = &self.src[start..self.pos];
        let kind = if is_keyword(text) {
            TokenKind::Keyword
        } else {
            TokenKind::Identifier
        };
        self.push(kind, start);
    }

    fn take_while_bytes(&mut self, pred: impl Fn(u8) -> bool) {
        while self.byte_at(self.pos).is_some_and(&pred) {
            self.pos += 1;
        }
    }

    fn eat_exponent(&mut self, markers: &[u8]) {
        if self.byte_at(self.pos).is_some_and(|b| markers.contains(&b)) {
            let mut i = self.pos + 1;
            if matches!(self.byte_at(i), Some(b'+') | Some(b'-')) {
                i += 1;
            }
            if self.byte_at(i).is_some_and(|b| b.is_ascii_digit()) {
                self.pos = i;
                self.take_while_bytes(|b| b.is_ascii_digit() || b == b'_');
            }
        }
    }

    /// Integer (decimal, octal, hex, binary) and floating point literals,
    /// including Java suffixes and underscores.
    fn number(&mut self) {
        let start = self.pos;
        let lower = |b: Option<u8>| b.map(|b| b.to_ascii_lowercase());
        if self.byte_at(start) == Some(b'0') && lower(self.byte_at(start + 1)) == Some(b'x') {
            self.pos += 2;
            self.take_while_bytes(|b| b.is_ascii_hexdigit() || b == b'_');
            if self.byte_at(self.pos) == Some(b'.') {
                self.pos += 1;
                self.take_while_bytes(|b| b.is_ascii_hexdigit() || b == b'_');
            }
            self.eat_exponent(b"pP");
            if lower(self.byte_at(self.pos)).is_some_and(|b| matches!(b, b'l' | b'f' | b'd')) {
                self.pos += 1;
            }
        } else if self.byte_at(start) == Some(b'0')
            && lower(self.byte_at(start + 1)) == Some(b'b')
            && self
                .byte_at(start + 2)
                .is_some_and(|b| b == b'0' || b == b'1')
        {
            self.pos += 2;
            self.take_while_bytes(|b| b == b'0' || b == b'1' || b == b'_');
            if lower(self.byte_at(self.pos)) == Some(b'l') {
                self.pos += 1;
            }
        } else {
            self.take_while_bytes(|b| b.is_ascii_digit() || b == b'_');
            // `1.` `1.5` `1.e3` `1.f` are floats; `1..` and `1.x` are not
            let fraction_follows = match self.byte_at(self.pos + 1) {
                Some(b'.') => false,
                Some(b) if is_ident_start(b as char) => b"eEfFdD".contains(&b),
                _ => true,
            };
            if self.byte_at(self.pos) == Some(b'.') && fraction_follows {
                self.pos += 1;
                self.take_while_bytes(|b| b.is_ascii_digit() || b == b'_');
            }
            self.eat_exponent(b"eE");
            if lower(self.byte_at(self.pos)).is_some_and(|b| matches!(b, b'l' | b'f' | b'd')) {
                self.pos += 1;
            }
        }
        self.push(TokenKind::NumericLiteral, start);
    }
}

fn is_ident_start(c: char) -> bool {
    c.is_alphabetic() || c == '_' || c == '$'
}

fn is_ident_part(c: char) -> bool {
    c.is_alphanumeric() || c == '_' || c == '$'
}
